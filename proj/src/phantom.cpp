#include "thermoviab/phantom.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "thermoviab/error.hpp"
#include "thermoviab/rng.hpp"

namespace thermoviab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

double dist2(Point2 a, Point2 b) { return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y); }

constexpr std::uint64_t kStructureStream = 0x9e3779b97f4a7c15ULL;
constexpr std::uint64_t kNoiseStream = 0xbf58476d1ce4e5b9ULL;

json spec_json(const PhantomSpec& s) {
  return {{"width", s.width},
          {"height", s.height},
          {"skin_temp", s.skin_temp},
          {"gradient_x", s.gradient_x},
          {"gradient_y", s.gradient_y},
          {"blob_count", s.blob_count},
          {"blob_amplitude", s.blob_amplitude},
          {"disk_center", {s.disk_center.x, s.disk_center.y}},
          {"disk_radius", s.disk_radius},
          {"cooling_depth", s.cooling_depth},
          {"skin_tau", s.skin_tau},
          {"nodule_center", {s.nodule_center.x, s.nodule_center.y}},
          {"nodule_radius", s.nodule_radius},
          {"viable", s.viable},
          {"viable_offset", s.viable_offset},
          {"viable_tau", s.viable_tau},
          {"noise_sigma", s.noise_sigma},
          {"jitter", s.jitter},
          {"duration", s.duration},
          {"frame_rate", s.frame_rate},
          {"precool_time", s.precool_time},
          {"seed", s.seed},
          {"case_id", s.case_id},
          {"participant_id", s.participant_id}};
}

PhantomSpec spec_from_json(const json& j) {
  PhantomSpec s;
  s.width = j.at("width");
  s.height = j.at("height");
  s.skin_temp = j.at("skin_temp");
  s.gradient_x = j.at("gradient_x");
  s.gradient_y = j.at("gradient_y");
  s.blob_count = j.at("blob_count");
  s.blob_amplitude = j.at("blob_amplitude");
  s.disk_center = {j.at("disk_center").at(0), j.at("disk_center").at(1)};
  s.disk_radius = j.at("disk_radius");
  s.cooling_depth = j.at("cooling_depth");
  s.skin_tau = j.at("skin_tau");
  s.nodule_center = {j.at("nodule_center").at(0), j.at("nodule_center").at(1)};
  s.nodule_radius = j.at("nodule_radius");
  s.viable = j.at("viable");
  s.viable_offset = j.at("viable_offset");
  s.viable_tau = j.at("viable_tau");
  s.noise_sigma = j.at("noise_sigma");
  s.jitter = j.at("jitter");
  s.duration = j.at("duration");
  s.frame_rate = j.at("frame_rate");
  s.precool_time = j.at("precool_time");
  s.seed = j.at("seed");
  s.case_id = j.at("case_id");
  s.participant_id = j.at("participant_id");
  return s;
}

}  // namespace

void PhantomSpec::validate() const {
  auto require = [](bool ok, const char* what) {
    if (!ok) fail(ErrorCode::InvalidSpec, std::string("phantom spec: ") + what);
  };
  require(width >= 16 && height >= 16, "frame must be at least 16x16");
  require(disk_radius > 0 && nodule_radius > 0, "radii must be positive");
  require(cooling_depth > 0 && skin_tau > 0 && viable_tau > 0, "cooling constants must be positive");
  require(viable_tau <= skin_tau, "nodule recovery must not be slower than skin");
  require(noise_sigma >= 0 && jitter >= 0 && blob_amplitude >= 0 && blob_count >= 0, "negative nuisance");
  require(duration > 0 && duration <= kMaxTimestamp && frame_rate > 0, "bad timing");
  require(precool_time < 0, "precool image must precede cooling");
  require(viable_offset >= 0, "viable offset must be non-negative");
  require(std::sqrt(dist2(nodule_center, disk_center)) + nodule_radius <= disk_radius,
          "nodule must lie inside the cooled disk");
  require(!case_id.empty() && !participant_id.empty(), "ids must be set");
}

PhantomField::PhantomField(const PhantomSpec& spec) : spec_(spec) {
  Rng rng(spec.seed ^ kStructureStream);
  const double scale = std::min(spec.width, spec.height);
  for (int b = 0; b < spec.blob_count; ++b) {
    Blob blob;
    blob.center = {rng.uniform(0.0, spec.width), rng.uniform(0.0, spec.height)};
    blob.sigma = rng.uniform(0.03, 0.08) * scale;
    blob.amplitude = rng.uniform(-spec.blob_amplitude, spec.blob_amplitude);
    blobs_.push_back(blob);
  }
}

double PhantomField::base(Point2 p) const {
  double v = spec_.skin_temp + spec_.gradient_x * (p.x / spec_.width - 0.5) +
             spec_.gradient_y * (p.y / spec_.height - 0.5);
  for (const auto& b : blobs_) v += b.amplitude * std::exp(-dist2(p, b.center) / (2.0 * b.sigma * b.sigma));
  return v;
}

bool PhantomField::in_disk(Point2 p) const {
  return dist2(p, spec_.disk_center) <= spec_.disk_radius * spec_.disk_radius;
}

bool PhantomField::in_nodule(Point2 p) const {
  return dist2(p, spec_.nodule_center) <= spec_.nodule_radius * spec_.nodule_radius;
}

double PhantomField::temperature(Point2 p, double t) const {
  const double delta = spec_.viable ? spec_.viable_offset : 0.0;
  const bool nodule = in_nodule(p);
  double v = base(p);
  if (t < 0.0) return nodule ? v + delta : v;
  if (in_disk(p)) {
    const double tau = nodule && spec_.viable ? spec_.viable_tau : spec_.skin_tau;
    v -= spec_.cooling_depth * std::exp(-t / tau);
  }
  if (nodule && spec_.viable) v += delta * (1.0 - std::exp(-t / spec_.viable_tau));
  return v;
}

void PhantomField::render(double t, double dx, double dy, std::vector<float>& out) const {
  const int w = spec_.width;
  const int h = spec_.height;
  out.assign(static_cast<std::size_t>(w) * h, 0.0f);
  // Separable blobs: exp(-r^2/2s^2) = ex(x) * ey(y).
  std::vector<double> field(static_cast<std::size_t>(w) * h);
  for (int r = 0; r < h; ++r) {
    const double y = r + 0.5 - dy;
    for (int c = 0; c < w; ++c) {
      const double x = c + 0.5 - dx;
      field[static_cast<std::size_t>(r) * w + c] =
          spec_.skin_temp + spec_.gradient_x * (x / w - 0.5) + spec_.gradient_y * (y / h - 0.5);
    }
  }
  std::vector<double> ex(w);
  std::vector<double> ey(h);
  for (const auto& b : blobs_) {
    const double k = 1.0 / (2.0 * b.sigma * b.sigma);
    for (int c = 0; c < w; ++c) {
      const double x = c + 0.5 - dx - b.center.x;
      ex[c] = std::exp(-x * x * k);
    }
    for (int r = 0; r < h; ++r) {
      const double y = r + 0.5 - dy - b.center.y;
      ey[r] = b.amplitude * std::exp(-y * y * k);
    }
    for (int r = 0; r < h; ++r) {
      double* row = &field[static_cast<std::size_t>(r) * w];
      for (int c = 0; c < w; ++c) row[c] += ey[r] * ex[c];
    }
  }
  const double delta = spec_.viable ? spec_.viable_offset : 0.0;
  double disk_term = 0.0;
  double nodule_term = 0.0;
  if (t < 0.0) {
    nodule_term = delta;
  } else {
    disk_term = -spec_.cooling_depth * std::exp(-t / spec_.skin_tau);
    nodule_term = spec_.viable ? -spec_.cooling_depth * std::exp(-t / spec_.viable_tau) +
                                     delta * (1.0 - std::exp(-t / spec_.viable_tau))
                               : disk_term;
  }
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      const Point2 p{c + 0.5 - dx, r + 0.5 - dy};
      double v = field[static_cast<std::size_t>(r) * w + c];
      if (in_nodule(p)) {
        v += nodule_term;
      } else if (t >= 0.0 && in_disk(p)) {
        v += disk_term;
      }
      out[static_cast<std::size_t>(r) * w + c] = static_cast<float>(v);
    }
  }
}

PhantomCase generate_case(const PhantomSpec& spec) {
  spec.validate();
  PhantomField field(spec);
  Rng noise(spec.seed ^ kNoiseStream);
  Rng jitter(spec.seed);

  PhantomCase out;
  out.truth.spec = spec;
  auto draw_jitter = [&] {
    const double dx = jitter.uniform(-spec.jitter, spec.jitter);
    const double dy = jitter.uniform(-spec.jitter, spec.jitter);
    return std::pair{dx, dy};
  };
  auto make_frame = [&](double t, double dx, double dy) {
    ThermalFrame f(spec.width, spec.height, t);
    field.render(t, dx, dy, f.temps);
    if (spec.noise_sigma > 0.0) {
      for (auto& v : f.temps) v = static_cast<float>(v + spec.noise_sigma * noise.normal());
    }
    out.truth.jitter.push_back({t, dx, dy});
    return f;
  };

  const auto [pdx, pdy] = draw_jitter();
  out.sequence.precool = make_frame(spec.precool_time, pdx, pdy);
  out.sequence.nominal_rate = spec.frame_rate;
  const auto n_frames = static_cast<int>(std::floor(spec.duration * spec.frame_rate + 1e-9)) + 1;
  for (int k = 0; k < n_frames; ++k) {
    const double t = k / spec.frame_rate;
    // Frame 0 is the registration reference and defines the coordinate system.
    const auto [dx, dy] = k == 0 ? std::pair{0.0, 0.0} : draw_jitter();
    out.sequence.frames.push_back(make_frame(t, dx, dy));
  }

  out.truth.mask = RoiMask(spec.width, spec.height);
  for (int r = 0; r < spec.height; ++r) {
    for (int c = 0; c < spec.width; ++c) out.truth.mask.at(r, c) = field.in_disk({c + 0.5, r + 0.5}) ? 1 : 0;
  }

  out.record.case_id = spec.case_id;
  out.record.participant_id = spec.participant_id;
  out.record.label = spec.viable ? Label::Viable : Label::Nonviable;
  out.record.provenance = Provenance::Phantom;
  // The technician marks the nodule where it appears in the precool image.
  out.record.annotations.push_back({"n1", {spec.nodule_center.x + pdx, spec.nodule_center.y + pdy}, {}});
  return out;
}

void write_phantom_case(const PhantomCase& phantom, const fs::path& dir) {
  write_case(phantom.record, phantom.sequence, dir);
  write_pgm(phantom.truth.mask, dir / "truth_mask.pgm");
  json jitter = json::array();
  for (const auto& j : phantom.truth.jitter) jitter.push_back({{"t", j.t}, {"dx", j.dx}, {"dy", j.dy}});
  const json truth = {{"true_mask", "truth_mask.pgm"}, {"jitter", jitter}, {"spec", spec_json(phantom.truth.spec)}};
  std::ofstream out(dir / "truth.json");
  if (!out) fail(ErrorCode::IoFailure, "cannot write truth.json in " + dir.string());
  out << truth.dump(2) << "\n";
}

PhantomTruth read_truth(const fs::path& dir) {
  std::ifstream in(dir / "truth.json");
  if (!in) fail(ErrorCode::IoFailure, "no truth.json in " + dir.string());
  const json j = json::parse(in);
  PhantomTruth truth;
  truth.spec = spec_from_json(j.at("spec"));
  truth.mask = read_pgm(dir / j.at("true_mask").get<std::string>());
  for (const auto& e : j.at("jitter")) truth.jitter.push_back({e.at("t"), e.at("dx"), e.at("dy")});
  return truth;
}

std::vector<PhantomSpec> study_specs(int n_cases, double viable_fraction, std::uint64_t seed,
                                     const PhantomSpec& base) {
  if (n_cases < 4) fail(ErrorCode::InvalidSpec, "a study needs at least 4 cases");
  if (!(viable_fraction >= 0.0 && viable_fraction <= 1.0)) fail(ErrorCode::InvalidSpec, "viable fraction outside [0,1]");
  Rng rng(seed);
  const int n_viable = static_cast<int>(std::lround(n_cases * viable_fraction));
  std::vector<bool> viable(n_cases, false);
  for (int i = 0; i < n_viable; ++i) viable[i] = true;
  rng.shuffle(viable.begin(), viable.end());

  const double size_scale = std::min(base.width / 320.0, base.height / 240.0);
  std::vector<PhantomSpec> specs;
  for (int i = 0; i < n_cases; ++i) {
    PhantomSpec s = base;
    char id[32];
    std::snprintf(id, sizeof id, "case-%04d", i);
    s.case_id = id;
    std::snprintf(id, sizeof id, "P%04d", i);
    s.participant_id = id;
    s.seed = rng.next();
    s.viable = viable[i];
    s.skin_temp = base.skin_temp + rng.uniform(-1.0, 1.0);
    s.gradient_x = rng.uniform(-0.3, 0.3);
    s.gradient_y = rng.uniform(-0.3, 0.3);
    s.disk_radius = base.disk_radius * size_scale * rng.uniform(0.8, 1.2);
    s.nodule_radius = base.nodule_radius * size_scale;
    const double margin = 8.0 * size_scale;
    s.disk_center = {rng.uniform(s.disk_radius + margin, s.width - s.disk_radius - margin),
                     rng.uniform(s.disk_radius + margin, s.height - s.disk_radius - margin)};
    const double reach = std::max(0.0, s.disk_radius - s.nodule_radius - 2.0 * margin);
    const double angle = rng.uniform(0.0, 2.0 * 3.14159265358979323846);
    const double radius = reach * std::sqrt(rng.uniform());
    s.nodule_center = {s.disk_center.x + radius * std::cos(angle), s.disk_center.y + radius * std::sin(angle)};
    const double offset = rng.uniform(0.25, 0.6);
    s.viable_offset = s.viable ? offset : 0.0;
    s.viable_tau = s.viable ? base.viable_tau : s.skin_tau;
    specs.push_back(s);
  }
  return specs;
}

std::vector<std::string> generate_study(const fs::path& dir, int n_cases, double viable_fraction, std::uint64_t seed,
                                        const PhantomSpec& base) {
  const auto specs = study_specs(n_cases, viable_fraction, seed, base);
  std::vector<std::string> ids;
  json cases = json::array();
  for (const auto& s : specs) {
    write_phantom_case(generate_case(s), dir / s.case_id);
    ids.push_back(s.case_id);
    cases.push_back({{"case_id", s.case_id}, {"participant_id", s.participant_id}, {"path", s.case_id}});
  }
  const json manifest = {{"seed", seed}, {"viable_fraction", viable_fraction}, {"cases", cases}};
  std::ofstream out(dir / "study.json");
  if (!out) fail(ErrorCode::IoFailure, "cannot write study.json in " + dir.string());
  out << manifest.dump(2) << "\n";
  return ids;
}

}  // namespace thermoviab
