#include "thermoviab/thermal_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>
#include <sstream>

#include <json.hpp>

#include "thermoviab/error.hpp"

namespace thermoviab {

namespace fs = std::filesystem;
using nlohmann::json;

static_assert(std::endian::native == std::endian::little,
              "payload encoding assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'T', 'V', 'F', 'R', 'A', 'M', 'E', 'S'};
constexpr std::uint32_t kPayloadVersion = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return static_cast<std::uint32_t>(p[0]) | static_cast<std::uint32_t>(p[1]) << 8 |
         static_cast<std::uint32_t>(p[2]) << 16 | static_cast<std::uint32_t>(p[3]) << 24;
}

std::vector<std::uint8_t> read_bytes(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::CorruptPayload, "cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const fs::path& path, std::span<const std::uint8_t> bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(ErrorCode::IoFailure, "cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(ErrorCode::IoFailure, "short write to " + path.string());
}

void write_text(const fs::path& path, const std::string& text) {
  write_bytes(path, {reinterpret_cast<const std::uint8_t*>(text.data()), text.size()});
}

json annotations_to_json(const std::vector<NoduleAnnotation>& annotations) {
  json out = json::array();
  for (const auto& a : annotations) {
    json poly = json::array();
    for (const auto& v : a.roi_polygon) poly.push_back({v.x, v.y});
    out.push_back({{"nodule_id", a.nodule_id}, {"point", {a.point.x, a.point.y}}, {"polygon", poly}});
  }
  return out;
}

std::vector<NoduleAnnotation> annotations_from_json(const json& j) {
  std::vector<NoduleAnnotation> out;
  for (const auto& item : j) {
    NoduleAnnotation a;
    a.nodule_id = item.at("nodule_id").get<std::string>();
    const auto& pt = item.at("point");
    a.point = {pt.at(0).get<double>(), pt.at(1).get<double>()};
    if (item.contains("polygon")) {
      for (const auto& v : item.at("polygon")) a.roi_polygon.push_back({v.at(0).get<double>(), v.at(1).get<double>()});
    }
    out.push_back(std::move(a));
  }
  return out;
}

json load_manifest_json(const fs::path& dir) {
  const fs::path path = dir / kManifestName;
  if (!fs::exists(path)) fail(ErrorCode::MissingManifest, "no case.json in " + dir.string());
  std::ifstream in(path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    fail(ErrorCode::MissingManifest, "malformed case.json in " + dir.string() + ": " + e.what());
  }
}

CaseRecord record_from_json(const json& m) {
  CaseRecord r;
  r.case_id = m.at("case_id").get<std::string>();
  r.participant_id = m.at("participant_id").get<std::string>();
  r.label = parse_label(m.at("label").get<std::string>());
  r.provenance = parse_provenance(m.value("provenance", std::string("real")));
  r.sequence_path = m.value("payload", std::string(kPayloadName));
  r.annotations = annotations_from_json(m.at("annotations"));
  return r;
}

}  // namespace

std::string annotations_json(const std::vector<NoduleAnnotation>& annotations) {
  return annotations_to_json(annotations).dump();
}

std::vector<NoduleAnnotation> parse_annotations(std::string_view text) {
  try {
    json j = json::parse(text);
    if (j.is_object() && j.contains("annotations")) j = j.at("annotations");
    if (!j.is_array()) fail(ErrorCode::InvalidAnnotation, "annotations must be a JSON array");
    return annotations_from_json(j);
  } catch (const json::exception& e) {
    fail(ErrorCode::InvalidAnnotation, std::string("malformed annotations: ") + e.what());
  }
}

std::string_view to_string(Label label) {
  switch (label) {
    case Label::Viable: return "viable";
    case Label::Nonviable: return "nonviable";
    case Label::Unknown: return "unknown";
  }
  return "unknown";
}

std::string_view to_string(Provenance provenance) {
  return provenance == Provenance::Phantom ? "phantom" : "real";
}

Label parse_label(std::string_view text) {
  if (text == "viable") return Label::Viable;
  if (text == "nonviable") return Label::Nonviable;
  if (text == "unknown") return Label::Unknown;
  fail(ErrorCode::MissingManifest, "unknown label '" + std::string(text) + "'");
}

Provenance parse_provenance(std::string_view text) {
  if (text == "phantom") return Provenance::Phantom;
  if (text == "real") return Provenance::Real;
  fail(ErrorCode::MissingManifest, "unknown provenance '" + std::string(text) + "'");
}

void ThermalFrame::validate() const {
  if (width <= 0 || height <= 0 || temps.size() != static_cast<std::size_t>(width) * height) {
    fail(ErrorCode::DimensionMismatch, "frame buffer does not match its dimensions");
  }
  for (std::size_t i = 0; i < temps.size(); ++i) {
    const float t = temps[i];
    if (!std::isfinite(t) || t < kMinTemperature || t > kMaxTemperature) {
      fail(ErrorCode::InvalidTemperature,
           "temperature " + std::to_string(t) + " at pixel " + std::to_string(i) + " outside [0, 60] C");
    }
  }
}

void ThermalSequence::validate() const {
  precool.validate();
  if (!(precool.timestamp < 0.0)) {
    fail(ErrorCode::NonMonotonicTimestamps, "precool timestamp must be negative");
  }
  double last = -1.0;
  for (const auto& f : frames) {
    if (f.width != precool.width || f.height != precool.height) {
      fail(ErrorCode::DimensionMismatch, "video frame size differs from the precool image");
    }
    f.validate();
    if (!(f.timestamp > last) || f.timestamp < 0.0) {
      fail(ErrorCode::NonMonotonicTimestamps, "frame timestamps must be strictly increasing from 0");
    }
    last = f.timestamp;
  }
  if (last > kMaxTimestamp) fail(ErrorCode::NonMonotonicTimestamps, "video longer than 125 s");
  if (!(nominal_rate > 0.0)) fail(ErrorCode::DimensionMismatch, "nominal rate must be positive");
}

void CaseRecord::validate(int width, int height) const {
  if (annotations.empty()) fail(ErrorCode::MissingAnnotation, "case " + case_id + " has no nodule annotation");
  for (const auto& a : annotations) {
    if (a.nodule_id.empty()) fail(ErrorCode::InvalidAnnotation, "empty nodule id");
    if (!(a.point.x >= 0.0 && a.point.x < width && a.point.y >= 0.0 && a.point.y < height)) {
      fail(ErrorCode::InvalidAnnotation, "nodule " + a.nodule_id + " point outside the frame");
    }
    if (!a.roi_polygon.empty()) {
      if (a.roi_polygon.size() < 3 || !is_simple_polygon(a.roi_polygon)) {
        fail(ErrorCode::InvalidAnnotation, "nodule " + a.nodule_id + " polygon is not simple");
      }
      if (std::abs(polygon_area(a.roi_polygon)) < 1.0) {
        fail(ErrorCode::DegeneratePolygon, "nodule " + a.nodule_id + " polygon encloses less than one pixel");
      }
    }
  }
}

std::size_t RoiMask::count() const {
  return static_cast<std::size_t>(std::count_if(bits.begin(), bits.end(), [](std::uint8_t b) { return b != 0; }));
}

std::vector<std::uint8_t> encode_payload(const ThermalSequence& sequence) {
  const std::size_t pixels = static_cast<std::size_t>(sequence.width()) * sequence.height();
  std::vector<std::uint8_t> out;
  out.reserve(kPayloadHeaderBytes + (sequence.frames.size() + 1) * pixels * 4);
  for (char c : kMagic) out.push_back(static_cast<std::uint8_t>(c));
  put_u32(out, kPayloadVersion);
  put_u32(out, static_cast<std::uint32_t>(sequence.width()));
  put_u32(out, static_cast<std::uint32_t>(sequence.height()));
  put_u32(out, static_cast<std::uint32_t>(sequence.frames.size() + 1));
  auto append = [&](const ThermalFrame& f) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(f.temps.data());
    out.insert(out.end(), p, p + f.temps.size() * sizeof(float));
  };
  append(sequence.precool);
  for (const auto& f : sequence.frames) append(f);
  return out;
}

std::string sha256_hex(std::span<const std::uint8_t> bytes) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (EVP_Digest(bytes.data(), bytes.size(), digest, &len, EVP_sha256(), nullptr) != 1) {
    fail(ErrorCode::IoFailure, "sha256 failed");
  }
  static constexpr char kHex[] = "0123456789abcdef";
  std::string out;
  for (unsigned int i = 0; i < len; ++i) {
    out.push_back(kHex[digest[i] >> 4]);
    out.push_back(kHex[digest[i] & 15]);
  }
  return out;
}

void write_case(const CaseRecord& record, const ThermalSequence& sequence, const fs::path& dir) {
  record.validate(sequence.width(), sequence.height());
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) fail(ErrorCode::IoFailure, "cannot create " + dir.string() + ": " + ec.message());

  const auto payload = encode_payload(sequence);
  const std::size_t frame_bytes = static_cast<std::size_t>(sequence.width()) * sequence.height() * 4;
  json frames = json::array();
  frames.push_back({{"t_seconds", sequence.precool.timestamp}, {"offset", kPayloadHeaderBytes}});
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    frames.push_back({{"t_seconds", sequence.frames[i].timestamp},
                      {"offset", kPayloadHeaderBytes + (i + 1) * frame_bytes}});
  }
  json m = {
      {"case_id", record.case_id},
      {"participant_id", record.participant_id},
      {"label", to_string(record.label)},
      {"provenance", to_string(record.provenance)},
      {"width", sequence.width()},
      {"height", sequence.height()},
      {"nominal_rate", sequence.nominal_rate},
      {"payload", record.sequence_path},
      {"frames", frames},
      {"checksum_sha256", sha256_hex(payload)},
      {"annotations", annotations_to_json(record.annotations)},
  };
  write_bytes(dir / record.sequence_path, payload);
  write_text(dir / kManifestName, m.dump(2) + "\n");
}

CaseRecord read_manifest(const fs::path& dir) {
  const json m = load_manifest_json(dir);
  try {
    return record_from_json(m);
  } catch (const json::exception& e) {
    fail(ErrorCode::MissingManifest, "case.json in " + dir.string() + " is missing fields: " + e.what());
  }
}

LoadedCase read_case(const fs::path& dir) {
  const json m = load_manifest_json(dir);
  LoadedCase out;
  int width = 0;
  int height = 0;
  std::vector<std::pair<double, std::size_t>> index;
  std::string checksum;
  try {
    out.record = record_from_json(m);
    width = m.at("width").get<int>();
    height = m.at("height").get<int>();
    out.sequence.nominal_rate = m.value("nominal_rate", 1.0);
    checksum = m.at("checksum_sha256").get<std::string>();
    for (const auto& f : m.at("frames")) {
      index.emplace_back(f.at("t_seconds").get<double>(), f.at("offset").get<std::size_t>());
    }
  } catch (const json::exception& e) {
    fail(ErrorCode::MissingManifest, "case.json in " + dir.string() + " is missing fields: " + e.what());
  }
  out.record.validate(width, height);
  if (index.empty()) fail(ErrorCode::DimensionMismatch, "frame index is empty");

  const auto bytes = read_bytes(dir / out.record.sequence_path);
  if (sha256_hex(bytes) != checksum) fail(ErrorCode::CorruptPayload, "payload checksum mismatch in " + dir.string());
  if (bytes.size() < kPayloadHeaderBytes || !std::equal(std::begin(kMagic), std::end(kMagic), bytes.begin())) {
    fail(ErrorCode::CorruptPayload, "payload header missing");
  }
  if (get_u32(&bytes[8]) != kPayloadVersion) fail(ErrorCode::CorruptPayload, "unsupported payload version");
  if (static_cast<int>(get_u32(&bytes[12])) != width || static_cast<int>(get_u32(&bytes[16])) != height ||
      get_u32(&bytes[20]) != index.size()) {
    fail(ErrorCode::DimensionMismatch, "payload header disagrees with manifest");
  }
  const std::size_t pixels = static_cast<std::size_t>(width) * height;
  const std::size_t frame_bytes = pixels * 4;
  if (bytes.size() != kPayloadHeaderBytes + index.size() * frame_bytes) {
    fail(ErrorCode::DimensionMismatch, "payload size disagrees with the frame index");
  }

  auto decode = [&](double t, std::size_t offset) {
    if (offset + frame_bytes > bytes.size()) fail(ErrorCode::DimensionMismatch, "frame offset out of range");
    ThermalFrame f(width, height, t);
    std::memcpy(f.temps.data(), &bytes[offset], frame_bytes);
    return f;
  };
  out.sequence.precool = decode(index[0].first, index[0].second);
  for (std::size_t i = 1; i < index.size(); ++i) {
    out.sequence.frames.push_back(decode(index[i].first, index[i].second));
  }
  out.sequence.validate();
  return out;
}

void write_annotations(const fs::path& dir, const std::vector<NoduleAnnotation>& annotations) {
  json m = load_manifest_json(dir);
  CaseRecord probe;
  probe.annotations = annotations;
  probe.validate(m.at("width").get<int>(), m.at("height").get<int>());
  m["annotations"] = annotations_to_json(annotations);
  write_text(dir / kManifestName, m.dump(2) + "\n");
}

ThermalSequence decimate_to_1hz(const ThermalSequence& sequence) {
  ThermalSequence out;
  out.precool = sequence.precool;
  out.nominal_rate = 1.0;
  if (sequence.frames.empty()) return out;

  const auto buckets = static_cast<std::size_t>(std::floor(sequence.frames.back().timestamp + 0.5)) + 1;
  const std::size_t pixels = sequence.precool.size();
  std::vector<std::vector<std::size_t>> members(buckets);
  for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
    const auto k = static_cast<std::size_t>(std::floor(sequence.frames[i].timestamp + 0.5));
    members[std::min(k, buckets - 1)].push_back(i);
  }
  std::vector<double> acc(pixels);
  for (std::size_t k = 0; k < buckets; ++k) {
    ThermalFrame f(sequence.width(), sequence.height(), static_cast<double>(k));
    if (members[k].empty()) {
      std::size_t nearest = 0;
      double best = 1e300;
      for (std::size_t i = 0; i < sequence.frames.size(); ++i) {
        const double d = std::abs(sequence.frames[i].timestamp - static_cast<double>(k));
        if (d < best) {
          best = d;
          nearest = i;
        }
      }
      f.temps = sequence.frames[nearest].temps;
    } else {
      std::fill(acc.begin(), acc.end(), 0.0);
      for (std::size_t i : members[k]) {
        const auto& src = sequence.frames[i].temps;
        for (std::size_t p = 0; p < pixels; ++p) acc[p] += src[p];
      }
      const double n = static_cast<double>(members[k].size());
      for (std::size_t p = 0; p < pixels; ++p) f.temps[p] = static_cast<float>(acc[p] / n);
    }
    out.frames.push_back(std::move(f));
  }
  return out;
}

void write_pgm(const RoiMask& mask, const fs::path& path) {
  std::ostringstream header;
  header << "P5\n" << mask.width << ' ' << mask.height << "\n255\n";
  std::string text = header.str();
  std::vector<std::uint8_t> bytes(text.begin(), text.end());
  for (auto b : mask.bits) bytes.push_back(b ? 255 : 0);
  write_bytes(path, bytes);
}

RoiMask read_pgm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot open " + path.string());
  std::string magic;
  int w = 0;
  int h = 0;
  int maxval = 0;
  in >> magic >> w >> h >> maxval;
  in.get();
  if (magic != "P5" || w <= 0 || h <= 0 || maxval <= 0 || maxval > 255) {
    fail(ErrorCode::IoFailure, "not an 8-bit P5 PGM: " + path.string());
  }
  RoiMask mask(w, h);
  std::vector<char> raw(mask.bits.size());
  in.read(raw.data(), static_cast<std::streamsize>(raw.size()));
  if (!in) fail(ErrorCode::IoFailure, "truncated PGM: " + path.string());
  for (std::size_t i = 0; i < raw.size(); ++i) mask.bits[i] = raw[i] != 0 ? 1 : 0;
  return mask;
}

}  // namespace thermoviab
