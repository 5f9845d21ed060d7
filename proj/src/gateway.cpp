#include "thermoviab/gateway.hpp"

#include <httplib.h>

#include <algorithm>
#include <charconv>
#include <condition_variable>
#include <deque>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

#include "thermoviab/error.hpp"
#include "thermoviab/render.hpp"

namespace thermoviab {

using nlohmann::json;

namespace {

int http_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::StageOrder: return 409;
    case ErrorCode::InvalidAnnotation:
    case ErrorCode::DegeneratePolygon:
    case ErrorCode::MissingAnnotation: return 422;
    case ErrorCode::MissingManifest: return 404;
    case ErrorCode::InvalidSpec: return 400;
    default: return 500;
  }
}

void send_json(httplib::Response& res, int status, const json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, std::string_view code, const std::string& message) {
  send_json(res, status, {{"error", code}, {"message", message}});
}

void send_error(httplib::Response& res, const Error& e) {
  send_error(res, http_status(e.code()), to_string(e.code()), e.what());
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

bool safe_id(const std::string& id) {
  return !id.empty() && id != "." && id != ".." && id.find('/') == std::string::npos &&
         id.find('\\') == std::string::npos;
}

json status_json(const fs::path& dir) {
  const CaseStatus s = case_status(dir);
  return {{"stage", to_string(s.stage)}, {"review_required", s.review_required}};
}

struct Job {
  std::string id;
  std::string case_id;
  std::string stage;
  std::string segmenter = "otsu";
  std::string state = "queued";  // queued | running | succeeded | failed
  json result;
  json error;
};

json job_json(const Job& job) {
  json j = {{"job_id", job.id}, {"case_id", job.case_id}, {"stage", job.stage}, {"status", job.state}};
  if (!job.result.is_null()) j["result"] = job.result;
  if (!job.error.is_null()) j["error"] = job.error;
  return j;
}

}  // namespace

struct Gateway::Impl {
  GatewayConfig config;
  std::optional<ModelBundle> bundle;
  httplib::Server server;
  std::thread server_thread;

  // Jobs
  std::mutex job_mutex;
  std::condition_variable job_cv;
  std::condition_variable idle_cv;
  std::map<std::string, Job> jobs;
  std::deque<std::string> queue;
  std::set<std::string> busy_cases;  // queued or running
  std::size_t next_job = 1;
  bool running_job = false;
  bool stopping = false;
  std::thread worker;

  // Decoded sequences of recently viewed cases, keyed by case id.
  struct Cached {
    fs::file_time_type stamp;
    std::shared_ptr<const ThermalSequence> sequence;
  };
  std::mutex cache_mutex;
  std::map<std::string, Cached> cache;
  std::deque<std::string> cache_order;

  explicit Impl(GatewayConfig cfg) : config(std::move(cfg)) {
    if (config.model_dir) bundle = load_bundle(*config.model_dir);
    routes();
    worker = std::thread([this] { work(); });
  }

  ~Impl() {
    {
      std::lock_guard<std::mutex> lock(job_mutex);
      stopping = true;
    }
    job_cv.notify_all();
    worker.join();
    server.stop();
    if (server_thread.joinable()) server_thread.join();
  }

  std::optional<fs::path> case_dir(const std::string& id) const {
    if (!safe_id(id)) return std::nullopt;
    const fs::path dir = config.data_root / id;
    if (!fs::exists(dir / std::string(kManifestName))) return std::nullopt;
    return dir;
  }

  std::shared_ptr<const ThermalSequence> sequence(const std::string& id, const fs::path& dir) {
    const auto stamp = fs::last_write_time(dir / std::string(kPayloadName));
    {
      std::lock_guard<std::mutex> lock(cache_mutex);
      const auto it = cache.find(id);
      if (it != cache.end() && it->second.stamp == stamp) return it->second.sequence;
    }
    auto seq = std::make_shared<const ThermalSequence>(decimate_to_1hz(read_case(dir).sequence));
    std::lock_guard<std::mutex> lock(cache_mutex);
    if (!cache.count(id)) cache_order.push_back(id);
    cache[id] = {stamp, seq};
    while (cache_order.size() > 4) {
      cache.erase(cache_order.front());
      cache_order.pop_front();
    }
    return seq;
  }

  bool is_busy(const std::string& id) {
    std::lock_guard<std::mutex> lock(job_mutex);
    return busy_cases.count(id) > 0;
  }

  // Wraps a case-scoped handler: resolves the id (404), maps Error to a status.
  using CaseHandler = std::function<void(const std::string&, const fs::path&, const httplib::Request&,
                                         httplib::Response&)>;
  httplib::Server::Handler with_case(CaseHandler fn) {
    return [this, fn](const httplib::Request& req, httplib::Response& res) {
      const std::string id = req.matches[1];
      const auto dir = case_dir(id);
      if (!dir) return send_error(res, 404, "UnknownCase", "no case '" + id + "'");
      try {
        fn(id, *dir, req, res);
      } catch (const Error& e) {
        send_error(res, e);
      } catch (const std::exception& e) {
        send_error(res, 500, "Internal", e.what());
      }
    };
  }

  void routes() {
    server.set_payload_max_length(8 << 20);

    server.Get("/api/cases", [this](const httplib::Request&, httplib::Response& res) {
      json out = json::array();
      try {
        for (const auto& dir : list_cases(config.data_root)) {
          const CaseRecord record = read_manifest(dir);
          json item = {{"case_id", dir.filename().string()}, {"status", status_json(dir)}};
          if (record.label != Label::Unknown) item["label"] = to_string(record.label);
          out.push_back(item);
        }
      } catch (const Error& e) {
        return send_error(res, e);
      }
      send_json(res, 200, out);
    });

    server.Get(R"(/api/cases/([^/]+))", with_case([](const std::string& id, const fs::path& dir,
                                                     const httplib::Request&, httplib::Response& res) {
      const json manifest = json::parse(read_file(dir / std::string(kManifestName)));
      json artifacts = json::array();
      for (std::string_view name : {kWarpsFile, kAlignedFile, kRoiFile, kSegmentationFile, kFeaturesFile,
                                    kPredictionFile}) {
        const fs::path p = dir / std::string(name);
        if (fs::exists(p)) artifacts.push_back({{"name", name}, {"bytes", fs::file_size(p)}});
      }
      send_json(res, 200,
                {{"case_id", id},
                 {"manifest", manifest},
                 {"annotations", manifest.value("annotations", json::array())},
                 {"status", status_json(dir)},
                 {"artifacts", artifacts}});
    }));

    server.Get(R"(/api/cases/([^/]+)/frames/([^/]+)\.png)",
               with_case([this](const std::string& id, const fs::path& dir, const httplib::Request& req,
                                httplib::Response& res) { frame_png(id, dir, req, res); }));

    server.Get(R"(/api/cases/([^/]+)/curves)", with_case([this](const std::string& id, const fs::path& dir,
                                                               const httplib::Request&, httplib::Response& res) {
      curves(id, dir, res);
    }));

    server.Put(R"(/api/cases/([^/]+)/annotations)",
               with_case([this](const std::string& id, const fs::path& dir, const httplib::Request& req,
                                httplib::Response& res) { put_annotations(id, dir, req, res); }));

    server.Post(R"(/api/cases/([^/]+)/run)", with_case([this](const std::string& id, const fs::path& dir,
                                                             const httplib::Request& req, httplib::Response& res) {
      submit(id, dir, req, res);
    }));

    server.Get(R"(/api/jobs/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      std::lock_guard<std::mutex> lock(job_mutex);
      const auto it = jobs.find(req.matches[1]);
      if (it == jobs.end()) return send_error(res, 404, "UnknownJob", "no job '" + std::string(req.matches[1]) + "'");
      send_json(res, 200, job_json(it->second));
    });

    server.Get(R"(/api/cases/([^/]+)/result)", with_case([](const std::string&, const fs::path& dir,
                                                           const httplib::Request&, httplib::Response& res) {
      const fs::path p = dir / std::string(kPredictionFile);
      if (!fs::exists(p)) return send_error(res, 409, "StageOrder", "prediction missing");
      res.status = 200;
      res.set_content(read_file(p), "application/json");
    }));

    server.Get(R"(/api/cases/([^/]+)/registration)",
               with_case([this](const std::string& id, const fs::path& dir, const httplib::Request& req,
                                httplib::Response& res) { registration(id, dir, req, res); }));

    if (config.static_dir && fs::is_directory(*config.static_dir)) {
      server.set_mount_point("/", config.static_dir->string());
    }
  }

  void frame_png(const std::string& id, const fs::path& dir, const httplib::Request& req, httplib::Response& res) {
    const std::string which = req.matches[2];
    const auto seq = sequence(id, dir);
    const TemperatureWindow window = case_window(*seq);
    const bool aligned = req.has_param("aligned") && req.get_param_value("aligned") != "0";

    const ThermalFrame* frame = nullptr;
    const RoiMask* valid = nullptr;
    std::optional<AlignedSequence> stabilized;
    if (aligned) stabilized = load_aligned(dir, *seq);  // StageOrder -> 409
    if (which == "precool") {
      frame = aligned ? &stabilized->precool.frame : &seq->precool;
      if (aligned) valid = &stabilized->precool.valid;
    } else {
      int t = 0;
      const auto r = std::from_chars(which.data(), which.data() + which.size(), t);
      if (r.ec != std::errc() || r.ptr != which.data() + which.size()) {
        return send_error(res, 404, "UnknownFrame", "frame must be 'precool' or an integer second");
      }
      for (std::size_t k = 0; k < seq->frames.size(); ++k) {
        if (std::abs(seq->frames[k].timestamp - t) < 0.5) {
          frame = aligned ? &stabilized->frames[k].frame : &seq->frames[k];
          if (aligned) valid = &stabilized->frames[k].valid;
        }
      }
      if (!frame) return send_error(res, 404, "UnknownFrame", "no frame at t=" + which);
    }
    res.status = 200;
    res.set_header("X-Temperature-Min", std::to_string(window.lo));
    res.set_header("X-Temperature-Max", std::to_string(window.hi));
    res.set_header("X-Palette", "iron");
    res.set_header("X-Frame-Timestamp", std::to_string(frame->timestamp));
    res.set_content(encode_png(colorize(*frame, window, valid)), "image/png");
  }

  void curves(const std::string& id, const fs::path& dir, httplib::Response& res) {
    const CaseRecord record = read_manifest(dir);
    const auto seq = sequence(id, dir);
    const Stabilization stab = load_warps(dir);
    const RoiMask roi = load_roi(dir);
    const AlignedSequence aligned = apply_stabilization(*seq, stab);
    json t = json::array();
    for (int k = 0; k < kSeriesSeconds; ++k) t.push_back(k);
    json nodules = json::array();
    for (const auto& a : record.annotations) {
      const NoduleSite site = register_nodule(a, stab.precool, seq->width(), seq->height());
      json series = json::array();
      for (const auto& s : extract_region_series(aligned.frames, roi, site.point)) {
        series.push_back({{"region", to_string(s.region)}, {"signal", to_string(s.signal)}, {"values", s.samples}});
      }
      nodules.push_back({{"nodule_id", a.nodule_id}, {"series", series}});
    }
    send_json(res, 200, {{"case_id", id}, {"t", t}, {"nodules", nodules}});
  }

  void put_annotations(const std::string& id, const fs::path& dir, const httplib::Request& req,
                       httplib::Response& res) {
    if (is_busy(id)) return send_error(res, 409, "Busy", "a job is queued or running for this case");
    const std::vector<NoduleAnnotation> annotations = parse_annotations(req.body);
    replace_annotations(dir, annotations);  // validates geometry (422)
    const CaseRecord record = read_manifest(dir);
    const auto seq = sequence(id, dir);
    json pixels = json::array();
    for (const auto& a : record.annotations) {
      pixels.push_back(a.roi_polygon.empty() ? 0 : rasterize_polygon(a.roi_polygon, seq->width(), seq->height()).count());
    }
    send_json(res, 200,
              {{"case_id", id},
               {"annotations", json::parse(annotations_json(record.annotations))},
               {"roi_pixels", pixels},
               {"status", status_json(dir)}});
  }

  void registration(const std::string& id, const fs::path& dir, const httplib::Request& req,
                    httplib::Response& res) {
    const auto seq = sequence(id, dir);
    const Stabilization stab = load_warps(dir);
    const AlignedSequence aligned = apply_stabilization(*seq, stab);
    json rho = json::array();
    std::size_t worst = 0;
    for (std::size_t k = 0; k < stab.frames.size(); ++k) {
      rho.push_back(stab.frames[k].rho);
      if (stab.frames[k].rho < stab.frames[worst].rho) worst = k;
    }
    std::size_t k = worst;
    if (req.has_param("t")) {
      int t = 0;
      const std::string text = req.get_param_value("t");
      const auto r = std::from_chars(text.data(), text.data() + text.size(), t);
      if (r.ec != std::errc() || t < 0 || static_cast<std::size_t>(t) >= seq->frames.size()) {
        return send_error(res, 404, "UnknownFrame", "no frame at t=" + text);
      }
      k = static_cast<std::size_t>(t);
    }
    const ThermalFrame& ref = seq->frames.front();
    const std::string before = encode_png(difference_image(seq->frames[k], ref));
    const std::string after = encode_png(difference_image(aligned.frames[k].frame, ref, 0.0, &aligned.frames[k].valid));
    send_json(res, 200,
              {{"case_id", id},
               {"review_required", stab.review_required},
               {"review_rho", config.align.review_rho},
               {"min_rho", stab.min_rho()},
               {"precool_rho", stab.precool.rho},
               {"rho", rho},
               {"frame", k},
               {"before_png", base64_encode(before)},
               {"after_png", base64_encode(after)}});
  }

  void submit(const std::string& id, const fs::path& dir, const httplib::Request& req, httplib::Response& res) {
    json body;
    try {
      body = json::parse(req.body.empty() ? "{}" : req.body);
    } catch (const json::exception& e) {
      return send_error(res, 400, "InvalidSpec", std::string("malformed body: ") + e.what());
    }
    const std::string stage = body.value("stage", "");
    const std::string segmenter = body.value("segmenter", "otsu");
    const CaseStatus status = case_status(dir);
    if (stage == "align") {
    } else if (stage == "segment") {
      parse_segmenter(segmenter);
      if (status.stage < Stage::Aligned) return send_error(res, 409, "StageOrder", "alignment missing");
    } else if (stage == "features" || stage == "predict") {
      if (status.stage < Stage::Aligned) return send_error(res, 409, "StageOrder", "alignment missing");
      if (status.stage < Stage::Segmented) return send_error(res, 409, "StageOrder", "segmentation missing");
      if (stage == "predict" && !bundle) return send_error(res, 409, "StageOrder", "no model loaded");
    } else {
      return send_error(res, 400, "InvalidSpec", "stage must be align|segment|features|predict");
    }

    std::lock_guard<std::mutex> lock(job_mutex);
    if (busy_cases.count(id)) return send_error(res, 409, "Busy", "a job is already queued or running for this case");
    if (queue.size() >= config.queue_capacity) return send_error(res, 503, "QueueFull", "job queue is full");
    Job job;
    job.id = "job-" + std::to_string(next_job++);
    job.case_id = id;
    job.stage = stage;
    job.segmenter = segmenter;
    busy_cases.insert(id);
    queue.push_back(job.id);
    jobs[job.id] = job;
    job_cv.notify_one();
    send_json(res, 202, job_json(job));
  }

  json execute(const Job& job) {
    const fs::path dir = config.data_root / job.case_id;
    if (job.stage == "align") {
      const Stabilization stab = align_case(dir, config.align);
      json rho = json::array();
      for (const auto& w : stab.frames) rho.push_back(w.rho);
      return {{"review_required", stab.review_required}, {"min_rho", stab.min_rho()}, {"rho", rho}};
    }
    if (job.stage == "segment") {
      const RoiMask roi = segment_case(dir, parse_segmenter(job.segmenter), config.segmenter_model);
      return {{"segmenter", job.segmenter}, {"pixels", roi.count()}};
    }
    if (job.stage == "features") {
      const auto records = features_case(dir, config.features);
      json counts = json::object();
      for (Family f : kFamilies) counts[std::string(to_string(f))] = family_size(f);
      return {{"nodules", records.size()}, {"columns", counts}};
    }
    if (!fs::exists(dir / std::string(kFeaturesFile))) features_case(dir, config.features);
    predict_case(dir, *bundle);
    return json::parse(read_file(dir / std::string(kPredictionFile)));
  }

  void work() {
    while (true) {
      std::string id;
      {
        std::unique_lock<std::mutex> lock(job_mutex);
        job_cv.wait(lock, [this] { return stopping || !queue.empty(); });
        if (stopping) return;
        id = queue.front();
        queue.pop_front();
        jobs[id].state = "running";
        running_job = true;
      }
      Job snapshot;
      {
        std::lock_guard<std::mutex> lock(job_mutex);
        snapshot = jobs[id];
      }
      json result;
      json error;
      try {
        result = execute(snapshot);
      } catch (const Error& e) {
        error = {{"error", to_string(e.code())}, {"message", e.what()}};
      } catch (const std::exception& e) {
        error = {{"error", "Internal"}, {"message", e.what()}};
      }
      {
        std::lock_guard<std::mutex> lock(job_mutex);
        Job& job = jobs[id];
        job.state = error.is_null() ? "succeeded" : "failed";
        job.result = result;
        job.error = error;
        busy_cases.erase(job.case_id);
        running_job = false;
      }
      idle_cv.notify_all();
    }
  }
};

Gateway::Gateway(GatewayConfig config) : impl_(std::make_unique<Impl>(std::move(config))) {}

Gateway::~Gateway() = default;

int Gateway::start(const std::string& host, int port) {
  const int bound = port == 0 ? impl_->server.bind_to_any_port(host) : (impl_->server.bind_to_port(host, port) ? port : -1);
  if (bound < 0) fail(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
  impl_->server_thread = std::thread([this] { impl_->server.listen_after_bind(); });
  impl_->server.wait_until_ready();
  return bound;
}

void Gateway::run(const std::string& host, int port) {
  if (!impl_->server.bind_to_port(host, port)) {
    fail(ErrorCode::IoFailure, "cannot bind " + host + ":" + std::to_string(port));
  }
  impl_->server.listen_after_bind();
}

void Gateway::stop() { impl_->server.stop(); }

void Gateway::drain() {
  std::unique_lock<std::mutex> lock(impl_->job_mutex);
  impl_->idle_cv.wait(lock, [this] { return impl_->queue.empty() && !impl_->running_job; });
}

}  // namespace thermoviab
