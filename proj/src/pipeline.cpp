#include "thermoviab/pipeline.hpp"

#include <algorithm>
#include <exception>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "thermoviab/error.hpp"

namespace thermoviab {

using nlohmann::json;

namespace {

fs::path artifact(const fs::path& dir, std::string_view name) { return dir / std::string(name); }

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(ErrorCode::IoFailure, "cannot read " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_text(const fs::path& path, const std::string& text) {
  // Write-then-rename so readers never observe a half-written artifact.
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    out << text;
    if (!out) fail(ErrorCode::IoFailure, "cannot write " + tmp.string());
  }
  fs::rename(tmp, path);
}

std::vector<std::string> family_files() {
  std::vector<std::string> names;
  for (Family f : kFamilies) names.push_back("features_" + std::string(to_string(f)) + ".csv");
  return names;
}

ThermalSequence load_sequence(const fs::path& dir, CaseRecord* record = nullptr) {
  LoadedCase loaded = read_case(dir);
  if (record) *record = loaded.record;
  return decimate_to_1hz(loaded.sequence);
}

void require(bool ok, const std::string& what) {
  if (!ok) fail(ErrorCode::StageOrder, what);
}

}  // namespace

std::string_view to_string(Stage stage) {
  switch (stage) {
    case Stage::Raw: return "raw";
    case Stage::Aligned: return "aligned";
    case Stage::Segmented: return "segmented";
    case Stage::Featured: return "featured";
    case Stage::Predicted: return "predicted";
  }
  return "raw";
}

Stage parse_stage(std::string_view text) {
  for (Stage s : {Stage::Raw, Stage::Aligned, Stage::Segmented, Stage::Featured, Stage::Predicted}) {
    if (to_string(s) == text) return s;
  }
  if (text == "align") return Stage::Aligned;
  if (text == "segment") return Stage::Segmented;
  if (text == "features") return Stage::Featured;
  if (text == "predict") return Stage::Predicted;
  fail(ErrorCode::InvalidSpec, "unknown stage '" + std::string(text) + "'");
}

CaseStatus case_status(const fs::path& dir) {
  CaseStatus status;
  if (!fs::exists(artifact(dir, kWarpsFile))) return status;
  status.stage = Stage::Aligned;
  if (fs::exists(artifact(dir, kAlignedFile))) {
    try {
      status.review_required = json::parse(read_text(artifact(dir, kAlignedFile))).value("review_required", false);
    } catch (const std::exception&) {
      status.review_required = true;
    }
  }
  if (!fs::exists(artifact(dir, kRoiFile))) return status;
  status.stage = Stage::Segmented;
  if (!fs::exists(artifact(dir, kFeaturesFile))) return status;
  status.stage = Stage::Featured;
  if (fs::exists(artifact(dir, kPredictionFile))) status.stage = Stage::Predicted;
  return status;
}

void invalidate_after(const fs::path& dir, Stage keep) {
  std::vector<std::string> doomed;
  if (keep < Stage::Aligned) {
    doomed.emplace_back(kWarpsFile);
    doomed.emplace_back(kAlignedFile);
  }
  if (keep < Stage::Segmented) {
    doomed.emplace_back(kRoiFile);
    doomed.emplace_back(kSegmentationFile);
  }
  if (keep < Stage::Featured) {
    doomed.emplace_back(kFeaturesFile);
    for (const auto& f : family_files()) doomed.push_back(f);
  }
  if (keep < Stage::Predicted) doomed.emplace_back(kPredictionFile);
  for (const auto& name : doomed) fs::remove(dir / name);
}

RoiMask alignment_support(const ThermalFrame& frame0, int margin) {
  RoiMask support(frame0.width, frame0.height, 1);
  RoiMask cold;
  try {
    cold = segment_cold_region(frame0);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::NoColdRegion) throw;
    return support;
  }
  const int w = frame0.width;
  const int h = frame0.height;
  for (int r = 0; r < h; ++r) {
    for (int c = 0; c < w; ++c) {
      if (!cold.at(r, c)) continue;
      for (int rr = std::max(0, r - margin); rr <= std::min(h - 1, r + margin); ++rr) {
        for (int cc = std::max(0, c - margin); cc <= std::min(w - 1, c + margin); ++cc) support.at(rr, cc) = 0;
      }
    }
  }
  // Too little skin left to correlate on: fall back to the whole frame.
  if (support.count() < support.bits.size() / 10) std::fill(support.bits.begin(), support.bits.end(), 1);
  return support;
}

Stabilization stabilize_case(const ThermalSequence& sequence, AlignConfig config) {
  if (sequence.frames.empty()) fail(ErrorCode::DimensionMismatch, "sequence has no frames");
  if (!config.ecc.mask) config.ecc.mask = alignment_support(sequence.frames.front());
  return stabilize_sequence(sequence, config);
}

SegmenterKind parse_segmenter(std::string_view text) {
  if (text == "otsu") return SegmenterKind::Otsu;
  if (text == "net") return SegmenterKind::Net;
  if (text == "manual") return SegmenterKind::Manual;
  fail(ErrorCode::InvalidSpec, "unknown segmenter '" + std::string(text) + "' (otsu|net|manual)");
}

std::string_view to_string(SegmenterKind kind) {
  switch (kind) {
    case SegmenterKind::Otsu: return "otsu";
    case SegmenterKind::Net: return "net";
    case SegmenterKind::Manual: return "manual";
  }
  return "otsu";
}

std::optional<SegmenterKind> roi_source(const fs::path& dir) {
  if (!fs::exists(artifact(dir, kRoiFile))) return std::nullopt;
  if (!fs::exists(artifact(dir, kSegmentationFile))) return SegmenterKind::Otsu;
  try {
    return parse_segmenter(json::parse(read_text(artifact(dir, kSegmentationFile))).at("segmenter").get<std::string>());
  } catch (const std::exception&) {
    return SegmenterKind::Otsu;
  }
}

void replace_annotations(const fs::path& dir, const std::vector<NoduleAnnotation>& annotations) {
  const bool manual = roi_source(dir) == SegmenterKind::Manual && !fs::exists(artifact(dir, kRoiPolygonFile));
  write_annotations(dir, annotations);
  invalidate_after(dir, manual ? Stage::Aligned : Stage::Segmented);
}

Stabilization load_warps(const fs::path& dir) {
  require(fs::exists(artifact(dir, kWarpsFile)), "alignment missing");
  return warps_from_jsonl(read_text(artifact(dir, kWarpsFile)));
}

RoiMask load_roi(const fs::path& dir) {
  require(fs::exists(artifact(dir, kRoiFile)), "segmentation missing");
  return read_pgm(artifact(dir, kRoiFile));
}

AlignedSequence load_aligned(const fs::path& dir, const ThermalSequence& sequence) {
  return apply_stabilization(sequence, load_warps(dir));
}

std::vector<FeatureRecord> load_features(const fs::path& dir) {
  require(fs::exists(artifact(dir, kFeaturesFile)), "features missing");
  return features_from_csv(read_text(artifact(dir, kFeaturesFile)));
}

Stabilization align_case(const fs::path& dir, const AlignConfig& config) {
  const ThermalSequence sequence = load_sequence(dir);
  const Stabilization stab = stabilize_case(sequence, config);
  invalidate_after(dir, Stage::Raw);
  json rho = json::array();
  for (const auto& w : stab.frames) rho.push_back(w.rho);
  const json summary = {{"review_required", stab.review_required},
                        {"min_rho", stab.min_rho()},
                        {"review_rho", config.review_rho},
                        {"precool_rho", stab.precool.rho},
                        {"frame_rho", rho}};
  write_text(artifact(dir, kWarpsFile), warps_to_jsonl(stab));
  write_text(artifact(dir, kAlignedFile), summary.dump(2) + "\n");
  return stab;
}

namespace {

// Manual ROI: roi_polygon.json (frame-0 coordinates) when present, otherwise
// the union of the annotation polygons carried from precool into frame-0
// coordinates through the stored precool warp.
RoiMask manual_roi(const fs::path& dir) {
  const CaseRecord record = read_manifest(dir);
  const LoadedCase loaded = read_case(dir);
  const int w = loaded.sequence.width();
  const int h = loaded.sequence.height();
  std::vector<std::vector<Point2>> polygons;
  if (fs::exists(artifact(dir, kRoiPolygonFile))) {
    std::vector<Point2> polygon;
    try {
      const json doc = json::parse(read_text(artifact(dir, kRoiPolygonFile)));
      for (const auto& p : doc.at("polygon")) {
        polygon.push_back({p.at(0).get<double>(), p.at(1).get<double>()});
      }
    } catch (const json::exception& e) {
      fail(ErrorCode::InvalidAnnotation, std::string("bad roi_polygon.json: ") + e.what());
    }
    polygons.push_back(std::move(polygon));
  } else {
    const WarpModel precool = load_warps(dir).precool;
    for (const auto& a : record.annotations) {
      if (a.roi_polygon.empty()) continue;
      std::vector<Point2> moved;
      for (const auto& v : a.roi_polygon) moved.push_back(apply_inverse_warp_to_point(precool, v));
      polygons.push_back(std::move(moved));
    }
  }
  if (polygons.empty()) fail(ErrorCode::StageOrder, "manual segmentation needs an ROI polygon");
  RoiMask roi(w, h, 0);
  for (const auto& polygon : polygons) {
    if (polygon.size() < 3 || !is_simple_polygon(polygon)) fail(ErrorCode::InvalidAnnotation, "ROI polygon is not simple");
    const RoiMask part = rasterize_polygon(polygon, w, h);
    for (std::size_t i = 0; i < roi.bits.size(); ++i) roi.bits[i] |= part.bits[i];
  }
  if (roi.count() == 0) fail(ErrorCode::DegeneratePolygon, "ROI polygon covers no pixel centre");
  return roi;
}

}  // namespace

RoiMask segment_case(const fs::path& dir, SegmenterKind kind, const std::optional<fs::path>& net_checkpoint) {
  require(fs::exists(artifact(dir, kWarpsFile)), "alignment missing");
  RoiMask roi;
  if (kind == SegmenterKind::Manual) {
    roi = manual_roi(dir);
  } else {
    const ThermalSequence sequence = load_sequence(dir);
    const ThermalFrame& frame0 = sequence.frames.front();
    if (kind == SegmenterKind::Otsu) {
      roi = segment_cold_region(frame0);
    } else {
      if (!net_checkpoint) fail(ErrorCode::InvalidSpec, "--segmenter net needs --model");
      roi = infer_mask(load_segmenter(*net_checkpoint), frame0);
      if (roi.count() == 0) fail(ErrorCode::NoColdRegion, "segmenter net found no cold region");
    }
  }
  invalidate_after(dir, Stage::Aligned);
  write_pgm(roi, artifact(dir, kRoiFile));
  const json source = {{"segmenter", to_string(kind)}, {"pixels", roi.count()}};
  write_text(artifact(dir, kSegmentationFile), source.dump(2) + "\n");
  return roi;
}

std::vector<FeatureRecord> features_case(const fs::path& dir, const FeatureConfig& cfg) {
  require(fs::exists(artifact(dir, kWarpsFile)), "alignment missing");
  require(fs::exists(artifact(dir, kRoiFile)), "segmentation missing");
  CaseRecord record;
  const ThermalSequence sequence = load_sequence(dir, &record);
  const Stabilization stab = load_warps(dir);
  const AlignedSequence aligned = apply_stabilization(sequence, stab);
  const RoiMask roi = load_roi(dir);
  std::vector<FeatureRecord> records;
  for (const auto& annotation : record.annotations) {
    const NoduleSite site = register_nodule(annotation, stab.precool, sequence.width(), sequence.height());
    records.push_back(extract_features(record.case_id, aligned, roi, site, cfg));
  }
  invalidate_after(dir, Stage::Segmented);
  for (Family f : kFamilies) {
    write_text(dir / ("features_" + std::string(to_string(f)) + ".csv"), features_to_csv(records, f));
  }
  write_text(artifact(dir, kFeaturesFile), features_to_csv(records, std::nullopt));
  return records;
}

std::string outcome_json(const std::string& case_id, const std::vector<std::string>& nodule_ids,
                         const std::vector<ClassificationOutcome>& outcomes) {
  auto one = [](const ClassificationOutcome& o) {
    return json{{"p", o.p}, {"votes", o.votes}, {"F", o.F}, {"label", to_string(o.label)}};
  };
  json doc = {{"case_id", case_id}};
  if (!outcomes.empty()) {
    doc["nodule_id"] = nodule_ids.front();
    doc.update(one(outcomes.front()));
  }
  json all = json::array();
  for (std::size_t i = 0; i < outcomes.size(); ++i) {
    json entry = one(outcomes[i]);
    entry["nodule_id"] = nodule_ids[i];
    all.push_back(entry);
  }
  doc["nodules"] = all;
  return doc.dump(2) + "\n";
}

std::vector<ClassificationOutcome> predict_case(const fs::path& dir, const ModelBundle& bundle) {
  require(fs::exists(artifact(dir, kRoiFile)), "segmentation missing");
  require(fs::exists(artifact(dir, kWarpsFile)), "alignment missing");
  const std::vector<FeatureRecord> records =
      fs::exists(artifact(dir, kFeaturesFile)) ? load_features(dir) : features_case(dir);
  std::vector<ClassificationOutcome> outcomes;
  std::vector<std::string> ids;
  for (const auto& rec : records) {
    outcomes.push_back(predict(bundle, rec));
    ids.push_back(rec.nodule_id);
  }
  const std::string case_id = records.empty() ? read_manifest(dir).case_id : records.front().case_id;
  write_text(artifact(dir, kPredictionFile), outcome_json(case_id, ids, outcomes));
  return outcomes;
}

std::vector<FeatureRecord> ensure_features(const fs::path& dir, const AlignConfig& align, const FeatureConfig& cfg) {
  const CaseStatus status = case_status(dir);
  if (status.stage >= Stage::Featured) return load_features(dir);
  if (status.stage < Stage::Aligned) align_case(dir, align);
  if (case_status(dir).stage < Stage::Segmented) segment_case(dir, SegmenterKind::Otsu);
  return features_case(dir, cfg);
}

ProcessedCase process_case(const CaseRecord& record, const ThermalSequence& raw, const AlignConfig& align,
                           const FeatureConfig& cfg) {
  const ThermalSequence sequence = decimate_to_1hz(raw);
  ProcessedCase out;
  out.stabilization = stabilize_case(sequence, align);
  out.roi = segment_cold_region(sequence.frames.front());
  const AlignedSequence aligned = apply_stabilization(sequence, out.stabilization);
  for (const auto& annotation : record.annotations) {
    const NoduleSite site = register_nodule(annotation, out.stabilization.precool, sequence.width(), sequence.height());
    out.features.push_back(extract_features(record.case_id, aligned, out.roi, site, cfg));
  }
  return out;
}

std::vector<fs::path> list_cases(const fs::path& data_dir) {
  if (!fs::is_directory(data_dir)) fail(ErrorCode::IoFailure, "not a directory: " + data_dir.string());
  std::vector<fs::path> cases;
  for (const auto& entry : fs::directory_iterator(data_dir)) {
    if (entry.is_directory() && fs::exists(entry.path() / std::string(kManifestName))) cases.push_back(entry.path());
  }
  std::sort(cases.begin(), cases.end());
  return cases;
}

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(jobs, 1)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(n);
  std::mutex mutex;
  std::size_t next = 0;
  std::vector<std::thread> threads;
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      while (true) {
        std::size_t i;
        {
          std::lock_guard<std::mutex> lock(mutex);
          if (next >= n) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  for (const auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

std::string record_key(const FeatureRecord& record) { return record.case_id + "/" + record.nodule_id; }

LabelledRecords collect_study(const fs::path& data_dir, int jobs, const AlignConfig& align, const FeatureConfig& cfg) {
  const auto cases = list_cases(data_dir);
  std::vector<CaseRecord> manifests(cases.size());
  std::vector<std::vector<FeatureRecord>> per_case(cases.size());
  parallel_for(cases.size(), jobs, [&](std::size_t i) {
    manifests[i] = read_manifest(cases[i]);
    if (manifests[i].label == Label::Unknown) return;
    per_case[i] = ensure_features(cases[i], align, cfg);
  });
  LabelledRecords data;
  for (std::size_t i = 0; i < cases.size(); ++i) {
    for (auto& rec : per_case[i]) {
      data.records.push_back(std::move(rec));
      data.labels.push_back(manifests[i].label == Label::Viable ? 1 : 0);
      data.groups.push_back(manifests[i].participant_id);
    }
  }
  if (data.records.empty()) fail(ErrorCode::EmptyDataset, "no labelled cases under " + data_dir.string());
  return data;
}

namespace {

void select(const LabelledRecords& data, const std::vector<std::string>& keys, std::vector<FeatureRecord>& records,
            std::vector<int>& labels) {
  std::map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < data.records.size(); ++i) index[record_key(data.records[i])] = i;
  for (const auto& key : keys) {
    const auto it = index.find(key);
    if (it == index.end()) fail(ErrorCode::TooFewCases, "split references unknown record " + key);
    records.push_back(data.records[it->second]);
    labels.push_back(data.labels[it->second]);
  }
}

}  // namespace

TrainStudyResult train_on_records(const LabelledRecords& data, std::string_view ratio, std::uint64_t seed,
                                  const TrainOptions& options, bool group_aware) {
  std::vector<SplitItem> items;
  for (std::size_t i = 0; i < data.records.size(); ++i) {
    items.push_back({record_key(data.records[i]), data.labels[i], data.groups[i]});
  }
  TrainStudyResult result;
  result.split = stratified_split(items, ratio, seed, group_aware);
  std::vector<FeatureRecord> train, validation;
  std::vector<int> train_labels, validation_labels;
  select(data, result.split.train, train, train_labels);
  select(data, result.split.validation, validation, validation_labels);
  TrainOptions opts = options;
  opts.forest.seed = seed;
  result.bundle = train_bundle(train, train_labels, validation, validation_labels, opts);
  result.bundle.train_ids = result.split.train;
  result.bundle.validation_ids = result.split.validation;
  result.bundle.test_ids = result.split.test;
  std::vector<ClassificationOutcome> outcomes;
  for (const auto& rec : validation) outcomes.push_back(predict(result.bundle, rec));
  result.validation_report = build_report(outcomes, validation_labels, result.bundle.vote_threshold);
  return result;
}

StudyReport evaluate_on_records(const LabelledRecords& data, const ModelBundle& bundle) {
  std::vector<std::string> keys = bundle.test_ids;
  if (keys.empty()) {
    std::set<std::string> used(bundle.train_ids.begin(), bundle.train_ids.end());
    used.insert(bundle.validation_ids.begin(), bundle.validation_ids.end());
    for (const auto& rec : data.records) {
      if (!used.count(record_key(rec))) keys.push_back(record_key(rec));
    }
  }
  std::vector<FeatureRecord> records;
  std::vector<int> labels;
  select(data, keys, records, labels);
  if (records.empty()) fail(ErrorCode::EmptyDataset, "no held-out records to evaluate");
  std::vector<ClassificationOutcome> outcomes;
  for (const auto& rec : records) outcomes.push_back(predict(bundle, rec));
  return build_report(outcomes, labels, bundle.vote_threshold);
}

}  // namespace thermoviab
