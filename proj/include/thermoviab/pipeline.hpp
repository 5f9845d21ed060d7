#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "thermoviab/features.hpp"
#include "thermoviab/learning.hpp"
#include "thermoviab/metrics.hpp"
#include "thermoviab/registration.hpp"
#include "thermoviab/segmentation.hpp"
#include "thermoviab/thermal_io.hpp"

namespace thermoviab {

namespace fs = std::filesystem;

// Stage artifacts inside a case directory.
inline constexpr std::string_view kWarpsFile = "warps.jsonl";
inline constexpr std::string_view kAlignedFile = "aligned.json";
inline constexpr std::string_view kRoiFile = "roi.pgm";
inline constexpr std::string_view kRoiPolygonFile = "roi_polygon.json";
inline constexpr std::string_view kSegmentationFile = "segmentation.json";  // {segmenter, pixels}
inline constexpr std::string_view kFeaturesFile = "features.csv";
inline constexpr std::string_view kPredictionFile = "prediction.json";

enum class Stage { Raw, Aligned, Segmented, Featured, Predicted };
std::string_view to_string(Stage stage);
Stage parse_stage(std::string_view text);

struct CaseStatus {
  Stage stage = Stage::Raw;
  bool review_required = false;
};

/// Highest stage whose artifacts (and all upstream ones) exist.
CaseStatus case_status(const fs::path& case_dir);

/// Deletes the artifacts of every stage after `keep` (feature CSVs, roi.pgm, ...).
void invalidate_after(const fs::path& case_dir, Stage keep);

/// ECC support for stabilization: everything except the cold region of
/// frame 0 grown by `margin` px, because that region changes intensity over
/// time and is absent from the precool image. Full frame when no cold region
/// is found.
RoiMask alignment_support(const ThermalFrame& frame0, int margin = 4);

/// Stabilization with the cold region excluded from the correlation support
/// (unless the caller already supplied a mask).
Stabilization stabilize_case(const ThermalSequence& sequence, AlignConfig config);

enum class SegmenterKind { Otsu, Net, Manual };
SegmenterKind parse_segmenter(std::string_view text);
std::string_view to_string(SegmenterKind kind);

/// Segmenter recorded next to roi.pgm; nullopt when the case is unsegmented.
std::optional<SegmenterKind> roi_source(const fs::path& case_dir);

/// Replaces the annotations of a case. Features and prediction are always
/// invalidated; a manual ROI (built from the polygons) is invalidated too.
/// Throws InvalidAnnotation.
void replace_annotations(const fs::path& case_dir, const std::vector<NoduleAnnotation>& annotations);

// ---------------------------------------------------------------------------
// File-based stages. Each refuses to run (StageOrder) when an upstream
// artifact is missing and clears downstream artifacts when it rewrites its own.

Stabilization align_case(const fs::path& case_dir, const AlignConfig& config = {});
RoiMask segment_case(const fs::path& case_dir, SegmenterKind kind = SegmenterKind::Otsu,
                     const std::optional<fs::path>& net_checkpoint = std::nullopt);
std::vector<FeatureRecord> features_case(const fs::path& case_dir, const FeatureConfig& cfg = {});
std::vector<ClassificationOutcome> predict_case(const fs::path& case_dir, const ModelBundle& bundle);

/// Aligned sequence rebuilt from the stored warps.
AlignedSequence load_aligned(const fs::path& case_dir, const ThermalSequence& sequence);
Stabilization load_warps(const fs::path& case_dir);
RoiMask load_roi(const fs::path& case_dir);
std::vector<FeatureRecord> load_features(const fs::path& case_dir);

/// prediction.json body: top-level fields of the first nodule plus a list of
/// all nodules.
std::string outcome_json(const std::string& case_id, const std::vector<std::string>& nodule_ids,
                         const std::vector<ClassificationOutcome>& outcomes);

/// Runs whatever stages are missing (align, otsu segmentation, features) and
/// returns the case's feature records.
std::vector<FeatureRecord> ensure_features(const fs::path& case_dir, const AlignConfig& align = {},
                                           const FeatureConfig& cfg = {});

// ---------------------------------------------------------------------------
// In-memory processing (no artifacts written).

struct ProcessedCase {
  Stabilization stabilization;
  RoiMask roi;
  std::vector<FeatureRecord> features;
};

ProcessedCase process_case(const CaseRecord& record, const ThermalSequence& sequence, const AlignConfig& align = {},
                           const FeatureConfig& cfg = {});

// ---------------------------------------------------------------------------
// Studies

/// Case directories (sub-directories holding case.json), sorted by name.
std::vector<fs::path> list_cases(const fs::path& data_dir);

/// Runs fn(i) for i in [0, n) on up to `jobs` threads. The first failing
/// index's exception is rethrown after all workers finish.
void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn);

struct LabelledRecords {
  std::vector<FeatureRecord> records;
  std::vector<int> labels;           // 1 = viable
  std::vector<std::string> groups;   // participant ids
};

/// Key used by splits and bundles: "<case_id>/<nodule_id>".
std::string record_key(const FeatureRecord& record);

/// Collects the feature records of every labelled case, computing missing
/// stages on the way.
LabelledRecords collect_study(const fs::path& data_dir, int jobs = 1, const AlignConfig& align = {},
                              const FeatureConfig& cfg = {});

struct TrainStudyResult {
  ModelBundle bundle;
  SplitPlan split;
  StudyReport validation_report;
};

TrainStudyResult train_on_records(const LabelledRecords& data, std::string_view ratio, std::uint64_t seed,
                                  const TrainOptions& options, bool group_aware = false);

/// Evaluates on the bundle's test ids when it has any, else on every record
/// not used for training or validation.
StudyReport evaluate_on_records(const LabelledRecords& data, const ModelBundle& bundle);

}  // namespace thermoviab
