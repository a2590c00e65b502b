#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbt/volume.hpp"

namespace gbt {

/// Surface voxels of one labeled region in physical coordinates
/// (voxel index * spacing, mm).
struct SurfacePointSet {
    std::vector<std::array<double, 3>> points;
    int label = 0;
};

/// Dice over the voxel sets of one label. Both regions empty -> 1.0,
/// exactly one empty -> 0.0.
double dsc(const LabelMap& pred, const LabelMap& gt, int label);

/// A voxel is a surface voxel iff it carries the label and at least one
/// 6-neighbor (or the volume boundary) does not.
SurfacePointSet extract_surface(const LabelMap& labels, int label);

/// Symmetric 95th-percentile Hausdorff distance (mm); percentile by linear
/// interpolation at rank 0.95 (n - 1). nullopt when either set is empty.
std::optional<double> hd95(const SurfacePointSet& a, const SurfacePointSet& b);

/// Average symmetric surface distance (mm). nullopt when either set is empty.
std::optional<double> asd(const SurfacePointSet& a, const SurfacePointSet& b);

/// Directed nearest-point distances from each point of `from` to `to`.
/// Exposed for the oracle-backed tests; brute force below 5000 points per
/// set, grid-bucket accelerated above.
std::vector<double> directed_distances(const SurfacePointSet& from,
                                       const SurfacePointSet& to);

struct StructureMetrics {
    int label = 0;
    std::string name;
    double dsc = 0.0;
    std::optional<double> hd95_mm;
    std::optional<double> asd_mm;
    std::int64_t voxels_pred = 0;
    std::int64_t voxels_gt = 0;
};

struct CaseReport {
    std::string case_id;
    std::array<float, 3> spacing{};
    std::vector<StructureMetrics> structures;
};

/// DSC / HD95 / ASD for every foreground label of a same-geometry pair.
CaseReport evaluate_case(const LabelMap& pred, const LabelMap& gt,
                         const std::string& case_id);

struct AggregateRow {
    int label = 0;
    std::string name;
    std::string metric;  // "dsc" | "hd95_mm" | "asd_mm"
    double mean = 0.0;
    double sd = 0.0;
    int n = 0;
    int undefined_count = 0;
};

std::vector<AggregateRow> aggregate_reports(const std::vector<CaseReport>& cases);

/// Model-level evaluation report: per-case JSON plus an aggregate CSV.
struct EvaluationReport {
    std::string model;
    std::vector<CaseReport> cases;
};

nlohmann::ordered_json report_to_json(const EvaluationReport& report);
EvaluationReport report_from_json(const nlohmann::ordered_json& j);
void save_report(const EvaluationReport& report,
                 const std::filesystem::path& json_path);
EvaluationReport load_report(const std::filesystem::path& json_path);
std::string aggregate_csv(const std::vector<AggregateRow>& rows);

}  // namespace gbt
