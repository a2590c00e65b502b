#include "gbt/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include "gbt/phantom.hpp"

namespace gbt {

namespace {

void check_geometry(const LabelMap& a, const LabelMap& b) {
    if (!a.same_geometry(b) || a.num_classes != b.num_classes)
        throw std::invalid_argument("metrics: geometry mismatch");
}

double sq(double v) { return v * v; }

double point_dist2(const std::array<double, 3>& a,
                   const std::array<double, 3>& b) {
    return sq(a[0] - b[0]) + sq(a[1] - b[1]) + sq(a[2] - b[2]);
}

/// Percentile by linear interpolation at rank p * (n - 1) of the sorted data.
double percentile(std::vector<double> values, double p) {
    std::sort(values.begin(), values.end());
    const double rank = p * static_cast<double>(values.size() - 1);
    const auto lo = static_cast<std::size_t>(rank);
    const std::size_t hi = std::min(lo + 1, values.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return values[lo] * (1.0 - frac) + values[hi] * frac;
}

constexpr std::size_t kBruteForceLimit = 5000;

std::vector<double> directed_brute(const SurfacePointSet& from,
                                   const SurfacePointSet& to) {
    std::vector<double> out;
    out.reserve(from.points.size());
    for (const auto& p : from.points) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& q : to.points) best = std::min(best, point_dist2(p, q));
        out.push_back(std::sqrt(best));
    }
    return out;
}

// Uniform grid over the target set; nearest neighbor by expanding shells.
class PointGrid {
public:
    explicit PointGrid(const std::vector<std::array<double, 3>>& points)
        : points_(points) {
        for (int a = 0; a < 3; ++a) {
            lo_[a] = std::numeric_limits<double>::infinity();
            hi_[a] = -std::numeric_limits<double>::infinity();
        }
        for (const auto& p : points)
            for (int a = 0; a < 3; ++a) {
                lo_[a] = std::min(lo_[a], p[a]);
                hi_[a] = std::max(hi_[a], p[a]);
            }
        double volume = 1.0;
        for (int a = 0; a < 3; ++a) volume *= std::max(hi_[a] - lo_[a], 1e-9);
        cell_ = std::cbrt(volume / static_cast<double>(points.size()));
        cell_ = std::max(cell_, 1e-9);
        for (int a = 0; a < 3; ++a)
            cells_[a] = std::max(
                1, static_cast<int>((hi_[a] - lo_[a]) / cell_) + 1);
        buckets_.resize(static_cast<std::size_t>(cells_[0]) * cells_[1] *
                        cells_[2]);
        for (std::size_t i = 0; i < points.size(); ++i)
            buckets_[bucket_of(points[i])].push_back(i);
    }

    double nearest(const std::array<double, 3>& p) const {
        std::array<int, 3> home{};
        for (int a = 0; a < 3; ++a)
            home[a] = std::clamp(
                static_cast<int>((p[a] - lo_[a]) / cell_), 0, cells_[a] - 1);
        double best2 = std::numeric_limits<double>::infinity();
        const int max_radius =
            std::max({cells_[0], cells_[1], cells_[2]});
        for (int radius = 0; radius <= max_radius; ++radius) {
            // Once a candidate is in hand, shells beyond best distance are done.
            if (best2 < std::numeric_limits<double>::infinity()) {
                const double shell_min =
                    (static_cast<double>(radius) - 1.0) * cell_;
                if (shell_min > 0.0 && shell_min * shell_min > best2) break;
            }
            scan_shell(p, home, radius, best2);
        }
        return std::sqrt(best2);
    }

private:
    std::size_t bucket_index(int d, int h, int w) const {
        return (static_cast<std::size_t>(d) * cells_[1] + h) * cells_[2] + w;
    }

    std::size_t bucket_of(const std::array<double, 3>& p) const {
        std::array<int, 3> c{};
        for (int a = 0; a < 3; ++a)
            c[a] = std::clamp(static_cast<int>((p[a] - lo_[a]) / cell_), 0,
                              cells_[a] - 1);
        return bucket_index(c[0], c[1], c[2]);
    }

    void scan_cell(const std::array<double, 3>& p, int d, int h, int w,
                   double& best2) const {
        for (std::size_t idx : buckets_[bucket_index(d, h, w)])
            best2 = std::min(best2, point_dist2(p, points_[idx]));
    }

    void scan_shell(const std::array<double, 3>& p,
                    const std::array<int, 3>& home, int radius,
                    double& best2) const {
        const int d0 = std::max(0, home[0] - radius);
        const int d1 = std::min(cells_[0] - 1, home[0] + radius);
        const int h0 = std::max(0, home[1] - radius);
        const int h1 = std::min(cells_[1] - 1, home[1] + radius);
        const int w0 = std::max(0, home[2] - radius);
        const int w1 = std::min(cells_[2] - 1, home[2] + radius);
        for (int d = d0; d <= d1; ++d)
            for (int h = h0; h <= h1; ++h)
                for (int w = w0; w <= w1; ++w) {
                    const int cheb =
                        std::max({std::abs(d - home[0]), std::abs(h - home[1]),
                                  std::abs(w - home[2])});
                    if (cheb != radius) continue;
                    scan_cell(p, d, h, w, best2);
                }
    }

    const std::vector<std::array<double, 3>>& points_;
    std::array<double, 3> lo_{}, hi_{};
    std::array<int, 3> cells_{};
    double cell_ = 1.0;
    std::vector<std::vector<std::size_t>> buckets_;
};

}  // namespace

std::vector<double> directed_distances(const SurfacePointSet& from,
                                       const SurfacePointSet& to) {
    if (from.points.empty() || to.points.empty())
        throw std::invalid_argument("directed_distances: empty point set");
    if (from.points.size() <= kBruteForceLimit &&
        to.points.size() <= kBruteForceLimit)
        return directed_brute(from, to);
    PointGrid grid(to.points);
    std::vector<double> out;
    out.reserve(from.points.size());
    for (const auto& p : from.points) out.push_back(grid.nearest(p));
    return out;
}

double dsc(const LabelMap& pred, const LabelMap& gt, int label) {
    check_geometry(pred, gt);
    std::int64_t np = 0, ng = 0, overlap = 0;
    const std::int64_t n = pred.voxel_count();
    for (std::int64_t i = 0; i < n; ++i) {
        const bool p = pred.labels[static_cast<std::size_t>(i)] == label;
        const bool g = gt.labels[static_cast<std::size_t>(i)] == label;
        np += p;
        ng += g;
        overlap += p && g;
    }
    if (np == 0 && ng == 0) return 1.0;
    if (np == 0 || ng == 0) return 0.0;
    return 2.0 * static_cast<double>(overlap) / static_cast<double>(np + ng);
}

SurfacePointSet extract_surface(const LabelMap& labels, int label) {
    SurfacePointSet out;
    out.label = label;
    const auto [D, H, W] = labels.dims;
    for (int d = 0; d < D; ++d)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w) {
                if (labels.at(d, h, w) != label) continue;
                const bool surface =
                    d == 0 || labels.at(d - 1, h, w) != label ||
                    d == D - 1 || labels.at(d + 1, h, w) != label ||
                    h == 0 || labels.at(d, h - 1, w) != label ||
                    h == H - 1 || labels.at(d, h + 1, w) != label ||
                    w == 0 || labels.at(d, h, w - 1) != label ||
                    w == W - 1 || labels.at(d, h, w + 1) != label;
                if (surface)
                    out.points.push_back({d * static_cast<double>(labels.spacing[0]),
                                          h * static_cast<double>(labels.spacing[1]),
                                          w * static_cast<double>(labels.spacing[2])});
            }
    return out;
}

std::optional<double> hd95(const SurfacePointSet& a, const SurfacePointSet& b) {
    if (a.points.empty() || b.points.empty()) return std::nullopt;
    const double pa = percentile(directed_distances(a, b), 0.95);
    const double pb = percentile(directed_distances(b, a), 0.95);
    return std::max(pa, pb);
}

std::optional<double> asd(const SurfacePointSet& a, const SurfacePointSet& b) {
    if (a.points.empty() || b.points.empty()) return std::nullopt;
    double sum = 0.0;
    for (double d : directed_distances(a, b)) sum += d;
    for (double d : directed_distances(b, a)) sum += d;
    return sum / static_cast<double>(a.points.size() + b.points.size());
}

CaseReport evaluate_case(const LabelMap& pred, const LabelMap& gt,
                         const std::string& case_id) {
    check_geometry(pred, gt);
    CaseReport report;
    report.case_id = case_id;
    report.spacing = gt.spacing;
    for (int label = 1; label < gt.num_classes; ++label) {
        StructureMetrics m;
        m.label = label;
        m.name = phantom_label_name(label);
        m.dsc = dsc(pred, gt, label);
        const SurfacePointSet sp = extract_surface(pred, label);
        const SurfacePointSet sg = extract_surface(gt, label);
        m.hd95_mm = hd95(sp, sg);
        m.asd_mm = asd(sp, sg);
        const std::int64_t n = pred.voxel_count();
        for (std::int64_t i = 0; i < n; ++i) {
            m.voxels_pred += pred.labels[static_cast<std::size_t>(i)] == label;
            m.voxels_gt += gt.labels[static_cast<std::size_t>(i)] == label;
        }
        report.structures.push_back(std::move(m));
    }
    return report;
}

std::vector<AggregateRow> aggregate_reports(
    const std::vector<CaseReport>& cases) {
    std::vector<AggregateRow> rows;
    if (cases.empty()) return rows;
    const auto& first = cases.front().structures;
    for (const auto& s : first) {
        for (const std::string metric : {"dsc", "hd95_mm", "asd_mm"}) {
            AggregateRow row;
            row.label = s.label;
            row.name = s.name;
            row.metric = metric;
            std::vector<double> values;
            for (const auto& c : cases)
                for (const auto& sm : c.structures) {
                    if (sm.label != s.label) continue;
                    std::optional<double> v;
                    if (metric == "dsc")
                        v = sm.dsc;
                    else if (metric == "hd95_mm")
                        v = sm.hd95_mm;
                    else
                        v = sm.asd_mm;
                    if (v.has_value())
                        values.push_back(*v);
                    else
                        ++row.undefined_count;
                }
            row.n = static_cast<int>(values.size());
            if (!values.empty()) {
                double sum = 0.0;
                for (double v : values) sum += v;
                row.mean = sum / static_cast<double>(values.size());
                double ss = 0.0;
                for (double v : values) ss += sq(v - row.mean);
                row.sd = values.size() > 1
                             ? std::sqrt(ss / static_cast<double>(values.size() - 1))
                             : 0.0;
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

// ---------------------------------------------------------------------------

namespace {

nlohmann::ordered_json structure_to_json(const StructureMetrics& m) {
    nlohmann::ordered_json j{{"label", m.label},
                             {"name", m.name},
                             {"dsc", m.dsc},
                             {"voxels_pred", m.voxels_pred},
                             {"voxels_gt", m.voxels_gt}};
    if (m.hd95_mm)
        j["hd95_mm"] = *m.hd95_mm;
    else
        j["hd95_mm"] = nullptr;
    if (m.asd_mm)
        j["asd_mm"] = *m.asd_mm;
    else
        j["asd_mm"] = nullptr;
    return j;
}

StructureMetrics structure_from_json(const nlohmann::ordered_json& j) {
    StructureMetrics m;
    j.at("label").get_to(m.label);
    j.at("name").get_to(m.name);
    j.at("dsc").get_to(m.dsc);
    j.at("voxels_pred").get_to(m.voxels_pred);
    j.at("voxels_gt").get_to(m.voxels_gt);
    if (!j.at("hd95_mm").is_null()) m.hd95_mm = j.at("hd95_mm").get<double>();
    if (!j.at("asd_mm").is_null()) m.asd_mm = j.at("asd_mm").get<double>();
    return m;
}

}  // namespace

nlohmann::ordered_json report_to_json(const EvaluationReport& report) {
    nlohmann::ordered_json j;
    j["model"] = report.model;
    j["cases"] = nlohmann::ordered_json::array();
    for (const auto& c : report.cases) {
        nlohmann::ordered_json cj;
        cj["case_id"] = c.case_id;
        cj["spacing_mm"] = c.spacing;
        cj["structures"] = nlohmann::ordered_json::array();
        for (const auto& s : c.structures)
            cj["structures"].push_back(structure_to_json(s));
        j["cases"].push_back(std::move(cj));
    }
    return j;
}

EvaluationReport report_from_json(const nlohmann::ordered_json& j) {
    EvaluationReport report;
    report.model = j.at("model").get<std::string>();
    for (const auto& cj : j.at("cases")) {
        CaseReport c;
        c.case_id = cj.at("case_id").get<std::string>();
        cj.at("spacing_mm").get_to(c.spacing);
        for (const auto& sj : cj.at("structures"))
            c.structures.push_back(structure_from_json(sj));
        report.cases.push_back(std::move(c));
    }
    return report;
}

void save_report(const EvaluationReport& report,
                 const std::filesystem::path& json_path) {
    std::ofstream out(json_path, std::ios::trunc);
    if (!out)
        throw std::runtime_error("metrics: cannot write " + json_path.string());
    out << report_to_json(report).dump(2) << "\n";
}

EvaluationReport load_report(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in)
        throw std::runtime_error("metrics: cannot open " + json_path.string());
    return report_from_json(nlohmann::ordered_json::parse(in));
}

std::string aggregate_csv(const std::vector<AggregateRow>& rows) {
    std::ostringstream out;
    out << "structure,metric,mean,sd,n,undefined_count\n";
    out.precision(9);
    for (const auto& row : rows) {
        out << row.name << "," << row.metric << ",";
        if (row.n > 0)
            out << row.mean << "," << row.sd;
        else
            out << ",";
        out << "," << row.n << "," << row.undefined_count << "\n";
    }
    return out.str();
}

}  // namespace gbt
