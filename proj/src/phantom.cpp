#include "gbt/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "gbt/rng.hpp"

namespace gbt {

const char* phantom_label_name(int label) {
    switch (label) {
        case kBackground: return "background";
        case kBladderAnalog: return "bladder-analog";
        case kRectumAnalog: return "rectum-analog";
        case kHrctvAnalog: return "hrctv-analog";
        case kUterusAnalog: return "uterus-analog";
        case kSigmoidAnalog: return "sigmoid-analog";
        default: return "unknown";
    }
}

namespace {

using Vec3 = std::array<double, 3>;

struct LabelCanvas {
    std::array<int, 3> dims;
    std::vector<std::uint8_t> labels;

    explicit LabelCanvas(const std::array<int, 3>& d)
        : dims(d),
          labels(static_cast<std::size_t>(d[0]) * d[1] * d[2], 0) {}

    std::int64_t index(int d, int h, int w) const {
        return (static_cast<std::int64_t>(d) * dims[1] + h) * dims[2] + w;
    }

    // Lower labels take precedence on overlap.
    void claim(int d, int h, int w, std::uint8_t label) {
        auto& cell = labels[static_cast<std::size_t>(index(d, h, w))];
        if (cell == 0 || label < cell) cell = label;
    }
};

void paint_ellipsoid(LabelCanvas& canvas, const Vec3& center, const Vec3& semi,
                     std::uint8_t label) {
    std::array<int, 3> lo{}, hi{};
    for (int a = 0; a < 3; ++a) {
        lo[a] = std::max(0, static_cast<int>(std::floor(center[a] - semi[a])));
        hi[a] = std::min(canvas.dims[a] - 1,
                         static_cast<int>(std::ceil(center[a] + semi[a])));
    }
    for (int d = lo[0]; d <= hi[0]; ++d)
        for (int h = lo[1]; h <= hi[1]; ++h)
            for (int w = lo[2]; w <= hi[2]; ++w) {
                const double zd = (d - center[0]) / semi[0];
                const double zh = (h - center[1]) / semi[1];
                const double zw = (w - center[2]) / semi[2];
                if (zd * zd + zh * zh + zw * zw <= 1.0)
                    canvas.claim(d, h, w, label);
            }
}

void paint_sphere(LabelCanvas& canvas, const Vec3& center, double radius,
                  std::uint8_t label) {
    paint_ellipsoid(canvas, center, {radius, radius, radius}, label);
}

// Straight tube along the depth axis.
void paint_tube_z(LabelCanvas& canvas, double ch, double cw, double radius,
                  int d0, int d1, std::uint8_t label) {
    const int hlo = std::max(0, static_cast<int>(std::floor(ch - radius)));
    const int hhi = std::min(canvas.dims[1] - 1,
                             static_cast<int>(std::ceil(ch + radius)));
    const int wlo = std::max(0, static_cast<int>(std::floor(cw - radius)));
    const int whi = std::min(canvas.dims[2] - 1,
                             static_cast<int>(std::ceil(cw + radius)));
    const double r2 = radius * radius;
    for (int d = std::max(0, d0); d <= std::min(canvas.dims[0] - 1, d1); ++d)
        for (int h = hlo; h <= hhi; ++h)
            for (int w = wlo; w <= whi; ++w) {
                const double dh = h - ch;
                const double dw = w - cw;
                if (dh * dh + dw * dw <= r2) canvas.claim(d, h, w, label);
            }
}

std::array<std::int64_t, 6> label_counts(const LabelCanvas& canvas) {
    std::array<std::int64_t, 6> counts{};
    for (std::uint8_t v : canvas.labels)
        if (v < 6) ++counts[v];
    return counts;
}

Vec3 jitter_center(Rng& rng, const Vec3& nominal, double amount) {
    Vec3 out;
    for (int a = 0; a < 3; ++a)
        out[a] = nominal[a] + rng.uniform(-amount, amount);
    return out;
}

}  // namespace

std::pair<VoxelGrid, LabelMap> generate_case(const PhantomSpec& spec,
                                             std::uint64_t case_index) {
    for (int a = 0; a < 3; ++a)
        if (spec.dims[a] < 16)
            throw PhantomError("phantom: dims must be at least 16 per axis");

    Rng rng(spec.rng_seed ^ case_index);

    const double D = spec.dims[0], H = spec.dims[1], W = spec.dims[2];
    const double cj = spec.center_jitter_vox;

    LabelCanvas canvas(spec.dims);
    bool accepted = false;
    for (int attempt = 0; attempt < spec.max_attempts && !accepted; ++attempt) {
        std::fill(canvas.labels.begin(), canvas.labels.end(), 0);

        // Bladder analog: large high-contrast ellipsoid.
        {
            const Vec3 c = jitter_center(rng, {0.32 * D, 0.30 * H, 0.32 * W}, cj);
            const double s = rng.uniform(spec.size_jitter_lo, spec.size_jitter_hi);
            paint_ellipsoid(canvas, c,
                            {0.16 * D * s, 0.17 * H * s, 0.175 * W * s},
                            kBladderAnalog);
        }
        // Rectum analog: straight tube along the depth axis.
        {
            const double ch = 0.72 * H + rng.uniform(-cj, cj);
            const double cw = 0.50 * W + rng.uniform(-cj, cj);
            const double s = rng.uniform(spec.size_jitter_lo, spec.size_jitter_hi);
            paint_tube_z(canvas, ch, cw, 0.065 * std::min(H, W) * s,
                         static_cast<int>(0.12 * D),
                         static_cast<int>(0.92 * D), kRectumAnalog);
        }
        // Uterus analog with the HR-CTV analog blob adjoining it.
        {
            const Vec3 uc = jitter_center(rng, {0.52 * D, 0.52 * H, 0.60 * W}, cj);
            const double us =
                rng.uniform(spec.size_jitter_lo, spec.size_jitter_hi);
            const Vec3 usemi{0.145 * D * us, 0.155 * H * us, 0.145 * W * us};

            // Adjoins the uterus on the side away from the bladder.
            Vec3 hc{uc[0] + 0.11 * D, uc[1] - 0.10 * H, uc[2] - 0.05 * W};
            hc = jitter_center(rng, hc, cj * 0.5);
            const double hs =
                rng.uniform(spec.size_jitter_lo, spec.size_jitter_hi);

            paint_sphere(canvas, hc, 0.095 * (D + H + W) / 3.0 * hs,
                         kHrctvAnalog);
            paint_ellipsoid(canvas, uc, usemi, kUterusAnalog);
        }
        // Sigmoid analog: low-contrast random-walk tube.
        {
            Vec3 p = jitter_center(rng, {0.84 * D, 0.55 * H, 0.45 * W}, cj);
            const double s = rng.uniform(spec.size_jitter_lo, spec.size_jitter_hi);
            const double radius = 2.3 * s;
            const double margin = radius + 2.0;
            const double step_len = 1.4;
            Vec3 v{-1.0, 0.35, 0.3};
            const int steps = 26;
            for (int i = 0; i < steps; ++i) {
                for (int a = 0; a < 3; ++a) v[a] += 0.5 * rng.normal();
                const double norm =
                    std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]);
                for (int a = 0; a < 3; ++a) v[a] *= step_len / std::max(norm, 1e-9);
                // Two sub-steps per step keep the tube connected.
                for (int sub = 0; sub < 2; ++sub) {
                    for (int a = 0; a < 3; ++a) {
                        p[a] += 0.5 * v[a];
                        const double hi_lim = spec.dims[a] - 1 - margin;
                        if (p[a] < margin) { p[a] = margin; v[a] = -v[a]; }
                        if (p[a] > hi_lim) { p[a] = hi_lim; v[a] = -v[a]; }
                    }
                    paint_sphere(canvas, p, radius, kSigmoidAnalog);
                }
            }
        }

        const auto counts = label_counts(canvas);
        accepted = true;
        for (int label = 1; label <= 5; ++label)
            if (counts[label] < spec.min_voxels_per_label) accepted = false;
    }
    if (!accepted)
        throw PhantomError(
            "phantom: could not satisfy structure-size invariants after " +
            std::to_string(spec.max_attempts) + " attempts");

    // Per-region base intensities, one boundary-softening 3x3x3 mean pass,
    // then voxelwise Gaussian noise.
    const double sigmoid_level = std::min(
        spec.sigmoid_level, spec.background_level + spec.sigmoid_contrast_cap);
    const std::array<double, 6> level{
        spec.background_level, spec.bladder_level, spec.rectum_level,
        spec.hrctv_level,      spec.uterus_level,  sigmoid_level};

    const std::int64_t n = static_cast<std::int64_t>(spec.dims[0]) *
                           spec.dims[1] * spec.dims[2];
    std::vector<double> base(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
        base[static_cast<std::size_t>(i)] =
            level[canvas.labels[static_cast<std::size_t>(i)]];

    std::vector<double> smooth(static_cast<std::size_t>(n));
    const auto [Di, Hi, Wi] = spec.dims;
    for (int d = 0; d < Di; ++d)
        for (int h = 0; h < Hi; ++h)
            for (int w = 0; w < Wi; ++w) {
                double sum = 0.0;
                int cnt = 0;
                for (int dd = std::max(0, d - 1); dd <= std::min(Di - 1, d + 1); ++dd)
                    for (int hh = std::max(0, h - 1); hh <= std::min(Hi - 1, h + 1); ++hh)
                        for (int ww = std::max(0, w - 1); ww <= std::min(Wi - 1, w + 1); ++ww) {
                            sum += base[static_cast<std::size_t>(
                                canvas.index(dd, hh, ww))];
                            ++cnt;
                        }
                smooth[static_cast<std::size_t>(canvas.index(d, h, w))] =
                    sum / cnt;
            }

    VoxelGrid grid;
    grid.dims = spec.dims;
    const auto sp = static_cast<float>(spec.spacing_mm);
    grid.spacing = {sp, sp, sp};
    grid.data.resize(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i) {
        double v = smooth[static_cast<std::size_t>(i)];
        if (spec.noise_sd > 0.0) v += spec.noise_sd * rng.normal();
        grid.data[static_cast<std::size_t>(i)] = static_cast<float>(v);
    }

    LabelMap labels;
    labels.dims = spec.dims;
    labels.spacing = grid.spacing;
    labels.num_classes = 6;
    labels.labels = std::move(canvas.labels);
    return {std::move(grid), std::move(labels)};
}

// ---------------------------------------------------------------------------

namespace {

using nlohmann::ordered_json;

ordered_json spec_to_json(const PhantomSpec& s) {
    return ordered_json{
        {"dims", s.dims},
        {"spacing_mm", s.spacing_mm},
        {"noise_sd", s.noise_sd},
        {"background_level", s.background_level},
        {"bladder_level", s.bladder_level},
        {"rectum_level", s.rectum_level},
        {"hrctv_level", s.hrctv_level},
        {"uterus_level", s.uterus_level},
        {"sigmoid_level", s.sigmoid_level},
        {"sigmoid_contrast_cap", s.sigmoid_contrast_cap},
        {"center_jitter_vox", s.center_jitter_vox},
        {"size_jitter_lo", s.size_jitter_lo},
        {"size_jitter_hi", s.size_jitter_hi},
        {"sigmoid_min_voxels", s.sigmoid_min_voxels},
        {"sigmoid_max_voxels", s.sigmoid_max_voxels},
        {"rng_seed", s.rng_seed},
        {"min_voxels_per_label", s.min_voxels_per_label},
        {"max_attempts", s.max_attempts},
    };
}

PhantomSpec spec_from_json(const ordered_json& j) {
    PhantomSpec s;
    j.at("dims").get_to(s.dims);
    j.at("spacing_mm").get_to(s.spacing_mm);
    j.at("noise_sd").get_to(s.noise_sd);
    j.at("background_level").get_to(s.background_level);
    j.at("bladder_level").get_to(s.bladder_level);
    j.at("rectum_level").get_to(s.rectum_level);
    j.at("hrctv_level").get_to(s.hrctv_level);
    j.at("uterus_level").get_to(s.uterus_level);
    j.at("sigmoid_level").get_to(s.sigmoid_level);
    j.at("sigmoid_contrast_cap").get_to(s.sigmoid_contrast_cap);
    j.at("center_jitter_vox").get_to(s.center_jitter_vox);
    j.at("size_jitter_lo").get_to(s.size_jitter_lo);
    j.at("size_jitter_hi").get_to(s.size_jitter_hi);
    j.at("sigmoid_min_voxels").get_to(s.sigmoid_min_voxels);
    j.at("sigmoid_max_voxels").get_to(s.sigmoid_max_voxels);
    j.at("rng_seed").get_to(s.rng_seed);
    j.at("min_voxels_per_label").get_to(s.min_voxels_per_label);
    j.at("max_attempts").get_to(s.max_attempts);
    return s;
}

}  // namespace

CohortManifest write_cohort(const PhantomSpec& spec, int num_cases,
                            const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    CohortManifest manifest;
    manifest.seed = spec.rng_seed;
    manifest.spec = spec;
    for (int i = 0; i < num_cases; ++i) {
        auto [grid, labels] = generate_case(spec, static_cast<std::uint64_t>(i));
        CohortEntry entry;
        entry.index = static_cast<std::uint64_t>(i);
        entry.image = "case_" + std::to_string(i) + "_img.gbtv";
        entry.labels = "case_" + std::to_string(i) + "_lbl.gbtv";
        save_gbtv(grid, dir / entry.image);
        save_gbtv(labels, dir / entry.labels);
        manifest.cases.push_back(entry);
    }

    ordered_json j;
    j["seed"] = manifest.seed;
    j["spec"] = spec_to_json(spec);
    j["cases"] = ordered_json::array();
    for (const auto& c : manifest.cases)
        j["cases"].push_back(ordered_json{
            {"index", c.index}, {"image", c.image}, {"labels", c.labels}});

    std::ofstream out(dir / "cohort.json", std::ios::trunc);
    if (!out)
        throw PhantomError("phantom: cannot write cohort.json in " +
                           dir.string());
    out << j.dump(2) << "\n";
    return manifest;
}

CohortManifest load_cohort_manifest(const std::filesystem::path& json_path) {
    std::ifstream in(json_path);
    if (!in)
        throw PhantomError("phantom: cannot open manifest " +
                           json_path.string());
    ordered_json j = ordered_json::parse(in);
    CohortManifest manifest;
    manifest.seed = j.at("seed").get<std::uint64_t>();
    manifest.spec = spec_from_json(j.at("spec"));
    for (const auto& c : j.at("cases")) {
        CohortEntry entry;
        entry.index = c.at("index").get<std::uint64_t>();
        entry.image = c.at("image").get<std::string>();
        entry.labels = c.at("labels").get<std::string>();
        manifest.cases.push_back(entry);
    }
    return manifest;
}

}  // namespace gbt
