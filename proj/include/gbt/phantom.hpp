#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <utility>
#include <vector>

#include "gbt/volume.hpp"

namespace gbt {

/// Roster of the five synthetic pelvic structures. Label values are fixed;
/// on overlap the lower label wins.
enum PhantomLabel : int {
    kBackground = 0,
    kBladderAnalog = 1,
    kRectumAnalog = 2,
    kHrctvAnalog = 3,
    kUterusAnalog = 4,
    kSigmoidAnalog = 5,
};

const char* phantom_label_name(int label);

struct PhantomSpec {
    std::array<int, 3> dims{64, 64, 64};
    double spacing_mm = 1.5;
    double noise_sd = 8.0;

    // Mean intensity per region. The sigmoid analog is capped at
    // background + 12 so the hardest structure stays low-contrast.
    double background_level = 20.0;
    double bladder_level = 100.0;
    double rectum_level = 48.0;
    double hrctv_level = 66.0;
    double uterus_level = 54.0;
    double sigmoid_level = 32.0;  // clamped to background + contrast cap
    double sigmoid_contrast_cap = 12.0;

    // Center jitter in voxels and multiplicative size jitter per structure.
    double center_jitter_vox = 3.0;
    double size_jitter_lo = 0.85;
    double size_jitter_hi = 1.15;

    // Expected label-5 tube volume bounds (voxels) for the default geometry.
    std::int64_t sigmoid_min_voxels = 300;
    std::int64_t sigmoid_max_voxels = 4000;

    std::uint64_t rng_seed = 0;
    int min_voxels_per_label = 50;
    int max_attempts = 100;
};

class PhantomError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Deterministic function of (spec.rng_seed, case_index). The per-case RNG
/// stream is splitmix64(rng_seed XOR case_index) feeding xoshiro256**.
std::pair<VoxelGrid, LabelMap> generate_case(const PhantomSpec& spec,
                                             std::uint64_t case_index);

struct CohortEntry {
    std::uint64_t index = 0;
    std::string image;
    std::string labels;
};

struct CohortManifest {
    std::uint64_t seed = 0;
    PhantomSpec spec;
    std::vector<CohortEntry> cases;
};

/// Writes case_<i>_img.gbtv / case_<i>_lbl.gbtv files plus cohort.json.
CohortManifest write_cohort(const PhantomSpec& spec, int num_cases,
                            const std::filesystem::path& dir);

CohortManifest load_cohort_manifest(const std::filesystem::path& json_path);

}  // namespace gbt
