#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <variant>
#include <vector>

namespace gbt {

/// Scalar 3D image with physical spacing. dims are (depth, height, width),
/// data is row-major with width fastest. Voxels are stored as 32-bit reals;
/// statistics over them accumulate in 64-bit.
struct VoxelGrid {
    std::array<int, 3> dims{0, 0, 0};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};  // mm per voxel
    std::array<float, 3> origin{0.0f, 0.0f, 0.0f};   // mm
    std::vector<float> data;

    std::int64_t voxel_count() const {
        return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
    }
    std::int64_t index(int d, int h, int w) const {
        return (static_cast<std::int64_t>(d) * dims[1] + h) * dims[2] + w;
    }
    float& at(int d, int h, int w) { return data[index(d, h, w)]; }
    float at(int d, int h, int w) const { return data[index(d, h, w)]; }
};

/// Integer label volume paired with a VoxelGrid geometry.
struct LabelMap {
    std::array<int, 3> dims{0, 0, 0};
    std::array<float, 3> spacing{1.0f, 1.0f, 1.0f};
    std::array<float, 3> origin{0.0f, 0.0f, 0.0f};
    std::vector<std::uint8_t> labels;
    int num_classes = 0;

    std::int64_t voxel_count() const {
        return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
    }
    std::int64_t index(int d, int h, int w) const {
        return (static_cast<std::int64_t>(d) * dims[1] + h) * dims[2] + w;
    }
    std::uint8_t& at(int d, int h, int w) { return labels[index(d, h, w)]; }
    std::uint8_t at(int d, int h, int w) const { return labels[index(d, h, w)]; }

    bool same_geometry(const LabelMap& o) const {
        return dims == o.dims && spacing == o.spacing && origin == o.origin;
    }
};

struct AugmentSpec {
    std::array<int, 3> crop_dims{0, 0, 0};
    std::array<bool, 3> flip_axes{false, false, false};
    std::uint64_t rng_seed = 0;
};

// ---------------------------------------------------------------------------
// .gbtv codec
// ---------------------------------------------------------------------------

enum class CodecErrorKind {
    bad_magic,
    version_mismatch,
    bad_header,
    wrong_dtype,
    truncated_payload,
    payload_size_mismatch,
    bad_labels,
    io_failure,
};

class CodecError : public std::runtime_error {
public:
    CodecError(CodecErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind(kind) {}
    CodecErrorKind kind;
};

std::vector<std::uint8_t> encode_gbtv(const VoxelGrid& grid);
std::vector<std::uint8_t> encode_gbtv(const LabelMap& labels);

VoxelGrid decode_gbtv_image(std::span<const std::uint8_t> bytes);
LabelMap decode_gbtv_labels(std::span<const std::uint8_t> bytes);
std::variant<VoxelGrid, LabelMap> decode_gbtv(std::span<const std::uint8_t> bytes);

void save_gbtv(const VoxelGrid& grid, const std::filesystem::path& path);
void save_gbtv(const LabelMap& labels, const std::filesystem::path& path);
VoxelGrid load_gbtv_image(const std::filesystem::path& path);
LabelMap load_gbtv_labels(const std::filesystem::path& path);
std::variant<VoxelGrid, LabelMap> load_gbtv(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Preprocessing and augmentation
// ---------------------------------------------------------------------------

/// Resample onto an isotropic grid with the given spacing (mm). New dims per
/// axis are round(old_dim * old_spacing / target), floored at 1. Images
/// interpolate trilinearly in physical coordinates with edge clamping;
/// label maps use nearest neighbor. Origin is preserved.
VoxelGrid resample_isotropic(const VoxelGrid& grid, double target_spacing_mm);
LabelMap resample_isotropic(const LabelMap& labels, double target_spacing_mm);

/// Z-score normalization over all voxels (population statistics). If the
/// input standard deviation is below 1e-8 the output is all zeros.
VoxelGrid znormalize(const VoxelGrid& grid);

/// Seeded random crop followed by independent 50% flips of the requested
/// axes; image and labels are transformed identically.
std::pair<VoxelGrid, LabelMap> augment(const VoxelGrid& grid,
                                       const LabelMap& labels,
                                       const AugmentSpec& spec);

}  // namespace gbt
