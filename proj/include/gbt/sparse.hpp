#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "gbt/kernels.hpp"
#include "gbt/tensor.hpp"

namespace gbt {

/// Binary per-voxel activity map at one resolution (true = active/unmasked).
struct OccupancyMask {
    std::array<int, 3> dims{0, 0, 0};
    std::vector<std::uint8_t> bits;  // one per voxel, row-major, width fastest

    OccupancyMask() = default;
    OccupancyMask(const std::array<int, 3>& d, bool active)
        : dims(d),
          bits(static_cast<std::size_t>(d[0]) * d[1] * d[2],
               active ? 1 : 0) {}

    std::int64_t voxel_count() const {
        return static_cast<std::int64_t>(dims[0]) * dims[1] * dims[2];
    }
    std::int64_t index(int d, int h, int w) const {
        return (static_cast<std::int64_t>(d) * dims[1] + h) * dims[2] + w;
    }
    bool active(int d, int h, int w) const {
        return bits[static_cast<std::size_t>(index(d, h, w))] != 0;
    }
    std::int64_t count_active() const {
        std::int64_t n = 0;
        for (auto b : bits) n += b ? 1 : 0;
        return n;
    }
    double active_fraction() const {
        return static_cast<double>(count_active()) /
               static_cast<double>(voxel_count());
    }
};

/// Masks per encoder resolution; level 0 is the input resolution and each
/// next level is the any-active 2x downsampling of the previous one.
struct MaskPyramid {
    std::vector<OccupancyMask> levels;
};

struct MaskSpec {
    std::array<int, 3> patch_dims{7, 8, 8};
    double mask_ratio = 0.6;
    std::uint64_t rng_seed = 0;
};

/// Tiles the volume into non-overlapping patches and masks each patch
/// (all its voxels inactive) independently with probability mask_ratio.
/// patch_dims must divide dims exactly.
OccupancyMask generate_patch_mask(const std::array<int, 3>& dims,
                                  const MaskSpec& spec);

MaskPyramid build_pyramid(const OccupancyMask& mask, int levels);

/// One any-active downsampling step: output dims are ceil(dims / 2).
OccupancyMask downsample_mask(const OccupancyMask& mask);

// ---------------------------------------------------------------------------
// Sparse kernels. Stride 1 requires mask_out == mask_in (submanifold rule);
// stride 2 requires mask_out == downsample_mask(mask_in). Inactive outputs
// are exactly zero, inactive inputs are never read, and backward deposits
// zero gradient into inactive input voxels. mac_counter, when non-null,
// accumulates the multiply-accumulates actually performed.
// ---------------------------------------------------------------------------

Tensor5 sparse_conv3d(const Tensor5& x, const OccupancyMask& mask_in,
                      const OccupancyMask& mask_out, const Tensor5& w,
                      const Tensor5& bias, ConvSpec spec,
                      std::uint64_t* mac_counter = nullptr);

ConvGrads sparse_conv3d_backward(const Tensor5& x, const OccupancyMask& mask_in,
                                 const OccupancyMask& mask_out,
                                 const Tensor5& w, ConvSpec spec,
                                 const Tensor5& grad_out);

/// Per-channel statistics pooled over the active voxels of all batch
/// samples; active outputs are normalized then affine-transformed, inactive
/// outputs are exactly zero. Requires at least 2 active voxels.
Tensor5 sparse_batch_norm(const Tensor5& x, const OccupancyMask& mask,
                          const Tensor5& gamma, const Tensor5& beta,
                          double eps);

NormGrads sparse_batch_norm_backward(const Tensor5& x,
                                     const OccupancyMask& mask,
                                     const Tensor5& gamma, double eps,
                                     const Tensor5& grad_out);

/// Zero out inactive voxels of every channel (used at the bottleneck in
/// the bottleneck_only mask-enforcement mode).
Tensor5 apply_mask(const Tensor5& x, const OccupancyMask& mask);
Tensor5 apply_mask_backward(const OccupancyMask& mask, const Tensor5& grad_out);

}  // namespace gbt
