#pragma once

#include <array>
#include <cstdint>
#include <utility>

#include "gbt/tensor.hpp"

namespace gbt {

/// Convolution geometry. Kernels are isotropic k*k*k with k in {1,3},
/// stride in {1,2}, and zero "same" padding of k/2.
struct ConvSpec {
    int kernel = 3;
    int stride = 1;
    int padding() const { return kernel / 2; }
};

inline int conv_out_dim(int in_dim, int stride) {
    return (in_dim + stride - 1) / stride;  // ceil(d / stride), same padding
}

inline std::array<int, 3> conv_out_dims(const std::array<int, 5>& x_shape,
                                        int stride) {
    return {conv_out_dim(x_shape[2], stride), conv_out_dim(x_shape[3], stride),
            conv_out_dim(x_shape[4], stride)};
}

/// Multiply-accumulate count of a dense convolution (all taps counted).
std::int64_t dense_conv_macs(const std::array<int, 5>& x_shape,
                             const std::array<int, 5>& w_shape, int stride);

// ---------------------------------------------------------------------------
// conv3d: w is (out_ch, in_ch, k, k, k); bias is (out_ch, 1, 1, 1, 1) and may
// be empty (size 0) for a bias-free convolution.
// ---------------------------------------------------------------------------

Tensor5 conv3d(const Tensor5& x, const Tensor5& w, const Tensor5& bias,
               ConvSpec spec);

struct ConvGrads {
    Tensor5 x;
    Tensor5 w;
    Tensor5 bias;
};

ConvGrads conv3d_backward(const Tensor5& x, const Tensor5& w, ConvSpec spec,
                          const Tensor5& grad_out);

// ---------------------------------------------------------------------------
// Normalization. gamma/beta are (1, c, 1, 1, 1).
// ---------------------------------------------------------------------------

/// Per (sample, channel) spatial standardization with learned affine.
Tensor5 instance_norm(const Tensor5& x, const Tensor5& gamma,
                      const Tensor5& beta, double eps);

struct NormGrads {
    Tensor5 x;
    Tensor5 gamma;
    Tensor5 beta;
};

NormGrads instance_norm_backward(const Tensor5& x, const Tensor5& gamma,
                                 double eps, const Tensor5& grad_out);

/// Per-channel standardization pooling all batch samples (dense batch norm);
/// the dense counterpart of sparse_batch_norm under an all-active mask.
Tensor5 batch_norm(const Tensor5& x, const Tensor5& gamma, const Tensor5& beta,
                   double eps);

NormGrads batch_norm_backward(const Tensor5& x, const Tensor5& gamma,
                              double eps, const Tensor5& grad_out);

// ---------------------------------------------------------------------------
// Pointwise and structural ops
// ---------------------------------------------------------------------------

/// y = x for x >= 0 else slope * x. The gradient at exactly 0 uses the
/// positive branch.
Tensor5 leaky_relu(const Tensor5& x, double slope);
Tensor5 leaky_relu_backward(const Tensor5& x, double slope,
                            const Tensor5& grad_out);

/// Nearest-neighbor x2 upsampling: each voxel replicated into a 2^3 block.
Tensor5 upsample_nearest2(const Tensor5& x);
Tensor5 upsample_nearest2_backward(const std::array<int, 5>& x_shape,
                                   const Tensor5& grad_out);

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b);
std::pair<Tensor5, Tensor5> concat_channels_split(int a_channels,
                                                  const Tensor5& grad_out);

Tensor5 add(const Tensor5& a, const Tensor5& b);

/// Nearest x2 upsampling (skipped when skip already matches x), a 1x1x1
/// refinement convolution onto the skip's channel count, then channel
/// concatenation [refined, skip].
Tensor5 upsample_concat(const Tensor5& x, const Tensor5& skip,
                        const Tensor5& w1x1, const Tensor5& b1x1);

}  // namespace gbt
