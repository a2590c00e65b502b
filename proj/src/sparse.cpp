#include "gbt/sparse.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "gbt/rng.hpp"

namespace gbt {

OccupancyMask generate_patch_mask(const std::array<int, 3>& dims,
                                  const MaskSpec& spec) {
    for (int a = 0; a < 3; ++a) {
        if (spec.patch_dims[a] < 1)
            throw std::invalid_argument("mask: patch dims must be positive");
        if (dims[a] % spec.patch_dims[a] != 0)
            throw std::invalid_argument(
                "mask: patch dims must divide volume dims exactly");
    }
    if (spec.mask_ratio < 0.0 || spec.mask_ratio > 1.0)
        throw std::invalid_argument("mask: mask_ratio must lie in [0,1]");

    OccupancyMask mask(dims, true);
    Rng rng(spec.rng_seed);
    const int pd = dims[0] / spec.patch_dims[0];
    const int ph = dims[1] / spec.patch_dims[1];
    const int pw = dims[2] / spec.patch_dims[2];
    for (int i = 0; i < pd; ++i)
        for (int j = 0; j < ph; ++j)
            for (int k = 0; k < pw; ++k) {
                if (rng.uniform() >= spec.mask_ratio) continue;
                for (int d = i * spec.patch_dims[0];
                     d < (i + 1) * spec.patch_dims[0]; ++d)
                    for (int h = j * spec.patch_dims[1];
                         h < (j + 1) * spec.patch_dims[1]; ++h) {
                        auto* row = mask.bits.data() + mask.index(d, h, 0);
                        std::fill(row + k * spec.patch_dims[2],
                                  row + (k + 1) * spec.patch_dims[2],
                                  std::uint8_t{0});
                    }
            }
    return mask;
}

OccupancyMask downsample_mask(const OccupancyMask& mask) {
    std::array<int, 3> od{};
    for (int a = 0; a < 3; ++a) od[a] = (mask.dims[a] + 1) / 2;
    OccupancyMask out(od, false);
    for (int d = 0; d < od[0]; ++d)
        for (int h = 0; h < od[1]; ++h)
            for (int w = 0; w < od[2]; ++w) {
                bool any = false;
                for (int dd = 2 * d; dd < std::min(mask.dims[0], 2 * d + 2) && !any; ++dd)
                    for (int hh = 2 * h; hh < std::min(mask.dims[1], 2 * h + 2) && !any; ++hh)
                        for (int ww = 2 * w; ww < std::min(mask.dims[2], 2 * w + 2) && !any; ++ww)
                            any = mask.active(dd, hh, ww);
                out.bits[static_cast<std::size_t>(out.index(d, h, w))] =
                    any ? 1 : 0;
            }
    return out;
}

MaskPyramid build_pyramid(const OccupancyMask& mask, int levels) {
    if (levels < 1)
        throw std::invalid_argument("build_pyramid: levels must be >= 1");
    MaskPyramid pyr;
    pyr.levels.push_back(mask);
    for (int l = 1; l < levels; ++l)
        pyr.levels.push_back(downsample_mask(pyr.levels.back()));
    return pyr;
}

// ---------------------------------------------------------------------------

namespace {

// Per-row list of [begin, end) active spans. Patch masking produces a few
// long runs per row, so span iteration runs at near-dense speed while still
// skipping every inactive site.
struct RowIntervals {
    int D = 0, H = 0, W = 0;
    std::vector<std::vector<std::pair<int, int>>> rows;
};

RowIntervals build_row_intervals(const OccupancyMask& m) {
    RowIntervals r;
    r.D = m.dims[0];
    r.H = m.dims[1];
    r.W = m.dims[2];
    r.rows.resize(static_cast<std::size_t>(r.D) * r.H);
    for (int d = 0; d < r.D; ++d)
        for (int h = 0; h < r.H; ++h) {
            auto& spans = r.rows[static_cast<std::size_t>(d) * r.H + h];
            const std::uint8_t* bits = m.bits.data() + m.index(d, h, 0);
            int w = 0;
            while (w < r.W) {
                while (w < r.W && !bits[w]) ++w;
                if (w == r.W) break;
                const int begin = w;
                while (w < r.W && bits[w]) ++w;
                spans.emplace_back(begin, w);
            }
        }
    return r;
}

void check_sparse_conv_args(const Tensor5& x, const OccupancyMask& mask_in,
                            const OccupancyMask& mask_out, const Tensor5& w,
                            ConvSpec spec) {
    if (mask_in.dims != std::array<int, 3>{x.shape[2], x.shape[3], x.shape[4]})
        throw std::invalid_argument("sparse_conv3d: mask/tensor dim mismatch");
    if (w.shape[1] != x.shape[1])
        throw std::invalid_argument("sparse_conv3d: channel mismatch");
    const auto od = conv_out_dims(x.shape, spec.stride);
    if (mask_out.dims != od)
        throw std::invalid_argument(
            "sparse_conv3d: output mask dims do not match conv output");
    if (spec.stride == 1) {
        if (mask_out.bits != mask_in.bits)
            throw std::invalid_argument(
                "sparse_conv3d: stride-1 call requires mask_out == mask_in");
    } else {
        if (mask_out.bits != downsample_mask(mask_in).bits)
            throw std::invalid_argument(
                "sparse_conv3d: stride-2 output mask must be one pyramid step "
                "of the input mask");
    }
}

}  // namespace

Tensor5 sparse_conv3d(const Tensor5& x, const OccupancyMask& mask_in,
                      const OccupancyMask& mask_out, const Tensor5& w,
                      const Tensor5& bias, ConvSpec spec,
                      std::uint64_t* mac_counter) {
    check_sparse_conv_args(x, mask_in, mask_out, w, spec);
    if (bias.size() != 0 && bias.size() != w.shape[0])
        throw std::invalid_argument("sparse_conv3d: bias size mismatch");

    const int N = x.shape[0], CI = x.shape[1];
    const int D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int CO = w.shape[0], K = spec.kernel, S = spec.stride, P = spec.padding();
    const int OD = mask_out.dims[0], OH = mask_out.dims[1], OW = mask_out.dims[2];

    const RowIntervals iv_in = build_row_intervals(mask_in);
    const RowIntervals iv_out = build_row_intervals(mask_out);

    Tensor5 y(N, CO, OD, OH, OW);
    const std::int64_t x_plane = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t y_plane = static_cast<std::int64_t>(OD) * OH * OW;
    std::uint64_t macs = 0;

    for (int n = 0; n < N; ++n)
        for (int co = 0; co < CO; ++co) {
            double* yp =
                y.data.data() + (static_cast<std::int64_t>(n) * CO + co) * y_plane;
            const double b =
                bias.size() ? bias.data[static_cast<std::size_t>(co)] : 0.0;
            for (int od = 0; od < OD; ++od)
                for (int oh = 0; oh < OH; ++oh) {
                    double* yr = yp + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                    for (const auto& [a0, a1] :
                         iv_out.rows[static_cast<std::size_t>(od) * OH + oh])
                        std::fill(yr + a0, yr + a1, b);
                }
            for (int ci = 0; ci < CI; ++ci) {
                const double* xp =
                    x.data.data() + (static_cast<std::int64_t>(n) * CI + ci) * x_plane;
                const double* wp =
                    w.data.data() +
                    (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                for (int kd = 0; kd < K; ++kd)
                    for (int kh = 0; kh < K; ++kh)
                        for (int kw = 0; kw < K; ++kw) {
                            const double wv = wp[(kd * K + kh) * K + kw];
                            const int woff = kw - P;
                            for (int od = 0; od < OD; ++od) {
                                const int id = S * od + kd - P;
                                if (id < 0 || id >= D) continue;
                                for (int oh = 0; oh < OH; ++oh) {
                                    const int ih = S * oh + kh - P;
                                    if (ih < 0 || ih >= H) continue;
                                    const auto& out_spans =
                                        iv_out.rows[static_cast<std::size_t>(od) * OH + oh];
                                    if (out_spans.empty()) continue;
                                    const auto& in_spans =
                                        iv_in.rows[static_cast<std::size_t>(id) * H + ih];
                                    if (in_spans.empty()) continue;
                                    double* yr =
                                        yp + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                                    const double* xr =
                                        xp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                    if (S == 1) {
                                        for (const auto& [a0, a1] : out_spans)
                                            for (const auto& [c0, c1] : in_spans) {
                                                const int q0 = std::max(a0, c0 - woff);
                                                const int q1 = std::min(a1, c1 - woff);
                                                if (q0 >= q1) continue;
                                                macs += static_cast<std::uint64_t>(q1 - q0);
                                                for (int q = q0; q < q1; ++q)
                                                    yr[q] += wv * xr[q + woff];
                                            }
                                    } else {
                                        const std::uint8_t* in_bits =
                                            mask_in.bits.data() + mask_in.index(id, ih, 0);
                                        for (const auto& [a0, a1] : out_spans)
                                            for (int q = a0; q < a1; ++q) {
                                                const int iw = S * q + woff;
                                                if (iw < 0 || iw >= W || !in_bits[iw]) continue;
                                                ++macs;
                                                yr[q] += wv * xr[iw];
                                            }
                                    }
                                }
                            }
                        }
            }
        }
    if (mac_counter) *mac_counter += macs;
    return y;
}

ConvGrads sparse_conv3d_backward(const Tensor5& x, const OccupancyMask& mask_in,
                                 const OccupancyMask& mask_out,
                                 const Tensor5& w, ConvSpec spec,
                                 const Tensor5& grad_out) {
    check_sparse_conv_args(x, mask_in, mask_out, w, spec);
    const int N = x.shape[0], CI = x.shape[1];
    const int D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int CO = w.shape[0], K = spec.kernel, S = spec.stride, P = spec.padding();
    const int OD = mask_out.dims[0], OH = mask_out.dims[1], OW = mask_out.dims[2];
    if (grad_out.shape != std::array<int, 5>{N, CO, OD, OH, OW})
        throw std::invalid_argument("sparse_conv3d_backward: grad_out shape");

    const RowIntervals iv_in = build_row_intervals(mask_in);
    const RowIntervals iv_out = build_row_intervals(mask_out);

    ConvGrads g;
    g.x = Tensor5(N, CI, D, H, W);
    g.w = Tensor5(CO, CI, K, K, K);
    g.bias = Tensor5(CO, 1, 1, 1, 1);

    const std::int64_t x_plane = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t y_plane = static_cast<std::int64_t>(OD) * OH * OW;

    for (int n = 0; n < N; ++n)
        for (int co = 0; co < CO; ++co) {
            const double* gy =
                grad_out.data.data() +
                (static_cast<std::int64_t>(n) * CO + co) * y_plane;
            // grad_bias over active outputs
            double bacc = 0.0;
            for (int od = 0; od < OD; ++od)
                for (int oh = 0; oh < OH; ++oh) {
                    const double* gr =
                        gy + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                    for (const auto& [a0, a1] :
                         iv_out.rows[static_cast<std::size_t>(od) * OH + oh])
                        for (int q = a0; q < a1; ++q) bacc += gr[q];
                }
            g.bias.data[static_cast<std::size_t>(co)] += bacc;

            for (int ci = 0; ci < CI; ++ci) {
                const double* xp =
                    x.data.data() + (static_cast<std::int64_t>(n) * CI + ci) * x_plane;
                double* gxp =
                    g.x.data.data() + (static_cast<std::int64_t>(n) * CI + ci) * x_plane;
                const double* wp =
                    w.data.data() +
                    (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                double* gwp =
                    g.w.data.data() +
                    (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                for (int kd = 0; kd < K; ++kd)
                    for (int kh = 0; kh < K; ++kh)
                        for (int kw = 0; kw < K; ++kw) {
                            const double wv = wp[(kd * K + kh) * K + kw];
                            const int woff = kw - P;
                            double wacc = 0.0;
                            for (int od = 0; od < OD; ++od) {
                                const int id = S * od + kd - P;
                                if (id < 0 || id >= D) continue;
                                for (int oh = 0; oh < OH; ++oh) {
                                    const int ih = S * oh + kh - P;
                                    if (ih < 0 || ih >= H) continue;
                                    const auto& out_spans =
                                        iv_out.rows[static_cast<std::size_t>(od) * OH + oh];
                                    if (out_spans.empty()) continue;
                                    const auto& in_spans =
                                        iv_in.rows[static_cast<std::size_t>(id) * H + ih];
                                    if (in_spans.empty()) continue;
                                    const double* gr =
                                        gy + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                                    const double* xr =
                                        xp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                    double* gxr =
                                        gxp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                    if (S == 1) {
                                        for (const auto& [a0, a1] : out_spans)
                                            for (const auto& [c0, c1] : in_spans) {
                                                const int q0 = std::max(a0, c0 - woff);
                                                const int q1 = std::min(a1, c1 - woff);
                                                for (int q = q0; q < q1; ++q) {
                                                    wacc += gr[q] * xr[q + woff];
                                                    gxr[q + woff] += wv * gr[q];
                                                }
                                            }
                                    } else {
                                        const std::uint8_t* in_bits =
                                            mask_in.bits.data() + mask_in.index(id, ih, 0);
                                        for (const auto& [a0, a1] : out_spans)
                                            for (int q = a0; q < a1; ++q) {
                                                const int iw = S * q + woff;
                                                if (iw < 0 || iw >= W || !in_bits[iw]) continue;
                                                wacc += gr[q] * xr[iw];
                                                gxr[iw] += wv * gr[q];
                                            }
                                    }
                                }
                            }
                            gwp[(kd * K + kh) * K + kw] += wacc;
                        }
            }
        }
    return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_sparse_norm_args(const Tensor5& x, const OccupancyMask& mask,
                            const Tensor5& gamma, const Tensor5& beta) {
    if (mask.dims != std::array<int, 3>{x.shape[2], x.shape[3], x.shape[4]})
        throw std::invalid_argument("sparse_batch_norm: mask/tensor dim mismatch");
    if (gamma.size() != x.shape[1] ||
        (beta.size() != 0 && beta.size() != x.shape[1]))
        throw std::invalid_argument("sparse_batch_norm: affine length");
}

}  // namespace

Tensor5 sparse_batch_norm(const Tensor5& x, const OccupancyMask& mask,
                          const Tensor5& gamma, const Tensor5& beta,
                          double eps) {
    check_sparse_norm_args(x, mask, gamma, beta);
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    const std::int64_t active = mask.count_active();
    const double count = static_cast<double>(active) * N;
    if (count < 2)
        throw std::invalid_argument(
            "sparse_batch_norm: fewer than 2 active voxels");

    const RowIntervals iv = build_row_intervals(mask);
    const int D = mask.dims[0], H = mask.dims[1], W = mask.dims[2];

    Tensor5 y(N, C, x.shape[2], x.shape[3], x.shape[4]);
    for (int c = 0; c < C; ++c) {
        double sum = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (int d = 0; d < D; ++d)
                for (int h = 0; h < H; ++h) {
                    const double* xr = xp + (static_cast<std::int64_t>(d) * H + h) * W;
                    for (const auto& [a0, a1] :
                         iv.rows[static_cast<std::size_t>(d) * H + h])
                        for (int q = a0; q < a1; ++q) sum += xr[q];
                }
        }
        const double mu = sum / count;
        double ss = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (int d = 0; d < D; ++d)
                for (int h = 0; h < H; ++h) {
                    const double* xr = xp + (static_cast<std::int64_t>(d) * H + h) * W;
                    for (const auto& [a0, a1] :
                         iv.rows[static_cast<std::size_t>(d) * H + h])
                        for (int q = a0; q < a1; ++q) {
                            const double dv = xr[q] - mu;
                            ss += dv * dv;
                        }
                }
        }
        const double inv = 1.0 / std::sqrt(ss / count + eps);
        const double scale = gamma.data[static_cast<std::size_t>(c)] * inv;
        const double shift =
            (beta.size() ? beta.data[static_cast<std::size_t>(c)] : 0.0) -
            mu * scale;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            double* yp = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (int d = 0; d < D; ++d)
                for (int h = 0; h < H; ++h) {
                    const double* xr = xp + (static_cast<std::int64_t>(d) * H + h) * W;
                    double* yr = yp + (static_cast<std::int64_t>(d) * H + h) * W;
                    for (const auto& [a0, a1] :
                         iv.rows[static_cast<std::size_t>(d) * H + h])
                        for (int q = a0; q < a1; ++q) yr[q] = xr[q] * scale + shift;
                }
        }
    }
    return y;
}

NormGrads sparse_batch_norm_backward(const Tensor5& x,
                                     const OccupancyMask& mask,
                                     const Tensor5& gamma, double eps,
                                     const Tensor5& grad_out) {
    Tensor5 empty_beta;
    check_sparse_norm_args(x, mask, gamma, empty_beta);
    check_same_shape(x, grad_out, "sparse_batch_norm_backward");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    const double count = static_cast<double>(mask.count_active()) * N;
    if (count < 2)
        throw std::invalid_argument(
            "sparse_batch_norm: fewer than 2 active voxels");

    const RowIntervals iv = build_row_intervals(mask);
    const int D = mask.dims[0], H = mask.dims[1], W = mask.dims[2];

    NormGrads g;
    g.x = Tensor5::zeros_like(x);
    g.gamma = Tensor5(1, C, 1, 1, 1);
    g.beta = Tensor5(1, C, 1, 1, 1);

    for (int c = 0; c < C; ++c) {
        double sum = 0.0, ss = 0.0;
        for (int pass = 0; pass < 2; ++pass) {
            const double mu = pass == 0 ? 0.0 : sum / count;
            double acc = 0.0;
            for (int n = 0; n < N; ++n) {
                const double* xp =
                    x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
                for (int d = 0; d < D; ++d)
                    for (int h = 0; h < H; ++h) {
                        const double* xr =
                            xp + (static_cast<std::int64_t>(d) * H + h) * W;
                        for (const auto& [a0, a1] :
                             iv.rows[static_cast<std::size_t>(d) * H + h])
                            for (int q = a0; q < a1; ++q) {
                                if (pass == 0) {
                                    acc += xr[q];
                                } else {
                                    const double dv = xr[q] - mu;
                                    acc += dv * dv;
                                }
                            }
                    }
            }
            if (pass == 0)
                sum = acc;
            else
                ss = acc;
        }
        const double mu = sum / count;
        const double inv = 1.0 / std::sqrt(ss / count + eps);

        double gsum = 0.0, gdot = 0.0;
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * M;
            const double* xp = x.data.data() + base;
            const double* gy = grad_out.data.data() + base;
            for (int d = 0; d < D; ++d)
                for (int h = 0; h < H; ++h) {
                    const std::int64_t row = (static_cast<std::int64_t>(d) * H + h) * W;
                    for (const auto& [a0, a1] :
                         iv.rows[static_cast<std::size_t>(d) * H + h])
                        for (int q = a0; q < a1; ++q) {
                            gsum += gy[row + q];
                            gdot += gy[row + q] * (xp[row + q] - mu) * inv;
                        }
                }
        }
        g.gamma.data[static_cast<std::size_t>(c)] = gdot;
        g.beta.data[static_cast<std::size_t>(c)] = gsum;

        const double k = gamma.data[static_cast<std::size_t>(c)] * inv;
        const double mean_g = gsum / count;
        const double mean_gx = gdot / count;
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * M;
            const double* xp = x.data.data() + base;
            const double* gy = grad_out.data.data() + base;
            double* gx = g.x.data.data() + base;
            for (int d = 0; d < D; ++d)
                for (int h = 0; h < H; ++h) {
                    const std::int64_t row = (static_cast<std::int64_t>(d) * H + h) * W;
                    for (const auto& [a0, a1] :
                         iv.rows[static_cast<std::size_t>(d) * H + h])
                        for (int q = a0; q < a1; ++q) {
                            const double xhat = (xp[row + q] - mu) * inv;
                            gx[row + q] =
                                k * (gy[row + q] - mean_g - xhat * mean_gx);
                        }
                }
        }
    }
    return g;
}

Tensor5 apply_mask(const Tensor5& x, const OccupancyMask& mask) {
    if (mask.dims != std::array<int, 3>{x.shape[2], x.shape[3], x.shape[4]})
        throw std::invalid_argument("apply_mask: mask/tensor dim mismatch");
    Tensor5 y = x;
    const std::int64_t M = x.spatial_size();
    for (int n = 0; n < x.shape[0]; ++n)
        for (int c = 0; c < x.shape[1]; ++c) {
            double* yp = y.data.data() + (static_cast<std::int64_t>(n) * x.shape[1] + c) * M;
            for (std::int64_t i = 0; i < M; ++i)
                if (!mask.bits[static_cast<std::size_t>(i)]) yp[i] = 0.0;
        }
    return y;
}

Tensor5 apply_mask_backward(const OccupancyMask& mask, const Tensor5& grad_out) {
    return apply_mask(grad_out, mask);
}

}  // namespace gbt
