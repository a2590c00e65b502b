#include "gbt/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace gbt {

namespace {

void check_conv_args(const Tensor5& x, const Tensor5& w, const Tensor5& bias,
                     ConvSpec spec) {
    if (spec.kernel != 1 && spec.kernel != 3)
        throw std::invalid_argument("conv3d: kernel must be 1 or 3");
    if (spec.stride != 1 && spec.stride != 2)
        throw std::invalid_argument("conv3d: stride must be 1 or 2");
    if (w.shape[1] != x.shape[1])
        throw std::invalid_argument("conv3d: channel mismatch");
    if (w.shape[2] != spec.kernel || w.shape[3] != spec.kernel ||
        w.shape[4] != spec.kernel)
        throw std::invalid_argument("conv3d: weight shape/kernel mismatch");
    if (bias.size() != 0 && bias.size() != w.shape[0])
        throw std::invalid_argument("conv3d: bias size mismatch");
    if (x.shape[2] < 1 || x.shape[3] < 1 || x.shape[4] < 1)
        throw std::invalid_argument("conv3d: empty spatial input");
}

}  // namespace

std::int64_t dense_conv_macs(const std::array<int, 5>& x_shape,
                             const std::array<int, 5>& w_shape, int stride) {
    const auto out = conv_out_dims(x_shape, stride);
    return static_cast<std::int64_t>(x_shape[0]) * w_shape[0] * w_shape[1] *
           w_shape[2] * w_shape[3] * w_shape[4] * out[0] * out[1] * out[2];
}

Tensor5 conv3d(const Tensor5& x, const Tensor5& w, const Tensor5& bias,
               ConvSpec spec) {
    check_conv_args(x, w, bias, spec);
    const int N = x.shape[0], CI = x.shape[1];
    const int D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int CO = w.shape[0], K = spec.kernel, S = spec.stride, P = spec.padding();
    const auto od = conv_out_dims(x.shape, S);
    const int OD = od[0], OH = od[1], OW = od[2];

    Tensor5 y(N, CO, OD, OH, OW);
    const std::int64_t x_plane = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t y_plane = static_cast<std::int64_t>(OD) * OH * OW;

    // Row-local accumulator keeps each output row hot across all taps and
    // input channels instead of sweeping whole planes per tap.
    std::vector<double> row_acc(static_cast<std::size_t>(OW));

    for (int n = 0; n < N; ++n) {
        for (int co = 0; co < CO; ++co) {
            double* yp = y.data.data() + (static_cast<std::int64_t>(n) * CO + co) * y_plane;
            const double b = bias.size() ? bias.data[static_cast<std::size_t>(co)] : 0.0;
            const double* xbase =
                x.data.data() + static_cast<std::int64_t>(n) * CI * x_plane;
            const double* wbase =
                w.data.data() + static_cast<std::int64_t>(co) * CI * K * K * K;
            if (S == 1) {
                double* acc = row_acc.data();
                for (int od = 0; od < OD; ++od)
                    for (int oh = 0; oh < OH; ++oh) {
                        for (int q = 0; q < OW; ++q) acc[q] = b;
                        for (int ci = 0; ci < CI; ++ci) {
                            const double* xp = xbase + static_cast<std::int64_t>(ci) * x_plane;
                            const double* wp = wbase + static_cast<std::int64_t>(ci) * K * K * K;
                            for (int kd = 0; kd < K; ++kd) {
                                const int id = od + kd - P;
                                if (id < 0 || id >= D) continue;
                                for (int kh = 0; kh < K; ++kh) {
                                    const int ih = oh + kh - P;
                                    if (ih < 0 || ih >= H) continue;
                                    const double* xr =
                                        xp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                    const double* wrow = wp + (kd * K + kh) * K;
                                    if (K == 3 && W >= 2) {
                                        // Width taps fused into one pass.
                                        // Sequential statements keep the
                                        // accumulation order identical to the
                                        // per-tap sparse kernel.
                                        const double w0 = wrow[0], w1 = wrow[1],
                                                     w2 = wrow[2];
                                        acc[0] += w1 * xr[0];
                                        acc[0] += w2 * xr[1];
                                        for (int q = 1; q < W - 1; ++q) {
                                            double a = acc[q];
                                            a += w0 * xr[q - 1];
                                            a += w1 * xr[q];
                                            a += w2 * xr[q + 1];
                                            acc[q] = a;
                                        }
                                        acc[W - 1] += w0 * xr[W - 2];
                                        acc[W - 1] += w1 * xr[W - 1];
                                    } else {
                                        for (int kw = 0; kw < K; ++kw) {
                                            const double wv = wrow[kw];
                                            const int woff = kw - P;
                                            const int q0 = std::max(0, -woff);
                                            const int q1 = std::min(OW, W - woff);
                                            const double* xs = xr + woff;
                                            for (int q = q0; q < q1; ++q)
                                                acc[q] += wv * xs[q];
                                        }
                                    }
                                }
                            }
                        }
                        double* yr = yp + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                        for (int q = 0; q < OW; ++q) yr[q] = acc[q];
                    }
            } else {
                std::fill(yp, yp + y_plane, b);
                for (int ci = 0; ci < CI; ++ci) {
                const double* xp = xbase + static_cast<std::int64_t>(ci) * x_plane;
                const double* wp = wbase + static_cast<std::int64_t>(ci) * K * K * K;
                {
                    for (int kd = 0; kd < K; ++kd)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                const double wv = wp[(kd * K + kh) * K + kw];
                                for (int d = 0; d < OD; ++d) {
                                    const int id = S * d + kd - P;
                                    if (id < 0 || id >= D) continue;
                                    for (int h = 0; h < OH; ++h) {
                                        const int ih = S * h + kh - P;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* xr =
                                            xp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                        double* yr =
                                            yp + (static_cast<std::int64_t>(d) * OH + h) * OW;
                                        const int iw0 = kw - P;
                                        const int q0 = std::max(0, (-iw0 + S - 1) / S);
                                        const int q1 = std::min(OW, (W - iw0 + S - 1) / S);
                                        for (int q = q0; q < q1; ++q)
                                            yr[q] += wv * xr[S * q + iw0];
                                    }
                                }
                            }
                }
                }
            }
        }
    }
    return y;
}

ConvGrads conv3d_backward(const Tensor5& x, const Tensor5& w, ConvSpec spec,
                          const Tensor5& grad_out) {
    Tensor5 no_bias;
    check_conv_args(x, w, no_bias, spec);
    const int N = x.shape[0], CI = x.shape[1];
    const int D = x.shape[2], H = x.shape[3], W = x.shape[4];
    const int CO = w.shape[0], K = spec.kernel, S = spec.stride, P = spec.padding();
    const auto od = conv_out_dims(x.shape, S);
    const int OD = od[0], OH = od[1], OW = od[2];
    if (grad_out.shape != std::array<int, 5>{N, CO, OD, OH, OW})
        throw std::invalid_argument("conv3d_backward: grad_out shape mismatch");

    ConvGrads g;
    g.x = Tensor5(N, CI, D, H, W);
    g.w = Tensor5(CO, CI, K, K, K);
    g.bias = Tensor5(CO, 1, 1, 1, 1);

    const std::int64_t x_plane = static_cast<std::int64_t>(D) * H * W;
    const std::int64_t y_plane = static_cast<std::int64_t>(OD) * OH * OW;

    // grad_bias
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < CO; ++co) {
            const double* gy =
                grad_out.data.data() + (static_cast<std::int64_t>(n) * CO + co) * y_plane;
            double acc = 0.0;
            for (std::int64_t i = 0; i < y_plane; ++i) acc += gy[i];
            g.bias.data[static_cast<std::size_t>(co)] += acc;
        }

    // grad_w: per tap, dot of grad_out with the shifted input.
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < CO; ++co) {
            const double* gy =
                grad_out.data.data() + (static_cast<std::int64_t>(n) * CO + co) * y_plane;
            for (int ci = 0; ci < CI; ++ci) {
                const double* xp =
                    x.data.data() + (static_cast<std::int64_t>(n) * CI + ci) * x_plane;
                double* gw = g.w.data.data() +
                             (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                if (S == 1 && K == 3 && W >= 2) {
                    // One pass per (kd, kh) row accumulates all three width
                    // taps; two lanes per tap keep the chains independent.
                    for (int kd = 0; kd < K; ++kd)
                        for (int kh = 0; kh < K; ++kh) {
                            const int doff = kd - P, hoff = kh - P;
                            const int d0 = std::max(0, -doff),
                                      d1 = std::min(OD, D - doff);
                            const int h0 = std::max(0, -hoff),
                                      h1 = std::min(OH, H - hoff);
                            double a0[2] = {0, 0}, a1[2] = {0, 0}, a2[2] = {0, 0};
                            for (int d = d0; d < d1; ++d)
                                for (int h = h0; h < h1; ++h) {
                                    const double* xr =
                                        xp + (static_cast<std::int64_t>(d + doff) * H + h + hoff) * W;
                                    const double* gr =
                                        gy + (static_cast<std::int64_t>(d) * OH + h) * OW;
                                    a1[0] += gr[0] * xr[0];
                                    a2[0] += gr[0] * xr[1];
                                    int q = 1;
                                    for (; q + 2 <= W - 1; q += 2) {
                                        a0[0] += gr[q] * xr[q - 1];
                                        a1[0] += gr[q] * xr[q];
                                        a2[0] += gr[q] * xr[q + 1];
                                        a0[1] += gr[q + 1] * xr[q];
                                        a1[1] += gr[q + 1] * xr[q + 1];
                                        a2[1] += gr[q + 1] * xr[q + 2];
                                    }
                                    for (; q < W - 1; ++q) {
                                        a0[0] += gr[q] * xr[q - 1];
                                        a1[0] += gr[q] * xr[q];
                                        a2[0] += gr[q] * xr[q + 1];
                                    }
                                    a0[0] += gr[W - 1] * xr[W - 2];
                                    a1[0] += gr[W - 1] * xr[W - 1];
                                }
                            double* gwr = gw + (kd * K + kh) * K;
                            gwr[0] += a0[0] + a0[1];
                            gwr[1] += a1[0] + a1[1];
                            gwr[2] += a2[0] + a2[1];
                        }
                    continue;
                }
                for (int kd = 0; kd < K; ++kd)
                    for (int kh = 0; kh < K; ++kh)
                        for (int kw = 0; kw < K; ++kw) {
                            double acc = 0.0;
                            if (S == 1) {
                                const int doff = kd - P, hoff = kh - P, woff = kw - P;
                                const int d0 = std::max(0, -doff), d1 = std::min(OD, D - doff);
                                const int h0 = std::max(0, -hoff), h1 = std::min(OH, H - hoff);
                                const int w0 = std::max(0, -woff), w1 = std::min(OW, W - woff);
                                // Four independent accumulator lanes keep the
                                // reduction SIMD-friendly with a fixed
                                // summation order.
                                double lane[4] = {0.0, 0.0, 0.0, 0.0};
                                for (int d = d0; d < d1; ++d)
                                    for (int h = h0; h < h1; ++h) {
                                        const double* xr =
                                            xp + (static_cast<std::int64_t>(d + doff) * H + h + hoff) * W + woff;
                                        const double* gr =
                                            gy + (static_cast<std::int64_t>(d) * OH + h) * OW;
                                        int q = w0;
                                        for (; q + 4 <= w1; q += 4) {
                                            lane[0] += gr[q] * xr[q];
                                            lane[1] += gr[q + 1] * xr[q + 1];
                                            lane[2] += gr[q + 2] * xr[q + 2];
                                            lane[3] += gr[q + 3] * xr[q + 3];
                                        }
                                        for (; q < w1; ++q) lane[0] += gr[q] * xr[q];
                                    }
                                acc = (lane[0] + lane[1]) + (lane[2] + lane[3]);
                            } else {
                                for (int d = 0; d < OD; ++d) {
                                    const int id = S * d + kd - P;
                                    if (id < 0 || id >= D) continue;
                                    for (int h = 0; h < OH; ++h) {
                                        const int ih = S * h + kh - P;
                                        if (ih < 0 || ih >= H) continue;
                                        const double* xr =
                                            xp + (static_cast<std::int64_t>(id) * H + ih) * W;
                                        const double* gr =
                                            gy + (static_cast<std::int64_t>(d) * OH + h) * OW;
                                        const int iw0 = kw - P;
                                        const int q0 = std::max(0, (-iw0 + S - 1) / S);
                                        const int q1 = std::min(OW, (W - iw0 + S - 1) / S);
                                        for (int q = q0; q < q1; ++q)
                                            acc += gr[q] * xr[S * q + iw0];
                                    }
                                }
                            }
                            gw[(kd * K + kh) * K + kw] += acc;
                        }
            }
        }

    // grad_x: gather form gx[i] += w[k] * gy[i - k + P] for stride 1,
    // scatter over output sites for stride 2.
    std::vector<double> row_acc(static_cast<std::size_t>(W));
    for (int n = 0; n < N; ++n)
        for (int ci = 0; ci < CI; ++ci) {
            double* gx =
                g.x.data.data() + (static_cast<std::int64_t>(n) * CI + ci) * x_plane;
            if (S == 1) {
                double* acc = row_acc.data();
                const double* gybase =
                    grad_out.data.data() + static_cast<std::int64_t>(n) * CO * y_plane;
                for (int id = 0; id < D; ++id)
                    for (int ih = 0; ih < H; ++ih) {
                        for (int q = 0; q < W; ++q) acc[q] = 0.0;
                        for (int co = 0; co < CO; ++co) {
                            const double* gy =
                                gybase + static_cast<std::int64_t>(co) * y_plane;
                            const double* wp =
                                w.data.data() +
                                (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                            for (int kd = 0; kd < K; ++kd) {
                                const int od = id - kd + P;
                                if (od < 0 || od >= OD) continue;
                                for (int kh = 0; kh < K; ++kh) {
                                    const int oh = ih - kh + P;
                                    if (oh < 0 || oh >= OH) continue;
                                    const double* gyr =
                                        gy + (static_cast<std::int64_t>(od) * OH + oh) * OW;
                                    const double* wrow = wp + (kd * K + kh) * K;
                                    if (K == 3 && W >= 2) {
                                        // Flipped-kernel taps fused per row.
                                        const double w0 = wrow[0], w1 = wrow[1],
                                                     w2 = wrow[2];
                                        acc[0] += w1 * gyr[0];
                                        acc[0] += w0 * gyr[1];
                                        for (int q = 1; q < W - 1; ++q) {
                                            double a = acc[q];
                                            a += w2 * gyr[q - 1];
                                            a += w1 * gyr[q];
                                            a += w0 * gyr[q + 1];
                                            acc[q] = a;
                                        }
                                        acc[W - 1] += w2 * gyr[W - 2];
                                        acc[W - 1] += w1 * gyr[W - 1];
                                    } else {
                                        for (int kw = 0; kw < K; ++kw) {
                                            const double wv = wrow[kw];
                                            const int shift = P - kw;
                                            const int q0 = std::max(0, -shift);
                                            const int q1 = std::min(W, OW - shift);
                                            const double* gs = gyr + shift;
                                            for (int q = q0; q < q1; ++q)
                                                acc[q] += wv * gs[q];
                                        }
                                    }
                                }
                            }
                        }
                        double* gr = gx + (static_cast<std::int64_t>(id) * H + ih) * W;
                        for (int q = 0; q < W; ++q) gr[q] = acc[q];
                    }
                continue;
            }
            for (int co = 0; co < CO; ++co) {
                const double* gy =
                    grad_out.data.data() + (static_cast<std::int64_t>(n) * CO + co) * y_plane;
                const double* wp =
                    w.data.data() + (static_cast<std::int64_t>(co) * CI + ci) * K * K * K;
                {
                    // Scatter form over output sites.
                    for (int kd = 0; kd < K; ++kd)
                        for (int kh = 0; kh < K; ++kh)
                            for (int kw = 0; kw < K; ++kw) {
                                const double wv = wp[(kd * K + kh) * K + kw];
                                for (int d = 0; d < OD; ++d) {
                                    const int id = S * d + kd - P;
                                    if (id < 0 || id >= D) continue;
                                    for (int h = 0; h < OH; ++h) {
                                        const int ih = S * h + kh - P;
                                        if (ih < 0 || ih >= H) continue;
                                        double* gr =
                                            gx + (static_cast<std::int64_t>(id) * H + ih) * W;
                                        const double* gyr =
                                            gy + (static_cast<std::int64_t>(d) * OH + h) * OW;
                                        const int iw0 = kw - P;
                                        const int q0 = std::max(0, (-iw0 + S - 1) / S);
                                        const int q1 = std::min(OW, (W - iw0 + S - 1) / S);
                                        for (int q = q0; q < q1; ++q)
                                            gr[S * q + iw0] += wv * gyr[q];
                                    }
                                }
                            }
                }
            }
        }
    return g;
}

// ---------------------------------------------------------------------------

namespace {

void check_norm_args(const Tensor5& x, const Tensor5& gamma,
                     const Tensor5& beta) {
    if (gamma.size() != x.shape[1] ||
        (beta.size() != 0 && beta.size() != x.shape[1]))
        throw std::invalid_argument("norm: affine length != channels");
}

}  // namespace

Tensor5 instance_norm(const Tensor5& x, const Tensor5& gamma,
                      const Tensor5& beta, double eps) {
    check_norm_args(x, gamma, beta);
    if (!(eps > 0.0)) throw std::invalid_argument("norm: eps must be > 0");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    Tensor5 y = Tensor5::zeros_like(x);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            double* yp = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            double sum = 0.0;
            for (std::int64_t i = 0; i < M; ++i) sum += xp[i];
            const double mu = sum / static_cast<double>(M);
            double ss = 0.0;
            for (std::int64_t i = 0; i < M; ++i) {
                const double d = xp[i] - mu;
                ss += d * d;
            }
            const double inv = 1.0 / std::sqrt(ss / static_cast<double>(M) + eps);
            const double gc = gamma.data[static_cast<std::size_t>(c)];
            const double bc = beta.data[static_cast<std::size_t>(c)];
            const double scale = gc * inv;
            const double shift = bc - mu * scale;
            for (std::int64_t i = 0; i < M; ++i) yp[i] = xp[i] * scale + shift;
        }
    return y;
}

NormGrads instance_norm_backward(const Tensor5& x, const Tensor5& gamma,
                                 double eps, const Tensor5& grad_out) {
    check_same_shape(x, grad_out, "instance_norm_backward");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    NormGrads g;
    g.x = Tensor5::zeros_like(x);
    g.gamma = Tensor5(1, C, 1, 1, 1);
    g.beta = Tensor5(1, C, 1, 1, 1);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * M;
            const double* xp = x.data.data() + base;
            const double* gy = grad_out.data.data() + base;
            double* gx = g.x.data.data() + base;

            double sum = 0.0;
            for (std::int64_t i = 0; i < M; ++i) sum += xp[i];
            const double mu = sum / static_cast<double>(M);
            double ss = 0.0;
            for (std::int64_t i = 0; i < M; ++i) {
                const double d = xp[i] - mu;
                ss += d * d;
            }
            const double inv = 1.0 / std::sqrt(ss / static_cast<double>(M) + eps);

            double gsum = 0.0, gdot = 0.0;
            for (std::int64_t i = 0; i < M; ++i) {
                const double xhat = (xp[i] - mu) * inv;
                gsum += gy[i];
                gdot += gy[i] * xhat;
            }
            g.gamma.data[static_cast<std::size_t>(c)] += gdot;
            g.beta.data[static_cast<std::size_t>(c)] += gsum;

            const double gc = gamma.data[static_cast<std::size_t>(c)];
            const double mean_g = gsum / static_cast<double>(M);
            const double mean_gx = gdot / static_cast<double>(M);
            const double k = gc * inv;
            for (std::int64_t i = 0; i < M; ++i) {
                const double xhat = (xp[i] - mu) * inv;
                gx[i] = k * (gy[i] - mean_g - xhat * mean_gx);
            }
        }
    return g;
}

Tensor5 batch_norm(const Tensor5& x, const Tensor5& gamma, const Tensor5& beta,
                   double eps) {
    check_norm_args(x, gamma, beta);
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    const double count = static_cast<double>(M) * N;
    Tensor5 y = Tensor5::zeros_like(x);
    for (int c = 0; c < C; ++c) {
        double sum = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (std::int64_t i = 0; i < M; ++i) sum += xp[i];
        }
        const double mu = sum / count;
        double ss = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (std::int64_t i = 0; i < M; ++i) {
                const double d = xp[i] - mu;
                ss += d * d;
            }
        }
        const double inv = 1.0 / std::sqrt(ss / count + eps);
        const double scale = gamma.data[static_cast<std::size_t>(c)] * inv;
        const double shift = beta.data[static_cast<std::size_t>(c)] - mu * scale;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            double* yp = y.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (std::int64_t i = 0; i < M; ++i) yp[i] = xp[i] * scale + shift;
        }
    }
    return y;
}

NormGrads batch_norm_backward(const Tensor5& x, const Tensor5& gamma,
                              double eps, const Tensor5& grad_out) {
    check_same_shape(x, grad_out, "batch_norm_backward");
    const int N = x.shape[0], C = x.shape[1];
    const std::int64_t M = x.spatial_size();
    const double count = static_cast<double>(M) * N;
    NormGrads g;
    g.x = Tensor5::zeros_like(x);
    g.gamma = Tensor5(1, C, 1, 1, 1);
    g.beta = Tensor5(1, C, 1, 1, 1);
    for (int c = 0; c < C; ++c) {
        double sum = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (std::int64_t i = 0; i < M; ++i) sum += xp[i];
        }
        const double mu = sum / count;
        double ss = 0.0;
        for (int n = 0; n < N; ++n) {
            const double* xp =
                x.data.data() + (static_cast<std::int64_t>(n) * C + c) * M;
            for (std::int64_t i = 0; i < M; ++i) {
                const double d = xp[i] - mu;
                ss += d * d;
            }
        }
        const double inv = 1.0 / std::sqrt(ss / count + eps);

        double gsum = 0.0, gdot = 0.0;
        for (int n = 0; n < N; ++n) {
            const std::int64_t base = (static_cast<std::int64_t>(n) * C + c) * M;
            const double* xp = x.data.data() + base;
            const double* gy = grad_out.data.data() + base;
            for (std::int64_t i = 0; i < M; ++i) {
                gsum += gy[i];
                gdot += gy[i] * (xp[i] - mu) * inv;
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
            for (std::int64_t i = 0; i < M; ++i) {
                const double xhat = (xp[i] - mu) * inv;
                gx[i] = k * (gy[i] - mean_g - xhat * mean_gx);
            }
        }
    }
    return g;
}

// ---------------------------------------------------------------------------

Tensor5 leaky_relu(const Tensor5& x, double slope) {
    if (!(slope > 0.0 && slope < 1.0))
        throw std::invalid_argument("leaky_relu: slope must be in (0,1)");
    Tensor5 y = x;
    for (auto& v : y.data)
        if (v < 0.0) v *= slope;
    return y;
}

Tensor5 leaky_relu_backward(const Tensor5& x, double slope,
                            const Tensor5& grad_out) {
    check_same_shape(x, grad_out, "leaky_relu_backward");
    Tensor5 g = grad_out;
    for (std::size_t i = 0; i < g.data.size(); ++i)
        if (x.data[i] < 0.0) g.data[i] *= slope;
    return g;
}

Tensor5 upsample_nearest2(const Tensor5& x) {
    const int N = x.shape[0], C = x.shape[1];
    const int D = x.shape[2], H = x.shape[3], W = x.shape[4];
    Tensor5 y(N, C, 2 * D, 2 * H, 2 * W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int d = 0; d < 2 * D; ++d)
                for (int h = 0; h < 2 * H; ++h) {
                    const double* xr =
                        x.data.data() + x.index(n, c, d / 2, h / 2, 0);
                    double* yr = y.data.data() + y.index(n, c, d, h, 0);
                    for (int w = 0; w < W; ++w) {
                        yr[2 * w] = xr[w];
                        yr[2 * w + 1] = xr[w];
                    }
                }
    return y;
}

Tensor5 upsample_nearest2_backward(const std::array<int, 5>& x_shape,
                                   const Tensor5& grad_out) {
    const int N = x_shape[0], C = x_shape[1];
    const int D = x_shape[2], H = x_shape[3], W = x_shape[4];
    if (grad_out.shape != std::array<int, 5>{N, C, 2 * D, 2 * H, 2 * W})
        throw std::invalid_argument("upsample backward: shape mismatch");
    Tensor5 g(N, C, D, H, W);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c)
            for (int d = 0; d < 2 * D; ++d)
                for (int h = 0; h < 2 * H; ++h) {
                    const double* gr =
                        grad_out.data.data() + grad_out.index(n, c, d, h, 0);
                    double* gx = g.data.data() + g.index(n, c, d / 2, h / 2, 0);
                    for (int w = 0; w < W; ++w)
                        gx[w] += gr[2 * w] + gr[2 * w + 1];
                }
    return g;
}

Tensor5 concat_channels(const Tensor5& a, const Tensor5& b) {
    if (a.shape[0] != b.shape[0] || a.shape[2] != b.shape[2] ||
        a.shape[3] != b.shape[3] || a.shape[4] != b.shape[4])
        throw std::invalid_argument("concat_channels: shape mismatch");
    const int N = a.shape[0], CA = a.shape[1], CB = b.shape[1];
    const std::int64_t M = a.spatial_size();
    Tensor5 y(N, CA + CB, a.shape[2], a.shape[3], a.shape[4]);
    for (int n = 0; n < N; ++n) {
        std::copy_n(a.data.data() + static_cast<std::int64_t>(n) * CA * M, CA * M,
                    y.data.data() + static_cast<std::int64_t>(n) * (CA + CB) * M);
        std::copy_n(b.data.data() + static_cast<std::int64_t>(n) * CB * M, CB * M,
                    y.data.data() + static_cast<std::int64_t>(n) * (CA + CB) * M +
                        CA * M);
    }
    return y;
}

std::pair<Tensor5, Tensor5> concat_channels_split(int a_channels,
                                                  const Tensor5& grad_out) {
    const int N = grad_out.shape[0], C = grad_out.shape[1];
    const int CB = C - a_channels;
    if (a_channels <= 0 || CB <= 0)
        throw std::invalid_argument("concat split: bad channel count");
    const std::int64_t M = grad_out.spatial_size();
    Tensor5 ga(N, a_channels, grad_out.shape[2], grad_out.shape[3],
               grad_out.shape[4]);
    Tensor5 gb(N, CB, grad_out.shape[2], grad_out.shape[3], grad_out.shape[4]);
    for (int n = 0; n < N; ++n) {
        std::copy_n(grad_out.data.data() + static_cast<std::int64_t>(n) * C * M,
                    a_channels * M,
                    ga.data.data() +
                        static_cast<std::int64_t>(n) * a_channels * M);
        std::copy_n(grad_out.data.data() + static_cast<std::int64_t>(n) * C * M +
                        a_channels * M,
                    CB * M, gb.data.data() + static_cast<std::int64_t>(n) * CB * M);
    }
    return {std::move(ga), std::move(gb)};
}

Tensor5 add(const Tensor5& a, const Tensor5& b) {
    check_same_shape(a, b, "add");
    Tensor5 y = a;
    for (std::size_t i = 0; i < y.data.size(); ++i) y.data[i] += b.data[i];
    return y;
}

Tensor5 upsample_concat(const Tensor5& x, const Tensor5& skip,
                        const Tensor5& w1x1, const Tensor5& b1x1) {
    const bool equal_dims = x.shape[2] == skip.shape[2] &&
                            x.shape[3] == skip.shape[3] &&
                            x.shape[4] == skip.shape[4];
    Tensor5 up = equal_dims ? x : upsample_nearest2(x);
    if (up.shape[2] != skip.shape[2] || up.shape[3] != skip.shape[3] ||
        up.shape[4] != skip.shape[4])
        throw std::invalid_argument(
            "upsample_concat: skip dims are neither equal to nor twice the "
            "input dims");
    const Tensor5 refined = conv3d(up, w1x1, b1x1, ConvSpec{1, 1});
    return concat_channels(refined, skip);
}

}  // namespace gbt
