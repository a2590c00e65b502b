#include "gbt/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "gbt/kernels.hpp"
#include "gbt/rng.hpp"
#include "gbt/sparse.hpp"
#include "gbt/training.hpp"

namespace gbt {

namespace {

Tensor5 random_tensor(Rng& rng, int n, int c, int d, int h, int w,
                      double scale = 1.0) {
    Tensor5 t(n, c, d, h, w);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

struct Coord {
    std::size_t input;
    std::size_t offset;
};

std::vector<Coord> sample_coords(
    const std::vector<Tensor5>& inputs,
    const std::vector<std::vector<std::uint8_t>>& filter, int min_coords,
    Rng& rng) {
    std::vector<Coord> all;
    for (std::size_t i = 0; i < inputs.size(); ++i)
        for (std::size_t o = 0; o < inputs[i].data.size(); ++o) {
            if (!filter.empty() && !filter[i].empty() && !filter[i][o]) continue;
            all.push_back({i, o});
        }
    if (static_cast<int>(all.size()) <= min_coords) return all;
    // Partial Fisher-Yates for the first min_coords slots.
    for (int k = 0; k < min_coords; ++k) {
        const std::size_t j =
            k + static_cast<std::size_t>(rng.below(all.size() - k));
        std::swap(all[static_cast<std::size_t>(k)], all[j]);
    }
    all.resize(static_cast<std::size_t>(min_coords));
    return all;
}

double rel_err(double analytic, double numeric) {
    const double denom =
        std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

}  // namespace

FdReport finite_diff_check(const FdProblem& problem, const FdOptions& options) {
    Rng rng(options.seed);
    const Tensor5 y0 = problem.forward(problem.inputs);

    // Fixed random weights make the scalar loss sensitive to every output;
    // a plain sum would null the gradient of mean-removing ops.
    Tensor5 weights = Tensor5::zeros_like(y0);
    for (auto& v : weights.data) v = rng.normal();

    auto loss = [&](const std::vector<Tensor5>& inputs) {
        const Tensor5 y = problem.forward(inputs);
        double acc = 0.0;
        for (std::size_t i = 0; i < y.data.size(); ++i)
            acc += weights.data[i] * y.data[i];
        return acc;
    };

    const std::vector<Tensor5> analytic =
        problem.backward(problem.inputs, weights);

    FdReport report;
    report.name = problem.name;
    std::vector<Tensor5> work = problem.inputs;
    for (const Coord& c : sample_coords(problem.inputs, problem.coord_filter,
                                        options.min_coords, rng)) {
        if (!std::isfinite(analytic[c.input].data[c.offset]))
            throw std::runtime_error("finite_diff_check: non-finite gradient");
        const double saved = work[c.input].data[c.offset];
        work[c.input].data[c.offset] = saved + options.h;
        const double up = loss(work);
        work[c.input].data[c.offset] = saved - options.h;
        const double down = loss(work);
        work[c.input].data[c.offset] = saved;
        if (!std::isfinite(up) || !std::isfinite(down))
            throw std::runtime_error("finite_diff_check: non-finite loss");
        const double numeric = (up - down) / (2.0 * options.h);
        report.max_rel_err = std::max(
            report.max_rel_err, rel_err(analytic[c.input].data[c.offset], numeric));
        ++report.coords_checked;
    }
    report.pass = report.max_rel_err < options.tol;
    return report;
}

FdReport finite_diff_check(const FdLossProblem& problem,
                           const FdOptions& options) {
    Rng rng(options.seed);
    const std::vector<Tensor5> analytic = problem.gradient(problem.inputs);

    FdReport report;
    report.name = problem.name;
    std::vector<Tensor5> work = problem.inputs;
    for (const Coord& c : sample_coords(problem.inputs, problem.coord_filter,
                                        options.min_coords, rng)) {
        const double saved = work[c.input].data[c.offset];
        work[c.input].data[c.offset] = saved + options.h;
        const double up = problem.value(work);
        work[c.input].data[c.offset] = saved - options.h;
        const double down = problem.value(work);
        work[c.input].data[c.offset] = saved;
        const double numeric = (up - down) / (2.0 * options.h);
        report.max_rel_err = std::max(
            report.max_rel_err, rel_err(analytic[c.input].data[c.offset], numeric));
        ++report.coords_checked;
    }
    report.pass = report.max_rel_err < options.tol;
    return report;
}

// ---------------------------------------------------------------------------

namespace {

FdProblem conv_problem(Rng& rng, int k, int stride) {
    FdProblem p;
    p.name = "conv3d_k" + std::to_string(k) + "_s" + std::to_string(stride);
    const int ci = 2, co = 3;
    p.inputs = {random_tensor(rng, 1, ci, 4, 4, 4),
                random_tensor(rng, co, ci, k, k, k, 0.5),
                random_tensor(rng, co, 1, 1, 1, 1, 0.2)};
    const ConvSpec spec{k, stride};
    p.forward = [spec](const std::vector<Tensor5>& in) {
        return conv3d(in[0], in[1], in[2], spec);
    };
    p.backward = [spec](const std::vector<Tensor5>& in, const Tensor5& gy) {
        ConvGrads g = conv3d_backward(in[0], in[1], spec, gy);
        return std::vector<Tensor5>{g.x, g.w, g.bias};
    };
    return p;
}

FdProblem instance_norm_problem(Rng& rng) {
    FdProblem p;
    p.name = "instance_norm";
    p.inputs = {random_tensor(rng, 2, 3, 3, 3, 3),
                random_tensor(rng, 1, 3, 1, 1, 1, 0.3),
                random_tensor(rng, 1, 3, 1, 1, 1, 0.3)};
    for (auto& v : p.inputs[1].data) v += 1.0;  // gamma near 1
    const double eps = 1e-5;
    p.forward = [eps](const std::vector<Tensor5>& in) {
        return instance_norm(in[0], in[1], in[2], eps);
    };
    p.backward = [eps](const std::vector<Tensor5>& in, const Tensor5& gy) {
        NormGrads g = instance_norm_backward(in[0], in[1], eps, gy);
        return std::vector<Tensor5>{g.x, g.gamma, g.beta};
    };
    return p;
}

FdProblem leaky_relu_problem(Rng& rng) {
    FdProblem p;
    p.name = "leaky_relu";
    p.inputs = {random_tensor(rng, 1, 2, 4, 4, 4)};
    // Keep samples away from the kink so central differences stay exact.
    for (auto& v : p.inputs[0].data)
        if (std::abs(v) < 0.05) v = v < 0 ? v - 0.1 : v + 0.1;
    const double slope = 0.01;
    p.forward = [slope](const std::vector<Tensor5>& in) {
        return leaky_relu(in[0], slope);
    };
    p.backward = [slope](const std::vector<Tensor5>& in, const Tensor5& gy) {
        return std::vector<Tensor5>{leaky_relu_backward(in[0], slope, gy)};
    };
    return p;
}

FdProblem upsample_concat_problem(Rng& rng) {
    FdProblem p;
    p.name = "upsample_concat";
    const int cx = 4, cskip = 2;
    p.inputs = {random_tensor(rng, 1, cx, 2, 2, 2),
                random_tensor(rng, 1, cskip, 4, 4, 4),
                random_tensor(rng, cskip, cx, 1, 1, 1, 0.5),
                random_tensor(rng, cskip, 1, 1, 1, 1, 0.2)};
    p.forward = [](const std::vector<Tensor5>& in) {
        return upsample_concat(in[0], in[1], in[2], in[3]);
    };
    p.backward = [cskip](const std::vector<Tensor5>& in, const Tensor5& gy) {
        auto [g_refined, g_skip] = concat_channels_split(cskip, gy);
        const Tensor5 up = upsample_nearest2(in[0]);
        ConvGrads g = conv3d_backward(up, in[2], ConvSpec{1, 1}, g_refined);
        const Tensor5 g_x = upsample_nearest2_backward(in[0].shape, g.x);
        return std::vector<Tensor5>{g_x, g_skip, g.w, g.bias};
    };
    return p;
}

std::vector<std::uint8_t> tensor_filter_from_mask(const Tensor5& t,
                                                  const OccupancyMask& mask) {
    std::vector<std::uint8_t> filter(t.data.size(), 1);
    const std::int64_t spatial = t.spatial_size();
    for (std::int64_t s = 0;
         s < static_cast<std::int64_t>(t.shape[0]) * t.shape[1]; ++s)
        for (std::int64_t i = 0; i < spatial; ++i)
            filter[static_cast<std::size_t>(s * spatial + i)] =
                mask.bits[static_cast<std::size_t>(i)];
    return filter;
}

FdProblem sparse_conv_problem(Rng& rng, int stride) {
    FdProblem p;
    p.name = "sparse_conv3d_s" + std::to_string(stride);
    const int ci = 2, co = 2;
    p.inputs = {random_tensor(rng, 1, ci, 4, 4, 4),
                random_tensor(rng, co, ci, 3, 3, 3, 0.5),
                random_tensor(rng, co, 1, 1, 1, 1, 0.2)};
    auto mask_in = std::make_shared<OccupancyMask>(
        generate_patch_mask({4, 4, 4}, MaskSpec{{2, 2, 2}, 0.5, 9}));
    auto mask_out = std::make_shared<OccupancyMask>(
        stride == 1 ? *mask_in : downsample_mask(*mask_in));
    const ConvSpec spec{3, stride};
    p.forward = [spec, mask_in, mask_out](const std::vector<Tensor5>& in) {
        return sparse_conv3d(in[0], *mask_in, *mask_out, in[1], in[2], spec);
    };
    p.backward = [spec, mask_in, mask_out](const std::vector<Tensor5>& in,
                                           const Tensor5& gy) {
        ConvGrads g =
            sparse_conv3d_backward(in[0], *mask_in, *mask_out, in[1], spec, gy);
        return std::vector<Tensor5>{g.x, g.w, g.bias};
    };
    p.coord_filter = {tensor_filter_from_mask(p.inputs[0], *mask_in), {}, {}};
    return p;
}

FdProblem sparse_batch_norm_problem(Rng& rng) {
    FdProblem p;
    p.name = "sparse_batch_norm";
    p.inputs = {random_tensor(rng, 2, 2, 4, 4, 4),
                random_tensor(rng, 1, 2, 1, 1, 1, 0.3),
                random_tensor(rng, 1, 2, 1, 1, 1, 0.3)};
    for (auto& v : p.inputs[1].data) v += 1.0;
    auto mask = std::make_shared<OccupancyMask>(
        generate_patch_mask({4, 4, 4}, MaskSpec{{2, 2, 2}, 0.4, 11}));
    const double eps = 1e-5;
    p.forward = [mask, eps](const std::vector<Tensor5>& in) {
        return sparse_batch_norm(in[0], *mask, in[1], in[2], eps);
    };
    p.backward = [mask, eps](const std::vector<Tensor5>& in, const Tensor5& gy) {
        NormGrads g = sparse_batch_norm_backward(in[0], *mask, in[1], eps, gy);
        return std::vector<Tensor5>{g.x, g.gamma, g.beta};
    };
    p.coord_filter = {tensor_filter_from_mask(p.inputs[0], *mask), {}, {}};
    return p;
}

FdLossProblem l2_loss_problem(Rng& rng) {
    FdLossProblem p;
    p.name = "l2_masked_loss";
    p.inputs = {random_tensor(rng, 1, 1, 4, 4, 4),
                random_tensor(rng, 1, 1, 4, 4, 4)};
    auto mask = std::make_shared<OccupancyMask>(
        generate_patch_mask({4, 4, 4}, MaskSpec{{2, 2, 2}, 0.5, 21}));
    p.value = [mask](const std::vector<Tensor5>& in) {
        return l2_masked_loss(in[0], in[1], *mask).value;
    };
    p.gradient = [mask](const std::vector<Tensor5>& in) {
        LossResult r = l2_masked_loss(in[0], in[1], *mask);
        // Target gradient is the negation of the reconstruction gradient.
        Tensor5 gt = r.grad;
        for (auto& v : gt.data) v = -v;
        return std::vector<Tensor5>{r.grad, gt};
    };
    return p;
}

FdLossProblem dice_ce_problem(Rng& rng) {
    FdLossProblem p;
    p.name = "dice_ce_loss";
    const int classes = 3;
    p.inputs = {random_tensor(rng, 1, classes, 3, 3, 3)};
    auto labels = std::make_shared<std::vector<std::uint8_t>>();
    for (int i = 0; i < 27; ++i)
        labels->push_back(static_cast<std::uint8_t>(rng.below(classes)));
    p.value = [labels, classes](const std::vector<Tensor5>& in) {
        return dice_ce_loss(in[0], *labels, classes).value;
    };
    p.gradient = [labels, classes](const std::vector<Tensor5>& in) {
        return std::vector<Tensor5>{dice_ce_loss(in[0], *labels, classes).grad};
    };
    return p;
}

}  // namespace

std::vector<FdReport> run_standard_gradcheck(std::uint64_t seed, double tol) {
    Rng rng(seed);
    FdOptions options;
    options.tol = tol;
    options.seed = mix_seed(seed, "fd-coords");

    std::vector<FdReport> reports;
    for (int k : {1, 3})
        for (int s : {1, 2})
            reports.push_back(finite_diff_check(conv_problem(rng, k, s), options));
    reports.push_back(finite_diff_check(instance_norm_problem(rng), options));
    reports.push_back(finite_diff_check(leaky_relu_problem(rng), options));
    reports.push_back(finite_diff_check(upsample_concat_problem(rng), options));
    for (int s : {1, 2})
        reports.push_back(finite_diff_check(sparse_conv_problem(rng, s), options));
    reports.push_back(
        finite_diff_check(sparse_batch_norm_problem(rng), options));
    reports.push_back(finite_diff_check(l2_loss_problem(rng), options));
    reports.push_back(finite_diff_check(dice_ce_problem(rng), options));
    return reports;
}

}  // namespace gbt
