#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "gbt/kernels.hpp"
#include "gbt/rng.hpp"
#include "gbt/sparse.hpp"

using namespace gbt;

namespace {

Tensor5 random_tensor(Rng& rng, int n, int c, int d, int h, int w,
                      double scale = 1.0) {
    Tensor5 t(n, c, d, h, w);
    for (auto& v : t.data) v = rng.normal() * scale;
    return t;
}

OccupancyMask random_mask(Rng& rng, std::array<int, 3> dims, double p_active) {
    OccupancyMask m(dims, false);
    for (auto& b : m.bits) b = rng.uniform() < p_active ? 1 : 0;
    bool any = false;
    for (auto b : m.bits) any = any || b;
    if (!any) m.bits[0] = 1;
    return m;
}

// Oracle: zero inactive inputs, run the dense conv, zero inactive outputs.
Tensor5 zero_mask_dense_oracle(const Tensor5& x, const OccupancyMask& mask_in,
                               const OccupancyMask& mask_out, const Tensor5& w,
                               const Tensor5& b, ConvSpec spec) {
    const Tensor5 xz = apply_mask(x, mask_in);
    Tensor5 y = conv3d(xz, w, b, spec);
    return apply_mask(y, mask_out);
}

double max_abs_diff(const Tensor5& a, const Tensor5& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("generate_patch_mask: ratio 0 all active, ratio 1 all inactive") {
    const OccupancyMask all =
        generate_patch_mask({8, 8, 8}, MaskSpec{{2, 2, 2}, 0.0, 1});
    CHECK(all.count_active() == 512);
    const OccupancyMask none =
        generate_patch_mask({8, 8, 8}, MaskSpec{{2, 2, 2}, 1.0, 1});
    CHECK(none.count_active() == 0);
}

TEST_CASE("generate_patch_mask: non-divisible dims rejected") {
    CHECK_THROWS_AS(generate_patch_mask({9, 8, 8}, MaskSpec{{2, 2, 2}, 0.5, 1}),
                    std::invalid_argument);
}

TEST_CASE("generate_patch_mask: whole patches masked together") {
    const MaskSpec spec{{4, 4, 4}, 0.5, 3};
    const OccupancyMask m = generate_patch_mask({8, 8, 8}, spec);
    for (int pd = 0; pd < 2; ++pd)
        for (int ph = 0; ph < 2; ++ph)
            for (int pw = 0; pw < 2; ++pw) {
                const bool first = m.active(4 * pd, 4 * ph, 4 * pw);
                for (int d = 0; d < 4; ++d)
                    for (int h = 0; h < 4; ++h)
                        for (int w = 0; w < 4; ++w)
                            CHECK(m.active(4 * pd + d, 4 * ph + h, 4 * pw + w) ==
                                  first);
            }
}

TEST_CASE("generate_patch_mask: frozen masked-patch count for the full-scale layout") {
    // 112x128x128 in (7,8,8) patches = 4096 patches; at ratio 0.6 the
    // expected count is 2457.6. Frozen from the seeded reference run.
    const MaskSpec spec{{7, 8, 8}, 0.6, 1};
    const OccupancyMask m = generate_patch_mask({112, 128, 128}, spec);
    const std::int64_t patch_voxels = 7 * 8 * 8;
    const std::int64_t total = static_cast<std::int64_t>(112) * 128 * 128;
    const std::int64_t masked_patches =
        (total - m.count_active()) / patch_voxels;
    CHECK((total - m.count_active()) % patch_voxels == 0);
    CHECK(masked_patches == 2452);  // frozen regression value
    CHECK(std::abs(static_cast<double>(masked_patches) - 2457.6) <
          3.0 * std::sqrt(4096 * 0.6 * 0.4));
}

TEST_CASE("build_pyramid: all-active stays all-active") {
    const OccupancyMask m({16, 16, 16}, true);
    const MaskPyramid pyr = build_pyramid(m, 4);
    REQUIRE(pyr.levels.size() == 4);
    for (const auto& level : pyr.levels)
        CHECK(level.count_active() == level.voxel_count());
}

TEST_CASE("build_pyramid: single active voxel at origin survives alone") {
    OccupancyMask m({8, 8, 8}, false);
    m.bits[0] = 1;
    const MaskPyramid pyr = build_pyramid(m, 3);
    for (const auto& level : pyr.levels) {
        CHECK(level.count_active() == 1);
        CHECK(level.active(0, 0, 0));
    }
}

TEST_CASE("build_pyramid: level 1 equals the brute-force any-reduction") {
    Rng rng(4);
    const OccupancyMask m = random_mask(rng, {16, 16, 16}, 0.3);
    const MaskPyramid pyr = build_pyramid(m, 2);
    const OccupancyMask& l1 = pyr.levels[1];
    REQUIRE(l1.dims == std::array<int, 3>{8, 8, 8});
    for (int d = 0; d < 8; ++d)
        for (int h = 0; h < 8; ++h)
            for (int w = 0; w < 8; ++w) {
                bool any = false;
                for (int dd = 0; dd < 2; ++dd)
                    for (int hh = 0; hh < 2; ++hh)
                        for (int ww = 0; ww < 2; ++ww)
                            any = any ||
                                  m.active(2 * d + dd, 2 * h + hh, 2 * w + ww);
                CHECK(l1.active(d, h, w) == any);
            }
}

TEST_CASE("sparse_conv3d: all-active equals dense within 1e-12") {
    Rng rng(5);
    const Tensor5 x = random_tensor(rng, 2, 3, 6, 6, 6);
    const Tensor5 w = random_tensor(rng, 4, 3, 3, 3, 3, 0.4);
    const Tensor5 b = random_tensor(rng, 4, 1, 1, 1, 1, 0.2);
    const OccupancyMask full({6, 6, 6}, true);
    for (int stride : {1, 2}) {
        const OccupancyMask out_mask =
            stride == 1 ? full : downsample_mask(full);
        const Tensor5 ys =
            sparse_conv3d(x, full, out_mask, w, b, ConvSpec{3, stride});
        const Tensor5 yd = conv3d(x, w, b, ConvSpec{3, stride});
        CHECK(max_abs_diff(ys, yd) < 1e-12);
    }
}

TEST_CASE("sparse_conv3d: single active center voxel") {
    Rng rng(6);
    const Tensor5 x = random_tensor(rng, 1, 1, 3, 3, 3);
    const Tensor5 w = random_tensor(rng, 1, 1, 3, 3, 3);
    Tensor5 b(1, 1, 1, 1, 1);
    b.data[0] = 0.25;
    OccupancyMask m({3, 3, 3}, false);
    m.bits[static_cast<std::size_t>(m.index(1, 1, 1))] = 1;
    const Tensor5 y = sparse_conv3d(x, m, m, w, b, ConvSpec{3, 1});
    const double expected = b.data[0] + w.at(0, 0, 1, 1, 1) * x.at(0, 0, 1, 1, 1);
    CHECK(y.at(0, 0, 1, 1, 1) == doctest::Approx(expected).epsilon(1e-12));
    for (std::int64_t i = 0; i < y.size(); ++i)
        if (i != y.index(0, 0, 1, 1, 1)) CHECK(y.data[static_cast<std::size_t>(i)] == 0.0);
}

TEST_CASE("sparse_conv3d equals the zero-mask-dense oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 6; ++trial) {
        const Tensor5 x = random_tensor(rng, 1, 2, 6, 6, 6);
        const Tensor5 w = random_tensor(rng, 3, 2, 3, 3, 3, 0.4);
        const Tensor5 b = random_tensor(rng, 3, 1, 1, 1, 1, 0.2);
        const OccupancyMask mask = random_mask(rng, {6, 6, 6}, 0.4);
        const int stride = trial % 2 == 0 ? 1 : 2;
        const OccupancyMask out_mask =
            stride == 1 ? mask : downsample_mask(mask);
        const Tensor5 ys =
            sparse_conv3d(x, mask, out_mask, w, b, ConvSpec{3, stride});
        const Tensor5 ref =
            zero_mask_dense_oracle(x, mask, out_mask, w, b, ConvSpec{3, stride});
        CHECK(max_abs_diff(ys, ref) == 0.0);  // exact: same exclusions
    }
}

TEST_CASE("sparse_conv3d: submanifold independence from inactive voxels") {
    Rng rng(8);
    const Tensor5 x = random_tensor(rng, 1, 2, 6, 6, 6);
    const Tensor5 w = random_tensor(rng, 2, 2, 3, 3, 3, 0.4);
    const Tensor5 b = random_tensor(rng, 2, 1, 1, 1, 1, 0.2);
    const OccupancyMask mask = random_mask(rng, {6, 6, 6}, 0.5);
    const Tensor5 y0 = sparse_conv3d(x, mask, mask, w, b, ConvSpec{3, 1});

    Tensor5 perturbed = x;
    const std::int64_t M = mask.voxel_count();
    for (int c = 0; c < 2; ++c)
        for (std::int64_t i = 0; i < M; ++i)
            if (!mask.bits[static_cast<std::size_t>(i)])
                perturbed.data[static_cast<std::size_t>(c * M + i)] +=
                    rng.normal() * 100.0;
    const Tensor5 y1 = sparse_conv3d(perturbed, mask, mask, w, b, ConvSpec{3, 1});
    CHECK(max_abs_diff(y0, y1) == 0.0);
}

TEST_CASE("sparse_conv3d: stride-1 call with mask_out != mask_in errors") {
    Rng rng(9);
    const Tensor5 x = random_tensor(rng, 1, 1, 4, 4, 4);
    const Tensor5 w = random_tensor(rng, 1, 1, 3, 3, 3);
    const OccupancyMask a = random_mask(rng, {4, 4, 4}, 0.5);
    OccupancyMask b = a;
    b.bits[0] = b.bits[0] ? 0 : 1;
    CHECK_THROWS_AS(sparse_conv3d(x, a, b, w, Tensor5{}, ConvSpec{3, 1}),
                    std::invalid_argument);
}

TEST_CASE("sparse_conv3d: mask/tensor dim mismatch errors") {
    Rng rng(10);
    const Tensor5 x = random_tensor(rng, 1, 1, 4, 4, 4);
    const Tensor5 w = random_tensor(rng, 1, 1, 3, 3, 3);
    const OccupancyMask m({5, 4, 4}, true);
    CHECK_THROWS_AS(sparse_conv3d(x, m, m, w, Tensor5{}, ConvSpec{3, 1}),
                    std::invalid_argument);
}

TEST_CASE("sparse_conv3d: compute counter is bounded by the active fraction") {
    Rng rng(11);
    const Tensor5 x = random_tensor(rng, 1, 4, 32, 32, 32);
    const Tensor5 w = random_tensor(rng, 4, 4, 3, 3, 3, 0.3);
    for (double ratio : {0.4, 0.6, 0.8}) {
        const OccupancyMask mask = generate_patch_mask(
            {32, 32, 32}, MaskSpec{{8, 8, 8}, ratio, 17});
        std::uint64_t macs = 0;
        sparse_conv3d(x, mask, mask, w, Tensor5{}, ConvSpec{3, 1}, &macs);
        const auto dense =
            static_cast<double>(dense_conv_macs(x.shape, w.shape, 1));
        const double f = mask.active_fraction();
        CHECK(static_cast<double>(macs) / dense <= f + 1e-12);
        // and the counter is exactly the sum over active outputs of their
        // active taps
        std::uint64_t manual = 0;
        for (int d = 0; d < 32; ++d)
            for (int h = 0; h < 32; ++h)
                for (int q = 0; q < 32; ++q) {
                    if (!mask.active(d, h, q)) continue;
                    int taps = 0;
                    for (int kd = -1; kd <= 1; ++kd)
                        for (int kh = -1; kh <= 1; ++kh)
                            for (int kw = -1; kw <= 1; ++kw) {
                                const int id = d + kd, ih = h + kh, iw = q + kw;
                                if (id < 0 || id >= 32 || ih < 0 || ih >= 32 ||
                                    iw < 0 || iw >= 32)
                                    continue;
                                if (mask.active(id, ih, iw)) ++taps;
                            }
                    manual += static_cast<std::uint64_t>(taps);
                }
        CHECK(macs == manual * 4 * 4);  // (out_ch * in_ch) per spatial tap
    }
}

TEST_CASE("sparse_batch_norm: all-active matches dense batch norm within 1e-10") {
    Rng rng(12);
    const Tensor5 x = random_tensor(rng, 2, 3, 4, 4, 4, 3.0);
    Tensor5 gamma(1, 3, 1, 1, 1), beta(1, 3, 1, 1, 1);
    for (auto& v : gamma.data) v = 1.0 + 0.2 * rng.normal();
    for (auto& v : beta.data) v = 0.3 * rng.normal();
    const OccupancyMask full({4, 4, 4}, true);
    const Tensor5 ys = sparse_batch_norm(x, full, gamma, beta, 1e-5);
    const Tensor5 yd = batch_norm(x, gamma, beta, 1e-5);
    CHECK(max_abs_diff(ys, yd) < 1e-10);
}

TEST_CASE("sparse_batch_norm: closed form on active voxels {2, 4}") {
    Tensor5 x(1, 1, 1, 1, 4);
    x.data = {2.0, 100.0, 4.0, -50.0};
    OccupancyMask m({1, 1, 4}, false);
    m.bits = {1, 0, 1, 0};
    Tensor5 gamma(1, 1, 1, 1, 1), beta(1, 1, 1, 1, 1);
    gamma.data[0] = 1.0;
    const Tensor5 y = sparse_batch_norm(x, m, gamma, beta, 1e-5);
    CHECK(std::abs(y.data[0] + 1.0) < 1e-3);
    CHECK(std::abs(y.data[2] - 1.0) < 1e-3);
    CHECK(y.data[1] == 0.0);
    CHECK(y.data[3] == 0.0);
}

TEST_CASE("sparse_batch_norm: statistics ignore inactive voxel values") {
    Rng rng(13);
    const Tensor5 x = random_tensor(rng, 2, 2, 4, 4, 4);
    const OccupancyMask mask = random_mask(rng, {4, 4, 4}, 0.5);
    Tensor5 gamma(1, 2, 1, 1, 1), beta(1, 2, 1, 1, 1);
    std::fill(gamma.data.begin(), gamma.data.end(), 1.0);
    const Tensor5 y0 = sparse_batch_norm(x, mask, gamma, beta, 1e-5);

    Tensor5 perturbed = x;
    const std::int64_t M = mask.voxel_count();
    for (int s = 0; s < 4; ++s)
        for (std::int64_t i = 0; i < M; ++i)
            if (!mask.bits[static_cast<std::size_t>(i)])
                perturbed.data[static_cast<std::size_t>(s * M + i)] = 1e6;
    const Tensor5 y1 = sparse_batch_norm(perturbed, mask, gamma, beta, 1e-5);
    CHECK(max_abs_diff(y0, y1) == 0.0);
}

TEST_CASE("sparse_batch_norm: fewer than 2 active voxels errors") {
    Tensor5 x(1, 1, 1, 1, 2);
    OccupancyMask m({1, 1, 2}, false);
    m.bits = {1, 0};
    Tensor5 gamma(1, 1, 1, 1, 1), beta(1, 1, 1, 1, 1);
    CHECK_THROWS_AS(sparse_batch_norm(x, m, gamma, beta, 1e-5),
                    std::invalid_argument);
}
