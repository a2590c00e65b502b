#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gbt/network.hpp"
#include "gbt/rng.hpp"
#include "gbt/training.hpp"

using namespace gbt;

namespace {

Tensor5 random_input(Rng& rng, int n, int c, int dim) {
    Tensor5 t(n, c, dim, dim, dim);
    for (auto& v : t.data) v = rng.normal();
    return t;
}

bool bitwise_equal(const Tensor5& a, const Tensor5& b) {
    return a.shape == b.shape && a.data == b.data;
}

double max_abs_diff(const Tensor5& a, const Tensor5& b) {
    REQUIRE(a.shape == b.shape);
    double m = 0.0;
    for (std::size_t i = 0; i < a.data.size(); ++i)
        m = std::max(m, std::abs(a.data[i] - b.data[i]));
    return m;
}

}  // namespace

TEST_CASE("channel ladder: doubling from the base with the cap binding late") {
    const NetworkConfig paper = paper_config();
    CHECK(paper.channels_at(0) == 64);
    CHECK(paper.channels_at(1) == 128);
    CHECK(paper.channels_at(2) == 256);
    CHECK(paper.channels_at(3) == 512);
    CHECK(paper.channels_at(4) == 1024);
    CHECK(paper.channels_at(5) == 1024);  // max_channels cap

    const NetworkConfig toy = toy_config();
    CHECK(toy.channels_at(0) == 8);
    CHECK(toy.channels_at(1) == 16);
    CHECK(toy.channels_at(2) == 32);
    CHECK(toy.channels_at(3) == 64);
}

TEST_CASE("parameter budget: full-scale configuration is ~440M") {
    const std::int64_t count = count_parameters(paper_config());
    CHECK(count >= 396000000);
    CHECK(count <= 484000000);
}

TEST_CASE("toy parameter count equals the closed-form counting oracle") {
    // Independent arithmetic for (4 stages, depth 2, base 8, 1 in, 6 classes):
    // every term spelled out from the block definitions.
    const std::int64_t stem = 27 * 1 * 8 + 8 + 2 * 8;
    const std::int64_t enc0 = 2 * (27 * 8 * 8 + 8 + 2 * 8 + 27 * 8 * 8 + 8 + 2 * 8);
    const std::int64_t enc1b0 = 27 * 8 * 16 + 16 + 2 * 16 + 27 * 16 * 16 + 16 +
                                2 * 16 + (8 * 16 + 16);
    const std::int64_t enc1b1 = 2 * (27 * 16 * 16 + 16 + 2 * 16);
    const std::int64_t enc2b0 = 27 * 16 * 32 + 32 + 2 * 32 + 27 * 32 * 32 + 32 +
                                2 * 32 + (16 * 32 + 32);
    const std::int64_t enc2b1 = 2 * (27 * 32 * 32 + 32 + 2 * 32);
    const std::int64_t enc3b0 = 27 * 32 * 64 + 64 + 2 * 64 + 27 * 64 * 64 + 64 +
                                2 * 64 + (32 * 64 + 64);
    const std::int64_t enc3b1 = 2 * (27 * 64 * 64 + 64 + 2 * 64);
    const std::int64_t dec2 = (64 * 32 + 32) +
                              (27 * 64 * 32 + 32 + 2 * 32 + 27 * 32 * 32 + 32 +
                               2 * 32 + (64 * 32 + 32)) +
                              2 * (27 * 32 * 32 + 32 + 2 * 32);
    const std::int64_t dec1 = (32 * 16 + 16) +
                              (27 * 32 * 16 + 16 + 2 * 16 + 27 * 16 * 16 + 16 +
                               2 * 16 + (32 * 16 + 16)) +
                              2 * (27 * 16 * 16 + 16 + 2 * 16);
    const std::int64_t dec0 = (16 * 8 + 8) +
                              (27 * 16 * 8 + 8 + 2 * 8 + 27 * 8 * 8 + 8 + 2 * 8 +
                               (16 * 8 + 8)) +
                              2 * (27 * 8 * 8 + 8 + 2 * 8);
    const std::int64_t head = 6 * 8 + 6;
    const std::int64_t oracle = stem + enc0 + enc1b0 + enc1b1 + enc2b0 +
                                enc2b1 + enc3b0 + enc3b1 + dec2 + dec1 + dec0 +
                                head;
    CHECK(count_parameters(toy_config()) == oracle);

    const GynBTNet net = build(toy_config(), 5);
    CHECK(count_parameters(net) == oracle);
}

TEST_CASE("single 1x1x1 conv with bias counts 2 parameters") {
    const ParamInfo w{"w", {1, 1, 1, 1, 1}};
    const ParamInfo b{"b", {1, 1, 1, 1, 1}};
    CHECK(w.size() + b.size() == 2);
}

TEST_CASE("build: same seed twice gives bitwise-identical parameters") {
    const GynBTNet a = build(toy_config(), 42);
    const GynBTNet b = build(toy_config(), 42);
    REQUIRE(a.params.size() == b.params.size());
    for (std::size_t i = 0; i < a.params.size(); ++i)
        CHECK(bitwise_equal(a.params[i]->value, b.params[i]->value));
    const GynBTNet c = build(toy_config(), 43);
    CHECK_FALSE(bitwise_equal(a.params[0]->value, c.params[0]->value));
}

TEST_CASE("forward: toy net maps 1x1x32^3 to 1x6x32^3 logits") {
    NetworkConfig cfg = toy_config();
    cfg.num_stages = 3;
    cfg.base_channels = 4;
    const GynBTNet net = build(cfg, 1);
    Rng rng(2);
    const Tensor5 x = random_input(rng, 1, 1, 16);
    const Tensor5 logits = forward(net, x);
    CHECK(logits.shape == std::array<int, 5>{1, 6, 16, 16, 16});
}

TEST_CASE("forward: non-divisible spatial dims rejected") {
    NetworkConfig cfg = toy_config();
    cfg.num_stages = 3;
    cfg.base_channels = 4;
    const GynBTNet net = build(cfg, 1);
    Rng rng(3);
    Tensor5 x(1, 1, 17, 16, 16);
    for (auto& v : x.data) v = rng.normal();
    CHECK_THROWS_AS(forward(net, x), std::invalid_argument);
}

TEST_CASE("forward: duplicate batch entries give identical per-sample logits") {
    NetworkConfig cfg = toy_config();
    cfg.num_stages = 2;
    cfg.base_channels = 4;
    const GynBTNet net = build(cfg, 4);
    Rng rng(5);
    const Tensor5 one = random_input(rng, 1, 1, 8);
    Tensor5 two(2, 1, 8, 8, 8);
    std::copy(one.data.begin(), one.data.end(), two.data.begin());
    std::copy(one.data.begin(), one.data.end(), two.data.begin() + one.size());
    const Tensor5 logits = forward(net, two);
    const std::int64_t half = logits.size() / 2;
    for (std::int64_t i = 0; i < half; ++i)
        CHECK(logits.data[static_cast<std::size_t>(i)] ==
              logits.data[static_cast<std::size_t>(i + half)]);
}

TEST_CASE("forward is finite for random inputs across 100 seeds") {
    NetworkConfig cfg;
    cfg.num_stages = 2;
    cfg.base_channels = 2;
    cfg.blocks_per_stage = 1;
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        const GynBTNet net = build(cfg, seed);
        Rng rng(seed + 1000);
        const Tensor5 x = random_input(rng, 1, 1, 4);
        const Tensor5 y = forward(net, x);
        CHECK(y.all_finite());
    }
}

TEST_CASE("forward_pretrain: reconstruction head, vacuous mask, independence") {
    NetworkConfig cfg = toy_config();
    cfg.num_stages = 3;
    cfg.base_channels = 4;
    cfg.mode = NetMode::reconstruction;
    cfg.norm_kind = NormKind::sparse_batch;
    const GynBTNet net = build(cfg, 7);
    Rng rng(8);
    const Tensor5 x = random_input(rng, 2, 1, 16);

    SUBCASE("output shape is (batch, 1, input dims)") {
        const OccupancyMask mask({16, 16, 16}, true);
        const MaskPyramid pyr = build_pyramid(mask, cfg.num_stages);
        const Tensor5 recon =
            forward_pretrain(net, nullptr, make_var(x), &pyr)->value;
        CHECK(recon.shape == std::array<int, 5>{2, 1, 16, 16, 16});
    }

    SUBCASE("all-active mask equals the dense path within 1e-10") {
        const OccupancyMask mask({16, 16, 16}, true);
        const MaskPyramid pyr = build_pyramid(mask, cfg.num_stages);
        const Tensor5 sparse =
            forward_pretrain(net, nullptr, make_var(x), &pyr)->value;
        const Tensor5 dense =
            forward_pretrain(net, nullptr, make_var(x), nullptr)->value;
        CHECK(max_abs_diff(sparse, dense) < 1e-10);
    }

    SUBCASE("perturbing an inactive input voxel changes no active encoder site") {
        const OccupancyMask mask =
            generate_patch_mask({16, 16, 16}, MaskSpec{{4, 4, 4}, 0.5, 3});
        const MaskPyramid pyr = build_pyramid(mask, cfg.num_stages);
        EncoderTrace t0, t1;
        const Tensor5 r0 =
            forward_pretrain(net, nullptr, make_var(x), &pyr,
                             MaskEnforcement::per_stage, &t0)->value;
        Tensor5 perturbed = x;
        const std::int64_t M = mask.voxel_count();
        for (int n = 0; n < 2; ++n)
            for (std::int64_t i = 0; i < M; ++i)
                if (!mask.bits[static_cast<std::size_t>(i)])
                    perturbed.data[static_cast<std::size_t>(n * M + i)] += 37.0;
        const Tensor5 r1 =
            forward_pretrain(net, nullptr, make_var(perturbed), &pyr,
                             MaskEnforcement::per_stage, &t1)->value;
        REQUIRE(t0.stage_outputs.size() == t1.stage_outputs.size());
        for (std::size_t s = 0; s < t0.stage_outputs.size(); ++s)
            CHECK(max_abs_diff(t0.stage_outputs[s], t1.stage_outputs[s]) == 0.0);
        CHECK(max_abs_diff(r0, r1) == 0.0);
    }

    SUBCASE("mode mismatch errors") {
        const GynBTNet seg = build(toy_config(), 1);
        const OccupancyMask mask({32, 32, 32}, true);
        const MaskPyramid pyr = build_pyramid(mask, 4);
        CHECK_THROWS_AS(
            forward_pretrain(seg, nullptr, make_var(random_input(rng, 1, 1, 32)),
                             &pyr),
            std::invalid_argument);
    }
}

TEST_CASE("bottleneck_only enforcement masks only the bottleneck") {
    NetworkConfig cfg;
    cfg.num_stages = 2;
    cfg.base_channels = 2;
    cfg.blocks_per_stage = 1;
    cfg.mode = NetMode::reconstruction;
    cfg.norm_kind = NormKind::sparse_batch;
    const GynBTNet net = build(cfg, 9);
    Rng rng(10);
    const Tensor5 x = random_input(rng, 1, 1, 8);
    const OccupancyMask mask =
        generate_patch_mask({8, 8, 8}, MaskSpec{{4, 4, 4}, 0.5, 5});
    const MaskPyramid pyr = build_pyramid(mask, cfg.num_stages);
    EncoderTrace trace;
    const Tensor5 recon =
        forward_pretrain(net, nullptr, make_var(x), &pyr,
                         MaskEnforcement::bottleneck_only, &trace)->value;
    CHECK(recon.all_finite());
    // encoder ran dense: stage outputs are generally nonzero at masked sites
    const Tensor5& stage0 = trace.stage_outputs[0];
    double masked_mag = 0.0;
    const std::int64_t M = mask.voxel_count();
    for (std::int64_t i = 0; i < M; ++i)
        if (!mask.bits[static_cast<std::size_t>(i)])
            masked_mag += std::abs(stage0.data[static_cast<std::size_t>(i)]);
    CHECK(masked_mag > 0.0);
}

TEST_CASE("checkpoint: encode/decode roundtrip is bit-exact") {
    const GynBTNet net = build(toy_config(), 11);
    Checkpoint ckpt = checkpoint_from(net, "pretrain");
    ckpt.extra["note"] = "roundtrip";
    const auto bytes = encode_checkpoint(ckpt);
    const Checkpoint back = decode_checkpoint(bytes);
    CHECK(encode_checkpoint(back) == bytes);
    CHECK(back.stage == "pretrain");
    CHECK(back.tensors.size() == ckpt.tensors.size());
}

TEST_CASE("checkpoint: decode errors") {
    const GynBTNet net = build(toy_config(), 12);
    auto bytes = encode_checkpoint(checkpoint_from(net, "task"));
    SUBCASE("bad magic") {
        bytes[0] = 'X';
        try {
            decode_checkpoint(bytes);
            FAIL("expected error");
        } catch (const CheckpointError& e) {
            CHECK(e.kind == CheckpointErrorKind::bad_magic);
        }
    }
    SUBCASE("truncated payload") {
        bytes.resize(bytes.size() - 3);
        try {
            decode_checkpoint(bytes);
            FAIL("expected error");
        } catch (const CheckpointError& e) {
            CHECK(e.kind == CheckpointErrorKind::truncated_payload);
        }
    }
}

TEST_CASE("checkpoint file save/load through the filesystem") {
    const auto path =
        std::filesystem::temp_directory_path() / "gbt_test_ckpt.gbtckpt";
    const GynBTNet net = build(toy_config(), 13);
    save_checkpoint(checkpoint_from(net, "supervised"), path);
    const Checkpoint loaded = load_checkpoint(path);
    CHECK(loaded.stage == "supervised");
    const GynBTNet back = net_from_checkpoint(loaded);
    // f32 payload quantization applies to both sides identically
    CHECK(encode_checkpoint(checkpoint_from(back, "supervised")) ==
          encode_checkpoint(checkpoint_from(net_from_checkpoint(loaded),
                                            "supervised")));
    std::filesystem::remove(path);
}

TEST_CASE("transfer_encoder: encoder copied bitwise, decoder freshly initialized") {
    NetworkConfig pre_cfg = toy_config();
    pre_cfg.mode = NetMode::reconstruction;
    pre_cfg.norm_kind = NormKind::sparse_batch;
    const GynBTNet pre = build(pre_cfg, 21);
    const Checkpoint ckpt = checkpoint_from(pre, "pretrain");

    const GynBTNet target = transfer_encoder(ckpt, toy_config(), 22);
    const GynBTNet fresh = build(toy_config(), 22);
    for (std::size_t i = 0; i < target.params.size(); ++i) {
        const std::string& name = target.param_names[i];
        if (name.starts_with("stem.") || name.starts_with("enc")) {
            CHECK(bitwise_equal(target.params[i]->value, pre.param(name)->value));
        } else {
            CHECK(bitwise_equal(target.params[i]->value, fresh.param(name)->value));
        }
    }
}

TEST_CASE("transfer_encoder: unequal base_channels is a shape mismatch") {
    const GynBTNet pre = build(toy_config(), 23);
    const Checkpoint ckpt = checkpoint_from(pre, "pretrain");
    NetworkConfig wider = toy_config();
    wider.base_channels = 16;
    CHECK_THROWS_AS(transfer_encoder(ckpt, wider, 1), CheckpointError);
}

TEST_CASE("densify: verbatim weights, dense-forward equivalence at batch 1") {
    NetworkConfig sparse_cfg = toy_config();
    sparse_cfg.num_stages = 3;
    sparse_cfg.base_channels = 4;
    sparse_cfg.mode = NetMode::reconstruction;
    sparse_cfg.norm_kind = NormKind::sparse_batch;
    const GynBTNet sparse_net = build(sparse_cfg, 31);
    const Checkpoint ckpt = checkpoint_from(sparse_net, "pretrain");

    NetworkConfig dense_cfg = sparse_cfg;
    dense_cfg.norm_kind = NormKind::instance;
    const GynBTNet dense_net = densify(ckpt, dense_cfg);

    SUBCASE("weights byte-identical") {
        for (std::size_t i = 0; i < dense_net.params.size(); ++i)
            CHECK(bitwise_equal(dense_net.params[i]->value,
                                ckpt.tensors[i].second));
    }

    SUBCASE("forward equivalence under a vacuous mask at batch 1") {
        // At batch 1 per-channel batch statistics coincide with instance
        // statistics, so the densified net must match within 1e-6.
        Rng rng(32);
        const Tensor5 x = random_input(rng, 1, 1, 16);
        const OccupancyMask full({16, 16, 16}, true);
        const MaskPyramid pyr = build_pyramid(full, sparse_cfg.num_stages);
        const GynBTNet sparse_back = net_from_checkpoint(ckpt);
        const Tensor5 ys =
            forward_pretrain(sparse_back, nullptr, make_var(x), &pyr)->value;
        const Tensor5 yd =
            forward_pretrain(dense_net, nullptr, make_var(x), nullptr)->value;
        CHECK(max_abs_diff(ys, yd) < 1e-6);
    }

    SUBCASE("mismatched channel widths error") {
        NetworkConfig wrong = dense_cfg;
        wrong.base_channels = 8;
        CHECK_THROWS_AS(densify(ckpt, wrong), CheckpointError);
    }
}

TEST_CASE("encoder trace: stage s dims are input / 2^s") {
    NetworkConfig cfg = toy_config();
    cfg.mode = NetMode::reconstruction;
    cfg.norm_kind = NormKind::sparse_batch;
    const GynBTNet net = build(cfg, 41);
    Rng rng(42);
    const Tensor5 x = random_input(rng, 1, 1, 32);
    EncoderTrace trace;
    forward_pretrain(net, nullptr, make_var(x), nullptr,
                     MaskEnforcement::per_stage, &trace);
    REQUIRE(trace.stage_outputs.size() == 4);
    for (int s = 0; s < 4; ++s) {
        const auto& out = trace.stage_outputs[static_cast<std::size_t>(s)];
        CHECK(out.shape[2] == 32 >> s);
        CHECK(out.shape[1] == cfg.channels_at(s));
    }
}

TEST_CASE("end-to-end DiceCE gradient through the toy network") {
    NetworkConfig cfg;
    cfg.num_stages = 2;
    cfg.base_channels = 2;
    cfg.blocks_per_stage = 1;
    const GynBTNet net = build(cfg, 51);
    Rng rng(52);
    const Tensor5 x = random_input(rng, 1, 1, 4);
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 64; ++i)
        labels.push_back(static_cast<std::uint8_t>(rng.below(6)));

    net.param("stem.conv.w");  // net built; compute analytic grads
    Tape tape;
    for (auto& p : const_cast<GynBTNet&>(net).params) p->zero_grad();
    VarPtr out = forward(net, &tape, make_var(x));
    LossResult loss = dice_ce_loss(out->value, labels, 6);
    out->ensure_grad();
    accumulate(out->grad, loss.grad);
    tape.backward();

    // spot-check >= 20 random parameter coordinates with central differences
    Rng pick(53);
    int checked = 0;
    double max_rel = 0.0;
    while (checked < 20) {
        const std::size_t pi = pick.below(net.params.size());
        auto& p = net.params[pi];
        if (p->value.data.empty()) continue;
        const std::size_t ci = pick.below(p->value.data.size());
        const double h = 1e-4;
        const double saved = p->value.data[ci];
        auto eval = [&](double delta) {
            p->value.data[ci] = saved + delta;
            const Tensor5 y = forward(net, x);
            p->value.data[ci] = saved;
            return dice_ce_loss(y, labels, 6).value;
        };
        const double numeric = (eval(h) - eval(-h)) / (2 * h);
        const double analytic = p->grad.data[ci];
        const double rel = std::abs(numeric - analytic) /
                           std::max({std::abs(numeric), std::abs(analytic), 1e-8});
        max_rel = std::max(max_rel, rel);
        ++checked;
    }
    INFO("max rel err ", max_rel);
    CHECK(max_rel < 1e-3);
}

TEST_CASE("segmentation and reconstruction head channel counts") {
    NetworkConfig cfg = toy_config();
    auto params = describe_parameters(cfg);
    CHECK(params.back().name == "head.b");
    CHECK(params[params.size() - 2].shape[0] == 6);
    cfg.mode = NetMode::reconstruction;
    auto rparams = describe_parameters(cfg);
    CHECK(rparams[rparams.size() - 2].shape[0] == 1);
}
