#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <filesystem>

#include "gbt/network.hpp"
#include "gbt/phantom.hpp"
#include "gbt/rng.hpp"
#include "gbt/training.hpp"

using namespace gbt;

namespace {

namespace fs = std::filesystem;

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name)
        : path(fs::temp_directory_path() / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

// Small cohort + config sized for test speed: 2-stage net, 16^3 patches.
TrainConfig micro_config(const fs::path& cohort_dir, const std::string& stage) {
    TrainConfig c;
    c.stage = stage;
    c.patch_dims = {16, 16, 16};
    c.batch_size = 2;
    c.epochs = 2;
    c.steps_per_epoch = 2;
    c.lr_max = 1e-3;
    c.seed = 5;
    c.cohort = (cohort_dir / "cohort.json").string();
    c.mask = MaskSpec{{8, 8, 8}, 0.6, 0};
    c.network.num_stages = 2;
    c.network.base_channels = 2;
    c.network.blocks_per_stage = 1;
    return c;
}

fs::path make_micro_cohort(const TempDir& dir, int cases = 3) {
    PhantomSpec spec;
    spec.dims = {24, 24, 24};
    spec.rng_seed = 17;
    spec.center_jitter_vox = 1.0;
    write_cohort(spec, cases, dir.path);
    return dir.path / "cohort.json";
}

}  // namespace

TEST_CASE("cosine_lr: endpoints, midpoint, monotonicity") {
    CHECK(cosine_lr(0, 100, 1e-4, 0.0) == doctest::Approx(1e-4).epsilon(1e-12));
    CHECK(cosine_lr(100, 100, 1e-4, 0.0) == doctest::Approx(0.0));
    CHECK(cosine_lr(50, 100, 1e-4, 0.0) == doctest::Approx(5e-5).epsilon(1e-12));
    CHECK(cosine_lr(50, 100, 3e-4, 1e-4) == doctest::Approx(2e-4).epsilon(1e-12));
    double prev = cosine_lr(0, 200, 1.0, 0.1);
    for (int t = 1; t <= 200; ++t) {
        const double lr = cosine_lr(t, 200, 1.0, 0.1);
        CHECK(lr <= prev + 1e-15);
        prev = lr;
    }
    CHECK_THROWS_AS(cosine_lr(5, 4, 1.0, 0.0), std::invalid_argument);
}

TEST_CASE("adamw: single-scalar hand example lands at -0.1") {
    auto theta = make_var(Tensor5(1, 1, 1, 1, 1), true);
    theta->zero_grad();
    theta->grad.data[0] = 1.0;
    AdamWState state;
    adamw_step(std::span<const VarPtr>(&theta, 1), state, 0.1, {0.9, 0.999},
               1e-8, 0.0);
    // m-hat = 1, v-hat = 1 after bias correction at t = 1
    CHECK(std::abs(theta->value.data[0] - (-0.1)) < 1e-6);
    CHECK(state.t == 1);
}

TEST_CASE("adamw: zero gradient with zero decay is an exact no-op") {
    auto theta = make_var(Tensor5(1, 1, 1, 1, 2), true);
    theta->value.data = {1.25, -0.75};
    theta->zero_grad();
    AdamWState state;
    adamw_step(std::span<const VarPtr>(&theta, 1), state, 0.1, {0.9, 0.999},
               1e-8, 0.0);
    CHECK(theta->value.data[0] == 1.25);
    CHECK(theta->value.data[1] == -0.75);
}

TEST_CASE("adamw: decoupled decay shrinks weights multiplicatively") {
    auto theta = make_var(Tensor5(1, 1, 1, 1, 1), true);
    theta->value.data[0] = 1.0;
    theta->zero_grad();
    AdamWState state;
    // power-of-two lr and decay keep the arithmetic exact
    adamw_step(std::span<const VarPtr>(&theta, 1), state, 0.5, {0.9, 0.999},
               1e-8, 0.25);
    CHECK(theta->value.data[0] == 1.0 - 0.5 * 0.25);
}

TEST_CASE("adamw: non-finite gradient aborts the step") {
    auto theta = make_var(Tensor5(1, 1, 1, 1, 1), true);
    theta->zero_grad();
    theta->grad.data[0] = std::numeric_limits<double>::quiet_NaN();
    AdamWState state;
    CHECK_THROWS_AS(adamw_step(std::span<const VarPtr>(&theta, 1), state, 0.1,
                               {0.9, 0.999}, 1e-8, 0.0),
                    TrainingError);
}

TEST_CASE("l2_masked_loss: zero for perfect reconstruction, single-voxel case") {
    Tensor5 recon(1, 1, 1, 1, 4);
    recon.data = {1, 2, 3, 4};
    OccupancyMask mask({1, 1, 4}, true);
    mask.bits = {1, 1, 1, 0};  // one masked voxel
    CHECK(l2_masked_loss(recon, recon, mask).value == 0.0);

    Tensor5 target = recon;
    target.data[3] = 1.0;  // masked voxel differs by 3
    const LossResult r = l2_masked_loss(recon, target, mask);
    CHECK(r.value == doctest::Approx(9.0));
    CHECK(r.grad.data[0] == 0.0);  // active voxels carry zero gradient
    CHECK(r.grad.data[3] == doctest::Approx(6.0));
}

TEST_CASE("l2_masked_loss equals a scalar-loop oracle on a random case") {
    Rng rng(1);
    Tensor5 recon(2, 1, 4, 4, 4), target(2, 1, 4, 4, 4);
    for (auto& v : recon.data) v = rng.normal();
    for (auto& v : target.data) v = rng.normal();
    const OccupancyMask mask =
        generate_patch_mask({4, 4, 4}, MaskSpec{{2, 2, 2}, 0.5, 7});
    const LossResult r = l2_masked_loss(recon, target, mask);

    double acc = 0.0;
    std::int64_t count = 0;
    for (int n = 0; n < 2; ++n)
        for (std::int64_t i = 0; i < 64; ++i) {
            if (mask.bits[static_cast<std::size_t>(i)]) continue;
            const double d = recon.data[static_cast<std::size_t>(n * 64 + i)] -
                             target.data[static_cast<std::size_t>(n * 64 + i)];
            acc += d * d;
            ++count;
        }
    CHECK(r.value == doctest::Approx(acc / count).epsilon(1e-12));
}

TEST_CASE("l2_masked_loss: zero masked voxels errors") {
    Tensor5 recon(1, 1, 1, 1, 2);
    const OccupancyMask mask({1, 1, 2}, true);
    CHECK_THROWS_AS(l2_masked_loss(recon, recon, mask), std::invalid_argument);
}

TEST_CASE("dice_ce_loss: strong correct logits approach zero loss") {
    Rng rng(2);
    Tensor5 logits(1, 3, 2, 2, 2);
    std::vector<std::uint8_t> labels;
    for (int i = 0; i < 8; ++i)
        labels.push_back(static_cast<std::uint8_t>(rng.below(3)));
    for (int i = 0; i < 8; ++i)
        for (int c = 0; c < 3; ++c)
            logits.data[static_cast<std::size_t>(c * 8 + i)] =
                c == labels[static_cast<std::size_t>(i)] ? 30.0 : -30.0;
    CHECK(dice_ce_loss(logits, labels, 3).value < 1e-4);
}

TEST_CASE("dice_ce_loss: uniform logits with 2 classes has CE term ln 2") {
    Tensor5 logits(1, 2, 2, 2, 2);  // all zeros -> uniform softmax
    std::vector<std::uint8_t> labels(8, 1);
    const double loss = dice_ce_loss(logits, labels, 2).value;
    // CE = ln 2 exactly; soft dice with p = 0.5 everywhere gives
    // 1 - (2*0.5V)/(0.5V + V) = 1/3 up to the 1e-5 smoothing
    CHECK(std::abs(loss - (std::log(2.0) + 1.0 / 3.0)) < 1e-3);
}

TEST_CASE("dice_ce_loss: label out of range errors") {
    Tensor5 logits(1, 2, 1, 1, 2);
    std::vector<std::uint8_t> labels{0, 2};
    CHECK_THROWS_AS(dice_ce_loss(logits, labels, 2), std::invalid_argument);
}

TEST_CASE("run_stage: zero epochs returns the initialization unchanged") {
    TempDir dir("gbt_train_zero");
    make_micro_cohort(dir);
    TrainConfig config = micro_config(dir.path, "task");
    config.epochs = 0;
    const TrainResult result = run_stage(config, nullptr);

    NetworkConfig net_cfg = config.network;
    net_cfg.mode = NetMode::segmentation;
    net_cfg.norm_kind = NormKind::instance;
    const GynBTNet fresh = build(net_cfg, config.seed);
    REQUIRE(result.checkpoint.tensors.size() == fresh.params.size());
    for (std::size_t i = 0; i < fresh.params.size(); ++i)
        CHECK(result.checkpoint.tensors[i].second.data ==
              fresh.params[i]->value.data);
}

TEST_CASE("run_stage: identical config and seed give identical checkpoints") {
    TempDir dir("gbt_train_det");
    make_micro_cohort(dir);
    const TrainConfig config = micro_config(dir.path, "task");
    const TrainResult a = run_stage(config, nullptr);
    const TrainResult b = run_stage(config, nullptr);
    CHECK(encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint));
    REQUIRE(a.log.size() == b.log.size());
    for (std::size_t i = 0; i < a.log.size(); ++i)
        CHECK(a.log[i].loss == b.log[i].loss);
}

TEST_CASE("run_stage: pretrain runs sparse reconstruction and logs epochs") {
    TempDir dir("gbt_train_pre");
    make_micro_cohort(dir);
    TrainConfig config = micro_config(dir.path, "pretrain");
    config.log_path = (dir.path / "log.jsonl").string();
    config.out_checkpoint = (dir.path / "pre.ckpt").string();
    const TrainResult result = run_stage(config, nullptr);
    CHECK(result.checkpoint.stage == "pretrain");
    CHECK(result.log.size() == 2);
    for (const auto& entry : result.log) CHECK(std::isfinite(entry.loss));
    CHECK(fs::exists(dir.path / "log.jsonl"));
    CHECK(fs::exists(dir.path / "pre.ckpt"));
    const Checkpoint loaded = load_checkpoint(dir.path / "pre.ckpt");
    CHECK(loaded.config.mode == NetMode::reconstruction);
    CHECK(loaded.config.norm_kind == NormKind::sparse_batch);
    CHECK(loaded.extra.contains("train_config"));
}

TEST_CASE("run_stage: stage/init legality") {
    TempDir dir("gbt_train_legal");
    make_micro_cohort(dir);
    const TrainConfig pre_cfg = micro_config(dir.path, "pretrain");
    const TrainResult pre = run_stage(pre_cfg, nullptr);

    SUBCASE("pretrain rejects an init checkpoint") {
        CHECK_THROWS_AS(run_stage(pre_cfg, &pre.checkpoint), TrainingError);
    }
    SUBCASE("task accepts a pretrain checkpoint via encoder transfer") {
        TrainConfig task_cfg = micro_config(dir.path, "task");
        task_cfg.epochs = 1;
        const TrainResult ft = run_stage(task_cfg, &pre.checkpoint);
        CHECK(ft.checkpoint.stage == "task");
    }
    SUBCASE("supervised rejects a task checkpoint") {
        TrainConfig task_cfg = micro_config(dir.path, "task");
        task_cfg.epochs = 0;
        const TrainResult task = run_stage(task_cfg, nullptr);
        TrainConfig sup_cfg = micro_config(dir.path, "supervised");
        CHECK_THROWS_AS(run_stage(sup_cfg, &task.checkpoint), TrainingError);
    }
}

TEST_CASE("run_stage: pretrain loss decreases on a short run") {
    TempDir dir("gbt_train_learn");
    make_micro_cohort(dir, 4);
    TrainConfig config = micro_config(dir.path, "pretrain");
    config.epochs = 8;
    config.steps_per_epoch = 2;
    const TrainResult result = run_stage(config, nullptr);
    REQUIRE(result.log.size() == 8);
    CHECK(result.log.back().loss < result.log.front().loss);
}

TEST_CASE("segment_volume: argmax labels with matched geometry") {
    TempDir dir("gbt_train_seg");
    make_micro_cohort(dir);
    NetworkConfig cfg;
    cfg.num_stages = 2;
    cfg.base_channels = 2;
    cfg.blocks_per_stage = 1;
    const GynBTNet net = build(cfg, 3);
    const VoxelGrid img = load_gbtv_image(dir.path / "case_0_img.gbtv");
    const LabelMap pred = segment_volume(net, znormalize(img));
    CHECK(pred.dims == img.dims);
    CHECK(pred.num_classes == 6);
    for (auto v : pred.labels) CHECK(v < 6);
}

TEST_CASE("train config JSON roundtrip") {
    TrainConfig c = desk_pretrain_config();
    c.cohort = "somewhere/cohort.json";
    c.seed = 99;
    const auto j = train_config_to_json(c);
    const TrainConfig back = train_config_from_json(j);
    CHECK(train_config_to_json(back) == j);
}
