#include "gbt/training.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>

#include "gbt/rng.hpp"

namespace gbt {

void TrainConfig::validate() const {
    if (stage != "pretrain" && stage != "supervised" && stage != "task")
        throw std::invalid_argument("train: unknown stage " + stage);
    if (batch_size < 1) throw std::invalid_argument("train: batch_size < 1");
    if (epochs < 0 || steps_per_epoch < 1)
        throw std::invalid_argument("train: bad epoch/step counts");
    if (!(lr_max > lr_min) || lr_min < 0.0)
        throw std::invalid_argument("train: need lr_max > lr_min >= 0");
    if (mask_enforcement != "per_stage" && mask_enforcement != "bottleneck_only")
        throw std::invalid_argument("train: unknown mask_enforcement " +
                                    mask_enforcement);
    for (int a = 0; a < 3; ++a)
        if (patch_dims[a] < 1)
            throw std::invalid_argument("train: bad patch dims");
}

TrainConfig desk_pretrain_config() {
    TrainConfig c;
    c.stage = "pretrain";
    c.patch_dims = {32, 32, 32};
    c.batch_size = 4;
    c.epochs = 50;
    c.steps_per_epoch = 3;
    c.lr_max = 1e-3;
    c.mask = MaskSpec{{8, 8, 8}, 0.6, 0};
    c.network = toy_config();
    return c;
}

TrainConfig desk_finetune_config(const std::string& stage) {
    TrainConfig c;
    c.stage = stage;
    c.patch_dims = {32, 32, 32};
    c.batch_size = 2;
    c.epochs = 100;
    c.steps_per_epoch = 3;
    c.lr_max = 1e-3;
    c.network = toy_config();
    return c;
}

TrainConfig paper_pretrain_config() {
    TrainConfig c;
    c.stage = "pretrain";
    c.patch_dims = {112, 128, 128};
    c.batch_size = 24;
    c.epochs = 1000;
    c.steps_per_epoch = 250;
    c.lr_max = 1e-4;
    c.mask = MaskSpec{{7, 8, 8}, 0.6, 0};
    c.network = paper_config();
    return c;
}

TrainConfig paper_finetune_config(const std::string& stage) {
    TrainConfig c;
    c.stage = stage;
    c.patch_dims = stage == "task" ? std::array<int, 3>{80, 160, 160}
                                   : std::array<int, 3>{112, 128, 128};
    c.batch_size = 2;
    c.epochs = 1000;
    c.steps_per_epoch = 250;
    c.lr_max = 5e-5;
    c.network = paper_config();
    return c;
}

nlohmann::ordered_json train_config_to_json(const TrainConfig& c) {
    return nlohmann::ordered_json{
        {"stage", c.stage},
        {"patch_dims", c.patch_dims},
        {"batch_size", c.batch_size},
        {"epochs", c.epochs},
        {"steps_per_epoch", c.steps_per_epoch},
        {"lr_max", c.lr_max},
        {"lr_min", c.lr_min},
        {"weight_decay", c.weight_decay},
        {"betas", c.betas},
        {"adam_eps", c.adam_eps},
        {"grad_check_mode", c.grad_check_mode},
        {"seed", c.seed},
        {"cohort", c.cohort},
        {"init_checkpoint", c.init_checkpoint},
        {"out_checkpoint", c.out_checkpoint},
        {"log_path", c.log_path},
        {"mask",
         {{"patch_dims", c.mask.patch_dims},
          {"mask_ratio", c.mask.mask_ratio},
          {"rng_seed", c.mask.rng_seed}}},
        {"mask_enforcement", c.mask_enforcement},
        {"target_spacing", c.target_spacing},
        {"flip_axes", c.flip_axes},
        {"l2_masked_only", c.l2_masked_only},
        {"network", config_to_json(c.network)},
        {"deterministic", c.deterministic},
        {"threads", c.threads},
    };
}

TrainConfig train_config_from_json(const nlohmann::ordered_json& j) {
    TrainConfig c;
    auto set = [&j](const char* key, auto& field) {
        if (j.contains(key)) j.at(key).get_to(field);
    };
    set("stage", c.stage);
    set("patch_dims", c.patch_dims);
    set("batch_size", c.batch_size);
    set("epochs", c.epochs);
    set("steps_per_epoch", c.steps_per_epoch);
    set("lr_max", c.lr_max);
    set("lr_min", c.lr_min);
    set("weight_decay", c.weight_decay);
    set("betas", c.betas);
    set("adam_eps", c.adam_eps);
    set("grad_check_mode", c.grad_check_mode);
    set("seed", c.seed);
    set("cohort", c.cohort);
    set("init_checkpoint", c.init_checkpoint);
    set("out_checkpoint", c.out_checkpoint);
    set("log_path", c.log_path);
    if (j.contains("mask")) {
        const auto& m = j.at("mask");
        if (m.contains("patch_dims")) m.at("patch_dims").get_to(c.mask.patch_dims);
        if (m.contains("mask_ratio")) m.at("mask_ratio").get_to(c.mask.mask_ratio);
        if (m.contains("rng_seed")) m.at("rng_seed").get_to(c.mask.rng_seed);
    }
    set("mask_enforcement", c.mask_enforcement);
    set("target_spacing", c.target_spacing);
    set("flip_axes", c.flip_axes);
    set("l2_masked_only", c.l2_masked_only);
    if (j.contains("network")) c.network = config_from_json(j.at("network"));
    set("deterministic", c.deterministic);
    set("threads", c.threads);
    return c;
}

// ---------------------------------------------------------------------------

double cosine_lr(std::int64_t t, std::int64_t total, double lr_max,
                 double lr_min) {
    if (total < 1 || t < 0 || t > total)
        throw std::invalid_argument("cosine_lr: need 0 <= t <= T, T >= 1");
    const double pi = 3.14159265358979323846;
    return lr_min + 0.5 * (lr_max - lr_min) *
                        (1.0 + std::cos(pi * static_cast<double>(t) /
                                        static_cast<double>(total)));
}

void adamw_step(std::span<const VarPtr> params, AdamWState& state, double lr,
                std::array<double, 2> betas, double eps, double weight_decay) {
    if (state.m.empty()) {
        state.m.reserve(params.size());
        state.v.reserve(params.size());
        for (const auto& p : params) {
            state.m.push_back(Tensor5::zeros_like(p->value));
            state.v.push_back(Tensor5::zeros_like(p->value));
        }
    }
    if (state.m.size() != params.size())
        throw TrainingError("adamw: state/parameter count mismatch");

    for (const auto& p : params) {
        p->ensure_grad();
        if (!p->grad.all_finite())
            throw TrainingError("adamw: non-finite gradient");
    }

    state.t += 1;
    const double b1 = betas[0], b2 = betas[1];
    const double bc1 = 1.0 - std::pow(b1, static_cast<double>(state.t));
    const double bc2 = 1.0 - std::pow(b2, static_cast<double>(state.t));
    for (std::size_t i = 0; i < params.size(); ++i) {
        auto& theta = params[i]->value.data;
        const auto& g = params[i]->grad.data;
        auto& m = state.m[i].data;
        auto& v = state.v[i].data;
        for (std::size_t k = 0; k < theta.size(); ++k) {
            m[k] = b1 * m[k] + (1.0 - b1) * g[k];
            v[k] = b2 * v[k] + (1.0 - b2) * g[k] * g[k];
            const double mhat = m[k] / bc1;
            const double vhat = v[k] / bc2;
            theta[k] -= lr * (mhat / (std::sqrt(vhat) + eps) +
                              weight_decay * theta[k]);
        }
    }
}

// ---------------------------------------------------------------------------

LossResult l2_masked_loss(const Tensor5& recon, const Tensor5& target,
                          const OccupancyMask& mask, bool masked_only) {
    check_same_shape(recon, target, "l2_masked_loss");
    if (mask.dims !=
        std::array<int, 3>{recon.shape[2], recon.shape[3], recon.shape[4]})
        throw std::invalid_argument("l2_masked_loss: mask dims mismatch");
    const std::int64_t spatial = recon.spatial_size();
    const std::int64_t samples =
        static_cast<std::int64_t>(recon.shape[0]) * recon.shape[1];

    std::int64_t counted = 0;
    if (masked_only) {
        counted = (mask.voxel_count() - mask.count_active()) * samples;
        if (counted == 0)
            throw std::invalid_argument("l2_masked_loss: zero masked voxels");
    } else {
        counted = recon.size();
    }

    LossResult out;
    out.grad = Tensor5::zeros_like(recon);
    double acc = 0.0;
    const double inv = 1.0 / static_cast<double>(counted);
    for (std::int64_t s = 0; s < samples; ++s) {
        const double* r = recon.data.data() + s * spatial;
        const double* t = target.data.data() + s * spatial;
        double* g = out.grad.data.data() + s * spatial;
        for (std::int64_t i = 0; i < spatial; ++i) {
            if (masked_only && mask.bits[static_cast<std::size_t>(i)]) continue;
            const double d = r[i] - t[i];
            acc += d * d;
            g[i] = 2.0 * d * inv;
        }
    }
    out.value = acc * inv;
    return out;
}

LossResult dice_ce_loss(const Tensor5& logits,
                        std::span<const std::uint8_t> labels, int num_classes) {
    const int N = logits.shape[0], C = logits.shape[1];
    if (C != num_classes)
        throw std::invalid_argument("dice_ce_loss: logits classes mismatch");
    const std::int64_t V = logits.spatial_size();
    if (static_cast<std::int64_t>(labels.size()) !=
        static_cast<std::int64_t>(N) * V)
        throw std::invalid_argument("dice_ce_loss: label count mismatch");
    for (const auto l : labels)
        if (l >= num_classes)
            throw std::invalid_argument("dice_ce_loss: label >= num_classes");

    const double smooth = 1e-5;
    const std::int64_t total_voxels = static_cast<std::int64_t>(N) * V;

    // Softmax probabilities, per-class sums, and cross-entropy in one pass.
    std::vector<double> probs(logits.data.size());
    std::vector<double> sum_p(static_cast<std::size_t>(C), 0.0);
    std::vector<double> sum_pg(static_cast<std::size_t>(C), 0.0);
    std::vector<double> sum_g(static_cast<std::size_t>(C), 0.0);
    double ce = 0.0;
    for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < V; ++i) {
            const std::int64_t base =
                (static_cast<std::int64_t>(n) * C) * V + i;
            double mx = -1e300;
            for (int c = 0; c < C; ++c)
                mx = std::max(mx, logits.data[static_cast<std::size_t>(base + c * V)]);
            double z = 0.0;
            for (int c = 0; c < C; ++c) {
                const double e = std::exp(
                    logits.data[static_cast<std::size_t>(base + c * V)] - mx);
                probs[static_cast<std::size_t>(base + c * V)] = e;
                z += e;
            }
            const double invz = 1.0 / z;
            const int label = labels[static_cast<std::size_t>(
                static_cast<std::int64_t>(n) * V + i)];
            for (int c = 0; c < C; ++c) {
                const double p =
                    probs[static_cast<std::size_t>(base + c * V)] * invz;
                probs[static_cast<std::size_t>(base + c * V)] = p;
                sum_p[static_cast<std::size_t>(c)] += p;
                if (c == label) {
                    sum_pg[static_cast<std::size_t>(c)] += p;
                    sum_g[static_cast<std::size_t>(c)] += 1.0;
                    ce -= std::log(std::max(p, 1e-300));
                }
            }
        }
    ce /= static_cast<double>(total_voxels);

    // Soft dice over foreground classes.
    const int n_fg = C - 1;
    double dice_total = 0.0;
    std::vector<double> num(static_cast<std::size_t>(C), 0.0);
    std::vector<double> den(static_cast<std::size_t>(C), 0.0);
    for (int c = 1; c < C; ++c) {
        num[static_cast<std::size_t>(c)] =
            2.0 * sum_pg[static_cast<std::size_t>(c)] + smooth;
        den[static_cast<std::size_t>(c)] = sum_p[static_cast<std::size_t>(c)] +
                                           sum_g[static_cast<std::size_t>(c)] +
                                           smooth;
        dice_total +=
            num[static_cast<std::size_t>(c)] / den[static_cast<std::size_t>(c)];
    }
    const double dice_loss = 1.0 - dice_total / n_fg;

    LossResult out;
    out.value = dice_loss + ce;
    out.grad = Tensor5::zeros_like(logits);

    const double inv_voxels = 1.0 / static_cast<double>(total_voxels);
    std::vector<double> gp(static_cast<std::size_t>(C));
    for (int n = 0; n < N; ++n)
        for (std::int64_t i = 0; i < V; ++i) {
            const std::int64_t base =
                (static_cast<std::int64_t>(n) * C) * V + i;
            const int label = labels[static_cast<std::size_t>(
                static_cast<std::int64_t>(n) * V + i)];
            // d(dice_loss)/dp_c for this voxel
            double dot = 0.0;
            for (int c = 0; c < C; ++c) {
                double v = 0.0;
                if (c >= 1) {
                    const double g = c == label ? 1.0 : 0.0;
                    const double d = den[static_cast<std::size_t>(c)];
                    v = -(2.0 * g * d - num[static_cast<std::size_t>(c)]) /
                        (d * d * n_fg);
                }
                gp[static_cast<std::size_t>(c)] = v;
                dot += v * probs[static_cast<std::size_t>(base + c * V)];
            }
            for (int c = 0; c < C; ++c) {
                const double p = probs[static_cast<std::size_t>(base + c * V)];
                const double softmax_chain =
                    p * (gp[static_cast<std::size_t>(c)] - dot);
                const double ce_grad =
                    (p - (c == label ? 1.0 : 0.0)) * inv_voxels;
                out.grad.data[static_cast<std::size_t>(base + c * V)] =
                    softmax_chain + ce_grad;
            }
        }
    return out;
}

// ---------------------------------------------------------------------------

std::vector<TrainingCase> load_cohort_cases(const std::filesystem::path& manifest,
                                            double target_spacing) {
    const CohortManifest m = load_cohort_manifest(manifest);
    const auto dir = manifest.parent_path();
    std::vector<TrainingCase> cases;
    cases.reserve(m.cases.size());
    for (const auto& entry : m.cases) {
        TrainingCase c;
        c.id = "case_" + std::to_string(entry.index);
        VoxelGrid img = load_gbtv_image(dir / entry.image);
        LabelMap lbl = load_gbtv_labels(dir / entry.labels);
        const bool needs_resample =
            img.spacing[0] != target_spacing || img.spacing[1] != target_spacing ||
            img.spacing[2] != target_spacing;
        if (needs_resample) {
            img = resample_isotropic(img, target_spacing);
            lbl = resample_isotropic(lbl, target_spacing);
        }
        c.image = znormalize(img);
        c.labels = std::move(lbl);
        cases.push_back(std::move(c));
    }
    return cases;
}

LabelMap segment_volume(const GynBTNet& net, const VoxelGrid& image) {
    if (net.config.mode != NetMode::segmentation)
        throw std::invalid_argument("segment_volume: not a segmentation network");
    Tensor5 x(1, 1, image.dims[0], image.dims[1], image.dims[2]);
    for (std::int64_t i = 0; i < image.voxel_count(); ++i)
        x.data[static_cast<std::size_t>(i)] =
            image.data[static_cast<std::size_t>(i)];
    const Tensor5 logits = forward(net, x);

    LabelMap out;
    out.dims = image.dims;
    out.spacing = image.spacing;
    out.origin = image.origin;
    out.num_classes = net.config.num_classes;
    out.labels.resize(static_cast<std::size_t>(image.voxel_count()));
    const std::int64_t V = logits.spatial_size();
    for (std::int64_t i = 0; i < V; ++i) {
        int best = 0;
        double best_v = logits.data[static_cast<std::size_t>(i)];
        for (int c = 1; c < net.config.num_classes; ++c) {
            const double v = logits.data[static_cast<std::size_t>(c * V + i)];
            if (v > best_v) {
                best_v = v;
                best = c;
            }
        }
        out.labels[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// ---------------------------------------------------------------------------

namespace {

NetworkConfig stage_network_config(const TrainConfig& config) {
    NetworkConfig net = config.network;
    if (config.stage == "pretrain") {
        net.mode = NetMode::reconstruction;
        net.norm_kind = NormKind::sparse_batch;
    } else {
        net.mode = NetMode::segmentation;
        net.norm_kind = NormKind::instance;
    }
    return net;
}

void check_init_legality(const TrainConfig& config, const Checkpoint* init) {
    if (config.stage == "pretrain") {
        if (init)
            throw TrainingError("run_stage: pretrain takes no init checkpoint");
        return;
    }
    if (!init) return;  // fresh init = the no-pretrain ablation
    if (config.stage == "supervised" && init->stage != "pretrain")
        throw TrainingError(
            "run_stage: supervised stage accepts only a pretrain checkpoint");
    if (config.stage == "task" && init->stage != "pretrain" &&
        init->stage != "supervised")
        throw TrainingError(
            "run_stage: task stage accepts a pretrain or supervised checkpoint");
}

struct Batch {
    Tensor5 images;
    std::vector<std::uint8_t> labels;
};

Batch sample_batch(const std::vector<TrainingCase>& cases,
                   const TrainConfig& config, Rng& rng) {
    const auto& pd = config.patch_dims;
    Batch batch;
    batch.images = Tensor5(config.batch_size, 1, pd[0], pd[1], pd[2]);
    const std::int64_t patch_voxels =
        static_cast<std::int64_t>(pd[0]) * pd[1] * pd[2];
    batch.labels.resize(
        static_cast<std::size_t>(config.batch_size) * patch_voxels);
    for (int b = 0; b < config.batch_size; ++b) {
        const auto& c =
            cases[rng.below(static_cast<std::uint64_t>(cases.size()))];
        AugmentSpec aug;
        aug.crop_dims = pd;
        aug.flip_axes = config.flip_axes;
        aug.rng_seed = rng.next();
        auto [img, lbl] = augment(c.image, c.labels, aug);
        std::copy(img.data.begin(), img.data.end(),
                  batch.images.data.begin() +
                      static_cast<std::int64_t>(b) * patch_voxels);
        std::copy(lbl.labels.begin(), lbl.labels.end(),
                  batch.labels.begin() +
                      static_cast<std::int64_t>(b) * patch_voxels);
    }
    return batch;
}

}  // namespace

TrainResult run_stage(const TrainConfig& config, const Checkpoint* init) {
    config.validate();
    check_init_legality(config, init);
    const NetworkConfig net_config = stage_network_config(config);

    GynBTNet net = init ? transfer_encoder(*init, net_config, config.seed)
                        : build(net_config, config.seed);

    std::vector<TrainingCase> cases;
    if (!config.cohort.empty())
        cases = load_cohort_cases(config.cohort, config.target_spacing);
    if (config.epochs > 0 && cases.empty())
        throw TrainingError("run_stage: no cohort cases to train on");

    for (const auto& c : cases)
        for (int a = 0; a < 3; ++a)
            if (c.image.dims[a] < config.patch_dims[a])
                throw TrainingError("run_stage: patch larger than case volume");

    const MaskEnforcement enforcement =
        config.mask_enforcement == "per_stage" ? MaskEnforcement::per_stage
                                               : MaskEnforcement::bottleneck_only;
    const bool pretrain = config.stage == "pretrain";

    Rng rng(mix_seed(config.seed, config.stage));
    AdamWState opt;
    TrainResult result;
    const std::int64_t total_steps =
        static_cast<std::int64_t>(config.epochs) * config.steps_per_epoch;
    std::int64_t step = 0;

    std::ofstream log_file;
    if (!config.log_path.empty()) {
        log_file.open(config.log_path, std::ios::trunc);
        if (!log_file)
            throw TrainingError("run_stage: cannot write log " + config.log_path);
    }

    auto write_diagnostic = [&](const std::string& reason) {
        if (config.out_checkpoint.empty()) return;
        Checkpoint diag = checkpoint_from(net, config.stage);
        diag.extra["train_config"] = train_config_to_json(config);
        diag.extra["aborted"] = reason;
        save_checkpoint(diag, config.out_checkpoint + ".diag");
    };

    for (int epoch = 0; epoch < config.epochs; ++epoch) {
        const auto epoch_start = std::chrono::steady_clock::now();
        double loss_sum = 0.0;
        double lr = config.lr_max;
        for (int s = 0; s < config.steps_per_epoch; ++s, ++step) {
            lr = cosine_lr(step, total_steps, config.lr_max, config.lr_min);
            Batch batch = sample_batch(cases, config, rng);

            net.zero_grads();
            Tape tape;
            VarPtr x = make_var(batch.images);
            LossResult loss;
            VarPtr out;
            if (pretrain) {
                MaskSpec mask_spec = config.mask;
                mask_spec.rng_seed = rng.next();
                const OccupancyMask mask =
                    generate_patch_mask(config.patch_dims, mask_spec);
                const MaskPyramid pyramid =
                    build_pyramid(mask, net_config.num_stages);
                out = forward_pretrain(net, &tape, x, &pyramid, enforcement);
                loss = l2_masked_loss(out->value, batch.images, mask,
                                      config.l2_masked_only);
            } else {
                out = forward(net, &tape, x);
                loss = dice_ce_loss(out->value, batch.labels,
                                    net_config.num_classes);
            }
            if (!std::isfinite(loss.value)) {
                write_diagnostic("non-finite loss at step " +
                                 std::to_string(step));
                throw TrainingError("run_stage: non-finite loss");
            }
            out->ensure_grad();
            accumulate(out->grad, loss.grad);
            tape.backward();
            try {
                adamw_step(net.params, opt, lr, config.betas, config.adam_eps,
                           config.weight_decay);
            } catch (const TrainingError&) {
                write_diagnostic("non-finite gradient at step " +
                                 std::to_string(step));
                throw;
            }
            loss_sum += loss.value;
        }
        const auto epoch_end = std::chrono::steady_clock::now();
        EpochLog entry;
        entry.epoch = epoch;
        entry.step = step;
        entry.lr = lr;
        entry.loss = loss_sum / config.steps_per_epoch;
        entry.wall_ms =
            config.deterministic
                ? 0
                : std::chrono::duration_cast<std::chrono::milliseconds>(
                      epoch_end - epoch_start)
                      .count();
        result.log.push_back(entry);
        if (log_file) {
            nlohmann::ordered_json line{{"epoch", entry.epoch},
                                        {"step", entry.step},
                                        {"lr", entry.lr},
                                        {"loss", entry.loss},
                                        {"wall_ms", entry.wall_ms}};
            log_file << line.dump() << "\n";
        }
    }

    result.checkpoint = checkpoint_from(net, config.stage);
    result.checkpoint.extra["train_config"] = train_config_to_json(config);
    if (!config.out_checkpoint.empty())
        save_checkpoint(result.checkpoint, config.out_checkpoint);
    return result;
}

}  // namespace gbt
