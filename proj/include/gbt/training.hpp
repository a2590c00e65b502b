#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gbt/network.hpp"
#include "gbt/phantom.hpp"
#include "gbt/sparse.hpp"
#include "gbt/tensor.hpp"
#include "gbt/volume.hpp"

namespace gbt {

struct TrainConfig {
    std::string stage = "pretrain";  // pretrain | supervised | task
    std::array<int, 3> patch_dims{32, 32, 32};
    int batch_size = 4;
    int epochs = 50;
    int steps_per_epoch = 4;
    double lr_max = 1e-4;
    double lr_min = 0.0;
    double weight_decay = 0.01;
    std::array<double, 2> betas{0.9, 0.999};
    double adam_eps = 1e-8;
    bool grad_check_mode = false;  // keeps every tensor in 64-bit checks
    std::uint64_t seed = 0;
    std::string cohort;            // cohort.json path
    std::string init_checkpoint;   // empty = fresh initialization
    std::string out_checkpoint;    // empty = do not write
    std::string log_path;          // empty = do not write
    MaskSpec mask{{8, 8, 8}, 0.6, 0};
    std::string mask_enforcement = "per_stage";
    double target_spacing = 1.5;
    std::array<bool, 3> flip_axes{true, true, true};
    bool l2_masked_only = true;
    NetworkConfig network = toy_config();
    bool deterministic = true;
    int threads = 1;

    void validate() const;
};

/// Desk-scale presets sized for single-machine runs; the full-scale
/// presets mirror the published regime and are not used by the test suite.
TrainConfig desk_pretrain_config();
TrainConfig desk_finetune_config(const std::string& stage);
TrainConfig paper_pretrain_config();
TrainConfig paper_finetune_config(const std::string& stage);

nlohmann::ordered_json train_config_to_json(const TrainConfig& config);
TrainConfig train_config_from_json(const nlohmann::ordered_json& j);

class TrainingError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Schedule and optimizer
// ---------------------------------------------------------------------------

/// lr(t) = lr_min + 0.5 (lr_max - lr_min)(1 + cos(pi t / T)).
double cosine_lr(std::int64_t t, std::int64_t total, double lr_max,
                 double lr_min);

struct AdamWState {
    std::vector<Tensor5> m;
    std::vector<Tensor5> v;
    std::int64_t t = 0;
};

/// Decoupled-decay AdamW over the parameter list; gradients are read from
/// each Var's grad. Throws TrainingError on non-finite gradients.
void adamw_step(std::span<const VarPtr> params, AdamWState& state, double lr,
                std::array<double, 2> betas, double eps, double weight_decay);

// ---------------------------------------------------------------------------
// Losses
// ---------------------------------------------------------------------------

struct LossResult {
    double value = 0.0;
    Tensor5 grad;  // d(loss)/d(network output)
};

/// Mean squared error over the masked (inactive) voxels only; gradient is
/// exactly zero at active voxels. With masked_only = false the mean runs
/// over the whole volume.
LossResult l2_masked_loss(const Tensor5& recon, const Tensor5& target,
                          const OccupancyMask& mask, bool masked_only = true);

/// Equal-weight soft-dice (foreground classes, smoothing 1e-5) plus voxel
/// cross-entropy. Labels are one value per (batch, voxel), width fastest.
LossResult dice_ce_loss(const Tensor5& logits,
                        std::span<const std::uint8_t> labels, int num_classes);

// ---------------------------------------------------------------------------
// Cohort plumbing and stage runner
// ---------------------------------------------------------------------------

struct TrainingCase {
    VoxelGrid image;   // resampled + z-normalized
    LabelMap labels;   // resampled (nearest)
    std::string id;
};

std::vector<TrainingCase> load_cohort_cases(const std::filesystem::path& manifest,
                                            double target_spacing);

/// Argmax segmentation of a whole preprocessed volume.
LabelMap segment_volume(const GynBTNet& net, const VoxelGrid& image);

struct EpochLog {
    int epoch = 0;
    std::int64_t step = 0;
    double lr = 0.0;
    double loss = 0.0;
    std::int64_t wall_ms = 0;
};

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
};

/// Runs one training stage: per step, sample patches via augment, generate
/// masks (pretrain only), forward, loss, backward, AdamW with a cosine
/// schedule over the total step count. Deterministic given the seed.
TrainResult run_stage(const TrainConfig& config, const Checkpoint* init);

}  // namespace gbt
