#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gbt/sparse.hpp"
#include "gbt/tape.hpp"
#include "gbt/tensor.hpp"

namespace gbt {

enum class NetMode { segmentation, reconstruction };
enum class NormKind { instance, sparse_batch };
enum class MaskEnforcement { per_stage, bottleneck_only };

struct NetworkConfig {
    int num_stages = 4;
    int blocks_per_stage = 2;
    int base_channels = 8;
    int max_channels = 1024;
    int in_channels = 1;
    int num_classes = 6;
    NetMode mode = NetMode::segmentation;
    NormKind norm_kind = NormKind::instance;
    double leaky_slope = 0.01;
    double norm_eps = 1e-5;

    int channels_at(int stage) const {
        std::int64_t c = static_cast<std::int64_t>(base_channels) << stage;
        return static_cast<int>(std::min<std::int64_t>(c, max_channels));
    }
    int head_channels() const {
        return mode == NetMode::segmentation ? num_classes : in_channels;
    }
    void validate() const;
};

/// Full-scale configuration: six resolution stages with the channel ladder
/// 64,128,256,512,1024 capped at 1024, depth 2 — roughly 440M parameters.
NetworkConfig paper_config();

/// Desk-scale configuration: four stages from 8 channels.
NetworkConfig toy_config();

struct ParamInfo {
    std::string name;
    std::array<int, 5> shape;
    std::int64_t size() const {
        return static_cast<std::int64_t>(shape[0]) * shape[1] * shape[2] *
               shape[3] * shape[4];
    }
};

/// The complete ordered parameter directory implied by a config.
std::vector<ParamInfo> describe_parameters(const NetworkConfig& config);

std::int64_t count_parameters(const NetworkConfig& config);

// ---------------------------------------------------------------------------

class GynBTNet {
public:
    NetworkConfig config;
    std::vector<std::string> param_names;
    std::vector<VarPtr> params;

    VarPtr param(const std::string& name) const;
    bool has_param(const std::string& name) const;
    void zero_grads();

private:
    friend GynBTNet build(const NetworkConfig&, std::uint64_t);
    friend GynBTNet net_from_tensors(
        const NetworkConfig&,
        const std::vector<std::pair<std::string, Tensor5>>&);
    std::unordered_map<std::string, int> index_;
};

/// Deterministic He-style initialization: conv weights ~ N(0, sqrt(2/fan_in)),
/// biases 0, norm gamma 1 / beta 0. Same seed gives bitwise-identical nets.
GynBTNet build(const NetworkConfig& config, std::uint64_t init_seed);

std::int64_t count_parameters(const GynBTNet& net);

struct EncoderTrace {
    std::vector<Tensor5> stage_outputs;  // one per stage, bottleneck last
};

/// Dense forward. Input spatial dims must be divisible by 2^(num_stages-1).
VarPtr forward(const GynBTNet& net, Tape* tape, const VarPtr& x);
Tensor5 forward(const GynBTNet& net, const Tensor5& x);

/// Masked-image-modeling forward: sparse submanifold encoder driven by the
/// mask pyramid, dense decoder so masked regions can be predicted. With
/// masks == nullptr every op runs its dense counterpart (vacuous mask).
VarPtr forward_pretrain(const GynBTNet& net, Tape* tape, const VarPtr& x,
                        const MaskPyramid* masks,
                        MaskEnforcement enforcement = MaskEnforcement::per_stage,
                        EncoderTrace* trace = nullptr,
                        std::uint64_t* mac_counter = nullptr);

/// Encoder-only sparse forward used by the compute-proportionality bench.
Tensor5 encoder_forward_sparse(const GynBTNet& net, const Tensor5& x,
                               const MaskPyramid* masks,
                               std::uint64_t* mac_counter);
std::int64_t encoder_dense_macs(const NetworkConfig& config,
                                const std::array<int, 3>& input_dims);

// ---------------------------------------------------------------------------
// Checkpoints: 8-byte magic "GBTCKPT1", u32 LE length-prefixed JSON header
// (config, stage tag, tensor directory), then raw little-endian f32 payloads.
// ---------------------------------------------------------------------------

enum class CheckpointErrorKind {
    bad_magic,
    version_mismatch,
    bad_header,
    truncated_payload,
    shape_mismatch,
    stage_mismatch,
    io_failure,
};

class CheckpointError : public std::runtime_error {
public:
    CheckpointError(CheckpointErrorKind kind, const std::string& msg)
        : std::runtime_error(msg), kind(kind) {}
    CheckpointErrorKind kind;
};

struct Checkpoint {
    int format_version = 1;
    NetworkConfig config;
    std::string stage;  // "pretrain" | "supervised" | "task"
    std::vector<std::pair<std::string, Tensor5>> tensors;
    nlohmann::ordered_json extra = nlohmann::ordered_json::object();
};

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes);
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

Checkpoint checkpoint_from(const GynBTNet& net, const std::string& stage);

/// Rebuilds a network directly from checkpoint tensors (no fresh init).
GynBTNet net_from_checkpoint(const Checkpoint& ckpt);

/// Copies stem + encoder weights from a pretrained checkpoint into a freshly
/// initialized target network; decoder and head keep the fresh init.
GynBTNet transfer_encoder(const Checkpoint& pretrained,
                          const NetworkConfig& target_config,
                          std::uint64_t init_seed);

/// Positional sparse-to-dense parameter carry-over: conv weights/biases and
/// norm affines verbatim, masks discarded. Layer count or shape mismatch
/// between source and target raises shape_mismatch.
GynBTNet densify(const Checkpoint& sparse_ckpt,
                 const NetworkConfig& dense_target);

nlohmann::ordered_json config_to_json(const NetworkConfig& config);
NetworkConfig config_from_json(const nlohmann::ordered_json& j);

const char* to_string(NetMode mode);
const char* to_string(NormKind kind);

}  // namespace gbt
