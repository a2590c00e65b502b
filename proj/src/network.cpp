#include "gbt/network.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "gbt/rng.hpp"

namespace gbt {

void NetworkConfig::validate() const {
    if (num_stages < 2)
        throw std::invalid_argument("network: num_stages must be >= 2");
    if (blocks_per_stage < 1)
        throw std::invalid_argument("network: blocks_per_stage must be >= 1");
    if (base_channels < 1 || max_channels < base_channels)
        throw std::invalid_argument("network: bad channel configuration");
    if (in_channels < 1 || num_classes < 2)
        throw std::invalid_argument("network: bad head configuration");
    if (!(leaky_slope > 0.0 && leaky_slope < 1.0))
        throw std::invalid_argument("network: leaky_slope must be in (0,1)");
}

NetworkConfig paper_config() {
    NetworkConfig c;
    c.num_stages = 6;
    c.blocks_per_stage = 2;
    c.base_channels = 64;
    c.max_channels = 1024;
    c.in_channels = 1;
    c.num_classes = 6;
    return c;
}

NetworkConfig toy_config() {
    NetworkConfig c;
    c.num_stages = 4;
    c.blocks_per_stage = 2;
    c.base_channels = 8;
    c.max_channels = 1024;
    c.in_channels = 1;
    c.num_classes = 6;
    return c;
}

namespace {

struct BlockShape {
    int in_ch;
    int out_ch;
    int stride;
    bool shortcut;
};

BlockShape encoder_block_shape(const NetworkConfig& c, int stage, int block) {
    BlockShape b;
    b.out_ch = c.channels_at(stage);
    b.in_ch = block > 0 ? b.out_ch
              : stage == 0 ? c.channels_at(0)
                           : c.channels_at(stage - 1);
    b.stride = (block == 0 && stage > 0) ? 2 : 1;
    b.shortcut = b.in_ch != b.out_ch || b.stride != 1;
    return b;
}

BlockShape decoder_block_shape(const NetworkConfig& c, int stage, int block) {
    BlockShape b;
    b.out_ch = c.channels_at(stage);
    b.in_ch = block == 0 ? 2 * b.out_ch : b.out_ch;
    b.stride = 1;
    b.shortcut = block == 0;
    return b;
}

void push_conv(std::vector<ParamInfo>& out, const std::string& prefix, int co,
               int ci, int k) {
    out.push_back({prefix + ".w", {co, ci, k, k, k}});
    out.push_back({prefix + ".b", {co, 1, 1, 1, 1}});
}

void push_norm(std::vector<ParamInfo>& out, const std::string& prefix, int c) {
    out.push_back({prefix + ".gamma", {1, c, 1, 1, 1}});
    out.push_back({prefix + ".beta", {1, c, 1, 1, 1}});
}

void push_block(std::vector<ParamInfo>& out, const std::string& prefix,
                const BlockShape& b) {
    push_conv(out, prefix + ".conv1", b.out_ch, b.in_ch, 3);
    push_norm(out, prefix + ".norm1", b.out_ch);
    push_conv(out, prefix + ".conv2", b.out_ch, b.out_ch, 3);
    push_norm(out, prefix + ".norm2", b.out_ch);
    if (b.shortcut) push_conv(out, prefix + ".shortcut", b.out_ch, b.in_ch, 1);
}

}  // namespace

std::vector<ParamInfo> describe_parameters(const NetworkConfig& c) {
    c.validate();
    std::vector<ParamInfo> out;
    push_conv(out, "stem.conv", c.channels_at(0), c.in_channels, 3);
    push_norm(out, "stem.norm", c.channels_at(0));
    for (int s = 0; s < c.num_stages; ++s)
        for (int b = 0; b < c.blocks_per_stage; ++b)
            push_block(out, "enc" + std::to_string(s) + ".block" + std::to_string(b),
                       encoder_block_shape(c, s, b));
    for (int s = c.num_stages - 2; s >= 0; --s) {
        push_conv(out, "dec" + std::to_string(s) + ".up", c.channels_at(s),
                  c.channels_at(s + 1), 1);
        for (int b = 0; b < c.blocks_per_stage; ++b)
            push_block(out, "dec" + std::to_string(s) + ".block" + std::to_string(b),
                       decoder_block_shape(c, s, b));
    }
    push_conv(out, "head", c.head_channels(), c.channels_at(0), 1);
    return out;
}

std::int64_t count_parameters(const NetworkConfig& config) {
    std::int64_t total = 0;
    for (const auto& p : describe_parameters(config)) total += p.size();
    return total;
}

// ---------------------------------------------------------------------------

VarPtr GynBTNet::param(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::invalid_argument("network: no parameter named " + name);
    return params[static_cast<std::size_t>(it->second)];
}

bool GynBTNet::has_param(const std::string& name) const {
    return index_.count(name) != 0;
}

void GynBTNet::zero_grads() {
    for (auto& p : params) p->zero_grad();
}

GynBTNet build(const NetworkConfig& config, std::uint64_t init_seed) {
    config.validate();
    GynBTNet net;
    net.config = config;
    Rng rng(init_seed);
    for (const auto& info : describe_parameters(config)) {
        Tensor5 t(info.shape[0], info.shape[1], info.shape[2], info.shape[3],
                  info.shape[4]);
        if (info.name.ends_with(".w")) {
            const double fan_in = static_cast<double>(info.shape[1]) *
                                  info.shape[2] * info.shape[3] * info.shape[4];
            const double sd = std::sqrt(2.0 / fan_in);
            for (auto& v : t.data) v = rng.normal() * sd;
        } else if (info.name.ends_with(".gamma")) {
            std::fill(t.data.begin(), t.data.end(), 1.0);
        }
        // biases and betas stay zero
        net.index_[info.name] = static_cast<int>(net.params.size());
        net.param_names.push_back(info.name);
        net.params.push_back(make_var(std::move(t), true));
    }
    return net;
}

GynBTNet net_from_tensors(
    const NetworkConfig& config,
    const std::vector<std::pair<std::string, Tensor5>>& tensors) {
    const auto expected = describe_parameters(config);
    if (expected.size() != tensors.size())
        throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                              "checkpoint: layer count mismatch (" +
                                  std::to_string(tensors.size()) + " vs " +
                                  std::to_string(expected.size()) + ")");
    GynBTNet net;
    net.config = config;
    for (std::size_t i = 0; i < expected.size(); ++i) {
        if (tensors[i].second.shape != expected[i].shape)
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "checkpoint: shape mismatch at " +
                                      expected[i].name);
        net.index_[expected[i].name] = static_cast<int>(i);
        net.param_names.push_back(expected[i].name);
        net.params.push_back(make_var(tensors[i].second, true));
    }
    return net;
}

std::int64_t count_parameters(const GynBTNet& net) {
    std::int64_t total = 0;
    for (const auto& p : net.params) total += p->value.size();
    return total;
}

// ---------------------------------------------------------------------------

namespace {

struct FwdCtx {
    const GynBTNet* net;
    Tape* tape;
    std::vector<MaskPtr> levels;  // empty → dense everywhere
    std::uint64_t* macs = nullptr;
};

VarPtr conv_layer(FwdCtx& ctx, const VarPtr& x, const std::string& prefix,
                  ConvSpec spec, const MaskPtr& mask_in,
                  const MaskPtr& mask_out) {
    const VarPtr w = ctx.net->param(prefix + ".w");
    const VarPtr b = ctx.net->param(prefix + ".b");
    if (mask_in && mask_out)
        return op_sparse_conv3d(ctx.tape, x, mask_in, mask_out, w, b, spec,
                                ctx.macs);
    return op_conv3d(ctx.tape, x, w, b, spec);
}

VarPtr norm_layer(FwdCtx& ctx, const VarPtr& x, const std::string& prefix,
                  const MaskPtr& mask) {
    const VarPtr gamma = ctx.net->param(prefix + ".gamma");
    const VarPtr beta = ctx.net->param(prefix + ".beta");
    const double eps = ctx.net->config.norm_eps;
    if (ctx.net->config.norm_kind == NormKind::instance)
        return op_instance_norm(ctx.tape, x, gamma, beta, eps);
    if (mask) return op_sparse_batch_norm(ctx.tape, x, mask, gamma, beta, eps);
    return op_batch_norm(ctx.tape, x, gamma, beta, eps);
}

VarPtr act(FwdCtx& ctx, const VarPtr& x) {
    return op_leaky_relu(ctx.tape, x, ctx.net->config.leaky_slope);
}

// conv-norm-act, conv-norm, add shortcut, act
VarPtr residual_block(FwdCtx& ctx, const VarPtr& x, const std::string& prefix,
                      const BlockShape& shape, const MaskPtr& mask_in,
                      const MaskPtr& mask_out) {
    VarPtr h = conv_layer(ctx, x, prefix + ".conv1", ConvSpec{3, shape.stride},
                          mask_in, mask_out);
    h = norm_layer(ctx, h, prefix + ".norm1", mask_out);
    h = act(ctx, h);
    h = conv_layer(ctx, h, prefix + ".conv2", ConvSpec{3, 1}, mask_out, mask_out);
    h = norm_layer(ctx, h, prefix + ".norm2", mask_out);
    VarPtr skip = x;
    if (shape.shortcut)
        skip = conv_layer(ctx, x, prefix + ".shortcut",
                          ConvSpec{1, shape.stride}, mask_in, mask_out);
    return act(ctx, op_add(ctx.tape, h, skip));
}

void check_forward_input(const NetworkConfig& c, const Tensor5& x) {
    if (x.shape[1] != c.in_channels)
        throw std::invalid_argument("forward: input channel mismatch");
    const int divisor = 1 << (c.num_stages - 1);
    for (int a = 2; a < 5; ++a)
        if (x.shape[a] % divisor != 0)
            throw std::invalid_argument(
                "forward: spatial dims must be divisible by " +
                std::to_string(divisor));
}

// Encoder pass; fills skips with each stage output (bottleneck last).
VarPtr run_encoder(FwdCtx& ctx, VarPtr x, std::vector<VarPtr>& skips) {
    const NetworkConfig& c = ctx.net->config;
    const bool sparse = !ctx.levels.empty();
    const MaskPtr none;
    x = conv_layer(ctx, x, "stem.conv", ConvSpec{3, 1},
                   sparse ? ctx.levels[0] : none, sparse ? ctx.levels[0] : none);
    x = norm_layer(ctx, x, "stem.norm", sparse ? ctx.levels[0] : none);
    x = act(ctx, x);
    for (int s = 0; s < c.num_stages; ++s) {
        for (int b = 0; b < c.blocks_per_stage; ++b) {
            const BlockShape shape = encoder_block_shape(c, s, b);
            MaskPtr min, mout;
            if (sparse) {
                min = shape.stride == 2 ? ctx.levels[static_cast<std::size_t>(s - 1)]
                                        : ctx.levels[static_cast<std::size_t>(s)];
                mout = ctx.levels[static_cast<std::size_t>(s)];
            }
            x = residual_block(
                ctx, x, "enc" + std::to_string(s) + ".block" + std::to_string(b),
                shape, min, mout);
        }
        skips.push_back(x);
    }
    return x;
}

VarPtr run_decoder(FwdCtx& ctx, VarPtr x, const std::vector<VarPtr>& skips) {
    const NetworkConfig& c = ctx.net->config;
    const MaskPtr none;
    for (int s = c.num_stages - 2; s >= 0; --s) {
        const std::string dec = "dec" + std::to_string(s);
        VarPtr up = op_upsample_nearest2(ctx.tape, x);
        VarPtr refined = conv_layer(ctx, up, dec + ".up", ConvSpec{1, 1}, none, none);
        x = op_concat_channels(ctx.tape, refined,
                               skips[static_cast<std::size_t>(s)]);
        for (int b = 0; b < c.blocks_per_stage; ++b)
            x = residual_block(ctx, x, dec + ".block" + std::to_string(b),
                               decoder_block_shape(c, s, b), none, none);
    }
    return conv_layer(ctx, x, "head", ConvSpec{1, 1}, none, none);
}

std::vector<MaskPtr> share_levels(const MaskPyramid& pyr, int num_stages) {
    if (static_cast<int>(pyr.levels.size()) < num_stages)
        throw std::invalid_argument(
            "forward_pretrain: mask pyramid depth does not match stages");
    std::vector<MaskPtr> out;
    out.reserve(static_cast<std::size_t>(num_stages));
    for (int l = 0; l < num_stages; ++l)
        out.push_back(std::make_shared<OccupancyMask>(
            pyr.levels[static_cast<std::size_t>(l)]));
    return out;
}

}  // namespace

VarPtr forward(const GynBTNet& net, Tape* tape, const VarPtr& x) {
    check_forward_input(net.config, x->value);
    FwdCtx ctx{&net, tape, {}, nullptr};
    std::vector<VarPtr> skips;
    VarPtr bottom = run_encoder(ctx, x, skips);
    return run_decoder(ctx, bottom, skips);
}

Tensor5 forward(const GynBTNet& net, const Tensor5& x) {
    return forward(net, nullptr, make_var(x))->value;
}

VarPtr forward_pretrain(const GynBTNet& net, Tape* tape, const VarPtr& x,
                        const MaskPyramid* masks, MaskEnforcement enforcement,
                        EncoderTrace* trace, std::uint64_t* mac_counter) {
    if (net.config.mode != NetMode::reconstruction)
        throw std::invalid_argument(
            "forward_pretrain: network is not in reconstruction mode");
    check_forward_input(net.config, x->value);

    FwdCtx ctx{&net, tape, {}, mac_counter};
    MaskPtr bottleneck_mask;
    if (masks) {
        auto levels = share_levels(*masks, net.config.num_stages);
        if (levels[0]->dims !=
            std::array<int, 3>{x->value.shape[2], x->value.shape[3],
                               x->value.shape[4]})
            throw std::invalid_argument(
                "forward_pretrain: level-0 mask does not match input dims");
        if (enforcement == MaskEnforcement::per_stage)
            ctx.levels = std::move(levels);
        else
            bottleneck_mask = levels.back();
    }

    std::vector<VarPtr> skips;
    VarPtr bottom = run_encoder(ctx, x, skips);
    if (bottleneck_mask)
        bottom = op_apply_mask(ctx.tape, bottom, bottleneck_mask);
    if (trace) {
        trace->stage_outputs.clear();
        for (const auto& s : skips) trace->stage_outputs.push_back(s->value);
    }
    // Decoder runs dense over all voxels so masked regions can be predicted.
    ctx.levels.clear();
    ctx.macs = nullptr;
    return run_decoder(ctx, bottom, skips);
}

Tensor5 encoder_forward_sparse(const GynBTNet& net, const Tensor5& x,
                               const MaskPyramid* masks,
                               std::uint64_t* mac_counter) {
    check_forward_input(net.config, x);
    FwdCtx ctx{&net, nullptr, {}, mac_counter};
    if (masks) ctx.levels = share_levels(*masks, net.config.num_stages);
    std::vector<VarPtr> skips;
    return run_encoder(ctx, make_var(x), skips)->value;
}

std::int64_t encoder_dense_macs(const NetworkConfig& c,
                                const std::array<int, 3>& input_dims) {
    c.validate();
    auto volume = [](const std::array<int, 3>& d) {
        return static_cast<std::int64_t>(d[0]) * d[1] * d[2];
    };
    std::array<int, 3> dims = input_dims;
    std::int64_t macs = 27LL * c.in_channels * c.channels_at(0) * volume(dims);
    for (int s = 0; s < c.num_stages; ++s) {
        std::array<int, 3> out_dims = dims;
        if (s > 0)
            for (auto& d : out_dims) d = (d + 1) / 2;
        for (int b = 0; b < c.blocks_per_stage; ++b) {
            const BlockShape shape = encoder_block_shape(c, s, b);
            macs += 27LL * shape.in_ch * shape.out_ch * volume(out_dims);
            macs += 27LL * shape.out_ch * shape.out_ch * volume(out_dims);
            if (shape.shortcut)
                macs += static_cast<std::int64_t>(shape.in_ch) * shape.out_ch *
                        volume(out_dims);
        }
        dims = out_dims;
    }
    return macs;
}

// ---------------------------------------------------------------------------

const char* to_string(NetMode mode) {
    return mode == NetMode::segmentation ? "segmentation" : "reconstruction";
}

const char* to_string(NormKind kind) {
    return kind == NormKind::instance ? "instance" : "sparse_batch";
}

nlohmann::ordered_json config_to_json(const NetworkConfig& c) {
    return nlohmann::ordered_json{
        {"num_stages", c.num_stages},
        {"blocks_per_stage", c.blocks_per_stage},
        {"base_channels", c.base_channels},
        {"max_channels", c.max_channels},
        {"in_channels", c.in_channels},
        {"num_classes", c.num_classes},
        {"mode", to_string(c.mode)},
        {"norm_kind", to_string(c.norm_kind)},
        {"leaky_slope", c.leaky_slope},
        {"norm_eps", c.norm_eps},
    };
}

NetworkConfig config_from_json(const nlohmann::ordered_json& j) {
    NetworkConfig c;
    j.at("num_stages").get_to(c.num_stages);
    j.at("blocks_per_stage").get_to(c.blocks_per_stage);
    j.at("base_channels").get_to(c.base_channels);
    j.at("max_channels").get_to(c.max_channels);
    j.at("in_channels").get_to(c.in_channels);
    j.at("num_classes").get_to(c.num_classes);
    const std::string mode = j.at("mode").get<std::string>();
    if (mode == "segmentation")
        c.mode = NetMode::segmentation;
    else if (mode == "reconstruction")
        c.mode = NetMode::reconstruction;
    else
        throw CheckpointError(CheckpointErrorKind::bad_header,
                              "checkpoint: unknown mode " + mode);
    const std::string norm = j.at("norm_kind").get<std::string>();
    if (norm == "instance")
        c.norm_kind = NormKind::instance;
    else if (norm == "sparse_batch")
        c.norm_kind = NormKind::sparse_batch;
    else
        throw CheckpointError(CheckpointErrorKind::bad_header,
                              "checkpoint: unknown norm kind " + norm);
    j.at("leaky_slope").get_to(c.leaky_slope);
    j.at("norm_eps").get_to(c.norm_eps);
    return c;
}

namespace {

constexpr char kCkptMagic[8] = {'G', 'B', 'T', 'C', 'K', 'P', 'T', '1'};

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i)
        out.push_back(static_cast<std::uint8_t>((v >> (8 * i)) & 0xff));
}

void put_f32(std::vector<std::uint8_t>& out, float v) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(out, bits);
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& ckpt) {
    nlohmann::ordered_json header;
    header["format_version"] = ckpt.format_version;
    header["stage"] = ckpt.stage;
    header["config"] = config_to_json(ckpt.config);
    header["tensors"] = nlohmann::ordered_json::array();
    std::int64_t offset = 0;
    for (const auto& [name, tensor] : ckpt.tensors) {
        header["tensors"].push_back(nlohmann::ordered_json{
            {"name", name}, {"shape", tensor.shape}, {"offset", offset}});
        offset += tensor.size() * 4;
    }
    header["extra"] = ckpt.extra;
    const std::string json = header.dump();

    std::vector<std::uint8_t> out;
    out.reserve(12 + json.size() + static_cast<std::size_t>(offset));
    out.insert(out.end(), kCkptMagic, kCkptMagic + 8);
    put_u32(out, static_cast<std::uint32_t>(json.size()));
    out.insert(out.end(), json.begin(), json.end());
    for (const auto& [name, tensor] : ckpt.tensors)
        for (double v : tensor.data) put_f32(out, static_cast<float>(v));
    return out;
}

Checkpoint decode_checkpoint(std::span<const std::uint8_t> bytes) {
    if (bytes.size() < 12 ||
        std::memcmp(bytes.data(), kCkptMagic, 8) != 0)
        throw CheckpointError(CheckpointErrorKind::bad_magic,
                              "checkpoint: bad magic");
    std::uint32_t json_len = 0;
    for (int i = 0; i < 4; ++i)
        json_len |= static_cast<std::uint32_t>(bytes[8 + static_cast<std::size_t>(i)])
                    << (8 * i);
    if (bytes.size() < 12 + static_cast<std::size_t>(json_len))
        throw CheckpointError(CheckpointErrorKind::truncated_payload,
                              "checkpoint: truncated header");
    nlohmann::ordered_json header;
    try {
        header = nlohmann::ordered_json::parse(bytes.begin() + 12,
                                               bytes.begin() + 12 + json_len);
    } catch (const nlohmann::json::exception& e) {
        throw CheckpointError(CheckpointErrorKind::bad_header,
                              std::string("checkpoint: bad header: ") + e.what());
    }

    Checkpoint ckpt;
    ckpt.format_version = header.at("format_version").get<int>();
    if (ckpt.format_version != 1)
        throw CheckpointError(CheckpointErrorKind::version_mismatch,
                              "checkpoint: unsupported format version");
    ckpt.stage = header.at("stage").get<std::string>();
    ckpt.config = config_from_json(header.at("config"));
    if (header.contains("extra")) ckpt.extra = header.at("extra");

    const std::uint8_t* payload = bytes.data() + 12 + json_len;
    const std::size_t payload_size = bytes.size() - 12 - json_len;
    for (const auto& entry : header.at("tensors")) {
        const auto name = entry.at("name").get<std::string>();
        std::array<int, 5> shape{};
        entry.at("shape").get_to(shape);
        const auto offset = entry.at("offset").get<std::int64_t>();
        Tensor5 t(shape[0], shape[1], shape[2], shape[3], shape[4]);
        const std::size_t need =
            static_cast<std::size_t>(offset) + static_cast<std::size_t>(t.size()) * 4;
        if (offset < 0 || need > payload_size)
            throw CheckpointError(CheckpointErrorKind::truncated_payload,
                                  "checkpoint: truncated payload at " + name);
        for (std::int64_t i = 0; i < t.size(); ++i) {
            std::uint32_t bits = 0;
            const std::uint8_t* p =
                payload + offset + static_cast<std::int64_t>(i) * 4;
            for (int b = 0; b < 4; ++b)
                bits |= static_cast<std::uint32_t>(p[b]) << (8 * b);
            float f;
            std::memcpy(&f, &bits, 4);
            t.data[static_cast<std::size_t>(i)] = f;
        }
        ckpt.tensors.emplace_back(name, std::move(t));
    }
    return ckpt;
}

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
    const auto bytes = encode_checkpoint(ckpt);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out)
        throw CheckpointError(CheckpointErrorKind::io_failure,
                              "checkpoint: cannot write " + path.string());
    out.write(reinterpret_cast<const char*>(bytes.data()),
              static_cast<std::streamsize>(bytes.size()));
    if (!out)
        throw CheckpointError(CheckpointErrorKind::io_failure,
                              "checkpoint: short write to " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw CheckpointError(CheckpointErrorKind::io_failure,
                              "checkpoint: cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)),
                                    std::istreambuf_iterator<char>());
    return decode_checkpoint(bytes);
}

Checkpoint checkpoint_from(const GynBTNet& net, const std::string& stage) {
    Checkpoint ckpt;
    ckpt.config = net.config;
    ckpt.stage = stage;
    for (std::size_t i = 0; i < net.params.size(); ++i)
        ckpt.tensors.emplace_back(net.param_names[i], net.params[i]->value);
    return ckpt;
}

GynBTNet net_from_checkpoint(const Checkpoint& ckpt) {
    return net_from_tensors(ckpt.config, ckpt.tensors);
}

GynBTNet transfer_encoder(const Checkpoint& pretrained,
                          const NetworkConfig& target_config,
                          std::uint64_t init_seed) {
    GynBTNet net = build(target_config, init_seed);
    std::unordered_map<std::string, const Tensor5*> source;
    for (const auto& [name, tensor] : pretrained.tensors)
        source[name] = &tensor;
    for (std::size_t i = 0; i < net.param_names.size(); ++i) {
        const std::string& name = net.param_names[i];
        if (!name.starts_with("stem.") && !name.starts_with("enc")) continue;
        auto it = source.find(name);
        if (it == source.end())
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "transfer_encoder: source lacks " + name);
        if (it->second->shape != net.params[i]->value.shape)
            throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                                  "transfer_encoder: shape mismatch at " + name);
        net.params[i]->value = *it->second;
    }
    return net;
}

GynBTNet densify(const Checkpoint& sparse_ckpt,
                 const NetworkConfig& dense_target) {
    return net_from_tensors(dense_target, sparse_ckpt.tensors);
}

}  // namespace gbt
