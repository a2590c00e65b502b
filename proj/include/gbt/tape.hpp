#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "gbt/kernels.hpp"
#include "gbt/sparse.hpp"
#include "gbt/tensor.hpp"

namespace gbt {

/// A tensor node in the computation graph. grad is allocated lazily on the
/// first backward deposit.
struct Var {
    Tensor5 value;
    Tensor5 grad;
    bool requires_grad = false;

    void ensure_grad() {
        if (grad.shape != value.shape) {
            grad.shape = value.shape;
            grad.data.assign(value.data.size(), 0.0);
        }
    }
    void zero_grad() {
        grad.shape = value.shape;
        grad.data.assign(value.data.size(), 0.0);
    }
    void add_grad(const Tensor5& g) {
        ensure_grad();
        accumulate(grad, g);
    }
};

using VarPtr = std::shared_ptr<Var>;

inline VarPtr make_var(Tensor5 value, bool requires_grad = false) {
    auto v = std::make_shared<Var>();
    v->value = std::move(value);
    v->requires_grad = requires_grad;
    return v;
}

/// Ordered record of executed ops. Each forward wrapper that runs under a
/// tape appends one closure; backward() replays them in exact reverse
/// execution order. A null Tape* in the op wrappers means pure inference.
class Tape {
public:
    void record(std::function<void()> step) { steps_.push_back(std::move(step)); }

    void backward() {
        for (auto it = steps_.rbegin(); it != steps_.rend(); ++it) (*it)();
    }

    std::size_t size() const { return steps_.size(); }
    void clear() { steps_.clear(); }

private:
    std::vector<std::function<void()>> steps_;
};

// Op wrappers. Parameter grads accumulate into the parameter Vars; input
// grads propagate to the producing nodes.

VarPtr op_conv3d(Tape* tape, const VarPtr& x, const VarPtr& w, const VarPtr& b,
                 ConvSpec spec);
VarPtr op_instance_norm(Tape* tape, const VarPtr& x, const VarPtr& gamma,
                        const VarPtr& beta, double eps);
VarPtr op_batch_norm(Tape* tape, const VarPtr& x, const VarPtr& gamma,
                     const VarPtr& beta, double eps);
VarPtr op_leaky_relu(Tape* tape, const VarPtr& x, double slope);
VarPtr op_add(Tape* tape, const VarPtr& a, const VarPtr& b);
VarPtr op_upsample_nearest2(Tape* tape, const VarPtr& x);
VarPtr op_concat_channels(Tape* tape, const VarPtr& a, const VarPtr& b);

using MaskPtr = std::shared_ptr<const OccupancyMask>;

VarPtr op_sparse_conv3d(Tape* tape, const VarPtr& x, const MaskPtr& mask_in,
                        const MaskPtr& mask_out, const VarPtr& w,
                        const VarPtr& b, ConvSpec spec,
                        std::uint64_t* mac_counter = nullptr);
VarPtr op_sparse_batch_norm(Tape* tape, const VarPtr& x, const MaskPtr& mask,
                            const VarPtr& gamma, const VarPtr& beta,
                            double eps);
VarPtr op_apply_mask(Tape* tape, const VarPtr& x, const MaskPtr& mask);

}  // namespace gbt
