#include "gbt/tape.hpp"

namespace gbt {

namespace {

bool wants_grad(const VarPtr& v) { return v && v->requires_grad; }

}  // namespace

VarPtr op_conv3d(Tape* tape, const VarPtr& x, const VarPtr& w, const VarPtr& b,
                 ConvSpec spec) {
    static const Tensor5 kNoBias;
    auto y = make_var(conv3d(x->value, w->value, b ? b->value : kNoBias, spec));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, w, b, spec, y] {
        if (y->grad.size() == 0) return;
        ConvGrads g = conv3d_backward(x->value, w->value, spec, y->grad);
        if (wants_grad(x)) x->add_grad(g.x);
        if (wants_grad(w)) w->add_grad(g.w);
        if (wants_grad(b)) b->add_grad(g.bias);
    });
    return y;
}

VarPtr op_instance_norm(Tape* tape, const VarPtr& x, const VarPtr& gamma,
                        const VarPtr& beta, double eps) {
    auto y = make_var(instance_norm(x->value, gamma->value, beta->value, eps));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, gamma, beta, eps, y] {
        if (y->grad.size() == 0) return;
        NormGrads g = instance_norm_backward(x->value, gamma->value, eps, y->grad);
        if (wants_grad(x)) x->add_grad(g.x);
        if (wants_grad(gamma)) gamma->add_grad(g.gamma);
        if (wants_grad(beta)) beta->add_grad(g.beta);
    });
    return y;
}

VarPtr op_batch_norm(Tape* tape, const VarPtr& x, const VarPtr& gamma,
                     const VarPtr& beta, double eps) {
    auto y = make_var(batch_norm(x->value, gamma->value, beta->value, eps));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, gamma, beta, eps, y] {
        if (y->grad.size() == 0) return;
        NormGrads g = batch_norm_backward(x->value, gamma->value, eps, y->grad);
        if (wants_grad(x)) x->add_grad(g.x);
        if (wants_grad(gamma)) gamma->add_grad(g.gamma);
        if (wants_grad(beta)) beta->add_grad(g.beta);
    });
    return y;
}

VarPtr op_leaky_relu(Tape* tape, const VarPtr& x, double slope) {
    auto y = make_var(leaky_relu(x->value, slope));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, slope, y] {
        if (y->grad.size() == 0) return;
        if (wants_grad(x))
            x->add_grad(leaky_relu_backward(x->value, slope, y->grad));
    });
    return y;
}

VarPtr op_add(Tape* tape, const VarPtr& a, const VarPtr& b) {
    auto y = make_var(add(a->value, b->value));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([a, b, y] {
        if (y->grad.size() == 0) return;
        if (wants_grad(a)) a->add_grad(y->grad);
        if (wants_grad(b)) b->add_grad(y->grad);
    });
    return y;
}

VarPtr op_upsample_nearest2(Tape* tape, const VarPtr& x) {
    auto y = make_var(upsample_nearest2(x->value));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, y] {
        if (y->grad.size() == 0) return;
        if (wants_grad(x))
            x->add_grad(upsample_nearest2_backward(x->value.shape, y->grad));
    });
    return y;
}

VarPtr op_concat_channels(Tape* tape, const VarPtr& a, const VarPtr& b) {
    auto y = make_var(concat_channels(a->value, b->value));
    if (!tape) return y;
    y->requires_grad = true;
    const int ca = a->value.shape[1];
    tape->record([a, b, ca, y] {
        if (y->grad.size() == 0) return;
        auto [ga, gb] = concat_channels_split(ca, y->grad);
        if (wants_grad(a)) a->add_grad(ga);
        if (wants_grad(b)) b->add_grad(gb);
    });
    return y;
}

VarPtr op_sparse_conv3d(Tape* tape, const VarPtr& x, const MaskPtr& mask_in,
                        const MaskPtr& mask_out, const VarPtr& w,
                        const VarPtr& b, ConvSpec spec,
                        std::uint64_t* mac_counter) {
    static const Tensor5 kNoBias;
    auto y = make_var(sparse_conv3d(x->value, *mask_in, *mask_out, w->value,
                                    b ? b->value : kNoBias, spec, mac_counter));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, mask_in, mask_out, w, b, spec, y] {
        if (y->grad.size() == 0) return;
        ConvGrads g = sparse_conv3d_backward(x->value, *mask_in, *mask_out,
                                             w->value, spec, y->grad);
        if (wants_grad(x)) x->add_grad(g.x);
        if (wants_grad(w)) w->add_grad(g.w);
        if (wants_grad(b)) b->add_grad(g.bias);
    });
    return y;
}

VarPtr op_sparse_batch_norm(Tape* tape, const VarPtr& x, const MaskPtr& mask,
                            const VarPtr& gamma, const VarPtr& beta,
                            double eps) {
    auto y = make_var(
        sparse_batch_norm(x->value, *mask, gamma->value, beta->value, eps));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, mask, gamma, beta, eps, y] {
        if (y->grad.size() == 0) return;
        NormGrads g = sparse_batch_norm_backward(x->value, *mask, gamma->value,
                                                 eps, y->grad);
        if (wants_grad(x)) x->add_grad(g.x);
        if (wants_grad(gamma)) gamma->add_grad(g.gamma);
        if (wants_grad(beta)) beta->add_grad(g.beta);
    });
    return y;
}

VarPtr op_apply_mask(Tape* tape, const VarPtr& x, const MaskPtr& mask) {
    auto y = make_var(apply_mask(x->value, *mask));
    if (!tape) return y;
    y->requires_grad = true;
    tape->record([x, mask, y] {
        if (y->grad.size() == 0) return;
        if (wants_grad(x)) x->add_grad(apply_mask_backward(*mask, y->grad));
    });
    return y;
}

}  // namespace gbt
