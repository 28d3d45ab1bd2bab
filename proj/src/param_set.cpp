#include "pmeta/param_set.hpp"

namespace pmeta {

ad::Tensor hvp(const ParamLossFn& loss_fn, const ParamSet& params, const ad::Tensor& v) {
    if (v.numel() != params.flat_size())
        throw ShapeError("hvp: vector length " + std::to_string(v.numel()) +
                         " != parameter count " + std::to_string(params.flat_size()));

    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/true);
    ad::Var loss = loss_fn(tape, pv);
    ad::GradientMap grads = tape.backward(loss, /*create_graph=*/true);

    // s = sum_p <grad_p, v_p>; backward of s yields H·v.
    ad::Var dot_sum{};
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!grads.contains(pv.vars[i])) continue;
        const ParamEntry& e = params.entry(i);
        ad::Tensor vp(e.value.shape());
        for (std::size_t k = 0; k < vp.numel(); ++k) vp[k] = v[params.offset(i) + k];
        ad::Var term = ad::dot(grads.graph_at(pv.vars[i]), tape.constant(std::move(vp)));
        dot_sum = dot_sum.valid() ? ad::add(dot_sum, term) : term;
    }

    ad::Tensor result({params.flat_size()});
    if (!dot_sum.valid()) return result;  // loss reaches no parameter: H == 0

    ad::GradientMap second = tape.backward(dot_sum, /*create_graph=*/false);
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ad::Tensor g = second.at_or_zeros(pv.vars[i]);
        for (std::size_t k = 0; k < g.numel(); ++k) result[params.offset(i) + k] = g[k];
    }
    return result;
}

ad::Tensor flat_gradient(const ParamLossFn& loss_fn, const ParamSet& params) {
    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/true);
    ad::Var loss = loss_fn(tape, pv);
    ad::GradientMap grads = tape.backward(loss, /*create_graph=*/false);
    ad::Tensor result({params.flat_size()});
    for (std::size_t i = 0; i < params.size(); ++i) {
        const ad::Tensor g = grads.at_or_zeros(pv.vars[i]);
        for (std::size_t k = 0; k < g.numel(); ++k) result[params.offset(i) + k] = g[k];
    }
    return result;
}

}  // namespace pmeta
