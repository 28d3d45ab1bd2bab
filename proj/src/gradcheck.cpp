#include "pmeta/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

namespace pmeta::gradcheck {

namespace {

ParamSet with_flat(const ParamSet& params, const ad::Tensor& flat) {
    ParamSet p = params;
    p.load_flat(flat);
    return p;
}

}  // namespace

double loss_value(const ParamLossFn& loss_fn, const ParamSet& params) {
    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/false);
    return loss_fn(tape, pv).value().item();
}

ad::Tensor fd_gradient(const ParamLossFn& loss_fn, const ParamSet& params, double step) {
    const std::size_t n = params.flat_size();
    ad::Tensor base = params.flatten();
    ad::Tensor grad({n});
    for (std::size_t i = 0; i < n; ++i) {
        ad::Tensor plus = base, minus = base;
        plus[i] += step;
        minus[i] -= step;
        grad[i] = (loss_value(loss_fn, with_flat(params, plus)) -
                   loss_value(loss_fn, with_flat(params, minus))) /
                  (2.0 * step);
    }
    return grad;
}

ad::Tensor fd_hvp(const ParamLossFn& loss_fn, const ParamSet& params, const ad::Tensor& v,
                  double step) {
    ad::Tensor base = params.flatten();
    ad::Tensor plus = base, minus = base;
    plus.add_scaled(v, step);
    minus.add_scaled(v, -step);
    ad::Tensor gp = flat_gradient(loss_fn, with_flat(params, plus));
    ad::Tensor gm = flat_gradient(loss_fn, with_flat(params, minus));
    ad::Tensor out({base.numel()});
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * step);
    return out;
}

namespace {

using Entry = std::pair<std::string, std::vector<std::size_t>>;

ParamSet make_params(Rng& rng, const std::vector<Entry>& entries, double lo = -1.0,
                     double hi = 1.0) {
    ParamSet p;
    for (const auto& [name, shape] : entries) {
        ad::Tensor t(shape);
        for (double& v : t.data()) v = rng.uniform(lo, hi);
        p.add(name, Partition::Prompt, std::move(t));
    }
    return p;
}

double check_first_order(const ParamLossFn& fn, const ParamSet& p) {
    return ad::normwise_rel_diff(flat_gradient(fn, p), fd_gradient(fn, p));
}

// Reduces an arbitrary node to a scalar with nonuniform weights so every
// component of the intermediate contributes a distinct gradient path.
ad::Var weigh(ad::Tape& tape, const ad::Var& x) {
    ad::Tensor w(x.value().shape());
    for (std::size_t i = 0; i < w.numel(); ++i) w[i] = 0.25 + 0.5 * static_cast<double>(i % 7);
    return ad::sum(ad::mul(x, tape.constant(std::move(w))));
}

struct OpCase {
    std::string name;
    std::vector<Entry> entries;
    ParamLossFn fn;
    double lo = -1.0, hi = 1.0;
};

std::vector<OpCase> primitive_cases() {
    using namespace ad;
    std::vector<OpCase> cases;

    auto a2 = Entry{"a", {3, 4}};
    auto b2 = Entry{"b", {3, 4}};

    cases.push_back({"add", {a2, b2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, add(p.at("a"), p.at("b")));
                     }});
    cases.push_back({"sub", {a2, b2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sub(p.at("a"), p.at("b")));
                     }});
    cases.push_back({"mul", {a2, b2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, mul(p.at("a"), p.at("b")));
                     }});
    cases.push_back({"div", {a2, b2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, div(p.at("a"), p.at("b")));
                     },
                     0.4, 1.6});
    cases.push_back({"add_scalar", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, add_scalar(p.at("a"), 0.7));
                     }});
    cases.push_back({"mul_scalar", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, mul_scalar(p.at("a"), -1.3));
                     }});
    cases.push_back({"sub_from", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sub_from(0.4, p.at("a")));
                     }});
    cases.push_back({"smul", {a2, Entry{"s", {1}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, smul(p.at("a"), p.at("s")));
                     }});
    cases.push_back({"matmul", {Entry{"a", {3, 4}}, Entry{"b", {4, 2}}},
                     [](Tape& t, const ParamVars& p) {
                         return weigh(t, matmul(p.at("a"), p.at("b")));
                     }});
    cases.push_back({"transpose", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, transpose(p.at("a")));
                     }});
    cases.push_back({"tanh", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, tanh(p.at("a")));
                     }});
    cases.push_back({"sigmoid", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sigmoid(p.at("a")));
                     }});
    // Sampled away from the kink so central differences are exact.
    cases.push_back({"relu", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, relu(p.at("a")));
                     },
                     0.15, 1.0});
    cases.push_back({"exp", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, exp(p.at("a")));
                     }});
    cases.push_back({"log", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, log(p.at("a")));
                     },
                     0.4, 1.8});
    cases.push_back({"sum", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sum(p.at("a")));
                     }});
    cases.push_back({"mean", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, mean(p.at("a")));
                     }});
    cases.push_back({"sum_rows", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sum_rows(p.at("a")));
                     }});
    cases.push_back({"sum_cols", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, sum_cols(p.at("a")));
                     }});
    cases.push_back({"tile_cols", {Entry{"a", {3, 1}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, tile_cols(p.at("a"), 5));
                     }});
    cases.push_back({"tile_rows", {Entry{"a", {1, 4}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, tile_rows(p.at("a"), 5));
                     }});
    cases.push_back({"index_select", {Entry{"a", {5, 3}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, index_select(p.at("a"), {4, 0, 2, 0}));
                     }});
    cases.push_back({"row_scatter", {Entry{"a", {4, 3}}}, [](Tape& t, const ParamVars& p) {
                         auto ids = std::make_shared<const std::vector<int>>(std::vector<int>{2, 0, 2, 5});
                         return weigh(t, row_scatter(p.at("a"), ids, 6));
                     }});
    cases.push_back({"concat_rows", {Entry{"a", {2, 3}}, Entry{"b", {4, 3}}},
                     [](Tape& t, const ParamVars& p) {
                         return weigh(t, concat_rows({p.at("a"), p.at("b")}));
                     }});
    cases.push_back({"slice_rows", {Entry{"a", {5, 3}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, slice_rows(p.at("a"), 1, 4));
                     }});
    cases.push_back({"softmax_rows", {a2}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, softmax_rows(p.at("a")));
                     },
                     -2.0, 2.0});
    cases.push_back({"cross_entropy_with_logits", {Entry{"a", {4, 5}}},
                     [](Tape&, const ParamVars& p) {
                         return cross_entropy_with_logits(p.at("a"), {1, 4, 0, 2});
                     },
                     -2.0, 2.0});
    cases.push_back({"concat_cols", {Entry{"a", {3, 2}}, Entry{"b", {3, 4}}},
                     [](Tape& t, const ParamVars& p) {
                         return weigh(t, concat_cols(std::vector<Var>{p.at("a"), p.at("b")}));
                     }});
    cases.push_back({"slice_cols", {Entry{"a", {3, 5}}}, [](Tape& t, const ParamVars& p) {
                         return weigh(t, slice_cols(p.at("a"), 1, 3));
                     }});
    cases.push_back({"affine", {Entry{"x", {4, 3}}, Entry{"w", {3, 2}}, Entry{"b", {1, 2}}},
                     [](Tape& t, const ParamVars& p) {
                         return weigh(t, affine(p.at("x"), p.at("w"), p.at("b")));
                     }});
    return cases;
}

// Smooth second-order composition exercising mul/matmul/tanh/log chains.
ParamLossFn second_order_fn() {
    using namespace ad;
    return [](Tape&, const ParamVars& p) {
        Var h = tanh(matmul(p.at("x"), p.at("w")));
        Var q = mul(h, h);
        Var z = log(add_scalar(mul(sigmoid(p.at("x")), p.at("x")), 2.0));
        return add(sum(q), mean(z));
    };
}

}  // namespace

std::vector<CheckReport> primitive_suite(Rng& rng, std::size_t instances_per_op) {
    std::vector<CheckReport> reports;

    for (const OpCase& c : primitive_cases()) {
        CheckReport r{c.name, 0.0, instances_per_op};
        for (std::size_t k = 0; k < instances_per_op; ++k) {
            ParamSet p = make_params(rng, c.entries, c.lo, c.hi);
            r.max_rel_err = std::max(r.max_rel_err, check_first_order(c.fn, p));
        }
        reports.push_back(std::move(r));
    }

    // Double backward: finite differences of the analytic first derivative.
    {
        CheckReport r{"double_backward_hvp", 0.0, instances_per_op};
        const std::vector<Entry> entries{{"x", {3, 3}}, {"w", {3, 3}}};
        const ParamLossFn fn = second_order_fn();
        for (std::size_t k = 0; k < instances_per_op; ++k) {
            ParamSet p = make_params(rng, entries, -0.8, 0.8);
            ad::Tensor v({p.flat_size()});
            for (double& x : v.data()) x = rng.uniform(-1.0, 1.0);
            r.max_rel_err = std::max(r.max_rel_err,
                                     ad::normwise_rel_diff(hvp(fn, p, v), fd_hvp(fn, p, v)));
        }
        reports.push_back(std::move(r));
    }

    return reports;
}

double worst_error(const std::vector<CheckReport>& reports) {
    double worst = 0.0;
    for (const CheckReport& r : reports) worst = std::max(worst, r.max_rel_err);
    return worst;
}

}  // namespace pmeta::gradcheck
