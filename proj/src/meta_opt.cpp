#include "pmeta/meta_opt.hpp"

#include <algorithm>
#include <cmath>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace pmeta {

const char* meta_algo_name(MetaAlgo a) {
    switch (a) {
        case MetaAlgo::Maml: return "maml";
        case MetaAlgo::Fomaml: return "fomaml";
        case MetaAlgo::Reptile: return "reptile";
        default: return "mslb";
    }
}

MetaAlgo meta_algo_from_name(const std::string& name) {
    if (name == "maml") return MetaAlgo::Maml;
    if (name == "fomaml") return MetaAlgo::Fomaml;
    if (name == "reptile") return MetaAlgo::Reptile;
    if (name == "mslb") return MetaAlgo::Mslb;
    throw ContractError("unknown meta algorithm '" + name + "'");
}

void MetaUpdateConfig::validate(int k_max) const {
    if (algo == MetaAlgo::Mslb) {
        if (mslb_weights.size() != static_cast<std::size_t>(k_max))
            throw ContractError("meta config: need one MSLB weight per inner step");
        double sum = 0.0;
        for (double w : mslb_weights) {
            if (w < 0.0) throw ContractError("meta config: MSLB weights must be >= 0");
            sum += w;
        }
        if (std::abs(sum - 1.0) > 1e-9)
            throw ContractError("meta config: MSLB weights must sum to 1");
    }
    if (algo == MetaAlgo::Reptile && (reptile_eps <= 0.0 || reptile_eps > 1.0))
        throw ContractError("meta config: reptile interpolation must lie in (0,1]");
}

std::vector<double> mslb_uniform_weights(int k_max, double anneal) {
    if (k_max < 1) throw ContractError("mslb weights: k_max must be >= 1");
    anneal = std::clamp(anneal, 0.0, 1.0);
    std::vector<double> w(static_cast<std::size_t>(k_max), (1.0 - anneal) / k_max);
    w.back() += anneal;
    return w;
}

namespace {

// Masked copy: partition trainability follows the inner-loop mask.
ParamSet masked(const ParamSet& params, const InnerLoopConfig& cfg) {
    ParamSet p = params;
    p.set_trainable(Partition::Backbone, cfg.train_backbone);
    p.set_trainable(Partition::Prompt, cfg.train_prompt);
    return p;
}

Batch step_batch(Batch support, const InnerLoopConfig& cfg, int step) {
    const auto n = support.size();
    const auto b = static_cast<std::size_t>(cfg.batch_size);
    if (cfg.batch_size <= 0 || b >= n) return support;
    const std::size_t offset = (static_cast<std::size_t>(step) * b) % n;
    return support.subspan(offset, std::min(b, n - offset));
}

double eval_loss_value(const TaskFns& fns, const ParamSet& params, Batch batch) {
    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/false);
    return fns.loss(tape, pv, batch).value().item();
}

ad::Tensor flat_from_grads(const ParamSet& layout, const ParamVars& leaves,
                           const ad::GradientMap& grads) {
    ad::Tensor flat({layout.flat_size()});
    for (std::size_t i = 0; i < layout.size(); ++i) {
        if (!layout.entry_trainable(i) || !grads.contains(leaves.vars[i])) continue;
        const ad::Tensor& g = grads.at(leaves.vars[i]);
        for (std::size_t k = 0; k < g.numel(); ++k) flat[layout.offset(i) + k] = g[k];
    }
    return flat;
}

}  // namespace

AdaptationTrace adapt(const ParamSet& params, const TaskFns& fns, Batch support, Batch query,
                      const InnerLoopConfig& cfg, const AdaptOptions& opts) {
    cfg.validate();
    if (support.empty()) throw ContractError("adapt: empty support set");

    ParamSet work = masked(params, cfg);
    AdaptationTrace trace;

    ad::Tape local_tape;
    ad::Tape& tape = opts.reuse_tape ? *opts.reuse_tape : local_tape;
    const std::size_t base = tape.size();

    const bool curve = opts.record_query_curve && !query.empty();
    auto record_query = [&] {
        if (!curve) return;
        ad::TruncateGuard guard(tape);
        ParamVars pv = bind_all(tape, work, /*requires_grad=*/false);
        trace.query_loss.push_back(fns.loss(tape, pv, query).value().item());
        if (fns.accuracy) trace.query_acc.push_back(fns.accuracy(work, query));
    };
    record_query();

    for (int step = 0; step < cfg.steps; ++step) {
        try {
            tape.truncate(base);
            ParamVars pv = bind(tape, work);
            const Batch batch = step_batch(support, cfg, step);
            ad::Var loss = fns.loss(tape, pv, batch);
            trace.support_loss.push_back(loss.value().item());
            ad::GradientMap grads = tape.backward(loss, /*create_graph=*/false);
            for (std::size_t i = 0; i < work.size(); ++i) {
                if (!work.entry_trainable(i) || !grads.contains(pv.vars[i])) continue;
                work.entry(i).value.add_scaled(grads.at(pv.vars[i]), -cfg.lr);
            }
        } catch (const NumericError& e) {
            throw NumericError("adapt: inner step " + std::to_string(step) + ": " + e.what());
        }
        record_query();
    }
    tape.truncate(base);

    trace.adapted = std::move(work);
    return trace;
}

std::vector<ParamVars> adapt_graph(ad::Tape& tape, const ParamVars& initial, const TaskFns& fns,
                                   Batch support, const InnerLoopConfig& cfg,
                                   std::vector<double>* support_losses) {
    cfg.validate();
    if (support.empty()) throw ContractError("adapt_graph: empty support set");

    const ParamSet& layout = *initial.layout;
    std::vector<ParamVars> steps;
    steps.reserve(static_cast<std::size_t>(cfg.steps));

    ParamVars cur = initial;
    for (int step = 0; step < cfg.steps; ++step) {
        try {
            ad::Var loss = fns.loss(tape, cur, support);
            if (support_losses) support_losses->push_back(loss.value().item());

            std::vector<ad::Var> targets;
            for (std::size_t i = 0; i < layout.size(); ++i)
                if (layout.entry_trainable(i) && cur.vars[i].requires_grad())
                    targets.push_back(cur.vars[i]);

            ad::GradientMap grads =
                tape.backward(loss, /*create_graph=*/true, targets, /*stop_at_targets=*/true);

            ParamVars next = cur;
            for (std::size_t i = 0; i < layout.size(); ++i) {
                if (!layout.entry_trainable(i) || !grads.contains(cur.vars[i])) continue;
                next.vars[i] =
                    ad::sub(cur.vars[i], ad::mul_scalar(grads.graph_at(cur.vars[i]), cfg.lr));
            }
            cur = std::move(next);
        } catch (const NumericError& e) {
            throw NumericError("adapt_graph: inner step " + std::to_string(step) + ": " + e.what());
        }
        steps.push_back(cur);
    }
    return steps;
}

ad::Tensor meta_gradient_maml(const ParamSet& params, const TaskFns& fns, Batch support,
                              Batch query, const InnerLoopConfig& cfg, MetaGradStats* stats) {
    if (query.empty()) throw ContractError("meta_gradient_maml: empty query set");
    ParamSet work = masked(params, cfg);
    ad::Tape tape;
    ParamVars leaves = bind(tape, work);
    std::vector<ParamVars> steps = adapt_graph(tape, leaves, fns, support, cfg);

    if (stats) stats->retained_nodes = tape.size();
    ad::Var qloss = fns.loss(tape, steps.back(), query);
    if (stats) stats->query_loss = qloss.value().item();
    ad::GradientMap grads = tape.backward(qloss, /*create_graph=*/false);
    if (stats) stats->peak_nodes = tape.high_water();
    return flat_from_grads(work, leaves, grads);
}

ad::Tensor meta_gradient_fomaml(const ParamSet& params, const TaskFns& fns, Batch support,
                                Batch query, const InnerLoopConfig& cfg, MetaGradStats* stats) {
    if (query.empty()) throw ContractError("meta_gradient_fomaml: empty query set");
    ad::Tape tape;
    AdaptOptions opts;
    opts.reuse_tape = &tape;
    AdaptationTrace trace = adapt(params, fns, support, {}, cfg, opts);

    if (stats) stats->retained_nodes = tape.size();
    ParamSet adapted = std::move(trace.adapted);
    ParamVars leaves = bind(tape, adapted);
    ad::Var qloss = fns.loss(tape, leaves, query);
    if (stats) stats->query_loss = qloss.value().item();
    ad::GradientMap grads = tape.backward(qloss, /*create_graph=*/false);
    if (stats) stats->peak_nodes = tape.high_water();
    return flat_from_grads(adapted, leaves, grads);
}

ad::Tensor meta_gradient_mslb(const ParamSet& params, const TaskFns& fns, Batch support,
                              Batch query, const InnerLoopConfig& cfg,
                              std::span<const double> weights, MetaGradStats* stats) {
    if (query.empty()) throw ContractError("meta_gradient_mslb: empty query set");
    if (weights.size() != static_cast<std::size_t>(cfg.steps))
        throw ContractError("meta_gradient_mslb: need one weight per inner step, got " +
                            std::to_string(weights.size()) + " for " + std::to_string(cfg.steps));

    ParamSet work = masked(params, cfg);
    ad::Tape tape;
    ParamVars leaves = bind(tape, work);
    std::vector<ParamVars> steps = adapt_graph(tape, leaves, fns, support, cfg);

    if (stats) stats->retained_nodes = tape.size();
    ad::Var total{};
    double value = 0.0;
    for (std::size_t k = 0; k < steps.size(); ++k) {
        if (weights[k] == 0.0) continue;  // zero-weight prefixes contribute nothing
        ad::Var term = ad::mul_scalar(fns.loss(tape, steps[k], query), weights[k]);
        value += term.value().item();
        total = total.valid() ? ad::add(total, term) : term;
    }
    if (stats) stats->query_loss = value;
    if (!total.valid()) return ad::Tensor({work.flat_size()});  // all weights zero

    ad::GradientMap grads = tape.backward(total, /*create_graph=*/false);
    if (stats) stats->peak_nodes = tape.high_water();
    return flat_from_grads(work, leaves, grads);
}

ParamSet reptile_update(const ParamSet& params, const TaskFns& fns, Batch support, Batch query,
                        const InnerLoopConfig& cfg, double eps, bool include_query,
                        MetaGradStats* stats) {
    if (eps <= 0.0 || eps > 1.0)
        throw ContractError("reptile_update: interpolation must lie in (0,1]");

    std::vector<Example> merged;
    Batch adapt_set = support;
    if (include_query && !query.empty()) {
        merged.assign(support.begin(), support.end());
        merged.insert(merged.end(), query.begin(), query.end());
        adapt_set = merged;
    }

    ad::Tape tape;
    AdaptOptions opts;
    opts.reuse_tape = &tape;
    AdaptationTrace trace = adapt(params, fns, adapt_set, {}, cfg, opts);
    if (stats) {
        stats->retained_nodes = tape.size();
        stats->peak_nodes = tape.high_water();
        stats->query_loss = query.empty() ? trace.support_loss.back()
                                          : eval_loss_value(fns, trace.adapted, query);
    }

    ParamSet out = params;
    for (std::size_t i = 0; i < out.size(); ++i) {
        if (!trace.adapted.entry_trainable(i)) continue;
        ad::Tensor& dst = out.entry(i).value;
        const ad::Tensor& adapted = trace.adapted.entry(i).value;
        for (std::size_t k = 0; k < dst.numel(); ++k)
            dst[k] += eps * (adapted[k] - dst[k]);
    }
    return out;
}

OuterOptimizer::OuterOptimizer(Config cfg, const ParamSet& layout)
    : cfg_(cfg), m_({layout.flat_size()}), v_({layout.flat_size()}) {}

void OuterOptimizer::apply(ParamSet& params, const ad::Tensor& flat_grad, double lr_scale) {
    if (flat_grad.numel() != params.flat_size())
        throw ShapeError("optimizer: gradient layout mismatch");

    if (cfg_.kind == Kind::Sgd) {
        for (std::size_t i = 0; i < params.size(); ++i) {
            if (!params.entry_trainable(i)) continue;
            const double lr =
                lr_scale * (params.entry(i).partition == Partition::Backbone ? cfg_.lr_backbone
                                                                             : cfg_.lr_prompt);
            ad::Tensor& value = params.entry(i).value;
            const std::size_t off = params.offset(i);
            for (std::size_t k = 0; k < value.numel(); ++k) value[k] -= lr * flat_grad[off + k];
        }
        ++step_;
        return;
    }

    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params.size(); ++i) {
        if (!params.entry_trainable(i)) continue;
        const ParamEntry& meta = params.entry(i);
        const double lr = lr_scale * (meta.partition == Partition::Backbone ? cfg_.lr_backbone
                                                                            : cfg_.lr_prompt);
        const double wd = meta.weight_decay ? cfg_.weight_decay : 0.0;
        ad::Tensor& value = params.entry(i).value;
        const std::size_t off = params.offset(i);
        for (std::size_t k = 0; k < value.numel(); ++k) {
            const double g = flat_grad[off + k];
            m_[off + k] = cfg_.beta1 * m_[off + k] + (1.0 - cfg_.beta1) * g;
            v_[off + k] = cfg_.beta2 * v_[off + k] + (1.0 - cfg_.beta2) * g * g;
            const double mhat = m_[off + k] / bc1;
            const double vhat = v_[off + k] / bc2;
            value[k] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + wd * value[k]);
        }
    }
}

void OuterOptimizer::restore(std::int64_t step, ad::Tensor m, ad::Tensor v) {
    if (m.numel() != m_.numel() || v.numel() != v_.numel())
        throw ShapeError("optimizer: restored state layout mismatch");
    step_ = step;
    m_ = std::move(m);
    v_ = std::move(v);
}

OuterStepResult outer_step(ParamSet& params, std::span<const Episode> batch,
                           const std::function<TaskFns(const Episode&)>& fns_for,
                           const InnerLoopConfig& inner, const MetaUpdateConfig& meta,
                           OuterOptimizer& opt, double lr_scale, ParallelMode mode) {
    if (batch.empty()) throw ContractError("outer_step: empty episode batch");
    inner.validate();
    meta.validate(inner.steps);

    const auto n = batch.size();
    OuterStepResult result;
    result.episode_query_loss.resize(n, 0.0);

    const bool reptile = meta.algo == MetaAlgo::Reptile;
    std::vector<ad::Tensor> grads(reptile ? 0 : n);
    std::vector<ParamSet> targets(reptile ? n : 0);
    std::vector<std::exception_ptr> errors(n);

    auto run_episode = [&](std::size_t i) {
        try {
            MetaGradStats stats;
            const TaskFns fns = fns_for(batch[i]);
            const Episode& ep = batch[i];
            switch (meta.algo) {
                case MetaAlgo::Maml:
                    grads[i] = meta_gradient_maml(params, fns, ep.support, ep.query, inner, &stats);
                    break;
                case MetaAlgo::Fomaml:
                    grads[i] = meta_gradient_fomaml(params, fns, ep.support, ep.query, inner, &stats);
                    break;
                case MetaAlgo::Mslb:
                    grads[i] = meta_gradient_mslb(params, fns, ep.support, ep.query, inner,
                                                  meta.mslb_weights, &stats);
                    break;
                case MetaAlgo::Reptile:
                    targets[i] = reptile_update(params, fns, ep.support, ep.query, inner,
                                                meta.reptile_eps, meta.reptile_include_query,
                                                &stats);
                    break;
            }
            result.episode_query_loss[i] = stats.query_loss;
        } catch (...) {
            errors[i] = std::current_exception();
        }
    };

    if (mode == ParallelMode::OpenMp) {
#ifdef _OPENMP
#pragma omp parallel for schedule(dynamic)
#endif
        for (std::int64_t i = 0; i < static_cast<std::int64_t>(n); ++i)
            run_episode(static_cast<std::size_t>(i));
    } else {
        for (std::size_t i = 0; i < n; ++i) run_episode(i);
    }

    for (std::size_t i = 0; i < n; ++i) {
        if (!errors[i]) continue;
        const std::string prefix = "outer_step: episode " + std::to_string(i) + ": ";
        try {
            std::rethrow_exception(errors[i]);
        } catch (const NumericError& e) {
            throw NumericError(prefix + e.what());
        } catch (const ContractError& e) {
            throw ContractError(prefix + e.what());
        } catch (const Error& e) {
            throw Error(prefix + e.what());
        }
    }

    if (reptile) {
        // params += eps_mean over per-episode interpolation targets; the eps
        // factor is already folded into each target.
        ParamSet base = params;
        for (std::size_t e = 0; e < params.size(); ++e) {
            ad::Tensor& dst = params.entry(e).value;
            for (std::size_t k = 0; k < dst.numel(); ++k) {
                double acc = 0.0;
                for (std::size_t i = 0; i < n; ++i)
                    acc += targets[i].entry(e).value[k] - base.entry(e).value[k];
                dst[k] += acc / static_cast<double>(n);
            }
        }
    } else {
        ad::Tensor mean = std::move(grads[0]);
        for (std::size_t i = 1; i < n; ++i) mean.add_scaled(grads[i], 1.0);
        mean.scale(1.0 / static_cast<double>(n));
        opt.apply(params, mean, lr_scale);
    }

    double total = 0.0;
    for (double l : result.episode_query_loss) total += l;
    result.mean_query_loss = total / static_cast<double>(n);
    return result;
}

}  // namespace pmeta
