#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include "pmeta/episodes.hpp"
#include "pmeta/model.hpp"
#include "pmeta/param_set.hpp"

namespace pmeta {

// Inner-loop (adaptation) settings: plain SGD on the support loss over the
// masked-in partitions.
struct InnerLoopConfig {
    int steps = 1;                // k_max
    double lr = 0.1;              // alpha
    bool train_prompt = true;
    bool train_backbone = false;
    int batch_size = 0;           // value-mode minibatching; 0 = full batch

    void validate() const {
        if (steps < 1) throw ContractError("inner config: steps must be >= 1");
        if (!(lr >= 0.0) || !std::isfinite(lr))
            throw ContractError("inner config: lr must be finite and >= 0");
        if (!train_prompt && !train_backbone)
            throw ContractError("inner config: at least one partition must be trainable");
    }
};

enum class MetaAlgo { Maml, Fomaml, Reptile, Mslb };

const char* meta_algo_name(MetaAlgo a);
MetaAlgo meta_algo_from_name(const std::string& name);

// Outer-update settings. The outer learning rates live with the optimizer
// (two parameter groups); this carries the algorithm choice and its knobs.
struct MetaUpdateConfig {
    MetaAlgo algo = MetaAlgo::Maml;
    std::vector<double> mslb_weights;     // size k_max; normalized to sum 1
    double reptile_eps = 1.0;             // interpolation step in (0,1]
    bool reptile_include_query = false;   // adapt on support ∪ query

    void validate(int k_max) const;
};

// Uniform weights over k steps (the default MSLB scheme), optionally annealed
// toward last-step-only: anneal=0 gives uniform, anneal=1 gives (0,..,0,1).
std::vector<double> mslb_uniform_weights(int k_max, double anneal = 0.0);

// Per-step record of one adaptation run. support_loss[k] is the loss the
// k-th step descended; the query curves carry a step-0 entry, so their
// length is steps+1 when recorded.
struct AdaptationTrace {
    std::vector<double> support_loss;
    std::vector<double> query_loss;
    std::vector<double> query_acc;
    ParamSet adapted;
};

struct AdaptOptions {
    bool record_query_curve = false;
    ad::Tape* reuse_tape = nullptr;  // adapt on this tape (rewound per step)
};

// Value-mode adaptation: k gradient-descent steps on the support loss over
// the masked-in partitions. No graph survives; memory is O(1) in steps.
AdaptationTrace adapt(const ParamSet& params, const TaskFns& fns, Batch support, Batch query,
                      const InnerLoopConfig& cfg, const AdaptOptions& opts = {});

// Graph-mode adaptation on an explicit tape: returns the parameter nodes
// after each step (index k-1 = after k steps); every returned node is a
// differentiable function of the initial leaves. support_losses receives
// the per-step values when non-null.
std::vector<ParamVars> adapt_graph(ad::Tape& tape, const ParamVars& initial, const TaskFns& fns,
                                   Batch support, const InnerLoopConfig& cfg,
                                   std::vector<double>* support_losses = nullptr);

struct MetaGradStats {
    std::size_t retained_nodes = 0;  // tape size once adaptation finished
    std::size_t peak_nodes = 0;      // high-water mark over the computation
    double query_loss = 0.0;         // meta objective value at adapted params
};

// Exact gradient of the query loss at the adapted parameters with respect to
// the initial parameters, differentiated through the unrolled inner loop.
// Flat layout over the full ParamSet; masked-out partitions are zero.
ad::Tensor meta_gradient_maml(const ParamSet& params, const TaskFns& fns, Batch support,
                              Batch query, const InnerLoopConfig& cfg,
                              MetaGradStats* stats = nullptr);

// First-order approximation: the query gradient at the adapted parameters,
// reported against the initial parameters (Jacobian treated as identity).
ad::Tensor meta_gradient_fomaml(const ParamSet& params, const TaskFns& fns, Batch support,
                                Batch query, const InnerLoopConfig& cfg,
                                MetaGradStats* stats = nullptr);

// Gradient of sum_k w_k * L_query(params after k steps), each term through
// its own unrolled prefix.
ad::Tensor meta_gradient_mslb(const ParamSet& params, const TaskFns& fns, Batch support,
                              Batch query, const InnerLoopConfig& cfg,
                              std::span<const double> weights, MetaGradStats* stats = nullptr);

// params + eps * (adapted - params); adaptation runs on the support set, or
// on support ∪ query when include_query.
ParamSet reptile_update(const ParamSet& params, const TaskFns& fns, Batch support, Batch query,
                        const InnerLoopConfig& cfg, double eps, bool include_query = false,
                        MetaGradStats* stats = nullptr);

// Outer optimizer: plain SGD or AdamW with decoupled weight decay and two
// parameter groups (backbone / prompt learning rates).
class OuterOptimizer {
public:
    enum class Kind { Sgd, AdamW };

    struct Config {
        Kind kind = Kind::AdamW;
        double lr_backbone = 1e-3;
        double lr_prompt = 5e-3;
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
        double weight_decay = 0.1;  // decay-flagged entries only
    };

    OuterOptimizer(Config cfg, const ParamSet& layout);

    // params -= lr_scale * lr_group * step(grad); grad is flat over layout.
    void apply(ParamSet& params, const ad::Tensor& flat_grad, double lr_scale = 1.0);

    const Config& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }
    const ad::Tensor& first_moment() const { return m_; }
    const ad::Tensor& second_moment() const { return v_; }
    void restore(std::int64_t step, ad::Tensor m, ad::Tensor v);

private:
    Config cfg_;
    std::int64_t step_ = 0;
    ad::Tensor m_, v_;
};

enum class ParallelMode { Serial, OpenMp };

struct OuterStepResult {
    double mean_query_loss = 0.0;
    std::vector<double> episode_query_loss;
};

// One outer update over a batch of episodes. Per-episode meta gradients (or
// Reptile targets) may be computed in parallel; the reduction runs in
// episode-index order, so the result does not depend on the worker count.
OuterStepResult outer_step(ParamSet& params, std::span<const Episode> batch,
                           const std::function<TaskFns(const Episode&)>& fns_for,
                           const InnerLoopConfig& inner, const MetaUpdateConfig& meta,
                           OuterOptimizer& opt, double lr_scale = 1.0,
                           ParallelMode mode = ParallelMode::Serial);

}  // namespace pmeta
