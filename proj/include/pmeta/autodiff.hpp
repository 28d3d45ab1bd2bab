#pragma once

#include <cstdint>
#include <deque>
#include <memory>
#include <span>
#include <unordered_map>
#include <vector>

#include "pmeta/error.hpp"
#include "pmeta/tensor.hpp"

namespace pmeta::ad {

class Tape;

// Lightweight handle to a node on a tape. Node ids are append order, which
// doubles as the topological generation: parents always have smaller ids.
struct Var {
    Tape* tape = nullptr;
    std::uint32_t id = 0;

    bool valid() const { return tape != nullptr; }
    const Tensor& value() const;
    bool requires_grad() const;
};

// Result of a backward pass, keyed by node id. With create_graph the entries
// are live graph nodes that can seed a second backward; without it they are
// detached value snapshots and the tape is rewound to its pre-backward size.
class GradientMap {
public:
    bool contains(const Var& p) const { return entries_.count(p.id) != 0; }

    const Tensor& at(const Var& p) const;
    Tensor at_or_zeros(const Var& p) const;

    // Only valid when the map was produced with create_graph.
    Var graph_at(const Var& p) const;

    bool with_graph() const { return with_graph_; }
    std::size_t size() const { return entries_.size(); }

private:
    friend class Tape;
    struct Entry {
        Var var{};      // set when with_graph
        Tensor value;   // always set
    };
    std::unordered_map<std::uint32_t, Entry> entries_;
    bool with_graph_ = false;
};

namespace detail {

// Per-op payload. Keeps nodes small; ops that need index lists share them.
struct OpCtx {
    std::int64_t i0 = 0, i1 = 0;
    double x0 = 0.0;
    std::shared_ptr<const std::vector<int>> ids;
};

struct BackArgs {
    Tape& tape;
    Var grad;                       // upstream gradient of this node
    Var self;                       // this node
    std::span<const Var> parents;
    std::span<const std::uint8_t> needs;  // which parent gradients are required
    const OpCtx& ctx;
};

struct OpDef {
    const char* name;
    // Writes one gradient Var per parent into `out` (invalid Var where
    // needs[i] is false or the derivative is structurally zero).
    void (*backward)(const BackArgs&, std::vector<Var>& out);
};

}  // namespace detail

class Tape {
public:
    explicit Tape(bool check_finite = true) : check_finite_(check_finite) {}

    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var leaf(Tensor value, bool requires_grad = false);
    Var constant(Tensor value) { return leaf(std::move(value), false); }

    std::size_t size() const { return nodes_.size(); }
    std::size_t high_water() const { return high_water_; }
    void reset_high_water() { high_water_ = nodes_.size(); }

    // Drops every node with id >= new_size. Handles into the dropped range
    // must not be used afterwards.
    void truncate(std::size_t new_size);

    bool grad_enabled() const { return grad_enabled_; }
    void set_grad_enabled(bool on) { grad_enabled_ = on; }

    bool check_finite() const { return check_finite_; }
    void set_check_finite(bool on) { check_finite_ = on; }

    // Reverse sweep from a scalar root. Returns gradients for every
    // requires_grad leaf reachable from the root.
    GradientMap backward(const Var& root, bool create_graph = false);

    // As above, but also reports gradients for the given interior nodes.
    // With stop_at_targets the sweep treats each target as an independent
    // variable and does not continue into its parents; callers must ensure
    // the targets cut every path to anything else they need.
    GradientMap backward(const Var& root, bool create_graph, std::span<const Var> targets,
                         bool stop_at_targets);

    const Tensor& value(std::uint32_t id) const { return nodes_[id].value; }
    bool node_requires_grad(std::uint32_t id) const { return nodes_[id].requires_grad; }

    // Op-layer entry point: records a node with parents and a backward rule.
    Var emplace(Tensor value, const detail::OpDef* op, std::span<const Var> parents,
                detail::OpCtx ctx = {});

private:
    struct Node {
        Tensor value;
        const detail::OpDef* op = nullptr;  // null for leaves/constants
        detail::OpCtx ctx;
        std::uint32_t first_parent = 0;
        std::uint32_t parent_count = 0;
        bool requires_grad = false;
    };

    // Deque keeps value references stable while rules append nodes.
    std::deque<Node> nodes_;
    std::vector<Var> parents_;
    std::size_t high_water_ = 0;
    bool grad_enabled_ = true;
    bool check_finite_ = true;
};

// Restores grad mode on scope exit.
class NoGradGuard {
public:
    explicit NoGradGuard(Tape& t) : tape_(t), saved_(t.grad_enabled()) { tape_.set_grad_enabled(false); }
    ~NoGradGuard() { tape_.set_grad_enabled(saved_); }

private:
    Tape& tape_;
    bool saved_;
};

// Rewinds the tape to its construction-time size on scope exit.
class TruncateGuard {
public:
    explicit TruncateGuard(Tape& t) : tape_(t), mark_(t.size()) {}
    ~TruncateGuard() { tape_.truncate(mark_); }

private:
    Tape& tape_;
    std::size_t mark_;
};

// ---- primitive ops ---------------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);

Var add_scalar(const Var& a, double c);
Var mul_scalar(const Var& a, double c);
Var sub_from(double c, const Var& a);  // c - a

// Elementwise product with a 1-element tensor (broadcast scalar).
Var smul(const Var& a, const Var& s);

Var matmul(const Var& a, const Var& b);
Var transpose(const Var& a);

Var tanh(const Var& a);
Var sigmoid(const Var& a);
Var relu(const Var& a);
Var exp(const Var& a);
Var log(const Var& a);

Var sum(const Var& a);   // -> {1}
Var mean(const Var& a);  // -> {1}

Var sum_rows(const Var& a);                      // (r,c) -> (r,1)
Var sum_cols(const Var& a);                      // (r,c) -> (1,c)
Var tile_cols(const Var& v, std::size_t cols);   // (r,1) -> (r,cols)
Var tile_rows(const Var& v, std::size_t rows);   // (1,c) -> (rows,c)

// Row gather / scatter-add over rank-2 tensors (embedding lookup and its
// adjoint).
Var index_select(const Var& m, std::shared_ptr<const std::vector<int>> ids);
Var index_select(const Var& m, std::vector<int> ids);
Var row_scatter(const Var& s, std::shared_ptr<const std::vector<int>> ids, std::size_t rows);

Var concat_rows(std::span<const Var> parts);
Var concat_rows(std::initializer_list<Var> parts);
Var slice_rows(const Var& a, std::size_t begin, std::size_t end);

Var softmax_rows(const Var& logits);

// Mean negative log-likelihood of target columns under row-wise softmax.
Var cross_entropy_with_logits(const Var& logits, std::shared_ptr<const std::vector<int>> targets);
Var cross_entropy_with_logits(const Var& logits, std::vector<int> targets);

// ---- composites (differentiable through the primitives above) -------------

Var neg(const Var& a);
Var dot(const Var& a, const Var& b);
Var concat_cols(std::span<const Var> parts);
Var slice_cols(const Var& a, std::size_t begin, std::size_t end);
// x (n,in) @ w (in,out) + b (1,out) broadcast over rows
Var affine(const Var& x, const Var& w, const Var& b);

// Value + stop-gradient: copies a var's value onto the tape as a constant.
Var detach(const Var& a);

}  // namespace pmeta::ad
