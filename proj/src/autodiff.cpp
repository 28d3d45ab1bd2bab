#include "pmeta/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <string>

namespace pmeta::ad {

namespace {

void require_same_tape(const Var& a, const Var& b, const char* op) {
    if (a.tape == nullptr || a.tape != b.tape)
        throw ContractError(std::string(op) + ": operands live on different tapes");
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw ShapeError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " + b.shape_str());
}

void require_rank2(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw ShapeError(std::string(op) + ": requires rank-2, got " + t.shape_str());
}

Tensor map2(const Tensor& a, const Tensor& b, double (*f)(double, double)) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

}  // namespace

const Tensor& Var::value() const { return tape->value(id); }
bool Var::requires_grad() const { return tape->node_requires_grad(id); }

const Tensor& GradientMap::at(const Var& p) const {
    auto it = entries_.find(p.id);
    if (it == entries_.end()) throw ContractError("gradient map: no entry for node");
    return it->second.value;
}

Tensor GradientMap::at_or_zeros(const Var& p) const {
    auto it = entries_.find(p.id);
    if (it == entries_.end()) return Tensor::zeros(p.value().shape());
    return it->second.value;
}

Var GradientMap::graph_at(const Var& p) const {
    if (!with_graph_) throw ContractError("gradient map: graph_at without create_graph");
    auto it = entries_.find(p.id);
    if (it == entries_.end()) throw ContractError("gradient map: no entry for node");
    return it->second.var;
}

Var Tape::leaf(Tensor value, bool requires_grad) {
    if (check_finite_ && !value.all_finite())
        throw NumericError("tape: non-finite leaf value");
    Node n;
    n.value = std::move(value);
    n.requires_grad = requires_grad && grad_enabled_;
    nodes_.push_back(std::move(n));
    high_water_ = std::max(high_water_, nodes_.size());
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

void Tape::truncate(std::size_t new_size) {
    if (new_size > nodes_.size()) throw ContractError("tape: truncate beyond size");
    if (new_size == nodes_.size()) return;
    // Leaves carry no parent span; scan back for the last surviving node that does.
    std::size_t parent_keep = 0;
    for (std::size_t i = new_size; i-- > 0;) {
        if (nodes_[i].parent_count > 0) {
            parent_keep = nodes_[i].first_parent + nodes_[i].parent_count;
            break;
        }
    }
    nodes_.resize(new_size);
    parents_.resize(parent_keep);
}

Var Tape::emplace(Tensor value, const detail::OpDef* op, std::span<const Var> parents,
                  detail::OpCtx ctx) {
    if (check_finite_ && !value.all_finite())
        throw NumericError(std::string("op ") + op->name + ": non-finite result");

    Node n;
    n.value = std::move(value);

    bool any_grad = false;
    if (grad_enabled_) {
        for (const Var& p : parents)
            if (nodes_[p.id].requires_grad) any_grad = true;
    }
    if (any_grad) {
        n.op = op;
        n.ctx = std::move(ctx);
        n.first_parent = static_cast<std::uint32_t>(parents_.size());
        n.parent_count = static_cast<std::uint32_t>(parents.size());
        n.requires_grad = true;
        parents_.insert(parents_.end(), parents.begin(), parents.end());
    }
    nodes_.push_back(std::move(n));
    high_water_ = std::max(high_water_, nodes_.size());
    return Var{this, static_cast<std::uint32_t>(nodes_.size() - 1)};
}

GradientMap Tape::backward(const Var& root, bool create_graph) {
    return backward(root, create_graph, {}, false);
}

GradientMap Tape::backward(const Var& root, bool create_graph, std::span<const Var> targets,
                           bool stop_at_targets) {
    if (root.tape != this) throw ContractError("backward: root lives on another tape");
    if (root.value().numel() != 1) throw ContractError("backward: root must be scalar-valued");

    const std::size_t pre_size = nodes_.size();
    const bool saved_grad_mode = grad_enabled_;
    grad_enabled_ = create_graph;

    GradientMap out;
    out.with_graph_ = create_graph;

    std::vector<std::uint8_t> is_target(static_cast<std::size_t>(root.id) + 1, 0);
    for (const Var& t : targets) {
        if (t.tape != this) throw ContractError("backward: target lives on another tape");
        if (t.id <= root.id) is_target[t.id] = 1;
    }

    std::vector<Var> acc(static_cast<std::size_t>(root.id) + 1);
    acc[root.id] = constant(Tensor::ones(root.value().shape()));

    std::vector<Var> parent_grads;
    std::vector<Var> parent_copy;  // rules may grow the pool, so work on a copy
    std::vector<std::uint8_t> needs;
    for (std::uint32_t id = root.id + 1; id-- > 0;) {
        if (!acc[id].valid()) continue;
        const Node& nd = nodes_[id];
        if (is_target[id]) {
            GradientMap::Entry e;
            e.var = acc[id];
            e.value = nodes_[acc[id].id].value;
            out.entries_.emplace(id, std::move(e));
            if (stop_at_targets) continue;
        }
        if (nd.op == nullptr) {
            if (nd.requires_grad && !is_target[id]) {
                GradientMap::Entry e;
                e.var = acc[id];
                e.value = nodes_[acc[id].id].value;
                out.entries_.emplace(id, std::move(e));
            }
            continue;
        }

        parent_copy.assign(parents_.begin() + nd.first_parent,
                           parents_.begin() + nd.first_parent + nd.parent_count);
        needs.assign(nd.parent_count, 0);
        bool any = false;
        for (std::size_t i = 0; i < parent_copy.size(); ++i) {
            needs[i] = nodes_[parent_copy[i].id].requires_grad ? 1 : 0;
            any = any || needs[i];
        }
        if (!any) continue;

        parent_grads.clear();
        detail::BackArgs args{*this, acc[id], Var{this, id}, parent_copy, needs, nd.ctx};
        nd.op->backward(args, parent_grads);

        for (std::size_t i = 0; i < parent_copy.size(); ++i) {
            if (!needs[i] || !parent_grads[i].valid()) continue;
            Var& slot = acc[parent_copy[i].id];
            slot = slot.valid() ? add(slot, parent_grads[i]) : parent_grads[i];
        }
    }

    grad_enabled_ = saved_grad_mode;
    if (!create_graph) truncate(pre_size);
    return out;
}

// ---- op definitions --------------------------------------------------------

namespace {

using detail::BackArgs;
using detail::OpCtx;
using detail::OpDef;

Var empty_var() { return Var{}; }

const OpDef kAdd{"add", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0] ? a.grad : empty_var(), a.needs[1] ? a.grad : empty_var()};
                 }};

const OpDef kSub{"sub", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0] ? a.grad : empty_var(),
                            a.needs[1] ? neg(a.grad) : empty_var()};
                 }};

const OpDef kMul{"mul", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0] ? mul(a.grad, a.parents[1]) : empty_var(),
                            a.needs[1] ? mul(a.grad, a.parents[0]) : empty_var()};
                 }};

const OpDef kDiv{"div", [](const BackArgs& a, std::vector<Var>& out) {
                     // out = p0/p1; d0 = g/p1; d1 = -g*out/p1
                     out = {a.needs[0] ? div(a.grad, a.parents[1]) : empty_var(),
                            a.needs[1] ? neg(mul(a.grad, div(a.self, a.parents[1]))) : empty_var()};
                 }};

const OpDef kAddScalar{"add_scalar", [](const BackArgs& a, std::vector<Var>& out) {
                           out = {a.needs[0] ? a.grad : empty_var()};
                       }};

const OpDef kMulScalar{"mul_scalar", [](const BackArgs& a, std::vector<Var>& out) {
                           out = {a.needs[0] ? mul_scalar(a.grad, a.ctx.x0) : empty_var()};
                       }};

const OpDef kSubFrom{"sub_from", [](const BackArgs& a, std::vector<Var>& out) {
                         out = {a.needs[0] ? neg(a.grad) : empty_var()};
                     }};

const OpDef kSmul{"smul", [](const BackArgs& a, std::vector<Var>& out) {
                      out = {a.needs[0] ? smul(a.grad, a.parents[1]) : empty_var(),
                             a.needs[1] ? sum(mul(a.grad, a.parents[0])) : empty_var()};
                  }};

const OpDef kMatmul{"matmul", [](const BackArgs& a, std::vector<Var>& out) {
                        out = {a.needs[0] ? matmul(a.grad, transpose(a.parents[1])) : empty_var(),
                               a.needs[1] ? matmul(transpose(a.parents[0]), a.grad) : empty_var()};
                    }};

const OpDef kTranspose{"transpose", [](const BackArgs& a, std::vector<Var>& out) {
                           out = {a.needs[0] ? transpose(a.grad) : empty_var()};
                       }};

const OpDef kTanh{"tanh", [](const BackArgs& a, std::vector<Var>& out) {
                      out = {a.needs[0] ? mul(a.grad, sub_from(1.0, mul(a.self, a.self))) : empty_var()};
                  }};

const OpDef kSigmoid{"sigmoid", [](const BackArgs& a, std::vector<Var>& out) {
                         out = {a.needs[0]
                                    ? mul(a.grad, mul(a.self, sub_from(1.0, a.self)))
                                    : empty_var()};
                     }};

const OpDef kRelu{"relu", [](const BackArgs& a, std::vector<Var>& out) {
                      if (!a.needs[0]) {
                          out = {empty_var()};
                          return;
                      }
                      const Tensor& x = a.parents[0].value();
                      Tensor mask(x.shape());
                      for (std::size_t i = 0; i < x.numel(); ++i) mask[i] = x[i] > 0.0 ? 1.0 : 0.0;
                      out = {mul(a.grad, a.tape.constant(std::move(mask)))};
                  }};

const OpDef kExp{"exp", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0] ? mul(a.grad, a.self) : empty_var()};
                 }};

const OpDef kLog{"log", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0] ? div(a.grad, a.parents[0]) : empty_var()};
                 }};

const OpDef kSum{"sum", [](const BackArgs& a, std::vector<Var>& out) {
                     out = {a.needs[0]
                                ? smul(a.tape.constant(Tensor::ones(a.parents[0].value().shape())), a.grad)
                                : empty_var()};
                 }};

const OpDef kMean{"mean", [](const BackArgs& a, std::vector<Var>& out) {
                      const Tensor& x = a.parents[0].value();
                      out = {a.needs[0]
                                 ? smul(a.tape.constant(Tensor::full(x.shape(), 1.0 / static_cast<double>(x.numel()))),
                                        a.grad)
                                 : empty_var()};
                  }};

const OpDef kSumRows{"sum_rows", [](const BackArgs& a, std::vector<Var>& out) {
                         out = {a.needs[0]
                                    ? tile_cols(a.grad, a.parents[0].value().cols())
                                    : empty_var()};
                     }};

const OpDef kSumCols{"sum_cols", [](const BackArgs& a, std::vector<Var>& out) {
                         out = {a.needs[0]
                                    ? tile_rows(a.grad, a.parents[0].value().rows())
                                    : empty_var()};
                     }};

const OpDef kTileCols{"tile_cols", [](const BackArgs& a, std::vector<Var>& out) {
                          out = {a.needs[0] ? sum_rows(a.grad) : empty_var()};
                      }};

const OpDef kTileRows{"tile_rows", [](const BackArgs& a, std::vector<Var>& out) {
                          out = {a.needs[0] ? sum_cols(a.grad) : empty_var()};
                      }};

const OpDef kIndexSelect{"index_select", [](const BackArgs& a, std::vector<Var>& out) {
                             out = {a.needs[0]
                                        ? row_scatter(a.grad, a.ctx.ids, a.parents[0].value().rows())
                                        : empty_var()};
                         }};

const OpDef kRowScatter{"row_scatter", [](const BackArgs& a, std::vector<Var>& out) {
                            out = {a.needs[0] ? index_select(a.grad, a.ctx.ids) : empty_var()};
                        }};

const OpDef kConcatRows{"concat_rows", [](const BackArgs& a, std::vector<Var>& out) {
                            out.resize(a.parents.size());
                            std::size_t off = 0;
                            for (std::size_t i = 0; i < a.parents.size(); ++i) {
                                const std::size_t r = a.parents[i].value().rows();
                                out[i] = a.needs[i] ? slice_rows(a.grad, off, off + r) : empty_var();
                                off += r;
                            }
                        }};

const OpDef kSliceRows{"slice_rows", [](const BackArgs& a, std::vector<Var>& out) {
                           if (!a.needs[0]) {
                               out = {empty_var()};
                               return;
                           }
                           const std::size_t rows = a.parents[0].value().rows();
                           const std::size_t cols = a.parents[0].value().cols();
                           const auto begin = static_cast<std::size_t>(a.ctx.i0);
                           const auto end = static_cast<std::size_t>(a.ctx.i1);
                           std::vector<Var> parts;
                           if (begin > 0)
                               parts.push_back(a.tape.constant(Tensor::zeros({begin, cols})));
                           parts.push_back(a.grad);
                           if (end < rows)
                               parts.push_back(a.tape.constant(Tensor::zeros({rows - end, cols})));
                           out = {parts.size() == 1 ? parts[0] : concat_rows(parts)};
                       }};

const OpDef kSoftmaxRows{"softmax_rows", [](const BackArgs& a, std::vector<Var>& out) {
                             if (!a.needs[0]) {
                                 out = {empty_var()};
                                 return;
                             }
                             // ds = s * (g - rowsum(g*s))
                             const Var s = a.self;
                             const Var t = mul(a.grad, s);
                             const Var row = tile_cols(sum_rows(t), s.value().cols());
                             out = {mul(s, sub(a.grad, row))};
                         }};

const OpDef kCrossEntropy{"cross_entropy_with_logits",
                          [](const BackArgs& a, std::vector<Var>& out) {
                              if (!a.needs[0]) {
                                  out = {empty_var()};
                                  return;
                              }
                              const Tensor& logits = a.parents[0].value();
                              const std::size_t n = logits.rows();
                              Tensor onehot = Tensor::zeros(logits.shape());
                              const auto& targets = *a.ctx.ids;
                              for (std::size_t r = 0; r < n; ++r)
                                  onehot(r, static_cast<std::size_t>(targets[r])) = 1.0;
                              const Var diff = sub(softmax_rows(a.parents[0]),
                                                   a.tape.constant(std::move(onehot)));
                              out = {smul(mul_scalar(diff, 1.0 / static_cast<double>(n)), a.grad)};
                          }};

Var elementwise2(const Var& a, const Var& b, const OpDef* op, double (*f)(double, double)) {
    require_same_tape(a, b, op->name);
    require_same_shape(a.value(), b.value(), op->name);
    const Var ps[] = {a, b};
    return a.tape->emplace(map2(a.value(), b.value(), f), op, ps);
}

Var unary(const Var& a, const OpDef* op, double (*f)(double)) {
    if (!a.valid()) throw ContractError(std::string(op->name) + ": invalid operand");
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = f(x[i]);
    const Var ps[] = {a};
    return a.tape->emplace(std::move(out), op, ps);
}

}  // namespace

Var add(const Var& a, const Var& b) {
    return elementwise2(a, b, &kAdd, [](double x, double y) { return x + y; });
}
Var sub(const Var& a, const Var& b) {
    return elementwise2(a, b, &kSub, [](double x, double y) { return x - y; });
}
Var mul(const Var& a, const Var& b) {
    return elementwise2(a, b, &kMul, [](double x, double y) { return x * y; });
}
Var div(const Var& a, const Var& b) {
    return elementwise2(a, b, &kDiv, [](double x, double y) { return x / y; });
}

Var add_scalar(const Var& a, double c) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] + c;
    const Var ps[] = {a};
    OpCtx ctx;
    ctx.x0 = c;
    return a.tape->emplace(std::move(out), &kAddScalar, ps, std::move(ctx));
}

Var mul_scalar(const Var& a, double c) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
    const Var ps[] = {a};
    OpCtx ctx;
    ctx.x0 = c;
    return a.tape->emplace(std::move(out), &kMulScalar, ps, std::move(ctx));
}

Var sub_from(double c, const Var& a) {
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = c - x[i];
    const Var ps[] = {a};
    OpCtx ctx;
    ctx.x0 = c;
    return a.tape->emplace(std::move(out), &kSubFrom, ps, std::move(ctx));
}

Var smul(const Var& a, const Var& s) {
    require_same_tape(a, s, "smul");
    if (s.value().shape() != std::vector<std::size_t>{1})
        throw ShapeError("smul: scale must have shape (1)");
    const double c = s.value()[0];
    const Tensor& x = a.value();
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * c;
    const Var ps[] = {a, s};
    return a.tape->emplace(std::move(out), &kSmul, ps);
}

Var matmul(const Var& a, const Var& b) {
    require_same_tape(a, b, "matmul");
    const Tensor& x = a.value();
    const Tensor& y = b.value();
    require_rank2(x, "matmul");
    require_rank2(y, "matmul");
    if (x.cols() != y.rows())
        throw ShapeError("matmul: inner dimensions differ, " + x.shape_str() + " @ " + y.shape_str());
    const std::size_t m = x.rows(), k = x.cols(), n = y.cols();
    Tensor out({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t p = 0; p < k; ++p) {
            const double xv = x(i, p);
            if (xv == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += xv * y(p, j);
        }
    }
    const Var ps[] = {a, b};
    return a.tape->emplace(std::move(out), &kMatmul, ps);
}

Var transpose(const Var& a) {
    const Tensor& x = a.value();
    require_rank2(x, "transpose");
    Tensor out({x.cols(), x.rows()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(j, i) = x(i, j);
    const Var ps[] = {a};
    return a.tape->emplace(std::move(out), &kTranspose, ps);
}

Var tanh(const Var& a) {
    return unary(a, &kTanh, [](double x) { return std::tanh(x); });
}

Var sigmoid(const Var& a) {
    return unary(a, &kSigmoid, [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var relu(const Var& a) {
    return unary(a, &kRelu, [](double x) { return x > 0.0 ? x : 0.0; });
}

Var exp(const Var& a) {
    if (a.tape->check_finite()) {
        for (double v : a.value().data())
            if (v > 709.0) throw NumericError("exp: argument overflows double range");
    }
    return unary(a, &kExp, [](double x) { return std::exp(x); });
}

Var log(const Var& a) {
    if (a.tape->check_finite()) {
        for (double v : a.value().data())
            if (v <= 0.0) throw NumericError("log: argument must be positive");
    }
    return unary(a, &kLog, [](double x) { return std::log(x); });
}

Var sum(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const Var ps[] = {a};
    return a.tape->emplace(Tensor::scalar(s), &kSum, ps);
}

Var mean(const Var& a) {
    double s = 0.0;
    for (double v : a.value().data()) s += v;
    const Var ps[] = {a};
    return a.tape->emplace(Tensor::scalar(s / static_cast<double>(a.value().numel())), &kMean, ps);
}

Var sum_rows(const Var& a) {
    const Tensor& x = a.value();
    require_rank2(x, "sum_rows");
    Tensor out({x.rows(), 1});
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) s += x(i, j);
        out(i, 0) = s;
    }
    const Var ps[] = {a};
    return a.tape->emplace(std::move(out), &kSumRows, ps);
}

Var sum_cols(const Var& a) {
    const Tensor& x = a.value();
    require_rank2(x, "sum_cols");
    Tensor out({1, x.cols()});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(0, j) += x(i, j);
    const Var ps[] = {a};
    return a.tape->emplace(std::move(out), &kSumCols, ps);
}

Var tile_cols(const Var& v, std::size_t cols) {
    const Tensor& x = v.value();
    require_rank2(x, "tile_cols");
    if (x.cols() != 1) throw ShapeError("tile_cols: input must be (r,1), got " + x.shape_str());
    Tensor out({x.rows(), cols});
    for (std::size_t i = 0; i < x.rows(); ++i)
        for (std::size_t j = 0; j < cols; ++j) out(i, j) = x(i, 0);
    const Var ps[] = {v};
    return v.tape->emplace(std::move(out), &kTileCols, ps);
}

Var tile_rows(const Var& v, std::size_t rows) {
    const Tensor& x = v.value();
    require_rank2(x, "tile_rows");
    if (x.rows() != 1) throw ShapeError("tile_rows: input must be (1,c), got " + x.shape_str());
    Tensor out({rows, x.cols()});
    for (std::size_t i = 0; i < rows; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(0, j);
    const Var ps[] = {v};
    return v.tape->emplace(std::move(out), &kTileRows, ps);
}

Var index_select(const Var& m, std::shared_ptr<const std::vector<int>> ids) {
    const Tensor& x = m.value();
    require_rank2(x, "index_select");
    for (int id : *ids)
        if (id < 0 || static_cast<std::size_t>(id) >= x.rows())
            throw ShapeError("index_select: row index " + std::to_string(id) + " out of range for " +
                             x.shape_str());
    Tensor out({ids->size(), x.cols()});
    for (std::size_t i = 0; i < ids->size(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = x(static_cast<std::size_t>((*ids)[i]), j);
    const Var ps[] = {m};
    OpCtx ctx;
    ctx.ids = std::move(ids);
    return m.tape->emplace(std::move(out), &kIndexSelect, ps, std::move(ctx));
}

Var index_select(const Var& m, std::vector<int> ids) {
    return index_select(m, std::make_shared<const std::vector<int>>(std::move(ids)));
}

Var row_scatter(const Var& s, std::shared_ptr<const std::vector<int>> ids, std::size_t rows) {
    const Tensor& x = s.value();
    require_rank2(x, "row_scatter");
    if (x.rows() != ids->size()) throw ShapeError("row_scatter: rows != ids count");
    for (int id : *ids)
        if (id < 0 || static_cast<std::size_t>(id) >= rows)
            throw ShapeError("row_scatter: target row out of range");
    Tensor out({rows, x.cols()});
    for (std::size_t i = 0; i < ids->size(); ++i)
        for (std::size_t j = 0; j < x.cols(); ++j)
            out(static_cast<std::size_t>((*ids)[i]), j) += x(i, j);
    const Var ps[] = {s};
    OpCtx ctx;
    ctx.ids = std::move(ids);
    return s.tape->emplace(std::move(out), &kRowScatter, ps, std::move(ctx));
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw ContractError("concat_rows: no inputs");
    const std::size_t cols = parts[0].value().cols();
    std::size_t rows = 0;
    for (const Var& p : parts) {
        require_same_tape(parts[0], p, "concat_rows");
        require_rank2(p.value(), "concat_rows");
        if (p.value().cols() != cols) throw ShapeError("concat_rows: column counts differ");
        rows += p.value().rows();
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const Var& p : parts) {
        const Tensor& x = p.value();
        for (std::size_t i = 0; i < x.rows(); ++i)
            for (std::size_t j = 0; j < cols; ++j) out(off + i, j) = x(i, j);
        off += x.rows();
    }
    return parts[0].tape->emplace(std::move(out), &kConcatRows, parts);
}

Var concat_rows(std::initializer_list<Var> parts) {
    std::vector<Var> v(parts);
    return concat_rows(std::span<const Var>(v));
}

Var slice_rows(const Var& a, std::size_t begin, std::size_t end) {
    const Tensor& x = a.value();
    require_rank2(x, "slice_rows");
    if (begin > end || end > x.rows()) throw ShapeError("slice_rows: bad range");
    Tensor out({end - begin, x.cols()});
    for (std::size_t i = begin; i < end; ++i)
        for (std::size_t j = 0; j < x.cols(); ++j) out(i - begin, j) = x(i, j);
    const Var ps[] = {a};
    OpCtx ctx;
    ctx.i0 = static_cast<std::int64_t>(begin);
    ctx.i1 = static_cast<std::int64_t>(end);
    return a.tape->emplace(std::move(out), &kSliceRows, ps, std::move(ctx));
}

Var softmax_rows(const Var& logits) {
    const Tensor& x = logits.value();
    require_rank2(x, "softmax_rows");
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
        double denom = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) {
            out(i, j) = std::exp(x(i, j) - mx);
            denom += out(i, j);
        }
        for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) /= denom;
    }
    const Var ps[] = {logits};
    return logits.tape->emplace(std::move(out), &kSoftmaxRows, ps);
}

Var cross_entropy_with_logits(const Var& logits, std::shared_ptr<const std::vector<int>> targets) {
    const Tensor& x = logits.value();
    require_rank2(x, "cross_entropy_with_logits");
    if (targets->size() != x.rows())
        throw ShapeError("cross_entropy_with_logits: one target per row required");
    for (int t : *targets)
        if (t < 0 || static_cast<std::size_t>(t) >= x.cols())
            throw ShapeError("cross_entropy_with_logits: target class out of range");
    double total = 0.0;
    for (std::size_t i = 0; i < x.rows(); ++i) {
        double mx = x(i, 0);
        for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) lse += std::exp(x(i, j) - mx);
        total += mx + std::log(lse) - x(i, static_cast<std::size_t>((*targets)[i]));
    }
    const Var ps[] = {logits};
    OpCtx ctx;
    ctx.ids = std::move(targets);
    return logits.tape->emplace(Tensor::scalar(total / static_cast<double>(x.rows())),
                                &kCrossEntropy, ps, std::move(ctx));
}

Var cross_entropy_with_logits(const Var& logits, std::vector<int> targets) {
    return cross_entropy_with_logits(logits, std::make_shared<const std::vector<int>>(std::move(targets)));
}

// ---- composites ------------------------------------------------------------

Var neg(const Var& a) { return mul_scalar(a, -1.0); }

Var dot(const Var& a, const Var& b) { return sum(mul(a, b)); }

Var concat_cols(std::span<const Var> parts) {
    std::vector<Var> t;
    t.reserve(parts.size());
    for (const Var& p : parts) t.push_back(transpose(p));
    return transpose(concat_rows(std::span<const Var>(t)));
}

Var slice_cols(const Var& a, std::size_t begin, std::size_t end) {
    return transpose(slice_rows(transpose(a), begin, end));
}

Var affine(const Var& x, const Var& w, const Var& b) {
    const Var prod = matmul(x, w);
    return add(prod, tile_rows(b, prod.value().rows()));
}

Var detach(const Var& a) { return a.tape->constant(a.value()); }

}  // namespace pmeta::ad
