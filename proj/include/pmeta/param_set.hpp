#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pmeta/autodiff.hpp"
#include "pmeta/tensor.hpp"

namespace pmeta {

// Two-way partition of the trainable state: backbone (the masked-LM stand-in)
// and prompt (soft-token embeddings plus their encoder).
enum class Partition : std::uint8_t { Backbone, Prompt };

inline const char* partition_name(Partition p) {
    return p == Partition::Backbone ? "backbone" : "prompt";
}

struct ParamEntry {
    std::string name;
    Partition partition;
    ad::Tensor value;
    bool weight_decay = false;
};

// Named, ordered collection of parameter tensors. Entry order is insertion
// order and defines the flat layout; it is stable across clone/restore.
class ParamSet {
public:
    std::size_t add(std::string name, Partition partition, ad::Tensor value,
                    bool weight_decay = false) {
        if (index_.count(name)) throw ContractError("param set: duplicate name " + name);
        index_.emplace(name, entries_.size());
        offsets_.push_back(total_);
        total_ += value.numel();
        entries_.push_back({std::move(name), partition, std::move(value), weight_decay});
        return entries_.size() - 1;
    }

    std::size_t size() const { return entries_.size(); }
    const ParamEntry& entry(std::size_t i) const { return entries_[i]; }
    ParamEntry& entry(std::size_t i) { return entries_[i]; }

    std::size_t index_of(std::string_view name) const {
        auto it = index_.find(std::string(name));
        if (it == index_.end()) throw ContractError("param set: unknown name " + std::string(name));
        return it->second;
    }
    const ad::Tensor& operator[](std::string_view name) const { return entries_[index_of(name)].value; }
    ad::Tensor& operator[](std::string_view name) { return entries_[index_of(name)].value; }

    bool trainable(Partition p) const {
        return p == Partition::Backbone ? train_backbone_ : train_prompt_;
    }
    void set_trainable(Partition p, bool on) {
        (p == Partition::Backbone ? train_backbone_ : train_prompt_) = on;
    }
    bool entry_trainable(std::size_t i) const { return trainable(entries_[i].partition); }

    std::size_t flat_size() const { return total_; }
    std::size_t offset(std::size_t i) const { return offsets_[i]; }

    ad::Tensor flatten() const {
        ad::Tensor flat({total_});
        std::size_t k = 0;
        for (const ParamEntry& e : entries_)
            for (double v : e.value.data()) flat[k++] = v;
        return flat;
    }

    void load_flat(const ad::Tensor& flat) {
        if (flat.numel() != total_) throw ShapeError("param set: flat size mismatch");
        std::size_t k = 0;
        for (ParamEntry& e : entries_)
            for (double& v : e.value.data()) v = flat[k++];
    }

    ParamSet clone() const { return *this; }

    bool same_layout(const ParamSet& o) const {
        if (entries_.size() != o.entries_.size()) return false;
        for (std::size_t i = 0; i < entries_.size(); ++i) {
            if (entries_[i].name != o.entries_[i].name ||
                entries_[i].partition != o.entries_[i].partition ||
                entries_[i].value.shape() != o.entries_[i].value.shape())
                return false;
        }
        return true;
    }

private:
    std::vector<ParamEntry> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::size_t> offsets_;
    std::size_t total_ = 0;
    bool train_backbone_ = true;
    bool train_prompt_ = true;
};

// Tape-bound mirror of a ParamSet: one leaf (or derived node, after inner
// updates) per entry, in entry order.
struct ParamVars {
    std::vector<ad::Var> vars;
    const ParamSet* layout = nullptr;

    const ad::Var& at(std::string_view name) const { return vars[layout->index_of(name)]; }
    const ad::Var& operator[](std::size_t i) const { return vars[i]; }
    std::size_t size() const { return vars.size(); }
};

// Leaves with requires_grad following each entry's partition trainability.
inline ParamVars bind(ad::Tape& tape, const ParamSet& params) {
    ParamVars pv;
    pv.layout = &params;
    pv.vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        pv.vars.push_back(tape.leaf(params.entry(i).value, params.entry_trainable(i)));
    return pv;
}

// Leaves with a uniform requires_grad flag (used by hvp and gradient checks).
inline ParamVars bind_all(ad::Tape& tape, const ParamSet& params, bool requires_grad = true) {
    ParamVars pv;
    pv.layout = &params;
    pv.vars.reserve(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
        pv.vars.push_back(tape.leaf(params.entry(i).value, requires_grad));
    return pv;
}

// Value snapshot of bound (possibly adapted) parameter nodes.
inline ParamSet values_of(const ParamVars& pv) {
    ParamSet out = *pv.layout;
    for (std::size_t i = 0; i < pv.size(); ++i) out.entry(i).value = pv.vars[i].value();
    return out;
}

// Loss functional over bound parameters; the meta-optimizer and hvp are
// generic over this signature.
using ParamLossFn = std::function<ad::Var(ad::Tape&, const ParamVars&)>;

// Hessian-vector product H(loss)·v at `params` via double backward, treating
// every entry of `params` as a differentiation variable. `v` is a flat vector
// over the full parameter layout.
ad::Tensor hvp(const ParamLossFn& loss_fn, const ParamSet& params, const ad::Tensor& v);

// Flat gradient of `loss_fn` at `params` over the full layout (zeros for
// parameters the loss does not reach).
ad::Tensor flat_gradient(const ParamLossFn& loss_fn, const ParamSet& params);

}  // namespace pmeta
