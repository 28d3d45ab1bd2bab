#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "pmeta/autodiff.hpp"
#include "pmeta/example.hpp"
#include "pmeta/param_set.hpp"
#include "pmeta/prompt_template.hpp"
#include "pmeta/rng.hpp"
#include "pmeta/verbalizer.hpp"
#include "pmeta/vocab.hpp"

namespace pmeta {

// Structural description of the masked-LM stand-in and the prompt encoder.
// Two models built from the same spec (and vocab) are bit-identical.
struct BackboneSpec {
    std::size_t embed_dim = 16;       // d: token/position embedding width
    std::size_t hidden_dim = 32;      // mixer MLP width
    std::size_t depth = 2;            // mixing layers
    std::uint64_t init_seed = 1;
    std::size_t max_seq_len = 32;     // longer inputs are right-truncated
    std::size_t encoder_hidden = 8;   // recurrent width per direction
    double init_scale = 0.1;          // embedding init stddev
};

// Slot-resolved input sequence: each template slot expands to one or more
// embedding sources (the input-text slot holds the whole text).
struct RenderedPrompt {
    struct Source {
        enum class Kind { VocabId, Soft };
        Kind kind;
        int value;  // vocab id or soft-token index
    };
    std::vector<std::vector<Source>> slots;
    std::size_t mask_slot = 0;  // index into slots
    std::size_t mask_pos = 0;   // index into the flattened sequence
    std::size_t total_len = 0;
};

// Task-level functionals the meta-optimizer is generic over.
struct TaskFns {
    std::function<ad::Var(ad::Tape&, const ParamVars&, Batch)> loss;
    std::function<double(const ParamSet&, Batch)> accuracy;  // may be empty
};

// The prompt-based classifier: frozen-or-trainable backbone, soft prompt
// tokens run through a bidirectional recurrent encoder plus MLP, and a
// verbalizer head over mask-position logits.
class PromptModel {
public:
    PromptModel(BackboneSpec spec, PromptTemplate tmpl, const Vocab& vocab);

    const BackboneSpec& spec() const { return spec_; }
    const PromptTemplate& prompt_template() const { return template_; }
    std::size_t vocab_size() const { return vocab_size_; }
    std::size_t soft_tokens() const { return template_.soft_count(); }

    // Fresh parameters, fully determined by spec.init_seed.
    ParamSet init_params() const;

    // Redraws the prompt partition only (soft embeddings + encoder) from an
    // external stream; the backbone partition is untouched.
    void randomize_prompt(ParamSet& params, Rng& rng) const;

    RenderedPrompt render(std::span<const int> text) const;

    // Encoded soft embeddings (m x d); every output row depends on every raw
    // soft row through the bidirectional pass.
    ad::Var encode_soft(ad::Tape& tape, const ParamVars& params) const;

    // Mask-position logits, one row per example: (n x |V|).
    ad::Var forward(ad::Tape& tape, const ParamVars& params, Batch batch) const;

    // Answer-averaged per-label probabilities (n x L); rows need not sum to 1.
    ad::Var label_probs(ad::Tape& tape, const ad::Var& logits, const Verbalizer& verb) const;

    // Mean negative log of the label-renormalized gold probability.
    ad::Var task_loss(ad::Tape& tape, const ParamVars& params, Batch batch,
                      const Verbalizer& verb) const;

    // ---- value-level helpers (no gradients, tape-local) ----
    ad::Tensor eval_label_probs(const ParamSet& params, Batch batch, const Verbalizer& verb) const;
    std::vector<int> predict(const ParamSet& params, Batch batch, const Verbalizer& verb) const;
    double eval_loss(const ParamSet& params, Batch batch, const Verbalizer& verb) const;
    double eval_accuracy(const ParamSet& params, Batch batch, const Verbalizer& verb) const;

    TaskFns task_fns(const Verbalizer& verb) const;

    // Structural fingerprint used to reject checkpoints from other models.
    std::string signature() const;

private:
    ad::Var forward_example(const ParamVars& params, const ad::Var& soft, const ad::Var& embed_t,
                            std::span<const int> text) const;

    BackboneSpec spec_;
    PromptTemplate template_;
    std::size_t vocab_size_;
    std::string template_text_;
};

}  // namespace pmeta
