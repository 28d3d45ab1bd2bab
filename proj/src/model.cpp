#include "pmeta/model.hpp"

#include <algorithm>
#include <cmath>

namespace pmeta {

using ad::Var;

namespace {

constexpr int kGates = 4;  // input, forget, cell, output

ad::Tensor gaussian(Rng& rng, std::vector<std::size_t> shape, double stddev) {
    ad::Tensor t(std::move(shape));
    for (double& v : t.data()) v = rng.normal(0.0, stddev);
    return t;
}

std::string lstm_prefix(int layer, bool fwd) {
    return "prompt.enc.l" + std::to_string(layer) + (fwd ? ".fwd" : ".bwd");
}

}  // namespace

PromptModel::PromptModel(BackboneSpec spec, PromptTemplate tmpl, const Vocab& vocab)
    : spec_(spec), template_(std::move(tmpl)), vocab_size_(vocab.size()) {
    if (spec_.embed_dim == 0 || spec_.hidden_dim == 0 || spec_.encoder_hidden == 0)
        throw ContractError("model: dimensions must be positive");
    if (spec_.depth == 0) throw ContractError("model: at least one mixing layer required");
    if (vocab_size_ == 0) throw ContractError("model: empty vocab");
    for (const TemplateSlot& s : template_.slots())
        if (s.kind == TemplateSlot::Kind::AnchorToken && !vocab.contains(s.value))
            throw ContractError("model: template anchor id outside vocab");
    // Non-input slots plus at least one text token must fit.
    if (template_.slots().size() > spec_.max_seq_len)
        throw ContractError("model: template does not fit max_seq_len");
    template_text_ = template_.format(vocab);
}

ParamSet PromptModel::init_params() const {
    Rng rng(spec_.init_seed);
    const std::size_t d = spec_.embed_dim;
    const std::size_t h = spec_.hidden_dim;
    const std::size_t eh = spec_.encoder_hidden;
    const std::size_t m = template_.soft_count();

    ParamSet p;
    p.add("backbone.tok_embed", Partition::Backbone, gaussian(rng, {vocab_size_, d}, spec_.init_scale), true);
    p.add("backbone.pos_embed", Partition::Backbone, gaussian(rng, {spec_.max_seq_len, d}, spec_.init_scale), true);
    for (std::size_t l = 0; l < spec_.depth; ++l) {
        const std::string base = "backbone.mix" + std::to_string(l);
        p.add(base + ".ctx_w", Partition::Backbone, gaussian(rng, {d, h}, 1.0 / std::sqrt(double(d))), true);
        p.add(base + ".tok_w", Partition::Backbone, gaussian(rng, {d, h}, 1.0 / std::sqrt(double(d))), true);
        p.add(base + ".gate_w", Partition::Backbone, gaussian(rng, {d, h}, 1.0 / std::sqrt(double(d))), true);
        // Gates start mostly open so early training matches the plain MLP.
        p.add(base + ".gate_b", Partition::Backbone, ad::Tensor::full({1, h}, 2.0), false);
        p.add(base + ".mix_b", Partition::Backbone, ad::Tensor({1, h}), false);
        p.add(base + ".out_w", Partition::Backbone, gaussian(rng, {h, d}, 1.0 / std::sqrt(double(h))), true);
        p.add(base + ".out_b", Partition::Backbone, ad::Tensor({1, d}), false);
    }
    p.add("backbone.vocab_b", Partition::Backbone, ad::Tensor({1, vocab_size_}), false);

    if (m > 0) p.add("prompt.soft", Partition::Prompt, gaussian(rng, {m, d}, spec_.init_scale));
    for (int layer = 0; layer < 2; ++layer) {
        const std::size_t in = layer == 0 ? d : 2 * eh;
        for (bool fwd : {true, false}) {
            const std::string base = lstm_prefix(layer, fwd);
            p.add(base + ".wx", Partition::Prompt, gaussian(rng, {in, kGates * eh}, 1.0 / std::sqrt(double(in))));
            p.add(base + ".wh", Partition::Prompt, gaussian(rng, {eh, kGates * eh}, 1.0 / std::sqrt(double(eh))));
            p.add(base + ".b", Partition::Prompt, ad::Tensor({1, kGates * eh}));
        }
    }
    p.add("prompt.enc.mlp.w1", Partition::Prompt, gaussian(rng, {2 * eh, d}, 1.0 / std::sqrt(double(2 * eh))));
    p.add("prompt.enc.mlp.b1", Partition::Prompt, ad::Tensor({1, d}));
    p.add("prompt.enc.mlp.w2", Partition::Prompt, gaussian(rng, {d, d}, 1.0 / std::sqrt(double(d))));
    p.add("prompt.enc.mlp.b2", Partition::Prompt, ad::Tensor({1, d}));
    return p;
}

void PromptModel::randomize_prompt(ParamSet& params, Rng& rng) const {
    ParamSet reference = init_params();
    if (!params.same_layout(reference)) throw ContractError("model: foreign param layout");
    const double d = static_cast<double>(spec_.embed_dim);
    const double eh = static_cast<double>(spec_.encoder_hidden);
    for (std::size_t i = 0; i < params.size(); ++i) {
        ParamEntry& e = params.entry(i);
        if (e.partition != Partition::Prompt) continue;
        double stddev;
        if (e.name == "prompt.soft") {
            stddev = spec_.init_scale;
        } else if (e.name.ends_with(".b") || e.name.ends_with(".b1") || e.name.ends_with(".b2")) {
            e.value.fill(0.0);
            continue;
        } else if (e.name.ends_with(".wh")) {
            stddev = 1.0 / std::sqrt(eh);
        } else if (e.name.ends_with(".w2")) {
            stddev = 1.0 / std::sqrt(d);
        } else {
            // .wx / .w1: fan-in is the entry's own row count
            stddev = 1.0 / std::sqrt(static_cast<double>(e.value.shape()[0]));
        }
        for (double& v : e.value.data()) v = rng.normal(0.0, stddev);
    }
}

RenderedPrompt PromptModel::render(std::span<const int> text) const {
    if (text.empty()) throw ContractError("render: empty input text");
    const auto& slots = template_.slots();

    // Every non-input slot occupies one position; the text gets the rest.
    const std::size_t fixed = slots.size() - 1;
    const std::size_t budget = spec_.max_seq_len > fixed ? spec_.max_seq_len - fixed : 0;
    const std::size_t text_len = std::min(text.size(), budget);

    RenderedPrompt out;
    out.slots.reserve(slots.size());
    std::size_t pos = 0;
    for (std::size_t i = 0; i < slots.size(); ++i) {
        const TemplateSlot& s = slots[i];
        std::vector<RenderedPrompt::Source> sources;
        switch (s.kind) {
            case TemplateSlot::Kind::InputText:
                sources.reserve(text_len);
                for (std::size_t t = 0; t < text_len; ++t)
                    sources.push_back({RenderedPrompt::Source::Kind::VocabId, text[t]});
                break;
            case TemplateSlot::Kind::AnchorToken:
                sources.push_back({RenderedPrompt::Source::Kind::VocabId, s.value});
                break;
            case TemplateSlot::Kind::MaskToken:
                out.mask_slot = i;
                out.mask_pos = pos;
                sources.push_back({RenderedPrompt::Source::Kind::VocabId, Vocab::kMask});
                break;
            case TemplateSlot::Kind::SoftToken:
                sources.push_back({RenderedPrompt::Source::Kind::Soft, s.value});
                break;
        }
        pos += sources.size();
        out.slots.push_back(std::move(sources));
    }
    out.total_len = pos;
    return out;
}

ad::Var PromptModel::encode_soft(ad::Tape& tape, const ParamVars& params) const {
    const std::size_t m = template_.soft_count();
    if (m == 0) throw ContractError("encode_soft: template has no soft tokens");
    const std::size_t eh = spec_.encoder_hidden;

    Var seq = params.at("prompt.soft");  // (m x d)

    for (int layer = 0; layer < 2; ++layer) {
        std::vector<Var> fwd_rows(m), bwd_rows(m);
        for (bool fwd : {true, false}) {
            const std::string base = lstm_prefix(layer, fwd);
            const Var wx = params.at(base + ".wx");
            const Var wh = params.at(base + ".wh");
            const Var b = params.at(base + ".b");
            Var h = tape.constant(ad::Tensor({1, eh}));
            Var c = tape.constant(ad::Tensor({1, eh}));
            for (std::size_t step = 0; step < m; ++step) {
                const std::size_t t = fwd ? step : (m - 1 - step);
                const Var x = ad::slice_rows(seq, t, t + 1);
                const Var z = ad::add(ad::add(ad::matmul(x, wx), ad::matmul(h, wh)),
                                      ad::tile_rows(b, 1));
                const Var gi = ad::sigmoid(ad::slice_cols(z, 0, eh));
                const Var gf = ad::sigmoid(ad::slice_cols(z, eh, 2 * eh));
                const Var gc = ad::tanh(ad::slice_cols(z, 2 * eh, 3 * eh));
                const Var go = ad::sigmoid(ad::slice_cols(z, 3 * eh, 4 * eh));
                c = ad::add(ad::mul(gf, c), ad::mul(gi, gc));
                h = ad::mul(go, ad::tanh(c));
                (fwd ? fwd_rows : bwd_rows)[t] = h;
            }
        }
        std::vector<Var> rows;
        rows.reserve(m);
        for (std::size_t t = 0; t < m; ++t)
            rows.push_back(ad::concat_cols(std::vector<Var>{fwd_rows[t], bwd_rows[t]}));
        seq = rows.size() == 1 ? rows[0] : ad::concat_rows(rows);  // (m x 2eh)
    }

    const Var hidden = ad::tanh(ad::affine(seq, params.at("prompt.enc.mlp.w1"),
                                           params.at("prompt.enc.mlp.b1")));
    return ad::affine(hidden, params.at("prompt.enc.mlp.w2"), params.at("prompt.enc.mlp.b2"));
}

ad::Var PromptModel::forward_example(const ParamVars& params, const Var& soft,
                                     const Var& embed_t, std::span<const int> text) const {
    const RenderedPrompt rp = render(text);
    const Var embed = params.at("backbone.tok_embed");

    // Consecutive vocab positions collapse into one gather.
    std::vector<Var> segments;
    std::vector<int> run;
    auto flush = [&] {
        if (!run.empty()) {
            segments.push_back(ad::index_select(embed, run));
            run.clear();
        }
    };
    for (const auto& slot : rp.slots) {
        for (const auto& src : slot) {
            if (src.kind == RenderedPrompt::Source::Kind::VocabId) {
                run.push_back(src.value);
            } else {
                flush();
                segments.push_back(ad::slice_rows(soft, static_cast<std::size_t>(src.value),
                                                  static_cast<std::size_t>(src.value) + 1));
            }
        }
    }
    flush();

    Var h = segments.size() == 1 ? segments[0] : ad::concat_rows(segments);
    const std::size_t len = rp.total_len;
    h = ad::add(h, ad::slice_rows(params.at("backbone.pos_embed"), 0, len));

    for (std::size_t l = 0; l < spec_.depth; ++l) {
        const std::string base = "backbone.mix" + std::to_string(l);
        // Mean-pooled context conditions every position twice: additively
        // inside the activation and multiplicatively through channel gates.
        // The gates are what let prompt tokens reshape the sequence-to-mask
        // map per episode instead of only shifting it.
        const Var ctx = ad::mul_scalar(ad::sum_cols(h), 1.0 / static_cast<double>(len));
        const Var gate = ad::sigmoid(
            ad::affine(ctx, params.at(base + ".gate_w"), params.at(base + ".gate_b")));
        const Var pre = ad::affine(ctx, params.at(base + ".ctx_w"), params.at(base + ".mix_b"));
        const Var act = ad::tanh(ad::add(ad::matmul(h, params.at(base + ".tok_w")),
                                         ad::tile_rows(pre, len)));
        const Var gated = ad::mul(act, ad::tile_rows(gate, len));
        h = ad::add(h, ad::affine(gated, params.at(base + ".out_w"), params.at(base + ".out_b")));
    }

    const Var mask_row = ad::slice_rows(h, rp.mask_pos, rp.mask_pos + 1);
    return ad::add(ad::matmul(mask_row, embed_t), ad::tile_rows(params.at("backbone.vocab_b"), 1));
}

ad::Var PromptModel::forward(ad::Tape& tape, const ParamVars& params, Batch batch) const {
    if (batch.empty()) throw ContractError("forward: empty batch");
    const Var soft = template_.soft_count() > 0
                         ? encode_soft(tape, params)
                         : Var{};
    const Var embed_t = ad::transpose(params.at("backbone.tok_embed"));
    std::vector<Var> rows;
    rows.reserve(batch.size());
    for (const Example& ex : batch)
        rows.push_back(forward_example(params, soft, embed_t, ex.tokens));
    return rows.size() == 1 ? rows[0] : ad::concat_rows(rows);
}

ad::Var PromptModel::label_probs(ad::Tape& tape, const Var& logits, const Verbalizer& verb) const {
    (void)tape;
    const Var probs_t = ad::transpose(ad::softmax_rows(logits));  // (V x n)
    std::vector<Var> label_rows;
    label_rows.reserve(verb.num_labels());
    for (std::size_t l = 0; l < verb.num_labels(); ++l) {
        const auto& ans = verb.answers(static_cast<int>(l));
        const Var sel = ad::index_select(probs_t, ans);  // (a x n)
        label_rows.push_back(ad::mul_scalar(ad::sum_cols(sel), 1.0 / static_cast<double>(ans.size())));
    }
    const Var stacked = label_rows.size() == 1 ? label_rows[0] : ad::concat_rows(label_rows);
    return ad::transpose(stacked);  // (n x L)
}

ad::Var PromptModel::task_loss(ad::Tape& tape, const ParamVars& params, Batch batch,
                               const Verbalizer& verb) const {
    const std::size_t num_labels = verb.num_labels();
    for (const Example& ex : batch)
        if (ex.label < 0 || static_cast<std::size_t>(ex.label) >= num_labels)
            throw ContractError("task_loss: label " + std::to_string(ex.label) +
                                " outside verbalizer domain");

    const Var logits = forward(tape, params, batch);
    const Var probs = label_probs(tape, logits, verb);  // (n x L)

    ad::Tensor onehot({batch.size(), num_labels});
    for (std::size_t i = 0; i < batch.size(); ++i)
        onehot(i, static_cast<std::size_t>(batch[i].label)) = 1.0;

    const Var gold = ad::sum_rows(ad::mul(probs, tape.constant(std::move(onehot))));  // (n x 1)
    const Var total = ad::sum_rows(probs);                                            // (n x 1)
    return ad::mean(ad::sub(ad::log(total), ad::log(gold)));
}

ad::Tensor PromptModel::eval_label_probs(const ParamSet& params, Batch batch,
                                         const Verbalizer& verb) const {
    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/false);
    return label_probs(tape, forward(tape, pv, batch), verb).value();
}

std::vector<int> PromptModel::predict(const ParamSet& params, Batch batch,
                                      const Verbalizer& verb) const {
    const ad::Tensor probs = eval_label_probs(params, batch, verb);
    std::vector<int> out(batch.size());
    for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t l = 1; l < probs.cols(); ++l)
            if (probs(i, l) > probs(i, best)) best = l;  // ties keep the lowest index
        out[i] = static_cast<int>(best);
    }
    return out;
}

double PromptModel::eval_loss(const ParamSet& params, Batch batch, const Verbalizer& verb) const {
    ad::Tape tape;
    ParamVars pv = bind_all(tape, params, /*requires_grad=*/false);
    return task_loss(tape, pv, batch, verb).value().item();
}

double PromptModel::eval_accuracy(const ParamSet& params, Batch batch,
                                  const Verbalizer& verb) const {
    const std::vector<int> pred = predict(params, batch, verb);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < batch.size(); ++i)
        if (pred[i] == batch[i].label) ++hits;
    return batch.empty() ? 0.0 : static_cast<double>(hits) / static_cast<double>(batch.size());
}

TaskFns PromptModel::task_fns(const Verbalizer& verb) const {
    TaskFns fns;
    fns.loss = [this, verb](ad::Tape& tape, const ParamVars& pv, Batch batch) {
        return task_loss(tape, pv, batch, verb);
    };
    fns.accuracy = [this, verb](const ParamSet& params, Batch batch) {
        return eval_accuracy(params, batch, verb);
    };
    return fns;
}

std::string PromptModel::signature() const {
    std::string s = "pmeta-model-v1;";
    s += "d=" + std::to_string(spec_.embed_dim);
    s += ";h=" + std::to_string(spec_.hidden_dim);
    s += ";depth=" + std::to_string(spec_.depth);
    s += ";seed=" + std::to_string(spec_.init_seed);
    s += ";maxlen=" + std::to_string(spec_.max_seq_len);
    s += ";eh=" + std::to_string(spec_.encoder_hidden);
    s += ";vocab=" + std::to_string(vocab_size_);
    s += ";template=" + template_text_;
    return s;
}

}  // namespace pmeta
