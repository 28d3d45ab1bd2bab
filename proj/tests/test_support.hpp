#pragma once

// Shared fixtures and independent oracles for the test suites. Oracles here
// are derived from first principles (closed forms, densities, enumeration),
// not from the library code paths they check.

#include <cmath>
#include <map>
#include <vector>

#include "pmeta/corpus.hpp"
#include "pmeta/meta_opt.hpp"
#include "pmeta/model.hpp"

namespace testsup {

using namespace pmeta;

// ---- scalar quadratic family ------------------------------------------------
// Losses are mean over the batch of (phi - target)^2 with target = ex.label.

inline ParamSet scalar_params(double phi0) {
    ParamSet p;
    p.add("phi", Partition::Prompt, ad::Tensor::scalar(phi0));
    return p;
}

inline TaskFns scalar_quadratic_fns() {
    TaskFns fns;
    fns.loss = [](ad::Tape& tape, const ParamVars& pv, Batch batch) {
        ad::Var acc{};
        for (const Example& ex : batch) {
            ad::Var d = ad::sub(pv.at("phi"), tape.constant(ad::Tensor::scalar(ex.label)));
            ad::Var term = ad::mul(d, d);
            acc = acc.valid() ? ad::add(acc, term) : term;
        }
        return ad::mul_scalar(acc, 1.0 / static_cast<double>(batch.size()));
    };
    return fns;
}

inline std::vector<Example> scalar_batch(int target) { return {Example{{}, target}}; }

// Closed forms for L_s=(phi-a)^2, L_q=(phi-b)^2 (constant Hessian 2, step
// Jacobian 1-2*alpha). Derived by hand from the chain rule.
struct ScalarOracle {
    double a, b, alpha;

    double adapted(double phi0, int steps) const {
        double phi = phi0;
        for (int k = 0; k < steps; ++k) phi -= alpha * 2.0 * (phi - a);
        return phi;
    }
    double maml_grad(double phi0, int steps) const {
        return 2.0 * (adapted(phi0, steps) - b) * std::pow(1.0 - 2.0 * alpha, steps);
    }
    double fomaml_grad(double phi0, int steps) const {
        return 2.0 * (adapted(phi0, steps) - b);
    }
    double mslb_grad(double phi0, const std::vector<double>& w) const {
        double total = 0.0;
        for (std::size_t k = 0; k < w.size(); ++k)
            total += w[k] * 2.0 * (adapted(phi0, static_cast<int>(k) + 1) - b) *
                     std::pow(1.0 - 2.0 * alpha, static_cast<double>(k) + 1);
        return total;
    }
    double reptile(double phi0, int steps, double eps) const {
        return phi0 + eps * (adapted(phi0, steps) - phi0);
    }
};

// ---- synthetic generator density oracle -------------------------------------
// Rebuilds the generator's documented token densities from the spec alone and
// classifies by exact unigram log-likelihood.

class BayesOracle {
public:
    BayesOracle(const GeneratorSpec& spec, const Corpus& corpus) {
        const int L = spec.num_labels;
        std::vector<int> answer_ids(L), background_ids;
        std::vector<std::vector<int>> topic_ids(L);
        for (int l = 0; l < L; ++l) answer_ids[l] = corpus.vocab.id("label_" + std::to_string(l));
        for (int w = 0; w < spec.background_words; ++w)
            background_ids.push_back(corpus.vocab.id("w" + std::to_string(w)));
        for (int l = 0; l < L; ++l)
            for (int k = 0; k < spec.topic_words_per_label; ++k)
                topic_ids[l].push_back(corpus.vocab.id("t" + std::to_string(l) + "_" + std::to_string(k)));

        const double pool = static_cast<double>(L) * (spec.topic_words_per_label + 1);
        const double shared_each = spec.overlap / pool;
        const double own = 1.0 - spec.overlap;
        log_probs_.assign(L, std::map<int, double>{});
        for (int l = 0; l < L; ++l) {
            std::map<int, double> topic;
            for (int j = 0; j < L; ++j) {
                topic[answer_ids[j]] += shared_each;
                for (int id : topic_ids[j]) topic[id] += shared_each;
            }
            topic[answer_ids[l]] += own * spec.answer_token_weight;
            for (int id : topic_ids[l])
                topic[id] += own * (1.0 - spec.answer_token_weight) / spec.topic_words_per_label;

            std::map<int, double> full;
            for (const auto& [id, p] : topic) full[id] += spec.topic_prob * p;
            for (int id : background_ids)
                full[id] += (1.0 - spec.topic_prob) / spec.background_words;
            for (const auto& [id, p] : full) log_probs_[l][id] = std::log(p);
        }
    }

    int classify(const std::vector<int>& tokens) const {
        int best = 0;
        double best_ll = score(0, tokens);
        for (int l = 1; l < static_cast<int>(log_probs_.size()); ++l) {
            const double ll = score(l, tokens);
            if (ll > best_ll) {
                best_ll = ll;
                best = l;
            }
        }
        return best;
    }

    double accuracy(const Corpus& corpus) const {
        std::size_t hits = 0;
        for (const Example& ex : corpus.examples)
            if (classify(ex.tokens) == ex.label) ++hits;
        return static_cast<double>(hits) / static_cast<double>(corpus.examples.size());
    }

private:
    double score(int label, const std::vector<int>& tokens) const {
        const auto& lp = log_probs_[label];
        double total = 0.0;
        for (int tok : tokens) {
            auto it = lp.find(tok);
            total += it != lp.end() ? it->second : -40.0;  // never-generated token
        }
        return total;
    }

    std::vector<std::map<int, double>> log_probs_;
};

// ---- tiny model fixture ------------------------------------------------------

struct TinyModel {
    Vocab vocab;
    PromptTemplate tmpl;
    PromptModel model;
    Verbalizer verb;

    static TinyModel make(std::size_t soft_tokens = 2, std::uint64_t seed = 5,
                          std::size_t embed_dim = 4) {
        Vocab v = Vocab::with_reserved();
        for (const char* w : {"the", "topic", "is", "alpha", "beta", "gamma", "delta"}) v.add(w);
        const int ans_a = v.add("ans_a");
        const int ans_b = v.add("ans_b");
        std::string tmpl_text = "[CLS] {x}";
        if (soft_tokens > 0) tmpl_text += " {soft:" + std::to_string(soft_tokens) + "}";
        tmpl_text += " [MASK] [SEP]";
        PromptTemplate t = PromptTemplate::parse(tmpl_text, v);
        BackboneSpec spec;
        spec.embed_dim = embed_dim;
        spec.hidden_dim = 6;
        spec.depth = 2;
        spec.encoder_hidden = 3;
        spec.max_seq_len = 16;
        spec.init_seed = seed;
        PromptModel m(spec, t, v);
        Verbalizer verb({{ans_a}, {ans_b}}, v);
        return TinyModel{std::move(v), std::move(t), std::move(m), std::move(verb)};
    }
};

inline std::vector<Example> tiny_batch(const Vocab& v) {
    const int alpha = v.id("alpha"), beta = v.id("beta"), gamma = v.id("gamma");
    return {
        Example{{alpha, beta}, 0},
        Example{{gamma}, 1},
        Example{{beta, gamma, alpha}, 0},
    };
}

}  // namespace testsup
