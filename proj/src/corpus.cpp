#include "pmeta/corpus.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

namespace pmeta {

std::vector<std::vector<std::size_t>> Corpus::examples_by_label() const {
    std::vector<std::vector<std::size_t>> by_label(num_labels());
    for (std::size_t i = 0; i < examples.size(); ++i) {
        const int l = examples[i].label;
        if (l < 0 || static_cast<std::size_t>(l) >= num_labels())
            throw ContractError("corpus: example label out of range");
        by_label[static_cast<std::size_t>(l)].push_back(i);
    }
    return by_label;
}

namespace {

// Words every generated vocabulary carries so hard prompt templates like
// "the topic is [MASK]" resolve against synthetic corpora too.
const std::vector<std::string> kFillerWords = {"the", "a", "is", "of", "topic", "what", "about"};

struct LabelDistribution {
    // Cumulative distribution over vocab ids for one label's token draw.
    std::vector<int> ids;
    std::vector<double> cumulative;

    int draw(Rng& rng) const {
        const double u = rng.uniform();
        const auto it = std::upper_bound(cumulative.begin(), cumulative.end(), u);
        const std::size_t k = std::min(static_cast<std::size_t>(it - cumulative.begin()),
                                       ids.size() - 1);
        return ids[k];
    }
};

LabelDistribution make_distribution(const std::vector<std::pair<int, double>>& weighted) {
    LabelDistribution d;
    double total = 0.0;
    for (const auto& [id, w] : weighted) total += w;
    double acc = 0.0;
    for (const auto& [id, w] : weighted) {
        acc += w / total;
        d.ids.push_back(id);
        d.cumulative.push_back(acc);
    }
    return d;
}

}  // namespace

Corpus generate_synthetic_corpus(const GeneratorSpec& spec, std::uint64_t seed) {
    if (spec.num_labels < 1) throw ContractError("generator: num_labels must be >= 1");
    if (spec.topic_words_per_label < 1)
        throw ContractError("generator: topic_words_per_label must be >= 1");
    if (spec.background_words < 1) throw ContractError("generator: background_words must be >= 1");
    if (spec.len_min < 1 || spec.len_max < spec.len_min)
        throw ContractError("generator: bad text length range");
    if (spec.overlap < 0.0 || spec.overlap > 1.0)
        throw ContractError("generator: overlap must lie in [0,1]");
    if (spec.topic_prob < 0.0 || spec.topic_prob > 1.0)
        throw ContractError("generator: topic_prob must lie in [0,1]");
    if (spec.answer_token_weight < 0.0 || spec.answer_token_weight >= 1.0)
        throw ContractError("generator: answer_token_weight must lie in [0,1)");

    Corpus corpus;
    corpus.domain_tag = "synthetic";
    corpus.vocab = Vocab::with_reserved();
    for (const std::string& w : kFillerWords) corpus.vocab.add(w);

    std::vector<int> answer_ids;
    for (int l = 0; l < spec.num_labels; ++l) {
        corpus.label_names.push_back("label_" + std::to_string(l));
        answer_ids.push_back(corpus.vocab.add(corpus.label_names.back()));
    }
    std::vector<int> background_ids;
    for (int w = 0; w < spec.background_words; ++w)
        background_ids.push_back(corpus.vocab.add("w" + std::to_string(w)));
    std::vector<std::vector<int>> topic_ids(static_cast<std::size_t>(spec.num_labels));
    for (int l = 0; l < spec.num_labels; ++l)
        for (int k = 0; k < spec.topic_words_per_label; ++k)
            topic_ids[static_cast<std::size_t>(l)].push_back(
                corpus.vocab.add("t" + std::to_string(l) + "_" + std::to_string(k)));

    // Effective per-label topic distribution:
    //   (1-overlap) * own + overlap * shared-pool
    // own = answer_token_weight on the label's answer token, rest uniform
    // over its topic words; the shared pool is uniform over every label's
    // topic words and answer tokens.
    const double own_w = 1.0 - spec.overlap;
    const std::size_t pool =
        static_cast<std::size_t>(spec.num_labels) *
        (static_cast<std::size_t>(spec.topic_words_per_label) + 1);
    const double shared_each = spec.overlap / static_cast<double>(pool);

    std::vector<LabelDistribution> topic_dist;
    for (int l = 0; l < spec.num_labels; ++l) {
        std::map<int, double> weights;
        for (int j = 0; j < spec.num_labels; ++j) {
            weights[answer_ids[static_cast<std::size_t>(j)]] += shared_each;
            for (int id : topic_ids[static_cast<std::size_t>(j)]) weights[id] += shared_each;
        }
        weights[answer_ids[static_cast<std::size_t>(l)]] += own_w * spec.answer_token_weight;
        const double topic_each = own_w * (1.0 - spec.answer_token_weight) /
                                  static_cast<double>(spec.topic_words_per_label);
        for (int id : topic_ids[static_cast<std::size_t>(l)]) weights[id] += topic_each;

        std::vector<std::pair<int, double>> flat(weights.begin(), weights.end());
        topic_dist.push_back(make_distribution(flat));
    }
    std::vector<std::pair<int, double>> bg_flat;
    for (int id : background_ids) bg_flat.push_back({id, 1.0});
    const LabelDistribution bg_dist = make_distribution(bg_flat);

    Rng rng(seed);
    for (int l = 0; l < spec.num_labels; ++l) {
        for (int e = 0; e < spec.examples_per_label; ++e) {
            const int len = rng.uniform_int(spec.len_min, spec.len_max);
            Example ex;
            ex.label = l;
            ex.tokens.reserve(static_cast<std::size_t>(len));
            for (int t = 0; t < len; ++t) {
                const bool topical = rng.uniform() < spec.topic_prob;
                ex.tokens.push_back(topical ? topic_dist[static_cast<std::size_t>(l)].draw(rng)
                                            : bg_dist.draw(rng));
            }
            corpus.examples.push_back(std::move(ex));
        }
    }
    return corpus;
}

Verbalizer verbalizer_from_label_names(const Corpus& corpus) {
    std::vector<std::vector<int>> answers;
    answers.reserve(corpus.num_labels());
    for (const std::string& name : corpus.label_names) {
        const int id = corpus.vocab.id(name);
        if (id < 0)
            throw ContractError("verbalizer: label name '" + name + "' missing from vocab");
        answers.push_back({id});
    }
    return Verbalizer(std::move(answers), corpus.vocab);
}

Verbalizer synthetic_verbalizer(const Corpus& corpus, const GeneratorSpec& spec) {
    std::vector<std::vector<int>> answers;
    answers.reserve(corpus.num_labels());
    for (std::size_t l = 0; l < corpus.num_labels(); ++l) {
        std::vector<int> set;
        const int name_id = corpus.vocab.id("label_" + std::to_string(l));
        if (name_id < 0)
            throw ContractError("synthetic_verbalizer: label token missing; not a generated corpus?");
        set.push_back(name_id);
        for (int k = 0; k < spec.topic_words_per_label; ++k) {
            const int tid = corpus.vocab.id("t" + std::to_string(l) + "_" + std::to_string(k));
            if (tid < 0) throw ContractError("synthetic_verbalizer: topic token missing");
            set.push_back(tid);
        }
        answers.push_back(std::move(set));
    }
    return Verbalizer(std::move(answers), corpus.vocab);
}

namespace {

std::vector<std::string> whitespace_tokens(const std::string& text) {
    std::istringstream in(text);
    std::vector<std::string> out;
    std::string w;
    while (in >> w) out.push_back(w);
    return out;
}

}  // namespace

Corpus load_jsonl(const std::string& path, const VocabPolicy& policy) {
    std::ifstream in(path);
    if (!in) throw IoError("load_jsonl: cannot open " + path);

    struct RawExample {
        std::vector<std::string> words;
        int label;
    };
    std::vector<RawExample> raw;
    std::vector<std::string> label_names;
    std::map<std::string, int> label_index;
    std::map<std::string, std::size_t> word_freq;

    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError("load_jsonl: line " + std::to_string(line_no) + ": " + e.what());
        }
        if (!obj.is_object() || !obj.contains("text") || !obj.contains("label") ||
            !obj["text"].is_string() || !obj["label"].is_string())
            throw ParseError("load_jsonl: line " + std::to_string(line_no) +
                             ": expected object with string fields \"text\" and \"label\"");

        RawExample ex;
        ex.words = whitespace_tokens(obj["text"].get<std::string>());
        if (ex.words.empty())
            throw ParseError("load_jsonl: line " + std::to_string(line_no) + ": empty text");
        const std::string label = obj["label"].get<std::string>();
        auto [it, inserted] = label_index.emplace(label, static_cast<int>(label_names.size()));
        if (inserted) label_names.push_back(label);
        ex.label = it->second;
        for (const std::string& w : ex.words) ++word_freq[w];
        raw.push_back(std::move(ex));
    }
    if (raw.empty()) throw ContractError("load_jsonl: no examples in " + path);

    // Frequency-capped vocabulary, deterministic order: frequency descending,
    // word ascending. Label-name answer tokens are always present.
    Corpus corpus;
    corpus.domain_tag = path;
    corpus.label_names = std::move(label_names);
    corpus.vocab = Vocab::with_reserved();
    for (const std::string& name : corpus.label_names) corpus.vocab.add_or_get(name);

    std::vector<std::pair<std::string, std::size_t>> by_freq(word_freq.begin(), word_freq.end());
    std::sort(by_freq.begin(), by_freq.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) return a.second > b.second;
        return a.first < b.first;
    });
    std::size_t kept = 0;
    for (const auto& [word, freq] : by_freq) {
        if (kept >= policy.max_words) break;
        if (freq < policy.min_freq) break;
        corpus.vocab.add_or_get(word);
        ++kept;
    }

    for (const RawExample& r : raw) {
        Example ex;
        ex.label = r.label;
        ex.tokens.reserve(r.words.size());
        for (const std::string& w : r.words) ex.tokens.push_back(corpus.vocab.id_or_unk(w));
        corpus.examples.push_back(std::move(ex));
    }
    return corpus;
}

void save_jsonl(const Corpus& corpus, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw IoError("save_jsonl: cannot open " + path + " for writing");
    for (const Example& ex : corpus.examples) {
        std::string text;
        for (std::size_t i = 0; i < ex.tokens.size(); ++i) {
            if (i) text += ' ';
            text += corpus.vocab.token(ex.tokens[i]);
        }
        nlohmann::json obj;
        obj["text"] = text;
        obj["label"] = corpus.label_names.at(static_cast<std::size_t>(ex.label));
        out << obj.dump() << '\n';
    }
    if (!out) throw IoError("save_jsonl: write failed for " + path);
}

}  // namespace pmeta
