#pragma once

#include <string>
#include <vector>

#include "pmeta/example.hpp"
#include "pmeta/rng.hpp"
#include "pmeta/verbalizer.hpp"
#include "pmeta/vocab.hpp"

namespace pmeta {

// Immutable labeled-text collection. Labels are dense ids with names.
struct Corpus {
    std::vector<Example> examples;  // labels are corpus-global ids
    std::vector<std::string> label_names;
    Vocab vocab;
    std::string domain_tag;

    std::size_t num_labels() const { return label_names.size(); }

    // Indices of all examples per label, in corpus order.
    std::vector<std::vector<std::size_t>> examples_by_label() const;
};

// Parameters of the synthetic topic-mixture generator. Each label's texts mix
// shared background words with label-specific topic words; `overlap` slides
// every label's topic distribution toward one shared pool (1 = labels carry
// no signal). The label's own answer token is mixed into its topic words with
// weight `answer_token_weight` so the cloze target occurs in running text.
struct GeneratorSpec {
    int num_labels = 12;
    int background_words = 40;
    int topic_words_per_label = 6;
    int examples_per_label = 40;
    int len_min = 8;
    int len_max = 12;
    double topic_prob = 0.6;
    double overlap = 0.0;
    double answer_token_weight = 0.25;
};

Corpus generate_synthetic_corpus(const GeneratorSpec& spec, std::uint64_t seed);

// Verbalizer mapping each label to its own name token; the synthetic
// generator guarantees those tokens exist in the vocab, JSONL corpora get
// them added at load time.
Verbalizer verbalizer_from_label_names(const Corpus& corpus);

// Wider answer sets for synthetic corpora: each label answers with its name
// token plus its topic words (all label-specific, so sets stay disjoint).
Verbalizer synthetic_verbalizer(const Corpus& corpus, const GeneratorSpec& spec);

// Vocabulary policy for JSONL ingestion: words below min_freq or beyond
// max_words (by frequency, ties broken lexicographically) map to [UNK].
struct VocabPolicy {
    std::size_t max_words = 50000;
    std::size_t min_freq = 1;
};

// One JSON object per line with string fields "text" and "label".
Corpus load_jsonl(const std::string& path, const VocabPolicy& policy = {});
void save_jsonl(const Corpus& corpus, const std::string& path);

}  // namespace pmeta
