#pragma once

#include <cstdint>
#include <vector>

#include "pmeta/corpus.hpp"

namespace pmeta {

// Label-disjoint train/validation/test split of a corpus.
struct SplitSpec {
    std::vector<int> train_labels;
    std::vector<int> val_labels;
    std::vector<int> test_labels;
    std::uint64_t seed = 0;
};

enum class Split { Train, Val, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Val: return "val";
        default: return "test";
    }
}

// One N-way K-shot task. Example labels are episode-local (0..N-1);
// `palette[local]` is the corpus-global label id.
struct Episode {
    int way = 0;
    int shot = 0;
    int query_per_class = 0;
    std::vector<Example> support;  // N*K examples
    std::vector<Example> query;    // N*Q examples
    std::vector<int> palette;

    bool operator==(const Episode&) const = default;
};

// Random label partition by per-split counts (counts must cover >= 1 label
// each and sum to at most the corpus label count).
SplitSpec make_splits_by_count(const Corpus& corpus, std::size_t train_count,
                               std::size_t val_count, std::size_t test_count,
                               std::uint64_t seed);

// Same fractions semantics: floor of fraction * labels, remainder to train.
SplitSpec make_splits(const Corpus& corpus, double train_frac, double val_frac, double test_frac,
                      std::uint64_t seed);

// Explicit label lists; validated disjoint and in range.
SplitSpec make_splits_explicit(const Corpus& corpus, std::vector<int> train,
                               std::vector<int> val, std::vector<int> test);

const std::vector<int>& split_labels(const SplitSpec& spec, Split split);

// Uniformly samples N split labels without replacement, then K+Q examples
// per label without replacement; the first K of each go to the support set.
Episode sample_episode(const Corpus& corpus, Split split, const SplitSpec& spec, int way,
                       int shot, int query_per_class, Rng& rng);

// Convenience: a deterministic stream of episodes. Episode i draws from an
// independent generator seeded base_seed XOR i, so the stream is identical
// however the loop is scheduled.
std::vector<Episode> sample_episode_stream(const Corpus& corpus, Split split,
                                           const SplitSpec& spec, int way, int shot,
                                           int query_per_class, std::uint64_t base_seed,
                                           std::size_t count);

}  // namespace pmeta
