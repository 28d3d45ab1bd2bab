#include "pmeta/episodes.hpp"

#include <algorithm>
#include <set>

namespace pmeta {

namespace {

void validate_splits(const Corpus& corpus, const SplitSpec& spec) {
    std::set<int> seen;
    for (const auto* labels : {&spec.train_labels, &spec.val_labels, &spec.test_labels}) {
        for (int l : *labels) {
            if (l < 0 || static_cast<std::size_t>(l) >= corpus.num_labels())
                throw ContractError("splits: label " + std::to_string(l) + " out of range");
            if (!seen.insert(l).second)
                throw ContractError("splits: label " + std::to_string(l) +
                                    " appears in two splits");
        }
    }
    if (spec.train_labels.empty() || spec.val_labels.empty() || spec.test_labels.empty())
        throw CapacityError("splits: every split needs at least one label");
}

}  // namespace

SplitSpec make_splits_by_count(const Corpus& corpus, std::size_t train_count,
                               std::size_t val_count, std::size_t test_count,
                               std::uint64_t seed) {
    const std::size_t total = corpus.num_labels();
    if (train_count + val_count + test_count > total)
        throw CapacityError("splits: requested " +
                            std::to_string(train_count + val_count + test_count) +
                            " labels, corpus has " + std::to_string(total));
    std::vector<int> order(total);
    for (std::size_t i = 0; i < total; ++i) order[i] = static_cast<int>(i);
    Rng rng(seed);
    rng.shuffle(order);

    SplitSpec spec;
    spec.seed = seed;
    auto take = [&](std::size_t count, std::vector<int>& dst, std::size_t offset) {
        dst.assign(order.begin() + static_cast<std::ptrdiff_t>(offset),
                   order.begin() + static_cast<std::ptrdiff_t>(offset + count));
        std::sort(dst.begin(), dst.end());
    };
    take(train_count, spec.train_labels, 0);
    take(val_count, spec.val_labels, train_count);
    take(test_count, spec.test_labels, train_count + val_count);
    validate_splits(corpus, spec);
    return spec;
}

SplitSpec make_splits(const Corpus& corpus, double train_frac, double val_frac, double test_frac,
                      std::uint64_t seed) {
    if (train_frac <= 0 || val_frac <= 0 || test_frac <= 0 ||
        train_frac + val_frac + test_frac > 1.0 + 1e-12)
        throw ContractError("splits: fractions must be positive and sum to at most 1");
    const auto total = static_cast<double>(corpus.num_labels());
    auto count = [&](double f) { return std::max<std::size_t>(1, static_cast<std::size_t>(f * total)); };
    const std::size_t val_count = count(val_frac);
    const std::size_t test_count = count(test_frac);
    if (val_count + test_count >= corpus.num_labels())
        throw CapacityError("splits: too few labels for the requested fractions");
    const std::size_t train_count = corpus.num_labels() - val_count - test_count;
    return make_splits_by_count(corpus, train_count, val_count, test_count, seed);
}

SplitSpec make_splits_explicit(const Corpus& corpus, std::vector<int> train, std::vector<int> val,
                               std::vector<int> test) {
    SplitSpec spec;
    spec.train_labels = std::move(train);
    spec.val_labels = std::move(val);
    spec.test_labels = std::move(test);
    validate_splits(corpus, spec);
    return spec;
}

const std::vector<int>& split_labels(const SplitSpec& spec, Split split) {
    switch (split) {
        case Split::Train: return spec.train_labels;
        case Split::Val: return spec.val_labels;
        default: return spec.test_labels;
    }
}

Episode sample_episode(const Corpus& corpus, Split split, const SplitSpec& spec, int way,
                       int shot, int query_per_class, Rng& rng) {
    if (way < 1 || shot < 1 || query_per_class < 1)
        throw ContractError("sample_episode: way/shot/query must be >= 1");
    const std::vector<int>& labels = split_labels(spec, split);
    if (labels.size() < static_cast<std::size_t>(way))
        throw CapacityError("sample_episode: split '" + std::string(split_name(split)) + "' has " +
                            std::to_string(labels.size()) + " labels, need " +
                            std::to_string(way));

    const auto by_label = corpus.examples_by_label();
    const std::size_t need = static_cast<std::size_t>(shot) + static_cast<std::size_t>(query_per_class);

    Episode ep;
    ep.way = way;
    ep.shot = shot;
    ep.query_per_class = query_per_class;

    const std::vector<std::size_t> chosen = rng.sample_indices(labels.size(), static_cast<std::size_t>(way));
    for (std::size_t local = 0; local < chosen.size(); ++local) {
        const int global = labels[chosen[local]];
        const auto& pool = by_label[static_cast<std::size_t>(global)];
        if (pool.size() < need)
            throw CapacityError("sample_episode: label '" +
                                corpus.label_names[static_cast<std::size_t>(global)] + "' has " +
                                std::to_string(pool.size()) + " examples, need " +
                                std::to_string(need));
        ep.palette.push_back(global);
        const std::vector<std::size_t> picks = rng.sample_indices(pool.size(), need);
        for (std::size_t i = 0; i < need; ++i) {
            Example ex = corpus.examples[pool[picks[i]]];
            ex.label = static_cast<int>(local);
            (i < static_cast<std::size_t>(shot) ? ep.support : ep.query).push_back(std::move(ex));
        }
    }
    return ep;
}

std::vector<Episode> sample_episode_stream(const Corpus& corpus, Split split,
                                           const SplitSpec& spec, int way, int shot,
                                           int query_per_class, std::uint64_t base_seed,
                                           std::size_t count) {
    std::vector<Episode> out;
    out.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        Rng rng = Rng::derive(base_seed, i);
        out.push_back(sample_episode(corpus, split, spec, way, shot, query_per_class, rng));
    }
    return out;
}

}  // namespace pmeta
