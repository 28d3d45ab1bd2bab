#pragma once

#include <algorithm>
#include <set>
#include <vector>

#include "pmeta/error.hpp"
#include "pmeta/vocab.hpp"

namespace pmeta {

// Answer-label map: each label owns a nonempty set of vocabulary ids; sets
// are pairwise disjoint. A label's probability is the mean of the softmax
// probabilities over its answer ids.
class Verbalizer {
public:
    Verbalizer(std::vector<std::vector<int>> answers, const Vocab& vocab)
        : answers_(std::move(answers)) {
        std::set<int> seen;
        if (answers_.empty()) throw ContractError("verbalizer: no labels");
        for (auto& set : answers_) {
            if (set.empty()) throw ContractError("verbalizer: empty answer set");
            std::sort(set.begin(), set.end());
            for (int id : set) {
                if (!vocab.contains(id))
                    throw ContractError("verbalizer: answer id " + std::to_string(id) +
                                        " not in vocab");
                if (!seen.insert(id).second)
                    throw ContractError("verbalizer: answer id " + std::to_string(id) +
                                        " appears in two labels");
            }
        }
    }

    std::size_t num_labels() const { return answers_.size(); }

    const std::vector<int>& answers(int label) const {
        if (label < 0 || static_cast<std::size_t>(label) >= answers_.size())
            throw ContractError("verbalizer: unknown label " + std::to_string(label));
        return answers_[static_cast<std::size_t>(label)];
    }

    // Restriction to an episode-local palette: local label j answers with
    // the global palette[j] label's set.
    Verbalizer restricted(const std::vector<int>& palette, const Vocab& vocab) const {
        std::vector<std::vector<int>> sub;
        sub.reserve(palette.size());
        for (int global : palette) sub.push_back(answers(global));
        return Verbalizer(std::move(sub), vocab);
    }

private:
    std::vector<std::vector<int>> answers_;
};

}  // namespace pmeta
