#pragma once

#include <span>
#include <vector>

namespace pmeta {

// One labeled text. Depending on context the label is a corpus-global id or
// an episode-local palette id; the consumer's verbalizer decides.
struct Example {
    std::vector<int> tokens;
    int label = 0;

    bool operator==(const Example&) const = default;
};

using Batch = std::span<const Example>;

}  // namespace pmeta
