#pragma once

#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "pmeta/error.hpp"

namespace pmeta {

// Token alphabet with the reserved ids every prompt sequence relies on.
// [UNK] is a fixed convention for out-of-vocabulary words at ingestion time.
class Vocab {
public:
    static constexpr int kPad = 0;
    static constexpr int kUnk = 1;
    static constexpr int kCls = 2;
    static constexpr int kSep = 3;
    static constexpr int kMask = 4;

    static Vocab with_reserved() {
        Vocab v;
        v.add("[PAD]");
        v.add("[UNK]");
        v.add("[CLS]");
        v.add("[SEP]");
        v.add("[MASK]");
        return v;
    }

    int add(std::string token) {
        if (token.empty()) throw ContractError("vocab: empty token");
        if (index_.count(token)) throw ContractError("vocab: duplicate token " + token);
        index_.emplace(token, static_cast<int>(tokens_.size()));
        tokens_.push_back(std::move(token));
        return static_cast<int>(tokens_.size()) - 1;
    }

    int add_or_get(const std::string& token) {
        auto it = index_.find(token);
        return it != index_.end() ? it->second : add(token);
    }

    int id(std::string_view token) const {
        auto it = index_.find(std::string(token));
        return it != index_.end() ? it->second : -1;
    }

    int id_or_unk(std::string_view token) const {
        const int i = id(token);
        return i >= 0 ? i : kUnk;
    }

    const std::string& token(int i) const {
        if (i < 0 || static_cast<std::size_t>(i) >= tokens_.size())
            throw ContractError("vocab: id out of range");
        return tokens_[static_cast<std::size_t>(i)];
    }

    bool contains(int i) const { return i >= 0 && static_cast<std::size_t>(i) < tokens_.size(); }

    std::size_t size() const { return tokens_.size(); }
    const std::vector<std::string>& tokens() const { return tokens_; }

    int pad_id() const { return kPad; }
    int unk_id() const { return kUnk; }
    int cls_id() const { return kCls; }
    int sep_id() const { return kSep; }
    int mask_id() const { return kMask; }

    bool operator==(const Vocab& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, int> index_;
};

}  // namespace pmeta
