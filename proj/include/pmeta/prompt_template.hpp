#pragma once

#include <string>
#include <vector>

#include "pmeta/error.hpp"
#include "pmeta/vocab.hpp"

namespace pmeta {

// One slot of a hard/soft prompt template.
struct TemplateSlot {
    enum class Kind { InputText, SoftToken, AnchorToken, MaskToken };
    Kind kind;
    int value = 0;  // soft index for SoftToken, vocab id for AnchorToken

    static TemplateSlot input() { return {Kind::InputText, 0}; }
    static TemplateSlot soft(int index) { return {Kind::SoftToken, index}; }
    static TemplateSlot anchor(int vocab_id) { return {Kind::AnchorToken, vocab_id}; }
    static TemplateSlot mask() { return {Kind::MaskToken, 0}; }

    bool operator==(const TemplateSlot&) const = default;
};

// Ordered slot sequence with exactly one [MASK], exactly one input-text slot
// and contiguous soft-token indices 0..m-1.
//
// Text form, whitespace separated:
//   {x}        the input text
//   {soft:k}   k consecutive soft tokens ({soft} is one)
//   [MASK]     the mask slot
//   word       an anchor token; must exist in the vocabulary
// Example: "[CLS] {x} the topic is [MASK] . [SEP]"
class PromptTemplate {
public:
    explicit PromptTemplate(std::vector<TemplateSlot> slots) : slots_(std::move(slots)) {
        validate();
    }

    static PromptTemplate parse(const std::string& text, const Vocab& vocab);

    std::string format(const Vocab& vocab) const;

    const std::vector<TemplateSlot>& slots() const { return slots_; }
    std::size_t soft_count() const { return soft_count_; }
    std::size_t mask_slot() const { return mask_slot_; }
    std::size_t input_slot() const { return input_slot_; }

    bool operator==(const PromptTemplate& o) const { return slots_ == o.slots_; }

private:
    void validate();

    std::vector<TemplateSlot> slots_;
    std::size_t soft_count_ = 0;
    std::size_t mask_slot_ = 0;
    std::size_t input_slot_ = 0;
};

}  // namespace pmeta
