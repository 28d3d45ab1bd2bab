#include "pmeta/prompt_template.hpp"

#include <charconv>
#include <sstream>

namespace pmeta {

void PromptTemplate::validate() {
    std::size_t masks = 0, inputs = 0;
    int next_soft = 0;
    for (std::size_t i = 0; i < slots_.size(); ++i) {
        const TemplateSlot& s = slots_[i];
        switch (s.kind) {
            case TemplateSlot::Kind::MaskToken:
                ++masks;
                mask_slot_ = i;
                break;
            case TemplateSlot::Kind::InputText:
                ++inputs;
                input_slot_ = i;
                break;
            case TemplateSlot::Kind::SoftToken:
                if (s.value != next_soft)
                    throw ContractError("template: soft indices must be 0..m-1 in order");
                ++next_soft;
                break;
            case TemplateSlot::Kind::AnchorToken:
                if (s.value < 0) throw ContractError("template: negative anchor id");
                break;
        }
    }
    if (masks != 1) throw ContractError("template: exactly one [MASK] slot required");
    if (inputs != 1) throw ContractError("template: exactly one {x} slot required");
    soft_count_ = static_cast<std::size_t>(next_soft);
}

PromptTemplate PromptTemplate::parse(const std::string& text, const Vocab& vocab) {
    std::vector<TemplateSlot> slots;
    std::istringstream in(text);
    std::string atom;
    int soft_index = 0;
    while (in >> atom) {
        if (atom == "{x}") {
            slots.push_back(TemplateSlot::input());
        } else if (atom == "[MASK]") {
            slots.push_back(TemplateSlot::mask());
        } else if (atom == "{soft}") {
            slots.push_back(TemplateSlot::soft(soft_index++));
        } else if (atom.rfind("{soft:", 0) == 0 && atom.back() == '}') {
            int k = 0;
            const char* first = atom.data() + 6;
            const char* last = atom.data() + atom.size() - 1;
            auto res = std::from_chars(first, last, k);
            if (res.ec != std::errc{} || res.ptr != last || k < 1)
                throw ParseError("template: bad soft-token count in '" + atom + "'");
            for (int i = 0; i < k; ++i) slots.push_back(TemplateSlot::soft(soft_index++));
        } else {
            const int id = vocab.id(atom);
            if (id < 0) throw ParseError("template: unknown anchor token '" + atom + "'");
            slots.push_back(TemplateSlot::anchor(id));
        }
    }
    if (slots.empty()) throw ParseError("template: empty");
    return PromptTemplate(std::move(slots));
}

std::string PromptTemplate::format(const Vocab& vocab) const {
    std::string out;
    std::size_t i = 0;
    while (i < slots_.size()) {
        if (!out.empty()) out += ' ';
        const TemplateSlot& s = slots_[i];
        switch (s.kind) {
            case TemplateSlot::Kind::InputText:
                out += "{x}";
                ++i;
                break;
            case TemplateSlot::Kind::MaskToken:
                out += "[MASK]";
                ++i;
                break;
            case TemplateSlot::Kind::AnchorToken:
                out += vocab.token(s.value);
                ++i;
                break;
            case TemplateSlot::Kind::SoftToken: {
                std::size_t run = 1;
                while (i + run < slots_.size() &&
                       slots_[i + run].kind == TemplateSlot::Kind::SoftToken)
                    ++run;
                out += "{soft:" + std::to_string(run) + "}";
                i += run;
                break;
            }
        }
    }
    return out;
}

}  // namespace pmeta
