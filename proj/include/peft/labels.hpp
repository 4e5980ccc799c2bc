#pragma once

#include <array>
#include <cstdint>
#include <string>

#include "peft/error.hpp"

// The 9-label BIO tag set over PER / ORG / LOC / DATE used by the NER data.

namespace peft {

enum class EntityType : std::int32_t { PER = 0, ORG = 1, LOC = 2, DATE = 3 };

constexpr std::size_t kNumEntityTypes = 4;
constexpr std::size_t kNumLabels = 9;  // O + B/I per type
using LabelId = std::int32_t;
constexpr LabelId kLabelO = 0;

inline const std::array<std::string, kNumLabels>& label_names() {
    static const std::array<std::string, kNumLabels> names{
        "O", "B-PER", "I-PER", "B-ORG", "I-ORG", "B-LOC", "I-LOC", "B-DATE", "I-DATE"};
    return names;
}

inline const std::string& entity_type_name(EntityType t) {
    static const std::array<std::string, kNumEntityTypes> names{"PER", "ORG", "LOC", "DATE"};
    return names[static_cast<std::size_t>(t)];
}

inline LabelId b_label(EntityType t) { return 1 + 2 * static_cast<LabelId>(t); }
inline LabelId i_label(EntityType t) { return 2 + 2 * static_cast<LabelId>(t); }

inline bool is_b_label(LabelId id) { return id >= 1 && id < static_cast<LabelId>(kNumLabels) && (id % 2) == 1; }
inline bool is_i_label(LabelId id) { return id >= 2 && id < static_cast<LabelId>(kNumLabels) && (id % 2) == 0; }

inline EntityType label_entity_type(LabelId id) {
    if (id <= 0 || id >= static_cast<LabelId>(kNumLabels))
        throw ContractError("label id " + std::to_string(id) + " carries no entity type");
    return static_cast<EntityType>((id - 1) / 2);
}

inline const std::string& label_name(LabelId id) {
    if (id < 0 || id >= static_cast<LabelId>(kNumLabels))
        throw ContractError("label id " + std::to_string(id) + " outside the 9-label set");
    return label_names()[static_cast<std::size_t>(id)];
}

// Returns -1 for tags outside the set; callers decide how to report.
inline LabelId label_id_or_negative(const std::string& tag) {
    const auto& names = label_names();
    for (std::size_t i = 0; i < names.size(); ++i)
        if (names[i] == tag) return static_cast<LabelId>(i);
    return -1;
}

}  // namespace peft
