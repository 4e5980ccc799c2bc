#pragma once

#include <array>
#include <cstdio>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peft/error.hpp"
#include "peft/labels.hpp"

// Entity-level span decoding and micro F1, plus the per-language results
// table with its unweighted Average footer.

namespace peft {

struct SpanEntity {
    EntityType type;
    std::size_t start;  // word index, inclusive
    std::size_t end;    // word index, exclusive

    bool operator==(const SpanEntity&) const = default;
    auto operator<=>(const SpanEntity&) const = default;
};

// Lenient BIO decoding: maximal B-X (I-X)* runs become spans, a stray I-X
// opens a new span, and a type change closes the open one. Never fails.
inline std::vector<SpanEntity> decode_bio(const std::vector<LabelId>& tags) {
    std::vector<SpanEntity> spans;
    bool open = false;
    EntityType open_type = EntityType::PER;
    std::size_t open_start = 0;
    const auto close_at = [&](std::size_t end) {
        if (open) spans.push_back({open_type, open_start, end});
        open = false;
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const LabelId t = tags[i];
        if (t == kLabelO) {
            close_at(i);
        } else if (is_b_label(t)) {
            close_at(i);
            open = true;
            open_type = label_entity_type(t);
            open_start = i;
        } else if (is_i_label(t)) {
            const EntityType ty = label_entity_type(t);
            if (open && ty == open_type) continue;
            close_at(i);
            open = true;
            open_type = ty;
            open_start = i;
        } else {
            throw ContractError("decode_bio: label id " + std::to_string(t) + " outside the 9-label set");
        }
    }
    close_at(tags.size());
    return spans;
}

// Canonical B/I tags for a non-overlapping span set.
inline std::vector<LabelId> encode_bio(const std::vector<SpanEntity>& spans, std::size_t length) {
    std::vector<LabelId> tags(length, kLabelO);
    for (const auto& s : spans) {
        if (s.start >= s.end || s.end > length)
            throw ContractError("encode_bio: span [" + std::to_string(s.start) + "," + std::to_string(s.end) +
                                ") outside sentence of length " + std::to_string(length));
        for (std::size_t i = s.start; i < s.end; ++i) {
            if (tags[i] != kLabelO) throw ContractError("encode_bio: overlapping spans");
            tags[i] = i == s.start ? b_label(s.type) : i_label(s.type);
        }
    }
    return tags;
}

struct ScoreCounts {
    std::size_t gold = 0;
    std::size_t predicted = 0;
    std::size_t correct = 0;

    double precision() const { return predicted ? static_cast<double>(correct) / static_cast<double>(predicted) : 0.0; }
    double recall() const { return gold ? static_cast<double>(correct) / static_cast<double>(gold) : 0.0; }
    double f1() const {
        const double p = precision(), r = recall();
        return (p + r) > 0 ? 2 * p * r / (p + r) : 0.0;
    }
};

struct F1Report {
    ScoreCounts micro;
    std::array<ScoreCounts, kNumEntityTypes> per_type;
};

// A predicted span is correct iff gold holds an identical (type, start, end)
// span in the same sentence. Micro counts pool across all sentences.
inline F1Report span_f1(const std::vector<std::vector<SpanEntity>>& gold,
                        const std::vector<std::vector<SpanEntity>>& pred) {
    if (gold.size() != pred.size())
        throw ContractError("span_f1: gold has " + std::to_string(gold.size()) + " sentences, pred has " +
                            std::to_string(pred.size()));
    F1Report report;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        std::map<SpanEntity, int> bag;
        for (const auto& g : gold[s]) {
            ++bag[g];
            ++report.micro.gold;
            ++report.per_type[static_cast<std::size_t>(g.type)].gold;
        }
        for (const auto& p : pred[s]) {
            ++report.micro.predicted;
            ++report.per_type[static_cast<std::size_t>(p.type)].predicted;
            const auto it = bag.find(p);
            if (it != bag.end() && it->second > 0) {
                --it->second;
                ++report.micro.correct;
                ++report.per_type[static_cast<std::size_t>(p.type)].correct;
            }
        }
    }
    return report;
}

// ---------------------------------------------------------------------------
// Results table
// ---------------------------------------------------------------------------

struct LanguageScores {
    std::optional<double> baseline_dev;
    std::optional<double> baseline_test;
    std::optional<double> adapter_dev;
    std::optional<double> adapter_test;
};

struct ResultsTable {
    std::vector<std::pair<std::string, LanguageScores>> rows;  // sorted by language
    LanguageScores average;                                    // unweighted means of present cells
    std::vector<std::string> warnings;

    std::string render_text() const;
};

namespace detail {
inline std::string cell(const std::optional<double>& v) {
    if (!v) return "-";
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", *v);
    return buf;
}
}  // namespace detail

// Footer means are computed on the unrounded values and only rounded for
// display. Missing cells are excluded from their column mean with a warning.
inline ResultsTable build_results_table(const std::map<std::string, LanguageScores>& runs) {
    ResultsTable table;
    struct Acc {
        double sum = 0;
        std::size_t n = 0;
        void add(const std::optional<double>& v) {
            if (v) {
                sum += *v;
                ++n;
            }
        }
        std::optional<double> mean() const {
            if (!n) return std::nullopt;
            return sum / static_cast<double>(n);
        }
    };
    Acc bd, bt, ad, at;
    for (const auto& [language, scores] : runs) {
        table.rows.emplace_back(language, scores);
        bd.add(scores.baseline_dev);
        bt.add(scores.baseline_test);
        ad.add(scores.adapter_dev);
        at.add(scores.adapter_test);
        const auto warn_missing = [&](const char* what, const std::optional<double>& v) {
            if (!v) table.warnings.push_back(language + ": missing " + what + ", excluded from the average");
        };
        warn_missing("baseline dev", scores.baseline_dev);
        warn_missing("baseline test", scores.baseline_test);
        warn_missing("adapter dev", scores.adapter_dev);
        warn_missing("adapter test", scores.adapter_test);
    }
    table.average = {bd.mean(), bt.mean(), ad.mean(), at.mean()};
    return table;
}

inline std::string ResultsTable::render_text() const {
    std::size_t name_width = 8;  // "Language" / "Average"
    for (const auto& [language, scores] : rows) name_width = std::max(name_width, language.size());
    std::string out;
    const auto pad_to = [&](std::string s, std::size_t w) {
        s.resize(std::max(s.size(), w), ' ');
        return s;
    };
    const auto line = [&](const std::string& name, const std::string& a, const std::string& b, const std::string& c,
                          const std::string& d) {
        out += pad_to(name, name_width) + "  " + pad_to(a, 12) + pad_to(b, 13) + pad_to(c, 11) + pad_to(d, 12) + "\n";
    };
    line("Language", "BaselineDev", "BaselineTest", "AdapterDev", "AdapterTest");
    for (const auto& [language, s] : rows)
        line(language, detail::cell(s.baseline_dev), detail::cell(s.baseline_test), detail::cell(s.adapter_dev),
             detail::cell(s.adapter_test));
    line("Average", detail::cell(average.baseline_dev), detail::cell(average.baseline_test),
         detail::cell(average.adapter_dev), detail::cell(average.adapter_test));
    return out;
}

}  // namespace peft
