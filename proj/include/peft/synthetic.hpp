#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "peft/data.hpp"
#include "peft/error.hpp"
#include "peft/labels.hpp"
#include "peft/rng.hpp"

// Deterministic synthetic corpora for the acceptance pipeline. One seeded
// "language" with three word classes:
//   - a handful of function words under a steep Zipf law (low unigram
//     entropy, so masked-token prediction is genuinely learnable),
//   - content words that always travel in fixed pairs (bidirectional
//     context carries signal),
//   - entity words whose tag is a pure function of their lexical shape:
//     span-opening words start Pp/Qq/Ll/Dd by type, continuation words
//     start Xp/Xq/Xl/Xd, and suffixes are drawn fresh per mention so the
//     tokenizer learns the prefixes rather than whole words.
// Entity chunks are never adjacent, so the BIO tagging of a sentence is
// recoverable from the surface exactly.

namespace peft {

struct SyntheticSpec {
    std::uint64_t seed = 13;
    std::size_t corpus_sentences = 1000;
    std::size_t ner_train = 600;
    std::size_t ner_dev = 150;
    std::size_t ner_test = 250;
};

struct SyntheticData {
    std::vector<std::string> corpus;  // raw text for tokenizer + adapter pre-training
    std::vector<TaggedSentence> ner_train;
    std::vector<TaggedSentence> ner_dev;
    std::vector<TaggedSentence> ner_test;
};

namespace detail {

class SyntheticLanguage {
public:
    explicit SyntheticLanguage(std::uint64_t seed) : rng_(Rng::stream(seed, "synthetic")) {
        std::set<std::string> taken;
        const auto fresh_word = [&](std::size_t min_len, std::size_t max_len) {
            for (;;) {
                std::string w;
                const std::size_t len = min_len + rng_.uniform_int(max_len - min_len + 1);
                for (std::size_t i = 0; i < len; ++i) w.push_back(random_letter());
                if (taken.insert(w).second) return w;
            }
        };
        for (int i = 0; i < 8; ++i) function_.push_back(fresh_word(2, 3));
        for (int i = 0; i < 12; ++i) {
            content_left_.push_back(fresh_word(4, 6));
            content_right_.push_back(fresh_word(4, 6));
        }

        // steep Zipf over the function words keeps unigram entropy low
        double total = 0.0;
        for (std::size_t i = 0; i < function_.size(); ++i) {
            total += 1.0 / std::pow(static_cast<double>(i + 1), 2.0);
            function_cdf_.push_back(total);
        }
        for (auto& v : function_cdf_) v /= total;
    }

    std::string mlm_sentence() {
        std::vector<std::string> words;
        const std::size_t target = 8 + rng_.uniform_int(7);
        while (words.size() < target) {
            const float u = rng_.uniform();
            if (u < 0.88f) {
                words.push_back(pick_function());
            } else if (u < 0.97f) {
                const std::size_t p = rng_.uniform_int(content_left_.size());
                words.push_back(content_left_[p]);
                words.push_back(content_right_[p]);  // fixed collocation
            } else {
                // entity mentions use the same shapes as the NER data, so the
                // tokenizer learns both prefix families
                const auto type = static_cast<EntityType>(rng_.uniform_int(kNumEntityTypes));
                words.push_back(entity_open_word(type));
                if (rng_.uniform() < 0.35f) words.push_back(entity_cont_word(type));
            }
        }
        return join(words);
    }

    TaggedSentence ner_sentence() {
        TaggedSentence s;
        const std::size_t target = 5 + rng_.uniform_int(5);
        bool last_was_entity = false;
        while (s.tokens.size() < target) {
            if (!last_was_entity && rng_.uniform() < 0.32f) {
                const auto type = static_cast<EntityType>(rng_.uniform_int(kNumEntityTypes));
                s.tokens.push_back(entity_open_word(type));
                s.tags.push_back(b_label(type));
                if (rng_.uniform() < 0.35f) {
                    s.tokens.push_back(entity_cont_word(type));
                    s.tags.push_back(i_label(type));
                }
                last_was_entity = true;  // a filler must follow before the next entity
                continue;
            }
            last_was_entity = false;
            if (rng_.uniform() < 0.6f) {
                s.tokens.push_back(pick_function());
                s.tags.push_back(kLabelO);
            } else {
                const std::size_t p = rng_.uniform_int(content_left_.size());
                s.tokens.push_back(content_left_[p]);
                s.tags.push_back(kLabelO);
                s.tokens.push_back(content_right_[p]);
                s.tags.push_back(kLabelO);
            }
        }
        return s;
    }

private:
    static constexpr const char* kOpenPrefix[kNumEntityTypes] = {"Pp", "Qq", "Ll", "Dd"};
    static constexpr const char* kContPrefix[kNumEntityTypes] = {"Xp", "Xq", "Xl", "Xd"};

    char random_letter() { return static_cast<char>('a' + rng_.uniform_int(12)); }

    std::string fresh_suffix() {
        std::string s;
        const std::size_t len = 3;
        for (std::size_t i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng_.uniform_int(8)));
        return s;
    }

    std::string entity_open_word(EntityType t) { return kOpenPrefix[static_cast<std::size_t>(t)] + fresh_suffix(); }
    std::string entity_cont_word(EntityType t) { return kContPrefix[static_cast<std::size_t>(t)] + fresh_suffix(); }

    std::string pick_function() {
        const double u = rng_.uniform_double();
        for (std::size_t i = 0; i < function_cdf_.size(); ++i)
            if (u < function_cdf_[i]) return function_[i];
        return function_.back();
    }

    static std::string join(const std::vector<std::string>& words) {
        std::string out;
        for (std::size_t i = 0; i < words.size(); ++i) {
            if (i) out.push_back(' ');
            out += words[i];
        }
        return out;
    }

    Rng rng_;
    std::vector<std::string> function_;
    std::vector<double> function_cdf_;
    std::vector<std::string> content_left_, content_right_;
};

}  // namespace detail

inline SyntheticData make_synthetic(const SyntheticSpec& spec) {
    detail::SyntheticLanguage lang(spec.seed);
    SyntheticData data;
    for (std::size_t i = 0; i < spec.corpus_sentences; ++i) data.corpus.push_back(lang.mlm_sentence());
    for (std::size_t i = 0; i < spec.ner_train; ++i) data.ner_train.push_back(lang.ner_sentence());
    for (std::size_t i = 0; i < spec.ner_dev; ++i) data.ner_dev.push_back(lang.ner_sentence());
    for (std::size_t i = 0; i < spec.ner_test; ++i) data.ner_test.push_back(lang.ner_sentence());
    return data;
}

// Writes corpus.txt, ner.{train,dev,test}.conll and data.manifest into
// `dir`. Deterministic: the same spec always produces identical bytes.
inline void write_synthetic(const SyntheticData& data, const std::string& dir) {
    std::filesystem::create_directories(dir);
    {
        std::ofstream f(dir + "/corpus.txt", std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("synthetic: cannot write corpus in \"" + dir + "\"");
        for (const auto& line : data.corpus) f << line << '\n';
    }
    write_conll(data.ner_train, dir + "/ner.train.conll");
    write_conll(data.ner_dev, dir + "/ner.dev.conll");
    write_conll(data.ner_test, dir + "/ner.test.conll");
    DatasetManifest manifest;
    manifest.entries.push_back({"adapter.train", "text", "corpus.txt", data.corpus.size()});
    manifest.entries.push_back({"ner.train", "conll", "ner.train.conll", data.ner_train.size()});
    manifest.entries.push_back({"ner.dev", "conll", "ner.dev.conll", data.ner_dev.size()});
    manifest.entries.push_back({"ner.test", "conll", "ner.test.conll", data.ner_test.size()});
    manifest.totals.emplace_back("ner", data.ner_train.size() + data.ner_dev.size() + data.ner_test.size());
    manifest.save(dir + "/data.manifest");
}

}  // namespace peft
