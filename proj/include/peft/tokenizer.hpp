#pragma once

#include <algorithm>
#include <cstdint>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "peft/error.hpp"
#include "peft/rng.hpp"

// Byte-level BPE, trained per experiment. The alphabet is the 256 byte
// values, so any UTF-8 input encodes without unknown tokens and
// decode(encode(s)) returns s byte for byte.
//
// Id layout: 0 pad, 1 cls, 2 sep, 3 mask, 4 unk, 5..260 single bytes,
// then one id per learned merge in training order.

namespace peft {

class SubwordModel {
public:
    static constexpr std::int32_t kPad = 0;
    static constexpr std::int32_t kCls = 1;
    static constexpr std::int32_t kSep = 2;
    static constexpr std::int32_t kMask = 3;
    static constexpr std::int32_t kUnk = 4;
    static constexpr std::int32_t kByteOffset = 5;
    static constexpr std::size_t kBaseVocab = 261;  // specials + byte alphabet

    SubwordModel() {
        token_bytes_.resize(kBaseVocab);
        for (int b = 0; b < 256; ++b) token_bytes_[static_cast<std::size_t>(kByteOffset + b)] = std::string(1, static_cast<char>(b));
    }

    std::size_t vocab_size() const { return token_bytes_.size(); }
    std::size_t merge_count() const { return merges_.size(); }
    bool stopped_early() const { return stopped_early_; }

    const std::vector<std::pair<std::string, std::string>>& merges() const { return merges_; }

    bool is_special(std::int32_t id) const { return id >= 0 && id < kByteOffset; }

    // Byte string of a token; specials decode to nothing.
    const std::string& token_text(std::int32_t id) const {
        if (id < 0 || static_cast<std::size_t>(id) >= token_bytes_.size())
            throw std::out_of_range("tokenizer: id " + std::to_string(id) + " outside vocab " +
                                    std::to_string(token_bytes_.size()));
        return token_bytes_[static_cast<std::size_t>(id)];
    }

    // BPE encoding of raw text (no specials added).
    std::vector<std::int32_t> encode(const std::string& text) const {
        std::vector<std::int32_t> out;
        for (const auto& piece : pretokenize(text)) {
            const auto it = word_cache_.find(piece);
            if (it != word_cache_.end()) {
                out.insert(out.end(), it->second.begin(), it->second.end());
                continue;
            }
            const auto ids = encode_word(piece);
            word_cache_.emplace(piece, ids);
            out.insert(out.end(), ids.begin(), ids.end());
        }
        return out;
    }

    // cls + encoding + sep, truncated to max_len with the final sep kept.
    std::pair<std::vector<std::int32_t>, bool> encode_sentence(const std::string& text, std::size_t max_len) const {
        if (max_len < 2) throw ContractError("encode_sentence: max_len must be at least 2");
        std::vector<std::int32_t> ids{kCls};
        const auto body = encode(text);
        ids.insert(ids.end(), body.begin(), body.end());
        ids.push_back(kSep);
        bool overflow = false;
        if (ids.size() > max_len) {
            ids.resize(max_len - 1);
            ids.push_back(kSep);
            overflow = true;
        }
        return {ids, overflow};
    }

    // Concatenated bytes of all non-special tokens.
    std::string decode(const std::vector<std::int32_t>& ids) const {
        std::string out;
        for (const auto id : ids)
            if (!is_special(id)) out += token_text(id);
        return out;
    }

    // Learns merges greedily by pair frequency over space-delimited
    // pretokens. Ties break on the lexicographically smallest (left, right)
    // byte-string pair. Stops early when no pair occurs twice.
    static SubwordModel train(const std::vector<std::string>& sentences, std::size_t vocab_size, std::uint64_t seed) {
        (void)seed;  // the procedure is deterministic; the seed is part of the interface
        if (vocab_size <= kBaseVocab)
            throw ConfigError("tokenizer: vocab_size must exceed " + std::to_string(kBaseVocab) +
                              " (specials + byte alphabet), got " + std::to_string(vocab_size));
        SubwordModel model;

        std::map<std::string, std::size_t> word_freq;
        for (const auto& sentence : sentences)
            for (auto& piece : pretokenize(sentence)) ++word_freq[piece];

        struct Word {
            std::vector<std::int32_t> ids;
            std::size_t freq;
        };
        std::vector<Word> words;
        words.reserve(word_freq.size());
        for (const auto& [text, freq] : word_freq) {
            Word w;
            w.freq = freq;
            for (const unsigned char c : text) w.ids.push_back(kByteOffset + static_cast<std::int32_t>(c));
            words.push_back(std::move(w));
        }

        while (model.vocab_size() < vocab_size) {
            std::map<std::pair<std::int32_t, std::int32_t>, std::size_t> pair_counts;
            for (const auto& w : words)
                for (std::size_t i = 0; i + 1 < w.ids.size(); ++i)
                    pair_counts[{w.ids[i], w.ids[i + 1]}] += w.freq;

            std::pair<std::int32_t, std::int32_t> best{-1, -1};
            std::size_t best_count = 0;
            for (const auto& [pair, count] : pair_counts) {
                if (count > best_count) {
                    best = pair;
                    best_count = count;
                } else if (count == best_count && best_count > 0) {
                    const auto key = std::make_pair(model.token_text(pair.first), model.token_text(pair.second));
                    const auto best_key = std::make_pair(model.token_text(best.first), model.token_text(best.second));
                    if (key < best_key) best = pair;
                }
            }
            if (best_count < 2) {
                model.stopped_early_ = true;
                std::cerr << "tokenizer: stopping at vocab size " << model.vocab_size() << " of requested "
                          << vocab_size << " (no pair occurs twice)\n";
                break;
            }

            const std::int32_t new_id = static_cast<std::int32_t>(model.vocab_size());
            model.merges_.emplace_back(model.token_text(best.first), model.token_text(best.second));
            model.token_bytes_.push_back(model.token_text(best.first) + model.token_text(best.second));
            model.ranks_[best] = {model.merges_.size() - 1, new_id};

            for (auto& w : words) {
                std::vector<std::int32_t> merged;
                merged.reserve(w.ids.size());
                for (std::size_t i = 0; i < w.ids.size();) {
                    if (i + 1 < w.ids.size() && w.ids[i] == best.first && w.ids[i + 1] == best.second) {
                        merged.push_back(new_id);
                        i += 2;
                    } else {
                        merged.push_back(w.ids[i]);
                        ++i;
                    }
                }
                w.ids = std::move(merged);
            }
        }
        return model;
    }

    // FNV hash of the canonical serialization; used in run manifests.
    std::uint64_t vocab_hash() const { return fnv1a64(serialize()); }

    std::string serialize() const {
        std::ostringstream out;
        out << "peftlab-tokenizer v1\n";
        out << "vocab_size " << vocab_size() << "\n";
        out << "specials pad=0 cls=1 sep=2 mask=3 unk=4\n";
        out << "byte_offset 5\n";
        out << "merges " << merges_.size() << "\n";
        for (const auto& [left, right] : merges_) out << hex_bytes(left) << " " << hex_bytes(right) << "\n";
        return out.str();
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw FormatError("tokenizer: cannot open \"" + path + "\" for writing");
        const std::string text = serialize();
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
    }

    static SubwordModel load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw FormatError("tokenizer: cannot open \"" + path + "\"");
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse(text, path);
    }

    static SubwordModel parse(const std::string& text, const std::string& origin = "<string>") {
        std::istringstream in(text);
        std::string line;
        const auto next_line = [&](const char* what) {
            if (!std::getline(in, line))
                throw FormatError("tokenizer " + origin + ": missing " + std::string(what));
            return line;
        };
        if (next_line("header") != "peftlab-tokenizer v1")
            throw FormatError("tokenizer " + origin + ": unsupported header \"" + line + "\"");
        std::size_t declared_vocab = 0, merge_count = 0;
        {
            std::istringstream ls(next_line("vocab_size"));
            std::string key;
            ls >> key >> declared_vocab;
            if (key != "vocab_size") throw FormatError("tokenizer " + origin + ": expected vocab_size line");
        }
        if (next_line("specials") != "specials pad=0 cls=1 sep=2 mask=3 unk=4")
            throw FormatError("tokenizer " + origin + ": unsupported specials line \"" + line + "\"");
        if (next_line("byte_offset") != "byte_offset 5")
            throw FormatError("tokenizer " + origin + ": unsupported byte_offset line \"" + line + "\"");
        {
            std::istringstream ls(next_line("merges"));
            std::string key;
            ls >> key >> merge_count;
            if (key != "merges") throw FormatError("tokenizer " + origin + ": expected merges line");
        }
        SubwordModel model;
        std::unordered_map<std::string, std::int32_t> id_of;
        for (std::size_t i = 0; i < model.token_bytes_.size(); ++i)
            if (!model.token_bytes_[i].empty()) id_of[model.token_bytes_[i]] = static_cast<std::int32_t>(i);
        for (std::size_t i = 0; i < merge_count; ++i) {
            std::istringstream ls(next_line("merge entry"));
            std::string lhex, rhex;
            if (!(ls >> lhex >> rhex))
                throw FormatError("tokenizer " + origin + ": malformed merge line " + std::to_string(i + 1));
            const std::string left = unhex_bytes(lhex, origin), right = unhex_bytes(rhex, origin);
            const auto lit = id_of.find(left), rit = id_of.find(right);
            if (lit == id_of.end() || rit == id_of.end())
                throw FormatError("tokenizer " + origin + ": merge " + std::to_string(i + 1) +
                                  " references unknown symbols");
            const std::int32_t new_id = static_cast<std::int32_t>(model.vocab_size());
            model.merges_.emplace_back(left, right);
            model.token_bytes_.push_back(left + right);
            model.ranks_[{lit->second, rit->second}] = {i, new_id};
            id_of[left + right] = new_id;
        }
        if (declared_vocab != model.vocab_size())
            throw FormatError("tokenizer " + origin + ": declared vocab_size " + std::to_string(declared_vocab) +
                              " but merges produce " + std::to_string(model.vocab_size()));
        return model;
    }

    // Pretokens: every space run attaches to the following word; a trailing
    // space run forms its own pretoken. Concatenating pretokens reproduces
    // the input exactly.
    static std::vector<std::string> pretokenize(const std::string& text) {
        std::vector<std::string> out;
        std::size_t i = 0;
        while (i < text.size()) {
            std::size_t j = i;
            while (j < text.size() && text[j] == ' ') ++j;
            std::size_t k = j;
            while (k < text.size() && text[k] != ' ') ++k;
            out.push_back(text.substr(i, k - i));  // spaces + word, or trailing spaces
            i = k;
        }
        return out;
    }

private:
    std::vector<std::int32_t> encode_word(const std::string& piece) const {
        std::vector<std::int32_t> ids;
        ids.reserve(piece.size());
        for (const unsigned char c : piece) ids.push_back(kByteOffset + static_cast<std::int32_t>(c));
        while (ids.size() > 1) {
            std::size_t best_rank = SIZE_MAX, best_pos = 0;
            std::int32_t best_id = -1;
            for (std::size_t i = 0; i + 1 < ids.size(); ++i) {
                const auto it = ranks_.find({ids[i], ids[i + 1]});
                if (it != ranks_.end() && it->second.first < best_rank) {
                    best_rank = it->second.first;
                    best_pos = i;
                    best_id = it->second.second;
                }
            }
            if (best_id < 0) break;
            // merge every occurrence of the winning pair, left to right
            const std::int32_t left = ids[best_pos], right = ids[best_pos + 1];
            std::vector<std::int32_t> merged;
            merged.reserve(ids.size());
            for (std::size_t i = 0; i < ids.size();) {
                if (i + 1 < ids.size() && ids[i] == left && ids[i + 1] == right) {
                    merged.push_back(best_id);
                    i += 2;
                } else {
                    merged.push_back(ids[i]);
                    ++i;
                }
            }
            ids = std::move(merged);
        }
        return ids;
    }

    static std::string hex_bytes(const std::string& bytes) {
        static const char* digits = "0123456789abcdef";
        std::string out;
        out.reserve(bytes.size() * 2);
        for (const unsigned char c : bytes) {
            out.push_back(digits[c >> 4]);
            out.push_back(digits[c & 0xf]);
        }
        return out;
    }

    static std::string unhex_bytes(const std::string& hex, const std::string& origin) {
        if (hex.size() % 2) throw FormatError("tokenizer " + origin + ": odd-length hex \"" + hex + "\"");
        const auto nibble = [&](char c) -> unsigned {
            if (c >= '0' && c <= '9') return static_cast<unsigned>(c - '0');
            if (c >= 'a' && c <= 'f') return static_cast<unsigned>(c - 'a' + 10);
            throw FormatError("tokenizer " + origin + ": bad hex digit '" + std::string(1, c) + "'");
        };
        std::string out;
        out.reserve(hex.size() / 2);
        for (std::size_t i = 0; i < hex.size(); i += 2)
            out.push_back(static_cast<char>((nibble(hex[i]) << 4) | nibble(hex[i + 1])));
        return out;
    }

    std::vector<std::string> token_bytes_;                          // id -> bytes ("" for specials)
    std::vector<std::pair<std::string, std::string>> merges_;      // training order
    std::map<std::pair<std::int32_t, std::int32_t>, std::pair<std::size_t, std::int32_t>> ranks_;
    mutable std::unordered_map<std::string, std::vector<std::int32_t>> word_cache_;
    bool stopped_early_ = false;
};

}  // namespace peft
