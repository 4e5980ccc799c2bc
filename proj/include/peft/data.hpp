#pragma once

#include <cstdint>
#include <fstream>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

#include "peft/error.hpp"
#include "peft/labels.hpp"
#include "peft/tokenizer.hpp"

// Corpus and CoNLL ingestion, subword label alignment, and dataset manifests.

namespace peft {

// ---------------------------------------------------------------------------
// Raw text corpora (one sentence per line)
// ---------------------------------------------------------------------------

struct Corpus {
    std::vector<std::string> sentences;
    std::string source_path;
    std::size_t total_lines = 0;  // including blank lines

    std::size_t size() const { return sentences.size(); }
};

// Well-formedness check covering continuation bytes, overlong encodings,
// surrogates and the U+10FFFF ceiling.
inline bool valid_utf8(std::string_view s) {
    std::size_t i = 0;
    while (i < s.size()) {
        const unsigned char c = static_cast<unsigned char>(s[i]);
        std::size_t extra;
        std::uint32_t cp, min_cp;
        if (c < 0x80) {
            ++i;
            continue;
        } else if ((c >> 5) == 0x6) {
            extra = 1;
            cp = c & 0x1f;
            min_cp = 0x80;
        } else if ((c >> 4) == 0xe) {
            extra = 2;
            cp = c & 0x0f;
            min_cp = 0x800;
        } else if ((c >> 3) == 0x1e) {
            extra = 3;
            cp = c & 0x07;
            min_cp = 0x10000;
        } else {
            return false;
        }
        if (i + extra >= s.size()) return false;
        for (std::size_t k = 1; k <= extra; ++k) {
            const unsigned char cc = static_cast<unsigned char>(s[i + k]);
            if ((cc >> 6) != 0x2) return false;
            cp = (cp << 6) | (cc & 0x3f);
        }
        if (cp < min_cp) return false;                  // overlong
        if (cp >= 0xD800 && cp <= 0xDFFF) return false; // surrogate
        if (cp > 0x10FFFF) return false;
        i += extra + 1;
    }
    return true;
}

namespace detail {
inline std::string strip_cr(std::string line) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

inline bool is_blank(const std::string& line) {
    for (const char c : line)
        if (c != ' ' && c != '\t') return false;
    return true;
}
}  // namespace detail

inline Corpus load_text_corpus(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("corpus: cannot open \"" + path + "\"");
    Corpus corpus;
    corpus.source_path = path;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(f, line)) {
        ++line_no;
        line = detail::strip_cr(line);
        if (!valid_utf8(line))
            throw DataError("corpus " + path + ": invalid UTF-8 on line " + std::to_string(line_no));
        if (detail::is_blank(line)) continue;
        corpus.sentences.push_back(line);
    }
    corpus.total_lines = line_no;
    return corpus;
}

// ---------------------------------------------------------------------------
// CoNLL-style tagged sentences ("token tag", blank-line separated)
// ---------------------------------------------------------------------------

struct TaggedSentence {
    std::vector<std::string> tokens;
    std::vector<LabelId> tags;

    std::size_t size() const { return tokens.size(); }
};

inline std::vector<TaggedSentence> load_conll(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("conll: cannot open \"" + path + "\"");
    std::vector<TaggedSentence> sentences;
    TaggedSentence current;
    std::string line;
    std::size_t line_no = 0;
    const auto flush = [&] {
        if (!current.tokens.empty()) {
            sentences.push_back(std::move(current));
            current = TaggedSentence{};
        }
    };
    while (std::getline(f, line)) {
        ++line_no;
        line = detail::strip_cr(line);
        if (!valid_utf8(line))
            throw DataError("conll " + path + ": invalid UTF-8 on line " + std::to_string(line_no));
        if (detail::is_blank(line)) {
            flush();
            continue;
        }
        if (line[0] == '#') continue;
        // single space delimiter, tab accepted as fallback
        std::size_t delim = line.find(' ');
        if (delim == std::string::npos) delim = line.find('\t');
        if (delim == std::string::npos)
            throw FormatError("conll " + path + ": line " + std::to_string(line_no) + " has no tag column");
        if (delim == 0)
            throw FormatError("conll " + path + ": line " + std::to_string(line_no) + " has an empty token");
        const std::string token = line.substr(0, delim);
        const std::string tag = line.substr(delim + 1);
        if (tag.find(' ') != std::string::npos || tag.find('\t') != std::string::npos)
            throw FormatError("conll " + path + ": line " + std::to_string(line_no) +
                              " has more than two columns (token contains whitespace?)");
        if (tag.empty())
            throw FormatError("conll " + path + ": line " + std::to_string(line_no) + " has an empty tag");
        const LabelId id = label_id_or_negative(tag);
        if (id < 0)
            throw DataError("conll " + path + ": line " + std::to_string(line_no) + ": tag \"" + tag +
                            "\" is not in the 9-label set");
        current.tokens.push_back(token);
        current.tags.push_back(id);
    }
    flush();
    return sentences;
}

inline void write_conll(const std::vector<TaggedSentence>& sentences, const std::string& path) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("conll: cannot open \"" + path + "\" for writing");
    for (const auto& s : sentences) {
        for (std::size_t i = 0; i < s.tokens.size(); ++i)
            f << s.tokens[i] << ' ' << label_name(s.tags[i]) << '\n';
        f << '\n';
    }
}

// ---------------------------------------------------------------------------
// Subword label alignment
// ---------------------------------------------------------------------------

// Each word's first subtoken carries its label; continuation subtokens, cls,
// sep and pad are excluded from the loss. Words whose subtokens are all
// truncated away are dropped (words_dropped counts them).
struct AlignedExample {
    std::vector<std::int32_t> token_ids;
    std::vector<LabelId> label_ids;        // aligned to token_ids; O where excluded
    std::vector<std::uint8_t> loss_mask;   // 1 at label-bearing positions
    std::vector<std::int32_t> word_token_pos;  // word index -> token position, -1 if dropped
    std::size_t words_kept = 0;
    std::size_t words_dropped = 0;
};

inline AlignedExample align_labels(const SubwordModel& model, const TaggedSentence& sentence, std::size_t max_len) {
    if (sentence.tokens.size() != sentence.tags.size())
        throw ContractError("align_labels: tokens and tags differ in length");
    if (max_len < 2) throw ContractError("align_labels: max_len must be at least 2");
    AlignedExample out;
    out.token_ids.push_back(SubwordModel::kCls);
    const std::size_t body_limit = max_len - 1;  // keep room for sep
    for (std::size_t wi = 0; wi < sentence.tokens.size(); ++wi) {
        const std::string text = wi == 0 ? sentence.tokens[wi] : " " + sentence.tokens[wi];
        const auto pieces = model.encode(text);
        std::int32_t first_pos = -1;
        for (std::size_t pi = 0; pi < pieces.size(); ++pi) {
            if (out.token_ids.size() >= body_limit) break;
            if (pi == 0) first_pos = static_cast<std::int32_t>(out.token_ids.size());
            out.token_ids.push_back(pieces[pi]);
        }
        out.word_token_pos.push_back(first_pos);
        if (first_pos >= 0)
            ++out.words_kept;
        else
            ++out.words_dropped;
    }
    out.token_ids.push_back(SubwordModel::kSep);
    out.label_ids.assign(out.token_ids.size(), kLabelO);
    out.loss_mask.assign(out.token_ids.size(), 0);
    for (std::size_t wi = 0; wi < out.word_token_pos.size(); ++wi) {
        const std::int32_t pos = out.word_token_pos[wi];
        if (pos < 0) continue;
        out.label_ids[static_cast<std::size_t>(pos)] = sentence.tags[wi];
        out.loss_mask[static_cast<std::size_t>(pos)] = 1;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Dataset manifests
// ---------------------------------------------------------------------------

// Text manifest declaring split files and expected sentence counts:
//   peftlab-manifest v1
//   entry ner.train kind=conll path=ner.train.conll count=1750
//   total ner 2500
// `total` lines are a pure consistency check: entries sharing the prefix
// must sum to the declared size.

struct ManifestEntry {
    std::string name;
    std::string kind;  // "text" or "conll"
    std::string path;
    std::size_t count = 0;
};

struct DatasetManifest {
    std::vector<ManifestEntry> entries;
    std::vector<std::pair<std::string, std::size_t>> totals;

    const ManifestEntry* find(const std::string& name) const {
        for (const auto& e : entries)
            if (e.name == name) return &e;
        return nullptr;
    }

    const ManifestEntry& at(const std::string& name) const {
        const auto* e = find(name);
        if (!e) throw DataError("manifest: no entry named \"" + name + "\"");
        return *e;
    }

    // Pure structural check: totals match the sum of their members.
    void check_totals() const {
        for (const auto& [prefix, declared] : totals) {
            std::size_t sum = 0;
            bool any = false;
            for (const auto& e : entries)
                if (e.name.rfind(prefix + ".", 0) == 0) {
                    sum += e.count;
                    any = true;
                }
            if (!any) throw DataError("manifest: total \"" + prefix + "\" has no member entries");
            if (sum != declared)
                throw DataError("manifest: entries under \"" + prefix + "\" sum to " + std::to_string(sum) +
                                ", declared total is " + std::to_string(declared));
        }
    }

    // Loads each referenced file and checks the sentence counts.
    void verify_files(const std::string& base_dir) const {
        for (const auto& e : entries) {
            const std::string full = base_dir.empty() ? e.path : base_dir + "/" + e.path;
            std::size_t actual;
            if (e.kind == "text")
                actual = load_text_corpus(full).size();
            else if (e.kind == "conll")
                actual = load_conll(full).size();
            else
                throw FormatError("manifest: entry \"" + e.name + "\" has unknown kind \"" + e.kind + "\"");
            if (actual != e.count)
                throw DataError("manifest: \"" + e.name + "\" declares " + std::to_string(e.count) +
                                " sentences but " + full + " has " + std::to_string(actual));
        }
    }

    std::string serialize() const {
        std::ostringstream out;
        out << "peftlab-manifest v1\n";
        for (const auto& e : entries)
            out << "entry " << e.name << " kind=" << e.kind << " path=" << e.path << " count=" << e.count << "\n";
        for (const auto& [prefix, total] : totals) out << "total " << prefix << " " << total << "\n";
        return out.str();
    }

    void save(const std::string& path) const {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f) throw DataError("manifest: cannot open \"" + path + "\" for writing");
        const std::string text = serialize();
        f.write(text.data(), static_cast<std::streamsize>(text.size()));
    }

    static DatasetManifest parse(const std::string& text, const std::string& origin = "<string>") {
        std::istringstream in(text);
        std::string line;
        std::size_t line_no = 0;
        DatasetManifest m;
        if (!std::getline(in, line) || detail::strip_cr(line) != "peftlab-manifest v1")
            throw FormatError("manifest " + origin + ": unsupported header");
        while (std::getline(in, line)) {
            ++line_no;
            line = detail::strip_cr(line);
            if (detail::is_blank(line) || line[0] == '#') continue;
            std::istringstream ls(line);
            std::string word;
            ls >> word;
            if (word == "entry") {
                ManifestEntry e;
                std::string field;
                ls >> e.name;
                bool have_kind = false, have_path = false, have_count = false;
                while (ls >> field) {
                    if (field.rfind("kind=", 0) == 0) {
                        e.kind = field.substr(5);
                        have_kind = true;
                    } else if (field.rfind("path=", 0) == 0) {
                        e.path = field.substr(5);
                        have_path = true;
                    } else if (field.rfind("count=", 0) == 0) {
                        e.count = std::stoull(field.substr(6));
                        have_count = true;
                    } else {
                        throw FormatError("manifest " + origin + ": line " + std::to_string(line_no + 1) +
                                          ": unknown field \"" + field + "\"");
                    }
                }
                if (e.name.empty() || !have_kind || !have_path || !have_count)
                    throw FormatError("manifest " + origin + ": line " + std::to_string(line_no + 1) +
                                      ": entry needs name, kind, path and count");
                m.entries.push_back(std::move(e));
            } else if (word == "total") {
                std::string prefix;
                std::size_t total;
                if (!(ls >> prefix >> total))
                    throw FormatError("manifest " + origin + ": line " + std::to_string(line_no + 1) +
                                      ": total needs a prefix and a size");
                m.totals.emplace_back(prefix, total);
            } else {
                throw FormatError("manifest " + origin + ": line " + std::to_string(line_no + 1) +
                                  ": unknown directive \"" + word + "\"");
            }
        }
        return m;
    }

    static DatasetManifest load(const std::string& path) {
        std::ifstream f(path, std::ios::binary);
        if (!f) throw DataError("manifest: cannot open \"" + path + "\"");
        std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return parse(text, path);
    }
};

}  // namespace peft
