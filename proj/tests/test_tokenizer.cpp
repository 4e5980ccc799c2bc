#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <string>
#include <vector>

#include "doctest.h"
#include "peft/rng.hpp"
#include "peft/tokenizer.hpp"
#include "support/tmpdir.hpp"

using namespace peft;

namespace {

std::vector<std::string> sample_corpus() {
    return {
        "the cat sat on the mat",
        "the dog sat on the log",
        "a cat and a dog met at the mat",
        "kinshasa is a city",
        "amharic text goes here",
    };
}

std::vector<std::string> round_trip_cases() {
    return {
        "",
        "hello world",
        "  leading and   multiple spaces ",
        "trailing spaces   ",
        "tabs\tstay\tinside words",
        "\xe1\x88\xb0\xe1\x88\x8b\xe1\x88\x9d",  // Ge'ez script greeting
        "emoji \xf0\x9f\x8e\x89 works",
        "mixed ascii \xc3\xa9\xc3\xa8 accents",
    };
}

}  // namespace

TEST_CASE("first merge on a repetitive corpus is the most frequent pair") {
    auto model = SubwordModel::train({"aaab aaab"}, SubwordModel::kBaseVocab + 1, 0);
    REQUIRE(model.merge_count() >= 1);
    CHECK(model.merges()[0].first == "a");
    CHECK(model.merges()[0].second == "a");
}

TEST_CASE("training is deterministic") {
    auto a = SubwordModel::train(sample_corpus(), 300, 1);
    auto b = SubwordModel::train(sample_corpus(), 300, 1);
    CHECK(a.merges() == b.merges());
    CHECK(a.serialize() == b.serialize());
}

TEST_CASE("decode inverts encode byte-for-byte") {
    auto model = SubwordModel::train(sample_corpus(), 300, 0);
    for (const auto& text : round_trip_cases()) {
        CHECK(model.decode(model.encode(text)) == text);
        // canonical id sequences re-encode to themselves
        const auto ids = model.encode(text);
        CHECK(model.encode(model.decode(ids)) == ids);
    }
}

TEST_CASE("encode_sentence adds specials and truncates with sep preserved") {
    auto model = SubwordModel::train(sample_corpus(), 280, 0);

    auto [empty_ids, empty_overflow] = model.encode_sentence("", 16);
    CHECK(empty_ids == std::vector<std::int32_t>{SubwordModel::kCls, SubwordModel::kSep});
    CHECK(!empty_overflow);

    auto [ids, overflow] = model.encode_sentence("the cat sat on the mat and more words", 8);
    CHECK(ids.size() == 8);
    CHECK(ids.front() == SubwordModel::kCls);
    CHECK(ids.back() == SubwordModel::kSep);
    CHECK(overflow);

    auto [full, no_overflow] = model.encode_sentence("the cat", 64);
    CHECK(!no_overflow);
    CHECK(full.front() == SubwordModel::kCls);
    CHECK(full.back() == SubwordModel::kSep);
}

TEST_CASE("any unicode input encodes without unknown tokens") {
    auto model = SubwordModel::train(sample_corpus(), 300, 0);
    const std::string geez = "\xe1\x8a\xa0\xe1\x88\x9b\xe1\x88\xad\xe1\x8a\x9b \xe1\x88\xb0\xe1\x88\x8b\xe1\x88\x9d";
    const auto ids = model.encode(geez);
    CHECK(!ids.empty());
    for (const auto id : ids) {
        CHECK(id != SubwordModel::kUnk);
        CHECK(id >= SubwordModel::kByteOffset);
        CHECK(static_cast<std::size_t>(id) < model.vocab_size());
    }
    CHECK(model.decode(ids) == geez);
}

TEST_CASE("small corpus stops early with a smaller vocabulary") {
    auto model = SubwordModel::train({"ab cd"}, 5000, 0);
    CHECK(model.stopped_early());
    CHECK(model.vocab_size() < 5000);
}

TEST_CASE("requesting a vocabulary below the alphabet is a config error") {
    CHECK_THROWS_AS(SubwordModel::train({"abc"}, 100, 0), ConfigError);
}

TEST_CASE("save and load preserve the model exactly") {
    testsupport::TmpDir tmp("tok");
    auto model = SubwordModel::train(sample_corpus(), 320, 0);
    model.save(tmp.file("model.tok"));
    auto loaded = SubwordModel::load(tmp.file("model.tok"));
    CHECK(loaded.vocab_size() == model.vocab_size());
    CHECK(loaded.merges() == model.merges());
    CHECK(loaded.serialize() == model.serialize());
    for (const auto& text : round_trip_cases()) CHECK(loaded.encode(text) == model.encode(text));

    // corrupted header is a format error
    CHECK_THROWS_AS(SubwordModel::parse("not-a-tokenizer\n"), FormatError);
    CHECK_THROWS_AS(SubwordModel::parse("peftlab-tokenizer v1\nvocab_size 262\nspecials pad=0 cls=1 sep=2 mask=3 unk=4\nbyte_offset 5\nmerges 1\nzz 61\n"),
                    FormatError);
}

TEST_CASE("longer merges win over raw bytes when present") {
    // 'the' repeats often enough that it should become a single token
    std::vector<std::string> corpus;
    for (int i = 0; i < 20; ++i) corpus.push_back("the theme of the thesis");
    auto model = SubwordModel::train(corpus, 300, 0);
    const auto ids = model.encode("the");
    CHECK(ids.size() == 1);
}
