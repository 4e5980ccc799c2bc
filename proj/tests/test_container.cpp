#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <fstream>

#include "doctest.h"
#include "peft/container.hpp"
#include "support/tmpdir.hpp"

using namespace peft;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

}  // namespace

TEST_CASE("container round trip preserves metadata and tensors") {
    testsupport::TmpDir tmp("container");
    const std::string path = tmp.file("weights.bin");

    std::map<std::string, std::string> meta{{"alpha", "1"}, {"name", "lang-sw"}};
    std::vector<NamedTensor> tensors;
    tensors.push_back({"a.weight", {2, 3}, {1, 2, 3, 4, 5, 6}});
    tensors.push_back({"a.bias", {3}, {0.5f, -0.5f, 7.25f}});
    write_container(path, "ADPT", meta, tensors);

    const Container c = read_container(path);
    CHECK(c.kind == "ADPT");
    CHECK(c.meta_at("alpha") == "1");
    CHECK(c.meta_at("name") == "lang-sw");
    REQUIRE(c.tensors.size() == 2);
    CHECK(c.tensors[0].name == "a.weight");
    CHECK(c.tensors[0].shape == std::vector<std::size_t>{2, 3});
    CHECK(c.tensors[1].values[2] == 7.25f);
    CHECK(c.find("a.bias") != nullptr);
    CHECK(c.find("missing") == nullptr);
    CHECK_THROWS_AS(c.meta_at("missing"), FormatError);
}

TEST_CASE("identical content produces byte-identical files") {
    testsupport::TmpDir tmp("container");
    std::vector<NamedTensor> tensors{{"x", {4}, {1, 2, 3, 4}}};
    write_container(tmp.file("a.bin"), "ENCW", {{"k", "v"}}, tensors);
    write_container(tmp.file("b.bin"), "ENCW", {{"k", "v"}}, tensors);
    CHECK(slurp(tmp.file("a.bin")) == slurp(tmp.file("b.bin")));
}

TEST_CASE("bad magic, truncation and trailing bytes are format errors with offsets") {
    testsupport::TmpDir tmp("container");
    const std::string path = tmp.file("w.bin");
    write_container(path, "CKPT", {}, {{"t", {2}, {1, 2}}});
    const std::string good = slurp(path);

    spit(tmp.file("magic.bin"), "NOPE" + good.substr(4));
    CHECK_THROWS_WITH_AS(read_container(tmp.file("magic.bin")), doctest::Contains("bad magic"), FormatError);

    spit(tmp.file("trunc.bin"), good.substr(0, good.size() - 3));
    try {
        read_container(tmp.file("trunc.bin"));
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }

    spit(tmp.file("trail.bin"), good + "junk");
    CHECK_THROWS_WITH_AS(read_container(tmp.file("trail.bin")), doctest::Contains("trailing"), FormatError);

    std::string bad_version = good;
    bad_version[4] = 9;  // version low byte
    spit(tmp.file("ver.bin"), bad_version);
    CHECK_THROWS_WITH_AS(read_container(tmp.file("ver.bin")), doctest::Contains("version"), FormatError);

    CHECK_THROWS_AS(read_container(tmp.file("missing.bin")), FormatError);
}
