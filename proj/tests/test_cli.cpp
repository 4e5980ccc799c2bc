#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <sys/wait.h>

#include <cstdlib>
#include <fstream>
#include <string>

#include "doctest.h"
#include "json.hpp"
#include "support/tmpdir.hpp"

// End-to-end checks of the peftlab binary: exit codes, artifact
// idempotence, and the documented pipeline.

namespace {

#ifndef PEFTLAB_BIN
#error "PEFTLAB_BIN must point at the built binary"
#endif

int run(const std::string& args) {
    const std::string cmd = std::string(PEFTLAB_BIN) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// one shared workspace: synthetic data + tokenizer + encoder, built once
struct Pipeline {
    testsupport::TmpDir tmp{"cli"};
    std::string wd;

    Pipeline() : wd("--workdir " + tmp.path().string() + " ") {
        {
            std::ofstream f(tmp.file("enc.cfg"));
            f << "d_model = 32\nn_layers = 2\nn_heads = 2\nd_ff = 64\nmax_positions = 48\ndropout_rate = 0.1\n";
        }
        REQUIRE(run(wd + "make-synthetic --out-dir data --seed 5 --sentences 150 --ner-train 60 --ner-dev 20 "
                         "--ner-test 20") == 0);
        REQUIRE(run(wd + "tokenizer-train --corpus data/corpus.txt --vocab-size 700 --out tok.model --seed 1") == 0);
        REQUIRE(run(wd + "init-encoder --tokenizer tok.model --init-config enc.cfg --out enc.bin --seed 2") == 0);
        std::ofstream cfg(tmp.file("train.cfg"));
        cfg << "max_steps = 12\nbatch_size = 4\nwarmup_steps = 2\nlearning_rate = 0.003\n"
               "checkpoint_interval_steps = 6\nlog_interval_steps = 4\nseed = 3\neval_interval_steps = 6\n";
    }
};

Pipeline& pipeline() {
    static Pipeline p = [] {
        Pipeline built;
        return built;
    }();
    return p;
}

}  // namespace

TEST_CASE("make-synthetic writes a complete, verifiable dataset") {
    auto& p = pipeline();
    CHECK(std::ifstream(p.tmp.file("data/corpus.txt")).good());
    CHECK(std::ifstream(p.tmp.file("data/ner.train.conll")).good());
    CHECK(std::ifstream(p.tmp.file("data/data.manifest")).good());

    // regenerating with the same seed is byte-identical
    REQUIRE(run(p.wd + "make-synthetic --out-dir data2 --seed 5 --sentences 150 --ner-train 60 --ner-dev 20 "
                       "--ner-test 20") == 0);
    CHECK(slurp(p.tmp.file("data/corpus.txt")) == slurp(p.tmp.file("data2/corpus.txt")));
    CHECK(slurp(p.tmp.file("data/ner.train.conll")) == slurp(p.tmp.file("data2/ner.train.conll")));
}

TEST_CASE("tokenizer-train is idempotent and fails cleanly on missing input") {
    auto& p = pipeline();
    REQUIRE(run(p.wd + "tokenizer-train --corpus data/corpus.txt --vocab-size 700 --out tok2.model --seed 1") == 0);
    CHECK(slurp(p.tmp.file("tok.model")) == slurp(p.tmp.file("tok2.model")));
    CHECK(run(p.wd + "tokenizer-train --corpus nope.txt --out x.model") == 2);
}

TEST_CASE("encoder initialization is idempotent for a fixed seed") {
    auto& p = pipeline();
    CHECK(run(p.wd + "init-encoder --tokenizer tok.model --init-config enc.cfg --out enc2.bin --seed 2") == 0);
    CHECK(slurp(p.tmp.file("enc.bin")) == slurp(p.tmp.file("enc2.bin")));
}

TEST_CASE("adapter-pretrain trains, stops on zero budget, and resumes bitwise") {
    auto& p = pipeline();
    REQUIRE(run(p.wd + "adapter-pretrain --corpus data/corpus.txt --tokenizer tok.model --encoder enc.bin "
                       "--adapter-name syn --config train.cfg --out syn.adpt") == 0);
    CHECK(std::ifstream(p.tmp.file("syn.adpt")).good());

    // zero budget: resumable exit with a checkpoint
    CHECK(run(p.wd + "adapter-pretrain --corpus data/corpus.txt --tokenizer tok.model --encoder enc.bin "
                     "--adapter-name syn --config train.cfg --budget-seconds 0 --out stub.adpt") == 3);

    // find the newest run's checkpoint and resume it to completion
    std::string latest;
    for (const auto& entry : std::filesystem::directory_iterator(p.tmp.file("runs")))
        if (entry.path().filename().string().rfind("adapter-pretrain-", 0) == 0 &&
            std::filesystem::exists(entry.path() / "checkpoint.ckpt"))
            if (latest.empty() || entry.path().string() > latest) latest = entry.path().string();
    REQUIRE(!latest.empty());
    CHECK(run(p.wd + "adapter-pretrain --corpus data/corpus.txt --tokenizer tok.model --resume " + latest +
              "/checkpoint.ckpt --adapter-name syn --config train.cfg --out resumed.adpt") == 0);
    CHECK(slurp(p.tmp.file("syn.adpt")) == slurp(p.tmp.file("resumed.adpt")));
}

TEST_CASE("ner-finetune enforces the adapter/baseline flag contract") {
    auto& p = pipeline();
    const std::string data = "--train data/ner.train.conll --dev data/ner.dev.conll --test data/ner.test.conll ";
    CHECK(run(p.wd + "ner-finetune --mode adapter " + data +
              "--tokenizer tok.model --encoder enc.bin --config train.cfg --seeds 1") == 2);
    CHECK(run(p.wd + "ner-finetune --mode baseline " + data + "--language-adapter syn.adpt "
              "--tokenizer tok.model --encoder enc.bin --config train.cfg --seeds 1") == 2);
    CHECK(run(p.wd + "ner-finetune --mode sideways " + data +
              "--tokenizer tok.model --encoder enc.bin --config train.cfg --seeds 1") == 2);
}

TEST_CASE("ner-finetune writes per-seed scores and mean rows") {
    auto& p = pipeline();
    const std::string data = "--train data/ner.train.conll --dev data/ner.dev.conll --test data/ner.test.conll ";
    REQUIRE(run(p.wd + "ner-finetune --mode adapter " + data + "--language-adapter syn.adpt "
                       "--tokenizer tok.model --encoder enc.bin --config train.cfg --seeds 2 --language syn") == 0);
    REQUIRE(run(p.wd + "ner-finetune --mode baseline " + data +
                       "--tokenizer tok.model --encoder enc.bin --config train.cfg --seeds 1 --language syn") == 0);

    nlohmann::json doc = nlohmann::json::parse(std::ifstream(p.tmp.file("results/syn__adapter.json")));
    CHECK(doc.at("seeds").size() == 2);
    CHECK(doc.at("seeds")[0].at("seed") != doc.at("seeds")[1].at("seed"));
    const double mean = doc.at("mean_test_f1");
    const double s0 = doc.at("seeds")[0].at("test_f1");
    const double s1 = doc.at("seeds")[1].at("test_f1");
    CHECK(mean == doctest::Approx((s0 + s1) / 2));
    CHECK(std::ifstream(p.tmp.file("results/syn__baseline.json")).good());
}

TEST_CASE("report renders the table and a structured copy that re-parses to the same values") {
    auto& p = pipeline();
    REQUIRE(run(p.wd + "report --results results --out report.txt") == 0);
    const std::string text = slurp(p.tmp.file("report.txt"));
    CHECK(text.find("syn") != std::string::npos);
    CHECK(text.find("Average") != std::string::npos);

    nlohmann::json doc = nlohmann::json::parse(std::ifstream(p.tmp.file("report.txt.json")));
    nlohmann::json results = nlohmann::json::parse(std::ifstream(p.tmp.file("results/syn__adapter.json")));
    const double adapter_dev = doc.at("rows").at("syn").at("adapter_dev");
    CHECK(adapter_dev == doctest::Approx(results.at("mean_dev_f1").get<double>()));

    // the rendered cell equals the structured value at 2 decimals
    char cell[16];
    std::snprintf(cell, sizeof(cell), "%.2f", adapter_dev);
    CHECK(text.find(cell) != std::string::npos);

    CHECK(run(p.wd + "report --results empty_results --out r.txt") == 2);
    std::filesystem::create_directories(p.tmp.file("empty_results"));
    CHECK(run(p.wd + "report --results empty_results --out r.txt") == 2);
}

TEST_CASE("run manifests record config, inputs and outputs") {
    auto& p = pipeline();
    std::string manifest_path;
    for (const auto& entry : std::filesystem::directory_iterator(p.tmp.file("runs")))
        if (entry.path().filename().string().rfind("tokenizer-train-", 0) == 0)
            manifest_path = (entry.path() / "manifest.json").string();
    REQUIRE(!manifest_path.empty());
    nlohmann::json doc = nlohmann::json::parse(std::ifstream(manifest_path));
    CHECK(doc.at("schema") == "peftlab-run-manifest-v1");
    CHECK(doc.at("command") == "tokenizer-train");
    CHECK(doc.at("exit_status") == 0);
    CHECK(!doc.at("inputs").empty());
    for (const auto& [path, digest] : doc.at("inputs").items())
        CHECK(digest.get<std::string>().rfind("fnv1a64:", 0) == 0);
    CHECK(!doc.at("outputs").empty());
}
