#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "peft/encoder.hpp"
#include "support/gradcheck.hpp"
#include "support/tmpdir.hpp"

using namespace peft;

namespace {

EncoderConfig desk_config() {
    EncoderConfig cfg;  // defaults are the desk-scale setup
    cfg.vocab_size = 512;
    cfg.dropout_rate = 0.0f;
    return cfg;
}

template <class S>
bool same_bytes(const Tensor<S>& a, const Tensor<S>& b) {
    return a.shape == b.shape && std::memcmp(a.ptr(), b.ptr(), sizeof(S) * a.numel()) == 0;
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("fresh adapters leave encode bitwise unchanged") {
    const auto cfg = desk_config();
    auto w = init_encoder(cfg, 42);
    AdapterStack stack;
    stack.push(init_adapter(cfg, {.name = "lang"}, 1), false);
    stack.push(init_adapter(cfg, {.name = "task"}, 2), true);

    Rng rng(99);
    for (int trial = 0; trial < 5; ++trial) {
        std::vector<std::int32_t> ids(12);
        for (auto& id : ids) id = static_cast<std::int32_t>(5 + rng.uniform_int(cfg.vocab_size - 5));
        auto pad = make_pad_mask(ids, cfg.pad_id);
        auto plain = encode(w, ids, 2, 6, pad, false, nullptr);
        auto stacked = encode(w, ids, 2, 6, pad, false, nullptr, &stack);
        CHECK(same_bytes(plain, stacked));
    }
}

TEST_CASE("bottleneck width and parameter formula") {
    EncoderConfig cfg = desk_config();
    AdapterConfig acfg{.name = "x", .reduction_factor = 16};
    CHECK(acfg.bottleneck(128) == 8);
    CHECK(adapter_param_count(cfg, acfg) == 4 * 2184);
    auto adapter = init_adapter(cfg, acfg, 7);
    CHECK(adapter.param_count() == adapter_param_count(cfg, acfg));
    CHECK(adapter.param_count() == 8736);
}

TEST_CASE("same seed gives bitwise identical adapters") {
    const auto cfg = desk_config();
    auto a = init_adapter(cfg, {.name = "l"}, 5);
    auto b = init_adapter(cfg, {.name = "l"}, 5);
    for (std::size_t i = 0; i < cfg.n_layers; ++i) {
        CHECK(same_bytes(a.layers[i].down_weight, b.layers[i].down_weight));
        CHECK(same_bytes(a.layers[i].up_weight, b.layers[i].up_weight));
    }
    // up projection starts at exactly zero
    for (std::size_t i = 0; i < a.layers[0].up_weight.numel(); ++i) CHECK(a.layers[0].up_weight[i] == 0.0f);
}

TEST_CASE("adapter forward: shape, identity with zero up-projection") {
    const auto cfg = desk_config();
    auto adapter = init_adapter(cfg, {.name = "l"}, 3);
    Rng rng(4);
    Tensor<float> h({6, cfg.d_model});
    for (std::size_t i = 0; i < h.numel(); ++i) h[i] = static_cast<float>(rng.uniform_double() * 2 - 1);
    auto out = adapter_forward(adapter, 0, h);
    CHECK(out.shape == h.shape);
    CHECK(same_bytes(out, h));
}

TEST_CASE("adapter forward matches a scalar-loop computation") {
    EncoderConfig cfg;
    cfg.vocab_size = 16;
    cfg.d_model = 4;
    cfg.n_heads = 1;
    cfg.n_layers = 1;
    cfg.d_ff = 8;
    AdapterConfig acfg{.name = "t", .reduction_factor = 2};  // m = 2
    auto adapter = init_adapter(cfg, acfg, 1);
    REQUIRE(adapter.bottleneck == 2);
    auto& layer = adapter.layers[0];
    const std::vector<float> wd{0.1f, -0.2f, 0.3f, 0.4f, -0.5f, 0.6f, 0.7f, -0.8f};  // [4,2]
    const std::vector<float> bd{0.05f, -0.1f};
    const std::vector<float> wu{0.2f, -0.3f, 0.4f, 0.5f, -0.6f, 0.7f, 0.8f, -0.9f};  // [2,4]
    const std::vector<float> bu{0.01f, 0.02f, -0.03f, 0.04f};
    layer.down_weight = Tensor<float>({4, 2}, wd);
    layer.down_bias = Tensor<float>({2}, bd);
    layer.up_weight = Tensor<float>({2, 4}, wu);
    layer.up_bias = Tensor<float>({4}, bu);

    const std::vector<float> hv{0.5f, -1.0f, 0.25f, 0.75f};
    Tensor<float> h({1, 4}, hv);
    auto out = adapter_forward(adapter, 0, h);

    for (std::size_t i = 0; i < 4; ++i) {
        double z[2];
        for (std::size_t j = 0; j < 2; ++j) {
            z[j] = bd[j];
            for (std::size_t k = 0; k < 4; ++k) z[j] += static_cast<double>(hv[k]) * wd[k * 2 + j];
            if (z[j] < 0) z[j] = 0;  // relu
        }
        double expect = hv[i] + bu[i];
        for (std::size_t j = 0; j < 2; ++j) expect += z[j] * wu[j * 4 + i];
        CHECK(out[i] == doctest::Approx(expect).epsilon(1e-6));
    }
}

TEST_CASE("stack application order and identity members") {
    const auto cfg = desk_config();
    auto a = init_adapter(cfg, {.name = "a"}, 1);
    auto b = init_adapter(cfg, {.name = "b"}, 2);
    // give both adapters nonzero up-projections
    Rng rng(10);
    for (auto* adapter : {&a, &b})
        for (auto& layer : adapter->layers)
            for (std::size_t i = 0; i < layer.up_weight.numel(); ++i)
                layer.up_weight[i] = static_cast<float>(rng.uniform_double() * 0.2 - 0.1);

    Tensor<float> h({3, cfg.d_model});
    for (std::size_t i = 0; i < h.numel(); ++i) h[i] = static_cast<float>(rng.uniform_double() * 2 - 1);

    AdapterStack single;
    single.push(a, false);
    CHECK(same_bytes(apply_stack(single, 0, h), adapter_forward(a, 0, h)));

    AdapterStack with_fresh;
    with_fresh.push(a, false);
    with_fresh.push(init_adapter(cfg, {.name = "fresh"}, 9), true);
    CHECK(same_bytes(apply_stack(with_fresh, 0, h), apply_stack(single, 0, h)));

    AdapterStack ab, ba;
    ab.push(a, false);
    ab.push(b, true);
    ba.push(b, true);
    ba.push(a, false);
    CHECK(!same_bytes(apply_stack(ab, 0, h), apply_stack(ba, 0, h)));
}

TEST_CASE("empty stack returns the input unchanged") {
    AdapterStack empty;
    Tensor<float> h({2, 8}, {1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16});
    auto out = apply_stack(empty, 0, h);
    CHECK(out.data == h.data);
    CHECK(out.id == h.id);
}

TEST_CASE("duplicate names in a stack are rejected") {
    const auto cfg = desk_config();
    AdapterStack stack;
    stack.push(init_adapter(cfg, {.name = "same"}, 1), false);
    CHECK_THROWS_AS(stack.push(init_adapter(cfg, {.name = "same"}, 2), true), ContractError);
}

TEST_CASE("trainable parameter selection per mode") {
    const auto cfg = desk_config();
    auto enc = init_encoder(cfg, 1);
    auto head = init_ner_head(cfg, 9, 2);
    std::vector<ParamRef<float>> head_refs{{"head.weight", &head.weight}, {"head.bias", &head.bias}};

    AdapterStack stack;
    stack.push(init_adapter(cfg, {.name = "lang"}, 3), false);   // frozen
    stack.push(init_adapter(cfg, {.name = "task"}, 4), true);    // trainable

    auto adapter_params = trainable_parameters(enc, stack, head_refs, TuningMode::adapter_only);
    std::size_t adapter_total = 0;
    for (const auto& p : adapter_params) adapter_total += p.tensor->numel();
    CHECK(adapter_total == 4 * 2184 + (128 * 9 + 9));
    CHECK(adapter_total == 9897);
    for (const auto& p : adapter_params) CHECK(p.name.find("adapter.lang.") == std::string::npos);

    AdapterStack empty;
    auto baseline_params = trainable_parameters(enc, empty, head_refs, TuningMode::baseline_full);
    std::size_t baseline_total = 0;
    for (const auto& p : baseline_params) baseline_total += p.tensor->numel();
    std::size_t mlm_only = 0;
    for (const auto& [name, t] : enc.params())
        if (name.rfind("mlm_head.", 0) == 0) mlm_only += t.numel();
    CHECK(baseline_total == parameter_count(cfg) - mlm_only + head.param_count());

    CHECK_THROWS_AS(trainable_parameters(enc, stack, head_refs, TuningMode::baseline_full), ContractError);
}

TEST_CASE("parameter ratio supports the compact-storage claim") {
    EncoderConfig base;
    base.vocab_size = 50265;
    base.d_model = 768;
    base.n_layers = 12;
    base.n_heads = 12;
    base.d_ff = 3072;
    base.max_positions = 514;
    AdapterConfig acfg{.name = "l", .reduction_factor = 16};
    CHECK(adapter_param_count(base, acfg) == 894'528);
    CHECK(adapter_param_ratio(base, acfg) < 0.01);

    // bottleneck of one gives the smallest ratio for fixed d_model
    AdapterConfig narrow{.name = "n", .reduction_factor = 768};
    CHECK(narrow.bottleneck(768) == 1);
    CHECK(adapter_param_ratio(base, narrow) < adapter_param_ratio(base, acfg));

    CHECK(adapter_param_count(desk_config(), acfg) == 8736);
}

TEST_CASE("save / load round trip is byte-exact") {
    testsupport::TmpDir tmp("adpt");
    const auto cfg = desk_config();
    auto adapter = init_adapter(cfg, {.name = "swahili"}, 17);
    Rng rng(3);
    for (auto& layer : adapter.layers)
        for (std::size_t i = 0; i < layer.up_weight.numel(); ++i)
            layer.up_weight[i] = static_cast<float>(rng.uniform_double() - 0.5);

    save_adapter(adapter, tmp.file("a.adpt"));
    auto loaded = load_adapter(tmp.file("a.adpt"));
    CHECK(loaded.config.name == "swahili");
    CHECK(loaded.config.reduction_factor == 16);
    save_adapter(loaded, tmp.file("b.adpt"));
    CHECK(slurp(tmp.file("a.adpt")) == slurp(tmp.file("b.adpt")));

    const auto file_size = std::filesystem::file_size(tmp.file("a.adpt"));
    const auto payload = 4 * adapter.param_count();
    CHECK(file_size > payload);
    CHECK(file_size < payload + 2048);  // header slack
}

TEST_CASE("loading into a mismatched encoder is a compatibility error") {
    testsupport::TmpDir tmp("adpt");
    auto adapter = init_adapter(desk_config(), {.name = "l"}, 1);
    save_adapter(adapter, tmp.file("a.adpt"));
    auto loaded = load_adapter(tmp.file("a.adpt"));

    EncoderConfig wide = desk_config();
    wide.d_model = 256;
    AdapterStack stack;
    stack.push(loaded, false);
    CHECK_THROWS_AS(stack.check_compatible(wide), CompatError);

    Tensor<float> h({2, 256});
    CHECK_THROWS_AS(adapter_forward(loaded, 0, h), CompatError);
}

TEST_CASE("truncated adapter file reports a format error with offset") {
    testsupport::TmpDir tmp("adpt");
    auto adapter = init_adapter(desk_config(), {.name = "l"}, 1);
    save_adapter(adapter, tmp.file("a.adpt"));
    const std::string bytes = slurp(tmp.file("a.adpt"));
    {
        std::ofstream f(tmp.file("cut.adpt"), std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    }
    try {
        load_adapter(tmp.file("cut.adpt"));
        FAIL("expected FormatError");
    } catch (const FormatError& e) {
        CHECK(std::string(e.what()).find("offset") != std::string::npos);
    }
}

TEST_CASE("gradients reach adapter parameters through the frozen encoder") {
    EncoderConfig cfg;
    cfg.vocab_size = 24;
    cfg.d_model = 8;
    cfg.n_layers = 2;
    cfg.n_heads = 2;
    cfg.d_ff = 16;
    cfg.max_positions = 8;
    cfg.dropout_rate = 0.0f;
    auto enc = init_encoder<double>(cfg, 6);
    enc.set_grad_enabled(false);  // frozen base

    AdapterStackT<double> stack;
    stack.push(init_adapter<double>(cfg, {.name = "task", .reduction_factor = 4}, 7), true);
    // nonzero up-projection so the adapter actually shapes activations
    Rng rng(2);
    for (auto& layer : stack.entries[0].weights.layers)
        for (std::size_t i = 0; i < layer.up_weight.numel(); ++i)
            layer.up_weight[i] = rng.uniform_double() * 0.4 - 0.2;
    stack.entries[0].weights.set_grad_enabled(true);

    std::vector<std::int32_t> ids{5, 6, 7, 8};
    auto pad = make_pad_mask(ids, cfg.pad_id);
    std::vector<std::int32_t> targets{6, 7, 8, 9};
    std::vector<std::uint8_t> mask{1, 1, 1, 0};

    std::vector<Tensor<double>> params;
    stack.entries[0].weights.for_each_param(
        [&](const std::string&, Tensor<double>& t) { params.push_back(t); });

    auto rep = testsupport::gradcheck(params, [&](Tape<double>* t) {
        auto hidden = encode(enc, ids, 1, 4, pad, false, nullptr, &stack, t);
        return cross_entropy_masked(mlm_head(enc, hidden, t), targets, mask, t);
    });
    CHECK_MESSAGE(rep.ok, rep.detail);

    // and the gradients are generically nonzero
    Tape<double> tape;
    auto hidden = encode(enc, ids, 1, 4, pad, false, nullptr, &stack, &tape);
    auto loss = cross_entropy_masked(mlm_head(enc, hidden, &tape), targets, mask, &tape);
    auto grads = tape.backward(loss);
    double total = 0;
    for (const auto& p : params) {
        auto g = grads.grad_of(p);
        for (std::size_t i = 0; i < g.numel(); ++i) total += std::abs(g[i]);
    }
    CHECK(total > 0.0);
}
