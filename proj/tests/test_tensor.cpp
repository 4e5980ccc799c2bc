#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>
#include <cstring>

#include "doctest.h"
#include "peft/rng.hpp"
#include "peft/tensor.hpp"
#include "support/gradcheck.hpp"
#include "support/reference.hpp"

using namespace peft;
using testsupport::gradcheck;

namespace {

template <class S>
Tensor<S> random_tensor(std::vector<std::size_t> shape, Rng& rng, bool grad = true, S lo = S(-1), S hi = S(1)) {
    Tensor<S> t(std::move(shape));
    for (std::size_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * static_cast<S>(rng.uniform_double());
    t.grad_enabled = grad;
    return t;
}

}  // namespace

TEST_CASE("matmul identity and fixed oracle") {
    Tensor<float> eye({2, 2}, {1, 0, 0, 1});
    Tensor<float> b({2, 2}, {5, 6, 7, 8});
    auto c = matmul(eye, b);
    CHECK(c[0] == 5.0f);
    CHECK(c[1] == 6.0f);
    CHECK(c[2] == 7.0f);
    CHECK(c[3] == 8.0f);

    Tensor<float> a({2, 2}, {1, 2, 3, 4});
    auto d = matmul(a, b);
    CHECK(d[0] == doctest::Approx(19));
    CHECK(d[1] == doctest::Approx(22));
    CHECK(d[2] == doctest::Approx(43));
    CHECK(d[3] == doctest::Approx(50));
}

TEST_CASE("matmul shape contract and random agreement with naive loops") {
    Rng rng(7);
    auto a = random_tensor<float>({2, 3}, rng);
    auto b = random_tensor<float>({3, 4}, rng);
    auto c = matmul(a, b);
    CHECK(c.shape == std::vector<std::size_t>{2, 4});

    auto ref = testsupport::naive_matmul(*a.data, 2, 3, *b.data, 4);
    for (std::size_t i = 0; i < ref.size(); ++i) CHECK(c[i] == doctest::Approx(ref[i]).epsilon(1e-6));
}

TEST_CASE("matmul dimension mismatch names both shapes") {
    Tensor<float> a({2, 3});
    Tensor<float> b({4, 5});
    try {
        matmul(a, b);
        FAIL("expected ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("(2x3)") != std::string::npos);
        CHECK(msg.find("(4x5)") != std::string::npos);
    }
}

TEST_CASE("softmax symmetry, shift invariance, normalization") {
    Tensor<float> z({1, 4});
    auto s = softmax_lastdim(z);
    for (std::size_t i = 0; i < 4; ++i) CHECK(s[i] == doctest::Approx(0.25));

    Rng rng(11);
    auto x = random_tensor<float>({8}, rng, false, -5.0f, 5.0f);
    auto shifted = Tensor<float>(x.shape, *x.data);
    for (std::size_t i = 0; i < 8; ++i) shifted[i] += 3.25f;
    auto sx = softmax_lastdim(x);
    auto ss = softmax_lastdim(shifted);
    float total = 0;
    for (std::size_t i = 0; i < 8; ++i) {
        CHECK(sx[i] == doctest::Approx(ss[i]).epsilon(1e-5));
        total += sx[i];
    }
    CHECK(std::abs(total - 1.0f) < 1e-6f);
}

TEST_CASE("softmax rows sum to one for large magnitudes") {
    Rng rng(13);
    auto x = random_tensor<float>({4, 6}, rng, false, -30.0f, 30.0f);
    auto s = softmax_lastdim(x);
    for (std::size_t r = 0; r < 4; ++r) {
        float total = 0;
        for (std::size_t j = 0; j < 6; ++j) total += s[r * 6 + j];
        CHECK(std::abs(total - 1.0f) < 1e-6f);
    }
}

TEST_CASE("layer_norm constant row and standardization") {
    Tensor<float> x({1, 6});
    for (std::size_t i = 0; i < 6; ++i) x[i] = 3.5f;
    Tensor<float> gamma = Tensor<float>::full({6}, 1.0f);
    Tensor<float> beta({6});
    auto y = layer_norm(x, gamma, beta);
    for (std::size_t i = 0; i < 6; ++i) CHECK(y[i] == 0.0f);

    Rng rng(5);
    auto x2 = random_tensor<float>({3, 8}, rng, false);
    auto y2 = layer_norm(x2, Tensor<float>::full({8}, 1.0f), Tensor<float>({8}));
    for (std::size_t r = 0; r < 3; ++r) {
        float mean = 0, var = 0;
        for (std::size_t j = 0; j < 8; ++j) mean += y2[r * 8 + j];
        mean /= 8;
        for (std::size_t j = 0; j < 8; ++j) var += (y2[r * 8 + j] - mean) * (y2[r * 8 + j] - mean);
        var /= 8;
        CHECK(std::abs(mean) < 1e-6f);
        CHECK(std::abs(var - 1.0f) < 1e-4f);
    }
}

TEST_CASE("gelu fixed points and tanh-approximation value") {
    Tensor<float> x({3}, {0.0f, 10.0f, 1.0f});
    auto y = gelu(x);
    CHECK(y[0] == 0.0f);
    CHECK(std::abs(y[1] - 10.0f) < 1e-4f);
    // direct evaluation of the tanh form in double
    const double expected = 0.5 * 1.0 * (1.0 + std::tanh(std::sqrt(2.0 / M_PI) * (1.0 + 0.044715)));
    CHECK(y[2] == doctest::Approx(expected).epsilon(1e-5));
    CHECK(y[2] == doctest::Approx(0.8412).epsilon(1e-3));
}

TEST_CASE("relu values, idempotence, zero subgradient at origin") {
    Tensor<float> x({3}, {-1.0f, 0.0f, 2.0f});
    auto y = relu(x);
    CHECK(y[0] == 0.0f);
    CHECK(y[1] == 0.0f);
    CHECK(y[2] == 2.0f);

    Rng rng(3);
    auto r = random_tensor<float>({16}, rng, false, -2.0f, 2.0f);
    auto once = relu(r);
    auto twice = relu(once);
    CHECK(std::memcmp(once.ptr(), twice.ptr(), sizeof(float) * 16) == 0);

    Tensor<float> zero({1});
    zero.grad_enabled = true;
    Tape<float> tape;
    auto loss = reduce_sum(relu(zero, &tape), &tape);
    auto grads = tape.backward(loss);
    CHECK(grads.grad_of(zero)[0] == 0.0f);
}

TEST_CASE("cross entropy uniform, confident, and scalar-loop oracle") {
    Tensor<float> logits({2, 4});
    std::vector<std::int32_t> targets{1, 3};
    std::vector<std::uint8_t> mask{1, 1};
    auto loss = cross_entropy_masked(logits, targets, mask);
    CHECK(loss[0] == doctest::Approx(std::log(4.0)).epsilon(1e-6));

    Tensor<float> confident({1, 4});
    confident[2] = 50.0f;
    auto tiny = cross_entropy_masked(confident, {2}, {1});
    CHECK(tiny[0] < 1e-6f);

    Rng rng(23);
    auto rl = random_tensor<float>({5, 7}, rng, false, -2.0f, 2.0f);
    std::vector<std::int32_t> t(5);
    std::vector<std::uint8_t> m{1, 0, 1, 1, 0};
    for (auto& v : t) v = static_cast<std::int32_t>(rng.uniform_int(7));
    std::vector<double> dlogits(rl.ptr(), rl.ptr() + 35);
    const double ref = testsupport::naive_masked_ce(dlogits, 5, 7, t, m);
    CHECK(cross_entropy_masked(rl, t, m)[0] == doctest::Approx(ref).epsilon(1e-5));
}

TEST_CASE("cross entropy error paths") {
    Tensor<float> logits({2, 3});
    CHECK_THROWS_AS(cross_entropy_masked(logits, {0, 1}, {0, 0}), DataError);
    CHECK_THROWS_AS(cross_entropy_masked(logits, {0, 9}, {1, 1}), std::out_of_range);
}

TEST_CASE("backward of a plain sum is all ones") {
    Rng rng(1);
    auto x = random_tensor<float>({3, 2}, rng);
    Tape<float> tape;
    auto loss = reduce_sum(x, &tape);
    auto grads = tape.backward(loss);
    auto g = grads.grad_of(x);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g[i] == 1.0f);
}

TEST_CASE("tensor consumed twice accumulates both paths") {
    Rng rng(2);
    auto x = random_tensor<float>({4}, rng);
    auto a = random_tensor<float>({4}, rng, false);
    auto b = random_tensor<float>({4}, rng, false);
    Tape<float> tape;
    auto loss = reduce_sum(add(mul(x, a, &tape), mul(x, b, &tape), &tape), &tape);
    auto g = tape.backward(loss).grad_of(x);
    for (std::size_t i = 0; i < 4; ++i) CHECK(g[i] == doctest::Approx(a[i] + b[i]).epsilon(1e-6));
}

TEST_CASE("backward rejects non-scalar loss") {
    Rng rng(4);
    auto x = random_tensor<float>({2, 2}, rng);
    Tape<float> tape;
    auto y = relu(x, &tape);
    CHECK_THROWS_AS(tape.backward(y), ContractError);
}

TEST_CASE("forward ops are bitwise deterministic across calls") {
    Rng rng(9);
    auto a = random_tensor<float>({6, 5}, rng, false);
    auto b = random_tensor<float>({5, 4}, rng, false);
    auto c1 = matmul(a, b);
    auto c2 = matmul(a, b);
    CHECK(std::memcmp(c1.ptr(), c2.ptr(), sizeof(float) * c1.numel()) == 0);
    auto s1 = softmax_lastdim(a);
    auto s2 = softmax_lastdim(a);
    CHECK(std::memcmp(s1.ptr(), s2.ptr(), sizeof(float) * s1.numel()) == 0);
}

// Finite-difference checks for every differentiable op, double instantiation.
TEST_CASE("finite differences: every op") {
    Rng rng(77);

    SUBCASE("add / mul / scale / reshape / reduce_sum") {
        auto a = random_tensor<double>({3, 4}, rng);
        auto b = random_tensor<double>({3, 4}, rng);
        auto rep = gradcheck({a, b}, [&](Tape<double>* t) {
            auto s = scale(mul(add(a, b, t), b, t), 0.7, t);
            return reduce_sum(reshape(s, {12}, t), t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("add_row_bias") {
        auto a = random_tensor<double>({4, 3}, rng);
        auto bias = random_tensor<double>({3}, rng);
        auto w = random_tensor<double>({4, 3}, rng, false);
        auto rep = gradcheck({a, bias}, [&](Tape<double>* t) {
            return reduce_sum(mul(add_row_bias(a, bias, t), w, t), t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("matmul / matmul_nt") {
        auto a = random_tensor<double>({3, 5}, rng);
        auto b = random_tensor<double>({5, 4}, rng);
        auto c = random_tensor<double>({6, 5}, rng);
        auto w1 = random_tensor<double>({3, 4}, rng, false);
        auto w2 = random_tensor<double>({3, 6}, rng, false);
        auto rep = gradcheck({a, b, c}, [&](Tape<double>* t) {
            auto lhs = reduce_sum(mul(matmul(a, b, t), w1, t), t);
            auto rhs = reduce_sum(mul(matmul_nt(a, c, t), w2, t), t);
            return add(lhs, rhs, t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("bmm / bmm_nt / permute_0213") {
        auto a = random_tensor<double>({2, 3, 4}, rng);
        auto b = random_tensor<double>({2, 4, 3}, rng);
        auto c = random_tensor<double>({2, 5, 4}, rng);
        auto p = random_tensor<double>({2, 3, 2, 2}, rng);
        auto w1 = random_tensor<double>({2, 3, 3}, rng, false);
        auto w2 = random_tensor<double>({2, 3, 5}, rng, false);
        auto w3 = random_tensor<double>({2, 2, 3, 2}, rng, false);
        auto rep = gradcheck({a, b, c, p}, [&](Tape<double>* t) {
            auto x = reduce_sum(mul(bmm(a, b, t), w1, t), t);
            auto y = reduce_sum(mul(bmm_nt(a, c, t), w2, t), t);
            auto z = reduce_sum(mul(permute_0213(p, t), w3, t), t);
            return add(add(x, y, t), z, t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("relu away from the kink") {
        auto a = random_tensor<double>({3, 3}, rng);
        for (std::size_t i = 0; i < a.numel(); ++i)
            if (std::abs(a[i]) < 0.05) a[i] = 0.5;
        auto w = random_tensor<double>({3, 3}, rng, false);
        auto rep = gradcheck({a}, [&](Tape<double>* t) { return reduce_sum(mul(relu(a, t), w, t), t); });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("gelu") {
        auto a = random_tensor<double>({4, 2}, rng);
        auto w = random_tensor<double>({4, 2}, rng, false);
        auto rep = gradcheck({a}, [&](Tape<double>* t) { return reduce_sum(mul(gelu(a, t), w, t), t); });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("softmax") {
        auto a = random_tensor<double>({3, 5}, rng);
        auto w = random_tensor<double>({3, 5}, rng, false);
        auto rep = gradcheck({a}, [&](Tape<double>* t) { return reduce_sum(mul(softmax_lastdim(a, t), w, t), t); });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("layer_norm") {
        auto x = random_tensor<double>({3, 6}, rng);
        auto gamma = random_tensor<double>({6}, rng, true, 0.5, 1.5);
        auto beta = random_tensor<double>({6}, rng);
        auto w = random_tensor<double>({3, 6}, rng, false);
        auto rep = gradcheck({x, gamma, beta}, [&](Tape<double>* t) {
            return reduce_sum(mul(layer_norm(x, gamma, beta, 1e-5, t), w, t), t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("embedding_lookup") {
        auto table = random_tensor<double>({7, 3}, rng);
        std::vector<std::int32_t> ids{2, 5, 2, 0};
        auto w = random_tensor<double>({4, 3}, rng, false);
        auto rep = gradcheck({table}, [&](Tape<double>* t) {
            return reduce_sum(mul(embedding_lookup(table, ids, t), w, t), t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("cross_entropy_masked") {
        auto logits = random_tensor<double>({4, 5}, rng);
        std::vector<std::int32_t> targets{1, 0, 4, 2};
        std::vector<std::uint8_t> mask{1, 1, 0, 1};
        auto rep = gradcheck({logits}, [&](Tape<double>* t) {
            return cross_entropy_masked(logits, targets, mask, t);
        });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }

    SUBCASE("sum of matmul against finite differences") {
        auto a = random_tensor<double>({3, 3}, rng);
        auto b = random_tensor<double>({3, 3}, rng);
        auto rep = gradcheck({a, b}, [&](Tape<double>* t) { return reduce_sum(matmul(a, b, t), t); });
        CHECK_MESSAGE(rep.ok, rep.detail);
    }
}
