#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cmath>

#include "doctest.h"
#include "peft/rng.hpp"

using peft::Rng;

TEST_CASE("same seed gives identical sequences") {
    Rng a(1234), b(1234);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());
}

TEST_CASE("named streams are independent") {
    auto mask = Rng::stream(42, "masking");
    auto drop = Rng::stream(42, "dropout");
    bool any_diff = false;
    for (int i = 0; i < 8; ++i) any_diff |= (mask.next_u64() != drop.next_u64());
    CHECK(any_diff);

    auto s1 = Rng::stream(42, "masking", 1);
    auto s2 = Rng::stream(42, "masking", 2);
    CHECK(s1.next_u64() != s2.next_u64());
}

TEST_CASE("serialization resumes the exact draw sequence") {
    Rng rng(99);
    for (int i = 0; i < 17; ++i) rng.next_u64();
    const std::string state = rng.serialize();
    Rng restored = Rng::deserialize(state);
    for (int i = 0; i < 50; ++i) CHECK(rng.next_u64() == restored.next_u64());

    CHECK_THROWS_AS(Rng::deserialize("bogus"), peft::FormatError);
    CHECK_THROWS_AS(Rng::deserialize("xoshiro256**:zz:0:0:0"), peft::FormatError);
}

TEST_CASE("uniform stays within bounds and fills the range") {
    Rng rng(7);
    float lo = 1.0f, hi = 0.0f;
    for (int i = 0; i < 10000; ++i) {
        const float u = rng.uniform();
        CHECK(u >= 0.0f);
        CHECK(u < 1.0f);
        lo = std::min(lo, u);
        hi = std::max(hi, u);
    }
    CHECK(lo < 0.01f);
    CHECK(hi > 0.99f);
}

TEST_CASE("uniform_int is unbiased enough and in range") {
    Rng rng(8);
    int counts[5] = {0, 0, 0, 0, 0};
    for (int i = 0; i < 50000; ++i) counts[rng.uniform_int(5)]++;
    for (const int c : counts) {
        CHECK(c > 9500);
        CHECK(c < 10500);
    }
}

TEST_CASE("truncated normal respects the clip and the scale") {
    Rng rng(21);
    double sum = 0, sumsq = 0;
    const int n = 20000;
    for (int i = 0; i < n; ++i) {
        const float v = rng.truncated_normal(0.02f);
        CHECK(std::abs(v) <= 0.04f);
        sum += v;
        sumsq += static_cast<double>(v) * v;
    }
    CHECK(std::abs(sum / n) < 1e-3);
    const double stddev = std::sqrt(sumsq / n - (sum / n) * (sum / n));
    CHECK(stddev > 0.015);
    CHECK(stddev < 0.025);
}
