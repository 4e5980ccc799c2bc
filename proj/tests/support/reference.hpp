#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <string>
#include <tuple>
#include <vector>

// Independent reference implementations used as oracles. These deliberately
// share no code with the library: different loop orders, different data
// structures, scalar arithmetic only.

namespace testsupport {

template <class S>
std::vector<S> naive_matmul(const std::vector<S>& a, std::size_t m, std::size_t k, const std::vector<S>& b,
                            std::size_t n) {
    std::vector<S> c(m * n, S(0));
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) {
            S acc = S(0);
            for (std::size_t p = 0; p < k; ++p) acc += a[i * k + p] * b[p * n + j];
            c[i * n + j] = acc;
        }
    return c;
}

// Per-position cross entropy computed with scalar loops and no shared
// max-subtraction helper.
inline double naive_masked_ce(const std::vector<double>& logits, std::size_t rows, std::size_t vocab,
                              const std::vector<std::int32_t>& targets, const std::vector<std::uint8_t>& mask) {
    double total = 0.0;
    std::size_t used = 0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (!mask[r]) continue;
        double mx = logits[r * vocab];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, logits[r * vocab + j]);
        double z = 0.0;
        for (std::size_t j = 0; j < vocab; ++j) z += std::exp(logits[r * vocab + j] - mx);
        const double logp = logits[r * vocab + static_cast<std::size_t>(targets[r])] - mx - std::log(z);
        total -= logp;
        ++used;
    }
    return total / static_cast<double>(used);
}

// Brute-force BIO span decoder: walks the tag sequence with an explicit
// open-span variable, lenient about I-without-B.
struct RefSpan {
    std::string type;
    std::size_t start;
    std::size_t end;  // exclusive
    bool operator==(const RefSpan&) const = default;
    auto operator<=>(const RefSpan&) const = default;
};

inline std::vector<RefSpan> ref_decode_bio(const std::vector<std::string>& tags) {
    std::vector<RefSpan> spans;
    bool open = false;
    std::string open_type;
    std::size_t open_start = 0;
    const auto close = [&](std::size_t end) {
        if (open) spans.push_back({open_type, open_start, end});
        open = false;
    };
    for (std::size_t i = 0; i < tags.size(); ++i) {
        const std::string& t = tags[i];
        if (t == "O") {
            close(i);
        } else if (t.size() > 2 && t[0] == 'B' && t[1] == '-') {
            close(i);
            open = true;
            open_type = t.substr(2);
            open_start = i;
        } else if (t.size() > 2 && t[0] == 'I' && t[1] == '-') {
            const std::string ty = t.substr(2);
            if (open && ty == open_type) continue;  // extend
            close(i);
            open = true;  // lenient: stray I starts a span
            open_type = ty;
            open_start = i;
        }
    }
    close(tags.size());
    return spans;
}

// Micro precision/recall/F1 by counting exact span matches, multiset style.
struct RefF1 {
    double precision = 0, recall = 0, f1 = 0;
    std::size_t gold = 0, predicted = 0, correct = 0;
};

inline RefF1 ref_span_f1(const std::vector<std::vector<RefSpan>>& gold, const std::vector<std::vector<RefSpan>>& pred) {
    RefF1 out;
    for (std::size_t s = 0; s < gold.size(); ++s) {
        std::map<std::tuple<std::string, std::size_t, std::size_t>, int> bag;
        for (const auto& g : gold[s]) bag[{g.type, g.start, g.end}]++;
        out.gold += gold[s].size();
        out.predicted += pred[s].size();
        for (const auto& p : pred[s]) {
            auto it = bag.find({p.type, p.start, p.end});
            if (it != bag.end() && it->second > 0) {
                --it->second;
                ++out.correct;
            }
        }
    }
    out.precision = out.predicted ? static_cast<double>(out.correct) / static_cast<double>(out.predicted) : 0.0;
    out.recall = out.gold ? static_cast<double>(out.correct) / static_cast<double>(out.gold) : 0.0;
    out.f1 = (out.precision + out.recall) > 0 ? 2 * out.precision * out.recall / (out.precision + out.recall) : 0.0;
    return out;
}

// Scalar AdamW reference in double precision, one parameter at a time.
struct RefAdamState {
    double m = 0, v = 0;
};

inline double ref_adamw_step(double theta, double grad, RefAdamState& st, std::size_t step, double lr, double beta1,
                             double beta2, double eps, double weight_decay) {
    st.m = beta1 * st.m + (1.0 - beta1) * grad;
    st.v = beta2 * st.v + (1.0 - beta2) * grad * grad;
    const double mhat = st.m / (1.0 - std::pow(beta1, static_cast<double>(step)));
    const double vhat = st.v / (1.0 - std::pow(beta2, static_cast<double>(step)));
    theta -= lr * (mhat / (std::sqrt(vhat) + eps) + weight_decay * theta);
    return theta;
}

}  // namespace testsupport
