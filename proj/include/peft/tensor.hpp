#pragma once

#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "peft/error.hpp"

// Dense row-major tensors with reverse-mode autodiff on an explicit tape.
//
// Reduction order is fixed everywhere (row-major sequential), which makes
// every forward and backward pass bitwise reproducible for a given build.
// The scalar type is a template parameter: training runs float; the test
// suites instantiate double so finite-difference checks are meaningful.

namespace peft {

using TensorId = std::uint64_t;

namespace detail {
inline std::atomic<TensorId> next_tensor_id{1};
inline TensorId fresh_tensor_id() { return next_tensor_id.fetch_add(1, std::memory_order_relaxed); }
}  // namespace detail

inline std::string shape_str(const std::vector<std::size_t>& shape) {
    std::string s = "(";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(shape[i]);
    }
    return s + ")";
}

template <class S = float>
struct Tensor {
    std::vector<std::size_t> shape;
    std::shared_ptr<std::vector<S>> data;
    bool grad_enabled = false;
    TensorId id = 0;

    Tensor() = default;

    explicit Tensor(std::vector<std::size_t> shape_in)
        : shape(std::move(shape_in)),
          data(std::make_shared<std::vector<S>>(count(shape), S(0))),
          id(detail::fresh_tensor_id()) {}

    Tensor(std::vector<std::size_t> shape_in, std::vector<S> values)
        : shape(std::move(shape_in)), data(std::make_shared<std::vector<S>>(std::move(values))), id(detail::fresh_tensor_id()) {
        if (count(shape) != data->size())
            throw ShapeError("tensor: shape " + shape_str(shape) + " needs " + std::to_string(count(shape)) +
                             " values, got " + std::to_string(data->size()));
    }

    static Tensor scalar(S v) { return Tensor({1}, {v}); }

    static Tensor zeros(std::vector<std::size_t> shape_in) { return Tensor(std::move(shape_in)); }

    static Tensor full(std::vector<std::size_t> shape_in, S v) {
        Tensor t(std::move(shape_in));
        for (auto& x : *t.data) x = v;
        return t;
    }

    std::size_t numel() const { return data ? data->size() : 0; }
    std::size_t dim(std::size_t i) const { return shape.at(i); }
    std::size_t rank() const { return shape.size(); }

    S* ptr() { return data->data(); }
    const S* ptr() const { return data->data(); }
    S& operator[](std::size_t i) { return (*data)[i]; }
    const S& operator[](std::size_t i) const { return (*data)[i]; }

    bool defined() const { return static_cast<bool>(data); }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (const auto d : shape) n *= d;
        return n;
    }
};

// Gradient buffers keyed by tensor id, accumulated additively.
template <class S = float>
class GradientMap {
public:
    std::vector<S>& slot(const Tensor<S>& t) {
        auto [it, inserted] = grads_.try_emplace(t.id);
        if (inserted) it->second.assign(t.numel(), S(0));
        return it->second;
    }

    const std::vector<S>* find(TensorId id) const {
        const auto it = grads_.find(id);
        return it == grads_.end() ? nullptr : &it->second;
    }

    std::vector<S>* find_mutable(TensorId id) {
        const auto it = grads_.find(id);
        return it == grads_.end() ? nullptr : &it->second;
    }

    // Gradient of `t`, as a tensor of matching shape (zeros when untouched).
    Tensor<S> grad_of(const Tensor<S>& t) const {
        const auto* g = find(t.id);
        if (!g) return Tensor<S>::zeros(t.shape);
        return Tensor<S>(t.shape, *g);
    }

    std::size_t size() const { return grads_.size(); }

private:
    std::unordered_map<TensorId, std::vector<S>> grads_;
};

// Append-only record of backward rules in construction order.
template <class S = float>
class Tape {
public:
    void record(std::function<void(GradientMap<S>&)> fn) { nodes_.push_back(std::move(fn)); }

    std::size_t size() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // Reverse-order traversal from a scalar loss. Returns the full gradient
    // map; leaves that never influenced the loss are absent from it.
    GradientMap<S> backward(const Tensor<S>& loss) const {
        if (loss.numel() != 1) throw ContractError("backward: loss must be scalar, got shape " + shape_str(loss.shape));
        if (!loss.grad_enabled) throw ContractError("backward: loss does not participate in gradients");
        GradientMap<S> gm;
        gm.slot(loss)[0] = S(1);
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)(gm);
        return gm;
    }

private:
    std::vector<std::function<void(GradientMap<S>&)>> nodes_;
};

namespace detail {

// c[m,n] += a[m,k] * b[k,n]
template <class S>
void mm_nn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            const S* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// c[m,n] += a[m,k] * b[n,k]^T
template <class S>
void mm_nt(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        S* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const S* brow = b + j * k;
            S acc = S(0);
            for (std::size_t p = 0; p < k; ++p) acc += arow[p] * brow[p];
            crow[j] += acc;
        }
    }
}

// c[k,n] += a[m,k]^T * b[m,n]
template <class S>
void mm_tn(const S* a, const S* b, S* c, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const S* arow = a + i * k;
        const S* brow = b + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const S av = arow[p];
            if (av == S(0)) continue;
            S* crow = c + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

template <class S>
void add_into(std::vector<S>& dst, const S* src, std::size_t n, S scale = S(1)) {
    for (std::size_t i = 0; i < n; ++i) dst[i] += scale * src[i];
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise and structural ops
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> add(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.shape != b.shape)
        throw ShapeError("add: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<S> out(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] + b[i];
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) detail::add_into(gm.slot(a), g->data(), n);
            if (b.grad_enabled) detail::add_into(gm.slot(b), g->data(), n);
        });
    }
    return out;
}

// a[..., d] + bias[d], broadcast over leading rows.
template <class S>
Tensor<S> add_row_bias(const Tensor<S>& a, const Tensor<S>& bias, Tape<S>* tape = nullptr) {
    if (a.rank() < 1 || bias.rank() != 1 || a.shape.back() != bias.dim(0))
        throw ShapeError("add_row_bias: " + shape_str(a.shape) + " vs " + shape_str(bias.shape));
    const std::size_t d = bias.dim(0);
    const std::size_t rows = a.numel() / d;
    Tensor<S> out(a.shape);
    for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t j = 0; j < d; ++j) out[r * d + j] = a[r * d + j] + bias[j];
    if (tape && (a.grad_enabled || bias.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, bias, oid = out.id, rows, d](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) detail::add_into(gm.slot(a), g->data(), rows * d);
            if (bias.grad_enabled) {
                auto& gb = gm.slot(bias);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += (*g)[r * d + j];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> mul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.shape != b.shape)
        throw ShapeError("mul: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    Tensor<S> out(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * b[i];
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) {
                auto& ga = gm.slot(a);
                for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i] * b[i];
            }
            if (b.grad_enabled) {
                auto& gb = gm.slot(b);
                for (std::size_t i = 0; i < n; ++i) gb[i] += (*g)[i] * a[i];
            }
        });
    }
    return out;
}

template <class S>
Tensor<S> scale(const Tensor<S>& a, S c, Tape<S>* tape = nullptr) {
    Tensor<S> out(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] * c;
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, c, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            detail::add_into(gm.slot(a), g->data(), n, c);
        });
    }
    return out;
}

template <class S>
Tensor<S> reshape(const Tensor<S>& a, std::vector<std::size_t> new_shape, Tape<S>* tape = nullptr) {
    if (Tensor<S>::count(new_shape) != a.numel())
        throw ShapeError("reshape: " + shape_str(a.shape) + " -> " + shape_str(new_shape) + " changes element count");
    Tensor<S> out;
    out.shape = std::move(new_shape);
    out.data = a.data;  // row-major reshape is a relabeling
    out.id = detail::fresh_tensor_id();
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, n = a.numel()](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            detail::add_into(gm.slot(a), g->data(), n);
        });
    }
    return out;
}

// [d0,d1,d2,d3] -> [d0,d2,d1,d3]; swapping the middle axes twice is identity,
// so the backward pass reuses the same kernel.
template <class S>
Tensor<S> permute_0213(const Tensor<S>& a, Tape<S>* tape = nullptr) {
    if (a.rank() != 4) throw ShapeError("permute_0213: expected rank 4, got " + shape_str(a.shape));
    const std::size_t d0 = a.dim(0), d1 = a.dim(1), d2 = a.dim(2), d3 = a.dim(3);
    Tensor<S> out({d0, d2, d1, d3});
    for (std::size_t i = 0; i < d0; ++i)
        for (std::size_t j = 0; j < d1; ++j)
            for (std::size_t k = 0; k < d2; ++k) {
                const S* src = a.ptr() + ((i * d1 + j) * d2 + k) * d3;
                S* dst = out.ptr() + ((i * d2 + k) * d1 + j) * d3;
                for (std::size_t l = 0; l < d3; ++l) dst[l] = src[l];
            }
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, d0, d1, d2, d3](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& ga = gm.slot(a);
            for (std::size_t i = 0; i < d0; ++i)
                for (std::size_t k = 0; k < d2; ++k)
                    for (std::size_t j = 0; j < d1; ++j) {
                        const S* src = g->data() + ((i * d2 + k) * d1 + j) * d3;
                        S* dst = ga.data() + ((i * d1 + j) * d2 + k) * d3;
                        for (std::size_t l = 0; l < d3; ++l) dst[l] += src[l];
                    }
        });
    }
    return out;
}

template <class S>
Tensor<S> reduce_sum(const Tensor<S>& a, Tape<S>* tape = nullptr) {
    S acc = S(0);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) acc += a[i];
    Tensor<S> out = Tensor<S>::scalar(acc);
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& ga = gm.slot(a);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[0];
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> matmul(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
        throw ShapeError("matmul: inner dimensions mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    Tensor<S> out({m, n});
    detail::mm_nn(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, m, k, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) detail::mm_nt(g->data(), b.ptr(), gm.slot(a).data(), m, n, k);
            if (b.grad_enabled) detail::mm_tn(a.ptr(), g->data(), gm.slot(b).data(), m, k, n);
        });
    }
    return out;
}

// a[m,k] * b[n,k]^T without materializing the transpose (used for the
// embedding-tied output projection).
template <class S>
Tensor<S> matmul_nt(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(1))
        throw ShapeError("matmul_nt: inner dimensions mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(0);
    Tensor<S> out({m, n});
    detail::mm_nt(a.ptr(), b.ptr(), out.ptr(), m, k, n);
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, m, k, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) detail::mm_nn(g->data(), b.ptr(), gm.slot(a).data(), m, n, k);
            if (b.grad_enabled) detail::mm_tn(g->data(), a.ptr(), gm.slot(b).data(), m, n, k);
        });
    }
    return out;
}

template <class S>
Tensor<S> bmm(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(1))
        throw ShapeError("bmm: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
    Tensor<S> out({nb, m, n});
    for (std::size_t q = 0; q < nb; ++q)
        detail::mm_nn(a.ptr() + q * m * k, b.ptr() + q * k * n, out.ptr() + q * m * n, m, k, n);
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, nb, m, k, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) {
                auto& ga = gm.slot(a);
                for (std::size_t q = 0; q < nb; ++q)
                    detail::mm_nt(g->data() + q * m * n, b.ptr() + q * k * n, ga.data() + q * m * k, m, n, k);
            }
            if (b.grad_enabled) {
                auto& gb = gm.slot(b);
                for (std::size_t q = 0; q < nb; ++q)
                    detail::mm_tn(a.ptr() + q * m * k, g->data() + q * m * n, gb.data() + q * k * n, m, k, n);
            }
        });
    }
    return out;
}

// Batched a[B,m,k] * b[B,n,k]^T (attention scores).
template <class S>
Tensor<S> bmm_nt(const Tensor<S>& a, const Tensor<S>& b, Tape<S>* tape = nullptr) {
    if (a.rank() != 3 || b.rank() != 3 || a.dim(0) != b.dim(0) || a.dim(2) != b.dim(2))
        throw ShapeError("bmm_nt: shape mismatch: " + shape_str(a.shape) + " vs " + shape_str(b.shape));
    const std::size_t nb = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(1);
    Tensor<S> out({nb, m, n});
    for (std::size_t q = 0; q < nb; ++q)
        detail::mm_nt(a.ptr() + q * m * k, b.ptr() + q * n * k, out.ptr() + q * m * n, m, k, n);
    if (tape && (a.grad_enabled || b.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([a, b, oid = out.id, nb, m, k, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (a.grad_enabled) {
                auto& ga = gm.slot(a);
                for (std::size_t q = 0; q < nb; ++q)
                    detail::mm_nn(g->data() + q * m * n, b.ptr() + q * n * k, ga.data() + q * m * k, m, n, k);
            }
            if (b.grad_enabled) {
                auto& gb = gm.slot(b);
                for (std::size_t q = 0; q < nb; ++q)
                    detail::mm_tn(g->data() + q * m * n, a.ptr() + q * m * k, gb.data() + q * n * k, m, n, k);
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Nonlinearities and normalization
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> relu(const Tensor<S>& a, Tape<S>* tape = nullptr) {
    Tensor<S> out(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = a[i] > S(0) ? a[i] : S(0);
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& ga = gm.slot(a);
            // subgradient at 0 is 0
            for (std::size_t i = 0; i < n; ++i)
                if (a[i] > S(0)) ga[i] += (*g)[i];
        });
    }
    return out;
}

namespace detail {
template <class S>
inline S gelu_tanh(S x) {
    const S k = S(0.7978845608028654);  // sqrt(2/pi)
    const S t = std::tanh(k * (x + S(0.044715) * x * x * x));
    return S(0.5) * x * (S(1) + t);
}

template <class S>
inline S gelu_tanh_grad(S x) {
    const S k = S(0.7978845608028654);
    const S inner = k * (x + S(0.044715) * x * x * x);
    const S t = std::tanh(inner);
    const S dinner = k * (S(1) + S(3) * S(0.044715) * x * x);
    return S(0.5) * (S(1) + t) + S(0.5) * x * (S(1) - t * t) * dinner;
}
}  // namespace detail

template <class S>
Tensor<S> gelu(const Tensor<S>& a, Tape<S>* tape = nullptr) {
    Tensor<S> out(a.shape);
    const std::size_t n = a.numel();
    for (std::size_t i = 0; i < n; ++i) out[i] = detail::gelu_tanh(a[i]);
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, oid = out.id, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& ga = gm.slot(a);
            for (std::size_t i = 0; i < n; ++i) ga[i] += (*g)[i] * detail::gelu_tanh_grad(a[i]);
        });
    }
    return out;
}

// Softmax over the last axis, max-subtracted for stability.
template <class S>
Tensor<S> softmax_lastdim(const Tensor<S>& a, Tape<S>* tape = nullptr) {
    if (a.rank() < 1 || a.shape.back() < 1) throw ShapeError("softmax: empty last axis " + shape_str(a.shape));
    const std::size_t n = a.shape.back();
    const std::size_t rows = a.numel() / n;
    Tensor<S> out(a.shape);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* in = a.ptr() + r * n;
        S* o = out.ptr() + r * n;
        S mx = in[0];
        for (std::size_t j = 1; j < n; ++j) mx = std::max(mx, in[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < n; ++j) {
            o[j] = std::exp(in[j] - mx);
            denom += o[j];
        }
        for (std::size_t j = 0; j < n; ++j) o[j] /= denom;
    }
    if (tape && a.grad_enabled) {
        out.grad_enabled = true;
        tape->record([a, out, oid = out.id, rows, n](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& ga = gm.slot(a);
            for (std::size_t r = 0; r < rows; ++r) {
                const S* y = out.ptr() + r * n;
                const S* gy = g->data() + r * n;
                S dot = S(0);
                for (std::size_t j = 0; j < n; ++j) dot += gy[j] * y[j];
                S* gx = ga.data() + r * n;
                for (std::size_t j = 0; j < n; ++j) gx[j] += y[j] * (gy[j] - dot);
            }
        });
    }
    return out;
}

// Per-row layer normalization over the trailing axis with biased variance.
template <class S>
Tensor<S> layer_norm(const Tensor<S>& x, const Tensor<S>& gamma, const Tensor<S>& beta, S eps = S(1e-5),
                     Tape<S>* tape = nullptr) {
    if (x.rank() < 1 || gamma.rank() != 1 || beta.rank() != 1) throw ShapeError("layer_norm: bad ranks");
    const std::size_t d = x.shape.back();
    if (gamma.dim(0) != d || beta.dim(0) != d)
        throw ShapeError("layer_norm: feature size mismatch: " + shape_str(x.shape) + " vs gamma " +
                         shape_str(gamma.shape) + ", beta " + shape_str(beta.shape));
    if (eps <= S(0)) throw ConfigError("layer_norm: eps must be positive");
    const std::size_t rows = x.numel() / d;
    Tensor<S> out(x.shape);
    // normalized values and inverse stddevs are kept for the backward rule
    auto xhat = std::make_shared<std::vector<S>>(x.numel());
    auto inv_std = std::make_shared<std::vector<S>>(rows);
    for (std::size_t r = 0; r < rows; ++r) {
        const S* in = x.ptr() + r * d;
        S mean = S(0);
        for (std::size_t j = 0; j < d; ++j) mean += in[j];
        mean /= S(d);
        S var = S(0);
        for (std::size_t j = 0; j < d; ++j) {
            const S c = in[j] - mean;
            var += c * c;
        }
        var /= S(d);
        const S is = S(1) / std::sqrt(var + eps);
        (*inv_std)[r] = is;
        S* xh = xhat->data() + r * d;
        S* o = out.ptr() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
            xh[j] = (in[j] - mean) * is;
            o[j] = gamma[j] * xh[j] + beta[j];
        }
    }
    if (tape && (x.grad_enabled || gamma.grad_enabled || beta.grad_enabled)) {
        out.grad_enabled = true;
        tape->record([x, gamma, beta, xhat, inv_std, oid = out.id, rows, d](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            if (beta.grad_enabled) {
                auto& gb = gm.slot(beta);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gb[j] += (*g)[r * d + j];
            }
            if (gamma.grad_enabled) {
                auto& gg = gm.slot(gamma);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t j = 0; j < d; ++j) gg[j] += (*g)[r * d + j] * (*xhat)[r * d + j];
            }
            if (x.grad_enabled) {
                auto& gx = gm.slot(x);
                for (std::size_t r = 0; r < rows; ++r) {
                    const S* gy = g->data() + r * d;
                    const S* xh = xhat->data() + r * d;
                    S mean_dxhat = S(0), mean_dxhat_xhat = S(0);
                    for (std::size_t j = 0; j < d; ++j) {
                        const S dxh = gy[j] * gamma[j];
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xh[j];
                    }
                    mean_dxhat /= S(d);
                    mean_dxhat_xhat /= S(d);
                    const S is = (*inv_std)[r];
                    for (std::size_t j = 0; j < d; ++j) {
                        const S dxh = gy[j] * gamma[j];
                        gx[r * d + j] += is * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
                    }
                }
            }
        });
    }
    return out;
}

// ---------------------------------------------------------------------------
// Embedding lookup and masked cross-entropy
// ---------------------------------------------------------------------------

template <class S>
Tensor<S> embedding_lookup(const Tensor<S>& table, const std::vector<std::int32_t>& ids, Tape<S>* tape = nullptr) {
    if (table.rank() != 2) throw ShapeError("embedding_lookup: table must be rank 2, got " + shape_str(table.shape));
    const std::size_t vocab = table.dim(0), d = table.dim(1);
    for (const auto id : ids)
        if (id < 0 || static_cast<std::size_t>(id) >= vocab)
            throw std::out_of_range("embedding_lookup: id " + std::to_string(id) + " outside vocab " +
                                    std::to_string(vocab));
    Tensor<S> out({ids.size(), d});
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const S* src = table.ptr() + static_cast<std::size_t>(ids[i]) * d;
        S* dst = out.ptr() + i * d;
        for (std::size_t j = 0; j < d; ++j) dst[j] = src[j];
    }
    if (tape && table.grad_enabled) {
        out.grad_enabled = true;
        tape->record([table, ids, oid = out.id, d](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            auto& gt = gm.slot(table);
            for (std::size_t i = 0; i < ids.size(); ++i) {
                S* dst = gt.data() + static_cast<std::size_t>(ids[i]) * d;
                const S* src = g->data() + i * d;
                for (std::size_t j = 0; j < d; ++j) dst[j] += src[j];
            }
        });
    }
    return out;
}

// Mean negative log-softmax of the target class over unignored rows.
// `ignore` rows contribute nothing to the loss or the gradient.
template <class S>
Tensor<S> cross_entropy_masked(const Tensor<S>& logits, const std::vector<std::int32_t>& targets,
                               const std::vector<std::uint8_t>& loss_mask, Tape<S>* tape = nullptr) {
    if (logits.rank() < 2) throw ShapeError("cross_entropy_masked: logits must be at least rank 2, got " + shape_str(logits.shape));
    const std::size_t vocab = logits.shape.back();
    const std::size_t rows = logits.numel() / vocab;  // leading axes flatten to rows
    if (targets.size() != rows || loss_mask.size() != rows)
        throw ShapeError("cross_entropy_masked: expected " + std::to_string(rows) + " targets/mask entries");
    std::size_t count = 0;
    S total = S(0);
    for (std::size_t r = 0; r < rows; ++r) {
        if (!loss_mask[r]) continue;
        if (targets[r] < 0 || static_cast<std::size_t>(targets[r]) >= vocab)
            throw std::out_of_range("cross_entropy_masked: target " + std::to_string(targets[r]) +
                                    " outside vocab " + std::to_string(vocab));
        const S* row = logits.ptr() + r * vocab;
        S mx = row[0];
        for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
        S denom = S(0);
        for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
        total += mx + std::log(denom) - row[static_cast<std::size_t>(targets[r])];
        ++count;
    }
    if (count == 0) throw DataError("cross_entropy_masked: all positions ignored, loss undefined");
    Tensor<S> out = Tensor<S>::scalar(total / S(count));
    if (tape && logits.grad_enabled) {
        out.grad_enabled = true;
        tape->record([logits, targets, loss_mask, oid = out.id, rows, vocab, count](GradientMap<S>& gm) {
            const auto* g = gm.find(oid);
            if (!g) return;
            const S upstream = (*g)[0] / S(count);
            auto& gl = gm.slot(logits);
            for (std::size_t r = 0; r < rows; ++r) {
                if (!loss_mask[r]) continue;
                const S* row = logits.ptr() + r * vocab;
                S mx = row[0];
                for (std::size_t j = 1; j < vocab; ++j) mx = std::max(mx, row[j]);
                S denom = S(0);
                for (std::size_t j = 0; j < vocab; ++j) denom += std::exp(row[j] - mx);
                S* grow = gl.data() + r * vocab;
                for (std::size_t j = 0; j < vocab; ++j) {
                    const S p = std::exp(row[j] - mx) / denom;
                    grow[j] += upstream * (p - (static_cast<std::size_t>(targets[r]) == j ? S(1) : S(0)));
                }
            }
        });
    }
    return out;
}

}  // namespace peft
