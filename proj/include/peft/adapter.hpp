#pragma once

#include <cstdint>
#include <string>
#include <type_traits>
#include <vector>

#include "peft/container.hpp"
#include "peft/encoder_config.hpp"
#include "peft/rng.hpp"
#include "peft/tensor.hpp"

// Bottleneck adapters: a residual down-project / nonlinearity / up-project
// block applied after each layer's feed-forward sublayer. The up-projection
// starts at zero, so a fresh adapter is an exact identity and training begins
// from unmodified base-model behavior.

namespace peft {

enum class AdapterNonlinearity { relu, gelu };
enum class AdapterInsertion { after_ffn };

inline std::string to_string(AdapterNonlinearity n) { return n == AdapterNonlinearity::relu ? "relu" : "gelu"; }

inline AdapterNonlinearity nonlinearity_from_string(const std::string& s) {
    if (s == "relu") return AdapterNonlinearity::relu;
    if (s == "gelu") return AdapterNonlinearity::gelu;
    throw ConfigError("adapter nonlinearity must be relu or gelu, got \"" + s + "\"");
}

struct AdapterConfig {
    std::string name = "adapter";
    std::size_t reduction_factor = 16;
    AdapterNonlinearity nonlinearity = AdapterNonlinearity::relu;
    AdapterInsertion insertion = AdapterInsertion::after_ffn;

    void validate() const {
        if (reduction_factor == 0) throw ConfigError("adapter config: reduction_factor must be >= 1");
        if (name.empty()) throw ConfigError("adapter config: name must not be empty");
    }

    // Bottleneck width: d_model / reduction_factor rounded up, at least 1.
    std::size_t bottleneck(std::size_t d_model) const {
        const std::size_t m = (d_model + reduction_factor - 1) / reduction_factor;
        return m == 0 ? 1 : m;
    }
};

template <class S = float>
struct AdapterWeightsT {
    struct Layer {
        Tensor<S> down_weight;  // [d_model, m]
        Tensor<S> down_bias;    // [m]
        Tensor<S> up_weight;    // [m, d_model]
        Tensor<S> up_bias;      // [d_model]
    };

    AdapterConfig config;
    EncoderFingerprint fingerprint;
    std::size_t bottleneck = 0;
    std::vector<Layer> layers;

    // Parameters in canonical order, names scoped by the adapter name.
    template <class Fn>
    void for_each_param(Fn&& fn) {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string prefix = "adapter." + config.name + ".layer." + std::to_string(i) + ".";
            fn(prefix + "down.weight", layers[i].down_weight);
            fn(prefix + "down.bias", layers[i].down_bias);
            fn(prefix + "up.weight", layers[i].up_weight);
            fn(prefix + "up.bias", layers[i].up_bias);
        }
    }

    template <class Fn>
    void for_each_param(Fn&& fn) const {
        for (std::size_t i = 0; i < layers.size(); ++i) {
            const std::string prefix = "adapter." + config.name + ".layer." + std::to_string(i) + ".";
            fn(prefix + "down.weight", layers[i].down_weight);
            fn(prefix + "down.bias", layers[i].down_bias);
            fn(prefix + "up.weight", layers[i].up_weight);
            fn(prefix + "up.bias", layers[i].up_bias);
        }
    }

    std::size_t param_count() const {
        std::size_t n = 0;
        for_each_param([&](const std::string&, const Tensor<S>& t) { n += t.numel(); });
        return n;
    }

    void set_grad_enabled(bool on) {
        for_each_param([on](const std::string&, Tensor<S>& t) { t.grad_enabled = on; });
    }
};

using AdapterWeights = AdapterWeightsT<float>;

// Closed-form parameter count: n_layers * (2 d m + m + d).
inline std::size_t adapter_param_count(const EncoderConfig& encoder, const AdapterConfig& adapter) {
    const std::size_t d = encoder.d_model;
    const std::size_t m = adapter.bottleneck(d);
    return encoder.n_layers * (2 * d * m + m + d);
}

// Fraction of the base model the adapter adds; the per-task storage story.
inline double adapter_param_ratio(const EncoderConfig& encoder, const AdapterConfig& adapter) {
    return static_cast<double>(adapter_param_count(encoder, adapter)) /
           static_cast<double>(parameter_count(encoder));
}

template <class S = float>
AdapterWeightsT<S> init_adapter(const EncoderConfig& encoder, const AdapterConfig& adapter, std::uint64_t seed) {
    encoder.validate();
    adapter.validate();
    AdapterWeightsT<S> w;
    w.config = adapter;
    w.fingerprint = EncoderFingerprint::of(encoder);
    const std::size_t d = encoder.d_model;
    w.bottleneck = adapter.bottleneck(d);
    Rng rng = Rng::stream(seed, "adapter_init");
    for (std::size_t i = 0; i < encoder.n_layers; ++i) {
        typename AdapterWeightsT<S>::Layer layer;
        layer.down_weight = Tensor<S>({d, w.bottleneck});
        for (std::size_t j = 0; j < layer.down_weight.numel(); ++j)
            layer.down_weight[j] = static_cast<S>(rng.truncated_normal(0.02f));
        layer.down_bias = Tensor<S>({w.bottleneck});
        layer.up_weight = Tensor<S>({w.bottleneck, d});  // zero: identity at init
        layer.up_bias = Tensor<S>({d});
        w.layers.push_back(std::move(layer));
    }
    return w;
}

// h + up(nonlinearity(down(h))): the residual bottleneck at one layer.
template <class S>
Tensor<S> adapter_forward(const AdapterWeightsT<S>& a, std::size_t layer_index, const Tensor<S>& h,
                          std::type_identity_t<Tape<S>*> tape = nullptr) {
    if (layer_index >= a.layers.size())
        throw ContractError("adapter_forward: layer " + std::to_string(layer_index) + " outside " +
                            std::to_string(a.layers.size()) + " layers");
    if (h.rank() < 1 || h.shape.back() != a.fingerprint.d_model)
        throw CompatError("adapter_forward: input width " + shape_str(h.shape) + " does not match adapter built for " +
                          a.fingerprint.describe());
    const auto& layer = a.layers[layer_index];
    const bool flat = h.rank() == 2;
    const Tensor<S> h2 = flat ? h : reshape(h, {h.numel() / h.shape.back(), h.shape.back()}, tape);
    auto z = add_row_bias(matmul(h2, layer.down_weight, tape), layer.down_bias, tape);
    auto act = a.config.nonlinearity == AdapterNonlinearity::relu ? relu(z, tape) : gelu(z, tape);
    auto up = add_row_bias(matmul(act, layer.up_weight, tape), layer.up_bias, tape);
    auto out = add(h2, up, tape);
    return flat ? out : reshape(out, h.shape, tape);
}

template <class S = float>
struct AdapterStackT {
    struct Entry {
        AdapterWeightsT<S> weights;
        bool trainable = false;
    };
    std::vector<Entry> entries;

    bool empty() const { return entries.empty(); }

    void push(AdapterWeightsT<S> weights, bool trainable) {
        for (const auto& e : entries)
            if (e.weights.config.name == weights.config.name)
                throw ContractError("adapter stack: duplicate adapter name \"" + weights.config.name + "\"");
        entries.push_back({std::move(weights), trainable});
    }

    void check_compatible(const EncoderConfig& cfg) const {
        for (const auto& e : entries)
            if (!e.weights.fingerprint.matches(cfg))
                throw CompatError("adapter \"" + e.weights.config.name + "\" built for " +
                                  e.weights.fingerprint.describe() + ", encoder is d_model=" +
                                  std::to_string(cfg.d_model) + ", n_layers=" + std::to_string(cfg.n_layers) +
                                  ", vocab_size=" + std::to_string(cfg.vocab_size));
    }
};

using AdapterStack = AdapterStackT<float>;

// Applies stack members in order at one insertion point. An empty stack is
// the identity, not an error.
template <class S>
Tensor<S> apply_stack(const AdapterStackT<S>& stack, std::size_t layer_index, const Tensor<S>& h,
                      std::type_identity_t<Tape<S>*> tape = nullptr) {
    Tensor<S> out = h;
    for (const auto& entry : stack.entries) out = adapter_forward(entry.weights, layer_index, out, tape);
    return out;
}

// ---------------------------------------------------------------------------
// Serialization (kind tag "ADPT" in the shared container)
// ---------------------------------------------------------------------------

inline void save_adapter(const AdapterWeights& w, const std::string& path) {
    std::map<std::string, std::string> meta;
    meta["adapter.name"] = w.config.name;
    meta["adapter.reduction_factor"] = std::to_string(w.config.reduction_factor);
    meta["adapter.nonlinearity"] = to_string(w.config.nonlinearity);
    meta["adapter.insertion"] = "after_ffn";
    meta["adapter.bottleneck"] = std::to_string(w.bottleneck);
    meta["encoder.d_model"] = std::to_string(w.fingerprint.d_model);
    meta["encoder.n_layers"] = std::to_string(w.fingerprint.n_layers);
    meta["encoder.vocab_size"] = std::to_string(w.fingerprint.vocab_size);
    std::vector<NamedTensor> tensors;
    w.for_each_param([&](const std::string& name, const Tensor<float>& t) {
        tensors.push_back({name, t.shape, *t.data});
    });
    write_container(path, "ADPT", meta, tensors);
}

inline AdapterWeights load_adapter(const std::string& path) {
    const Container c = read_container(path);
    if (c.kind != "ADPT") throw FormatError("adapter file " + path + ": kind \"" + c.kind + "\", expected ADPT");
    AdapterWeights w;
    w.config.name = c.meta_at("adapter.name");
    w.config.reduction_factor = std::stoull(c.meta_at("adapter.reduction_factor"));
    w.config.nonlinearity = nonlinearity_from_string(c.meta_at("adapter.nonlinearity"));
    w.bottleneck = std::stoull(c.meta_at("adapter.bottleneck"));
    w.fingerprint.d_model = std::stoull(c.meta_at("encoder.d_model"));
    w.fingerprint.n_layers = std::stoull(c.meta_at("encoder.n_layers"));
    w.fingerprint.vocab_size = std::stoull(c.meta_at("encoder.vocab_size"));
    w.layers.resize(w.fingerprint.n_layers);
    w.for_each_param([&](const std::string& name, Tensor<float>& t) {
        const NamedTensor* stored = c.find(name);
        if (!stored) throw FormatError("adapter file " + path + ": missing tensor \"" + name + "\"");
        t = Tensor<float>(stored->shape, stored->values);
    });
    // shape sanity against the recorded fingerprint
    for (const auto& layer : w.layers) {
        if (layer.down_weight.shape != std::vector<std::size_t>{w.fingerprint.d_model, w.bottleneck} ||
            layer.up_weight.shape != std::vector<std::size_t>{w.bottleneck, w.fingerprint.d_model})
            throw FormatError("adapter file " + path + ": tensor shapes disagree with header");
    }
    return w;
}

}  // namespace peft
