#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <type_traits>
#include <unordered_map>
#include <vector>

#include "peft/adapter.hpp"
#include "peft/container.hpp"
#include "peft/encoder_config.hpp"
#include "peft/rng.hpp"
#include "peft/tensor.hpp"

// RoBERTa-style bidirectional encoder: learned absolute positions,
// post-layer-norm residual blocks, GELU feed-forward, and an MLM head whose
// output projection is tied to the token embedding matrix. Adapters, when
// supplied, run after each layer's feed-forward layer norm.

namespace peft {

template <class S = float>
struct EncoderWeightsT {
    EncoderConfig config;

    Tensor<S>& param(const std::string& name) {
        const auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("encoder weights: unknown parameter \"" + name + "\"");
        return params_[it->second].second;
    }
    const Tensor<S>& param(const std::string& name) const {
        const auto it = index_.find(name);
        if (it == index_.end()) throw ContractError("encoder weights: unknown parameter \"" + name + "\"");
        return params_[it->second].second;
    }

    std::vector<std::pair<std::string, Tensor<S>>>& params() { return params_; }
    const std::vector<std::pair<std::string, Tensor<S>>>& params() const { return params_; }

    void add_param(std::string name, Tensor<S> t) {
        if (index_.count(name)) throw ContractError("encoder weights: duplicate parameter \"" + name + "\"");
        index_.emplace(name, params_.size());
        params_.emplace_back(std::move(name), std::move(t));
    }

    std::size_t total_parameters() const {
        std::size_t n = 0;
        for (const auto& [name, t] : params_) n += t.numel();
        return n;
    }

    void set_grad_enabled(bool on) {
        for (auto& [name, t] : params_) t.grad_enabled = on;
    }

private:
    std::vector<std::pair<std::string, Tensor<S>>> params_;
    std::unordered_map<std::string, std::size_t> index_;
};

using EncoderWeights = EncoderWeightsT<float>;

namespace detail {
inline bool draws_from_init(const std::string& name) {
    // projection matrices and embedding tables draw from the init
    // distribution; biases start at zero, layer-norm gains at one
    return (name.size() > 7 && name.compare(name.size() - 7, 7, ".weight") == 0) || name == "embeddings.token" ||
           name == "embeddings.position";
}
}  // namespace detail

// Canonical parameter enumeration; init_encoder and the serializer both
// follow this order.
template <class Fn>
void for_each_encoder_param_name(const EncoderConfig& c, Fn&& fn) {
    const std::size_t d = c.d_model, ff = c.d_ff;
    fn("embeddings.token", std::vector<std::size_t>{c.vocab_size, d});
    fn("embeddings.position", std::vector<std::size_t>{c.max_positions, d});
    fn("embeddings.ln.gamma", std::vector<std::size_t>{d});
    fn("embeddings.ln.beta", std::vector<std::size_t>{d});
    for (std::size_t i = 0; i < c.n_layers; ++i) {
        const std::string p = "layer." + std::to_string(i) + ".";
        for (const char* proj : {"q", "k", "v", "out"}) {
            fn(p + "attn." + proj + ".weight", std::vector<std::size_t>{d, d});
            fn(p + "attn." + proj + ".bias", std::vector<std::size_t>{d});
        }
        fn(p + "attn.ln.gamma", std::vector<std::size_t>{d});
        fn(p + "attn.ln.beta", std::vector<std::size_t>{d});
        fn(p + "ffn.up.weight", std::vector<std::size_t>{d, ff});
        fn(p + "ffn.up.bias", std::vector<std::size_t>{ff});
        fn(p + "ffn.down.weight", std::vector<std::size_t>{ff, d});
        fn(p + "ffn.down.bias", std::vector<std::size_t>{d});
        fn(p + "ffn.ln.gamma", std::vector<std::size_t>{d});
        fn(p + "ffn.ln.beta", std::vector<std::size_t>{d});
    }
    fn("mlm_head.dense.weight", std::vector<std::size_t>{d, d});
    fn("mlm_head.dense.bias", std::vector<std::size_t>{d});
    fn("mlm_head.ln.gamma", std::vector<std::size_t>{d});
    fn("mlm_head.ln.beta", std::vector<std::size_t>{d});
    fn("mlm_head.output_bias", std::vector<std::size_t>{c.vocab_size});
}

// Truncated-normal weights (std 0.02), zero biases, unit layer-norm gains.
// Bitwise deterministic for a given seed.
template <class S = float>
EncoderWeightsT<S> init_encoder(const EncoderConfig& config, std::uint64_t seed) {
    config.validate();
    EncoderWeightsT<S> w;
    w.config = config;
    Rng rng = Rng::stream(seed, "encoder_init");
    for_each_encoder_param_name(config, [&](const std::string& name, const std::vector<std::size_t>& shape) {
        Tensor<S> t(shape);
        if (detail::draws_from_init(name)) {
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = static_cast<S>(rng.truncated_normal(0.02f));
        } else if (name.find(".ln.gamma") != std::string::npos) {
            for (std::size_t i = 0; i < t.numel(); ++i) t[i] = S(1);
        }  // biases, ln betas and the MLM output bias stay zero
        w.add_param(name, std::move(t));
    });
    return w;
}

// Dropout as multiplication by a 0 / 1/(1-rate) mask drawn from the run's
// dropout stream. Identity when not in train mode.
template <class S>
Tensor<S> dropout(const Tensor<S>& x, float rate, bool train_mode, Rng* rng, std::type_identity_t<Tape<S>*> tape) {
    if (!train_mode || rate <= 0.0f) return x;
    if (!rng) throw ContractError("dropout: train mode with nonzero rate needs an rng stream");
    Tensor<S> mask(x.shape);
    const S keep = S(1) / S(1.0f - rate);
    for (std::size_t i = 0; i < mask.numel(); ++i) mask[i] = rng->uniform() < rate ? S(0) : keep;
    return mul(x, mask, tape);
}

template <class S = float>
struct EncodeDebug {
    std::vector<Tensor<S>> attention_probs;  // per layer, [B*H, T, T]
};

inline std::vector<std::uint8_t> make_pad_mask(const std::vector<std::int32_t>& token_ids, std::int32_t pad_id) {
    std::vector<std::uint8_t> mask(token_ids.size());
    for (std::size_t i = 0; i < token_ids.size(); ++i) mask[i] = token_ids[i] == pad_id ? 1 : 0;
    return mask;
}

// Forward pass over a [B, T] batch of token ids. `pad_mask` is true at padded
// positions; attention logits at padded keys are pushed to -1e9 before the
// softmax so padding never leaks into real positions.
template <class S>
Tensor<S> encode(const EncoderWeightsT<S>& w, const std::vector<std::int32_t>& token_ids, std::size_t batch,
                 std::size_t seq_len, const std::vector<std::uint8_t>& pad_mask, bool train_mode, Rng* dropout_rng,
                 std::type_identity_t<const AdapterStackT<S>*> adapters = nullptr,
                 std::type_identity_t<Tape<S>*> tape = nullptr,
                 std::type_identity_t<EncodeDebug<S>*> debug = nullptr) {
    const EncoderConfig& cfg = w.config;
    if (seq_len > cfg.max_positions)
        throw DataError("encode: sequence length " + std::to_string(seq_len) + " exceeds max_positions " +
                        std::to_string(cfg.max_positions));
    if (token_ids.size() != batch * seq_len || pad_mask.size() != token_ids.size())
        throw ShapeError("encode: expected " + std::to_string(batch * seq_len) + " token ids and mask entries");
    if (adapters) adapters->check_compatible(cfg);

    const std::size_t d = cfg.d_model, heads = cfg.n_heads, dh = d / heads;
    const std::size_t rows = batch * seq_len;

    std::vector<std::int32_t> position_ids(rows);
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t t = 0; t < seq_len; ++t) position_ids[b * seq_len + t] = static_cast<std::int32_t>(t);

    auto x = add(embedding_lookup(w.param("embeddings.token"), token_ids, tape),
                 embedding_lookup(w.param("embeddings.position"), position_ids, tape), tape);
    x = layer_norm(x, w.param("embeddings.ln.gamma"), w.param("embeddings.ln.beta"), S(1e-5), tape);
    x = dropout(x, cfg.dropout_rate, train_mode, dropout_rng, tape);

    // additive attention mask, shared by every layer
    Tensor<S> attn_bias({batch * heads, seq_len, seq_len});
    for (std::size_t b = 0; b < batch; ++b)
        for (std::size_t key = 0; key < seq_len; ++key)
            if (pad_mask[b * seq_len + key])
                for (std::size_t h = 0; h < heads; ++h)
                    for (std::size_t q = 0; q < seq_len; ++q)
                        attn_bias[((b * heads + h) * seq_len + q) * seq_len + key] = S(-1e9);

    const S attn_scale = S(1) / static_cast<S>(std::sqrt(static_cast<double>(dh)));

    const auto split_heads = [&](const Tensor<S>& m) {
        return reshape(permute_0213(reshape(m, {batch, seq_len, heads, dh}, tape), tape), {batch * heads, seq_len, dh},
                       tape);
    };

    for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
        const std::string p = "layer." + std::to_string(layer) + ".";
        auto q = split_heads(add_row_bias(matmul(x, w.param(p + "attn.q.weight"), tape), w.param(p + "attn.q.bias"), tape));
        auto k = split_heads(add_row_bias(matmul(x, w.param(p + "attn.k.weight"), tape), w.param(p + "attn.k.bias"), tape));
        auto v = split_heads(add_row_bias(matmul(x, w.param(p + "attn.v.weight"), tape), w.param(p + "attn.v.bias"), tape));

        auto scores = add(scale(bmm_nt(q, k, tape), attn_scale, tape), attn_bias, tape);
        auto probs = softmax_lastdim(scores, tape);
        if (debug) debug->attention_probs.push_back(probs);
        probs = dropout(probs, cfg.dropout_rate, train_mode, dropout_rng, tape);

        auto ctx = reshape(permute_0213(reshape(bmm(probs, v, tape), {batch, heads, seq_len, dh}, tape), tape),
                           {rows, d}, tape);
        auto attn_out = add_row_bias(matmul(ctx, w.param(p + "attn.out.weight"), tape), w.param(p + "attn.out.bias"), tape);
        attn_out = dropout(attn_out, cfg.dropout_rate, train_mode, dropout_rng, tape);
        x = layer_norm(add(x, attn_out, tape), w.param(p + "attn.ln.gamma"), w.param(p + "attn.ln.beta"), S(1e-5), tape);

        auto up = gelu(add_row_bias(matmul(x, w.param(p + "ffn.up.weight"), tape), w.param(p + "ffn.up.bias"), tape), tape);
        auto down = add_row_bias(matmul(up, w.param(p + "ffn.down.weight"), tape), w.param(p + "ffn.down.bias"), tape);
        down = dropout(down, cfg.dropout_rate, train_mode, dropout_rng, tape);
        x = layer_norm(add(x, down, tape), w.param(p + "ffn.ln.gamma"), w.param(p + "ffn.ln.beta"), S(1e-5), tape);

        if (adapters) x = apply_stack(*adapters, layer, x, tape);
    }

    return reshape(x, {batch, seq_len, d}, tape);
}

// MLM prediction head: dense + GELU + layer norm, then a projection tied to
// the token embedding matrix plus a trainable output bias.
template <class S>
Tensor<S> mlm_head(const EncoderWeightsT<S>& w, const Tensor<S>& hidden, std::type_identity_t<Tape<S>*> tape = nullptr) {
    const std::size_t d = w.config.d_model;
    if (hidden.rank() < 2 || hidden.shape.back() != d)
        throw ShapeError("mlm_head: hidden " + shape_str(hidden.shape) + " does not end in d_model " +
                         std::to_string(d));
    const std::size_t rows = hidden.numel() / d;
    auto h = hidden.rank() == 2 ? hidden : reshape(hidden, {rows, d}, tape);
    h = gelu(add_row_bias(matmul(h, w.param("mlm_head.dense.weight"), tape), w.param("mlm_head.dense.bias"), tape), tape);
    h = layer_norm(h, w.param("mlm_head.ln.gamma"), w.param("mlm_head.ln.beta"), S(1e-5), tape);
    auto logits = add_row_bias(matmul_nt(h, w.param("embeddings.token"), tape), w.param("mlm_head.output_bias"), tape);
    if (hidden.rank() == 2) return logits;
    std::vector<std::size_t> out_shape(hidden.shape.begin(), hidden.shape.end() - 1);
    out_shape.push_back(w.config.vocab_size);
    return reshape(logits, out_shape, tape);
}

// Per-token classification head for NER.
template <class S = float>
struct NerHeadT {
    Tensor<S> weight;  // [d_model, n_labels]
    Tensor<S> bias;    // [n_labels]

    std::size_t n_labels() const { return bias.numel(); }
    std::size_t param_count() const { return weight.numel() + bias.numel(); }

    template <class Fn>
    void for_each_param(Fn&& fn) {
        fn(std::string("head.weight"), weight);
        fn(std::string("head.bias"), bias);
    }

    void set_grad_enabled(bool on) {
        weight.grad_enabled = on;
        bias.grad_enabled = on;
    }
};

using NerHead = NerHeadT<float>;

template <class S = float>
NerHeadT<S> init_ner_head(const EncoderConfig& cfg, std::size_t n_labels, std::uint64_t seed) {
    NerHeadT<S> head;
    head.weight = Tensor<S>({cfg.d_model, n_labels});
    head.bias = Tensor<S>({n_labels});
    Rng rng = Rng::stream(seed, "ner_head_init");
    for (std::size_t i = 0; i < head.weight.numel(); ++i)
        head.weight[i] = static_cast<S>(rng.truncated_normal(0.02f));
    return head;
}

template <class S>
Tensor<S> ner_head(const NerHeadT<S>& head, const Tensor<S>& hidden, std::type_identity_t<Tape<S>*> tape = nullptr) {
    const std::size_t d = head.weight.dim(0);
    if (hidden.rank() < 2 || hidden.shape.back() != d)
        throw ShapeError("ner_head: hidden " + shape_str(hidden.shape) + " does not end in d_model " +
                         std::to_string(d));
    const std::size_t rows = hidden.numel() / d;
    auto h = hidden.rank() == 2 ? hidden : reshape(hidden, {rows, d}, tape);
    auto logits = add_row_bias(matmul(h, head.weight, tape), head.bias, tape);
    if (hidden.rank() == 2) return logits;
    std::vector<std::size_t> out_shape(hidden.shape.begin(), hidden.shape.end() - 1);
    out_shape.push_back(head.n_labels());
    return reshape(logits, out_shape, tape);
}

// ---------------------------------------------------------------------------
// Trainable-parameter selection
// ---------------------------------------------------------------------------

enum class TuningMode { baseline_full, adapter_only };

template <class S = float>
struct ParamRef {
    std::string name;
    Tensor<S>* tensor = nullptr;
};

// The exact set of parameters the optimizer may touch. Everything else is
// frozen: it never gets grad_enabled and never receives updates.
//   baseline_full: all encoder parameters except the MLM-head-specific ones,
//                  plus the task head. Requires an empty stack.
//   adapter_only:  trainable stack members plus the task head.
template <class S>
std::vector<ParamRef<S>> trainable_parameters(EncoderWeightsT<S>& encoder, AdapterStackT<S>& stack,
                                              std::vector<ParamRef<S>> head_params, TuningMode mode) {
    std::vector<ParamRef<S>> out;
    if (mode == TuningMode::baseline_full) {
        if (!stack.empty())
            throw ContractError("trainable_parameters: baseline_full requires an empty adapter stack");
        for (auto& [name, tensor] : encoder.params())
            if (name.rfind("mlm_head.", 0) != 0) out.push_back({name, &tensor});
    } else {
        for (auto& entry : stack.entries) {
            if (!entry.trainable) continue;
            entry.weights.for_each_param([&](const std::string& name, Tensor<S>& t) { out.push_back({name, &t}); });
        }
    }
    for (auto& h : head_params) out.push_back(h);
    return out;
}

// ---------------------------------------------------------------------------
// Encoder weight files (kind tag "ENCW")
// ---------------------------------------------------------------------------

inline void save_encoder(const EncoderWeights& w, const std::string& path) {
    std::map<std::string, std::string> meta;
    const EncoderConfig& c = w.config;
    meta["encoder.vocab_size"] = std::to_string(c.vocab_size);
    meta["encoder.d_model"] = std::to_string(c.d_model);
    meta["encoder.n_layers"] = std::to_string(c.n_layers);
    meta["encoder.n_heads"] = std::to_string(c.n_heads);
    meta["encoder.d_ff"] = std::to_string(c.d_ff);
    meta["encoder.max_positions"] = std::to_string(c.max_positions);
    meta["encoder.dropout_rate"] = std::to_string(c.dropout_rate);
    meta["encoder.pad_id"] = std::to_string(c.pad_id);
    meta["encoder.cls_id"] = std::to_string(c.cls_id);
    meta["encoder.sep_id"] = std::to_string(c.sep_id);
    meta["encoder.mask_id"] = std::to_string(c.mask_id);
    meta["encoder.unk_id"] = std::to_string(c.unk_id);
    std::vector<NamedTensor> tensors;
    for (const auto& [name, t] : w.params()) tensors.push_back({name, t.shape, *t.data});
    write_container(path, "ENCW", meta, tensors);
}

inline EncoderWeights load_encoder(const std::string& path) {
    const Container c = read_container(path);
    if (c.kind != "ENCW") throw FormatError("encoder file " + path + ": kind \"" + c.kind + "\", expected ENCW");
    EncoderConfig cfg;
    cfg.vocab_size = std::stoull(c.meta_at("encoder.vocab_size"));
    cfg.d_model = std::stoull(c.meta_at("encoder.d_model"));
    cfg.n_layers = std::stoull(c.meta_at("encoder.n_layers"));
    cfg.n_heads = std::stoull(c.meta_at("encoder.n_heads"));
    cfg.d_ff = std::stoull(c.meta_at("encoder.d_ff"));
    cfg.max_positions = std::stoull(c.meta_at("encoder.max_positions"));
    cfg.dropout_rate = std::stof(c.meta_at("encoder.dropout_rate"));
    cfg.pad_id = std::stoi(c.meta_at("encoder.pad_id"));
    cfg.cls_id = std::stoi(c.meta_at("encoder.cls_id"));
    cfg.sep_id = std::stoi(c.meta_at("encoder.sep_id"));
    cfg.mask_id = std::stoi(c.meta_at("encoder.mask_id"));
    cfg.unk_id = std::stoi(c.meta_at("encoder.unk_id"));
    cfg.validate();
    EncoderWeights w;
    w.config = cfg;
    for_each_encoder_param_name(cfg, [&](const std::string& name, const std::vector<std::size_t>& shape) {
        const NamedTensor* stored = c.find(name);
        if (!stored) throw FormatError("encoder file " + path + ": missing tensor \"" + name + "\"");
        if (stored->shape != shape)
            throw FormatError("encoder file " + path + ": tensor \"" + name + "\" has shape " +
                              shape_str(stored->shape) + ", expected " + shape_str(shape));
        w.add_param(name, Tensor<float>(shape, stored->values));
    });
    return w;
}

}  // namespace peft
