#pragma once

#include <cstdint>
#include <string>

#include "peft/error.hpp"
#include "peft/rng.hpp"

namespace peft {

// Architecture hyperparameters of the bidirectional encoder. The default is
// the desk-scale setup: small enough to train in minutes on a laptop CPU.
struct EncoderConfig {
    std::size_t vocab_size = 8192;
    std::size_t d_model = 128;
    std::size_t n_layers = 4;
    std::size_t n_heads = 4;
    std::size_t d_ff = 512;
    std::size_t max_positions = 128;
    float dropout_rate = 0.1f;
    std::int32_t pad_id = 0;
    std::int32_t cls_id = 1;
    std::int32_t sep_id = 2;
    std::int32_t mask_id = 3;
    std::int32_t unk_id = 4;

    void validate() const {
        if (vocab_size == 0 || d_model == 0 || n_layers == 0 || n_heads == 0 || d_ff == 0 || max_positions == 0)
            throw ConfigError("encoder config: all sizes must be positive");
        if (d_model % n_heads != 0)
            throw ConfigError("encoder config: d_model " + std::to_string(d_model) + " not divisible by n_heads " +
                              std::to_string(n_heads));
        if (!(dropout_rate >= 0.0f && dropout_rate < 1.0f))
            throw ConfigError("encoder config: dropout_rate must be in [0,1)");
        const std::int32_t ids[5] = {pad_id, cls_id, sep_id, mask_id, unk_id};
        for (int i = 0; i < 5; ++i) {
            if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= vocab_size)
                throw ConfigError("encoder config: special token id " + std::to_string(ids[i]) + " outside vocab");
            for (int j = i + 1; j < 5; ++j)
                if (ids[i] == ids[j]) throw ConfigError("encoder config: special token ids must be distinct");
        }
    }

    bool is_special(std::int32_t id) const {
        return id == pad_id || id == cls_id || id == sep_id || id == mask_id || id == unk_id;
    }

    std::string canonical_string() const {
        return "vocab_size=" + std::to_string(vocab_size) + ";d_model=" + std::to_string(d_model) +
               ";n_layers=" + std::to_string(n_layers) + ";n_heads=" + std::to_string(n_heads) +
               ";d_ff=" + std::to_string(d_ff) + ";max_positions=" + std::to_string(max_positions) +
               ";dropout=" + std::to_string(dropout_rate) + ";pad=" + std::to_string(pad_id) +
               ";cls=" + std::to_string(cls_id) + ";sep=" + std::to_string(sep_id) +
               ";mask=" + std::to_string(mask_id) + ";unk=" + std::to_string(unk_id);
    }

    std::uint64_t config_hash() const { return fnv1a64(canonical_string()); }

    bool operator==(const EncoderConfig&) const = default;
};

// Exact parameter count of the encoder plus its MLM head, in closed form.
// Must agree with enumeration over the named parameter map (tested).
inline std::size_t parameter_count(const EncoderConfig& c) {
    const std::size_t d = c.d_model, ff = c.d_ff;
    const std::size_t embeddings = c.vocab_size * d + c.max_positions * d + 2 * d;
    const std::size_t per_layer = 4 * (d * d + d)   // q, k, v, out projections
                                  + 2 * d           // attention layer norm
                                  + (d * ff + ff)   // ffn up
                                  + (ff * d + d)    // ffn down
                                  + 2 * d;          // ffn layer norm
    const std::size_t mlm_head = (d * d + d) + 2 * d + c.vocab_size;
    return embeddings + c.n_layers * per_layer + mlm_head;
}

// What an adapter remembers about the encoder it was built for. Loading an
// adapter into a differently shaped encoder is refused up front.
struct EncoderFingerprint {
    std::size_t d_model = 0;
    std::size_t n_layers = 0;
    std::size_t vocab_size = 0;

    static EncoderFingerprint of(const EncoderConfig& cfg) {
        return {cfg.d_model, cfg.n_layers, cfg.vocab_size};
    }

    bool matches(const EncoderConfig& cfg) const {
        return d_model == cfg.d_model && n_layers == cfg.n_layers && vocab_size == cfg.vocab_size;
    }

    std::string describe() const {
        return "d_model=" + std::to_string(d_model) + ", n_layers=" + std::to_string(n_layers) +
               ", vocab_size=" + std::to_string(vocab_size);
    }

    bool operator==(const EncoderFingerprint&) const = default;
};

}  // namespace peft
