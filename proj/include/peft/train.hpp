#pragma once

#include <algorithm>
#include <chrono>
#include <cstdint>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "peft/adapter.hpp"
#include "peft/config.hpp"
#include "peft/container.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/eval.hpp"
#include "peft/metrics.hpp"
#include "peft/optim.hpp"
#include "peft/rng.hpp"
#include "peft/tokenizer.hpp"

// Seeded, wall-clock-budgeted, resumable training: MLM pre-training of
// language adapters and NER fine-tuning in baseline / adapter modes.
//
// Determinism layout: the RNG stream for step k is derived from
// (seed, purpose, k) and the per-epoch shuffle from (seed, "shuffle", epoch),
// so every step is a pure function of (seed, config, data, step). A resumed
// run therefore replays steps k+1..N bitwise.

namespace peft {

// ---------------------------------------------------------------------------
// MLM corruption
// ---------------------------------------------------------------------------

struct MlmMasked {
    std::vector<std::int32_t> corrupted;
    std::vector<std::int32_t> targets;
    std::vector<std::uint8_t> loss_mask;
};

inline std::vector<std::uint8_t> make_special_mask(const std::vector<std::int32_t>& ids, const EncoderConfig& cfg) {
    std::vector<std::uint8_t> mask(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) mask[i] = cfg.is_special(ids[i]) ? 1 : 0;
    return mask;
}

// Each non-special position is selected with mask_prob; selected positions
// become the mask token (80%), a uniform random non-special id (10%) or stay
// unchanged (10%). An empty selection force-selects one position so every
// sequence contributes loss.
inline MlmMasked mlm_mask(const std::vector<std::int32_t>& ids, const std::vector<std::uint8_t>& special_mask,
                          const TrainConfig& cfg, const EncoderConfig& enc, Rng& rng) {
    if (ids.size() != special_mask.size()) throw ContractError("mlm_mask: ids and special mask differ in length");
    std::vector<std::size_t> maskable;
    for (std::size_t i = 0; i < ids.size(); ++i)
        if (!special_mask[i]) maskable.push_back(i);
    if (maskable.empty()) throw DataError("mlm_mask: all positions are special; sequence is unmaskable");

    MlmMasked out;
    out.corrupted = ids;
    out.targets = ids;
    out.loss_mask.assign(ids.size(), 0);

    bool any = false;
    for (const std::size_t i : maskable) {
        if (rng.uniform() < cfg.mask_prob) {
            out.loss_mask[i] = 1;
            any = true;
        }
    }
    if (!any) out.loss_mask[maskable[rng.uniform_int(maskable.size())]] = 1;

    for (const std::size_t i : maskable) {
        if (!out.loss_mask[i]) continue;
        const float action = rng.uniform();
        if (action < cfg.mask_token_frac) {
            out.corrupted[i] = enc.mask_id;
        } else if (action < cfg.mask_token_frac + cfg.mask_random_frac) {
            std::int32_t id = static_cast<std::int32_t>(rng.uniform_int(enc.vocab_size));
            while (enc.is_special(id)) id = static_cast<std::int32_t>(rng.uniform_int(enc.vocab_size));
            out.corrupted[i] = id;
        }  // else: keep the original token
    }
    return out;
}

// ---------------------------------------------------------------------------
// Deterministic batching: bucket by length, shuffle batch order per epoch
// ---------------------------------------------------------------------------

class BatchPlan {
public:
    static BatchPlan build(const std::vector<std::size_t>& lengths, std::size_t batch_size) {
        if (lengths.empty()) throw DataError("batch plan: no sentences");
        std::vector<std::size_t> order(lengths.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return lengths[a] != lengths[b] ? lengths[a] < lengths[b] : a < b;
        });
        BatchPlan plan;
        for (std::size_t at = 0; at < order.size(); at += batch_size) {
            const std::size_t end = std::min(order.size(), at + batch_size);
            plan.batches_.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(at),
                                       order.begin() + static_cast<std::ptrdiff_t>(end));
        }
        return plan;
    }

    std::size_t batch_count() const { return batches_.size(); }

    // Sentence indices for a global 1-based step.
    const std::vector<std::size_t>& batch_for_step(std::uint64_t seed, std::size_t step) const {
        const std::size_t epoch = (step - 1) / batches_.size();
        const std::size_t pos = (step - 1) % batches_.size();
        if (!epoch_valid_ || epoch_ != epoch) {
            epoch_order_.resize(batches_.size());
            for (std::size_t i = 0; i < epoch_order_.size(); ++i) epoch_order_[i] = i;
            Rng rng = Rng::stream(seed, "shuffle", epoch);
            for (std::size_t i = epoch_order_.size(); i > 1; --i)
                std::swap(epoch_order_[i - 1], epoch_order_[rng.uniform_int(i)]);
            epoch_ = epoch;
            epoch_valid_ = true;
        }
        return batches_[epoch_order_[pos]];
    }

private:
    std::vector<std::vector<std::size_t>> batches_;
    mutable std::vector<std::size_t> epoch_order_;
    mutable std::size_t epoch_ = 0;
    mutable bool epoch_valid_ = false;
};

// ---------------------------------------------------------------------------
// Trailing loss window (feeds the smoothed-loss metric across resumes)
// ---------------------------------------------------------------------------

class LossWindow {
public:
    static constexpr std::size_t kWindow = 25;

    void push(float loss) {
        if (values_.size() == kWindow) values_.erase(values_.begin());
        values_.push_back(loss);
    }

    double smoothed() const {
        if (values_.empty()) return 0.0;
        double total = 0.0;
        for (const float v : values_) total += v;
        return total / static_cast<double>(values_.size());
    }

    const std::vector<float>& values() const { return values_; }
    void restore(std::vector<float> values) { values_ = std::move(values); }

private:
    std::vector<float> values_;
};

// Highest dev score wins; ties keep the earlier step. NER tracks dev F1
// directly; MLM tracks negated dev loss so "higher is better" holds there
// too.
class BestDevTracker {
public:
    bool update(double f1, std::size_t step) {
        if (!has_ || f1 > f1_) {
            f1_ = f1;
            step_ = step;
            has_ = true;
            return true;
        }
        return false;
    }
    bool has() const { return has_; }
    double f1() const { return f1_; }
    std::size_t step() const { return step_; }
    void restore(double f1, std::size_t step) {
        if (step == 0) return;
        f1_ = f1;
        step_ = step;
        has_ = true;
    }

private:
    double f1_ = -1.0;
    std::size_t step_ = 0;
    bool has_ = false;
};

// ---------------------------------------------------------------------------
// Checkpoints (kind tag "CKPT")
// ---------------------------------------------------------------------------

struct TrainingState {
    TrainMode mode = TrainMode::mlm_adapter;
    std::size_t step = 0;
    std::uint64_t config_hash = 0;
    EncoderWeights encoder;
    AdapterStack stack;
    std::optional<NerHead> head;
    std::map<std::string, std::pair<std::vector<float>, std::vector<float>>> moments;  // name -> (m, v)
    std::vector<float> recent_losses;
    double best_dev_f1 = 0.0;
    std::size_t best_dev_step = 0;
};

namespace detail {
inline std::string format_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}
}  // namespace detail

inline void save_checkpoint(const TrainingState& state, const std::string& path) {
    std::map<std::string, std::string> meta;
    meta["ckpt.mode"] = to_string(state.mode);
    meta["ckpt.step"] = std::to_string(state.step);
    meta["ckpt.config_hash"] = hash_hex(state.config_hash);
    meta["ckpt.best_dev_f1"] = detail::format_double(state.best_dev_f1);
    meta["ckpt.best_dev_step"] = std::to_string(state.best_dev_step);
    // rng streams are re-derived per step; recorded for inspection only
    meta["rng.algorithm"] = std::string(Rng::kAlgorithm);

    const EncoderConfig& c = state.encoder.config;
    meta["encoder.vocab_size"] = std::to_string(c.vocab_size);
    meta["encoder.d_model"] = std::to_string(c.d_model);
    meta["encoder.n_layers"] = std::to_string(c.n_layers);
    meta["encoder.n_heads"] = std::to_string(c.n_heads);
    meta["encoder.d_ff"] = std::to_string(c.d_ff);
    meta["encoder.max_positions"] = std::to_string(c.max_positions);
    meta["encoder.dropout_rate"] = detail::format_double(c.dropout_rate);
    meta["encoder.pad_id"] = std::to_string(c.pad_id);
    meta["encoder.cls_id"] = std::to_string(c.cls_id);
    meta["encoder.sep_id"] = std::to_string(c.sep_id);
    meta["encoder.mask_id"] = std::to_string(c.mask_id);
    meta["encoder.unk_id"] = std::to_string(c.unk_id);

    meta["stack.count"] = std::to_string(state.stack.entries.size());
    for (std::size_t i = 0; i < state.stack.entries.size(); ++i) {
        const auto& entry = state.stack.entries[i];
        const std::string p = "stack." + std::to_string(i) + ".";
        meta[p + "name"] = entry.weights.config.name;
        meta[p + "reduction_factor"] = std::to_string(entry.weights.config.reduction_factor);
        meta[p + "nonlinearity"] = to_string(entry.weights.config.nonlinearity);
        meta[p + "trainable"] = entry.trainable ? "1" : "0";
    }
    if (state.head) meta["head.n_labels"] = std::to_string(state.head->n_labels());

    std::vector<NamedTensor> tensors;
    for (const auto& [name, t] : state.encoder.params()) tensors.push_back({"encoder." + name, t.shape, *t.data});
    for (const auto& entry : state.stack.entries)
        entry.weights.for_each_param(
            [&](const std::string& name, const Tensor<float>& t) { tensors.push_back({name, t.shape, *t.data}); });
    if (state.head) {
        tensors.push_back({"head.weight", state.head->weight.shape, *state.head->weight.data});
        tensors.push_back({"head.bias", state.head->bias.shape, *state.head->bias.data});
    }
    for (const auto& [name, mv] : state.moments) {
        tensors.push_back({"optim.m." + name, {mv.first.size()}, mv.first});
        tensors.push_back({"optim.v." + name, {mv.second.size()}, mv.second});
    }
    tensors.push_back({"state.recent_losses", {state.recent_losses.size()}, state.recent_losses});
    write_container(path, "CKPT", meta, tensors);
}

inline TrainingState load_checkpoint(const std::string& path) {
    const Container c = read_container(path);
    if (c.kind != "CKPT") throw FormatError("checkpoint " + path + ": kind \"" + c.kind + "\", expected CKPT");
    TrainingState state;
    state.mode = train_mode_from_string(c.meta_at("ckpt.mode"));
    state.step = std::stoull(c.meta_at("ckpt.step"));
    state.config_hash = std::stoull(c.meta_at("ckpt.config_hash"), nullptr, 16);
    state.best_dev_f1 = std::stod(c.meta_at("ckpt.best_dev_f1"));
    state.best_dev_step = std::stoull(c.meta_at("ckpt.best_dev_step"));

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
    state.encoder.config = cfg;
    for_each_encoder_param_name(cfg, [&](const std::string& name, const std::vector<std::size_t>& shape) {
        const NamedTensor* stored = c.find("encoder." + name);
        if (!stored) throw FormatError("checkpoint " + path + ": missing tensor \"encoder." + name + "\"");
        if (stored->shape != shape)
            throw FormatError("checkpoint " + path + ": tensor \"encoder." + name + "\" has unexpected shape");
        state.encoder.add_param(name, Tensor<float>(shape, stored->values));
    });

    const std::size_t stack_count = std::stoull(c.meta_at("stack.count"));
    for (std::size_t i = 0; i < stack_count; ++i) {
        const std::string p = "stack." + std::to_string(i) + ".";
        AdapterConfig acfg;
        acfg.name = c.meta_at(p + "name");
        acfg.reduction_factor = std::stoull(c.meta_at(p + "reduction_factor"));
        acfg.nonlinearity = nonlinearity_from_string(c.meta_at(p + "nonlinearity"));
        AdapterWeights w = init_adapter(cfg, acfg, 0);
        w.for_each_param([&](const std::string& name, Tensor<float>& t) {
            const NamedTensor* stored = c.find(name);
            if (!stored) throw FormatError("checkpoint " + path + ": missing tensor \"" + name + "\"");
            if (stored->shape != t.shape)
                throw FormatError("checkpoint " + path + ": tensor \"" + name + "\" has unexpected shape");
            std::copy(stored->values.begin(), stored->values.end(), t.ptr());
        });
        state.stack.push(std::move(w), c.meta_at(p + "trainable") == "1");
    }

    if (c.meta.count("head.n_labels")) {
        NerHead head;
        const NamedTensor* hw = c.find("head.weight");
        const NamedTensor* hb = c.find("head.bias");
        if (!hw || !hb) throw FormatError("checkpoint " + path + ": missing head tensors");
        head.weight = Tensor<float>(hw->shape, hw->values);
        head.bias = Tensor<float>(hb->shape, hb->values);
        state.head = std::move(head);
    }

    for (const auto& t : c.tensors) {
        if (t.name.rfind("optim.m.", 0) == 0) state.moments[t.name.substr(8)].first = t.values;
        else if (t.name.rfind("optim.v.", 0) == 0) state.moments[t.name.substr(8)].second = t.values;
    }
    if (const NamedTensor* recent = c.find("state.recent_losses")) state.recent_losses = recent->values;
    return state;
}

// ---------------------------------------------------------------------------
// Run summaries
// ---------------------------------------------------------------------------

enum class RunStatus { completed, budget_stopped };

struct RunSummary {
    RunStatus status = RunStatus::completed;
    std::size_t steps_completed = 0;
    double smoothed_loss_at_step10 = 0.0;  // trailing mean right after step 10
    double final_smoothed_loss = 0.0;
    double best_dev_f1 = 0.0;       // NER: highest dev micro-F1 seen
    double best_dev_loss = 0.0;     // MLM with a dev corpus: lowest dev loss
    std::size_t best_dev_step = 0;
    double dev_f1 = 0.0;   // from the best-dev weights (NER)
    double test_f1 = 0.0;  // from the best-dev weights (NER)
    std::string last_checkpoint;
};

// Copies parameter values from a loaded checkpoint into live objects,
// preserving tensor identities.
inline void apply_state_values(const TrainingState& state, EncoderWeights& encoder, AdapterStack& stack,
                               NerHead* head) {
    for (auto& [name, t] : encoder.params()) {
        const auto& src = state.encoder.param(name);
        if (src.shape != t.shape) throw FormatError("checkpoint restore: shape mismatch for \"" + name + "\"");
        std::copy(src.ptr(), src.ptr() + t.numel(), t.ptr());
    }
    if (state.stack.entries.size() != stack.entries.size())
        throw FormatError("checkpoint restore: adapter stack size mismatch");
    for (std::size_t i = 0; i < stack.entries.size(); ++i) {
        auto& mine = stack.entries[i].weights;
        const auto& theirs = state.stack.entries[i].weights;
        if (theirs.config.name != mine.config.name)
            throw FormatError("checkpoint restore: adapter \"" + mine.config.name + "\" not found in state");
        for (std::size_t l = 0; l < mine.layers.size(); ++l) {
            const auto copy_into = [](const Tensor<float>& src, Tensor<float>& dst) {
                std::copy(src.ptr(), src.ptr() + dst.numel(), dst.ptr());
            };
            copy_into(theirs.layers[l].down_weight, mine.layers[l].down_weight);
            copy_into(theirs.layers[l].down_bias, mine.layers[l].down_bias);
            copy_into(theirs.layers[l].up_weight, mine.layers[l].up_weight);
            copy_into(theirs.layers[l].up_bias, mine.layers[l].up_bias);
        }
    }
    if (head) {
        if (!state.head) throw FormatError("checkpoint restore: state has no head weights");
        std::copy(state.head->weight.ptr(), state.head->weight.ptr() + head->weight.numel(), head->weight.ptr());
        std::copy(state.head->bias.ptr(), state.head->bias.ptr() + head->bias.numel(), head->bias.ptr());
    }
}

namespace detail {

struct StepClock {
    std::chrono::steady_clock::time_point start = std::chrono::steady_clock::now();
    double elapsed_s() const {
        return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    }
};

// Everything the two loops share: the trainable set, optimizer, loss window,
// budget bookkeeping and checkpoint writing.
struct LoopCore {
    const TrainConfig& cfg;
    EncoderWeights& encoder;
    AdapterStack& stack;
    NerHead* head;  // null for MLM
    std::vector<ParamRef<float>> trainable;
    AdamW optimizer;
    LossWindow window;
    BestDevTracker best;
    StepClock clock;
    std::size_t start_step = 1;
    std::optional<std::size_t> session_limit;  // steps to run in this invocation

    LoopCore(const TrainConfig& cfg_in, EncoderWeights& enc, AdapterStack& stk, NerHead* head_in, TuningMode tuning,
             std::vector<ParamRef<float>> head_params, const TrainingState* resume, bool allow_config_change)
        : cfg(cfg_in),
          encoder(enc),
          stack(stk),
          head(head_in),
          trainable(trainable_parameters(enc, stk, std::move(head_params), tuning)),
          optimizer(trainable, cfg_in) {
        // freeze everything, then enable exactly the trainable set
        encoder.set_grad_enabled(false);
        for (auto& entry : stack.entries) entry.weights.set_grad_enabled(false);
        if (head) head->set_grad_enabled(false);
        for (auto& p : trainable) p.tensor->grad_enabled = true;

        if (resume) {
            if (resume->config_hash != cfg.config_hash() && !allow_config_change)
                throw ConfigError(
                    "resume: checkpoint was written under a different configuration (hash " +
                    hash_hex(resume->config_hash) + " vs " + hash_hex(cfg.config_hash()) +
                    "); pass allow_config_change to override");
            if (resume->mode != cfg.mode)
                throw ConfigError("resume: checkpoint mode " + to_string(resume->mode) + " differs from config mode " +
                                  to_string(cfg.mode));
            start_step = resume->step + 1;
            window.restore(resume->recent_losses);
            best.restore(resume->best_dev_f1, resume->best_dev_step);
            for (auto& slot : optimizer.slots()) {
                const auto it = resume->moments.find(slot.param.name);
                if (it == resume->moments.end())
                    throw FormatError("resume: checkpoint lacks optimizer state for \"" + slot.param.name + "\"");
                if (it->second.first.size() != slot.m.size())
                    throw FormatError("resume: optimizer state size mismatch for \"" + slot.param.name + "\"");
                slot.m = it->second.first;
                slot.v = it->second.second;
            }
        }
    }

    bool out_of_budget() const { return cfg.has_budget() && clock.elapsed_s() >= cfg.wall_clock_budget_seconds; }

    bool session_exhausted(std::size_t step) const {
        return session_limit && step >= start_step + *session_limit;
    }

    TrainingState snapshot(std::size_t step) const {
        TrainingState state;
        state.mode = cfg.mode;
        state.step = step;
        state.config_hash = cfg.config_hash();
        state.encoder = encoder;  // shares tensor storage; serialized immediately
        state.stack = stack;
        if (head) state.head = *head;
        for (const auto& slot : optimizer.slots()) state.moments[slot.param.name] = {slot.m, slot.v};
        state.recent_losses = window.values();
        state.best_dev_f1 = best.has() ? best.f1() : 0.0;
        state.best_dev_step = best.has() ? best.step() : 0;
        return state;
    }

    std::string checkpoint_path(const std::string& dir) const { return dir + "/checkpoint.ckpt"; }

    void write_checkpoint(const std::string& dir, std::size_t step) {
        std::filesystem::create_directories(dir);
        save_checkpoint(snapshot(step), checkpoint_path(dir));
    }
};

inline float scalar_loss_value(const Tensor<float>& loss) {
    const float v = loss[0];
    if (!std::isfinite(v)) throw NumericError("training: non-finite loss " + std::to_string(v));
    return v;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// MLM adapter pre-training
// ---------------------------------------------------------------------------

struct MlmTrainOptions {
    std::string checkpoint_dir = ".";
    MetricsSink* sink = nullptr;
    const TrainingState* resume = nullptr;
    std::optional<std::size_t> session_step_limit;  // operational stop, like the wall clock
    const Corpus* dev_corpus = nullptr;             // enables dev-loss model selection
    bool allow_config_change = false;               // accept a checkpoint with a different config hash
};

namespace detail {

// Mean masked-LM loss over a held-out corpus. The corruption is drawn from a
// fixed stream (salt 0), so successive evaluations score the same dev task
// and the selection is comparable across steps and resumes.
inline double mlm_dev_loss(const std::vector<std::vector<std::int32_t>>& encoded, const EncoderWeights& encoder,
                           const AdapterStack& stack, const TrainConfig& cfg) {
    Rng dev_rng = Rng::stream(cfg.seed, "dev_masking", 0);
    double total = 0.0;
    std::size_t count = 0;
    for (std::size_t at = 0; at < encoded.size(); at += cfg.batch_size) {
        const std::size_t end = std::min(encoded.size(), at + cfg.batch_size);
        std::size_t max_len = 0;
        for (std::size_t i = at; i < end; ++i) max_len = std::max(max_len, encoded[i].size());
        const std::size_t batch = end - at;
        std::vector<std::int32_t> token_ids(batch * max_len, encoder.config.pad_id);
        std::vector<std::int32_t> targets(batch * max_len, 0);
        std::vector<std::uint8_t> loss_mask(batch * max_len, 0);
        std::vector<std::uint8_t> pad_mask(batch * max_len, 1);
        std::size_t batch_masked = 0;
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& ids = encoded[at + b];
            const auto masked = mlm_mask(ids, make_special_mask(ids, encoder.config), cfg, encoder.config, dev_rng);
            for (std::size_t t = 0; t < ids.size(); ++t) {
                token_ids[b * max_len + t] = masked.corrupted[t];
                targets[b * max_len + t] = masked.targets[t];
                loss_mask[b * max_len + t] = masked.loss_mask[t];
                pad_mask[b * max_len + t] = 0;
                batch_masked += masked.loss_mask[t];
            }
        }
        const auto hidden = encode(encoder, token_ids, batch, max_len, pad_mask, false, nullptr, &stack);
        const auto loss = cross_entropy_masked(mlm_head(encoder, hidden), targets, loss_mask);
        total += static_cast<double>(loss[0]) * static_cast<double>(batch_masked);
        count += batch_masked;
    }
    return total / static_cast<double>(count);
}

}  // namespace detail

// Trains the adapters in `stack` (plus the MLM output bias) on raw text.
// The encoder, including the tied embeddings, stays bitwise frozen.
inline RunSummary train_language_adapter(const Corpus& corpus, const SubwordModel& tokenizer, EncoderWeights& encoder,
                                         AdapterStack& stack, const TrainConfig& cfg, const MlmTrainOptions& options) {
    cfg.validate();
    if (cfg.mode != TrainMode::mlm_adapter)
        throw ContractError("train_language_adapter: config mode must be mlm_adapter");
    if (corpus.size() == 0) throw DataError("train_language_adapter: corpus is empty");
    if (tokenizer.vocab_size() != encoder.config.vocab_size)
        throw ConfigError("train_language_adapter: tokenizer vocab " + std::to_string(tokenizer.vocab_size()) +
                          " does not match encoder vocab " + std::to_string(encoder.config.vocab_size));
    stack.check_compatible(encoder.config);
    bool any_trainable = false;
    for (const auto& e : stack.entries) any_trainable |= e.trainable;
    if (!any_trainable) throw ContractError("train_language_adapter: no trainable adapter in the stack");

    std::vector<ParamRef<float>> head_params{{"mlm_head.output_bias", &encoder.param("mlm_head.output_bias")}};
    detail::LoopCore core(cfg, encoder, stack, nullptr, TuningMode::adapter_only, std::move(head_params),
                          options.resume, options.allow_config_change);
    core.session_limit = options.session_step_limit;

    // encode once; sentences keep their corpus order for the batch plan
    std::vector<std::vector<std::int32_t>> encoded;
    std::vector<std::size_t> lengths;
    encoded.reserve(corpus.size());
    for (const auto& sentence : corpus.sentences) {
        encoded.push_back(tokenizer.encode_sentence(sentence, encoder.config.max_positions).first);
        lengths.push_back(encoded.back().size());
    }
    const BatchPlan plan = BatchPlan::build(lengths, cfg.batch_size);

    std::vector<std::vector<std::int32_t>> dev_encoded;
    if (options.dev_corpus) {
        if (options.dev_corpus->size() == 0) throw DataError("train_language_adapter: dev corpus is empty");
        for (const auto& sentence : options.dev_corpus->sentences)
            dev_encoded.push_back(tokenizer.encode_sentence(sentence, encoder.config.max_positions).first);
    }

    RunSummary summary;
    summary.last_checkpoint = core.checkpoint_path(options.checkpoint_dir);
    const std::string best_path = options.checkpoint_dir + "/best.ckpt";

    const auto run_dev_eval = [&](std::size_t step) {
        if (dev_encoded.empty()) return;
        const double dev_loss = detail::mlm_dev_loss(dev_encoded, encoder, stack, cfg);
        if (options.sink) options.sink->log(step, "dev", "mlm_loss", dev_loss);
        if (core.best.update(-dev_loss, step)) {  // lower loss is better
            std::filesystem::create_directories(options.checkpoint_dir);
            save_checkpoint(core.snapshot(step), best_path);
        }
    };

    std::size_t step = core.start_step;
    for (; step <= cfg.max_steps; ++step) {
        if (core.out_of_budget() || core.session_exhausted(step)) {
            core.write_checkpoint(options.checkpoint_dir, step - 1);
            summary.status = RunStatus::budget_stopped;
            summary.steps_completed = step - 1;
            summary.final_smoothed_loss = core.window.smoothed();
            return summary;
        }

        const auto& batch_indices = plan.batch_for_step(cfg.seed, step);
        Rng mask_rng = Rng::stream(cfg.seed, "masking", step);
        Rng dropout_rng = Rng::stream(cfg.seed, "dropout", step);

        std::size_t max_len = 0;
        for (const std::size_t idx : batch_indices) max_len = std::max(max_len, encoded[idx].size());
        const std::size_t batch = batch_indices.size();
        std::vector<std::int32_t> token_ids(batch * max_len, encoder.config.pad_id);
        std::vector<std::int32_t> targets(batch * max_len, 0);
        std::vector<std::uint8_t> loss_mask(batch * max_len, 0);
        std::vector<std::uint8_t> pad_mask(batch * max_len, 1);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& ids = encoded[batch_indices[b]];
            const auto masked = mlm_mask(ids, make_special_mask(ids, encoder.config), cfg, encoder.config, mask_rng);
            for (std::size_t t = 0; t < ids.size(); ++t) {
                token_ids[b * max_len + t] = masked.corrupted[t];
                targets[b * max_len + t] = masked.targets[t];
                loss_mask[b * max_len + t] = masked.loss_mask[t];
                pad_mask[b * max_len + t] = 0;
            }
        }

        Tape<float> tape;
        auto hidden = encode(encoder, token_ids, batch, max_len, pad_mask, true, &dropout_rng, &stack, &tape);
        auto logits = mlm_head(encoder, hidden, &tape);
        auto loss = cross_entropy_masked(logits, targets, loss_mask, &tape);
        const float loss_value = detail::scalar_loss_value(loss);

        auto grads = tape.backward(loss);
        const double grad_norm = clip_gradients(core.trainable, grads, cfg.grad_clip_norm);
        const float lr = lr_schedule(step, cfg);
        core.optimizer.step(step, grads, lr);

        core.window.push(loss_value);
        if (step == 10) summary.smoothed_loss_at_step10 = core.window.smoothed();
        if (options.sink && (step % cfg.log_interval_steps == 0 || step == cfg.max_steps)) {
            options.sink->log(step, "train", "mlm_loss", loss_value);
            options.sink->log(step, "train", "mlm_loss_smoothed", core.window.smoothed());
            options.sink->log(step, "train", "lr", lr);
            options.sink->log(step, "train", "grad_norm", grad_norm);
        }
        if (step % cfg.eval_interval_steps == 0 || step == cfg.max_steps) run_dev_eval(step);
        if (step % cfg.checkpoint_interval_steps == 0) core.write_checkpoint(options.checkpoint_dir, step);
    }

    core.write_checkpoint(options.checkpoint_dir, cfg.max_steps);
    if (!dev_encoded.empty() && core.best.has()) {
        apply_state_values(load_checkpoint(best_path), encoder, stack, nullptr);
        summary.best_dev_loss = -core.best.f1();
        summary.best_dev_step = core.best.step();
    }
    summary.status = RunStatus::completed;
    summary.steps_completed = cfg.max_steps;
    summary.final_smoothed_loss = core.window.smoothed();
    return summary;
}

// ---------------------------------------------------------------------------
// NER fine-tuning
// ---------------------------------------------------------------------------

struct NerTrainOptions {
    std::string checkpoint_dir = ".";
    MetricsSink* sink = nullptr;
    const TrainingState* resume = nullptr;
    std::optional<std::size_t> session_step_limit;
    bool allow_config_change = false;
};

inline F1Report evaluate_ner(const std::vector<AlignedExample>& examples, const std::vector<TaggedSentence>& raw,
                             const EncoderWeights& encoder, const AdapterStack& stack, const NerHead& head,
                             std::size_t batch_size) {
    if (examples.size() != raw.size()) throw ContractError("evaluate_ner: examples and sentences differ in count");
    std::vector<std::vector<SpanEntity>> gold, pred;
    const std::size_t n_labels = head.n_labels();
    for (std::size_t at = 0; at < examples.size(); at += batch_size) {
        const std::size_t end = std::min(examples.size(), at + batch_size);
        std::size_t max_len = 0;
        for (std::size_t i = at; i < end; ++i) max_len = std::max(max_len, examples[i].token_ids.size());
        const std::size_t batch = end - at;
        std::vector<std::int32_t> token_ids(batch * max_len, encoder.config.pad_id);
        std::vector<std::uint8_t> pad_mask(batch * max_len, 1);
        for (std::size_t b = 0; b < batch; ++b)
            for (std::size_t t = 0; t < examples[at + b].token_ids.size(); ++t) {
                token_ids[b * max_len + t] = examples[at + b].token_ids[t];
                pad_mask[b * max_len + t] = 0;
            }
        const auto hidden = encode(encoder, token_ids, batch, max_len, pad_mask, false, nullptr, &stack);
        const auto logits = ner_head(head, hidden);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& example = examples[at + b];
            std::vector<LabelId> pred_tags;
            std::vector<LabelId> gold_tags;
            for (std::size_t w = 0; w < example.word_token_pos.size(); ++w) {
                const std::int32_t pos = example.word_token_pos[w];
                if (pos < 0) continue;  // truncated away
                const float* row = logits.ptr() + (b * max_len + static_cast<std::size_t>(pos)) * n_labels;
                LabelId argmax = 0;
                for (std::size_t l = 1; l < n_labels; ++l)
                    if (row[l] > row[argmax]) argmax = static_cast<LabelId>(l);
                pred_tags.push_back(argmax);
                gold_tags.push_back(raw[at + b].tags[w]);
            }
            pred.push_back(decode_bio(pred_tags));
            gold.push_back(decode_bio(gold_tags));
        }
    }
    return span_f1(gold, pred);
}

// Baseline mode updates every encoder parameter plus the head; adapter mode
// updates only the trainable stack members plus the head. Keeps the weights
// from the best dev evaluation and reports dev/test F1 from them.
inline RunSummary train_ner(const std::vector<TaggedSentence>& train, const std::vector<TaggedSentence>& dev,
                            const std::vector<TaggedSentence>& test, const SubwordModel& tokenizer,
                            EncoderWeights& encoder, AdapterStack& stack, NerHead& head, const TrainConfig& cfg,
                            const NerTrainOptions& options) {
    cfg.validate();
    if (cfg.mode != TrainMode::ner_baseline_full && cfg.mode != TrainMode::ner_adapter)
        throw ContractError("train_ner: config mode must be ner_baseline_full or ner_adapter");
    if (train.empty()) throw DataError("train_ner: empty train split");
    if (tokenizer.vocab_size() != encoder.config.vocab_size)
        throw ConfigError("train_ner: tokenizer vocab does not match encoder vocab");
    stack.check_compatible(encoder.config);
    if (cfg.mode == TrainMode::ner_adapter) {
        bool any_trainable = false;
        for (const auto& e : stack.entries) any_trainable |= e.trainable;
        if (!any_trainable) throw ContractError("train_ner: adapter mode needs a trainable adapter in the stack");
    }

    const TuningMode tuning =
        cfg.mode == TrainMode::ner_baseline_full ? TuningMode::baseline_full : TuningMode::adapter_only;
    std::vector<ParamRef<float>> head_params{{"head.weight", &head.weight}, {"head.bias", &head.bias}};
    detail::LoopCore core(cfg, encoder, stack, &head, tuning, std::move(head_params), options.resume,
                          options.allow_config_change);
    core.session_limit = options.session_step_limit;

    const auto align_split = [&](const std::vector<TaggedSentence>& sentences) {
        std::vector<AlignedExample> out;
        out.reserve(sentences.size());
        std::size_t dropped = 0;
        for (const auto& s : sentences) {
            out.push_back(align_labels(tokenizer, s, encoder.config.max_positions));
            dropped += out.back().words_dropped;
        }
        if (dropped > 0)
            std::cerr << "train_ner: " << dropped << " words truncated away and dropped from evaluation\n";
        return out;
    };
    const auto train_examples = align_split(train);
    const auto dev_examples = align_split(dev);
    const auto test_examples = align_split(test);

    std::vector<std::size_t> lengths;
    for (const auto& e : train_examples) lengths.push_back(e.token_ids.size());
    const BatchPlan plan = BatchPlan::build(lengths, cfg.batch_size);

    const std::string best_path = options.checkpoint_dir + "/best.ckpt";
    RunSummary summary;
    summary.last_checkpoint = core.checkpoint_path(options.checkpoint_dir);

    const auto run_dev_eval = [&](std::size_t step) {
        const double f1 = evaluate_ner(dev_examples, dev, encoder, stack, head, cfg.batch_size).micro.f1();
        if (options.sink) options.sink->log(step, "dev", "micro_f1", f1);
        if (core.best.update(f1, step)) {
            std::filesystem::create_directories(options.checkpoint_dir);
            save_checkpoint(core.snapshot(step), best_path);
        }
    };

    std::size_t step = core.start_step;
    for (; step <= cfg.max_steps; ++step) {
        if (core.out_of_budget() || core.session_exhausted(step)) {
            core.write_checkpoint(options.checkpoint_dir, step - 1);
            summary.status = RunStatus::budget_stopped;
            summary.steps_completed = step - 1;
            summary.final_smoothed_loss = core.window.smoothed();
            summary.best_dev_f1 = core.best.has() ? core.best.f1() : 0.0;
            summary.best_dev_step = core.best.has() ? core.best.step() : 0;
            return summary;
        }

        const auto& batch_indices = plan.batch_for_step(cfg.seed, step);
        Rng dropout_rng = Rng::stream(cfg.seed, "dropout", step);

        std::size_t max_len = 0;
        for (const std::size_t idx : batch_indices) max_len = std::max(max_len, train_examples[idx].token_ids.size());
        const std::size_t batch = batch_indices.size();
        std::vector<std::int32_t> token_ids(batch * max_len, encoder.config.pad_id);
        std::vector<std::int32_t> targets(batch * max_len, 0);
        std::vector<std::uint8_t> loss_mask(batch * max_len, 0);
        std::vector<std::uint8_t> pad_mask(batch * max_len, 1);
        for (std::size_t b = 0; b < batch; ++b) {
            const auto& example = train_examples[batch_indices[b]];
            for (std::size_t t = 0; t < example.token_ids.size(); ++t) {
                token_ids[b * max_len + t] = example.token_ids[t];
                targets[b * max_len + t] = example.label_ids[t];
                loss_mask[b * max_len + t] = example.loss_mask[t];
                pad_mask[b * max_len + t] = 0;
            }
        }

        Tape<float> tape;
        auto hidden = encode(encoder, token_ids, batch, max_len, pad_mask, true, &dropout_rng, &stack, &tape);
        auto logits = ner_head(head, hidden, &tape);
        auto loss = cross_entropy_masked(logits, targets, loss_mask, &tape);
        const float loss_value = detail::scalar_loss_value(loss);

        auto grads = tape.backward(loss);
        const double grad_norm = clip_gradients(core.trainable, grads, cfg.grad_clip_norm);
        const float lr = lr_schedule(step, cfg);
        core.optimizer.step(step, grads, lr);

        core.window.push(loss_value);
        if (step == 10) summary.smoothed_loss_at_step10 = core.window.smoothed();
        if (options.sink && (step % cfg.log_interval_steps == 0 || step == cfg.max_steps)) {
            options.sink->log(step, "train", "ner_loss", loss_value);
            options.sink->log(step, "train", "lr", lr);
            options.sink->log(step, "train", "grad_norm", grad_norm);
        }
        if (step % cfg.eval_interval_steps == 0 || step == cfg.max_steps) run_dev_eval(step);
        if (step % cfg.checkpoint_interval_steps == 0) core.write_checkpoint(options.checkpoint_dir, step);
    }

    core.write_checkpoint(options.checkpoint_dir, cfg.max_steps);

    // restore the best-dev weights and score both splits with them
    if (core.best.has()) apply_state_values(load_checkpoint(best_path), encoder, stack, &head);

    summary.status = RunStatus::completed;
    summary.steps_completed = cfg.max_steps;
    summary.final_smoothed_loss = core.window.smoothed();
    summary.best_dev_f1 = core.best.has() ? core.best.f1() : 0.0;
    summary.best_dev_step = core.best.has() ? core.best.step() : 0;
    summary.dev_f1 = evaluate_ner(dev_examples, dev, encoder, stack, head, cfg.batch_size).micro.f1();
    summary.test_f1 = evaluate_ner(test_examples, test, encoder, stack, head, cfg.batch_size).micro.f1();
    if (options.sink) {
        options.sink->log(summary.best_dev_step, "dev", "micro_f1_best", summary.dev_f1);
        options.sink->log(summary.best_dev_step, "test", "micro_f1_best", summary.test_f1);
    }
    return summary;
}

}  // namespace peft
