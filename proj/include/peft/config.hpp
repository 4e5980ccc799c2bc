#pragma once

#include <cctype>
#include <cmath>
#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "peft/encoder_config.hpp"
#include "peft/error.hpp"
#include "peft/rng.hpp"

// Flat key=value configuration files, environment-variable overrides, and
// the run hyperparameters. Every run embeds its resolved snapshot in the run
// manifest, so an interrupted run can be moved and resumed elsewhere.

namespace peft {

// ---------------------------------------------------------------------------
// key=value parsing
// ---------------------------------------------------------------------------

inline std::map<std::string, std::string> parse_key_values(const std::string& text,
                                                           const std::string& origin = "<string>") {
    std::map<std::string, std::string> out;
    std::istringstream in(text);
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        std::size_t start = line.find_first_not_of(" \t");
        if (start == std::string::npos || line[start] == '#') continue;
        const std::size_t eq = line.find('=', start);
        if (eq == std::string::npos)
            throw FormatError("config " + origin + ": line " + std::to_string(line_no) + " has no '='");
        auto trim = [](std::string s) {
            const auto a = s.find_first_not_of(" \t");
            const auto b = s.find_last_not_of(" \t");
            return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
        };
        const std::string key = trim(line.substr(start, eq - start));
        const std::string value = trim(line.substr(eq + 1));
        if (key.empty())
            throw FormatError("config " + origin + ": line " + std::to_string(line_no) + " has an empty key");
        if (out.count(key))
            throw FormatError("config " + origin + ": duplicate key \"" + key + "\" on line " + std::to_string(line_no));
        out[key] = value;
    }
    return out;
}

inline std::map<std::string, std::string> load_key_values(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw ConfigError("config: cannot open \"" + path + "\"");
    std::string text((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return parse_key_values(text, path);
}

// PEFTLAB_<KEY> overrides config key <key> ('.' and '-' map to '_').
inline std::string env_var_for_key(const std::string& key) {
    std::string name = "PEFTLAB_";
    for (const char c : key) {
        if (c == '.' || c == '-')
            name.push_back('_');
        else
            name.push_back(static_cast<char>(std::toupper(static_cast<unsigned char>(c))));
    }
    return name;
}

inline void apply_env_overrides(std::map<std::string, std::string>& kv, const std::vector<std::string>& known_keys) {
    for (const auto& key : known_keys) {
        const char* value = std::getenv(env_var_for_key(key).c_str());
        if (value) kv[key] = value;
    }
}

namespace detail {

class KvReader {
public:
    KvReader(std::map<std::string, std::string> kv, std::string origin)
        : kv_(std::move(kv)), origin_(std::move(origin)) {}

    bool has(const std::string& key) const { return kv_.count(key) != 0; }

    std::string get_string(const std::string& key, const std::string& fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        return it == kv_.end() ? fallback : it->second;
    }

    double get_double(const std::string& key, double fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const double v = std::stod(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config " + origin_ + ": key \"" + key + "\" is not a number: \"" + it->second + "\"");
        }
    }

    std::int64_t get_int(const std::string& key, std::int64_t fallback) {
        used_.insert(key);
        const auto it = kv_.find(key);
        if (it == kv_.end()) return fallback;
        try {
            std::size_t pos = 0;
            const std::int64_t v = std::stoll(it->second, &pos);
            if (pos != it->second.size()) throw std::invalid_argument("trailing");
            return v;
        } catch (const std::exception&) {
            throw ConfigError("config " + origin_ + ": key \"" + key + "\" is not an integer: \"" + it->second + "\"");
        }
    }

    void reject_unknown() const {
        for (const auto& [key, value] : kv_)
            if (!used_.count(key))
                throw ConfigError("config " + origin_ + ": unknown key \"" + key + "\"");
    }

private:
    std::map<std::string, std::string> kv_;
    std::string origin_;
    std::set<std::string> used_;
};

}  // namespace detail

// ---------------------------------------------------------------------------
// Training configuration
// ---------------------------------------------------------------------------

enum class TrainMode { mlm_adapter, ner_baseline_full, ner_adapter };

inline std::string to_string(TrainMode m) {
    switch (m) {
        case TrainMode::mlm_adapter: return "mlm_adapter";
        case TrainMode::ner_baseline_full: return "ner_baseline_full";
        case TrainMode::ner_adapter: return "ner_adapter";
    }
    throw ContractError("unreachable train mode");
}

inline TrainMode train_mode_from_string(const std::string& s) {
    if (s == "mlm_adapter") return TrainMode::mlm_adapter;
    if (s == "ner_baseline_full") return TrainMode::ner_baseline_full;
    if (s == "ner_adapter") return TrainMode::ner_adapter;
    throw ConfigError("mode must be mlm_adapter, ner_baseline_full or ner_adapter, got \"" + s + "\"");
}

struct TrainConfig {
    TrainMode mode = TrainMode::mlm_adapter;
    float learning_rate = -1.0f;  // negative: resolved per mode below
    float adam_beta1 = 0.9f;
    float adam_beta2 = 0.999f;
    float adam_eps = 1e-8f;
    float weight_decay = 0.01f;
    std::size_t batch_size = 8;
    std::size_t max_steps = 500;
    std::size_t warmup_steps = 50;
    std::uint64_t seed = 42;
    double wall_clock_budget_seconds = -1.0;  // negative: no budget
    std::size_t checkpoint_interval_steps = 100;
    std::size_t log_interval_steps = 10;
    std::size_t eval_interval_steps = 100;
    float mask_prob = 0.15f;
    float mask_token_frac = 0.8f;
    float mask_random_frac = 0.1f;
    float mask_keep_frac = 0.1f;
    float grad_clip_norm = 1.0f;

    bool has_budget() const { return wall_clock_budget_seconds >= 0.0; }

    float resolved_lr() const {
        if (learning_rate >= 0.0f) return learning_rate;
        return mode == TrainMode::ner_baseline_full ? 5e-5f : 1e-4f;
    }

    void validate() const {
        if (warmup_steps > max_steps)
            throw ConfigError("train config: warmup_steps " + std::to_string(warmup_steps) + " exceeds max_steps " +
                              std::to_string(max_steps));
        if (max_steps == 0) throw ConfigError("train config: max_steps must be positive");
        if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
        const auto in01 = [](float p) { return p >= 0.0f && p <= 1.0f; };
        if (!in01(mask_prob) || !in01(mask_token_frac) || !in01(mask_random_frac) || !in01(mask_keep_frac))
            throw ConfigError("train config: mask probabilities must lie in [0,1]");
        const float split = mask_token_frac + mask_random_frac + mask_keep_frac;
        if (std::abs(split - 1.0f) > 1e-6f)
            throw ConfigError("train config: mask action split must sum to 1, got " + std::to_string(split));
        if (checkpoint_interval_steps == 0 || log_interval_steps == 0 || eval_interval_steps == 0)
            throw ConfigError("train config: intervals must be positive");
        if (adam_eps <= 0.0f) throw ConfigError("train config: adam_eps must be positive");
    }

    static std::vector<std::string> known_keys() {
        return {"mode",           "learning_rate", "adam_beta1",      "adam_beta2",
                "adam_eps",       "weight_decay",  "batch_size",      "max_steps",
                "warmup_steps",   "seed",          "budget_seconds",  "checkpoint_interval_steps",
                "log_interval_steps", "eval_interval_steps", "mask_prob", "mask_token_frac",
                "mask_random_frac", "mask_keep_frac", "grad_clip_norm"};
    }

    static TrainConfig from_key_values(std::map<std::string, std::string> kv, const std::string& origin,
                                       bool use_env = true) {
        if (use_env) apply_env_overrides(kv, known_keys());
        detail::KvReader r(std::move(kv), origin);
        TrainConfig c;
        if (r.has("mode")) c.mode = train_mode_from_string(r.get_string("mode", ""));
        else r.get_string("mode", "");
        c.learning_rate = static_cast<float>(r.get_double("learning_rate", -1.0));
        c.adam_beta1 = static_cast<float>(r.get_double("adam_beta1", 0.9));
        c.adam_beta2 = static_cast<float>(r.get_double("adam_beta2", 0.999));
        c.adam_eps = static_cast<float>(r.get_double("adam_eps", 1e-8));
        c.weight_decay = static_cast<float>(r.get_double("weight_decay", 0.01));
        c.batch_size = static_cast<std::size_t>(r.get_int("batch_size", 8));
        c.max_steps = static_cast<std::size_t>(r.get_int("max_steps", 500));
        c.warmup_steps = static_cast<std::size_t>(r.get_int("warmup_steps", 50));
        c.seed = static_cast<std::uint64_t>(r.get_int("seed", 42));
        c.wall_clock_budget_seconds = r.get_double("budget_seconds", -1.0);
        c.checkpoint_interval_steps = static_cast<std::size_t>(r.get_int("checkpoint_interval_steps", 100));
        c.log_interval_steps = static_cast<std::size_t>(r.get_int("log_interval_steps", 10));
        c.eval_interval_steps = static_cast<std::size_t>(r.get_int("eval_interval_steps", 100));
        c.mask_prob = static_cast<float>(r.get_double("mask_prob", 0.15));
        c.mask_token_frac = static_cast<float>(r.get_double("mask_token_frac", 0.8));
        c.mask_random_frac = static_cast<float>(r.get_double("mask_random_frac", 0.1));
        c.mask_keep_frac = static_cast<float>(r.get_double("mask_keep_frac", 0.1));
        c.grad_clip_norm = static_cast<float>(r.get_double("grad_clip_norm", 1.0));
        r.reject_unknown();
        c.validate();
        return c;
    }

    static TrainConfig from_file(const std::string& path, bool use_env = true) {
        return from_key_values(load_key_values(path), path, use_env);
    }

    std::string canonical_string() const {
        std::ostringstream out;
        out << "mode=" << to_string(mode) << ";lr=" << resolved_lr() << ";beta1=" << adam_beta1
            << ";beta2=" << adam_beta2 << ";eps=" << adam_eps << ";wd=" << weight_decay << ";batch=" << batch_size
            << ";max_steps=" << max_steps << ";warmup=" << warmup_steps << ";seed=" << seed
            << ";ckpt_interval=" << checkpoint_interval_steps << ";log_interval=" << log_interval_steps
            << ";eval_interval=" << eval_interval_steps << ";mask=" << mask_prob << "," << mask_token_frac << ","
            << mask_random_frac << "," << mask_keep_frac << ";clip=" << grad_clip_norm;
        return out.str();
    }

    // The wall-clock budget is session-scoped and deliberately left out of
    // the resume identity; everything else participates.
    std::uint64_t config_hash() const { return fnv1a64(canonical_string()); }

    // Resolved snapshot for run manifests.
    std::map<std::string, std::string> to_key_values() const {
        const auto fmt = [](double v) {
            char buf[64];
            std::snprintf(buf, sizeof(buf), "%.9g", v);
            return std::string(buf);
        };
        std::map<std::string, std::string> kv;
        kv["mode"] = peft::to_string(mode);
        kv["learning_rate"] = fmt(resolved_lr());
        kv["adam_beta1"] = fmt(adam_beta1);
        kv["adam_beta2"] = fmt(adam_beta2);
        kv["adam_eps"] = fmt(adam_eps);
        kv["weight_decay"] = fmt(weight_decay);
        kv["batch_size"] = std::to_string(batch_size);
        kv["max_steps"] = std::to_string(max_steps);
        kv["warmup_steps"] = std::to_string(warmup_steps);
        kv["seed"] = std::to_string(seed);
        kv["budget_seconds"] = fmt(wall_clock_budget_seconds);
        kv["checkpoint_interval_steps"] = std::to_string(checkpoint_interval_steps);
        kv["log_interval_steps"] = std::to_string(log_interval_steps);
        kv["eval_interval_steps"] = std::to_string(eval_interval_steps);
        kv["mask_prob"] = fmt(mask_prob);
        kv["mask_token_frac"] = fmt(mask_token_frac);
        kv["mask_random_frac"] = fmt(mask_random_frac);
        kv["mask_keep_frac"] = fmt(mask_keep_frac);
        kv["grad_clip_norm"] = fmt(grad_clip_norm);
        return kv;
    }
};

// Encoder configuration from a key=value file (vocab_size may be 0 meaning
// "take it from the tokenizer").
inline EncoderConfig encoder_config_from_key_values(std::map<std::string, std::string> kv, const std::string& origin,
                                                    bool use_env = true) {
    static const std::vector<std::string> keys{"vocab_size", "d_model",      "n_layers", "n_heads", "d_ff",
                                               "max_positions", "dropout_rate", "pad_id",  "cls_id",  "sep_id",
                                               "mask_id",    "unk_id"};
    if (use_env) apply_env_overrides(kv, keys);
    detail::KvReader r(std::move(kv), origin);
    EncoderConfig c;
    c.vocab_size = static_cast<std::size_t>(r.get_int("vocab_size", 0));
    c.d_model = static_cast<std::size_t>(r.get_int("d_model", 128));
    c.n_layers = static_cast<std::size_t>(r.get_int("n_layers", 4));
    c.n_heads = static_cast<std::size_t>(r.get_int("n_heads", 4));
    c.d_ff = static_cast<std::size_t>(r.get_int("d_ff", 512));
    c.max_positions = static_cast<std::size_t>(r.get_int("max_positions", 128));
    c.dropout_rate = static_cast<float>(r.get_double("dropout_rate", 0.1));
    c.pad_id = static_cast<std::int32_t>(r.get_int("pad_id", 0));
    c.cls_id = static_cast<std::int32_t>(r.get_int("cls_id", 1));
    c.sep_id = static_cast<std::int32_t>(r.get_int("sep_id", 2));
    c.mask_id = static_cast<std::int32_t>(r.get_int("mask_id", 3));
    c.unk_id = static_cast<std::int32_t>(r.get_int("unk_id", 4));
    r.reject_unknown();
    return c;  // validated once vocab_size is resolved
}

}  // namespace peft
