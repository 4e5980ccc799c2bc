#pragma once

#include <cmath>
#include <string>
#include <vector>

#include "peft/config.hpp"
#include "peft/encoder.hpp"
#include "peft/error.hpp"
#include "peft/tensor.hpp"

// AdamW with decoupled weight decay and the linear warmup / linear decay
// schedule. Decay is skipped for biases and layer-norm parameters.

namespace peft {

// 0 at step 0, linear ramp to lr at warmup_steps, linear decay to 0 at
// max_steps.
inline float lr_schedule(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.max_steps)
        throw ContractError("lr_schedule: step " + std::to_string(step) + " beyond max_steps " +
                            std::to_string(cfg.max_steps));
    const float lr = cfg.resolved_lr();
    if (step == 0) return 0.0f;
    if (step <= cfg.warmup_steps)
        return lr * static_cast<float>(step) / static_cast<float>(cfg.warmup_steps);
    if (cfg.max_steps == cfg.warmup_steps) return lr;
    return lr * static_cast<float>(cfg.max_steps - step) / static_cast<float>(cfg.max_steps - cfg.warmup_steps);
}

// Weight decay applies to projection and embedding matrices only.
inline bool weight_decay_applies(const std::string& name) {
    if (name.size() > 5 && name.compare(name.size() - 5, 5, ".bias") == 0) return false;
    if (name.find(".ln.") != std::string::npos) return false;
    if (name == "mlm_head.output_bias") return false;
    return true;
}

class AdamW {
public:
    struct Slot {
        ParamRef<float> param;
        bool decay;
        std::vector<float> m;
        std::vector<float> v;
    };

    AdamW(std::vector<ParamRef<float>> trainable, TrainConfig config) : config_(std::move(config)) {
        for (auto& p : trainable) {
            Slot slot;
            slot.param = p;
            slot.decay = weight_decay_applies(p.name) && config_.weight_decay > 0.0f;
            slot.m.assign(p.tensor->numel(), 0.0f);
            slot.v.assign(p.tensor->numel(), 0.0f);
            slots_.push_back(std::move(slot));
        }
    }

    std::vector<Slot>& slots() { return slots_; }
    const std::vector<Slot>& slots() const { return slots_; }

    // Bias-corrected AdamW update. `step` is 1-based and must match the
    // number of updates applied so far plus one (checkpoints preserve it).
    void step(std::size_t step, const GradientMap<float>& grads, float lr) {
        if (step == 0) throw ContractError("AdamW::step: step is 1-based");
        const float b1 = config_.adam_beta1, b2 = config_.adam_beta2;
        const float bc1 = 1.0f - std::pow(b1, static_cast<float>(step));
        const float bc2 = 1.0f - std::pow(b2, static_cast<float>(step));
        for (auto& slot : slots_) {
            Tensor<float>& theta = *slot.param.tensor;
            const std::vector<float>* g = grads.find(theta.id);
            const std::size_t n = theta.numel();
            for (std::size_t i = 0; i < n; ++i) {
                const float grad = g ? (*g)[i] : 0.0f;
                if (!std::isfinite(grad))
                    throw NumericError("AdamW: non-finite gradient for parameter \"" + slot.param.name +
                                       "\" at element " + std::to_string(i));
                slot.m[i] = b1 * slot.m[i] + (1.0f - b1) * grad;
                slot.v[i] = b2 * slot.v[i] + (1.0f - b2) * grad * grad;
                const float mhat = slot.m[i] / bc1;
                const float vhat = slot.v[i] / bc2;
                float update = mhat / (std::sqrt(vhat) + config_.adam_eps);
                if (slot.decay) update += config_.weight_decay * theta[i];
                theta[i] -= lr * update;
            }
        }
    }

private:
    TrainConfig config_;
    std::vector<Slot> slots_;
};

// Global L2 norm over the listed parameters' gradients; the accumulator is a
// single double scalar so the reduction order stays fixed and deterministic.
inline double global_grad_norm(const std::vector<ParamRef<float>>& params, const GradientMap<float>& grads) {
    double total = 0.0;
    for (const auto& p : params) {
        const std::vector<float>* g = grads.find(p.tensor->id);
        if (!g) continue;
        for (const float v : *g) total += static_cast<double>(v) * static_cast<double>(v);
    }
    return std::sqrt(total);
}

// Scales gradients in place so their global norm is at most max_norm.
// Returns the pre-clip norm.
inline double clip_gradients(const std::vector<ParamRef<float>>& params, GradientMap<float>& grads, float max_norm) {
    const double norm = global_grad_norm(params, grads);
    if (max_norm > 0.0f && norm > max_norm) {
        const float factor = static_cast<float>(max_norm / norm);
        for (const auto& p : params) {
            auto* g = grads.find_mutable(p.tensor->id);
            if (!g) continue;
            for (auto& v : *g) v *= factor;
        }
    }
    return norm;
}

}  // namespace peft
