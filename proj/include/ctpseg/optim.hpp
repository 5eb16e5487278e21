#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "ctpseg/graph.hpp"

namespace ctpseg {

struct TrainConfig {
    double learning_rate = 0.0003;
    double decay_factor = 0.95;
    int decay_every_epochs = 10;
    int batch_size = 2;
    int early_stop_patience = 25;
    double l1_weight = 1e-6;
    double l2_weight = 1e-5;
    double max_norm = 2.0;  // per-tensor L2 radius for kernels and biases
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    double non_lvo_penalty = 2.0;  // loss multiplier for Non-LVO samples
    int max_epochs = 200;
    double early_stop_tolerance = 1e-6;  // "no decrement" slack
    std::uint64_t seed = 0;
    int threads = 1;  // worker threads per batch (deterministic reduction)

    void validate() const {
        if (learning_rate < 0 || decay_factor < 0 || l1_weight < 0 || l2_weight < 0)
            throw ConfigError("rates and penalty weights must be nonnegative");
        if (early_stop_patience < 1) throw ConfigError("early-stop patience must be >= 1");
        if (batch_size < 1) throw ConfigError("batch size must be >= 1");
        if (decay_every_epochs < 1) throw ConfigError("decay interval must be >= 1");
        if (!(max_norm > 0)) throw ConfigError("max-norm radius must be positive");
    }
};

// learning_rate * decay^floor(epoch / decay_every), epoch 0-based.
inline double lr_at_epoch(const TrainConfig& cfg, int epoch) {
    if (epoch < 0) throw ConfigError("epoch must be >= 0");
    return cfg.learning_rate *
           std::pow(cfg.decay_factor, static_cast<double>(epoch / cfg.decay_every_epochs));
}

// Named parameters with Adam moment accumulators and a step counter.
template <typename T>
class ParamStore {
public:
    explicit ParamStore(std::vector<Param<T>*> params) : params_(std::move(params)) {
        for (Param<T>* p : params_) {
            m_.emplace_back(p->value.dims(), p->value.roles());
            v_.emplace_back(p->value.dims(), p->value.roles());
        }
    }

    std::int64_t step() const { return step_; }
    const std::vector<Param<T>*>& params() const { return params_; }

    std::vector<Tensor<T>> snapshot() const {
        std::vector<Tensor<T>> out;
        for (const Param<T>* p : params_) out.push_back(p->value);
        return out;
    }

    void restore(const std::vector<Tensor<T>>& values) {
        if (values.size() != params_.size()) throw ShapeError("snapshot size mismatch");
        for (std::size_t i = 0; i < params_.size(); ++i) params_[i]->value = values[i];
    }

    // One optimizer step: L1/L2 kernel penalties are added to the gradients
    // first, then the bias-corrected Adam update, then max-norm projection
    // of every parameter tensor.
    void adam_step(const std::vector<Tensor<T>>& grads, const TrainConfig& cfg, double lr) {
        if (grads.size() != params_.size()) throw ShapeError("gradient count mismatch");
        ++step_;
        const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
        const double bc1 = 1.0 - std::pow(b1, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(b2, static_cast<double>(step_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Param<T>& p = *params_[i];
            if (!p.value.same_shape(grads[i])) throw ShapeError("gradient shape mismatch for " + p.name);
            Tensor<T>& m = m_[i];
            Tensor<T>& v = v_[i];
            double norm2 = 0.0;
            for (std::int64_t k = 0; k < p.value.size(); ++k) {
                double g = static_cast<double>(grads[i][k]);
                const double w = static_cast<double>(p.value[k]);
                if (p.is_kernel) {
                    if (cfg.l1_weight > 0) g += cfg.l1_weight * (w > 0 ? 1.0 : (w < 0 ? -1.0 : 0.0));
                    if (cfg.l2_weight > 0) g += 2.0 * cfg.l2_weight * w;
                }
                const double mm = b1 * static_cast<double>(m[k]) + (1.0 - b1) * g;
                const double vv = b2 * static_cast<double>(v[k]) + (1.0 - b2) * g * g;
                m[k] = static_cast<T>(mm);
                v[k] = static_cast<T>(vv);
                const double update = lr * (mm / bc1) / (std::sqrt(vv / bc2) + cfg.adam_eps);
                const double nw = w - update;
                p.value[k] = static_cast<T>(nw);
                norm2 += nw * nw;
            }
            if (std::isfinite(cfg.max_norm)) {
                const double norm = std::sqrt(norm2);
                if (norm > cfg.max_norm) {
                    const T scale = static_cast<T>(cfg.max_norm / norm);
                    for (std::int64_t k = 0; k < p.value.size(); ++k) p.value[k] *= scale;
                }
            }
        }
    }

private:
    std::vector<Param<T>*> params_;
    std::vector<Tensor<T>> m_, v_;
    std::int64_t step_ = 0;
};

}  // namespace ctpseg
