#pragma once

#include <cmath>
#include <type_traits>
#include <string>

#include "ctpseg/meta.hpp"
#include "ctpseg/tensor.hpp"

namespace ctpseg {

// Per-pixel class probabilities over {healthy, penumbra, core} as an
// (X, Y, C) tensor. Evaluable pixels are the ones whose label is not
// kLabelOutsideBrain; everything else is excluded from losses and
// gradients.
//
// Labels are stored as class indices, which makes the one-hot invariant
// (exactly one class per evaluable pixel) structural.

enum class LossKind { FocalTversky, SoftDice, Dice, WeightedCce };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::FocalTversky: return "ftl";
        case LossKind::SoftDice: return "sdcl";
        case LossKind::Dice: return "dcl";
        case LossKind::WeightedCce: return "wcc";
    }
    return "?";
}

inline LossKind loss_from_name(const std::string& s) {
    if (s == "ftl") return LossKind::FocalTversky;
    if (s == "sdcl") return LossKind::SoftDice;
    if (s == "dcl") return LossKind::Dice;
    if (s == "wcc") return LossKind::WeightedCce;
    throw ConfigError("unknown loss '" + s + "' (expected ftl|sdcl|dcl|wcc)");
}

struct LossOptions {
    double tversky_alpha = 0.7;
    double tversky_beta = 0.3;
    double focal_gamma = 4.0 / 3.0;
    double sample_multiplier = 1.0;  // per-sample penalty, e.g. for Non-LVO cases
};

inline constexpr double kWccLogClamp = 1e-7;

namespace detail {

template <typename T>
void check_prob_label_pair(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels) {
    if (probs.rank() != labels.rank() + 1)
        throw ShapeError("probability image must carry one trailing channel axis");
    for (int k = 0; k < labels.rank(); ++k)
        if (probs.dim(k) != labels.dim(k))
            throw ShapeError("probability/label extent mismatch on axis " +
                             std::string(axis_name(labels.role(k))));
    if (probs.dim(probs.rank() - 1) != kNumClasses)
        throw ShapeError("expected " + std::to_string(kNumClasses) + " classes, got " +
                         std::to_string(probs.dim(probs.rank() - 1)));
}

}  // namespace detail

// Tversky index for one class:
//   TI_c = sum(x y) / (sum(x y) + alpha sum((1-x) y) + beta sum(x (1-y)))
// over evaluable pixels. Returns 1 when the class is empty on both sides
// (zero denominator), so lesion-free studies score perfectly.
template <typename T>
double tversky_index(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels, int cls,
                     double alpha, double beta) {
    detail::check_prob_label_pair(probs, labels);
    const std::int64_t n = labels.size();
    const T* p = probs.data();
    const std::uint8_t* y = labels.data();
    double xy = 0.0, xby = 0.0, xyb = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (y[i] == kLabelOutsideBrain) continue;
        const double x = static_cast<double>(p[i * kNumClasses + cls]);
        const double yy = (y[i] == cls) ? 1.0 : 0.0;
        xy += x * yy;
        xby += (1.0 - x) * yy;
        xyb += x * (1.0 - yy);
    }
    const double den = xy + alpha * xby + beta * xyb;
    if (den == 0.0) return 1.0;
    return xy / den;
}

// FTL(x, y) = sum_c (1 - TI_c)^(1/gamma), gamma >= 1.
template <typename T>
double focal_tversky_loss(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels, double alpha,
                          double beta, double gamma) {
    if (gamma < 1.0) throw ConfigError("focal exponent gamma must be >= 1");
    double loss = 0.0;
    for (int c = 0; c < kNumClasses; ++c)
        loss += std::pow(1.0 - tversky_index(probs, labels, c, alpha, beta), 1.0 / gamma);
    return loss;
}

// SDCL(x, y) = sum_c (1 - 2 sum(x y) / (sum(x^2) + sum(y^2))); a class empty
// on both sides contributes 0.
template <typename T>
double soft_dice_loss(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels) {
    detail::check_prob_label_pair(probs, labels);
    const std::int64_t n = labels.size();
    const T* p = probs.data();
    const std::uint8_t* y = labels.data();
    double loss = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        double xy = 0.0, xx = 0.0, yy = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            if (y[i] == kLabelOutsideBrain) continue;
            const double x = static_cast<double>(p[i * kNumClasses + c]);
            const double t = (y[i] == c) ? 1.0 : 0.0;
            xy += x * t;
            xx += x * x;
            yy += t;
        }
        const double den = xx + yy;  // sum(y^2) == sum(y) for one-hot y
        if (den > 0.0) loss += 1.0 - 2.0 * xy / den;
    }
    return loss;
}

// DCL(x, y) = sum_c (1 - 2 sum(x y) / (sum(x) + sum(y))).
template <typename T>
double dice_loss(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels) {
    detail::check_prob_label_pair(probs, labels);
    const std::int64_t n = labels.size();
    const T* p = probs.data();
    const std::uint8_t* y = labels.data();
    double loss = 0.0;
    for (int c = 0; c < kNumClasses; ++c) {
        double xy = 0.0, xs = 0.0, ys = 0.0;
        for (std::int64_t i = 0; i < n; ++i) {
            if (y[i] == kLabelOutsideBrain) continue;
            const double x = static_cast<double>(p[i * kNumClasses + c]);
            const double t = (y[i] == c) ? 1.0 : 0.0;
            xy += x * t;
            xs += x;
            ys += t;
        }
        const double den = xs + ys;
        if (den > 0.0) loss += 1.0 - 2.0 * xy / den;
    }
    return loss;
}

// Weighted categorical cross-entropy, negated so that it is nonnegative and
// minimized at the correct prediction:
//   WCC(x, y) = -sum_c sum_i (y_ic log x_ic) (w_ic y_ic)
// Probabilities are clamped to [1e-7, 1] before the log. `weights` is an
// optional per-pixel per-class map; missing means all-ones.
template <typename T>
double weighted_cce(const Tensor<T>& probs, const Tensor<std::uint8_t>& labels,
                    const Tensor<T>* weights = nullptr) {
    detail::check_prob_label_pair(probs, labels);
    if (weights && !weights->same_shape(probs))
        throw ShapeError("weight map shape must match the probability image");
    const std::int64_t n = labels.size();
    const T* p = probs.data();
    const std::uint8_t* y = labels.data();
    double loss = 0.0;
    for (std::int64_t i = 0; i < n; ++i) {
        if (y[i] == kLabelOutsideBrain) continue;
        const int c = y[i];
        const double x =
            std::clamp(static_cast<double>(p[i * kNumClasses + c]), kWccLogClamp, 1.0);
        const double w = weights ? static_cast<double>((*weights)[i * kNumClasses + c]) : 1.0;
        loss -= w * std::log(x);
    }
    return loss;
}

// Value plus gradient with respect to the probability image. Gradients are
// zero outside the evaluable mask.
template <typename T>
struct LossResult {
    double value = 0.0;
    Tensor<T> grad;
};

template <typename T>
LossResult<T> loss_with_grad(LossKind kind, const Tensor<T>& probs,
                             const Tensor<std::uint8_t>& labels,
                             const std::type_identity_t<Tensor<T>>* weights,
                             const LossOptions& opts) {
    detail::check_prob_label_pair(probs, labels);
    LossResult<T> res;
    res.grad = Tensor<T>(probs.dims(), probs.roles());
    const std::int64_t n = labels.size();
    const T* p = probs.data();
    const std::uint8_t* y = labels.data();
    T* g = res.grad.data();

    switch (kind) {
        case LossKind::FocalTversky: {
            if (opts.focal_gamma < 1.0) throw ConfigError("focal exponent gamma must be >= 1");
            const double a = opts.tversky_alpha, b = opts.tversky_beta;
            for (int c = 0; c < kNumClasses; ++c) {
                double xy = 0.0, xby = 0.0, xyb = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double x = static_cast<double>(p[i * kNumClasses + c]);
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    xy += x * t;
                    xby += (1.0 - x) * t;
                    xyb += x * (1.0 - t);
                }
                const double den = xy + a * xby + b * xyb;
                const double ti = (den == 0.0) ? 1.0 : xy / den;
                const double one_m = 1.0 - ti;
                res.value += std::pow(one_m, 1.0 / opts.focal_gamma);
                // d/dx of (1 - TI)^(1/g); pinned to 0 at the TI = 1 boundary
                // where the focal exponent has an infinite slope.
                if (den == 0.0 || one_m <= 1e-300) continue;
                const double outer =
                    -(1.0 / opts.focal_gamma) * std::pow(one_m, 1.0 / opts.focal_gamma - 1.0);
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    const double dnum = t;
                    const double dden = t - a * t + b * (1.0 - t);
                    const double dti = (dnum * den - xy * dden) / (den * den);
                    g[i * kNumClasses + c] += static_cast<T>(outer * dti);
                }
            }
            break;
        }
        case LossKind::SoftDice: {
            for (int c = 0; c < kNumClasses; ++c) {
                double xy = 0.0, xx = 0.0, yy = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double x = static_cast<double>(p[i * kNumClasses + c]);
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    xy += x * t;
                    xx += x * x;
                    yy += t;
                }
                const double den = xx + yy;
                if (den <= 0.0) continue;
                res.value += 1.0 - 2.0 * xy / den;
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double x = static_cast<double>(p[i * kNumClasses + c]);
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    g[i * kNumClasses + c] +=
                        static_cast<T>(-2.0 * (t * den - xy * 2.0 * x) / (den * den));
                }
            }
            break;
        }
        case LossKind::Dice: {
            for (int c = 0; c < kNumClasses; ++c) {
                double xy = 0.0, xs = 0.0, ys = 0.0;
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double x = static_cast<double>(p[i * kNumClasses + c]);
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    xy += x * t;
                    xs += x;
                    ys += t;
                }
                const double den = xs + ys;
                if (den <= 0.0) continue;
                res.value += 1.0 - 2.0 * xy / den;
                for (std::int64_t i = 0; i < n; ++i) {
                    if (y[i] == kLabelOutsideBrain) continue;
                    const double t = (y[i] == c) ? 1.0 : 0.0;
                    g[i * kNumClasses + c] +=
                        static_cast<T>(-2.0 * (t * den - xy) / (den * den));
                }
            }
            break;
        }
        case LossKind::WeightedCce: {
            if (weights && !weights->same_shape(probs))
                throw ShapeError("weight map shape must match the probability image");
            for (std::int64_t i = 0; i < n; ++i) {
                if (y[i] == kLabelOutsideBrain) continue;
                const int c = y[i];
                const double raw = static_cast<double>(p[i * kNumClasses + c]);
                const double x = std::clamp(raw, kWccLogClamp, 1.0);
                const double w =
                    weights ? static_cast<double>((*weights)[i * kNumClasses + c]) : 1.0;
                res.value -= w * std::log(x);
                if (raw >= kWccLogClamp && raw <= 1.0)
                    g[i * kNumClasses + c] = static_cast<T>(-w / x);
            }
            break;
        }
    }

    if (opts.sample_multiplier != 1.0) {
        res.value *= opts.sample_multiplier;
        for (std::int64_t i = 0; i < res.grad.size(); ++i)
            res.grad[i] = static_cast<T>(res.grad[i] * opts.sample_multiplier);
    }
    return res;
}

template <typename T>
double loss_value(LossKind kind, const Tensor<T>& probs, const Tensor<std::uint8_t>& labels,
                  const std::type_identity_t<Tensor<T>>* weights, const LossOptions& opts) {
    switch (kind) {
        case LossKind::FocalTversky:
            return opts.sample_multiplier * focal_tversky_loss(probs, labels, opts.tversky_alpha,
                                                               opts.tversky_beta, opts.focal_gamma);
        case LossKind::SoftDice:
            return opts.sample_multiplier * soft_dice_loss(probs, labels);
        case LossKind::Dice:
            return opts.sample_multiplier * dice_loss(probs, labels);
        case LossKind::WeightedCce:
            return opts.sample_multiplier * weighted_cce(probs, labels, weights);
    }
    return 0.0;
}

}  // namespace ctpseg
