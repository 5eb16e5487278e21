#pragma once

#include <cmath>
#include <limits>
#include <thread>
#include <vector>

#include "ctpseg/losses.hpp"
#include "ctpseg/network.hpp"
#include "ctpseg/optim.hpp"
#include "ctpseg/study.hpp"

namespace ctpseg {

template <typename T>
struct SliceSample {
    std::vector<Tensor<T>> inputs;  // per-architecture input list
    Tensor<std::uint8_t> target;    // (X, Y) labels, 255 outside the brain
    Tensor<T> weight_map;           // (X, Y, C); empty means unweighted
    double multiplier = 1.0;        // per-sample loss penalty
};

// One sample per brain slice: the 3-slice window inputs plus the centre
// slice's target labels. `class_weights`, when given, fills a per-pixel
// per-class weight map (used by the weighted cross-entropy).
template <typename T>
std::vector<SliceSample<T>> make_slice_samples(const CtpStudy<T>& study,
                                               const Tensor<std::uint8_t>& mask, Architecture arch,
                                               const std::array<double, kNumClasses>* class_weights,
                                               double multiplier) {
    if (mask.rank() != 3 || mask.dim(0) != study.raw.dim(0) || mask.dim(1) != study.raw.dim(1) ||
        mask.dim(2) != study.raw.dim(2))
        throw ShapeError("mask extents do not match the study");
    std::vector<SliceSample<T>> out;
    for (std::int64_t z = 0; z < study.raw.dim(2); ++z) {
        SliceSample<T> s;
        s.inputs = make_window_inputs(study.raw, z, arch);
        s.target = take(mask, 2, z);
        if (class_weights) {
            s.weight_map = Tensor<T>({mask.dim(0), mask.dim(1), kNumClasses},
                                     {Axis::Width, Axis::Height, Axis::Channel});
            for (std::int64_t p = 0; p < mask.dim(0) * mask.dim(1); ++p)
                for (int c = 0; c < kNumClasses; ++c)
                    s.weight_map[p * kNumClasses + c] = static_cast<T>((*class_weights)[static_cast<std::size_t>(c)]);
        }
        s.multiplier = multiplier;
        out.push_back(std::move(s));
    }
    return out;
}

// Inverse class frequency over evaluable voxels of the given masks.
inline std::array<double, kNumClasses> inverse_class_frequency(
    const std::vector<const Tensor<std::uint8_t>*>& masks) {
    std::array<std::int64_t, kNumClasses> counts{};
    std::int64_t total = 0;
    for (const auto* m : masks)
        for (std::int64_t i = 0; i < m->size(); ++i) {
            const std::uint8_t v = (*m)[i];
            if (v == kLabelOutsideBrain) continue;
            ++counts[v];
            ++total;
        }
    std::array<double, kNumClasses> w{};
    for (int c = 0; c < kNumClasses; ++c)
        w[static_cast<std::size_t>(c)] =
            static_cast<double>(total) /
            (static_cast<double>(kNumClasses) *
             static_cast<double>(std::max<std::int64_t>(1, counts[static_cast<std::size_t>(c)])));
    return w;
}

struct TrainHistoryRow {
    int epoch = 0;  // 1-based
    double lr = 0.0;
    double train_loss = 0.0;
    double val_loss = 0.0;
    bool stopped = false;
};

struct TrainOutcome {
    std::vector<TrainHistoryRow> history;
    int best_epoch = -1;  // 1-based epoch holding the minimum validation loss
    double best_val = std::numeric_limits<double>::infinity();
};

// Patience bookkeeping: an epoch whose validation loss is not below
// best - tolerance counts toward the patience budget.
class EarlyStopper {
public:
    EarlyStopper(int patience, double tolerance) : patience_(patience), tolerance_(tolerance) {}

    // Returns true when training should stop after this epoch.
    bool update(int epoch_1based, double val_loss) {
        if (val_loss < best_ - tolerance_) {
            best_ = val_loss;
            best_epoch_ = epoch_1based;
            streak_ = 0;
            return false;
        }
        ++streak_;
        return streak_ >= patience_;
    }

    double best() const { return best_; }
    int best_epoch() const { return best_epoch_; }
    bool improved_at(int epoch_1based) const { return best_epoch_ == epoch_1based; }

private:
    int patience_;
    double tolerance_;
    double best_ = std::numeric_limits<double>::infinity();
    int best_epoch_ = -1;
    int streak_ = 0;
};

namespace traindetail {

template <typename T>
std::uint64_t sample_stream(std::uint64_t seed, int epoch, std::int64_t batch, std::int64_t sample) {
    return Rng(seed)
        .fork(static_cast<std::uint64_t>(epoch) * 100003ULL + static_cast<std::uint64_t>(batch),
              static_cast<std::uint64_t>(sample))
        .next_u64();
}

template <typename T>
double evaluate_mean_loss(const Network<T>& net, const std::vector<SliceSample<T>>& samples,
                          LossKind kind, const LossOptions& base_opts) {
    double total = 0.0;
    for (const auto& s : samples) {
        RunState<T> rs;
        const Tensor<T>& probs = net.forward(s.inputs, rs);
        LossOptions opts = base_opts;
        opts.sample_multiplier = s.multiplier;
        total += loss_value(kind, probs, s.target,
                            s.weight_map.size() ? &s.weight_map : nullptr, opts);
    }
    return total / static_cast<double>(samples.size());
}

}  // namespace traindetail

// Mini-batch training with the step-decay schedule, early stopping on the
// validation loss, and best-epoch weight restoration. Per-sample gradients
// inside a batch may run on worker threads; the reduction order is fixed by
// sample index, so results are bitwise independent of the thread count in
// 64-bit mode.
template <typename T>
TrainOutcome train_network(Network<T>& net, const std::vector<SliceSample<T>>& train_set,
                           const std::vector<SliceSample<T>>& val_set, const TrainConfig& cfg,
                           LossKind kind, const LossOptions& base_opts) {
    cfg.validate();
    if (train_set.empty() || val_set.empty())
        throw DataError("training requires nonempty train and validation sets");

    ParamStore<T> store(net.params());
    EarlyStopper stopper(cfg.early_stop_patience, cfg.early_stop_tolerance);
    TrainOutcome outcome;
    std::vector<Tensor<T>> best_params = store.snapshot();

    std::vector<std::size_t> order(train_set.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    Rng shuffle_rng = Rng(cfg.seed).fork(0xEE, 1);

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        const double lr = lr_at_epoch(cfg, epoch);
        shuffle_rng.shuffle(order);

        double train_loss_sum = 0.0;
        std::int64_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            const std::size_t n = end - start;

            std::vector<std::vector<Tensor<T>>> grads(n);
            std::vector<double> losses(n, 0.0);
            auto run_sample = [&](std::size_t k) {
                const SliceSample<T>& s = train_set[order[start + k]];
                RunState<T> rs;
                rs.training = true;
                rs.dropout_seed = traindetail::sample_stream<T>(cfg.seed, epoch, batch_index,
                                                                static_cast<std::int64_t>(k));
                const Tensor<T>& probs = net.forward(s.inputs, rs);
                LossOptions opts = base_opts;
                opts.sample_multiplier = s.multiplier;
                auto res = loss_with_grad(kind, probs, s.target,
                                          s.weight_map.size() ? &s.weight_map : nullptr, opts);
                losses[k] = res.value;
                const T inv = static_cast<T>(1.0 / static_cast<double>(n));
                for (std::int64_t i = 0; i < res.grad.size(); ++i) res.grad[i] *= inv;
                net.backward(res.grad, rs, grads[k]);
            };
            if (cfg.threads > 1 && n > 1) {
                std::vector<std::thread> pool;
                for (std::size_t k = 0; k < n; ++k) pool.emplace_back(run_sample, k);
                for (auto& t : pool) t.join();
            } else {
                for (std::size_t k = 0; k < n; ++k) run_sample(k);
            }
            // deterministic reduction in sample order
            for (std::size_t k = 1; k < n; ++k)
                for (std::size_t p = 0; p < grads[0].size(); ++p)
                    for (std::int64_t i = 0; i < grads[0][p].size(); ++i)
                        grads[0][p][i] += grads[k][p][i];
            double batch_loss = 0.0;
            for (std::size_t k = 0; k < n; ++k) batch_loss += losses[k];
            if (!std::isfinite(batch_loss))
                throw DataError("non-finite training loss at epoch " + std::to_string(epoch + 1) +
                                ", batch " + std::to_string(batch_index) + ": value " +
                                std::to_string(batch_loss));
            train_loss_sum += batch_loss;
            store.adam_step(grads[0], cfg, lr);
            ++batch_index;
        }

        const double train_loss = train_loss_sum / static_cast<double>(train_set.size());
        const double val_loss = traindetail::evaluate_mean_loss(net, val_set, kind, base_opts);
        if (!std::isfinite(val_loss))
            throw DataError("non-finite validation loss at epoch " + std::to_string(epoch + 1));

        const bool stop = stopper.update(epoch + 1, val_loss);
        if (stopper.improved_at(epoch + 1)) best_params = store.snapshot();
        outcome.history.push_back({epoch + 1, lr, train_loss, val_loss, stop});
        if (stop) break;
    }

    store.restore(best_params);
    outcome.best_epoch = stopper.best_epoch();
    outcome.best_val = stopper.best();
    return outcome;
}

}  // namespace ctpseg
