#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctpseg/graph.hpp"
#include "ctpseg/meta.hpp"

namespace ctpseg {

enum class Architecture { Mjnet3dTime, Mjnet4d };

inline const char* architecture_name(Architecture a) {
    return a == Architecture::Mjnet3dTime ? "mjnet_3dtime" : "mjnet_4d";
}

inline Architecture architecture_from_name(const std::string& s) {
    if (s == "mjnet_3dtime") return Architecture::Mjnet3dTime;
    if (s == "mjnet_4d") return Architecture::Mjnet4d;
    throw ConfigError("unknown architecture '" + s + "' (expected mjnet_3dtime|mjnet_4d)");
}

// Architecture hyperparameters. The figures pin the pool schedule semantics,
// attention/dropout placement and the head; channel widths and the number
// of 2D levels are configuration.
struct NetworkConfig {
    std::int64_t input_x = 64;
    std::int64_t input_y = 64;
    std::int64_t input_z = 3;
    std::int64_t input_t = 30;
    std::vector<std::int64_t> time_pool_schedule = {2, 3, 5};
    std::vector<std::int64_t> temporal_widths = {16, 32, 64};  // channels per temporal block
    std::vector<std::int64_t> spatial_widths = {32, 64};       // 2D levels, last is bottleneck
    int num_classes = kNumClasses;
    double dropout_rate = 0.5;
    double leaky_alpha = 1.0 / 3.0;
    Architecture architecture = Architecture::Mjnet4d;
    int attention_kernel = 3;
    std::uint64_t init_seed = 1;

    void validate() const {
        std::int64_t prod = 1;
        for (auto p : time_pool_schedule) {
            if (p < 1) throw ConfigError("pool sizes must be >= 1");
            prod *= p;
        }
        if (prod != input_t)
            throw ConfigError("time pool schedule product " + std::to_string(prod) +
                              " must collapse the time extent " + std::to_string(input_t));
        if (input_z != 3) throw ConfigError("depth extent must be 3 (centre slice plus neighbours)");
        if (num_classes != kNumClasses)
            throw ConfigError("class count is fixed at " + std::to_string(kNumClasses));
        if (temporal_widths.size() != time_pool_schedule.size())
            throw ConfigError("temporal widths must match the pool schedule length");
        if (spatial_widths.empty()) throw ConfigError("at least one 2D level is required");
        if (dropout_rate < 0.0 || dropout_rate >= 1.0)
            throw ConfigError("dropout rate must lie in [0, 1)");
        std::int64_t down = 1;
        for (std::size_t l = 0; l + 1 < spatial_widths.size(); ++l) down *= 2;
        if (input_x % down != 0 || input_y % down != 0)
            throw ConfigError("input extents must be divisible by the 2D pooling factor " +
                              std::to_string(down));
    }
};

// Additive attention gate: out = sigmoid(psi(leaky_relu(Wg g + Wx x))) * x.
// Returns the id of the gated-skip node.
template <typename T>
int add_attention_gate(Network<T>& net, const std::string& prefix, int gating, int skip,
                       std::int64_t gating_ch, std::int64_t skip_ch, std::int64_t inter_ch,
                       int kernel, T alpha, Rng& rng) {
    const Shape kk = {kernel, kernel};
    const std::vector<char> same = {1, 1};
    int wg = net.add(std::make_unique<ConvNode<T>>(prefix + "/wg", gating, std::vector<int>{0, 1},
                                                   kk, same, gating_ch, inter_ch, rng));
    int wx = net.add(std::make_unique<ConvNode<T>>(prefix + "/wx", skip, std::vector<int>{0, 1},
                                                   kk, same, skip_ch, inter_ch, rng));
    int sum = net.add(std::make_unique<AddNode<T>>(prefix + "/add", wg, wx));
    int act = net.add(std::make_unique<LeakyReluNode<T>>(prefix + "/act", sum, alpha));
    int psi = net.add(std::make_unique<ConvNode<T>>(prefix + "/psi", act, std::vector<int>{0, 1},
                                                    Shape{1, 1}, same, inter_ch, 1, rng));
    int coeff = net.add(std::make_unique<SigmoidNode<T>>(prefix + "/sigmoid", psi));
    return net.add(std::make_unique<MulBroadcastNode<T>>(prefix + "/apply", coeff, skip));
}

namespace netdetail {

// Temporal encoder stack: conv (same) + leaky relu + time pool per block,
// then squeeze the collapsed time axis. `time_axis` is the input axis
// carrying time; input rank is fixed over the stack.
template <typename T>
int add_temporal_blocks(Network<T>& net, const std::string& prefix, int cur,
                        const NetworkConfig& cfg, int rank, int time_axis, std::int64_t cin,
                        Rng& rng, bool grouped) {
    std::int64_t ch = cin;
    for (std::size_t k = 0; k < cfg.time_pool_schedule.size(); ++k) {
        const std::string base = prefix + "/b" + std::to_string(k);
        const std::int64_t width = cfg.temporal_widths[k];
        if (grouped) {
            cur = net.add(std::make_unique<GroupedConvNode<T>>(base + "/grouped", cur,
                                                               Shape{3, 3, 3}, ch, width, rng));
        } else {
            cur = net.add(std::make_unique<ConvNode<T>>(base + "/conv", cur,
                                                        std::vector<int>{0, 1, time_axis},
                                                        Shape{3, 3, 3},
                                                        std::vector<char>{1, 1, 1}, ch, width, rng));
        }
        cur = net.add(std::make_unique<LeakyReluNode<T>>(base + "/act", cur,
                                                         static_cast<T>(cfg.leaky_alpha)));
        Shape pool(static_cast<std::size_t>(rank), 1);
        pool[static_cast<std::size_t>(time_axis)] = cfg.time_pool_schedule[k];
        cur = net.add(std::make_unique<MaxPoolNode<T>>(base + "/pool", cur, pool));
        ch = width;
    }
    return net.add(std::make_unique<SqueezeNode<T>>(prefix + "/out", cur, time_axis));
}

// 2D U-Net over (X, Y, C): pool/upsample by 2 per level, skip concats,
// optional attention gating of the skips.
template <typename T>
int add_unet2d(Network<T>& net, const std::string& prefix, int cur, std::int64_t cin,
               const NetworkConfig& cfg, bool attention, Rng& rng) {
    const T alpha = static_cast<T>(cfg.leaky_alpha);
    const int levels = static_cast<int>(cfg.spatial_widths.size());
    std::vector<int> skips;
    std::vector<std::int64_t> skip_ch;
    std::int64_t ch = cin;
    for (int l = 0; l + 1 < levels; ++l) {
        const std::string base = prefix + "/enc" + std::to_string(l);
        cur = net.add(std::make_unique<ConvNode<T>>(base + "/conv", cur, std::vector<int>{0, 1},
                                                    Shape{3, 3}, std::vector<char>{1, 1}, ch,
                                                    cfg.spatial_widths[static_cast<std::size_t>(l)],
                                                    rng));
        cur = net.add(std::make_unique<LeakyReluNode<T>>(base + "/act", cur, alpha));
        ch = cfg.spatial_widths[static_cast<std::size_t>(l)];
        skips.push_back(cur);
        skip_ch.push_back(ch);
        cur = net.add(std::make_unique<MaxPoolNode<T>>(base + "/pool", cur, Shape{2, 2, 1}));
    }
    {
        const std::string base = prefix + "/bottleneck";
        cur = net.add(std::make_unique<ConvNode<T>>(
            base + "/conv", cur, std::vector<int>{0, 1}, Shape{3, 3}, std::vector<char>{1, 1}, ch,
            cfg.spatial_widths[static_cast<std::size_t>(levels - 1)], rng));
        cur = net.add(std::make_unique<LeakyReluNode<T>>(base + "/act", cur, alpha));
        ch = cfg.spatial_widths[static_cast<std::size_t>(levels - 1)];
    }
    for (int l = levels - 2; l >= 0; --l) {
        const std::string base = prefix + "/dec" + std::to_string(l);
        cur = net.add(std::make_unique<Upsample2dNode<T>>(base + "/up", cur, 2));
        int skip = skips[static_cast<std::size_t>(l)];
        std::int64_t sch = skip_ch[static_cast<std::size_t>(l)];
        if (attention)
            skip = add_attention_gate(net, base + "/attn", cur, skip, ch, sch, sch,
                                      cfg.attention_kernel, alpha, rng);
        cur = net.add(std::make_unique<ConcatNode<T>>(base + "/concat",
                                                      std::vector<int>{cur, skip}, 2));
        cur = net.add(std::make_unique<ConvNode<T>>(base + "/conv", cur, std::vector<int>{0, 1},
                                                    Shape{3, 3}, std::vector<char>{1, 1}, ch + sch,
                                                    cfg.spatial_widths[static_cast<std::size_t>(l)],
                                                    rng));
        cur = net.add(std::make_unique<LeakyReluNode<T>>(base + "/act", cur, alpha));
        ch = cfg.spatial_widths[static_cast<std::size_t>(l)];
    }
    return cur;
}

}  // namespace netdetail

// Builds the layer graph for the configured architecture. The forward
// contract: inputs assembled by make_window_inputs, output a per-pixel
// class probability image (X, Y, num_classes).
template <typename T>
Network<T> build_network(const NetworkConfig& cfg) {
    cfg.validate();
    Network<T> net;
    Rng rng(cfg.init_seed);
    const T alpha = static_cast<T>(cfg.leaky_alpha);
    int cur;
    std::int64_t ch;

    if (cfg.architecture == Architecture::Mjnet4d) {
        // (X, Y, 3, T, 1) -> grouped blocks collapse T -> (X, Y, 3, C)
        int input = net.add_input("input");
        cur = netdetail::add_temporal_blocks(net, "enc", input, cfg, 5, 3, 1, rng, true);
        ch = cfg.temporal_widths.back();
        cur = net.add(std::make_unique<DropoutNode<T>>("enc/dropout", cur, cfg.dropout_rate));
        // depth reduction: same on X/Y, valid over Z (3 -> 1)
        cur = net.add(std::make_unique<ConvNode<T>>("depth/conv", cur, std::vector<int>{0, 1, 2},
                                                    Shape{3, 3, 3}, std::vector<char>{1, 1, 0}, ch,
                                                    ch, rng));
        cur = net.add(std::make_unique<LeakyReluNode<T>>("depth/act", cur, alpha));
        cur = net.add(std::make_unique<SqueezeNode<T>>("depth/out", cur, 2));
        cur = netdetail::add_unet2d(net, "unet", cur, ch, cfg, /*attention=*/false, rng);
        ch = cfg.spatial_widths.front();
        cur = net.add(std::make_unique<DropoutNode<T>>("head/dropout", cur, cfg.dropout_rate));
    } else {
        // three independent 2D+time encoders, fused on the channel axis
        std::vector<int> outs;
        for (int e = 0; e < 3; ++e) {
            int input = net.add_input("input" + std::to_string(e));
            outs.push_back(netdetail::add_temporal_blocks(net, "enc" + std::to_string(e), input,
                                                          cfg, 4, 2, 1, rng, false));
        }
        cur = net.add(std::make_unique<ConcatNode<T>>("fuse/concat", outs, 2));
        ch = 3 * cfg.temporal_widths.back();
        cur = netdetail::add_unet2d(net, "unet", cur, ch, cfg, /*attention=*/true, rng);
        ch = cfg.spatial_widths.front();
    }

    cur = net.add(std::make_unique<ConvNode<T>>("head/conv", cur, std::vector<int>{0, 1},
                                                Shape{1, 1}, std::vector<char>{1, 1}, ch,
                                                cfg.num_classes, rng));
    cur = net.add(std::make_unique<SoftmaxNode<T>>("head/softmax", cur));
    net.set_output(cur);
    return net;
}

// Assembles network inputs for the 3-slice window centred on `center`.
// A missing neighbour at the volume boundary is replaced by the centre
// volume itself.
template <typename T>
std::vector<Tensor<T>> make_window_inputs(const Tensor<T>& study, std::int64_t center,
                                          Architecture arch) {
    if (study.rank() != 4) throw ShapeError("study tensor must be (X, Y, Z, T)");
    const std::int64_t zmax = study.dim(2);
    if (center < 0 || center >= zmax) throw BoundsError("window centre out of range");
    const std::int64_t prev = center > 0 ? center - 1 : center;
    const std::int64_t next = center < zmax - 1 ? center + 1 : center;

    Tensor<T> vp = take(study, 2, prev);
    Tensor<T> vc = take(study, 2, center);
    Tensor<T> vn = take(study, 2, next);

    if (arch == Architecture::Mjnet4d) {
        Tensor<T> p = unsqueeze(vp, 2, Axis::Depth);
        Tensor<T> c = unsqueeze(vc, 2, Axis::Depth);
        Tensor<T> n = unsqueeze(vn, 2, Axis::Depth);
        Tensor<T> stacked = concat<T>({&p, &c, &n}, 2);  // (X, Y, 3, T)
        return {unsqueeze(stacked, 4, Axis::Channel)};
    }
    return {unsqueeze(vp, 3, Axis::Channel), unsqueeze(vc, 3, Axis::Channel),
            unsqueeze(vn, 3, Axis::Channel)};
}

template <typename T>
struct SlicePrediction {
    Tensor<T> probs;                // (X, Y, C)
    Tensor<std::uint8_t> classes;   // (X, Y) argmax
    Tensor<T> prob_variance;        // (X, Y, C), only when mc_samples > 1
};

template <typename T>
Tensor<std::uint8_t> argmax_classes(const Tensor<T>& probs) {
    const std::int64_t c = probs.dim(probs.rank() - 1);
    Shape d = probs.dims();
    d.pop_back();
    AxisRoles r = probs.roles();
    r.pop_back();
    Tensor<std::uint8_t> out(d, r);
    for (std::int64_t p = 0; p < out.size(); ++p) {
        const T* row = probs.data() + p * c;
        int best = 0;
        for (int k = 1; k < c; ++k)
            if (row[k] > row[best]) best = k;
        out[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

// Averages `mc_samples` stochastic forward passes; dropout stays active
// when mc_samples > 1. One pass with mc_samples == 1 is deterministic.
template <typename T>
SlicePrediction<T> predict_slice(const Network<T>& net, std::vector<Tensor<T>> inputs,
                                 int mc_samples, std::uint64_t seed = 0,
                                 std::uint64_t slice_index = 0) {
    if (mc_samples < 1) throw ConfigError("mc_samples must be >= 1");
    SlicePrediction<T> out;
    if (mc_samples == 1) {
        RunState<T> rs;
        out.probs = net.forward(std::move(inputs), rs);
        out.classes = argmax_classes(out.probs);
        return out;
    }
    Tensor<T> mean, m2;
    for (int s = 0; s < mc_samples; ++s) {
        RunState<T> rs;
        rs.mc_dropout = true;
        rs.dropout_seed = Rng(seed).fork(slice_index, static_cast<std::uint64_t>(s)).next_u64();
        const Tensor<T>& probs = net.forward(inputs, rs);
        if (s == 0) {
            mean = probs;
            m2 = Tensor<T>(probs.dims(), probs.roles());
            continue;
        }
        // Welford accumulation
        for (std::int64_t i = 0; i < probs.size(); ++i) {
            const T delta = probs[i] - mean[i];
            mean[i] += delta / static_cast<T>(s + 1);
            m2[i] += delta * (probs[i] - mean[i]);
        }
    }
    for (std::int64_t i = 0; i < m2.size(); ++i) m2[i] /= static_cast<T>(mc_samples);
    out.probs = std::move(mean);
    out.prob_variance = std::move(m2);
    out.classes = argmax_classes(out.probs);
    return out;
}

template <typename T>
struct VolumePrediction {
    Tensor<std::uint8_t> mask;  // (X, Y, Z) class labels
    Tensor<T> prob_variance;    // (X, Y, Z, C) when mc_samples > 1
};

// Slides the 3-slice window over depth and stacks the per-slice class maps.
template <typename T>
VolumePrediction<T> predict_volume(const Network<T>& net, const Tensor<T>& study,
                                   Architecture arch, int mc_samples = 1, std::uint64_t seed = 0) {
    if (study.rank() != 4) throw ShapeError("study tensor must be (X, Y, Z, T)");
    const std::int64_t zmax = study.dim(2);
    VolumePrediction<T> out;
    out.mask = Tensor<std::uint8_t>({study.dim(0), study.dim(1), zmax},
                                    {Axis::Width, Axis::Height, Axis::Depth});
    if (mc_samples > 1)
        out.prob_variance =
            Tensor<T>({study.dim(0), study.dim(1), zmax, kNumClasses},
                      {Axis::Width, Axis::Height, Axis::Depth, Axis::Channel});
    for (std::int64_t z = 0; z < zmax; ++z) {
        auto pred = predict_slice(net, make_window_inputs(study, z, arch), mc_samples, seed,
                                  static_cast<std::uint64_t>(z));
        for (std::int64_t x = 0; x < study.dim(0); ++x)
            for (std::int64_t y = 0; y < study.dim(1); ++y) {
                out.mask.at({x, y, z}) = pred.classes.at({x, y});
                if (mc_samples > 1)
                    for (int c = 0; c < kNumClasses; ++c)
                        out.prob_variance.at({x, y, z, c}) = pred.prob_variance.at({x, y, c});
            }
    }
    return out;
}

}  // namespace ctpseg
