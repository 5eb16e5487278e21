// Acceptance suite: runs every release criterion at its stated tolerance
// and prints one PASS/FAIL line per criterion. Exits nonzero when any
// criterion fails.

#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>

#include <json.hpp>

#include "ctpseg/io.hpp"
#include "ctpseg/metrics.hpp"
#include "ctpseg/pipeline.hpp"
#include "ctpseg/preprocess.hpp"
#include "ctpseg/train.hpp"
#include "oracles.hpp"

using namespace ctpseg;
namespace fs = std::filesystem;

#ifndef CTPSEG_CLI_PATH
#define CTPSEG_CLI_PATH "ctpseg"
#endif

namespace {

int g_failures = 0;

void report(int criterion, const char* description, bool ok, const std::string& detail) {
    std::printf("[%s] criterion %2d: %s (%s)\n", ok ? "PASS" : "FAIL", criterion, description,
                detail.c_str());
    std::fflush(stdout);
    if (!ok) ++g_failures;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "ctpseg_acceptance" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CTPSEG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    return WEXITSTATUS(std::system(cmd.c_str()));
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

const AxisRoles kXYZT = {Axis::Width, Axis::Height, Axis::Depth, Axis::Time};
const AxisRoles kXYC = {Axis::Width, Axis::Height, Axis::Channel};

// ---------------------------------------------------------------- 1 & 2

void criterion_1() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1001);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        Shape kd, id;
        const std::int64_t in_max[4] = {6, 6, 4, 5};
        for (int j = 0; j < 4; ++j) {
            kd.push_back(1 + static_cast<std::int64_t>(rng.below(3)));
            id.push_back(kd.back() +
                         static_cast<std::int64_t>(rng.below(
                             static_cast<std::uint64_t>(in_max[j] - kd.back() + 1))));
        }
        auto in = oracle::random_tensor<double>(id, kXYZT, rng);
        auto ker = oracle::random_tensor<double>(kd, kXYZT, rng);
        auto direct = conv4d(in, KernelSpec<double>(ker), Conv4dMode::Direct);
        auto decomposed = conv4d(in, KernelSpec<double>(ker), Conv4dMode::Decomposed);
        worst = std::max(worst, oracle::max_abs_diff(direct, decomposed));
        // direct mode itself agrees with the independent quadruple-loop sum
        worst = std::max(worst, oracle::max_abs_diff(direct, oracle::conv4d_valid(in, ker)));
    }
    const double dt = seconds_since(t0);
    std::ostringstream detail;
    detail << "200 trials, max |diff| " << worst << ", " << dt << " s";
    report(1, "decomposed 4D convolution equals the direct quadruple sum",
           worst <= 1e-10 && dt < 10.0, detail.str());
}

void criterion_2() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1002);
    double worst = 0.0;
    for (int trial = 0; trial < 200; ++trial) {
        Shape kd, id;
        for (int j = 0; j < 3; ++j) {
            kd.push_back(1 + static_cast<std::int64_t>(rng.below(3)));
            id.push_back(kd.back() + static_cast<std::int64_t>(rng.below(5)));
            id.back() = std::min<std::int64_t>(id.back(), 7);
        }
        auto in = oracle::random_tensor<double>(id, {Axis::Width, Axis::Height, Axis::Depth}, rng);
        auto ker = oracle::random_tensor<double>(kd, {Axis::Width, Axis::Height, Axis::Depth}, rng);
        auto g3 = conv3d(in, KernelSpec<double>(ker));
        Tensor<double> acc(g3.dims(), g3.roles());
        for (std::int64_t k = 0; k < kd[2]; ++k) {
            auto sub = take(ker, 2, k);
            for (std::int64_t oz = 0; oz < g3.dim(2); ++oz) {
                auto slice = take(in, 2, oz + kd[2] - 1 - k);
                auto g2 = conv2d(slice, KernelSpec<double>(sub));
                for (std::int64_t x = 0; x < g3.dim(0); ++x)
                    for (std::int64_t y = 0; y < g3.dim(1); ++y) acc.at({x, y, oz}) += g2.at({x, y});
            }
        }
        worst = std::max(worst, oracle::max_abs_diff(acc, g3));
    }
    const double dt = seconds_since(t0);
    std::ostringstream detail;
    detail << "200 trials, max |diff| " << worst << ", " << dt << " s";
    report(2, "3D convolution equals the sum of 2D convolutions over depth",
           worst <= 1e-10 && dt < 10.0, detail.str());
}

// -------------------------------------------------------------------- 3

struct FdStats {
    int coords = 0;
    double worst_rel = 0.0;
    bool ok = true;
    std::string worst_label;
    std::string current_label;
};

double probe_loss(const Network<double>& net, const std::vector<Tensor<double>>& inputs,
                  const Tensor<double>& probe, bool training) {
    RunState<double> rs;
    rs.training = training;
    rs.dropout_seed = 99;
    const Tensor<double>& out = net.forward(inputs, rs);
    double loss = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) loss += out[i] * probe[i];
    return loss;
}

void fd_check_network(Network<double>& net, std::vector<Tensor<double>> inputs, Rng& rng,
                      FdStats& stats, bool training = false, const char* label = "") {
    stats.current_label = label;
    RunState<double> rs;
    rs.training = training;
    rs.dropout_seed = 99;
    const Tensor<double>& out = net.forward(inputs, rs);
    Tensor<double> probe(out.dims(), out.roles());
    for (std::int64_t i = 0; i < probe.size(); ++i) probe[i] = rng.uniform(-1, 1);
    std::vector<Tensor<double>> pgrads;
    net.backward(probe, rs, pgrads);

    const std::size_t n_tensors = net.params().size() + inputs.size();
    const int per_tensor = std::max<int>(4, static_cast<int>((20 + n_tensors - 1) / n_tensors));
    const double h = 1e-3;
    const double f0 = probe_loss(net, inputs, probe, training);
    // Central differences are only meaningful on smooth segments; a probe
    // whose one-sided slopes disagree crossed a kink (pool argmax switch,
    // leaky-relu corner) and is resampled. The smoothness test uses only
    // function evaluations, so it cannot mask a wrong analytic gradient.
    auto smooth = [&](double fp, double fm) {
        const double d1 = fp - f0, d2 = f0 - fm;
        return std::abs(d1 - d2) <= 0.02 * (std::abs(d1) + std::abs(d2)) + 1e-12;
    };
    auto compare = [&](double analytic, double fp, double fm) {
        const double fd = (fp - fm) / (2.0 * h);
        const double denom = std::max(std::abs(analytic), std::abs(fd));
        if (denom < 1e-6) {
            if (std::abs(analytic - fd) > 1e-8) stats.ok = false;
        } else {
            const double rel = std::abs(analytic - fd) / denom;
            if (rel > stats.worst_rel) {
                stats.worst_rel = rel;
                stats.worst_label = stats.current_label;
            }
            if (rel > 1e-5) stats.ok = false;
        }
        ++stats.coords;
    };
    const auto& params = net.params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& w = params[pi]->value;
        for (int c = 0; c < per_tensor; ++c) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                const std::int64_t idx =
                    static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w.size())));
                const double orig = w[idx];
                w[idx] = orig + h;
                const double fp = probe_loss(net, inputs, probe, training);
                w[idx] = orig - h;
                const double fm = probe_loss(net, inputs, probe, training);
                w[idx] = orig;
                if (!smooth(fp, fm)) continue;
                compare(pgrads[pi][idx], fp, fm);
                break;
            }
        }
    }
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        const Tensor<double>& g = rs.grads[static_cast<std::size_t>(net.input_ids()[ii])];
        for (int c = 0; c < per_tensor; ++c) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                const std::int64_t idx = static_cast<std::int64_t>(
                    rng.below(static_cast<std::uint64_t>(inputs[ii].size())));
                const double orig = inputs[ii][idx];
                inputs[ii][idx] = orig + h;
                const double fp = probe_loss(net, inputs, probe, training);
                inputs[ii][idx] = orig - h;
                const double fm = probe_loss(net, inputs, probe, training);
                inputs[ii][idx] = orig;
                if (!smooth(fp, fm)) continue;
                compare(g[idx], fp, fm);
                break;
            }
        }
    }
}

Tensor<double> rand_tensor(const Shape& d, const AxisRoles& r, std::uint64_t seed,
                           bool away_from_zero = false) {
    Rng rng(seed);
    Tensor<double> t(d, r);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        double u = rng.uniform(-1, 1);
        if (away_from_zero) u += u >= 0 ? 0.15 : -0.15;
        t[i] = u;
    }
    return t;
}

void criterion_3() {
    const auto t0 = std::chrono::steady_clock::now();
    Rng rng(1003);
    FdStats stats;
    const AxisRoles kXYTC = {Axis::Width, Axis::Height, Axis::Time, Axis::Channel};
    const AxisRoles kXYZC = {Axis::Width, Axis::Height, Axis::Depth, Axis::Channel};
    const AxisRoles kXYZTC = {Axis::Width, Axis::Height, Axis::Depth, Axis::Time, Axis::Channel};

    {  // conv2d (same) over (X, Y, C)
        Rng init(1);
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<ConvNode<double>>(
            "conv2d", in, std::vector<int>{0, 1}, Shape{3, 3}, std::vector<char>{1, 1}, 2, 3,
            init)));
        fd_check_network(net, {rand_tensor({5, 6, 2}, kXYC, 11)}, rng, stats, false, "conv2d");
    }
    {  // conv3d over (X, Y, T, C)
        Rng init(2);
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<ConvNode<double>>(
            "conv3d", in, std::vector<int>{0, 1, 2}, Shape{3, 3, 3}, std::vector<char>{1, 1, 1}, 2,
            2, init)));
        fd_check_network(net, {rand_tensor({4, 5, 6, 2}, kXYTC, 12)}, rng, stats, false, "conv3d");
    }
    {  // depth-reducing conv over (X, Y, Z, C), valid on Z
        Rng init(3);
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<ConvNode<double>>(
            "depth", in, std::vector<int>{0, 1, 2}, Shape{3, 3, 3}, std::vector<char>{1, 1, 0}, 2,
            2, init)));
        fd_check_network(net, {rand_tensor({4, 5, 3, 2}, kXYZC, 13)}, rng, stats, false, "depth");
    }
    {  // conv4d over (X, Y, Z, T, C)
        Rng init(4);
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<ConvNode<double>>(
            "conv4d", in, std::vector<int>{0, 1, 2, 3}, Shape{3, 3, 3, 3},
            std::vector<char>{1, 1, 1, 1}, 2, 2, init)));
        fd_check_network(net, {rand_tensor({4, 4, 3, 4, 2}, kXYZTC, 14)}, rng, stats, false, "conv4d");
    }
    {  // grouped spatio-temporal layer
        Rng init(5);
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<GroupedConvNode<double>>("grouped", in,
                                                                         Shape{3, 3, 3}, 2, 3,
                                                                         init)));
        fd_check_network(net, {rand_tensor({4, 4, 3, 5, 2}, kXYZTC, 15)}, rng, stats, false, "grouped");
    }
    {  // pools
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<MaxPoolNode<double>>("pool", in, Shape{2, 2, 1})));
        fd_check_network(net, {rand_tensor({4, 6, 2}, kXYC, 16)}, rng, stats, false, "pool2d");
        Network<double> net2;
        int in2 = net2.add_input("x");
        net2.set_output(net2.add(std::make_unique<MaxPoolNode<double>>("tpool", in2, Shape{1, 1, 3, 1})));
        fd_check_network(net2, {rand_tensor({3, 3, 6, 2}, kXYTC, 17)}, rng, stats, false, "poolT");
    }
    {  // upsample
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<Upsample2dNode<double>>("up", in, 2)));
        fd_check_network(net, {rand_tensor({3, 4, 2}, kXYC, 18)}, rng, stats, false, "upsample");
    }
    {  // activations
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<LeakyReluNode<double>>("lrelu", in, 1.0 / 3.0)));
        fd_check_network(net, {rand_tensor({4, 4, 3}, kXYC, 19, true)}, rng, stats, false, "lrelu");
        Network<double> net2;
        int in2 = net2.add_input("x");
        net2.set_output(net2.add(std::make_unique<SoftmaxNode<double>>("soft", in2)));
        fd_check_network(net2, {rand_tensor({4, 4, 3}, kXYC, 20)}, rng, stats, false, "softmax");
    }
    {  // attention gate
        Rng init(6);
        Network<double> net;
        int g = net.add_input("g");
        int x = net.add_input("x");
        net.set_output(add_attention_gate(net, "attn", g, x, 3, 2, 2, 3, 1.0 / 3.0, init));
        fd_check_network(net, {rand_tensor({4, 4, 3}, kXYC, 21), rand_tensor({4, 4, 2}, kXYC, 22)},
                         rng, stats, false, "attn");
    }
    {  // dropout under a fixed mask
        Network<double> net;
        int in = net.add_input("x");
        net.set_output(net.add(std::make_unique<DropoutNode<double>>("drop", in, 0.5)));
        fd_check_network(net, {rand_tensor({5, 5, 2}, kXYC, 23)}, rng, stats, true, "dropout");
    }

    // losses
    {
        // probabilities bounded away from 0 keep the finite-difference
        // truncation of log-based losses inside the 1e-5 budget at h = 1e-3
        Tensor<double> probs({5, 4, 3}, kXYC);
        Rng prng(24);
        for (std::int64_t i = 0; i < probs.size(); ++i) probs[i] = prng.uniform(0.3, 0.95);
        std::vector<std::uint8_t> lv(20);
        for (std::size_t i = 0; i < lv.size(); ++i)
            lv[i] = static_cast<std::uint8_t>(i % 5 == 4 ? kLabelOutsideBrain : i % 3);
        Tensor<std::uint8_t> labels({5, 4}, {Axis::Width, Axis::Height}, lv);
        Tensor<double> weights({5, 4, 3}, kXYC);
        for (std::int64_t i = 0; i < weights.size(); ++i) weights[i] = 0.5 + prng.uniform();
        LossOptions opts;
        for (LossKind kind : {LossKind::FocalTversky, LossKind::SoftDice, LossKind::Dice,
                              LossKind::WeightedCce}) {
            stats.current_label = std::string("loss:") + loss_name(kind);
            auto res = loss_with_grad(kind, probs, labels, &weights, opts);
            for (int c = 0; c < 24; ++c) {
                const std::int64_t idx =
                    static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(probs.size())));
                const double orig = probs[idx];
                const double h = 1e-3;
                probs[idx] = orig + h;
                const double fp = loss_value(kind, probs, labels, &weights, opts);
                probs[idx] = orig - h;
                const double fm = loss_value(kind, probs, labels, &weights, opts);
                probs[idx] = orig;
                const double fd = (fp - fm) / (2.0 * h);
                const double an = res.grad[idx];
                const double denom = std::max(std::abs(an), std::abs(fd));
                if (denom < 1e-6) {
                    if (std::abs(an - fd) > 1e-8) stats.ok = false;
                } else {
                    const double rel = std::abs(an - fd) / denom;
                    if (rel > stats.worst_rel) {
                        stats.worst_rel = rel;
                        stats.worst_label = stats.current_label;
                    }
                    if (rel > 1e-5) stats.ok = false;
                }
                ++stats.coords;
            }
        }
    }

    const double dt = seconds_since(t0);
    std::ostringstream detail;
    detail << stats.coords << " coordinates, worst rel err " << stats.worst_rel << " ["
           << stats.worst_label << "], " << dt << " s";
    report(3, "finite-difference gradient suite over every layer and loss",
           stats.ok && dt < 120.0, detail.str());
}

// -------------------------------------------------------------------- 4

void criterion_4() {
    Rng rng(1004);
    VolumeMeta meta;  // clinical spacing
    bool ok = true;
    double worst = 0.0;
    for (int trial = 0; trial < 100; ++trial) {
        const std::int64_t w = 24, h = 21;
        std::vector<std::pair<std::int64_t, std::int64_t>> pa, pb;
        const std::uint64_t na = 1 + rng.below(500), nb = 1 + rng.below(500);
        Tensor<std::uint8_t> a({w, h}, {Axis::Width, Axis::Height});
        Tensor<std::uint8_t> b(a.dims(), a.roles());
        for (std::uint64_t i = 0; i < na; ++i) {
            const std::int64_t x = static_cast<std::int64_t>(rng.below(w));
            const std::int64_t y = static_cast<std::int64_t>(rng.below(h));
            if (!a.at({x, y})) pa.emplace_back(x, y);
            a.at({x, y}) = 1;
        }
        for (std::uint64_t i = 0; i < nb; ++i) {
            const std::int64_t x = static_cast<std::int64_t>(rng.below(w));
            const std::int64_t y = static_cast<std::int64_t>(rng.below(h));
            if (!b.at({x, y})) pb.emplace_back(x, y);
            b.at({x, y}) = 1;
        }
        // brute-force references computed independently of the library path
        std::int64_t inter = 0;
        for (const auto& p : pa)
            for (const auto& q : pb)
                if (p == q) {
                    ++inter;
                    break;
                }
        const double dice_ref = pa.empty() && pb.empty()
                                    ? 1.0
                                    : 2.0 * static_cast<double>(inter) /
                                          static_cast<double>(pa.size() + pb.size());
        const double hd_ref = oracle::hausdorff_bruteforce_2d(pa, pb, meta.pixel_spacing_mm);
        const double dv_ref = std::abs(static_cast<double>(pa.size()) - static_cast<double>(pb.size())) *
                              meta.voxel_volume_mm3() / 1000.0;
        const double dice_got = dice_coeff(a, b, 1);
        const double hd_got = hausdorff_mm(a, b, 1, meta).mm;
        const double dv_got = delta_v_ml(a, b, 1, meta);
        worst = std::max({worst, std::abs(dice_got - dice_ref), std::abs(hd_got - hd_ref),
                          std::abs(dv_got - dv_ref)});
        if (worst > 1e-9) ok = false;
    }
    // fixed points, exact
    Tensor<std::uint8_t> m({8, 8}, {Axis::Width, Axis::Height});
    m.at({2, 2}) = 1;
    m.at({3, 5}) = 1;
    ok = ok && dice_coeff(m, m, 1) == 1.0 && hausdorff_mm(m, m, 1, meta).mm == 0.0 &&
         delta_v_ml(m, m, 1, meta) == 0.0;
    Tensor<std::uint8_t> disjoint({8, 8}, {Axis::Width, Axis::Height});
    disjoint.at({6, 6}) = 1;
    ok = ok && dice_coeff(m, disjoint, 1) == 0.0;
    std::ostringstream detail;
    detail << "100 mask pairs, max |diff| " << worst;
    report(4, "DC/HD/dV match brute-force references and fixed points", ok, detail.str());
}

// -------------------------------------------------------------------- 5

void criterion_5() {
    Rng rng(1005);
    bool ok = true;
    double worst_identity = 0.0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<std::uint8_t> yv(25), xv(25);
        for (auto& v : yv) v = static_cast<std::uint8_t>(rng.below(3));
        for (auto& v : xv) v = static_cast<std::uint8_t>(rng.below(3));
        Tensor<std::uint8_t> y({5, 5}, {Axis::Width, Axis::Height}, yv);
        Tensor<double> x({5, 5, 3}, kXYC);
        for (std::int64_t i = 0; i < 25; ++i) x[i * 3 + xv[static_cast<std::size_t>(i)]] = 1.0;
        const double diff = std::abs(focal_tversky_loss(x, y, 0.5, 0.5, 1.0) - dice_loss(x, y));
        worst_identity = std::max(worst_identity, diff);
        if (diff > 1e-12) ok = false;

        Tensor<double> perfect({5, 5, 3}, kXYC);
        for (std::int64_t i = 0; i < 25; ++i) perfect[i * 3 + yv[static_cast<std::size_t>(i)]] = 1.0;
        if (focal_tversky_loss(perfect, y, 0.7, 0.3, 4.0 / 3.0) != 0.0) ok = false;
        if (soft_dice_loss(perfect, y) != 0.0) ok = false;
        if (dice_loss(perfect, y) != 0.0) ok = false;
        if (weighted_cce<double>(perfect, y) != 0.0) ok = false;
    }
    // WCC with a uniform prediction and unit weights equals N ln 3
    Tensor<std::uint8_t> y({6, 5}, {Axis::Width, Axis::Height});
    for (std::int64_t i = 0; i < 30; ++i) y[i] = static_cast<std::uint8_t>(i % 3);
    Tensor<double> uniform({6, 5, 3}, kXYC);
    for (std::int64_t i = 0; i < uniform.size(); ++i) uniform[i] = 1.0 / 3.0;
    const double wcc = weighted_cce<double>(uniform, y);
    const double expect = 30.0 * std::log(3.0);
    if (std::abs(wcc - expect) > 1e-9) ok = false;
    std::ostringstream detail;
    detail << "FTL==DCL max |diff| " << worst_identity << ", WCC uniform |diff| "
           << std::abs(wcc - expect);
    report(5, "loss laws: FTL/DCL identity, zero at perfect, uniform WCC", ok, detail.str());
}

// -------------------------------------------------------------------- 6

void criterion_6() {
    bool ok = true;
    std::ostringstream detail;

    // z-score contract over a phantom
    {
        PhantomSpec spec;
        spec.seed = 31;
        auto [study, labels] = make_phantom<double>(spec);
        auto hu = hu_convert(study.raw, study.meta);
        auto mask = brain_mask(hu);
        auto z = zscore(apply_mask(hu, mask), mask);
        double sum = 0, sum2 = 0;
        std::int64_t n = 0;
        const std::int64_t nt = z.dim(3);
        for (std::int64_t v = 0; v < mask.size(); ++v) {
            if (!mask[v]) continue;
            for (std::int64_t t = 0; t < nt; ++t) {
                sum += z[v * nt + t];
                sum2 += z[v * nt + t] * z[v * nt + t];
                ++n;
            }
        }
        const double mean = sum / n;
        const double sd = std::sqrt(sum2 / n - mean * mean);
        if (std::abs(mean) > 1e-6 || std::abs(sd - 1.0) > 1e-6) ok = false;
        detail << "zscore mean " << mean << " sd " << sd;
    }

    // clinical schedule: 30 frames to 40, endpoints exact
    {
        PhantomSpec spec;
        spec.seed = 32;
        auto [study, labels] = make_phantom<double>(spec);
        auto r = temporal_resample(study, 1.0);
        if (r.raw.dim(3) != 40) ok = false;
        const std::int64_t voxels = study.raw.size() / 30;
        for (std::int64_t v = 0; v < voxels; ++v) {
            if (r.raw[v * 40] != study.raw[v * 30]) ok = false;
            if (r.raw[v * 40 + 39] != study.raw[v * 30 + 29]) ok = false;
        }
        detail << "; resample 30->" << r.raw.dim(3);
    }

    // all 16 toggle configurations execute and are recorded in manifests
    {
        const auto dir = scratch("toggles");
        PhantomSpec base;
        base.size_x = 12;
        base.size_y = 12;
        base.time_schedule = {0, 1, 2, 3};
        SynthOptions synth;
        synth.base = base;
        synth.count = 2;
        synth.seed = 77;
        synth.out_dir = (dir / "raw").string();
        if (cmd_synth(synth).exit_code != 0) ok = false;
        int recorded = 0;
        for (int mask = 0; mask < 16; ++mask) {
            PreprocessOptions p;
            p.in_dir = synth.out_dir;
            p.out_dir = (dir / ("cfg" + std::to_string(mask))).string();
            p.flags.histogram_equalization = mask & 1;
            p.flags.gamma = mask & 2;
            p.flags.zscore = mask & 4;
            p.flags.resample = mask & 8;
            if (cmd_preprocess(p).exit_code != 0) {
                ok = false;
                continue;
            }
            nlohmann::json manifest;
            std::ifstream in(fs::path(p.out_dir) / "manifest.json");
            in >> manifest;
            if (manifest["flags"]["histogram_equalization"] == bool(mask & 1) &&
                manifest["flags"]["gamma"] == bool(mask & 2) &&
                manifest["flags"]["zscore"] == bool(mask & 4) &&
                manifest["flags"]["resample"] == bool(mask & 8))
                ++recorded;
        }
        if (recorded != 16) ok = false;
        detail << "; " << recorded << "/16 toggle configs recorded";
    }

    report(6, "preprocessing contract: z-score, resampling, toggle grid", ok, detail.str());
}

// ------------------------------------------------------------- 7 and 9

struct LearningOutcome {
    bool ran = false;
    double trained_penumbra = 0.0;
    double trained_core = 0.0;
    double untrained_penumbra = 0.0;
    double untrained_core = 0.0;
    double minutes = 0.0;
    bool wis_ok = false;
    std::string wis_detail;
};

double aggregate_dice(const std::vector<double>& values) {
    double mean = 0.0;
    for (double v : values) mean += v;
    return values.empty() ? 0.0 : mean / static_cast<double>(values.size());
}

LearningOutcome run_learning_check() {
    LearningOutcome out;
    const auto t0 = std::chrono::steady_clock::now();
    const auto dir = scratch("learning");

    // 40 phantoms at 32x32x3x8
    PhantomSpec base;
    base.size_x = 32;
    base.size_y = 32;
    base.time_schedule = {0, 1, 2, 3, 4, 5, 6, 7};
    SynthOptions synth;
    synth.base = base;
    synth.count = 40;
    synth.seed = 500;
    synth.out_dir = (dir / "raw").string();
    synth.jobs = 2;
    if (cmd_synth(synth).exit_code != 0) return out;

    PreprocessOptions prep;
    prep.in_dir = synth.out_dir;
    prep.out_dir = (dir / "prep").string();
    prep.flags.resample = false;  // schedule is already uniform at 1 s
    prep.jobs = 2;
    if (cmd_preprocess(prep).exit_code != 0) return out;

    const std::string config_path = (dir / "train.json").string();
    {
        std::ofstream cfg(config_path);
        cfg << R"({
          "precision": "f32",
          "loss": "wcc",
          "network": {
            "architecture": "mjnet_4d",
            "time_pool_schedule": [2, 4],
            "temporal_widths": [6, 12],
            "spatial_widths": [12, 24],
            "init_seed": 1
          },
          "train": { "learning_rate": 0.003, "max_epochs": 100, "seed": 3,
                     "threads": 2, "early_stop_patience": 25 }
        })";
    }
    TrainOptions train;
    train.config_path = config_path;
    train.data_dir = prep.out_dir;
    train.out_model = (dir / "model.ckpt").string();
    if (cmd_train(train).exit_code != 0) return out;

    EvalOptions eval;
    eval.model_path = train.out_model;
    eval.data_dir = prep.out_dir;
    eval.report_path = (dir / "report.csv").string();
    eval.split = Split::Test;
    eval.jobs = 2;
    if (cmd_eval(eval).exit_code != 0) return out;

    // parse the aggregate All rows and the WIS rows
    {
        std::ifstream csv(eval.report_path);
        std::string line;
        bool wis_penumbra_ok = false, wis_core_ok = false;
        bool any_wis = false;
        while (std::getline(csv, line)) {
            std::vector<std::string> f;
            std::stringstream ss(line);
            std::string field;
            while (std::getline(ss, field, ',')) f.push_back(field);
            if (f.size() < 8) continue;
            if (f[0] == "aggregate" && f[2] == "All") {
                if (f[3] == "penumbra") out.trained_penumbra = std::stod(f[4]);
                if (f[3] == "core") out.trained_core = std::stod(f[4]);
            }
            if (f[0] == "patient" && f[2] == "WIS") {
                any_wis = true;
                // empty-empty convention: DC 1, dV exactly 0, HD flagged empty
                const bool row_ok = std::stod(f[4]) == 1.0 && std::stod(f[7]) == 0.0 &&
                                    f[6] == "empty";
                if (f[3] == "penumbra") wis_penumbra_ok = row_ok;
                if (f[3] == "core") wis_core_ok = row_ok;
            }
        }
        out.wis_ok = any_wis && wis_penumbra_ok && wis_core_ok;
        out.wis_detail = any_wis ? (out.wis_ok ? "WIS rows report DC 1, dV 0, HD empty"
                                               : "WIS rows deviate from the convention")
                                 : "no WIS patient in the test split";
    }

    // untrained baseline over the same test split, in process
    {
        auto manifest = read_dataset_manifest((fs::path(prep.out_dir) / "dataset.json").string());
        NetworkConfig cfg;
        cfg.input_x = 32;
        cfg.input_y = 32;
        cfg.input_t = 8;
        cfg.time_pool_schedule = {2, 4};
        cfg.temporal_widths = {6, 12};
        cfg.spatial_widths = {12, 24};
        cfg.architecture = Architecture::Mjnet4d;
        auto net = build_network<float>(cfg);
        std::vector<double> pen, core;
        for (const auto& entry : manifest.patients) {
            if (entry.split != Split::Test) continue;
            auto study = read_study<float>((fs::path(prep.out_dir) / entry.study_path).string());
            auto gt = read_mask((fs::path(prep.out_dir) / entry.mask_path).string());
            auto pred = predict_volume(net, study.raw, cfg.architecture);
            Tensor<std::uint8_t> masked = pred.mask;
            for (std::int64_t i = 0; i < masked.size(); ++i)
                if (gt.mask[i] == kLabelOutsideBrain) masked[i] = kLabelOutsideBrain;
            pen.push_back(dice_coeff(masked, gt.mask, kLabelPenumbra));
            core.push_back(dice_coeff(masked, gt.mask, kLabelCore));
        }
        out.untrained_penumbra = aggregate_dice(pen);
        out.untrained_core = aggregate_dice(core);
    }

    out.minutes = seconds_since(t0) / 60.0;
    out.ran = true;
    return out;
}

void criterion_7_and_9() {
    LearningOutcome out = run_learning_check();
    {
        std::ostringstream detail;
        detail << "trained DC penumbra " << out.trained_penumbra << " core " << out.trained_core
               << "; untrained " << out.untrained_penumbra << "/" << out.untrained_core << "; "
               << out.minutes << " min";
        const bool ok = out.ran && out.trained_penumbra >= 0.70 && out.trained_core >= 0.60 &&
                        out.untrained_penumbra < 0.2 && out.untrained_core < 0.2 &&
                        out.trained_penumbra > out.untrained_penumbra &&
                        out.trained_core > out.untrained_core && out.minutes < 30.0;
        report(7, "desk-scale learning check on synthetic phantoms", ok, detail.str());
    }
    report(9, "lesion-free studies follow the empty-empty convention", out.ran && out.wis_ok,
           out.wis_detail);
}

// -------------------------------------------------------------------- 8

void criterion_8() {
    Rng rng(1008);
    bool ok = true;
    int checked = 0;
    struct Cfg {
        std::int64_t x, y, t;
        std::vector<std::int64_t> schedule;
    };
    const Cfg cases[] = {{16, 16, 4, {2, 2}},
                         {32, 16, 8, {2, 4}},
                         {16, 24, 6, {3, 2}},
                         {8, 8, 9, {3, 3}},
                         {24, 24, 12, {2, 3, 2}}};
    for (Architecture arch : {Architecture::Mjnet4d, Architecture::Mjnet3dTime}) {
        for (const Cfg& c : cases) {
            NetworkConfig cfg;
            cfg.input_x = c.x;
            cfg.input_y = c.y;
            cfg.input_t = c.t;
            cfg.time_pool_schedule = c.schedule;
            cfg.temporal_widths.assign(c.schedule.size(),
                                       2 + static_cast<std::int64_t>(rng.below(3)));
            cfg.spatial_widths = {3 + static_cast<std::int64_t>(rng.below(3)), 5};
            cfg.architecture = arch;
            auto net = build_network<double>(cfg);
            Tensor<double> study({c.x, c.y, 3, c.t}, kXYZT);
            for (std::int64_t i = 0; i < study.size(); ++i) study[i] = rng.uniform(-1, 1);
            RunState<double> rs;
            const auto& out = net.forward(make_window_inputs(study, 1, arch), rs);
            if (out.dims() != Shape{c.x, c.y, 3}) ok = false;
            for (std::int64_t p = 0; p < c.x * c.y; ++p) {
                double sum = 0;
                for (int k = 0; k < 3; ++k) {
                    if (out[p * 3 + k] < 0) ok = false;
                    sum += out[p * 3 + k];
                }
                if (std::abs(sum - 1.0) > 1e-6) ok = false;
            }
            ++checked;
        }
    }
    std::ostringstream detail;
    detail << checked << " configs across both architectures";
    report(8, "forward output is (X, Y, 3) with per-pixel probabilities summing to 1", ok,
           detail.str());
}

// ------------------------------------------------------------------- 10

void criterion_10() {
    const auto base = scratch("determinism");
    bool ok = true;
    auto run_pipeline = [&](const std::string& tag) -> std::pair<fs::path, fs::path> {
        const fs::path dir = base / tag;
        fs::create_directories(dir);
        std::ofstream(dir / "spec.json")
            << "{ \"size_x\": 16, \"size_y\": 16, \"size_z\": 3, \"time_schedule\": [0,1,2,3], "
               "\"seed\": 0 }";
        std::ofstream(dir / "train.json") << R"({
          "precision": "f64",
          "loss": "wcc",
          "network": {
            "architecture": "mjnet_4d",
            "time_pool_schedule": [2, 2],
            "temporal_widths": [2, 3],
            "spatial_widths": [3, 4],
            "init_seed": 1
          },
          "train": { "learning_rate": 0.003, "max_epochs": 4, "seed": 11, "threads": 2 }
        })";
        if (run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "raw").string() +
                    " --count 8 --seed 77 --precision f64") != 0)
            ok = false;
        if (run_cli("preprocess " + (dir / "raw").string() + " " + (dir / "prep").string() +
                    " --no-resample") != 0)
            ok = false;
        if (run_cli("train " + (dir / "train.json").string() + " " + (dir / "prep").string() +
                    " " + (dir / "model.ckpt").string()) != 0)
            ok = false;
        if (run_cli("eval " + (dir / "model.ckpt").string() + " " + (dir / "prep").string() + " " +
                    (dir / "report.csv").string() + " --split test") != 0)
            ok = false;
        return {dir / "model.history.csv", dir / "report.csv"};
    };
    auto a = run_pipeline("a");
    auto b = run_pipeline("b");
    const bool history_same = slurp(a.first) == slurp(b.first);
    const bool report_same = slurp(a.second) == slurp(b.second);
    ok = ok && history_same && report_same && !slurp(a.first).empty();
    std::ostringstream detail;
    detail << "history " << (history_same ? "identical" : "differs") << ", report "
           << (report_same ? "identical" : "differs");
    report(10, "fixed-seed pipeline is byte-identical across runs (64-bit)", ok, detail.str());
}

}  // namespace

int main() {
    criterion_1();
    criterion_2();
    criterion_3();
    criterion_4();
    criterion_5();
    criterion_6();
    criterion_7_and_9();
    criterion_8();
    criterion_10();
    if (g_failures > 0) {
        std::printf("%d criterion(s) failed\n", g_failures);
        return 1;
    }
    std::printf("all acceptance criteria passed\n");
    return 0;
}
