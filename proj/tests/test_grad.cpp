#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "ctpseg/losses.hpp"
#include "ctpseg/network.hpp"
#include "oracles.hpp"

using namespace ctpseg;

namespace {

const AxisRoles kXYC = {Axis::Width, Axis::Height, Axis::Channel};
const AxisRoles kXYTC = {Axis::Width, Axis::Height, Axis::Time, Axis::Channel};
const AxisRoles kXYZC = {Axis::Width, Axis::Height, Axis::Depth, Axis::Channel};
const AxisRoles kXYZTC = {Axis::Width, Axis::Height, Axis::Depth, Axis::Time, Axis::Channel};

double probe_loss(const Network<double>& net, const std::vector<Tensor<double>>& inputs,
                  const Tensor<double>& probe, bool training, std::uint64_t dseed) {
    RunState<double> rs;
    rs.training = training;
    rs.dropout_seed = dseed;
    const Tensor<double>& out = net.forward(inputs, rs);
    double loss = 0.0;
    for (std::int64_t i = 0; i < out.size(); ++i) loss += out[i] * probe[i];
    return loss;
}

// Central finite differences on every parameter and input tensor of `net`
// against the analytic gradients, >= 20 coordinates total.
void check_network_grads(Network<double>& net, std::vector<Tensor<double>> inputs,
                         std::uint64_t rng_seed, bool training = false,
                         int coords_per_tensor = 8, double tol = 1e-5) {
    Rng rng(rng_seed);
    const std::uint64_t dseed = 424242;
    RunState<double> rs;
    rs.training = training;
    rs.dropout_seed = dseed;
    const Tensor<double>& out = net.forward(inputs, rs);
    Tensor<double> probe(out.dims(), out.roles());
    for (std::int64_t i = 0; i < probe.size(); ++i) probe[i] = rng.uniform(-1, 1);

    std::vector<Tensor<double>> pgrads;
    net.backward(probe, rs, pgrads);

    const std::size_t n_tensors = net.params().size() + inputs.size();
    coords_per_tensor = std::max<int>(
        coords_per_tensor, static_cast<int>((20 + n_tensors - 1) / n_tensors));

    const double h = 1e-3;
    const double f0 = probe_loss(net, inputs, probe, training, dseed);
    int checked = 0;
    // A probe whose one-sided slopes disagree crossed a kink (pool argmax
    // switch, leaky-relu corner); central differences are invalid there, so
    // the coordinate is resampled. Function-value-only test: it cannot mask
    // a wrong analytic gradient.
    auto smooth = [&](double fp, double fm) {
        const double d1 = fp - f0, d2 = f0 - fm;
        return std::abs(d1 - d2) <= 0.02 * (std::abs(d1) + std::abs(d2)) + 1e-12;
    };
    auto compare = [&](double analytic, double plus, double minus) {
        const double fd = (plus - minus) / (2.0 * h);
        const double denom = std::max(std::abs(analytic), std::abs(fd));
        if (denom < 1e-6) {
            CHECK(std::abs(analytic - fd) <= 1e-8);
        } else {
            CHECK(std::abs(analytic - fd) / denom <= tol);
        }
        ++checked;
    };

    const auto& params = net.params();
    for (std::size_t pi = 0; pi < params.size(); ++pi) {
        Tensor<double>& w = params[pi]->value;
        for (int c = 0; c < coords_per_tensor; ++c) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                const std::int64_t idx =
                    static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(w.size())));
                const double orig = w[idx];
                w[idx] = orig + h;
                const double fp = probe_loss(net, inputs, probe, training, dseed);
                w[idx] = orig - h;
                const double fm = probe_loss(net, inputs, probe, training, dseed);
                w[idx] = orig;
                if (!smooth(fp, fm)) continue;
                compare(pgrads[pi][idx], fp, fm);
                break;
            }
        }
    }
    for (std::size_t ii = 0; ii < inputs.size(); ++ii) {
        const int nid = net.input_ids()[ii];
        const Tensor<double>& g = rs.grads[static_cast<std::size_t>(nid)];
        REQUIRE(g.size() == inputs[ii].size());
        for (int c = 0; c < coords_per_tensor; ++c) {
            for (int attempt = 0; attempt < 8; ++attempt) {
                const std::int64_t idx = static_cast<std::int64_t>(
                    rng.below(static_cast<std::uint64_t>(inputs[ii].size())));
                const double orig = inputs[ii][idx];
                inputs[ii][idx] = orig + h;
                const double fp = probe_loss(net, inputs, probe, training, dseed);
                inputs[ii][idx] = orig - h;
                const double fm = probe_loss(net, inputs, probe, training, dseed);
                inputs[ii][idx] = orig;
                if (!smooth(fp, fm)) continue;
                compare(g[idx], fp, fm);
                break;
            }
        }
    }
    CHECK(checked >= 20);
}

Tensor<double> rand_in(const Shape& d, const AxisRoles& r, std::uint64_t seed, bool away_from_zero = false) {
    Rng rng(seed);
    Tensor<double> t(d, r);
    for (std::int64_t i = 0; i < t.size(); ++i) {
        double u = rng.uniform(-1, 1);
        if (away_from_zero) u = (u >= 0 ? 0.15 : -0.15) + u;
        t[i] = u;
    }
    return t;
}

}  // namespace

TEST_CASE("gradients: conv2d, same and valid") {
    Rng init(1);
    for (bool same_mode : {true, false}) {
        Network<double> net;
        int in = net.add_input("x");
        char s = same_mode ? 1 : 0;
        int conv = net.add(std::make_unique<ConvNode<double>>(
            "conv", in, std::vector<int>{0, 1}, Shape{3, 3}, std::vector<char>{s, s}, 2, 3, init));
        net.set_output(conv);
        check_network_grads(net, {rand_in({5, 6, 2}, kXYC, 11)}, 101);
    }
}

TEST_CASE("gradients: conv3d over (X,Y,T) and depth-reducing conv over (X,Y,Z)") {
    Rng init(2);
    {
        Network<double> net;
        int in = net.add_input("x");
        int conv = net.add(std::make_unique<ConvNode<double>>(
            "conv", in, std::vector<int>{0, 1, 2}, Shape{3, 3, 3}, std::vector<char>{1, 1, 1}, 2,
            2, init));
        net.set_output(conv);
        check_network_grads(net, {rand_in({4, 5, 6, 2}, kXYTC, 12)}, 102);
    }
    {
        Network<double> net;
        int in = net.add_input("x");
        int conv = net.add(std::make_unique<ConvNode<double>>(
            "depth", in, std::vector<int>{0, 1, 2}, Shape{3, 3, 3}, std::vector<char>{1, 1, 0}, 2,
            2, init));
        net.set_output(conv);
        check_network_grads(net, {rand_in({4, 5, 3, 2}, kXYZC, 13)}, 103);
    }
}

TEST_CASE("gradients: full 4D convolution layer") {
    Rng init(3);
    Network<double> net;
    int in = net.add_input("x");
    int conv = net.add(std::make_unique<ConvNode<double>>(
        "conv4", in, std::vector<int>{0, 1, 2, 3}, Shape{3, 3, 3, 3},
        std::vector<char>{1, 1, 1, 1}, 2, 2, init));
    net.set_output(conv);
    check_network_grads(net, {rand_in({4, 4, 3, 4, 2}, kXYZTC, 14)}, 104, false, 6);
}

TEST_CASE("gradients: grouped spatio-temporal layer") {
    Rng init(4);
    Network<double> net;
    int in = net.add_input("x");
    int conv = net.add(
        std::make_unique<GroupedConvNode<double>>("grouped", in, Shape{3, 3, 3}, 2, 3, init));
    net.set_output(conv);
    check_network_grads(net, {rand_in({4, 4, 3, 5, 2}, kXYZTC, 15)}, 105, false, 6);
}

TEST_CASE("grouped layer: decomposed forward equals direct forward") {
    Rng init(5);
    Network<double> net;
    int in = net.add_input("x");
    auto node = std::make_unique<GroupedConvNode<double>>("grouped", in, Shape{3, 3, 3}, 2, 3, init);
    GroupedConvNode<double>* raw = node.get();
    int id = net.add(std::move(node));
    net.set_output(id);

    auto x = rand_in({5, 4, 3, 6, 2}, kXYZTC, 16);
    RunState<double> rs1, rs2;
    auto a = net.forward({x}, rs1);
    raw->set_mode(Conv4dMode::Direct);
    auto b = net.forward({x}, rs2);
    CHECK(oracle::max_abs_diff(a, b) <= 1e-10);
}

TEST_CASE("gradients: pooling layers") {
    {
        Network<double> net;
        int in = net.add_input("x");
        int p = net.add(std::make_unique<MaxPoolNode<double>>("pool", in, Shape{2, 2, 1}));
        net.set_output(p);
        check_network_grads(net, {rand_in({4, 6, 2}, kXYC, 17)}, 106, false, 12);
    }
    {
        Network<double> net;
        int in = net.add_input("x");
        int p = net.add(std::make_unique<MaxPoolNode<double>>("tpool", in, Shape{1, 1, 3, 1}));
        net.set_output(p);
        check_network_grads(net, {rand_in({3, 3, 6, 2}, kXYTC, 18)}, 107, false, 12);
    }
}

TEST_CASE("gradients: upsample") {
    Network<double> net;
    int in = net.add_input("x");
    int u = net.add(std::make_unique<Upsample2dNode<double>>("up", in, 2));
    net.set_output(u);
    check_network_grads(net, {rand_in({3, 4, 2}, kXYC, 19)}, 108, false, 12);
}

TEST_CASE("gradients: activations") {
    {
        Network<double> net;
        int in = net.add_input("x");
        int a = net.add(std::make_unique<LeakyReluNode<double>>("lrelu", in, 1.0 / 3.0));
        net.set_output(a);
        check_network_grads(net, {rand_in({4, 4, 3}, kXYC, 20, /*away_from_zero=*/true)}, 109,
                            false, 12);
    }
    {
        Network<double> net;
        int in = net.add_input("x");
        int a = net.add(std::make_unique<SigmoidNode<double>>("sig", in));
        net.set_output(a);
        check_network_grads(net, {rand_in({4, 4, 2}, kXYC, 21)}, 110, false, 12);
    }
    {
        Network<double> net;
        int in = net.add_input("x");
        int a = net.add(std::make_unique<SoftmaxNode<double>>("soft", in));
        net.set_output(a);
        check_network_grads(net, {rand_in({4, 4, 3}, kXYC, 22)}, 111, false, 12);
    }
}

TEST_CASE("gradients: dropout under a fixed mask stream") {
    Network<double> net;
    int in = net.add_input("x");
    int d = net.add(std::make_unique<DropoutNode<double>>("drop", in, 0.5));
    net.set_output(d);
    check_network_grads(net, {rand_in({5, 5, 2}, kXYC, 23)}, 112, /*training=*/true, 12);
}

TEST_CASE("gradients: concat, add, broadcast multiply, squeeze") {
    Rng init(6);
    {
        Network<double> net;
        int a = net.add_input("a");
        int b = net.add_input("b");
        int c = net.add(std::make_unique<ConcatNode<double>>("cat", std::vector<int>{a, b}, 2));
        net.set_output(c);
        check_network_grads(net, {rand_in({3, 3, 2}, kXYC, 24), rand_in({3, 3, 3}, kXYC, 25)}, 113,
                            false, 6);
    }
    {
        Network<double> net;
        int a = net.add_input("a");
        int b = net.add_input("b");
        int c = net.add(std::make_unique<AddNode<double>>("add", a, b));
        net.set_output(c);
        check_network_grads(net, {rand_in({3, 3, 2}, kXYC, 26), rand_in({3, 3, 2}, kXYC, 27)}, 114,
                            false, 6);
    }
    {
        Network<double> net;
        int a = net.add_input("coeff");
        int b = net.add_input("x");
        int c = net.add(std::make_unique<MulBroadcastNode<double>>("mul", a, b));
        net.set_output(c);
        check_network_grads(net, {rand_in({3, 3, 1}, kXYC, 28), rand_in({3, 3, 4}, kXYC, 29)}, 115,
                            false, 8);
    }
    {
        Network<double> net;
        int a = net.add_input("a");
        int s = net.add(std::make_unique<SqueezeNode<double>>("sq", a, 2));
        net.set_output(s);
        check_network_grads(net, {rand_in({3, 4, 1, 2}, kXYZC, 30)}, 116, false, 12);
    }
}

TEST_CASE("gradients: attention gate composite") {
    Rng init(7);
    Network<double> net;
    int g = net.add_input("gating");
    int x = net.add_input("skip");
    int out = add_attention_gate(net, "attn", g, x, 3, 2, 2, 3, 1.0 / 3.0, init);
    net.set_output(out);
    check_network_grads(net, {rand_in({4, 4, 3}, kXYC, 31), rand_in({4, 4, 2}, kXYC, 32)}, 117,
                        false, 6);
}

TEST_CASE("gradients: every loss against central differences") {
    Rng rng(33);
    const std::int64_t w = 5, h = 4;
    // entries bounded away from 0: keeps the central-difference truncation
    // of the log-based losses inside the tolerance at step 1e-3
    Tensor<double> probs({w, h, 3}, kXYC);
    for (std::int64_t i = 0; i < probs.size(); ++i) probs[i] = rng.uniform(0.3, 0.95);
    std::vector<std::uint8_t> lv(static_cast<std::size_t>(w * h));
    for (std::size_t i = 0; i < lv.size(); ++i)
        lv[i] = static_cast<std::uint8_t>(i % 4 == 3 ? kLabelOutsideBrain : i % 3);
    Tensor<std::uint8_t> labels({w, h}, {Axis::Width, Axis::Height}, lv);

    Tensor<double> weights({w, h, 3}, kXYC);
    for (std::int64_t i = 0; i < weights.size(); ++i) weights[i] = 0.5 + rng.uniform();

    LossOptions opts;
    opts.sample_multiplier = 1.5;
    const double step = 1e-3;
    for (LossKind kind :
         {LossKind::FocalTversky, LossKind::SoftDice, LossKind::Dice, LossKind::WeightedCce}) {
        auto res = loss_with_grad(kind, probs, labels, &weights, opts);
        int checked = 0;
        for (int c = 0; c < 24; ++c) {
            const std::int64_t idx =
                static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(probs.size())));
            const double orig = probs[idx];
            probs[idx] = orig + step;
            const double fp = loss_value(kind, probs, labels, &weights, opts);
            probs[idx] = orig - step;
            const double fm = loss_value(kind, probs, labels, &weights, opts);
            probs[idx] = orig;
            const double fd = (fp - fm) / (2.0 * step);
            const double an = res.grad[idx];
            const double denom = std::max(std::abs(an), std::abs(fd));
            if (denom < 1e-6) {
                CHECK(std::abs(an - fd) <= 1e-8);
            } else {
                CHECK(std::abs(an - fd) / denom <= 1e-5);
            }
            ++checked;
        }
        CHECK(checked >= 20);
    }
}

TEST_CASE("backward without a recorded forward is a state error") {
    Rng init(8);
    Network<double> net;
    int in = net.add_input("x");
    int conv = net.add(std::make_unique<ConvNode<double>>(
        "conv", in, std::vector<int>{0, 1}, Shape{1, 1}, std::vector<char>{1, 1}, 1, 1, init));
    net.set_output(conv);
    RunState<double> rs;
    std::vector<Tensor<double>> pg;
    Tensor<double> g({2, 2, 1}, kXYC);
    CHECK_THROWS_AS(net.backward(g, rs, pg), StateError);
}

TEST_CASE("zero upstream gradient produces zero parameter gradients") {
    Rng init(9);
    Network<double> net;
    int in = net.add_input("x");
    int conv = net.add(std::make_unique<ConvNode<double>>(
        "conv", in, std::vector<int>{0, 1}, Shape{3, 3}, std::vector<char>{1, 1}, 2, 3, init));
    net.set_output(conv);
    RunState<double> rs;
    auto out = net.forward({rand_in({4, 4, 2}, kXYC, 34)}, rs);
    std::vector<Tensor<double>> pg;
    net.backward(Tensor<double>(out.dims(), out.roles()), rs, pg);
    for (const auto& g : pg)
        for (std::int64_t i = 0; i < g.size(); ++i) CHECK(g[i] == 0.0);
}

TEST_CASE("1x1 conv weight gradient equals the input sum under unit upstream") {
    Rng init(10);
    Network<double> net;
    int in = net.add_input("x");
    int conv = net.add(std::make_unique<ConvNode<double>>(
        "conv", in, std::vector<int>{0, 1}, Shape{1, 1}, std::vector<char>{1, 1}, 1, 1, init));
    net.set_output(conv);
    auto x = rand_in({4, 5, 1}, kXYC, 35);
    RunState<double> rs;
    auto out = net.forward({x}, rs);
    Tensor<double> ones(out.dims(), out.roles());
    for (std::int64_t i = 0; i < ones.size(); ++i) ones[i] = 1.0;
    std::vector<Tensor<double>> pg;
    net.backward(ones, rs, pg);
    double input_sum = 0.0;
    for (std::int64_t i = 0; i < x.size(); ++i) input_sum += x[i];
    CHECK(pg[0][0] == doctest::Approx(input_sum).epsilon(1e-12));  // lone weight
    CHECK(pg[1][0] == doctest::Approx(static_cast<double>(out.size())).epsilon(1e-12));  // bias
}
