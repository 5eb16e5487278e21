#pragma once

#include <array>
#include <cmath>
#include <type_traits>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "ctpseg/conv.hpp"
#include "ctpseg/rng.hpp"
#include "ctpseg/tensor.hpp"

namespace ctpseg {

// Reverse-mode differentiation over an ordered layer graph. Nodes are added
// in topological order; a forward pass records activations into a RunState,
// and backward walks the graph in reverse accumulating gradients for every
// parameter. RunState is per-call, so one immutable network can serve
// concurrent forward/backward passes on worker threads.

template <typename T>
struct Param {
    std::string name;
    Tensor<T> value;
    bool is_kernel = false;  // L1/L2 penalties apply to kernels only
};

template <typename T>
struct RunState {
    std::vector<Tensor<T>> acts;
    std::vector<Tensor<T>> cache;                    // per-node (dropout masks)
    std::vector<std::vector<std::int64_t>> icache;   // per-node (pool argmax)
    std::vector<Tensor<T>> grads;                    // per-node output grads (after backward)
    bool forward_done = false;
    bool training = false;
    bool mc_dropout = false;
    std::uint64_t dropout_seed = 0;  // stream base; nodes fork by their id
};

template <typename T>
class Node {
public:
    Node(std::string name, std::vector<int> args) : name_(std::move(name)), args_(std::move(args)) {}
    virtual ~Node() = default;

    const std::string& name() const { return name_; }
    const std::vector<int>& args() const { return args_; }

    virtual void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs,
                         int self) const = 0;
    virtual void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in,
                          RunState<T>& rs, int self, const std::vector<Tensor<T>*>& gin,
                          const std::vector<Tensor<T>*>& pgrads) const = 0;
    virtual std::vector<Param<T>*> params() { return {}; }

protected:
    std::string name_;
    std::vector<int> args_;
};

namespace graphdetail {

// Multi-channel convolution core shared by the conv and grouped nodes.
// Input layout (spatial..., Cin), weights (kernel..., Cin, Cout), output
// (spatial'..., Cout). `bound` lists input axes the kernel slides over;
// `same` marks which of those use centered zero padding.

struct ConvGeometry {
    std::vector<int> bound;
    std::vector<char> same;
};

template <typename T>
Shape conv_pad_amounts(const Tensor<T>& weights, const ConvGeometry& geo, int in_rank) {
    Shape amounts(static_cast<std::size_t>(in_rank), 0);
    for (std::size_t j = 0; j < geo.bound.size(); ++j) {
        if (!geo.same[j]) continue;
        if (weights.dim(static_cast<int>(j)) % 2 == 0)
            throw ConfigError("same-padding requires odd kernel extents");
        amounts[static_cast<std::size_t>(geo.bound[j])] =
            (weights.dim(static_cast<int>(j)) - 1) / 2;
    }
    return amounts;
}

// Offsets of every kernel tap into the (padded) input, relative to the
// tap-0 position, in element units.
template <typename T>
std::vector<std::int64_t> tap_deltas(const Tensor<T>& padded, const Tensor<T>& weights,
                                     const std::vector<int>& bound) {
    const int kr = static_cast<int>(bound.size());
    const Shape istr = padded.strides();
    std::int64_t taps = 1;
    for (int j = 0; j < kr; ++j) taps *= weights.dim(j);
    std::vector<std::int64_t> delta(static_cast<std::size_t>(taps));
    Shape kc(static_cast<std::size_t>(kr), 0);
    for (std::int64_t t = 0; t < taps; ++t) {
        std::int64_t d = 0;
        for (int j = 0; j < kr; ++j)
            d += kc[static_cast<std::size_t>(j)] * istr[static_cast<std::size_t>(bound[static_cast<std::size_t>(j)])];
        delta[static_cast<std::size_t>(t)] = d;
        for (int j = kr - 1; j >= 0; --j) {
            if (++kc[static_cast<std::size_t>(j)] < weights.dim(j)) break;
            kc[static_cast<std::size_t>(j)] = 0;
        }
    }
    return delta;
}

template <typename T>
Tensor<T> mc_conv_forward(const Tensor<T>& input, const Tensor<T>& weights,
                          const std::type_identity_t<Tensor<T>>* bias, const ConvGeometry& geo) {
    const int r = input.rank();
    const int ch_axis = r - 1;
    const int kr = static_cast<int>(geo.bound.size());
    const std::int64_t cin = weights.dim(weights.rank() - 2);
    const std::int64_t cout = weights.dim(weights.rank() - 1);
    if (input.dim(ch_axis) != cin) throw ShapeError("conv input channel mismatch");

    Tensor<T> padded = input;
    {
        Shape amounts = conv_pad_amounts(weights, geo, r);
        bool any = false;
        for (auto a : amounts) any = any || a > 0;
        if (any) padded = pad(input, amounts, PadMode::Zero);
    }

    Shape out_dims = padded.dims();
    for (int j = 0; j < kr; ++j) {
        const int ax = geo.bound[static_cast<std::size_t>(j)];
        out_dims[static_cast<std::size_t>(ax)] = padded.dim(ax) - weights.dim(j) + 1;
        if (out_dims[static_cast<std::size_t>(ax)] < 1)
            throw ShapeError("kernel extent exceeds input extent on axis " +
                             std::string(axis_name(input.role(ax))));
    }
    out_dims[static_cast<std::size_t>(ch_axis)] = cout;
    Tensor<T> out(out_dims, input.roles());

    const Shape istr = padded.strides();
    const auto delta = tap_deltas(padded, weights, geo.bound);
    const std::int64_t taps = static_cast<std::int64_t>(delta.size());

    // Spatial iteration excludes the channel axis (innermost).
    const std::int64_t spatial_out = out.size() / cout;
    Shape oc(static_cast<std::size_t>(r - 1), 0);
    const T* src = padded.data();
    const T* w = weights.data();
    T* dst = out.data();
    std::vector<T> acc(static_cast<std::size_t>(cout));
    for (std::int64_t s = 0; s < spatial_out; ++s) {
        std::int64_t base = 0;
        for (int k = 0; k < r - 1; ++k) base += oc[static_cast<std::size_t>(k)] * istr[static_cast<std::size_t>(k)];
        for (int j = 0; j < kr; ++j)
            base += (weights.dim(j) - 1) *
                    istr[static_cast<std::size_t>(geo.bound[static_cast<std::size_t>(j)])];
        if (bias) {
            for (std::int64_t co = 0; co < cout; ++co) acc[static_cast<std::size_t>(co)] = (*bias)[co];
        } else {
            std::fill(acc.begin(), acc.end(), T(0));
        }
        for (std::int64_t t = 0; t < taps; ++t) {
            const T* cell = src + (base - delta[static_cast<std::size_t>(t)]);
            const T* wrow = w + t * cin * cout;
            for (std::int64_t ci = 0; ci < cin; ++ci) {
                const T a = cell[ci];
                if (a == T(0)) continue;
                const T* wr = wrow + ci * cout;
                for (std::int64_t co = 0; co < cout; ++co) acc[static_cast<std::size_t>(co)] += a * wr[co];
            }
        }
        std::copy(acc.begin(), acc.end(), dst + s * cout);
        for (int k = r - 2; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }
    return out;
}

// Accumulates input/weight/bias gradients. `gin` has the unpadded input
// shape, `gw`/`gb` the parameter shapes; all are accumulated into.
template <typename T>
void mc_conv_backward(const Tensor<T>& input, const Tensor<T>& weights, const ConvGeometry& geo,
                      const Tensor<T>& gout, std::type_identity_t<Tensor<T>>* gin,
                      std::type_identity_t<Tensor<T>>* gw, std::type_identity_t<Tensor<T>>* gb) {
    const int r = input.rank();
    const int kr = static_cast<int>(geo.bound.size());
    const std::int64_t cin = weights.dim(weights.rank() - 2);
    const std::int64_t cout = weights.dim(weights.rank() - 1);

    Shape amounts = conv_pad_amounts(weights, geo, r);
    bool padded_any = false;
    for (auto a : amounts) padded_any = padded_any || a > 0;
    Tensor<T> padded = padded_any ? pad(input, amounts, PadMode::Zero) : input;
    Tensor<T> gpad(padded.dims(), padded.roles());

    const Shape istr = padded.strides();
    const auto delta = tap_deltas(padded, weights, geo.bound);
    const std::int64_t taps = static_cast<std::int64_t>(delta.size());

    const std::int64_t spatial_out = gout.size() / cout;
    Shape oc(static_cast<std::size_t>(r - 1), 0);
    const T* src = padded.data();
    const T* w = weights.data();
    T* gsrc = gpad.data();
    const T* g = gout.data();
    for (std::int64_t s = 0; s < spatial_out; ++s) {
        std::int64_t base = 0;
        for (int k = 0; k < r - 1; ++k) base += oc[static_cast<std::size_t>(k)] * istr[static_cast<std::size_t>(k)];
        for (int j = 0; j < kr; ++j)
            base += (weights.dim(j) - 1) *
                    istr[static_cast<std::size_t>(geo.bound[static_cast<std::size_t>(j)])];
        const T* grow = g + s * cout;
        if (gb) {
            T* gbd = gb->data();
            for (std::int64_t co = 0; co < cout; ++co) gbd[co] += grow[co];
        }
        for (std::int64_t t = 0; t < taps; ++t) {
            const std::int64_t cell = base - delta[static_cast<std::size_t>(t)];
            const T* icell = src + cell;
            T* gcell = gsrc + cell;
            const T* wrow = w + t * cin * cout;
            T* gwrow = gw ? gw->data() + t * cin * cout : nullptr;
            for (std::int64_t ci = 0; ci < cin; ++ci) {
                const T a = icell[ci];
                const T* wr = wrow + ci * cout;
                T sum = T(0);
                if (gwrow) {
                    T* gwr = gwrow + ci * cout;
                    for (std::int64_t co = 0; co < cout; ++co) {
                        gwr[co] += a * grow[co];
                        sum += wr[co] * grow[co];
                    }
                } else {
                    for (std::int64_t co = 0; co < cout; ++co) sum += wr[co] * grow[co];
                }
                gcell[ci] += sum;
            }
        }
        for (int k = r - 2; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < gout.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }

    if (!gin) return;
    if (!padded_any) {
        for (std::int64_t i = 0; i < gin->size(); ++i) (*gin)[i] += gpad[i];
        return;
    }
    // Crop the padded gradient back onto the input.
    Shape ic(static_cast<std::size_t>(r), 0);
    const std::int64_t n = gin->size();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        Shape pc(static_cast<std::size_t>(r));
        for (int k = 0; k < r; ++k)
            pc[static_cast<std::size_t>(k)] = ic[static_cast<std::size_t>(k)] + amounts[static_cast<std::size_t>(k)];
        (*gin)[lin] += gpad[gpad.offset(pc)];
        for (int k = r - 1; k >= 0; --k) {
            if (++ic[static_cast<std::size_t>(k)] < gin->dim(k)) break;
            ic[static_cast<std::size_t>(k)] = 0;
        }
    }
}

template <typename T>
void glorot_init(Tensor<T>& w, std::int64_t fan_in, std::int64_t fan_out, Rng& rng) {
    const double a = std::sqrt(6.0 / static_cast<double>(fan_in + fan_out));
    for (std::int64_t i = 0; i < w.size(); ++i) w[i] = static_cast<T>(rng.uniform(-a, a));
}

}  // namespace graphdetail

template <typename T>
class InputNode final : public Node<T> {
public:
    explicit InputNode(std::string name) : Node<T>(std::move(name), {}) {}
    void forward(const std::vector<const Tensor<T>*>&, RunState<T>&, int) const override {
        throw StateError("input node '" + this->name_ + "' was not fed");
    }
    void backward(const Tensor<T>&, const std::vector<const Tensor<T>*>&, RunState<T>&, int,
                  const std::vector<Tensor<T>*>&, const std::vector<Tensor<T>*>&) const override {}
};

// General convolution layer: the kernel slides over `bound_axes` of the
// input (channel-last layout), covering the 2D, 2D+time, 3D and 4D variants
// plus the depth-reducing valid convolution.
template <typename T>
class ConvNode final : public Node<T> {
public:
    ConvNode(std::string name, int arg, std::vector<int> bound_axes, Shape kernel_extents,
             std::vector<char> same, std::int64_t cin, std::int64_t cout, Rng& rng)
        : Node<T>(std::move(name), {arg}) {
        geo_.bound = std::move(bound_axes);
        geo_.same = std::move(same);
        Shape wd = kernel_extents;
        wd.push_back(cin);
        wd.push_back(cout);
        AxisRoles wr;
        const Axis pool[4] = {Axis::Width, Axis::Height, Axis::Depth, Axis::Time};
        for (std::size_t j = 0; j < kernel_extents.size(); ++j) wr.push_back(pool[j]);
        wr.push_back(Axis::ChannelIn);
        wr.push_back(Axis::ChannelOut);
        weights_.name = this->name_ + "/w";
        weights_.is_kernel = true;
        weights_.value = Tensor<T>(wd, wr);
        std::int64_t taps = 1;
        for (auto k : kernel_extents) taps *= k;
        graphdetail::glorot_init(weights_.value, taps * cin, taps * cout, rng);
        bias_.name = this->name_ + "/b";
        bias_.value = Tensor<T>({cout}, {Axis::ChannelOut});
    }

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] =
            graphdetail::mc_conv_forward(*in[0], weights_.value, &bias_.value, geo_);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>& pgrads) const override {
        graphdetail::mc_conv_backward(*in[0], weights_.value, geo_, gout, gin[0], pgrads[0],
                                      pgrads[1]);
    }

    std::vector<Param<T>*> params() override { return {&weights_, &bias_}; }

private:
    graphdetail::ConvGeometry geo_;
    Param<T> weights_;
    Param<T> bias_;
};

// Grouped spatio-temporal layer over a rank-5 input (X, Y, 3, T, Cin).
// Group g owns one shared (kx, ky, kt, Cin, Cout) kernel applied to every
// legal neighbouring 2D+time volume; per-group sums are stacked along
// depth. Decomposed mode is the production path; Direct re-evaluates each
// group through the one-shot 4D convolution for equivalence checks.
template <typename T>
class GroupedConvNode final : public Node<T> {
public:
    GroupedConvNode(std::string name, int arg, Shape kernel_extents, std::int64_t cin,
                    std::int64_t cout, Rng& rng, Conv4dMode mode = Conv4dMode::Decomposed)
        : Node<T>(std::move(name), {arg}), mode_(mode), cin_(cin), cout_(cout) {
        if (kernel_extents.size() != 3) throw ConfigError("group kernels must be (w, h, p)");
        std::int64_t taps = kernel_extents[0] * kernel_extents[1] * kernel_extents[2];
        for (int g = 0; g < 3; ++g) {
            Shape wd = kernel_extents;
            wd.push_back(cin);
            wd.push_back(cout);
            kernels_[static_cast<std::size_t>(g)].name =
                this->name_ + "/g" + std::to_string(g) + "/w";
            kernels_[static_cast<std::size_t>(g)].is_kernel = true;
            kernels_[static_cast<std::size_t>(g)].value = Tensor<T>(
                wd, {Axis::Width, Axis::Height, Axis::Time, Axis::ChannelIn, Axis::ChannelOut});
            graphdetail::glorot_init(kernels_[static_cast<std::size_t>(g)].value, taps * cin,
                                     taps * cout, rng);
        }
        bias_.name = this->name_ + "/b";
        bias_.value = Tensor<T>({3, cout}, {Axis::Depth, Axis::ChannelOut});
    }

    void set_mode(Conv4dMode m) { mode_ = m; }

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        const Tensor<T>& x = *in[0];
        if (x.rank() != 5 || x.dim(2) != 3)
            throw ShapeError("grouped layer expects (X, Y, 3, T, C) input");
        std::array<Tensor<T>, 3> volumes = {take(x, 2, 0), take(x, 2, 1), take(x, 2, 2)};
        graphdetail::ConvGeometry geo;
        geo.bound = {0, 1, 2};
        geo.same = {1, 1, 1};

        std::vector<Tensor<T>> out_slices;
        for (int g = 0; g < 3; ++g) {
            const Tensor<T>& w = kernels_[static_cast<std::size_t>(g)].value;
            Tensor<T> acc;
            if (mode_ == Conv4dMode::Direct) {
                acc = direct_group(x, g);
            } else {
                bool first = true;
                for (int m = g - 1; m <= g + 1; ++m) {
                    if (m < 0 || m > 2) continue;
                    Tensor<T> c = graphdetail::mc_conv_forward(
                        volumes[static_cast<std::size_t>(m)], w, nullptr, geo);
                    if (first) {
                        acc = std::move(c);
                        first = false;
                    } else {
                        for (std::int64_t i = 0; i < acc.size(); ++i) acc[i] += c[i];
                    }
                }
            }
            for (std::int64_t i = 0; i < acc.size(); ++i)
                acc[i] += bias_.value[g * cout_ + i % cout_];
            out_slices.push_back(unsqueeze(acc, 2, Axis::Depth));
        }
        std::vector<const Tensor<T>*> parts;
        for (auto& s : out_slices) parts.push_back(&s);
        rs.acts[static_cast<std::size_t>(self)] = concat(parts, 2);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>& pgrads) const override {
        const Tensor<T>& x = *in[0];
        std::array<Tensor<T>, 3> volumes = {take(x, 2, 0), take(x, 2, 1), take(x, 2, 2)};
        std::array<Tensor<T>, 3> gvol;
        for (int m = 0; m < 3; ++m)
            gvol[static_cast<std::size_t>(m)] =
                Tensor<T>(volumes[static_cast<std::size_t>(m)].dims(),
                          volumes[static_cast<std::size_t>(m)].roles());
        graphdetail::ConvGeometry geo;
        geo.bound = {0, 1, 2};
        geo.same = {1, 1, 1};

        for (int g = 0; g < 3; ++g) {
            Tensor<T> gslice = take(gout, 2, g);
            // bias gradient: sum over all positions per output channel
            T* gb = pgrads[3]->data() + g * cout_;
            const T* gs = gslice.data();
            for (std::int64_t i = 0; i < gslice.size(); ++i) gb[i % cout_] += gs[i];
            for (int m = g - 1; m <= g + 1; ++m) {
                if (m < 0 || m > 2) continue;
                graphdetail::mc_conv_backward(volumes[static_cast<std::size_t>(m)],
                                              kernels_[static_cast<std::size_t>(g)].value, geo,
                                              gslice, &gvol[static_cast<std::size_t>(m)],
                                              pgrads[static_cast<std::size_t>(g)], nullptr);
            }
        }
        // Scatter the per-volume gradients back into the rank-5 input grad.
        Tensor<T>& gx = *gin[0];
        const std::int64_t nx = x.dim(0), ny = x.dim(1), nt = x.dim(3), nc = x.dim(4);
        for (int m = 0; m < 3; ++m) {
            const Tensor<T>& gv = gvol[static_cast<std::size_t>(m)];
            for (std::int64_t xx = 0; xx < nx; ++xx)
                for (std::int64_t yy = 0; yy < ny; ++yy) {
                    const std::int64_t src = ((xx * ny + yy) * nt) * nc;
                    const std::int64_t dst = (((xx * ny + yy) * 3 + m) * nt) * nc;
                    for (std::int64_t i = 0; i < nt * nc; ++i) gx[dst + i] += gv[src + i];
                }
        }
    }

    std::vector<Param<T>*> params() override {
        return {&kernels_[0], &kernels_[1], &kernels_[2], &bias_};
    }

private:
    // One group's output via the direct (non-decomposed) 4D convolution:
    // depth-replicated kernel, zero-padded depth, slice g of the result.
    Tensor<T> direct_group(const Tensor<T>& x, int g) const {
        const Tensor<T>& w = kernels_[static_cast<std::size_t>(g)].value;
        const std::int64_t kx = w.dim(0), ky = w.dim(1), kt = w.dim(2);
        Tensor<T> out;
        for (std::int64_t co = 0; co < cout_; ++co) {
            for (std::int64_t ci = 0; ci < cin_; ++ci) {
                // extract single-channel volume and rank-4 kernel
                Tensor<T> xc({x.dim(0), x.dim(1), 3, x.dim(3)},
                             {Axis::Width, Axis::Height, Axis::Depth, Axis::Time});
                for (std::int64_t i = 0; i < xc.size(); ++i) xc[i] = x[i * cin_ + ci];
                Tensor<T> k4({kx, ky, 3, kt},
                             {Axis::Width, Axis::Height, Axis::Depth, Axis::Time});
                for (std::int64_t a = 0; a < kx; ++a)
                    for (std::int64_t b = 0; b < ky; ++b)
                        for (std::int64_t z = 0; z < 3; ++z)
                            for (std::int64_t p = 0; p < kt; ++p)
                                k4.at({a, b, z, p}) = w.at({a, b, p, ci, co});
                Tensor<T> padded = pad(xc, {(kx - 1) / 2, (ky - 1) / 2, 1, (kt - 1) / 2},
                                       PadMode::Zero);
                Tensor<T> full = detail::conv_valid(padded, k4, {0, 1, 2, 3});
                Tensor<T> slice = take(full, 2, g);  // (X, Y, T)
                if (out.size() == 0) {
                    out = Tensor<T>({x.dim(0), x.dim(1), x.dim(3), cout_},
                                    {Axis::Width, Axis::Height, Axis::Time, Axis::Channel});
                }
                for (std::int64_t i = 0; i < slice.size(); ++i)
                    out[i * cout_ + co] += slice[i];
            }
        }
        return out;
    }

    Conv4dMode mode_;
    std::int64_t cin_, cout_;
    std::array<Param<T>, 3> kernels_;
    Param<T> bias_;
};

template <typename T>
class MaxPoolNode final : public Node<T> {
public:
    MaxPoolNode(std::string name, int arg, Shape pool_sizes)
        : Node<T>(std::move(name), {arg}), pool_(std::move(pool_sizes)) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        const Tensor<T>& x = *in[0];
        if (static_cast<int>(pool_.size()) != x.rank())
            throw ShapeError("pool size rank does not match input rank");
        Shape out_dims = x.dims();
        for (int k = 0; k < x.rank(); ++k) {
            if (x.dim(k) % pool_[static_cast<std::size_t>(k)] != 0)
                throw ShapeError("extent on axis " + std::string(axis_name(x.role(k))) +
                                 " is not divisible by pool size");
            out_dims[static_cast<std::size_t>(k)] /= pool_[static_cast<std::size_t>(k)];
        }
        Tensor<T> out(out_dims, x.roles());
        auto& argmax = rs.icache[static_cast<std::size_t>(self)];
        argmax.assign(static_cast<std::size_t>(out.size()), 0);

        const int r = x.rank();
        const Shape istr = x.strides();
        std::int64_t window = 1;
        for (auto p : pool_) window *= p;
        std::vector<std::int64_t> wd(static_cast<std::size_t>(window));
        {
            Shape wc(static_cast<std::size_t>(r), 0);
            for (std::int64_t wl = 0; wl < window; ++wl) {
                std::int64_t d = 0;
                for (int k = 0; k < r; ++k) d += wc[static_cast<std::size_t>(k)] * istr[static_cast<std::size_t>(k)];
                wd[static_cast<std::size_t>(wl)] = d;
                for (int k = r - 1; k >= 0; --k) {
                    if (++wc[static_cast<std::size_t>(k)] < pool_[static_cast<std::size_t>(k)]) break;
                    wc[static_cast<std::size_t>(k)] = 0;
                }
            }
        }
        Shape oc(static_cast<std::size_t>(r), 0);
        for (std::int64_t lin = 0; lin < out.size(); ++lin) {
            std::int64_t base = 0;
            for (int k = 0; k < r; ++k)
                base += oc[static_cast<std::size_t>(k)] * pool_[static_cast<std::size_t>(k)] *
                        istr[static_cast<std::size_t>(k)];
            // ties break to the lowest linear input index (wd is increasing)
            std::int64_t best_idx = base + wd[0];
            T best = x[best_idx];
            for (std::int64_t wl = 1; wl < window; ++wl) {
                const std::int64_t idx = base + wd[static_cast<std::size_t>(wl)];
                if (x[idx] > best) {
                    best = x[idx];
                    best_idx = idx;
                }
            }
            out[lin] = best;
            argmax[static_cast<std::size_t>(lin)] = best_idx;
            for (int k = r - 1; k >= 0; --k) {
                if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
                oc[static_cast<std::size_t>(k)] = 0;
            }
        }
        rs.acts[static_cast<std::size_t>(self)] = std::move(out);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>& rs,
                  int self, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const auto& argmax = rs.icache[static_cast<std::size_t>(self)];
        for (std::int64_t i = 0; i < gout.size(); ++i)
            (*gin[0])[argmax[static_cast<std::size_t>(i)]] += gout[i];
    }

private:
    Shape pool_;
};

template <typename T>
class Upsample2dNode final : public Node<T> {
public:
    Upsample2dNode(std::string name, int arg, std::int64_t factor)
        : Node<T>(std::move(name), {arg}), factor_(factor) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] = upsample2d(*in[0], factor_);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& x = *in[0];
        Tensor<T>& g = *gin[0];
        const int r = x.rank();
        Shape oc(static_cast<std::size_t>(r), 0);
        Shape ic(static_cast<std::size_t>(r));
        for (std::int64_t lin = 0; lin < gout.size(); ++lin) {
            for (int k = 0; k < r; ++k) {
                std::int64_t c = oc[static_cast<std::size_t>(k)];
                if (k == 0 || k == 1) c /= factor_;
                ic[static_cast<std::size_t>(k)] = c;
            }
            g[g.offset(ic)] += gout[lin];
            for (int k = r - 1; k >= 0; --k) {
                if (++oc[static_cast<std::size_t>(k)] < gout.dim(k)) break;
                oc[static_cast<std::size_t>(k)] = 0;
            }
        }
    }

private:
    std::int64_t factor_;
};

template <typename T>
class LeakyReluNode final : public Node<T> {
public:
    LeakyReluNode(std::string name, int arg, T alpha)
        : Node<T>(std::move(name), {arg}), alpha_(alpha) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] = leaky_relu(*in[0], alpha_);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& x = *in[0];
        for (std::int64_t i = 0; i < gout.size(); ++i)
            (*gin[0])[i] += (x[i] < T(0)) ? alpha_ * gout[i] : gout[i];
    }

private:
    T alpha_;
};

template <typename T>
class SigmoidNode final : public Node<T> {
public:
    SigmoidNode(std::string name, int arg) : Node<T>(std::move(name), {arg}) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        Tensor<T> out = *in[0];
        for (std::int64_t i = 0; i < out.size(); ++i)
            out[i] = T(1) / (T(1) + std::exp(-out[i]));
        rs.acts[static_cast<std::size_t>(self)] = std::move(out);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>& rs,
                  int self, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& s = rs.acts[static_cast<std::size_t>(self)];
        for (std::int64_t i = 0; i < gout.size(); ++i)
            (*gin[0])[i] += gout[i] * s[i] * (T(1) - s[i]);
    }
};

// Softmax over the trailing channel axis.
template <typename T>
class SoftmaxNode final : public Node<T> {
public:
    SoftmaxNode(std::string name, int arg) : Node<T>(std::move(name), {arg}) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] = softmax(*in[0], in[0]->rank() - 1);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>& rs,
                  int self, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& y = rs.acts[static_cast<std::size_t>(self)];
        const std::int64_t c = y.dim(y.rank() - 1);
        const std::int64_t positions = y.size() / c;
        for (std::int64_t p = 0; p < positions; ++p) {
            const T* yp = y.data() + p * c;
            const T* gp = gout.data() + p * c;
            T dot = T(0);
            for (std::int64_t k = 0; k < c; ++k) dot += gp[k] * yp[k];
            T* out = gin[0]->data() + p * c;
            for (std::int64_t k = 0; k < c; ++k) out[k] += yp[k] * (gp[k] - dot);
        }
    }
};

// Monte Carlo dropout: active while training and, when requested, at
// inference as well; survivors are scaled by 1/(1-rate). The mask stream is
// derived from (RunState seed, node id), so results do not depend on node
// execution order or thread partitioning.
template <typename T>
class DropoutNode final : public Node<T> {
public:
    DropoutNode(std::string name, int arg, double rate)
        : Node<T>(std::move(name), {arg}), rate_(rate) {
        if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    }

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        const Tensor<T>& x = *in[0];
        const bool active = rate_ > 0.0 && (rs.training || rs.mc_dropout);
        if (!active) {
            rs.acts[static_cast<std::size_t>(self)] = x;
            rs.cache[static_cast<std::size_t>(self)] = Tensor<T>();
            return;
        }
        Rng rng = Rng(rs.dropout_seed).fork(static_cast<std::uint64_t>(self), 0x9d0f);
        const T scale = static_cast<T>(1.0 / (1.0 - rate_));
        Tensor<T> mask(x.dims(), x.roles());
        Tensor<T> out(x.dims(), x.roles());
        for (std::int64_t i = 0; i < x.size(); ++i) {
            const T m = rng.uniform() < rate_ ? T(0) : scale;
            mask[i] = m;
            out[i] = x[i] * m;
        }
        rs.cache[static_cast<std::size_t>(self)] = std::move(mask);
        rs.acts[static_cast<std::size_t>(self)] = std::move(out);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>& rs,
                  int self, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& mask = rs.cache[static_cast<std::size_t>(self)];
        if (mask.size() == 0) {
            for (std::int64_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
            return;
        }
        for (std::int64_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i] * mask[i];
    }

private:
    double rate_;
};

template <typename T>
class ConcatNode final : public Node<T> {
public:
    ConcatNode(std::string name, std::vector<int> args, int axis)
        : Node<T>(std::move(name), std::move(args)), axis_(axis) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] = concat(in, axis_);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        Shape extents;
        for (const auto* t : in) extents.push_back(t->dim(axis_));
        auto pieces = split(gout, axis_, extents);
        for (std::size_t i = 0; i < pieces.size(); ++i)
            for (std::int64_t j = 0; j < pieces[i].size(); ++j) (*gin[i])[j] += pieces[i][j];
    }

private:
    int axis_;
};

template <typename T>
class AddNode final : public Node<T> {
public:
    AddNode(std::string name, int a, int b) : Node<T>(std::move(name), {a, b}) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        if (!in[0]->same_shape(*in[1])) throw ShapeError("add operands must share shape");
        Tensor<T> out = *in[0];
        for (std::int64_t i = 0; i < out.size(); ++i) out[i] += (*in[1])[i];
        rs.acts[static_cast<std::size_t>(self)] = std::move(out);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>&, int,
                  const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        for (std::int64_t i = 0; i < gout.size(); ++i) {
            (*gin[0])[i] += gout[i];
            (*gin[1])[i] += gout[i];
        }
    }
};

// Elementwise product of a single-channel coefficient field with a
// multi-channel tensor (attention application).
template <typename T>
class MulBroadcastNode final : public Node<T> {
public:
    MulBroadcastNode(std::string name, int coeff, int x)
        : Node<T>(std::move(name), {coeff, x}) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        const Tensor<T>& a = *in[0];
        const Tensor<T>& x = *in[1];
        const std::int64_t c = x.dim(x.rank() - 1);
        if (a.dim(a.rank() - 1) != 1 || a.size() != x.size() / c)
            throw ShapeError("broadcast multiply expects a single-channel coefficient field");
        Tensor<T> out(x.dims(), x.roles());
        for (std::int64_t p = 0; p < a.size(); ++p)
            for (std::int64_t k = 0; k < c; ++k) out[p * c + k] = a[p] * x[p * c + k];
        rs.acts[static_cast<std::size_t>(self)] = std::move(out);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>& in, RunState<T>&,
                  int, const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        const Tensor<T>& a = *in[0];
        const Tensor<T>& x = *in[1];
        const std::int64_t c = x.dim(x.rank() - 1);
        for (std::int64_t p = 0; p < a.size(); ++p) {
            T s = T(0);
            for (std::int64_t k = 0; k < c; ++k) {
                s += gout[p * c + k] * x[p * c + k];
                (*gin[1])[p * c + k] += gout[p * c + k] * a[p];
            }
            (*gin[0])[p] += s;
        }
    }
};

template <typename T>
class SqueezeNode final : public Node<T> {
public:
    SqueezeNode(std::string name, int arg, int axis)
        : Node<T>(std::move(name), {arg}), axis_(axis) {}

    void forward(const std::vector<const Tensor<T>*>& in, RunState<T>& rs, int self) const override {
        rs.acts[static_cast<std::size_t>(self)] = squeeze(*in[0], axis_);
    }

    void backward(const Tensor<T>& gout, const std::vector<const Tensor<T>*>&, RunState<T>&, int,
                  const std::vector<Tensor<T>*>& gin,
                  const std::vector<Tensor<T>*>&) const override {
        for (std::int64_t i = 0; i < gout.size(); ++i) (*gin[0])[i] += gout[i];
    }

private:
    int axis_;
};

template <typename T>
class Network {
public:
    int add(std::unique_ptr<Node<T>> node) {
        nodes_.push_back(std::move(node));
        dirty_ = true;
        return static_cast<int>(nodes_.size()) - 1;
    }

    int add_input(std::string name) {
        const int id = add(std::make_unique<InputNode<T>>(std::move(name)));
        input_ids_.push_back(id);
        return id;
    }

    void set_output(int id) { output_id_ = id; }
    int output_id() const { return output_id_; }
    const std::vector<int>& input_ids() const { return input_ids_; }
    std::size_t node_count() const { return nodes_.size(); }
    Node<T>& node(int id) { return *nodes_[static_cast<std::size_t>(id)]; }
    const Node<T>& node(int id) const { return *nodes_[static_cast<std::size_t>(id)]; }

    int find(const std::string& name) const {
        for (std::size_t i = 0; i < nodes_.size(); ++i)
            if (nodes_[i]->name() == name) return static_cast<int>(i);
        return -1;
    }

    const std::vector<Param<T>*>& params() const {
        refresh();
        return params_;
    }

    std::int64_t param_count() const {
        refresh();
        std::int64_t n = 0;
        for (auto* p : params_) n += p->value.size();
        return n;
    }

    const Tensor<T>& forward(std::vector<Tensor<T>> inputs, RunState<T>& rs) const {
        refresh();
        if (inputs.size() != input_ids_.size())
            throw ShapeError("expected " + std::to_string(input_ids_.size()) + " inputs, got " +
                             std::to_string(inputs.size()));
        rs.acts.assign(nodes_.size(), Tensor<T>());
        rs.cache.assign(nodes_.size(), Tensor<T>());
        rs.icache.assign(nodes_.size(), {});
        rs.grads.clear();
        for (std::size_t i = 0; i < inputs.size(); ++i)
            rs.acts[static_cast<std::size_t>(input_ids_[i])] = std::move(inputs[i]);
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            if (rs.acts[id].size() != 0) continue;  // inputs already placed
            std::vector<const Tensor<T>*> in;
            for (int a : nodes_[id]->args()) in.push_back(&rs.acts[static_cast<std::size_t>(a)]);
            nodes_[id]->forward(in, rs, static_cast<int>(id));
        }
        rs.forward_done = true;
        return rs.acts[static_cast<std::size_t>(output_id_)];
    }

    // Accumulates parameter gradients into `param_grads` (aligned with
    // params() order; allocated/zeroed here). Per-node output gradients are
    // left in rs.grads for inspection.
    void backward(const Tensor<T>& loss_grad, RunState<T>& rs,
                  std::vector<Tensor<T>>& param_grads) const {
        refresh();
        if (!rs.forward_done) throw StateError("backward called without a recorded forward pass");
        param_grads.assign(params_.size(), Tensor<T>());
        for (std::size_t i = 0; i < params_.size(); ++i)
            param_grads[i] = Tensor<T>(params_[i]->value.dims(), params_[i]->value.roles());

        rs.grads.assign(nodes_.size(), Tensor<T>());
        rs.grads[static_cast<std::size_t>(output_id_)] = loss_grad;
        for (int id = static_cast<int>(nodes_.size()) - 1; id >= 0; --id) {
            Tensor<T>& gout = rs.grads[static_cast<std::size_t>(id)];
            if (gout.size() == 0) continue;
            std::vector<const Tensor<T>*> in;
            std::vector<Tensor<T>*> gin;
            for (int a : nodes_[static_cast<std::size_t>(id)]->args()) {
                in.push_back(&rs.acts[static_cast<std::size_t>(a)]);
                Tensor<T>& slot = rs.grads[static_cast<std::size_t>(a)];
                if (slot.size() == 0)
                    slot = Tensor<T>(rs.acts[static_cast<std::size_t>(a)].dims(),
                                     rs.acts[static_cast<std::size_t>(a)].roles());
                gin.push_back(&slot);
            }
            std::vector<Tensor<T>*> pg;
            const auto range = param_slots_[static_cast<std::size_t>(id)];
            for (int s = range.first; s < range.second; ++s) pg.push_back(&param_grads[static_cast<std::size_t>(s)]);
            nodes_[static_cast<std::size_t>(id)]->backward(gout, in, rs, id, gin, pg);
        }
    }

private:
    void refresh() const {
        if (!dirty_) return;
        params_.clear();
        param_slots_.assign(nodes_.size(), {0, 0});
        for (std::size_t id = 0; id < nodes_.size(); ++id) {
            const int first = static_cast<int>(params_.size());
            for (Param<T>* p : const_cast<Node<T>*>(nodes_[id].get())->params()) params_.push_back(p);
            param_slots_[id] = {first, static_cast<int>(params_.size())};
        }
        dirty_ = false;
    }

    std::vector<std::unique_ptr<Node<T>>> nodes_;
    std::vector<int> input_ids_;
    int output_id_ = -1;
    mutable bool dirty_ = true;
    mutable std::vector<Param<T>*> params_;
    mutable std::vector<std::pair<int, int>> param_slots_;
};

// Standalone Monte Carlo dropout over a tensor; the op the dropout node
// wraps.
template <typename T>
Tensor<T> mc_dropout(const Tensor<T>& x, double rate, Rng& rng, bool enabled) {
    if (rate < 0.0 || rate >= 1.0) throw ConfigError("dropout rate must lie in [0, 1)");
    if (!enabled || rate == 0.0) return x;
    Tensor<T> out = x;
    const T scale = static_cast<T>(1.0 / (1.0 - rate));
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = rng.uniform() < rate ? T(0) : out[i] * scale;
    return out;
}

}  // namespace ctpseg
