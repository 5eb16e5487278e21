#pragma once

#include <array>
#include <cmath>
#include <vector>

#include "ctpseg/tensor.hpp"

namespace ctpseg {

enum class Padding { Valid, Same };

// Which input axis the third axis of a rank-3 kernel binds to when the
// input is rank-4: a (w,h,d) kernel slides over depth, a (w,h,p) kernel
// over time.
enum class KernelBinding { SpatialDepth, Temporal };

struct ConvOptions {
    Padding padding = Padding::Valid;
    KernelBinding binding = KernelBinding::SpatialDepth;
};

enum class Conv4dMode { Direct, Decomposed };

// Convolution kernel with derived half-widths floor((k-1)/2).
template <typename T>
struct KernelSpec {
    Tensor<T> weights;

    explicit KernelSpec(Tensor<T> w) : weights(std::move(w)) {}
    int rank() const { return weights.rank(); }
    std::int64_t extent(int j) const { return weights.dim(j); }
    std::int64_t half_width(int j) const { return (weights.dim(j) - 1) / 2; }
};

// Copy out the sub-tensor at `index` along `axis`, dropping that axis.
template <typename T>
Tensor<T> take(const Tensor<T>& t, int axis, std::int64_t index) {
    if (axis < 0 || axis >= t.rank() || index < 0 || index >= t.dim(axis))
        throw BoundsError("take index " + std::to_string(index) + " out of range on axis " +
                          std::to_string(axis));
    std::int64_t outer = 1, inner = 1;
    for (int k = 0; k < axis; ++k) outer *= t.dim(k);
    for (int k = axis + 1; k < t.rank(); ++k) inner *= t.dim(k);
    Shape d;
    AxisRoles r;
    for (int k = 0; k < t.rank(); ++k) {
        if (k == axis) continue;
        d.push_back(t.dim(k));
        r.push_back(t.role(k));
    }
    Tensor<T> out(std::move(d), std::move(r));
    for (std::int64_t o = 0; o < outer; ++o) {
        const T* src = t.data() + (o * t.dim(axis) + index) * inner;
        std::copy(src, src + inner, out.data() + o * inner);
    }
    return out;
}

namespace detail {

// Valid-mode convolution core with kernel flip:
//   out(o, ...) = sum_i H(i) * I(o + k - 1 - i, ...)
// Kernel axis j binds to input axis bind[j]; unbound input axes broadcast
// (the operation is applied independently along them).
template <typename T>
Tensor<T> conv_valid(const Tensor<T>& in, const Tensor<T>& ker, const std::vector<int>& bind) {
    const int r = in.rank();
    const int kr = ker.rank();
    if (static_cast<int>(bind.size()) != kr)
        throw ConfigError("kernel axis binding count does not match kernel rank");
    std::vector<char> used(static_cast<std::size_t>(r), 0);
    for (int j = 0; j < kr; ++j) {
        if (bind[static_cast<std::size_t>(j)] < 0 || bind[static_cast<std::size_t>(j)] >= r)
            throw ConfigError("kernel axis binding out of input range");
        if (used[static_cast<std::size_t>(bind[static_cast<std::size_t>(j)])]++)
            throw ConfigError("kernel axis bound to the same input axis twice");
    }

    Shape out_dims = in.dims();
    for (int j = 0; j < kr; ++j) {
        std::int64_t o = in.dim(bind[static_cast<std::size_t>(j)]) - ker.dim(j) + 1;
        if (o < 1)
            throw ShapeError("kernel extent " + std::to_string(ker.dim(j)) +
                             " exceeds input extent " +
                             std::to_string(in.dim(bind[static_cast<std::size_t>(j)])) +
                             " on axis " + axis_name(in.role(bind[static_cast<std::size_t>(j)])));
        out_dims[static_cast<std::size_t>(bind[static_cast<std::size_t>(j)])] = o;
    }
    Tensor<T> out(out_dims, in.roles());

    const Shape istr = in.strides();
    // Input-offset delta of each kernel tap relative to the tap at index 0.
    const std::int64_t kn = ker.size();
    std::vector<std::int64_t> tap_delta(static_cast<std::size_t>(kn));
    {
        Shape kc(static_cast<std::size_t>(kr), 0);
        for (std::int64_t kl = 0; kl < kn; ++kl) {
            std::int64_t d = 0;
            for (int j = 0; j < kr; ++j)
                d += kc[static_cast<std::size_t>(j)] *
                     istr[static_cast<std::size_t>(bind[static_cast<std::size_t>(j)])];
            tap_delta[static_cast<std::size_t>(kl)] = d;
            for (int j = kr - 1; j >= 0; --j) {
                if (++kc[static_cast<std::size_t>(j)] < ker.dim(j)) break;
                kc[static_cast<std::size_t>(j)] = 0;
            }
        }
    }

    Shape oc(static_cast<std::size_t>(r), 0);
    const std::int64_t n = out.size();
    const T* kw = ker.data();
    const T* src = in.data();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t base = 0;
        for (int k = 0; k < r; ++k) base += oc[static_cast<std::size_t>(k)] * istr[static_cast<std::size_t>(k)];
        for (int j = 0; j < kr; ++j)
            base += (ker.dim(j) - 1) * istr[static_cast<std::size_t>(bind[static_cast<std::size_t>(j)])];
        T acc = T(0);
        for (std::int64_t kl = 0; kl < kn; ++kl)
            acc += kw[kl] * src[base - tap_delta[static_cast<std::size_t>(kl)]];
        out[lin] = acc;
        for (int k = r - 1; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }
    return out;
}

template <typename T>
Tensor<T> conv_nd(const Tensor<T>& in, const Tensor<T>& ker, const std::vector<int>& bind,
                  Padding padding) {
    if (padding == Padding::Valid) return conv_valid(in, ker, bind);
    // Same mode: centered zero padding requires odd kernel extents.
    Shape amounts(static_cast<std::size_t>(in.rank()), 0);
    for (int j = 0; j < ker.rank(); ++j) {
        if (ker.dim(j) % 2 == 0)
            throw ConfigError("same-padding requires odd kernel extents, got " +
                              std::to_string(ker.dim(j)));
        amounts[static_cast<std::size_t>(bind[static_cast<std::size_t>(j)])] = (ker.dim(j) - 1) / 2;
    }
    return conv_valid(pad(in, amounts, PadMode::Zero), ker, bind);
}

}  // namespace detail

// 2D convolution. Rank-2 input convolves directly; rank-3 input is treated
// as a stack of 2D slices along its third axis, which passes through
// unchanged.
template <typename T>
Tensor<T> conv2d(const Tensor<T>& in, const KernelSpec<T>& kernel, const ConvOptions& opts = {}) {
    if (kernel.rank() != 2) throw ConfigError("conv2d requires a rank-2 kernel");
    if (in.rank() != 2 && in.rank() != 3)
        throw ShapeError("conv2d input must be rank 2 or 3, got rank " + std::to_string(in.rank()));
    return detail::conv_nd(in, kernel.weights, {0, 1}, opts.padding);
}

// 3D convolution. Rank-3 input convolves over all axes. Rank-4 input:
// a (w,h,d) kernel is applied independently at each time point, a (w,h,p)
// kernel independently at each depth slice, per opts.binding.
template <typename T>
Tensor<T> conv3d(const Tensor<T>& in, const KernelSpec<T>& kernel, const ConvOptions& opts = {}) {
    if (kernel.rank() != 3) throw ConfigError("conv3d requires a rank-3 kernel");
    if (in.rank() == 3) return detail::conv_nd(in, kernel.weights, {0, 1, 2}, opts.padding);
    if (in.rank() != 4)
        throw ShapeError("conv3d input must be rank 3 or 4, got rank " + std::to_string(in.rank()));
    if (opts.binding == KernelBinding::SpatialDepth)
        return detail::conv_nd(in, kernel.weights, {0, 1, 2}, opts.padding);
    return detail::conv_nd(in, kernel.weights, {0, 1, 3}, opts.padding);
}

// True non-separable 4D convolution of a rank-4 input with a rank-4 kernel.
// Direct mode evaluates the quadruple sum; decomposed mode evaluates the
// same operation as a sum of 3D convolutions of 2D+time sub-kernels over
// shifted depth slices. Both agree elementwise.
template <typename T>
Tensor<T> conv4d(const Tensor<T>& in, const KernelSpec<T>& kernel,
                 Conv4dMode mode = Conv4dMode::Decomposed, const ConvOptions& opts = {}) {
    if (kernel.rank() != 4) throw ConfigError("conv4d requires a rank-4 kernel");
    if (in.rank() != 4)
        throw ShapeError("conv4d input must be rank 4, got rank " + std::to_string(in.rank()));
    if (mode == Conv4dMode::Direct)
        return detail::conv_nd(in, kernel.weights, {0, 1, 2, 3}, opts.padding);

    // Decomposed path. Work on the padded tensor so both modes share the
    // same boundary semantics, then sum per-depth-slice 3D convolutions.
    Tensor<T> src = in;
    if (opts.padding == Padding::Same) {
        Shape amounts(4, 0);
        for (int j = 0; j < 4; ++j) {
            if (kernel.extent(j) % 2 == 0)
                throw ConfigError("same-padding requires odd kernel extents, got " +
                                  std::to_string(kernel.extent(j)));
            amounts[static_cast<std::size_t>(j)] = kernel.half_width(j);
        }
        src = pad(in, amounts, PadMode::Zero);
    }
    const std::int64_t d = kernel.extent(2);
    const std::int64_t out_z = src.dim(2) - d + 1;
    if (out_z < 1)
        throw ShapeError("kernel depth " + std::to_string(d) + " exceeds input depth " +
                         std::to_string(src.dim(2)));

    Tensor<T> out;  // assembled from per-slice accumulations
    std::vector<Tensor<T>> slices;
    slices.reserve(static_cast<std::size_t>(out_z));
    for (std::int64_t oz = 0; oz < out_z; ++oz) {
        Tensor<T> acc;
        for (std::int64_t k = 0; k < d; ++k) {
            // Output slice oz draws on input slice oz + (d-1) - k.
            Tensor<T> volume = take(src, 2, oz + d - 1 - k);      // (X, Y, T)
            Tensor<T> sub = take(kernel.weights, 2, k);           // (w, h, p)
            Tensor<T> g3 = detail::conv_valid(volume, sub, {0, 1, 2});
            if (k == 0) {
                acc = std::move(g3);
            } else {
                for (std::int64_t i = 0; i < acc.size(); ++i) acc[i] += g3[i];
            }
        }
        slices.push_back(unsqueeze(acc, 2, Axis::Depth));
    }
    std::vector<const Tensor<T>*> parts;
    for (const auto& s : slices) parts.push_back(&s);
    out = concat(parts, 2);
    return out;
}

// The grouped spatio-temporal layer: the input stacks three 2D+time volumes
// along depth; each depth group owns one shared 2D+time kernel that is
// applied to every legal neighbouring volume (term truncation at the
// edges), the per-group results are summed, and the three group outputs are
// stacked along depth so the output keeps depth extent 3.
template <typename T>
Tensor<T> grouped_conv4d_layer(const Tensor<T>& in, const std::array<Tensor<T>, 3>& group_kernels,
                               const ConvOptions& opts = {},
                               Conv4dMode mode = Conv4dMode::Decomposed) {
    if (in.rank() != 4)
        throw ShapeError("grouped layer input must be rank 4, got rank " + std::to_string(in.rank()));
    if (in.dim(2) != 3)
        throw ShapeError("grouped layer requires depth extent 3, got " + std::to_string(in.dim(2)));
    for (const auto& k : group_kernels) {
        if (k.rank() != 3) throw ConfigError("group kernels must be rank 3 (w, h, p)");
        if (!k.same_shape(group_kernels[0]))
            throw ConfigError("group kernels must share extents");
    }

    std::vector<Tensor<T>> group_out;
    for (int g = 0; g < 3; ++g) {
        if (mode == Conv4dMode::Direct) {
            // Oracle route: replicate the group kernel along depth into a
            // rank-4 kernel, run a direct 4D convolution with the depth
            // axis zero padded, and keep the slice at the group position.
            const Tensor<T>& k3 = group_kernels[static_cast<std::size_t>(g)];
            Shape kd = {k3.dim(0), k3.dim(1), 3, k3.dim(2)};
            Tensor<T> k4(kd, {Axis::Width, Axis::Height, Axis::Depth, Axis::Time});
            for (std::int64_t w = 0; w < k3.dim(0); ++w)
                for (std::int64_t h = 0; h < k3.dim(1); ++h)
                    for (std::int64_t z = 0; z < 3; ++z)
                        for (std::int64_t p = 0; p < k3.dim(2); ++p)
                            k4.at({w, h, z, p}) = k3.at({w, h, p});
            Tensor<T> padded = pad(in, {0, 0, 1, 0}, PadMode::Zero);
            ConvOptions sub = opts;
            Tensor<T> full;
            if (opts.padding == Padding::Same) {
                Shape amounts = {(k3.dim(0) - 1) / 2, (k3.dim(1) - 1) / 2, 0, (k3.dim(2) - 1) / 2};
                for (int j : {0, 1, 2})
                    if (group_kernels[0].dim(j) % 2 == 0)
                        throw ConfigError("same-padding requires odd kernel extents");
                padded = pad(padded, amounts, PadMode::Zero);
            }
            full = detail::conv_valid(padded, k4, {0, 1, 2, 3});
            group_out.push_back(unsqueeze(take(full, 2, g), 2, Axis::Depth));
            continue;
        }
        // Production route: sum of 3D convolutions over the legal volumes.
        Tensor<T> acc;
        bool first = true;
        for (int m = g - 1; m <= g + 1; ++m) {
            if (m < 0 || m > 2) continue;
            Tensor<T> volume = take(in, 2, m);  // (X, Y, T)
            Tensor<T> g3 = detail::conv_nd(volume, group_kernels[static_cast<std::size_t>(g)],
                                           {0, 1, 2}, opts.padding);
            if (first) {
                acc = std::move(g3);
                first = false;
            } else {
                for (std::int64_t i = 0; i < acc.size(); ++i) acc[i] += g3[i];
            }
        }
        group_out.push_back(unsqueeze(acc, 2, Axis::Depth));
    }
    std::vector<const Tensor<T>*> parts;
    for (const auto& s : group_out) parts.push_back(&s);
    return concat(parts, 2);
}

// Max pooling with per-axis window sizes; pooled extents must divide evenly.
template <typename T>
Tensor<T> maxpool(const Tensor<T>& in, const Shape& pool_sizes) {
    if (static_cast<int>(pool_sizes.size()) != in.rank())
        throw ShapeError("pool size rank does not match input rank");
    Shape out_dims = in.dims();
    for (int k = 0; k < in.rank(); ++k) {
        std::int64_t p = pool_sizes[static_cast<std::size_t>(k)];
        if (p < 1) throw ShapeError("pool size must be >= 1");
        if (in.dim(k) % p != 0)
            throw ShapeError("extent " + std::to_string(in.dim(k)) + " on axis " +
                             axis_name(in.role(k)) + " is not divisible by pool size " +
                             std::to_string(p));
        out_dims[static_cast<std::size_t>(k)] /= p;
    }
    Tensor<T> out(out_dims, in.roles());
    const int r = in.rank();
    const Shape istr = in.strides();

    std::int64_t window = 1;
    for (auto p : pool_sizes) window *= p;
    std::vector<std::int64_t> win_delta(static_cast<std::size_t>(window));
    {
        Shape wc(static_cast<std::size_t>(r), 0);
        for (std::int64_t wl = 0; wl < window; ++wl) {
            std::int64_t d = 0;
            for (int k = 0; k < r; ++k) d += wc[static_cast<std::size_t>(k)] * istr[static_cast<std::size_t>(k)];
            win_delta[static_cast<std::size_t>(wl)] = d;
            for (int k = r - 1; k >= 0; --k) {
                if (++wc[static_cast<std::size_t>(k)] < pool_sizes[static_cast<std::size_t>(k)]) break;
                wc[static_cast<std::size_t>(k)] = 0;
            }
        }
    }

    Shape oc(static_cast<std::size_t>(r), 0);
    const std::int64_t n = out.size();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        std::int64_t base = 0;
        for (int k = 0; k < r; ++k)
            base += oc[static_cast<std::size_t>(k)] * pool_sizes[static_cast<std::size_t>(k)] *
                    istr[static_cast<std::size_t>(k)];
        T best = in[base + win_delta[0]];
        for (std::int64_t wl = 1; wl < window; ++wl) {
            T v = in[base + win_delta[static_cast<std::size_t>(wl)]];
            if (v > best) best = v;
        }
        out[lin] = best;
        for (int k = r - 1; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }
    return out;
}

// Nearest-neighbour upsampling of the width and height axes.
template <typename T>
Tensor<T> upsample2d(const Tensor<T>& in, std::int64_t factor) {
    if (factor < 1) throw ConfigError("upsample factor must be >= 1");
    int ax = in.axis_of(Axis::Width);
    int ay = in.axis_of(Axis::Height);
    if (ax < 0) ax = 0;
    if (ay < 0) ay = 1;
    if (in.rank() < 2) throw ShapeError("upsample2d requires rank >= 2");

    Shape out_dims = in.dims();
    out_dims[static_cast<std::size_t>(ax)] *= factor;
    out_dims[static_cast<std::size_t>(ay)] *= factor;
    Tensor<T> out(out_dims, in.roles());

    const int r = in.rank();
    Shape oc(static_cast<std::size_t>(r), 0);
    Shape ic(static_cast<std::size_t>(r));
    const std::int64_t n = out.size();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        for (int k = 0; k < r; ++k) {
            std::int64_t c = oc[static_cast<std::size_t>(k)];
            if (k == ax || k == ay) c /= factor;
            ic[static_cast<std::size_t>(k)] = c;
        }
        out[lin] = in[in.offset(ic)];
        for (int k = r - 1; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }
    return out;
}

template <typename T>
Tensor<T> leaky_relu(const Tensor<T>& in, T alpha) {
    Tensor<T> out = in;
    for (std::int64_t i = 0; i < out.size(); ++i)
        if (out[i] < T(0)) out[i] *= alpha;
    return out;
}

// Softmax along `channel_axis`; per-position channel vectors map to
// positive values summing to 1.
template <typename T>
Tensor<T> softmax(const Tensor<T>& in, int channel_axis) {
    if (channel_axis < 0 || channel_axis >= in.rank())
        throw ConfigError("softmax channel axis out of range");
    const std::int64_t c = in.dim(channel_axis);
    std::int64_t outer = 1, inner = 1;
    for (int k = 0; k < channel_axis; ++k) outer *= in.dim(k);
    for (int k = channel_axis + 1; k < in.rank(); ++k) inner *= in.dim(k);

    Tensor<T> out = in;
    for (std::int64_t o = 0; o < outer; ++o) {
        for (std::int64_t i = 0; i < inner; ++i) {
            T* base = out.data() + o * c * inner + i;
            T mx = base[0];
            for (std::int64_t k = 1; k < c; ++k) mx = std::max(mx, base[k * inner]);
            T sum = T(0);
            for (std::int64_t k = 0; k < c; ++k) {
                T e = std::exp(base[k * inner] - mx);
                base[k * inner] = e;
                sum += e;
            }
            for (std::int64_t k = 0; k < c; ++k) base[k * inner] /= sum;
        }
    }
    return out;
}

}  // namespace ctpseg
