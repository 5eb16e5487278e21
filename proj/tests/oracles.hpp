#pragma once

// Independent brute-force references used by the test suites. These follow
// the defining sums directly (nested loops over kernel taps, all-pairs
// distance scans) and deliberately share no code with the library paths
// they check.

#include <cmath>
#include <limits>
#include <vector>

#include "ctpseg/rng.hpp"
#include "ctpseg/tensor.hpp"

namespace oracle {

using ctpseg::Axis;
using ctpseg::Shape;
using ctpseg::Tensor;

inline std::int64_t half(std::int64_t k) { return (k - 1) / 2; }

// out(x,y) = sum_i sum_j H(i,j) I(x + hw - i, y + hh - j), valid range only.
inline Tensor<double> conv2d_valid(const Tensor<double>& in, const Tensor<double>& ker) {
    const std::int64_t W = in.dim(0), H = in.dim(1);
    const std::int64_t kw = ker.dim(0), kh = ker.dim(1);
    const std::int64_t hw = half(kw), hh = half(kh);
    Tensor<double> out({W - kw + 1, H - kh + 1}, in.roles());
    for (std::int64_t ox = 0; ox < W - kw + 1; ++ox)
        for (std::int64_t oy = 0; oy < H - kh + 1; ++oy) {
            const std::int64_t x = ox + (kw - 1 - hw), y = oy + (kh - 1 - hh);
            double acc = 0.0;
            for (std::int64_t i = 0; i < kw; ++i)
                for (std::int64_t j = 0; j < kh; ++j)
                    acc += ker.at({i, j}) * in.at({x + hw - i, y + hh - j});
            out.at({ox, oy}) = acc;
        }
    return out;
}

inline Tensor<double> conv3d_valid(const Tensor<double>& in, const Tensor<double>& ker) {
    const std::int64_t W = in.dim(0), H = in.dim(1), D = in.dim(2);
    const std::int64_t kw = ker.dim(0), kh = ker.dim(1), kd = ker.dim(2);
    const std::int64_t hw = half(kw), hh = half(kh), hd = half(kd);
    Tensor<double> out({W - kw + 1, H - kh + 1, D - kd + 1}, in.roles());
    for (std::int64_t ox = 0; ox < out.dim(0); ++ox)
        for (std::int64_t oy = 0; oy < out.dim(1); ++oy)
            for (std::int64_t oz = 0; oz < out.dim(2); ++oz) {
                const std::int64_t x = ox + (kw - 1 - hw), y = oy + (kh - 1 - hh),
                                   z = oz + (kd - 1 - hd);
                double acc = 0.0;
                for (std::int64_t k = 0; k < kd; ++k)
                    for (std::int64_t i = 0; i < kw; ++i)
                        for (std::int64_t j = 0; j < kh; ++j)
                            acc += ker.at({i, j, k}) * in.at({x + hw - i, y + hh - j, z + hd - k});
                out.at({ox, oy, oz}) = acc;
            }
    return out;
}

// Direct quadruple sum: out = sum_l sum_k sum_i sum_j H(i,j,k,l) I(~x,~y,~z,~t).
inline Tensor<double> conv4d_valid(const Tensor<double>& in, const Tensor<double>& ker) {
    const std::int64_t W = in.dim(0), H = in.dim(1), D = in.dim(2), P = in.dim(3);
    const std::int64_t kw = ker.dim(0), kh = ker.dim(1), kd = ker.dim(2), kp = ker.dim(3);
    const std::int64_t hw = half(kw), hh = half(kh), hd = half(kd), hp = half(kp);
    Tensor<double> out({W - kw + 1, H - kh + 1, D - kd + 1, P - kp + 1}, in.roles());
    for (std::int64_t ox = 0; ox < out.dim(0); ++ox)
        for (std::int64_t oy = 0; oy < out.dim(1); ++oy)
            for (std::int64_t oz = 0; oz < out.dim(2); ++oz)
                for (std::int64_t ot = 0; ot < out.dim(3); ++ot) {
                    const std::int64_t x = ox + (kw - 1 - hw), y = oy + (kh - 1 - hh),
                                       z = oz + (kd - 1 - hd), t = ot + (kp - 1 - hp);
                    double acc = 0.0;
                    for (std::int64_t l = 0; l < kp; ++l)
                        for (std::int64_t k = 0; k < kd; ++k)
                            for (std::int64_t i = 0; i < kw; ++i)
                                for (std::int64_t j = 0; j < kh; ++j)
                                    acc += ker.at({i, j, k, l}) *
                                           in.at({x + hw - i, y + hh - j, z + hd - k, t + hp - l});
                    out.at({ox, oy, oz, ot}) = acc;
                }
    return out;
}

template <typename T>
Tensor<T> random_tensor(const Shape& dims, const ctpseg::AxisRoles& roles, ctpseg::Rng& rng,
                        double lo = -1.0, double hi = 1.0) {
    Tensor<T> t(dims, roles);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = static_cast<T>(rng.uniform(lo, hi));
    return t;
}

inline double max_abs_diff(const Tensor<double>& a, const Tensor<double>& b) {
    double m = 0.0;
    for (std::int64_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

// All-pairs symmetric Hausdorff distance between two 2D point sets under
// isotropic spacing.
inline double hausdorff_bruteforce_2d(const std::vector<std::pair<std::int64_t, std::int64_t>>& a,
                                      const std::vector<std::pair<std::int64_t, std::int64_t>>& b,
                                      double spacing) {
    auto directed = [&](const auto& from, const auto& to) {
        double worst = 0.0;
        for (const auto& p : from) {
            double best = std::numeric_limits<double>::infinity();
            for (const auto& q : to) {
                const double dx = static_cast<double>(p.first - q.first);
                const double dy = static_cast<double>(p.second - q.second);
                best = std::min(best, std::sqrt(dx * dx + dy * dy));
            }
            worst = std::max(worst, best);
        }
        return worst;
    };
    return std::max(directed(a, b), directed(b, a)) * spacing;
}

}  // namespace oracle
