#pragma once

#include <cmath>
#include <deque>
#include <vector>

#include "ctpseg/study.hpp"

namespace ctpseg {

// Preprocessing chain over a 4D study. Stage order is fixed:
// HU conversion -> brain mask -> extraction (zero outside) -> enhancement
// (min-max, optional histogram equalization, optional gamma) -> optional
// z-score -> optional temporal resampling. Each optional stage can be
// toggled independently.

// V * RS + RI, elementwise.
template <typename T>
Tensor<T> hu_convert(const Tensor<T>& raw, const VolumeMeta& meta) {
    if (!std::isfinite(meta.rescale_slope) || !std::isfinite(meta.rescale_intercept))
        throw ConfigError("rescale slope/intercept must be finite");
    Tensor<T> out = raw;
    const T rs = static_cast<T>(meta.rescale_slope);
    const T ri = static_cast<T>(meta.rescale_intercept);
    for (std::int64_t i = 0; i < out.size(); ++i) out[i] = out[i] * rs + ri;
    return out;
}

inline constexpr double kBrainWindowLowHu = 0.0;
inline constexpr double kBrainWindowHighHu = 100.0;

namespace predetail {

// Largest 26-connected foreground component.
inline void keep_largest_component(std::vector<char>& fg, std::int64_t nx, std::int64_t ny,
                                   std::int64_t nz) {
    std::vector<std::int32_t> label(fg.size(), -1);
    std::int32_t next = 0;
    std::int64_t best_size = 0;
    std::int32_t best_label = -1;
    std::deque<std::int64_t> queue;
    auto idx = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return (x * ny + y) * nz + z; };
    for (std::int64_t x = 0; x < nx; ++x)
        for (std::int64_t y = 0; y < ny; ++y)
            for (std::int64_t z = 0; z < nz; ++z) {
                const std::int64_t s = idx(x, y, z);
                if (!fg[static_cast<std::size_t>(s)] || label[static_cast<std::size_t>(s)] >= 0)
                    continue;
                std::int64_t size = 0;
                label[static_cast<std::size_t>(s)] = next;
                queue.push_back(s);
                while (!queue.empty()) {
                    const std::int64_t cur = queue.front();
                    queue.pop_front();
                    ++size;
                    const std::int64_t cz = cur % nz;
                    const std::int64_t cy = (cur / nz) % ny;
                    const std::int64_t cx = cur / (ny * nz);
                    for (std::int64_t dx = -1; dx <= 1; ++dx)
                        for (std::int64_t dy = -1; dy <= 1; ++dy)
                            for (std::int64_t dz = -1; dz <= 1; ++dz) {
                                if (!dx && !dy && !dz) continue;
                                const std::int64_t mx = cx + dx, my = cy + dy, mz = cz + dz;
                                if (mx < 0 || my < 0 || mz < 0 || mx >= nx || my >= ny || mz >= nz)
                                    continue;
                                const std::int64_t m = idx(mx, my, mz);
                                if (!fg[static_cast<std::size_t>(m)] ||
                                    label[static_cast<std::size_t>(m)] >= 0)
                                    continue;
                                label[static_cast<std::size_t>(m)] = next;
                                queue.push_back(m);
                            }
                }
                if (size > best_size) {
                    best_size = size;
                    best_label = next;
                }
                ++next;
            }
    for (std::size_t i = 0; i < fg.size(); ++i) fg[i] = label[i] == best_label;
}

// Fill interior cavities: background 6-connected flood from the border;
// anything unreachable becomes foreground.
inline void fill_holes(std::vector<char>& fg, std::int64_t nx, std::int64_t ny, std::int64_t nz) {
    std::vector<char> outside(fg.size(), 0);
    std::deque<std::int64_t> queue;
    auto idx = [&](std::int64_t x, std::int64_t y, std::int64_t z) { return (x * ny + y) * nz + z; };
    auto seed = [&](std::int64_t x, std::int64_t y, std::int64_t z) {
        const std::int64_t s = idx(x, y, z);
        if (!fg[static_cast<std::size_t>(s)] && !outside[static_cast<std::size_t>(s)]) {
            outside[static_cast<std::size_t>(s)] = 1;
            queue.push_back(s);
        }
    };
    for (std::int64_t x = 0; x < nx; ++x)
        for (std::int64_t y = 0; y < ny; ++y) {
            seed(x, y, 0);
            seed(x, y, nz - 1);
        }
    for (std::int64_t x = 0; x < nx; ++x)
        for (std::int64_t z = 0; z < nz; ++z) {
            seed(x, 0, z);
            seed(x, ny - 1, z);
        }
    for (std::int64_t y = 0; y < ny; ++y)
        for (std::int64_t z = 0; z < nz; ++z) {
            seed(0, y, z);
            seed(nx - 1, y, z);
        }
    const std::int64_t steps[6][3] = {{1, 0, 0}, {-1, 0, 0}, {0, 1, 0},
                                      {0, -1, 0}, {0, 0, 1}, {0, 0, -1}};
    while (!queue.empty()) {
        const std::int64_t cur = queue.front();
        queue.pop_front();
        const std::int64_t cz = cur % nz;
        const std::int64_t cy = (cur / nz) % ny;
        const std::int64_t cx = cur / (ny * nz);
        for (const auto& st : steps) {
            const std::int64_t mx = cx + st[0], my = cy + st[1], mz = cz + st[2];
            if (mx < 0 || my < 0 || mz < 0 || mx >= nx || my >= ny || mz >= nz) continue;
            const std::int64_t m = idx(mx, my, mz);
            if (fg[static_cast<std::size_t>(m)] || outside[static_cast<std::size_t>(m)]) continue;
            outside[static_cast<std::size_t>(m)] = 1;
            queue.push_back(m);
        }
    }
    for (std::size_t i = 0; i < fg.size(); ++i)
        if (!fg[i] && !outside[i]) fg[i] = 1;
}

}  // namespace predetail

// Brain mask from an HU volume: voxels inside [0, 100] HU (rank-4 inputs
// are reduced by their temporal mean first), largest 3D connected
// component, holes filled. Deterministic.
template <typename T>
Tensor<std::uint8_t> brain_mask(const Tensor<T>& hu) {
    if (hu.rank() != 3 && hu.rank() != 4)
        throw ShapeError("brain_mask expects a rank-3 volume or rank-4 study");
    const std::int64_t nx = hu.dim(0), ny = hu.dim(1), nz = hu.dim(2);
    const std::int64_t nt = hu.rank() == 4 ? hu.dim(3) : 1;

    std::vector<char> fg(static_cast<std::size_t>(nx * ny * nz), 0);
    std::int64_t count = 0;
    for (std::int64_t v = 0; v < nx * ny * nz; ++v) {
        double mean = 0.0;
        for (std::int64_t t = 0; t < nt; ++t) mean += static_cast<double>(hu[v * nt + t]);
        mean /= static_cast<double>(nt);
        if (mean >= kBrainWindowLowHu && mean <= kBrainWindowHighHu) {
            fg[static_cast<std::size_t>(v)] = 1;
            ++count;
        }
    }
    if (count == 0) throw DataError("no brain tissue in HU window");
    predetail::keep_largest_component(fg, nx, ny, nz);
    predetail::fill_holes(fg, nx, ny, nz);

    Tensor<std::uint8_t> mask({nx, ny, nz}, {Axis::Width, Axis::Height, Axis::Depth});
    for (std::int64_t i = 0; i < mask.size(); ++i) mask[i] = fg[static_cast<std::size_t>(i)];
    return mask;
}

// Zero everything outside the brain mask ("extraction").
template <typename T>
Tensor<T> apply_mask(const Tensor<T>& volume, const Tensor<std::uint8_t>& mask) {
    if (volume.rank() != 4 || mask.rank() != 3) throw ShapeError("apply_mask expects (X,Y,Z,T) + (X,Y,Z)");
    Tensor<T> out = volume;
    const std::int64_t nt = volume.dim(3);
    for (std::int64_t v = 0; v < mask.size(); ++v)
        if (!mask[v])
            for (std::int64_t t = 0; t < nt; ++t) out[v * nt + t] = T(0);
    return out;
}

struct EnhanceOptions {
    bool histogram_equalization = true;
    bool gamma = true;
    double gamma_exponent = 0.5;
    int bins = 256;
};

template <typename T>
struct EnhanceResult {
    Tensor<T> volume;
    bool constant_input = false;  // degenerate masked intensities, passed through
};

// Contrast enhancement over masked voxels of the whole 4D tensor: min-max
// normalization to [0, 1], then histogram equalization, then the gamma map
// v -> v^0.5. Voxels outside the mask are zeroed.
template <typename T>
EnhanceResult<T> enhance(const Tensor<T>& volume, const Tensor<std::uint8_t>& mask,
                         const EnhanceOptions& opts = {}) {
    if (volume.rank() != 4 || mask.rank() != 3)
        throw ShapeError("enhance expects (X,Y,Z,T) + (X,Y,Z)");
    EnhanceResult<T> res;
    const std::int64_t nt = volume.dim(3);

    double vmin = 0.0, vmax = 0.0;
    bool first = true;
    for (std::int64_t v = 0; v < mask.size(); ++v) {
        if (!mask[v]) continue;
        for (std::int64_t t = 0; t < nt; ++t) {
            const double x = static_cast<double>(volume[v * nt + t]);
            if (first) {
                vmin = vmax = x;
                first = false;
            } else {
                vmin = std::min(vmin, x);
                vmax = std::max(vmax, x);
            }
        }
    }
    if (first) throw DataError("enhance: empty brain mask");
    if (vmax - vmin < 1e-12) {
        res.volume = volume;
        res.constant_input = true;
        return res;
    }

    Tensor<T> out(volume.dims(), volume.roles());
    const double scale = 1.0 / (vmax - vmin);
    for (std::int64_t v = 0; v < mask.size(); ++v) {
        if (!mask[v]) continue;
        for (std::int64_t t = 0; t < nt; ++t)
            out[v * nt + t] =
                static_cast<T>((static_cast<double>(volume[v * nt + t]) - vmin) * scale);
    }

    if (opts.histogram_equalization) {
        const int bins = opts.bins;
        std::vector<std::int64_t> hist(static_cast<std::size_t>(bins), 0);
        std::int64_t n = 0;
        auto bin_of = [&](double x) {
            int b = static_cast<int>(x * bins);
            return std::min(b, bins - 1);
        };
        for (std::int64_t v = 0; v < mask.size(); ++v) {
            if (!mask[v]) continue;
            for (std::int64_t t = 0; t < nt; ++t) {
                ++hist[static_cast<std::size_t>(bin_of(static_cast<double>(out[v * nt + t])))];
                ++n;
            }
        }
        std::vector<std::int64_t> cdf(static_cast<std::size_t>(bins), 0);
        std::int64_t acc = 0;
        std::int64_t cdf_min = 0;
        bool seen = false;
        for (int b = 0; b < bins; ++b) {
            acc += hist[static_cast<std::size_t>(b)];
            cdf[static_cast<std::size_t>(b)] = acc;
            if (!seen && hist[static_cast<std::size_t>(b)] > 0) {
                cdf_min = acc;
                seen = true;
            }
        }
        if (n - cdf_min > 0) {
            const double denom = static_cast<double>(n - cdf_min);
            for (std::int64_t v = 0; v < mask.size(); ++v) {
                if (!mask[v]) continue;
                for (std::int64_t t = 0; t < nt; ++t) {
                    const std::int64_t c =
                        cdf[static_cast<std::size_t>(bin_of(static_cast<double>(out[v * nt + t])))];
                    out[v * nt + t] = static_cast<T>(static_cast<double>(c - cdf_min) / denom);
                }
            }
        } else {
            res.constant_input = true;
        }
    }

    if (opts.gamma) {
        for (std::int64_t v = 0; v < mask.size(); ++v) {
            if (!mask[v]) continue;
            for (std::int64_t t = 0; t < nt; ++t)
                out[v * nt + t] = static_cast<T>(
                    std::pow(static_cast<double>(out[v * nt + t]), opts.gamma_exponent));
        }
    }

    res.volume = std::move(out);
    return res;
}

// (v - mu) / sigma with statistics over masked voxels of the whole tensor.
template <typename T>
Tensor<T> zscore(const Tensor<T>& volume, const Tensor<std::uint8_t>& mask) {
    if (volume.rank() != 4 || mask.rank() != 3)
        throw ShapeError("zscore expects (X,Y,Z,T) + (X,Y,Z)");
    const std::int64_t nt = volume.dim(3);
    double sum = 0.0, sum2 = 0.0;
    std::int64_t n = 0;
    for (std::int64_t v = 0; v < mask.size(); ++v) {
        if (!mask[v]) continue;
        for (std::int64_t t = 0; t < nt; ++t) {
            const double x = static_cast<double>(volume[v * nt + t]);
            sum += x;
            sum2 += x * x;
            ++n;
        }
    }
    if (n == 0) throw DataError("zscore: empty brain mask");
    const double mu = sum / static_cast<double>(n);
    const double var = sum2 / static_cast<double>(n) - mu * mu;
    if (!(var > 0.0)) throw DataError("zscore: zero variance over masked voxels");
    const double inv_sd = 1.0 / std::sqrt(var);

    Tensor<T> out = volume;
    for (std::int64_t i = 0; i < out.size(); ++i)
        out[i] = static_cast<T>((static_cast<double>(out[i]) - mu) * inv_sd);
    return out;
}

// Linear interpolation of every voxel's time-density curve onto a uniform
// grid (default 1 s) spanning the original schedule; endpoints are
// preserved exactly.
template <typename T>
CtpStudy<T> temporal_resample(const CtpStudy<T>& study, double target_dt = 1.0) {
    study.validate();
    const auto& s = study.meta.time_schedule;
    if (s.size() < 2) throw DataError("temporal_resample requires at least 2 time points");
    if (!(target_dt > 0.0)) throw ConfigError("target dt must be positive");

    const std::int64_t frames =
        static_cast<std::int64_t>(std::floor((s.back() - s.front()) / target_dt + 1e-9)) + 1;
    std::vector<double> grid;
    for (std::int64_t k = 0; k < frames; ++k)
        grid.push_back(std::min(s.front() + static_cast<double>(k) * target_dt, s.back()));
    grid.back() = s.back();  // exact endpoint

    CtpStudy<T> out;
    out.patient_id = study.patient_id;
    out.group = study.group;
    out.meta = study.meta;
    out.meta.time_schedule = grid;
    out.raw = Tensor<T>({study.raw.dim(0), study.raw.dim(1), study.raw.dim(2), frames},
                        study.raw.roles());

    const std::int64_t nt = study.raw.dim(3);
    const std::int64_t voxels = study.raw.size() / nt;
    // per-target segment index and weight
    std::vector<std::int64_t> seg(static_cast<std::size_t>(frames));
    std::vector<double> wgt(static_cast<std::size_t>(frames));
    std::int64_t j = 0;
    for (std::int64_t k = 0; k < frames; ++k) {
        const double t = grid[static_cast<std::size_t>(k)];
        while (j + 2 < nt && s[static_cast<std::size_t>(j + 1)] < t) ++j;
        seg[static_cast<std::size_t>(k)] = j;
        wgt[static_cast<std::size_t>(k)] = (t - s[static_cast<std::size_t>(j)]) /
                                           (s[static_cast<std::size_t>(j + 1)] - s[static_cast<std::size_t>(j)]);
    }
    for (std::int64_t v = 0; v < voxels; ++v) {
        const T* src = study.raw.data() + v * nt;
        T* dst = out.raw.data() + v * frames;
        for (std::int64_t k = 0; k < frames; ++k) {
            const std::int64_t i = seg[static_cast<std::size_t>(k)];
            const double w = wgt[static_cast<std::size_t>(k)];
            dst[k] = static_cast<T>(static_cast<double>(src[i]) * (1.0 - w) +
                                    static_cast<double>(src[i + 1]) * w);
        }
    }
    return out;
}

}  // namespace ctpseg
