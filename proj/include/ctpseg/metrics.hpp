#pragma once

#include <cmath>
#include <limits>
#include <vector>

#include "ctpseg/meta.hpp"
#include "ctpseg/tensor.hpp"

namespace ctpseg {

// Evaluation metrics over label volumes. Masks are uint8 label tensors of
// rank 2 (X, Y) or rank 3 (X, Y, Z); a voxel belongs to the point set of
// class c when its label equals c, so outside-brain voxels (255) never
// participate.

// DC(x, y) = 2|x n y| / (|x| + |y|); empty-empty scores 1 by convention.
inline double dice_coeff(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt,
                         int cls) {
    if (pred.dims() != gt.dims()) throw ShapeError("dice_coeff mask extents differ");
    std::int64_t np = 0, ng = 0, both = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] == cls;
        const bool b = gt[i] == cls;
        np += a;
        ng += b;
        both += a && b;
    }
    if (np + ng == 0) return 1.0;
    return 2.0 * static_cast<double>(both) / static_cast<double>(np + ng);
}

struct HausdorffResult {
    double mm = 0.0;
    bool any_slice_skipped = false;  // one side empty on some slice
    bool empty = false;              // both sides empty everywhere: value undefined, reported 0
};

enum class HausdorffMode { PerSlice2d, Full3d };

namespace detail {

// 1D squared Euclidean distance transform (lower envelope of parabolas,
// Felzenszwalb-Huttenlocher) with grid spacing `w`. Background cells carry
// a finite sentinel larger than any reachable squared distance, which keeps
// the intersection arithmetic finite.
inline void edt_1d(std::vector<double>& f, double w, std::vector<int>& v, std::vector<double>& z,
                   std::vector<double>& d) {
    const int n = static_cast<int>(f.size());
    v.assign(f.size(), 0);
    z.assign(f.size() + 1, 0.0);
    d.assign(f.size(), 0.0);
    const double w2 = w * w;
    int k = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s;
        for (;;) {
            const int vk = v[static_cast<std::size_t>(k)];
            s = ((f[static_cast<std::size_t>(q)] + w2 * q * q) -
                 (f[static_cast<std::size_t>(vk)] + w2 * vk * vk)) /
                (2.0 * w2 * (q - vk));
            if (s > z[static_cast<std::size_t>(k)]) break;
            --k;
        }
        ++k;
        v[static_cast<std::size_t>(k)] = q;
        z[static_cast<std::size_t>(k)] = s;
        z[static_cast<std::size_t>(k) + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[static_cast<std::size_t>(k) + 1] < q) ++k;
        const int vk = v[static_cast<std::size_t>(k)];
        d[static_cast<std::size_t>(q)] = w2 * (q - vk) * (q - vk) + f[static_cast<std::size_t>(vk)];
    }
    f.assign(d.begin(), d.end());
}

// Exact squared EDT of a binary grid with per-axis spacings.
inline std::vector<double> edt_nd(const std::vector<char>& inside,
                                  const std::vector<std::int64_t>& dims,
                                  const std::vector<double>& spacing) {
    std::int64_t total = 1;
    double reach = 0.0;
    for (std::size_t k = 0; k < dims.size(); ++k) {
        total *= dims[k];
        const double span = static_cast<double>(dims[k]) * spacing[k];
        reach += span * span;
    }
    const double sentinel = reach + 1.0;

    std::vector<double> dist(static_cast<std::size_t>(total));
    for (std::int64_t i = 0; i < total; ++i)
        dist[static_cast<std::size_t>(i)] = inside[static_cast<std::size_t>(i)] ? 0.0 : sentinel;

    const int rank = static_cast<int>(dims.size());
    std::vector<std::int64_t> strides(static_cast<std::size_t>(rank));
    std::int64_t acc = 1;
    for (int k = rank - 1; k >= 0; --k) {
        strides[static_cast<std::size_t>(k)] = acc;
        acc *= dims[static_cast<std::size_t>(k)];
    }

    std::vector<double> line;
    std::vector<int> vbuf;
    std::vector<double> zbuf, dbuf;
    for (int axis = 0; axis < rank; ++axis) {
        const std::int64_t len = dims[static_cast<std::size_t>(axis)];
        const std::int64_t stride = strides[static_cast<std::size_t>(axis)];
        const std::int64_t lines = total / len;
        line.resize(static_cast<std::size_t>(len));
        for (std::int64_t l = 0; l < lines; ++l) {
            std::int64_t rem = l, start = 0;
            for (int k = rank - 1; k >= 0; --k) {
                if (k == axis) continue;
                const std::int64_t d = dims[static_cast<std::size_t>(k)];
                start += (rem % d) * strides[static_cast<std::size_t>(k)];
                rem /= d;
            }
            for (std::int64_t q = 0; q < len; ++q)
                line[static_cast<std::size_t>(q)] =
                    dist[static_cast<std::size_t>(start + q * stride)];
            edt_1d(line, spacing[static_cast<std::size_t>(axis)], vbuf, zbuf, dbuf);
            for (std::int64_t q = 0; q < len; ++q)
                dist[static_cast<std::size_t>(start + q * stride)] =
                    line[static_cast<std::size_t>(q)];
        }
    }
    return dist;
}

inline double directed_hd(const std::vector<char>& from, const std::vector<double>& dt_to) {
    double worst = 0.0;
    for (std::size_t i = 0; i < from.size(); ++i)
        if (from[i]) worst = std::max(worst, dt_to[i]);
    return std::sqrt(worst);
}

}  // namespace detail

// Symmetric Hausdorff distance in millimetres between the class-c point
// sets of two label masks. The default evaluates each 2D slice under the
// in-plane spacing and averages over slices where both sets are nonempty;
// slices with exactly one empty side are skipped and flagged. Full3d runs
// one anisotropic 3D transform instead.
inline HausdorffResult hausdorff_mm(const Tensor<std::uint8_t>& pred,
                                    const Tensor<std::uint8_t>& gt, int cls,
                                    const VolumeMeta& meta,
                                    HausdorffMode mode = HausdorffMode::PerSlice2d) {
    if (pred.dims() != gt.dims()) throw ShapeError("hausdorff_mm mask extents differ");
    if (pred.rank() != 2 && pred.rank() != 3)
        throw ShapeError("hausdorff_mm expects rank-2 or rank-3 masks");

    HausdorffResult res;

    if (mode == HausdorffMode::Full3d && pred.rank() == 3) {
        std::vector<char> a(static_cast<std::size_t>(pred.size())), b(a.size());
        std::int64_t na = 0, nb = 0;
        for (std::int64_t i = 0; i < pred.size(); ++i) {
            a[static_cast<std::size_t>(i)] = pred[i] == cls;
            b[static_cast<std::size_t>(i)] = gt[i] == cls;
            na += a[static_cast<std::size_t>(i)];
            nb += b[static_cast<std::size_t>(i)];
        }
        if (na == 0 && nb == 0) {
            res.empty = true;
            return res;
        }
        if (na == 0 || nb == 0) {
            res.any_slice_skipped = true;
            res.empty = true;
            return res;
        }
        const std::vector<double> sp = {meta.pixel_spacing_mm, meta.pixel_spacing_mm,
                                        meta.slice_thickness_mm};
        auto da = detail::edt_nd(a, pred.dims(), sp);
        auto db = detail::edt_nd(b, pred.dims(), sp);
        res.mm = std::max(detail::directed_hd(a, db), detail::directed_hd(b, da));
        return res;
    }

    const std::int64_t zmax = pred.rank() == 3 ? pred.dim(2) : 1;
    const std::int64_t nx = pred.dim(0), ny = pred.dim(1);
    const std::int64_t plane = nx * ny;

    double sum = 0.0;
    std::int64_t counted = 0;
    std::vector<char> a(static_cast<std::size_t>(plane)), b(a.size());
    for (std::int64_t z = 0; z < zmax; ++z) {
        std::int64_t na = 0, nb = 0;
        for (std::int64_t x = 0; x < nx; ++x)
            for (std::int64_t y = 0; y < ny; ++y) {
                const std::int64_t off = pred.rank() == 3 ? (x * ny + y) * zmax + z : x * ny + y;
                const std::size_t i = static_cast<std::size_t>(x * ny + y);
                a[i] = pred[off] == cls;
                b[i] = gt[off] == cls;
                na += a[i];
                nb += b[i];
            }
        if (na == 0 && nb == 0) continue;
        if (na == 0 || nb == 0) {
            res.any_slice_skipped = true;
            continue;
        }
        const std::vector<double> sp = {meta.pixel_spacing_mm, meta.pixel_spacing_mm};
        const std::vector<std::int64_t> dims = {nx, ny};
        auto da = detail::edt_nd(a, dims, sp);
        auto db = detail::edt_nd(b, dims, sp);
        sum += std::max(detail::directed_hd(a, db), detail::directed_hd(b, da));
        ++counted;
    }
    if (counted == 0) {
        res.empty = true;
        res.mm = 0.0;
    } else {
        res.mm = sum / static_cast<double>(counted);
    }
    return res;
}

// Absolute lesion-volume difference in millilitres:
// |count_pred - count_gt| * voxel_volume_mm3 / 1000.
inline double delta_v_ml(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& gt, int cls,
                         const VolumeMeta& meta) {
    if (pred.dims() != gt.dims()) throw ShapeError("delta_v_ml mask extents differ");
    std::int64_t np = 0, ng = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        np += pred[i] == cls;
        ng += gt[i] == cls;
    }
    return std::abs(static_cast<double>(np - ng)) * meta.voxel_volume_mm3() / 1000.0;
}

}  // namespace ctpseg
