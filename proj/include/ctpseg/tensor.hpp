#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "ctpseg/errors.hpp"

namespace ctpseg {

// Axis semantics. A tensor's axes are always ordered (X, Y, Z, T, C) with
// whichever subset applies; the buffer is row-major with the last axis
// fastest, so per-voxel channel vectors are contiguous.
enum class Axis : std::uint8_t {
    Width = 0,
    Height = 1,
    Depth = 2,
    Time = 3,
    Channel = 4,
    // parameter-tensor roles
    ChannelIn = 5,
    ChannelOut = 6,
};

inline const char* axis_name(Axis a) {
    switch (a) {
        case Axis::Width: return "width";
        case Axis::Height: return "height";
        case Axis::Depth: return "depth";
        case Axis::Time: return "time";
        case Axis::Channel: return "channel";
        case Axis::ChannelIn: return "channel_in";
        case Axis::ChannelOut: return "channel_out";
    }
    return "?";
}

using Shape = std::vector<std::int64_t>;
using AxisRoles = std::vector<Axis>;

inline std::string shape_str(const Shape& s) {
    std::string out = "(";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + ")";
}

// Dense N-rank array. Value-semantic; readers may share a const tensor
// across threads, mutation requires exclusive access.
template <typename T>
class Tensor {
public:
    Tensor() = default;

    Tensor(Shape dims, AxisRoles roles) : dims_(std::move(dims)), roles_(std::move(roles)) {
        validate();
        data_.assign(static_cast<std::size_t>(element_count()), T(0));
    }

    Tensor(Shape dims, AxisRoles roles, std::vector<T> data)
        : dims_(std::move(dims)), roles_(std::move(roles)), data_(std::move(data)) {
        validate();
        if (static_cast<std::int64_t>(data_.size()) != element_count())
            throw ShapeError("tensor data length " + std::to_string(data_.size()) +
                             " does not match dims " + shape_str(dims_));
    }

    int rank() const { return static_cast<int>(dims_.size()); }
    const Shape& dims() const { return dims_; }
    std::int64_t dim(int k) const { return dims_[static_cast<std::size_t>(k)]; }
    const AxisRoles& roles() const { return roles_; }
    Axis role(int k) const { return roles_[static_cast<std::size_t>(k)]; }

    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }
    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& buffer() { return data_; }
    const std::vector<T>& buffer() const { return data_; }

    // Index of the axis carrying `role`, or -1 when absent.
    int axis_of(Axis role) const {
        for (int k = 0; k < rank(); ++k)
            if (roles_[static_cast<std::size_t>(k)] == role) return k;
        return -1;
    }

    // Row-major strides, last axis fastest.
    Shape strides() const {
        Shape s(dims_.size());
        std::int64_t acc = 1;
        for (int k = rank() - 1; k >= 0; --k) {
            s[static_cast<std::size_t>(k)] = acc;
            acc *= dims_[static_cast<std::size_t>(k)];
        }
        return s;
    }

    // Bounds-checked element access; errors name the offending axis.
    T at(const Shape& coords) const { return data_[checked_offset(coords)]; }
    T& at(const Shape& coords) { return data_[checked_offset(coords)]; }

    // Unchecked linear offset for hot loops.
    std::int64_t offset(const Shape& coords) const {
        std::int64_t off = 0;
        for (int k = 0; k < rank(); ++k)
            off = off * dims_[static_cast<std::size_t>(k)] + coords[static_cast<std::size_t>(k)];
        return off;
    }

    T operator[](std::int64_t linear) const { return data_[static_cast<std::size_t>(linear)]; }
    T& operator[](std::int64_t linear) { return data_[static_cast<std::size_t>(linear)]; }

    template <typename U>
    Tensor<U> cast() const {
        std::vector<U> out(data_.size());
        for (std::size_t i = 0; i < data_.size(); ++i) out[i] = static_cast<U>(data_[i]);
        return Tensor<U>(dims_, roles_, std::move(out));
    }

    bool same_shape(const Tensor& other) const {
        return dims_ == other.dims_ && roles_ == other.roles_;
    }

private:
    std::int64_t element_count() const {
        std::int64_t n = 1;
        for (auto d : dims_) n *= d;
        return n;
    }

    void validate() const {
        if (dims_.size() != roles_.size())
            throw ShapeError("axis role count " + std::to_string(roles_.size()) +
                             " does not match rank " + std::to_string(dims_.size()));
        for (std::size_t k = 0; k < dims_.size(); ++k) {
            if (dims_[k] < 1)
                throw ShapeError("extent of axis " + std::string(axis_name(roles_[k])) +
                                 " must be >= 1, got " + std::to_string(dims_[k]));
            for (std::size_t j = k + 1; j < roles_.size(); ++j)
                if (roles_[k] == roles_[j])
                    throw ShapeError(std::string("duplicate axis role ") + axis_name(roles_[k]));
        }
    }

    std::size_t checked_offset(const Shape& coords) const {
        if (static_cast<int>(coords.size()) != rank())
            throw BoundsError("coordinate rank " + std::to_string(coords.size()) +
                              " does not match tensor rank " + std::to_string(rank()));
        std::int64_t off = 0;
        for (int k = 0; k < rank(); ++k) {
            std::int64_t c = coords[static_cast<std::size_t>(k)];
            std::int64_t d = dims_[static_cast<std::size_t>(k)];
            if (c < 0 || c >= d)
                throw BoundsError("index " + std::to_string(c) + " out of range [0, " +
                                  std::to_string(d) + ") on axis " +
                                  axis_name(roles_[static_cast<std::size_t>(k)]));
            off = off * d + c;
        }
        return static_cast<std::size_t>(off);
    }

    Shape dims_;
    AxisRoles roles_;
    std::vector<T> data_;
};

enum class PadMode { Zero, Replicate };

// Symmetric per-axis padding. Output extent = input extent + 2*amount.
template <typename T>
Tensor<T> pad(const Tensor<T>& t, const Shape& amounts, PadMode mode) {
    if (static_cast<int>(amounts.size()) != t.rank())
        throw ShapeError("pad amounts rank " + std::to_string(amounts.size()) +
                         " does not match tensor rank " + std::to_string(t.rank()));
    for (std::size_t k = 0; k < amounts.size(); ++k)
        if (amounts[k] < 0)
            throw ShapeError("negative pad amount on axis " + std::string(axis_name(t.role(static_cast<int>(k)))));

    Shape out_dims = t.dims();
    for (std::size_t k = 0; k < amounts.size(); ++k) out_dims[k] += 2 * amounts[k];
    Tensor<T> out(out_dims, t.roles());

    const int r = t.rank();
    Shape oc(static_cast<std::size_t>(r), 0);
    const std::int64_t n = out.size();
    for (std::int64_t lin = 0; lin < n; ++lin) {
        bool inside = true;
        Shape ic(static_cast<std::size_t>(r));
        for (int k = 0; k < r; ++k) {
            std::int64_t c = oc[static_cast<std::size_t>(k)] - amounts[static_cast<std::size_t>(k)];
            if (c < 0 || c >= t.dim(k)) {
                inside = false;
                c = std::clamp<std::int64_t>(c, 0, t.dim(k) - 1);
            }
            ic[static_cast<std::size_t>(k)] = c;
        }
        if (inside)
            out[lin] = t[t.offset(ic)];
        else
            out[lin] = (mode == PadMode::Zero) ? T(0) : t[t.offset(ic)];
        for (int k = r - 1; k >= 0; --k) {
            if (++oc[static_cast<std::size_t>(k)] < out.dim(k)) break;
            oc[static_cast<std::size_t>(k)] = 0;
        }
    }
    return out;
}

// Concatenation along one axis; all other extents must agree.
template <typename T>
Tensor<T> concat(const std::vector<const Tensor<T>*>& parts, int axis) {
    if (parts.empty()) throw ShapeError("concat of zero tensors");
    const Tensor<T>& first = *parts[0];
    if (axis < 0 || axis >= first.rank())
        throw ShapeError("concat axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(first.rank()));
    Shape out_dims = first.dims();
    for (std::size_t p = 1; p < parts.size(); ++p) {
        const Tensor<T>& t = *parts[p];
        if (t.rank() != first.rank())
            throw ShapeError("concat rank mismatch: " + std::to_string(t.rank()) + " vs " +
                             std::to_string(first.rank()));
        for (int k = 0; k < first.rank(); ++k) {
            if (k == axis) continue;
            if (t.dim(k) != first.dim(k))
                throw ShapeError(std::string("concat extent mismatch on axis ") +
                                 axis_name(first.role(k)) + ": " + std::to_string(t.dim(k)) +
                                 " vs " + std::to_string(first.dim(k)));
        }
        out_dims[static_cast<std::size_t>(axis)] += t.dim(axis);
    }

    Tensor<T> out(out_dims, first.roles());
    // outer = product of extents before `axis`, inner = product after.
    std::int64_t outer = 1, inner = 1;
    for (int k = 0; k < axis; ++k) outer *= first.dim(k);
    for (int k = axis + 1; k < first.rank(); ++k) inner *= first.dim(k);

    std::int64_t dst_axis_off = 0;
    for (const Tensor<T>* part : parts) {
        const std::int64_t a = part->dim(axis);
        const T* src = part->data();
        for (std::int64_t o = 0; o < outer; ++o) {
            T* dst = out.data() + (o * out_dims[static_cast<std::size_t>(axis)] + dst_axis_off) * inner;
            std::copy(src + o * a * inner, src + (o + 1) * a * inner, dst);
        }
        dst_axis_off += a;
    }
    return out;
}

template <typename T>
Tensor<T> concat(std::initializer_list<const Tensor<T>*> parts, int axis) {
    return concat(std::vector<const Tensor<T>*>(parts), axis);
}

// Inverse of concat: cut `t` into pieces of the given extents along `axis`.
template <typename T>
std::vector<Tensor<T>> split(const Tensor<T>& t, int axis, const Shape& extents) {
    std::int64_t total = std::accumulate(extents.begin(), extents.end(), std::int64_t(0));
    if (axis < 0 || axis >= t.rank() || total != t.dim(axis))
        throw ShapeError("split extents do not cover axis " + std::to_string(axis));
    std::int64_t outer = 1, inner = 1;
    for (int k = 0; k < axis; ++k) outer *= t.dim(k);
    for (int k = axis + 1; k < t.rank(); ++k) inner *= t.dim(k);

    std::vector<Tensor<T>> out;
    std::int64_t axis_off = 0;
    for (std::int64_t e : extents) {
        Shape d = t.dims();
        d[static_cast<std::size_t>(axis)] = e;
        Tensor<T> piece(d, t.roles());
        for (std::int64_t o = 0; o < outer; ++o) {
            const T* src = t.data() + (o * t.dim(axis) + axis_off) * inner;
            std::copy(src, src + e * inner, piece.data() + o * e * inner);
        }
        axis_off += e;
        out.push_back(std::move(piece));
    }
    return out;
}

// Drop a size-1 axis.
template <typename T>
Tensor<T> squeeze(const Tensor<T>& t, int axis) {
    if (axis < 0 || axis >= t.rank() || t.dim(axis) != 1)
        throw ShapeError("squeeze requires extent 1 on axis " + std::to_string(axis));
    Shape d;
    AxisRoles r;
    for (int k = 0; k < t.rank(); ++k) {
        if (k == axis) continue;
        d.push_back(t.dim(k));
        r.push_back(t.role(k));
    }
    return Tensor<T>(std::move(d), std::move(r), t.buffer());
}

// Insert a size-1 axis with the given role at position `axis`.
template <typename T>
Tensor<T> unsqueeze(const Tensor<T>& t, int axis, Axis role) {
    if (axis < 0 || axis > t.rank()) throw ShapeError("unsqueeze position out of range");
    Shape d = t.dims();
    AxisRoles r = t.roles();
    d.insert(d.begin() + axis, 1);
    r.insert(r.begin() + axis, role);
    return Tensor<T>(std::move(d), std::move(r), t.buffer());
}

}  // namespace ctpseg
