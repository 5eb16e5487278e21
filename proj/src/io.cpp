#include "ctpseg/io.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

namespace ctpseg {

namespace {

constexpr char kStudyMagic[8] = {'C', 'T', 'P', '4', 'V', 'O', 'L', '\0'};
constexpr char kModelMagic[8] = {'C', 'T', 'P', '4', 'M', 'D', 'L', '\0'};

// Raw little-endian writer/reader. The host is assumed little-endian
// (x86-64 / aarch64); a static_assert guards the scalar sizes.
static_assert(sizeof(float) == 4 && sizeof(double) == 8, "unexpected scalar widths");

class Writer {
public:
    explicit Writer(const std::string& path) : out_(path, std::ios::binary) {
        if (!out_) throw DataError("cannot open '" + path + "' for writing");
        path_ = path;
    }
    void bytes(const void* p, std::size_t n) {
        out_.write(static_cast<const char*>(p), static_cast<std::streamsize>(n));
    }
    void u32(std::uint32_t v) { bytes(&v, 4); }
    void f64(double v) { bytes(&v, 8); }
    void finish() {
        out_.flush();
        if (!out_) throw DataError("write failed for '" + path_ + "'");
    }

private:
    std::ofstream out_;
    std::string path_;
};

class Reader {
public:
    explicit Reader(const std::string& path) : in_(path, std::ios::binary) {
        if (!in_) throw DataError("cannot open '" + path + "' for reading");
    }
    void bytes(void* p, std::size_t n) {
        in_.read(static_cast<char*>(p), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in_.gcount()) != n)
            throw FormatError("truncated file", offset_);
        offset_ += n;
    }
    std::uint32_t u32() {
        std::uint32_t v;
        bytes(&v, 4);
        return v;
    }
    double f64() {
        double v;
        bytes(&v, 8);
        return v;
    }
    std::uint64_t offset() const { return offset_; }
    bool at_eof() {
        in_.peek();
        return in_.eof();
    }

private:
    std::ifstream in_;
    std::uint64_t offset_ = 0;
};

template <typename T>
Dtype dtype_of();
template <>
Dtype dtype_of<float>() {
    return Dtype::F32;
}
template <>
Dtype dtype_of<double>() {
    return Dtype::F64;
}

std::size_t dtype_size(Dtype d) {
    switch (d) {
        case Dtype::F32: return 4;
        case Dtype::F64: return 8;
        case Dtype::U8: return 1;
    }
    throw FormatError("unknown dtype code", 0);
}

void write_volume_header(Writer& w, Dtype dtype, const Shape& dims5, const VolumeMeta& meta) {
    w.bytes(kStudyMagic, 8);
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(dtype));
    for (int k = 0; k < 5; ++k) w.u32(static_cast<std::uint32_t>(dims5[static_cast<std::size_t>(k)]));
    w.f64(meta.pixel_spacing_mm);
    w.f64(meta.slice_thickness_mm);
    w.u32(static_cast<std::uint32_t>(meta.time_schedule.size()));
    for (double t : meta.time_schedule) w.f64(t);
    w.f64(meta.rescale_slope);
    w.f64(meta.rescale_intercept);
}

struct VolumeHeader {
    Dtype dtype;
    Shape dims5;
    VolumeMeta meta;
};

VolumeHeader read_volume_header(Reader& r) {
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kStudyMagic, 8) != 0) throw FormatError("bad magic", 0);
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion)
        throw FormatError("unsupported container version " + std::to_string(version), r.offset() - 4);
    const std::uint32_t dtype_code = r.u32();
    if (dtype_code > 2) throw FormatError("unknown dtype code " + std::to_string(dtype_code), r.offset() - 4);
    VolumeHeader h;
    h.dtype = static_cast<Dtype>(dtype_code);
    std::uint64_t total = 1;
    for (int k = 0; k < 5; ++k) {
        const std::uint32_t d = r.u32();
        if (d == 0) throw FormatError("zero extent in header", r.offset() - 4);
        total *= d;
        if (total > (1ULL << 40)) throw FormatError("dimension product overflow", r.offset() - 4);
        h.dims5.push_back(static_cast<std::int64_t>(d));
    }
    h.meta.pixel_spacing_mm = r.f64();
    h.meta.slice_thickness_mm = r.f64();
    const std::uint32_t sched = r.u32();
    if (sched > (1U << 20)) throw FormatError("schedule length overflow", r.offset() - 4);
    h.meta.time_schedule.resize(sched);
    for (std::uint32_t i = 0; i < sched; ++i) h.meta.time_schedule[i] = r.f64();
    h.meta.rescale_slope = r.f64();
    h.meta.rescale_intercept = r.f64();
    return h;
}

void check_payload_end(Reader& r, const std::string& what) {
    if (!r.at_eof()) throw FormatError(what + ": trailing bytes after payload", r.offset());
}

}  // namespace

template <typename T>
void write_study(const std::string& path, const CtpStudy<T>& study) {
    study.validate();
    Writer w(path);
    Shape dims5 = study.raw.dims();
    dims5.push_back(1);  // channel
    write_volume_header(w, dtype_of<T>(), dims5, study.meta);
    w.bytes(study.raw.data(), static_cast<std::size_t>(study.raw.size()) * sizeof(T));
    w.finish();
}

template <typename T>
CtpStudy<T> read_study(const std::string& path) {
    Reader r(path);
    VolumeHeader h = read_volume_header(r);
    if (h.dtype == Dtype::U8) throw FormatError("expected a study payload, found labels", r.offset());
    if (h.dims5[4] != 1) throw FormatError("unexpected channel extent in study", r.offset());
    const std::int64_t n = h.dims5[0] * h.dims5[1] * h.dims5[2] * h.dims5[3];
    if (static_cast<std::size_t>(h.dims5[3]) != h.meta.time_schedule.size())
        throw FormatError("time extent does not match schedule length", r.offset());

    CtpStudy<T> study;
    study.meta = h.meta;
    Shape dims = {h.dims5[0], h.dims5[1], h.dims5[2], h.dims5[3]};
    AxisRoles roles = {Axis::Width, Axis::Height, Axis::Depth, Axis::Time};
    if (h.dtype == Dtype::F32) {
        std::vector<float> buf(static_cast<std::size_t>(n));
        r.bytes(buf.data(), buf.size() * 4);
        check_payload_end(r, path);
        std::vector<T> data(buf.begin(), buf.end());
        study.raw = Tensor<T>(dims, roles, std::move(data));
    } else {
        std::vector<double> buf(static_cast<std::size_t>(n));
        r.bytes(buf.data(), buf.size() * 8);
        check_payload_end(r, path);
        std::vector<T> data(buf.begin(), buf.end());
        study.raw = Tensor<T>(dims, roles, std::move(data));
    }
    return study;
}

void write_mask(const std::string& path, const Tensor<std::uint8_t>& mask, const VolumeMeta& meta) {
    if (mask.rank() != 3) throw ShapeError("mask must be rank 3 (X, Y, Z)");
    Writer w(path);
    Shape dims5 = mask.dims();
    dims5.push_back(1);
    dims5.push_back(1);
    write_volume_header(w, Dtype::U8, dims5, meta);
    w.bytes(mask.data(), static_cast<std::size_t>(mask.size()));
    w.finish();
}

MaskFile read_mask(const std::string& path) {
    Reader r(path);
    VolumeHeader h = read_volume_header(r);
    if (h.dtype != Dtype::U8) throw FormatError("expected a label payload", r.offset());
    if (h.dims5[3] != 1 || h.dims5[4] != 1)
        throw FormatError("unexpected time/channel extents in mask", r.offset());
    const std::int64_t n = h.dims5[0] * h.dims5[1] * h.dims5[2];
    std::vector<std::uint8_t> buf(static_cast<std::size_t>(n));
    r.bytes(buf.data(), buf.size());
    check_payload_end(r, path);
    MaskFile out;
    out.meta = h.meta;
    out.mask = Tensor<std::uint8_t>({h.dims5[0], h.dims5[1], h.dims5[2]},
                                    {Axis::Width, Axis::Height, Axis::Depth}, std::move(buf));
    return out;
}

Dtype probe_dtype(const std::string& path) {
    Reader r(path);
    VolumeHeader h = read_volume_header(r);
    return h.dtype;
}

template <typename T>
void write_field(const std::string& path, const Tensor<T>& field, const VolumeMeta& meta) {
    if (field.rank() != 4) throw ShapeError("field must be rank 4 (X, Y, Z, C)");
    Writer w(path);
    Shape dims5 = {field.dim(0), field.dim(1), field.dim(2), 1, field.dim(3)};
    write_volume_header(w, dtype_of<T>(), dims5, meta);
    w.bytes(field.data(), static_cast<std::size_t>(field.size()) * sizeof(T));
    w.finish();
}

template void write_field<float>(const std::string&, const Tensor<float>&, const VolumeMeta&);
template void write_field<double>(const std::string&, const Tensor<double>&, const VolumeMeta&);

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<Param<T>*>& params) {
    Writer w(path);
    w.bytes(kModelMagic, 8);
    w.u32(kContainerVersion);
    w.u32(static_cast<std::uint32_t>(config_json.size()));
    w.bytes(config_json.data(), config_json.size());
    w.u32(static_cast<std::uint32_t>(params.size()));
    for (const Param<T>* p : params) {
        w.u32(static_cast<std::uint32_t>(p->name.size()));
        w.bytes(p->name.data(), p->name.size());
        w.u32(static_cast<std::uint32_t>(dtype_of<T>()));
        w.u32(static_cast<std::uint32_t>(p->value.rank()));
        for (int k = 0; k < p->value.rank(); ++k)
            w.u32(static_cast<std::uint32_t>(p->value.dim(k)));
        w.bytes(p->value.data(), static_cast<std::size_t>(p->value.size()) * sizeof(T));
    }
    w.finish();
}

LoadedCheckpoint load_checkpoint(const std::string& path) {
    Reader r(path);
    char magic[8];
    r.bytes(magic, 8);
    if (std::memcmp(magic, kModelMagic, 8) != 0) throw FormatError("bad magic", 0);
    const std::uint32_t version = r.u32();
    if (version != kContainerVersion)
        throw FormatError("unsupported checkpoint version " + std::to_string(version), r.offset() - 4);
    LoadedCheckpoint out;
    const std::uint32_t cfg_len = r.u32();
    if (cfg_len > (1U << 24)) throw FormatError("config length overflow", r.offset() - 4);
    out.config_json.resize(cfg_len);
    r.bytes(out.config_json.data(), cfg_len);
    const std::uint32_t count = r.u32();
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::uint32_t name_len = r.u32();
        if (name_len > (1U << 16)) throw FormatError("name length overflow", r.offset() - 4);
        std::string name(name_len, '\0');
        r.bytes(name.data(), name_len);
        const std::uint32_t dtype_code = r.u32();
        if (dtype_code > 1)
            throw FormatError("unexpected parameter dtype " + std::to_string(dtype_code),
                              r.offset() - 4);
        out.dtype = static_cast<Dtype>(dtype_code);
        const std::uint32_t rank = r.u32();
        if (rank > 6) throw FormatError("parameter rank overflow", r.offset() - 4);
        Shape dims;
        std::uint64_t total = 1;
        for (std::uint32_t k = 0; k < rank; ++k) {
            const std::uint32_t d = r.u32();
            if (d == 0) throw FormatError("zero parameter extent", r.offset() - 4);
            total *= d;
            if (total > (1ULL << 34)) throw FormatError("parameter size overflow", r.offset() - 4);
            dims.push_back(static_cast<std::int64_t>(d));
        }
        std::vector<double> data(static_cast<std::size_t>(total));
        if (out.dtype == Dtype::F32) {
            std::vector<float> buf(static_cast<std::size_t>(total));
            r.bytes(buf.data(), buf.size() * 4);
            std::copy(buf.begin(), buf.end(), data.begin());
        } else {
            r.bytes(data.data(), data.size() * 8);
        }
        // parameter tensors reuse generic axis roles; they are identified
        // by name, not by role
        AxisRoles roles;
        const Axis pool[6] = {Axis::Width,     Axis::Height,    Axis::Depth,
                              Axis::Time,      Axis::ChannelIn, Axis::ChannelOut};
        for (std::uint32_t k = 0; k < rank; ++k) roles.push_back(pool[k]);
        out.tensors.emplace_back(std::move(name), Tensor<double>(dims, roles, std::move(data)));
    }
    check_payload_end(r, path);
    return out;
}

template <typename T>
void assign_params(const LoadedCheckpoint& ckpt, const std::vector<Param<T>*>& params) {
    for (Param<T>* p : params) {
        const Tensor<double>* found = nullptr;
        for (const auto& [name, tensor] : ckpt.tensors)
            if (name == p->name) {
                found = &tensor;
                break;
            }
        if (!found) throw DataError("checkpoint is missing parameter '" + p->name + "'");
        if (found->dims() != p->value.dims())
            throw ShapeError("checkpoint shape mismatch for '" + p->name + "'");
        for (std::int64_t i = 0; i < found->size(); ++i)
            p->value[i] = static_cast<T>((*found)[i]);
    }
}

std::string format_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

template void write_study<float>(const std::string&, const CtpStudy<float>&);
template void write_study<double>(const std::string&, const CtpStudy<double>&);
template CtpStudy<float> read_study<float>(const std::string&);
template CtpStudy<double> read_study<double>(const std::string&);
template void save_checkpoint<float>(const std::string&, const std::string&,
                                     const std::vector<Param<float>*>&);
template void save_checkpoint<double>(const std::string&, const std::string&,
                                      const std::vector<Param<double>*>&);
template void assign_params<float>(const LoadedCheckpoint&, const std::vector<Param<float>*>&);
template void assign_params<double>(const LoadedCheckpoint&, const std::vector<Param<double>*>&);

}  // namespace ctpseg
