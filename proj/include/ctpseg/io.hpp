#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "ctpseg/graph.hpp"
#include "ctpseg/study.hpp"

namespace ctpseg {

// Bit-exact binary container (".ctp4") for studies and label masks, and the
// model checkpoint format. All integers and floats are little-endian.
//
// Study/mask layout:
//   8 bytes  magic "CTP4VOL\0"
//   u32      version (1)
//   u32      dtype (0 = f32, 1 = f64, 2 = u8)
//   5 x u32  dims X Y Z T C (unused trailing axes are 1)
//   f64      pixel_spacing_mm
//   f64      slice_thickness_mm
//   u32      schedule length, then f64 instants
//   f64      rescale_slope
//   f64      rescale_intercept
//   payload  row-major, last axis fastest
//
// Checkpoints ("CTP4MDL\0") carry a JSON config document and a parameter
// directory: per parameter a name, dtype, rank, dims, payload.

enum class Dtype : std::uint32_t { F32 = 0, F64 = 1, U8 = 2 };

inline constexpr std::uint32_t kContainerVersion = 1;

template <typename T>
void write_study(const std::string& path, const CtpStudy<T>& study);

// Reads a study; a stored f32/f64 payload is widened or narrowed to T.
template <typename T>
CtpStudy<T> read_study(const std::string& path);

void write_mask(const std::string& path, const Tensor<std::uint8_t>& mask, const VolumeMeta& meta);

struct MaskFile {
    Tensor<std::uint8_t> mask;  // (X, Y, Z)
    VolumeMeta meta;
};
MaskFile read_mask(const std::string& path);

// Scalar dtype stored in a container file, from the header alone.
Dtype probe_dtype(const std::string& path);

// Per-voxel per-class field, e.g. Monte Carlo probability variance.
template <typename T>
void write_field(const std::string& path, const Tensor<T>& field, const VolumeMeta& meta);

template <typename T>
void save_checkpoint(const std::string& path, const std::string& config_json,
                     const std::vector<Param<T>*>& params);

struct LoadedCheckpoint {
    std::string config_json;
    Dtype dtype = Dtype::F32;
    std::vector<std::pair<std::string, Tensor<double>>> tensors;  // widened
};
LoadedCheckpoint load_checkpoint(const std::string& path);

// Assigns checkpoint tensors onto network parameters by name; every
// parameter must be present with matching shape.
template <typename T>
void assign_params(const LoadedCheckpoint& ckpt, const std::vector<Param<T>*>& params);

// Deterministic shortest round-trip decimal formatting for CSV output.
std::string format_double(double v);

extern template void write_field<float>(const std::string&, const Tensor<float>&, const VolumeMeta&);
extern template void write_field<double>(const std::string&, const Tensor<double>&, const VolumeMeta&);
extern template void write_study<float>(const std::string&, const CtpStudy<float>&);
extern template void write_study<double>(const std::string&, const CtpStudy<double>&);
extern template CtpStudy<float> read_study<float>(const std::string&);
extern template CtpStudy<double> read_study<double>(const std::string&);
extern template void save_checkpoint<float>(const std::string&, const std::string&,
                                            const std::vector<Param<float>*>&);
extern template void save_checkpoint<double>(const std::string&, const std::string&,
                                             const std::vector<Param<double>*>&);
extern template void assign_params<float>(const LoadedCheckpoint&, const std::vector<Param<float>*>&);
extern template void assign_params<double>(const LoadedCheckpoint&,
                                           const std::vector<Param<double>*>&);

}  // namespace ctpseg
