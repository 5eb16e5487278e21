#pragma once

#include <string>

#include "ctpseg/meta.hpp"
#include "ctpseg/tensor.hpp"

namespace ctpseg {

// One patient's 4D acquisition plus identity and grouping.
template <typename T>
struct CtpStudy {
    Tensor<T> raw;  // (X, Y, Z, T)
    VolumeMeta meta;
    std::string patient_id;
    PatientGroup group = PatientGroup::LVO;

    void validate() const {
        if (raw.rank() != 4) throw ShapeError("study tensor must be rank 4 (X, Y, Z, T)");
        if (static_cast<std::size_t>(raw.dim(3)) != meta.time_schedule.size())
            throw ShapeError("time extent " + std::to_string(raw.dim(3)) +
                             " does not match schedule length " +
                             std::to_string(meta.time_schedule.size()));
        meta.validate();
    }
};

}  // namespace ctpseg
