#pragma once

#include <string>
#include <vector>

#include "ctpseg/errors.hpp"

namespace ctpseg {

// Physical geometry and acquisition schedule of a perfusion study.
struct VolumeMeta {
    double pixel_spacing_mm = 0.4258;   // in-plane, isotropic
    double slice_thickness_mm = 5.0;
    std::vector<double> time_schedule;  // acquisition instants, seconds
    double rescale_slope = 1.0;
    double rescale_intercept = 0.0;

    void validate() const {
        if (!(pixel_spacing_mm > 0.0) || !(slice_thickness_mm > 0.0))
            throw ConfigError("voxel spacings must be positive");
        for (std::size_t i = 1; i < time_schedule.size(); ++i)
            if (!(time_schedule[i] > time_schedule[i - 1]))
                throw ConfigError("time schedule must be strictly increasing at index " +
                                  std::to_string(i));
    }

    double voxel_volume_mm3() const {
        return pixel_spacing_mm * pixel_spacing_mm * slice_thickness_mm;
    }

    // The scanner protocol this engine targets: 20 frames at 1 s spacing
    // followed by 10 frames at 2 s spacing.
    static std::vector<double> clinical_schedule() {
        std::vector<double> t;
        for (int i = 0; i < 20; ++i) t.push_back(static_cast<double>(i));
        for (int i = 0; i < 10; ++i) t.push_back(21.0 + 2.0 * i);
        return t;
    }
};

enum class PatientGroup { LVO, NonLVO, WIS };

inline const char* group_name(PatientGroup g) {
    switch (g) {
        case PatientGroup::LVO: return "LVO";
        case PatientGroup::NonLVO: return "Non-LVO";
        case PatientGroup::WIS: return "WIS";
    }
    return "?";
}

inline PatientGroup group_from_name(const std::string& s) {
    if (s == "LVO") return PatientGroup::LVO;
    if (s == "Non-LVO" || s == "NonLVO") return PatientGroup::NonLVO;
    if (s == "WIS") return PatientGroup::WIS;
    throw ConfigError("unknown patient group '" + s + "'");
}

// Per-voxel class labels.
inline constexpr std::uint8_t kLabelHealthy = 0;
inline constexpr std::uint8_t kLabelPenumbra = 1;
inline constexpr std::uint8_t kLabelCore = 2;
inline constexpr std::uint8_t kLabelOutsideBrain = 255;
inline constexpr int kNumClasses = 3;

}  // namespace ctpseg
