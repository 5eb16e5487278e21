#pragma once

#include <array>
#include <cmath>
#include <utility>

#include "ctpseg/rng.hpp"
#include "ctpseg/study.hpp"

namespace ctpseg {

// Synthetic perfusion phantom: an elliptic-cylinder "brain" of healthy
// tissue in air, optionally carrying a penumbra ellipsoid with a nested
// core. Each class follows its own gamma-variate time-density curve; the
// curve height and peak time encode the perfusion state.

struct TissueCurve {
    double baseline_raw;    // raw scanner units (HU = raw*RS + RI)
    double amplitude_raw;   // contrast enhancement on top of the baseline
    double onset_s;         // arrival delay
    double time_to_peak_s;  // peak位置 measured from onset
    double shape;           // gamma-variate sharpness

    // Normalized gamma-variate: 0 before onset, peaks at 1, decays.
    double value_at(double t) const {
        const double tau = (t - onset_s) / time_to_peak_s;
        if (tau <= 0.0) return baseline_raw;
        return baseline_raw + amplitude_raw * std::pow(tau, shape) * std::exp(shape * (1.0 - tau));
    }

    double peak_time_s() const { return onset_s + time_to_peak_s; }
};

struct PhantomSpec {
    std::int64_t size_x = 32;
    std::int64_t size_y = 32;
    std::int64_t size_z = 3;
    std::vector<double> time_schedule = VolumeMeta::clinical_schedule();
    double pixel_spacing_mm = 0.4258;
    double slice_thickness_mm = 5.0;
    double rescale_slope = 1.0;
    double rescale_intercept = -1024.0;

    double air_raw = 24.0;  // ~ -1000 HU
    TissueCurve healthy = {1064.0, 30.0, 4.0, 8.0, 3.0};
    TissueCurve penumbra = {1064.0, 18.0, 7.0, 14.0, 3.0};
    TissueCurve core = {1064.0, 8.0, 9.0, 18.0, 3.0};

    double brain_radius_frac = 0.44;     // of the half-extent, in plane
    double penumbra_radius_frac = 0.62;  // of the brain radius
    double core_radius_frac = 0.32;      // of the brain radius; < penumbra
    double non_lvo_scale = 0.65;         // lesion shrink factor for Non-LVO cases
    double geometry_jitter = 0.15;       // relative per-study variation
    double noise_sigma_raw = 1.0;
    std::uint64_t seed = 0;
    PatientGroup group = PatientGroup::LVO;  // WIS studies carry no lesion

    void validate() const {
        if (size_x < 4 || size_y < 4 || size_z < 1) throw ConfigError("phantom extents too small");
        if (time_schedule.size() < 2) throw ConfigError("phantom needs at least two time points");
        for (std::size_t i = 1; i < time_schedule.size(); ++i)
            if (!(time_schedule[i] > time_schedule[i - 1]))
                throw ConfigError("phantom time schedule must be strictly increasing");
        if (!(healthy.amplitude_raw > penumbra.amplitude_raw &&
              penumbra.amplitude_raw > core.amplitude_raw))
            throw ConfigError("curve amplitudes must be ordered healthy > penumbra > core");
        if (!(core_radius_frac < penumbra_radius_frac))
            throw ConfigError("core region must nest inside the penumbra region");
        if (!(brain_radius_frac > 0.0 && penumbra_radius_frac > 0.0 && core_radius_frac > 0.0))
            throw ConfigError("phantom radii must be positive");
        if (noise_sigma_raw < 0.0) throw ConfigError("noise sigma must be nonnegative");
        if (geometry_jitter < 0.0 || geometry_jitter > 0.9)
            throw ConfigError("geometry jitter must lie in [0, 0.9]");
        if (!(non_lvo_scale > 0.0 && non_lvo_scale <= 1.0))
            throw ConfigError("non-LVO lesion scale must lie in (0, 1]");
    }
};

// Deterministic phantom synthesis: the same spec and seed always produce
// bit-identical study and mask.
template <typename T>
std::pair<CtpStudy<T>, Tensor<std::uint8_t>> make_phantom(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(spec.seed);

    const std::int64_t nx = spec.size_x, ny = spec.size_y, nz = spec.size_z;
    const std::int64_t nt = static_cast<std::int64_t>(spec.time_schedule.size());
    const double cx = (static_cast<double>(nx) - 1.0) / 2.0;
    const double cy = (static_cast<double>(ny) - 1.0) / 2.0;
    const double brain_rx = spec.brain_radius_frac * static_cast<double>(nx);
    const double brain_ry = spec.brain_radius_frac * static_cast<double>(ny);

    const bool lesion = spec.group != PatientGroup::WIS;
    // Non-LVO cases mimic more distal occlusions: noticeably smaller areas.
    const double group_scale = spec.group == PatientGroup::NonLVO ? spec.non_lvo_scale : 1.0;

    auto jitter = [&](double v) { return v * (1.0 + spec.geometry_jitter * rng.uniform(-1, 1)); };

    const double pen_r = jitter(spec.penumbra_radius_frac) * group_scale *
                         std::min(brain_rx, brain_ry);
    const double core_r = jitter(spec.core_radius_frac) * group_scale *
                          std::min(brain_rx, brain_ry);
    // lesion centre inside the brain with full penumbra containment
    const double max_off_x = std::max(0.0, brain_rx - pen_r - 1.0);
    const double max_off_y = std::max(0.0, brain_ry - pen_r - 1.0);
    const double lx = cx + rng.uniform(-1, 1) * max_off_x * 0.8;
    const double ly = cy + rng.uniform(-1, 1) * max_off_y * 0.8;
    // core centre jitter keeps the core nested
    const double max_core_off = std::max(0.0, pen_r - core_r - 0.5);
    const double kx = lx + rng.uniform(-1, 1) * max_core_off * 0.5;
    const double ky = ly + rng.uniform(-1, 1) * max_core_off * 0.5;
    const std::int64_t lesion_z = lesion && nz > 1
                                      ? static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(nz)))
                                      : 0;

    Tensor<std::uint8_t> mask({nx, ny, nz}, {Axis::Width, Axis::Height, Axis::Depth});
    CtpStudy<T> study;
    study.raw = Tensor<T>({nx, ny, nz, nt}, {Axis::Width, Axis::Height, Axis::Depth, Axis::Time});
    study.meta.pixel_spacing_mm = spec.pixel_spacing_mm;
    study.meta.slice_thickness_mm = spec.slice_thickness_mm;
    study.meta.time_schedule = spec.time_schedule;
    study.meta.rescale_slope = spec.rescale_slope;
    study.meta.rescale_intercept = spec.rescale_intercept;
    study.group = spec.group;

    for (std::int64_t x = 0; x < nx; ++x) {
        const double dx = (static_cast<double>(x) - cx) / brain_rx;
        for (std::int64_t y = 0; y < ny; ++y) {
            const double dy = (static_cast<double>(y) - cy) / brain_ry;
            const bool in_brain = dx * dx + dy * dy <= 1.0;
            for (std::int64_t z = 0; z < nz; ++z) {
                std::uint8_t label = kLabelOutsideBrain;
                const TissueCurve* curve = nullptr;
                if (in_brain) {
                    label = kLabelHealthy;
                    curve = &spec.healthy;
                    if (lesion) {
                        // lesions span neighbouring slices with shrinking radius
                        const double zfall =
                            1.0 - 0.35 * static_cast<double>(std::llabs(z - lesion_z));
                        if (zfall > 0.0) {
                            const double pdx = static_cast<double>(x) - lx;
                            const double pdy = static_cast<double>(y) - ly;
                            // core voxels only ever occur inside the penumbra region
                            if (pdx * pdx + pdy * pdy <= pen_r * pen_r * zfall * zfall) {
                                label = kLabelPenumbra;
                                curve = &spec.penumbra;
                                const double cdx = static_cast<double>(x) - kx;
                                const double cdy = static_cast<double>(y) - ky;
                                if (cdx * cdx + cdy * cdy <= core_r * core_r * zfall * zfall) {
                                    label = kLabelCore;
                                    curve = &spec.core;
                                }
                            }
                        }
                    }
                }
                mask.at({x, y, z}) = label;
                T* trace = study.raw.data() + study.raw.offset({x, y, z, 0});
                for (std::int64_t t = 0; t < nt; ++t) {
                    const double base = curve
                                            ? curve->value_at(spec.time_schedule[static_cast<std::size_t>(t)])
                                            : spec.air_raw;
                    const double noisy =
                        base + (spec.noise_sigma_raw > 0.0 ? rng.normal(0.0, spec.noise_sigma_raw)
                                                           : 0.0);
                    trace[t] = static_cast<T>(noisy);
                }
            }
        }
    }
    return {std::move(study), std::move(mask)};
}

}  // namespace ctpseg
