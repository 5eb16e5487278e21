#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "ctpseg/conv.hpp"
#include "ctpseg/io.hpp"
#include "ctpseg/losses.hpp"
#include "ctpseg/metrics.hpp"
#include "ctpseg/phantom.hpp"
#include "ctpseg/preprocess.hpp"
#include "ctpseg/version.hpp"

namespace py = pybind11;
using namespace ctpseg;

namespace {

AxisRoles roles_for_rank(int rank) {
    switch (rank) {
        case 1: return {Axis::Time};
        case 2: return {Axis::Width, Axis::Height};
        case 3: return {Axis::Width, Axis::Height, Axis::Depth};
        case 4: return {Axis::Width, Axis::Height, Axis::Depth, Axis::Time};
        default: throw ShapeError("unsupported array rank " + std::to_string(rank));
    }
}

template <typename T>
Tensor<T> tensor_from(const py::array_t<T, py::array::c_style | py::array::forcecast>& arr,
                      AxisRoles roles = {}) {
    const int rank = static_cast<int>(arr.ndim());
    if (roles.empty()) roles = roles_for_rank(rank);
    if (static_cast<int>(roles.size()) != rank) throw ShapeError("array rank mismatch");
    Shape dims;
    for (int k = 0; k < rank; ++k) dims.push_back(arr.shape(k));
    std::vector<T> data(arr.data(), arr.data() + arr.size());
    return Tensor<T>(std::move(dims), std::move(roles), std::move(data));
}

template <typename T>
py::array_t<T> array_from(const Tensor<T>& t) {
    std::vector<py::ssize_t> shape;
    for (auto d : t.dims()) shape.push_back(static_cast<py::ssize_t>(d));
    py::array_t<T> out(shape);
    std::copy(t.data(), t.data() + t.size(), out.mutable_data());
    return out;
}

Padding padding_from(const std::string& s) {
    if (s == "valid") return Padding::Valid;
    if (s == "same") return Padding::Same;
    throw ConfigError("padding must be 'valid' or 'same'");
}

Conv4dMode mode_from(const std::string& s) {
    if (s == "direct") return Conv4dMode::Direct;
    if (s == "decomposed") return Conv4dMode::Decomposed;
    throw ConfigError("mode must be 'direct' or 'decomposed'");
}

using Arr = py::array_t<double, py::array::c_style | py::array::forcecast>;
using MaskArr = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

// 2D+time kernels carry (width, height, time) roles.
AxisRoles kernel_roles_wht() { return {Axis::Width, Axis::Height, Axis::Time}; }

VolumeMeta meta_from_kwargs(double pixel_spacing_mm, double slice_thickness_mm) {
    VolumeMeta meta;
    meta.pixel_spacing_mm = pixel_spacing_mm;
    meta.slice_thickness_mm = slice_thickness_mm;
    return meta;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Spatio-temporal CT perfusion segmentation core";
    m.attr("__version__") = version_string();

    py::register_exception<ShapeError>(m, "ShapeError", PyExc_ValueError);
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);
    py::register_exception<DataError>(m, "DataError", PyExc_RuntimeError);
    py::register_exception<FormatError>(m, "FormatError", PyExc_RuntimeError);

    // convolution calculus ------------------------------------------------
    m.def(
        "conv2d",
        [](const Arr& input, const Arr& kernel, const std::string& padding) {
            return array_from(conv2d(tensor_from(input), KernelSpec<double>(tensor_from(kernel)),
                                     {padding_from(padding)}));
        },
        py::arg("input"), py::arg("kernel"), py::arg("padding") = "valid",
        "2D convolution; rank-3 inputs convolve slice by slice over the third axis.");

    m.def(
        "conv3d",
        [](const Arr& input, const Arr& kernel, const std::string& padding,
           const std::string& binding) {
            ConvOptions opts{padding_from(padding), binding == "time"
                                                        ? KernelBinding::Temporal
                                                        : KernelBinding::SpatialDepth};
            if (binding != "time" && binding != "depth")
                throw ConfigError("binding must be 'depth' or 'time'");
            AxisRoles kr = binding == "time"
                               ? kernel_roles_wht()
                               : AxisRoles{Axis::Width, Axis::Height, Axis::Depth};
            return array_from(
                conv3d(tensor_from(input), KernelSpec<double>(tensor_from(kernel, kr)), opts));
        },
        py::arg("input"), py::arg("kernel"), py::arg("padding") = "valid",
        py::arg("binding") = "depth",
        "3D convolution; rank-4 inputs broadcast over time (binding='depth') or depth "
        "(binding='time').");

    m.def(
        "conv4d",
        [](const Arr& input, const Arr& kernel, const std::string& mode,
           const std::string& padding) {
            return array_from(conv4d(tensor_from(input), KernelSpec<double>(tensor_from(kernel)),
                                     mode_from(mode), {padding_from(padding)}));
        },
        py::arg("input"), py::arg("kernel"), py::arg("mode") = "decomposed",
        py::arg("padding") = "valid",
        "True non-separable 4D convolution, evaluated directly or as a sum of 3D convolutions "
        "over depth.");

    m.def(
        "grouped_conv4d",
        [](const Arr& input, const Arr& k0, const Arr& k1, const Arr& k2,
           const std::string& padding, const std::string& mode) {
            std::array<Tensor<double>, 3> ks = {tensor_from(k0, kernel_roles_wht()),
                                                tensor_from(k1, kernel_roles_wht()),
                                                tensor_from(k2, kernel_roles_wht())};
            return array_from(grouped_conv4d_layer(tensor_from(input), ks,
                                                   {padding_from(padding)}, mode_from(mode)));
        },
        py::arg("input"), py::arg("k0"), py::arg("k1"), py::arg("k2"),
        py::arg("padding") = "same", py::arg("mode") = "decomposed",
        "Grouped spatio-temporal layer over a (X, Y, 3, T) input with one shared 2D+time kernel "
        "per depth group.");

    m.def(
        "maxpool",
        [](const Arr& input, const std::vector<std::int64_t>& sizes) {
            return array_from(maxpool(tensor_from(input), Shape(sizes.begin(), sizes.end())));
        },
        py::arg("input"), py::arg("sizes"));

    m.def(
        "upsample2d",
        [](const Arr& input, std::int64_t factor) {
            return array_from(upsample2d(tensor_from(input), factor));
        },
        py::arg("input"), py::arg("factor") = 2);

    m.def(
        "leaky_relu",
        [](const Arr& input, double alpha) {
            return array_from(leaky_relu(tensor_from(input), alpha));
        },
        py::arg("input"), py::arg("alpha") = 1.0 / 3.0);

    m.def(
        "softmax",
        [](const Arr& input, int axis) {
            if (axis < 0) axis += static_cast<int>(input.ndim());
            return array_from(softmax(tensor_from(input), axis));
        },
        py::arg("input"), py::arg("axis") = -1,
        "Softmax along `axis` (negative counts from the end).");

    // losses ---------------------------------------------------------------
    auto label_tensor = [](const MaskArr& labels) {
        AxisRoles r = labels.ndim() == 2 ? AxisRoles{Axis::Width, Axis::Height}
                                         : roles_for_rank(static_cast<int>(labels.ndim()));
        return tensor_from(labels, r);
    };
    auto prob_tensor = [](const Arr& probs) {
        if (probs.ndim() != 3) throw ShapeError("probability image must be (X, Y, C)");
        return tensor_from(probs, {Axis::Width, Axis::Height, Axis::Channel});
    };

    m.def(
        "tversky_index",
        [=](const Arr& probs, const MaskArr& labels, int cls, double alpha, double beta) {
            return tversky_index(prob_tensor(probs), label_tensor(labels), cls, alpha, beta);
        },
        py::arg("probs"), py::arg("labels"), py::arg("cls"), py::arg("alpha") = 0.7,
        py::arg("beta") = 0.3);

    m.def(
        "focal_tversky_loss",
        [=](const Arr& probs, const MaskArr& labels, double alpha, double beta, double gamma) {
            return focal_tversky_loss(prob_tensor(probs), label_tensor(labels), alpha, beta,
                                      gamma);
        },
        py::arg("probs"), py::arg("labels"), py::arg("alpha") = 0.7, py::arg("beta") = 0.3,
        py::arg("gamma") = 4.0 / 3.0);

    m.def(
        "soft_dice_loss",
        [=](const Arr& probs, const MaskArr& labels) {
            return soft_dice_loss(prob_tensor(probs), label_tensor(labels));
        },
        py::arg("probs"), py::arg("labels"));

    m.def(
        "dice_loss",
        [=](const Arr& probs, const MaskArr& labels) {
            return dice_loss(prob_tensor(probs), label_tensor(labels));
        },
        py::arg("probs"), py::arg("labels"));

    m.def(
        "weighted_cce",
        [=](const Arr& probs, const MaskArr& labels, py::object weights) {
            if (weights.is_none())
                return weighted_cce<double>(prob_tensor(probs), label_tensor(labels));
            const Tensor<double> w = prob_tensor(weights.cast<Arr>());
            return weighted_cce(prob_tensor(probs), label_tensor(labels), &w);
        },
        py::arg("probs"), py::arg("labels"), py::arg("weights") = py::none());

    // metrics ----------------------------------------------------------------
    m.def(
        "dice_coeff",
        [=](const MaskArr& pred, const MaskArr& gt, int cls) {
            return dice_coeff(tensor_from(pred, roles_for_rank(static_cast<int>(pred.ndim()))),
                              tensor_from(gt, roles_for_rank(static_cast<int>(gt.ndim()))), cls);
        },
        py::arg("pred"), py::arg("gt"), py::arg("cls") = 1);

    m.def(
        "hausdorff_mm",
        [=](const MaskArr& pred, const MaskArr& gt, int cls, double pixel_spacing_mm,
            double slice_thickness_mm, const std::string& mode) {
            HausdorffMode hm = mode == "3d" ? HausdorffMode::Full3d : HausdorffMode::PerSlice2d;
            if (mode != "3d" && mode != "slice") throw ConfigError("mode must be 'slice' or '3d'");
            auto r = hausdorff_mm(
                tensor_from(pred, roles_for_rank(static_cast<int>(pred.ndim()))),
                tensor_from(gt, roles_for_rank(static_cast<int>(gt.ndim()))), cls,
                meta_from_kwargs(pixel_spacing_mm, slice_thickness_mm), hm);
            return py::make_tuple(r.mm, r.any_slice_skipped, r.empty);
        },
        py::arg("pred"), py::arg("gt"), py::arg("cls") = 1, py::arg("pixel_spacing_mm") = 0.4258,
        py::arg("slice_thickness_mm") = 5.0, py::arg("mode") = "slice",
        "Returns (distance_mm, any_slice_skipped, empty).");

    m.def(
        "delta_v_ml",
        [=](const MaskArr& pred, const MaskArr& gt, int cls, double pixel_spacing_mm,
            double slice_thickness_mm) {
            return delta_v_ml(tensor_from(pred, roles_for_rank(static_cast<int>(pred.ndim()))),
                              tensor_from(gt, roles_for_rank(static_cast<int>(gt.ndim()))), cls,
                              meta_from_kwargs(pixel_spacing_mm, slice_thickness_mm));
        },
        py::arg("pred"), py::arg("gt"), py::arg("cls") = 1, py::arg("pixel_spacing_mm") = 0.4258,
        py::arg("slice_thickness_mm") = 5.0);

    // preprocessing ---------------------------------------------------------
    m.def(
        "hu_convert",
        [](const Arr& raw, double rescale_slope, double rescale_intercept) {
            VolumeMeta meta;
            meta.rescale_slope = rescale_slope;
            meta.rescale_intercept = rescale_intercept;
            return array_from(hu_convert(tensor_from(raw), meta));
        },
        py::arg("raw"), py::arg("rescale_slope") = 1.0, py::arg("rescale_intercept") = 0.0);

    m.def(
        "brain_mask",
        [](const Arr& hu) { return array_from(brain_mask(tensor_from(hu))); }, py::arg("hu"),
        "Largest 3D connected component inside the [0, 100] HU window, holes filled. "
        "Rank-4 inputs are reduced by their temporal mean.");

    m.def(
        "enhance",
        [](const Arr& volume, const MaskArr& mask, bool histogram_equalization, bool gamma) {
            EnhanceOptions opts;
            opts.histogram_equalization = histogram_equalization;
            opts.gamma = gamma;
            auto res = enhance(tensor_from(volume),
                               tensor_from(mask, {Axis::Width, Axis::Height, Axis::Depth}), opts);
            return py::make_tuple(array_from(res.volume), res.constant_input);
        },
        py::arg("volume"), py::arg("mask"), py::arg("histogram_equalization") = true,
        py::arg("gamma") = true, "Returns (enhanced_volume, constant_input_flag).");

    m.def(
        "zscore",
        [](const Arr& volume, const MaskArr& mask) {
            return array_from(zscore(tensor_from(volume),
                                     tensor_from(mask, {Axis::Width, Axis::Height, Axis::Depth})));
        },
        py::arg("volume"), py::arg("mask"));

    m.def(
        "temporal_resample",
        [](const Arr& volume, const std::vector<double>& schedule, double target_dt) {
            CtpStudy<double> study;
            study.raw = tensor_from(volume);
            study.meta.time_schedule = schedule;
            auto out = temporal_resample(study, target_dt);
            return py::make_tuple(array_from(out.raw), out.meta.time_schedule);
        },
        py::arg("volume"), py::arg("schedule"), py::arg("target_dt") = 1.0,
        "Returns (resampled_volume, uniform_schedule).");

    // phantoms and containers -------------------------------------------------
    m.def(
        "make_phantom",
        [](std::int64_t size_x, std::int64_t size_y, std::int64_t size_z,
           const std::vector<double>& schedule, std::uint64_t seed, const std::string& group,
           double noise_sigma) {
            PhantomSpec spec;
            spec.size_x = size_x;
            spec.size_y = size_y;
            spec.size_z = size_z;
            if (!schedule.empty()) spec.time_schedule = schedule;
            spec.seed = seed;
            spec.group = group_from_name(group);
            spec.noise_sigma_raw = noise_sigma;
            auto [study, mask] = make_phantom<double>(spec);
            py::dict meta;
            meta["pixel_spacing_mm"] = study.meta.pixel_spacing_mm;
            meta["slice_thickness_mm"] = study.meta.slice_thickness_mm;
            meta["time_schedule"] = study.meta.time_schedule;
            meta["rescale_slope"] = study.meta.rescale_slope;
            meta["rescale_intercept"] = study.meta.rescale_intercept;
            return py::make_tuple(array_from(study.raw), array_from(mask), meta);
        },
        py::arg("size_x") = 32, py::arg("size_y") = 32, py::arg("size_z") = 3,
        py::arg("schedule") = std::vector<double>{}, py::arg("seed") = 0,
        py::arg("group") = "LVO", py::arg("noise_sigma") = 1.0,
        "Returns (study, mask, meta); the default schedule is the clinical 30-frame protocol.");

    m.def(
        "split_dataset",
        [](const std::vector<std::string>& groups, std::uint64_t seed) {
            std::vector<PatientGroup> g;
            for (const auto& s : groups) g.push_back(group_from_name(s));
            std::vector<std::string> out;
            for (Split s : split_dataset(g, seed)) out.push_back(split_name(s));
            return out;
        },
        py::arg("groups"), py::arg("seed") = 0);

    m.def(
        "write_study",
        [](const std::string& path, const Arr& volume, const std::vector<double>& schedule,
           double pixel_spacing_mm, double slice_thickness_mm, double rescale_slope,
           double rescale_intercept) {
            CtpStudy<double> study;
            study.raw = tensor_from(volume);
            study.meta.time_schedule = schedule;
            study.meta.pixel_spacing_mm = pixel_spacing_mm;
            study.meta.slice_thickness_mm = slice_thickness_mm;
            study.meta.rescale_slope = rescale_slope;
            study.meta.rescale_intercept = rescale_intercept;
            write_study(path, study);
        },
        py::arg("path"), py::arg("volume"), py::arg("schedule"),
        py::arg("pixel_spacing_mm") = 0.4258, py::arg("slice_thickness_mm") = 5.0,
        py::arg("rescale_slope") = 1.0, py::arg("rescale_intercept") = 0.0);

    m.def(
        "read_study",
        [](const std::string& path) {
            auto study = read_study<double>(path);
            py::dict meta;
            meta["pixel_spacing_mm"] = study.meta.pixel_spacing_mm;
            meta["slice_thickness_mm"] = study.meta.slice_thickness_mm;
            meta["time_schedule"] = study.meta.time_schedule;
            meta["rescale_slope"] = study.meta.rescale_slope;
            meta["rescale_intercept"] = study.meta.rescale_intercept;
            return py::make_tuple(array_from(study.raw), meta);
        },
        py::arg("path"), "Returns (volume, meta).");

    m.def(
        "read_mask",
        [](const std::string& path) {
            auto mf = read_mask(path);
            return array_from(mf.mask);
        },
        py::arg("path"));
}
