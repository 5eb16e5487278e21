#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "ctpseg/dataset.hpp"
#include "ctpseg/losses.hpp"
#include "ctpseg/network.hpp"
#include "ctpseg/optim.hpp"
#include "ctpseg/phantom.hpp"

namespace ctpseg {

// Batch pipeline behind the command-line front end. Every command writes a
// run manifest (command, configs, seed, version, timestamps, outputs) next
// to its outputs; data artifacts are byte-reproducible for a fixed seed in
// 64-bit mode.

enum class Precision { F32, F64 };

inline const char* precision_name(Precision p) { return p == Precision::F32 ? "f32" : "f64"; }
inline Precision precision_from_name(const std::string& s) {
    if (s == "f32") return Precision::F32;
    if (s == "f64") return Precision::F64;
    throw ConfigError("unknown precision '" + s + "' (expected f32|f64)");
}

struct SynthOptions {
    PhantomSpec base;            // per-study jitter applied on top
    int count = 1;
    std::uint64_t seed = 0;
    Precision precision = Precision::F32;
    std::string out_dir;
    int jobs = 1;
};

struct PreprocessFlags {
    bool histogram_equalization = true;
    bool gamma = true;
    bool zscore = true;
    bool resample = true;
};

struct PreprocessOptions {
    std::string in_dir;
    std::string out_dir;
    PreprocessFlags flags;
    int jobs = 1;
};

struct TrainJobConfig {
    NetworkConfig network;
    TrainConfig train;
    LossKind loss = LossKind::WeightedCce;
    LossOptions loss_options;
    Precision precision = Precision::F32;
    bool derive_input_extents = false;  // fill input x/y/t from the data
};

struct TrainOptions {
    std::string config_path;  // JSON TrainJobConfig
    std::string data_dir;
    std::string out_model;
    int jobs = 1;
};

struct EvalOptions {
    std::string model_path;
    std::string data_dir;
    std::string report_path;
    Split split = Split::Test;
    int mc_samples = 1;
    std::uint64_t seed = 0;
    int jobs = 1;
};

struct PredictOptions {
    std::string model_path;
    std::string study_path;
    std::string out_mask;
    int mc_samples = 1;
    std::uint64_t seed = 0;
    bool overlay = false;
};

struct CommandResult {
    int exit_code = 0;  // 0 success, 1 partial failure, 2 usage/config error
    std::vector<std::string> errors;
};

CommandResult cmd_synth(const SynthOptions& opts);
CommandResult cmd_preprocess(const PreprocessOptions& opts);
CommandResult cmd_train(const TrainOptions& opts);
CommandResult cmd_eval(const EvalOptions& opts);
CommandResult cmd_predict(const PredictOptions& opts);

// JSON codecs used by the CLI and tests.
PhantomSpec phantom_spec_from_json_file(const std::string& path);
TrainJobConfig train_job_from_json_file(const std::string& path);
std::string network_config_to_json(const NetworkConfig& cfg, LossKind loss, Precision precision);
void network_config_from_json(const std::string& json, NetworkConfig* cfg, LossKind* loss,
                              Precision* precision);

}  // namespace ctpseg
