#include <filesystem>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "ctpseg/pipeline.hpp"
#include "ctpseg/version.hpp"

namespace fs = std::filesystem;
using namespace ctpseg;

namespace {

void require_exists(const std::string& path, const char* what) {
    if (!fs::exists(path))
        throw ConfigError(std::string(what) + " '" + path + "' does not exist");
}

int run(int argc, char** argv) {
    CLI::App app{"Spatio-temporal CT perfusion segmentation engine"};
    app.set_version_flag("--version", std::string(version_string()));
    app.require_subcommand(1);
    app.fallthrough(true);
    int jobs = 1;
    app.add_option("--jobs", jobs, "Worker threads for per-patient work")->check(CLI::PositiveNumber);

    auto* synth = app.add_subcommand("synth", "Generate synthetic perfusion phantoms");
    std::string synth_spec, synth_out;
    int synth_count = 1;
    std::uint64_t synth_seed = 0;
    std::string synth_precision = "f32";
    synth->add_option("spec", synth_spec, "Phantom spec JSON")->required();
    synth->add_option("out_dir", synth_out, "Output directory")->required();
    synth->add_option("--count", synth_count, "Number of studies")->check(CLI::NonNegativeNumber);
    synth->add_option("--seed", synth_seed, "Base seed; study i uses seed+i");
    synth->add_option("--precision", synth_precision, "Scalar width: f32|f64");

    auto* preprocess = app.add_subcommand("preprocess", "Run the preprocessing chain");
    std::string pre_in, pre_out;
    bool no_he = false, no_gamma = false, no_zscore = false, no_resample = false;
    preprocess->add_option("in_dir", pre_in, "Input directory with dataset.json")->required();
    preprocess->add_option("out_dir", pre_out, "Output directory")->required();
    preprocess->add_flag("--no-he", no_he, "Skip histogram equalization");
    preprocess->add_flag("--no-gamma", no_gamma, "Skip gamma correction");
    preprocess->add_flag("--no-zscore", no_zscore, "Skip z-score normalization");
    preprocess->add_flag("--no-resample", no_resample, "Skip temporal resampling");

    auto* train = app.add_subcommand("train", "Train a model");
    std::string train_config, train_data, train_model;
    train->add_option("config", train_config, "Training config JSON")->required();
    train->add_option("data_dir", train_data, "Preprocessed data directory")->required();
    train->add_option("out_model", train_model, "Checkpoint output path")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate a model over a split");
    std::string eval_model, eval_data, eval_report, eval_split = "test";
    int eval_mc = 1;
    std::uint64_t eval_seed = 0;
    eval->add_option("model", eval_model, "Checkpoint path")->required();
    eval->add_option("data_dir", eval_data, "Preprocessed data directory")->required();
    eval->add_option("report", eval_report, "Report CSV output path")->required();
    eval->add_option("--split", eval_split, "train|validation|test");
    eval->add_option("--mc-samples", eval_mc, "Monte Carlo dropout samples")->check(CLI::PositiveNumber);
    eval->add_option("--seed", eval_seed, "Monte Carlo seed");

    auto* predict = app.add_subcommand("predict", "Segment one study");
    std::string pred_model, pred_study, pred_out;
    int pred_mc = 1;
    std::uint64_t pred_seed = 0;
    bool pred_overlay = false;
    predict->add_option("model", pred_model, "Checkpoint path")->required();
    predict->add_option("study", pred_study, "Input study (.ctp4)")->required();
    predict->add_option("out_mask", pred_out, "Output mask path (.ctp4)")->required();
    predict->add_option("--mc-samples", pred_mc, "Monte Carlo dropout samples")->check(CLI::PositiveNumber);
    predict->add_option("--seed", pred_seed, "Monte Carlo seed");
    predict->add_flag("--overlay", pred_overlay, "Emit per-slice PNG overlays");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 2;  // stable contract: usage errors exit 2
    }

    if (synth->parsed()) {
        require_exists(synth_spec, "phantom spec");
        SynthOptions opts;
        opts.base = phantom_spec_from_json_file(synth_spec);
        opts.count = synth_count;
        opts.seed = synth_seed;
        opts.precision = precision_from_name(synth_precision);
        opts.out_dir = synth_out;
        opts.jobs = jobs;
        auto res = cmd_synth(opts);
        for (const auto& e : res.errors) std::cerr << "error: " << e << "\n";
        return res.exit_code;
    }
    if (preprocess->parsed()) {
        require_exists(pre_in, "input directory");
        PreprocessOptions opts;
        opts.in_dir = pre_in;
        opts.out_dir = pre_out;
        opts.flags.histogram_equalization = !no_he;
        opts.flags.gamma = !no_gamma;
        opts.flags.zscore = !no_zscore;
        opts.flags.resample = !no_resample;
        opts.jobs = jobs;
        auto res = cmd_preprocess(opts);
        for (const auto& e : res.errors) std::cerr << "error: " << e << "\n";
        return res.exit_code;
    }
    if (train->parsed()) {
        require_exists(train_config, "training config");
        require_exists(train_data, "data directory");
        TrainOptions opts;
        opts.config_path = train_config;
        opts.data_dir = train_data;
        opts.out_model = train_model;
        opts.jobs = jobs;
        auto res = cmd_train(opts);
        return res.exit_code;
    }
    if (eval->parsed()) {
        require_exists(eval_model, "model");
        require_exists(eval_data, "data directory");
        EvalOptions opts;
        opts.model_path = eval_model;
        opts.data_dir = eval_data;
        opts.report_path = eval_report;
        opts.split = split_from_name(eval_split);
        opts.mc_samples = eval_mc;
        opts.seed = eval_seed;
        opts.jobs = jobs;
        auto res = cmd_eval(opts);
        for (const auto& e : res.errors) std::cerr << "error: " << e << "\n";
        return res.exit_code;
    }
    if (predict->parsed()) {
        require_exists(pred_model, "model");
        require_exists(pred_study, "study");
        PredictOptions opts;
        opts.model_path = pred_model;
        opts.study_path = pred_study;
        opts.out_mask = pred_out;
        opts.mc_samples = pred_mc;
        opts.seed = pred_seed;
        opts.overlay = pred_overlay;
        auto res = cmd_predict(opts);
        return res.exit_code;
    }
    return 2;
}

}  // namespace

int main(int argc, char** argv) {
    try {
        return run(argc, argv);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const FormatError& e) {
        std::cerr << "format error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
}
