#include "ctpseg/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <mutex>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "ctpseg/io.hpp"
#include "ctpseg/metrics.hpp"
#include "ctpseg/png.hpp"
#include "ctpseg/preprocess.hpp"
#include "ctpseg/train.hpp"
#include "ctpseg/version.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace ctpseg {

namespace {

std::string iso_now() {
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char buf[32];
    std::tm tm_utc{};
    gmtime_r(&t, &tm_utc);
    std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm_utc);
    return buf;
}

// One manifest per run, next to the outputs.
class RunManifest {
public:
    RunManifest(std::string command, std::uint64_t seed) {
        j_["command"] = std::move(command);
        j_["version"] = version_string();
        j_["seed"] = seed;
        j_["started_at"] = iso_now();
        j_["configs"] = json::object();
        j_["flags"] = json::object();
        j_["outputs"] = json::array();
    }
    void config(const std::string& name, const std::string& path) { j_["configs"][name] = path; }
    void flag(const std::string& name, const json& value) { j_["flags"][name] = value; }
    void output(const std::string& path) { j_["outputs"].push_back(path); }
    void errors(const std::vector<std::string>& errs) {
        if (!errs.empty()) j_["errors"] = errs;
    }
    void write(const std::string& path) {
        j_["finished_at"] = iso_now();
        std::ofstream out(path);
        if (!out) throw DataError("cannot write manifest '" + path + "'");
        out << j_.dump(2) << "\n";
    }

private:
    json j_;
};

void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& fn) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> pool;
    std::size_t next = 0;
    std::mutex mu;
    const int workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
    for (int w = 0; w < workers; ++w)
        pool.emplace_back([&] {
            for (;;) {
                std::size_t i;
                {
                    std::lock_guard<std::mutex> lock(mu);
                    if (next >= n) return;
                    i = next++;
                }
                fn(i);
            }
        });
    for (auto& t : pool) t.join();
}

std::string patient_name(int index) {
    char buf[16];
    std::snprintf(buf, sizeof(buf), "p%04d", index);
    return buf;
}

json load_json_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open config '" + path + "'");
    try {
        json j;
        in >> j;
        return j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSON in '" + path + "': " + e.what());
    }
}

TissueCurve curve_from_json(const json& j, TissueCurve base) {
    base.baseline_raw = j.value("baseline_raw", base.baseline_raw);
    base.amplitude_raw = j.value("amplitude_raw", base.amplitude_raw);
    base.onset_s = j.value("onset_s", base.onset_s);
    base.time_to_peak_s = j.value("time_to_peak_s", base.time_to_peak_s);
    base.shape = j.value("shape", base.shape);
    return base;
}

NetworkConfig network_from_json(const json& j) {
    NetworkConfig cfg;
    if (j.contains("input")) {
        const auto& in = j.at("input");
        cfg.input_x = in.value("x", cfg.input_x);
        cfg.input_y = in.value("y", cfg.input_y);
        cfg.input_z = in.value("z", cfg.input_z);
        cfg.input_t = in.value("t", cfg.input_t);
    }
    if (j.contains("time_pool_schedule"))
        cfg.time_pool_schedule = j.at("time_pool_schedule").get<std::vector<std::int64_t>>();
    if (j.contains("temporal_widths"))
        cfg.temporal_widths = j.at("temporal_widths").get<std::vector<std::int64_t>>();
    if (j.contains("spatial_widths"))
        cfg.spatial_widths = j.at("spatial_widths").get<std::vector<std::int64_t>>();
    cfg.dropout_rate = j.value("dropout_rate", cfg.dropout_rate);
    cfg.leaky_alpha = j.value("leaky_alpha", cfg.leaky_alpha);
    cfg.attention_kernel = j.value("attention_kernel", cfg.attention_kernel);
    cfg.init_seed = j.value("init_seed", cfg.init_seed);
    if (j.contains("architecture"))
        cfg.architecture = architecture_from_name(j.at("architecture").get<std::string>());
    return cfg;
}

json network_to_json(const NetworkConfig& cfg) {
    json j;
    j["architecture"] = architecture_name(cfg.architecture);
    j["input"] = {{"x", cfg.input_x}, {"y", cfg.input_y}, {"z", cfg.input_z}, {"t", cfg.input_t}};
    j["time_pool_schedule"] = cfg.time_pool_schedule;
    j["temporal_widths"] = cfg.temporal_widths;
    j["spatial_widths"] = cfg.spatial_widths;
    j["dropout_rate"] = cfg.dropout_rate;
    j["leaky_alpha"] = cfg.leaky_alpha;
    j["attention_kernel"] = cfg.attention_kernel;
    j["init_seed"] = cfg.init_seed;
    return j;
}

TrainConfig train_config_from_json(const json& j) {
    TrainConfig cfg;
    cfg.learning_rate = j.value("learning_rate", cfg.learning_rate);
    cfg.decay_factor = j.value("decay_factor", cfg.decay_factor);
    cfg.decay_every_epochs = j.value("decay_every_epochs", cfg.decay_every_epochs);
    cfg.batch_size = j.value("batch_size", cfg.batch_size);
    cfg.early_stop_patience = j.value("early_stop_patience", cfg.early_stop_patience);
    cfg.l1_weight = j.value("l1_weight", cfg.l1_weight);
    cfg.l2_weight = j.value("l2_weight", cfg.l2_weight);
    cfg.max_norm = j.value("max_norm", cfg.max_norm);
    cfg.non_lvo_penalty = j.value("non_lvo_penalty", cfg.non_lvo_penalty);
    cfg.max_epochs = j.value("max_epochs", cfg.max_epochs);
    cfg.seed = j.value("seed", cfg.seed);
    cfg.threads = j.value("threads", cfg.threads);
    return cfg;
}

LossOptions loss_options_from_json(const json& j) {
    LossOptions o;
    o.tversky_alpha = j.value("tversky_alpha", o.tversky_alpha);
    o.tversky_beta = j.value("tversky_beta", o.tversky_beta);
    o.focal_gamma = j.value("focal_gamma", o.focal_gamma);
    return o;
}

struct LoadedModel {
    NetworkConfig cfg;
    LossKind loss = LossKind::WeightedCce;
    Precision precision = Precision::F32;
    LoadedCheckpoint ckpt;
};

LoadedModel load_model(const std::string& path) {
    LoadedModel m;
    m.ckpt = load_checkpoint(path);
    network_config_from_json(m.ckpt.config_json, &m.cfg, &m.loss, &m.precision);
    return m;
}

template <typename T>
Network<T> instantiate(const LoadedModel& m) {
    Network<T> net = build_network<T>(m.cfg);
    assign_params(m.ckpt, net.params());
    return net;
}

std::string csv_field(double v) { return format_double(v); }

struct EvalRow {
    std::string patient_id;
    PatientGroup group;
    int cls;
    double dc, hd, dv;
    std::string hd_flag;
    std::string error;  // nonempty -> error row
};

const char* class_label(int cls) { return cls == kLabelPenumbra ? "penumbra" : "core"; }

template <typename T>
void run_eval(const LoadedModel& model, const EvalOptions& opts,
              const DatasetManifest& manifest, const std::vector<std::size_t>& selected,
              std::vector<EvalRow>& rows, std::vector<std::string>& errors) {
    Network<T> net = instantiate<T>(model);
    const fs::path base = fs::path(opts.data_dir);
    std::mutex mu;
    rows.resize(selected.size() * 2);
    parallel_for(selected.size(), opts.jobs, [&](std::size_t k) {
        const PatientEntry& entry = manifest.patients[selected[k]];
        try {
            CtpStudy<T> study = read_study<T>((base / entry.study_path).string());
            study.patient_id = entry.id;
            MaskFile gt = read_mask((base / entry.mask_path).string());
            auto pred = predict_volume(net, study.raw, model.cfg.architecture, opts.mc_samples,
                                       opts.seed);
            if (pred.mask.dims() != gt.mask.dims())
                throw ShapeError("prediction extents do not match ground truth");
            // non-brain voxels are excluded from evaluation
            Tensor<std::uint8_t> masked = pred.mask;
            for (std::int64_t i = 0; i < masked.size(); ++i)
                if (gt.mask[i] == kLabelOutsideBrain) masked[i] = kLabelOutsideBrain;
            for (int c : {kLabelPenumbra, kLabelCore}) {
                EvalRow row;
                row.patient_id = entry.id;
                row.group = entry.group;
                row.cls = c;
                row.dc = dice_coeff(masked, gt.mask, c);
                auto hd = hausdorff_mm(masked, gt.mask, c, gt.meta);
                row.hd = hd.mm;
                row.hd_flag = hd.empty ? "empty" : (hd.any_slice_skipped ? "skipped" : "");
                row.dv = delta_v_ml(masked, gt.mask, c, gt.meta);
                rows[k * 2 + static_cast<std::size_t>(c - kLabelPenumbra)] = row;
            }
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(mu);
            for (int c : {kLabelPenumbra, kLabelCore}) {
                EvalRow row;
                row.patient_id = entry.id;
                row.group = entry.group;
                row.cls = c;
                row.dc = row.hd = row.dv = 0.0;
                row.error = e.what();
                rows[k * 2 + static_cast<std::size_t>(c - kLabelPenumbra)] = row;
            }
            errors.push_back(entry.id + ": " + e.what());
        }
    });
}

}  // namespace

PhantomSpec phantom_spec_from_json_file(const std::string& path) {
    const json j = load_json_file(path);
    PhantomSpec spec;
    spec.size_x = j.value("size_x", spec.size_x);
    spec.size_y = j.value("size_y", spec.size_y);
    spec.size_z = j.value("size_z", spec.size_z);
    if (j.contains("time_schedule")) {
        if (j.at("time_schedule").is_string()) {
            if (j.at("time_schedule").get<std::string>() != "clinical")
                throw ConfigError("time_schedule must be a list or \"clinical\"");
            spec.time_schedule = VolumeMeta::clinical_schedule();
        } else {
            spec.time_schedule = j.at("time_schedule").get<std::vector<double>>();
        }
    }
    spec.pixel_spacing_mm = j.value("pixel_spacing_mm", spec.pixel_spacing_mm);
    spec.slice_thickness_mm = j.value("slice_thickness_mm", spec.slice_thickness_mm);
    spec.rescale_slope = j.value("rescale_slope", spec.rescale_slope);
    spec.rescale_intercept = j.value("rescale_intercept", spec.rescale_intercept);
    spec.air_raw = j.value("air_raw", spec.air_raw);
    if (j.contains("healthy")) spec.healthy = curve_from_json(j.at("healthy"), spec.healthy);
    if (j.contains("penumbra")) spec.penumbra = curve_from_json(j.at("penumbra"), spec.penumbra);
    if (j.contains("core")) spec.core = curve_from_json(j.at("core"), spec.core);
    spec.brain_radius_frac = j.value("brain_radius_frac", spec.brain_radius_frac);
    spec.penumbra_radius_frac = j.value("penumbra_radius_frac", spec.penumbra_radius_frac);
    spec.core_radius_frac = j.value("core_radius_frac", spec.core_radius_frac);
    spec.non_lvo_scale = j.value("non_lvo_scale", spec.non_lvo_scale);
    spec.geometry_jitter = j.value("geometry_jitter", spec.geometry_jitter);
    spec.noise_sigma_raw = j.value("noise_sigma_raw", spec.noise_sigma_raw);
    spec.seed = j.value("seed", spec.seed);
    return spec;
}

TrainJobConfig train_job_from_json_file(const std::string& path) {
    const json j = load_json_file(path);
    TrainJobConfig cfg;
    if (j.contains("network")) {
        cfg.network = network_from_json(j.at("network"));
        cfg.derive_input_extents = !j.at("network").contains("input");
    } else {
        cfg.derive_input_extents = true;
    }
    if (j.contains("train")) cfg.train = train_config_from_json(j.at("train"));
    if (j.contains("loss")) cfg.loss = loss_from_name(j.at("loss").get<std::string>());
    if (j.contains("loss_options")) cfg.loss_options = loss_options_from_json(j.at("loss_options"));
    if (j.contains("precision"))
        cfg.precision = precision_from_name(j.at("precision").get<std::string>());
    return cfg;
}

std::string network_config_to_json(const NetworkConfig& cfg, LossKind loss, Precision precision) {
    json j;
    j["network"] = network_to_json(cfg);
    j["loss"] = loss_name(loss);
    j["precision"] = precision_name(precision);
    return j.dump();
}

void network_config_from_json(const std::string& text, NetworkConfig* cfg, LossKind* loss,
                              Precision* precision) {
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("malformed embedded model config: ") + e.what());
    }
    *cfg = network_from_json(j.at("network"));
    if (j.contains("loss")) *loss = loss_from_name(j.at("loss").get<std::string>());
    if (j.contains("precision"))
        *precision = precision_from_name(j.at("precision").get<std::string>());
}

CommandResult cmd_synth(const SynthOptions& opts) {
    CommandResult res;
    fs::create_directories(opts.out_dir);
    RunManifest manifest("synth", opts.seed);
    manifest.flag("count", opts.count);
    manifest.flag("precision", precision_name(opts.precision));

    // cohort mix per 10 studies: 5 LVO, 4 Non-LVO, 1 WIS
    const PatientGroup pattern[10] = {
        PatientGroup::LVO,    PatientGroup::LVO,    PatientGroup::LVO,    PatientGroup::LVO,
        PatientGroup::LVO,    PatientGroup::NonLVO, PatientGroup::NonLVO, PatientGroup::NonLVO,
        PatientGroup::NonLVO, PatientGroup::WIS};

    DatasetManifest dataset;
    std::vector<PatientGroup> groups;
    for (int i = 0; i < opts.count; ++i) groups.push_back(pattern[i % 10]);
    const auto splits = split_dataset(groups, opts.seed);

    std::mutex mu;
    std::vector<std::string> errors;
    dataset.patients.resize(static_cast<std::size_t>(opts.count));
    parallel_for(static_cast<std::size_t>(opts.count), opts.jobs, [&](std::size_t i) {
        try {
            PhantomSpec spec = opts.base;
            spec.seed = opts.seed + i;
            spec.group = groups[i];
            const std::string id = patient_name(static_cast<int>(i));
            const std::string study_rel = id + ".ctp4";
            const std::string mask_rel = id + ".mask.ctp4";
            if (opts.precision == Precision::F64) {
                auto [study, mask] = make_phantom<double>(spec);
                study.patient_id = id;
                write_study((fs::path(opts.out_dir) / study_rel).string(), study);
                write_mask((fs::path(opts.out_dir) / mask_rel).string(), mask, study.meta);
            } else {
                auto [study, mask] = make_phantom<float>(spec);
                study.patient_id = id;
                write_study((fs::path(opts.out_dir) / study_rel).string(), study);
                write_mask((fs::path(opts.out_dir) / mask_rel).string(), mask, study.meta);
            }
            PatientEntry entry;
            entry.id = id;
            entry.group = groups[i];
            entry.study_path = study_rel;
            entry.mask_path = mask_rel;
            entry.split = splits[i];
            dataset.patients[i] = std::move(entry);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(mu);
            errors.push_back(patient_name(static_cast<int>(i)) + std::string(": ") + e.what());
        }
    });

    for (const auto& p : dataset.patients) {
        if (p.id.empty()) continue;
        manifest.output(p.study_path);
        manifest.output(p.mask_path);
    }
    if (errors.empty()) {
        write_dataset_manifest((fs::path(opts.out_dir) / "dataset.json").string(), dataset);
        manifest.output("dataset.json");
    }
    manifest.errors(errors);
    manifest.write((fs::path(opts.out_dir) / "manifest.json").string());
    res.errors = errors;
    res.exit_code = errors.empty() ? 0 : 1;
    return res;
}

namespace {

template <typename T>
void preprocess_one(const PatientEntry& entry, const PreprocessOptions& opts) {
    const fs::path in_base(opts.in_dir);
    const fs::path out_base(opts.out_dir);
    CtpStudy<T> study = read_study<T>((in_base / entry.study_path).string());
    study.patient_id = entry.id;
    study.group = entry.group;

    Tensor<T> hu = hu_convert(study.raw, study.meta);
    Tensor<std::uint8_t> mask = brain_mask(hu);
    study.raw = apply_mask(hu, mask);
    // HU conversion is folded in; downstream readers must not rescale again
    study.meta.rescale_slope = 1.0;
    study.meta.rescale_intercept = 0.0;

    if (opts.flags.histogram_equalization || opts.flags.gamma) {
        EnhanceOptions eo;
        eo.histogram_equalization = opts.flags.histogram_equalization;
        eo.gamma = opts.flags.gamma;
        study.raw = enhance(study.raw, mask, eo).volume;
    }
    if (opts.flags.zscore) study.raw = zscore(study.raw, mask);
    if (opts.flags.resample) study = temporal_resample(study, 1.0);

    write_study((out_base / entry.study_path).string(), study);
    if (!entry.mask_path.empty()) {
        MaskFile gt = read_mask((in_base / entry.mask_path).string());
        write_mask((out_base / entry.mask_path).string(), gt.mask, study.meta);
    }
}

}  // namespace

CommandResult cmd_preprocess(const PreprocessOptions& opts) {
    CommandResult res;
    const std::string dataset_path = (fs::path(opts.in_dir) / "dataset.json").string();
    DatasetManifest manifest_in = read_dataset_manifest(dataset_path);
    fs::create_directories(opts.out_dir);

    RunManifest manifest("preprocess", 0);
    manifest.config("dataset", dataset_path);
    manifest.flag("histogram_equalization", opts.flags.histogram_equalization);
    manifest.flag("gamma", opts.flags.gamma);
    manifest.flag("zscore", opts.flags.zscore);
    manifest.flag("resample", opts.flags.resample);

    std::mutex mu;
    std::vector<std::string> errors;
    parallel_for(manifest_in.patients.size(), opts.jobs, [&](std::size_t i) {
        const PatientEntry& entry = manifest_in.patients[i];
        try {
            const Dtype dtype = probe_dtype((fs::path(opts.in_dir) / entry.study_path).string());
            if (dtype == Dtype::F64)
                preprocess_one<double>(entry, opts);
            else
                preprocess_one<float>(entry, opts);
        } catch (const std::exception& e) {
            std::lock_guard<std::mutex> lock(mu);
            errors.push_back(entry.id + ": " + e.what());
        }
    });

    write_dataset_manifest((fs::path(opts.out_dir) / "dataset.json").string(), manifest_in);
    for (const auto& p : manifest_in.patients) {
        manifest.output(p.study_path);
        if (!p.mask_path.empty()) manifest.output(p.mask_path);
    }
    manifest.output("dataset.json");
    manifest.errors(errors);
    manifest.write((fs::path(opts.out_dir) / "manifest.json").string());
    res.errors = errors;
    res.exit_code = errors.empty() ? 0 : 1;
    return res;
}

namespace {

template <typename T>
CommandResult run_train(TrainJobConfig job, const TrainOptions& opts) {
    CommandResult res;
    const std::string dataset_path = (fs::path(opts.data_dir) / "dataset.json").string();
    DatasetManifest manifest_in = read_dataset_manifest(dataset_path);

    std::vector<CtpStudy<T>> studies;
    std::vector<Tensor<std::uint8_t>> masks;
    std::vector<Split> splits;
    for (const auto& entry : manifest_in.patients) {
        CtpStudy<T> s = read_study<T>((fs::path(opts.data_dir) / entry.study_path).string());
        s.patient_id = entry.id;
        s.group = entry.group;
        MaskFile m = read_mask((fs::path(opts.data_dir) / entry.mask_path).string());
        studies.push_back(std::move(s));
        masks.push_back(std::move(m.mask));
        splits.push_back(entry.split);
    }
    if (studies.empty()) throw DataError("dataset '" + dataset_path + "' lists no patients");

    if (job.derive_input_extents) {
        job.network.input_x = studies[0].raw.dim(0);
        job.network.input_y = studies[0].raw.dim(1);
        job.network.input_t = studies[0].raw.dim(3);
    }
    for (const auto& s : studies)
        if (s.raw.dim(0) != job.network.input_x || s.raw.dim(1) != job.network.input_y ||
            s.raw.dim(3) != job.network.input_t)
            throw ShapeError("study '" + s.patient_id + "' extents do not match the network input");

    // class weights from the training split
    std::vector<const Tensor<std::uint8_t>*> train_masks;
    for (std::size_t i = 0; i < masks.size(); ++i)
        if (splits[i] == Split::Train) train_masks.push_back(&masks[i]);
    if (train_masks.empty()) throw DataError("training split is empty");
    const auto class_weights = inverse_class_frequency(train_masks);

    std::vector<SliceSample<T>> train_set, val_set;
    for (std::size_t i = 0; i < studies.size(); ++i) {
        if (splits[i] == Split::Test) continue;
        const double mult =
            studies[i].group == PatientGroup::NonLVO ? job.train.non_lvo_penalty : 1.0;
        auto samples = make_slice_samples(studies[i], masks[i], job.network.architecture,
                                          job.loss == LossKind::WeightedCce ? &class_weights
                                                                            : nullptr,
                                          mult);
        auto& dst = splits[i] == Split::Train ? train_set : val_set;
        for (auto& smp : samples) dst.push_back(std::move(smp));
    }
    if (val_set.empty()) throw DataError("validation split is empty");

    Network<T> net = build_network<T>(job.network);
    TrainOutcome outcome =
        train_network(net, train_set, val_set, job.train, job.loss, job.loss_options);

    const std::string config_json = network_config_to_json(
        job.network, job.loss, std::is_same_v<T, double> ? Precision::F64 : Precision::F32);
    save_checkpoint(opts.out_model, config_json, net.params());

    const fs::path model_path(opts.out_model);
    const std::string history_path =
        (model_path.parent_path() / (model_path.stem().string() + ".history.csv")).string();
    {
        std::ofstream csv(history_path);
        if (!csv) throw DataError("cannot write history '" + history_path + "'");
        csv << "epoch,lr,train_loss,val_loss,stopped\n";
        for (const auto& row : outcome.history)
            csv << row.epoch << "," << csv_field(row.lr) << "," << csv_field(row.train_loss) << ","
                << csv_field(row.val_loss) << "," << (row.stopped ? 1 : 0) << "\n";
    }

    RunManifest manifest("train", job.train.seed);
    manifest.config("train_config", opts.config_path);
    manifest.config("dataset", dataset_path);
    manifest.flag("loss", loss_name(job.loss));
    manifest.flag("precision", std::is_same_v<T, double> ? "f64" : "f32");
    manifest.flag("best_epoch", outcome.best_epoch);
    manifest.flag("best_val_loss", outcome.best_val);
    manifest.output(opts.out_model);
    manifest.output(history_path);
    manifest.write(opts.out_model + ".manifest.json");
    return res;
}

}  // namespace

CommandResult cmd_train(const TrainOptions& opts) {
    TrainJobConfig job = train_job_from_json_file(opts.config_path);
    if (opts.jobs > 1 && job.train.threads <= 1) job.train.threads = opts.jobs;
    if (job.precision == Precision::F64) return run_train<double>(job, opts);
    return run_train<float>(job, opts);
}

CommandResult cmd_eval(const EvalOptions& opts) {
    CommandResult res;
    LoadedModel model = load_model(opts.model_path);
    const std::string dataset_path = (fs::path(opts.data_dir) / "dataset.json").string();
    DatasetManifest manifest_in = read_dataset_manifest(dataset_path);

    std::vector<std::size_t> selected;
    for (std::size_t i = 0; i < manifest_in.patients.size(); ++i)
        if (manifest_in.patients[i].split == opts.split) selected.push_back(i);
    if (selected.empty())
        throw DataError("no patients in split '" + std::string(split_name(opts.split)) + "'");

    std::vector<EvalRow> rows;
    std::vector<std::string> errors;
    if (model.precision == Precision::F64)
        run_eval<double>(model, opts, manifest_in, selected, rows, errors);
    else
        run_eval<float>(model, opts, manifest_in, selected, rows, errors);

    std::ofstream csv(opts.report_path);
    if (!csv) throw DataError("cannot write report '" + opts.report_path + "'");
    csv << "row_type,patient_id,group,class,dc,hd_mm,hd_flag,delta_v_ml,dc_sd,hd_sd,delta_v_sd,"
           "note\n";
    for (const auto& row : rows) {
        if (!row.error.empty()) {
            csv << "error," << row.patient_id << "," << group_name(row.group) << ","
                << class_label(row.cls) << ",,,,,,,,\"" << row.error << "\"\n";
            continue;
        }
        csv << "patient," << row.patient_id << "," << group_name(row.group) << ","
            << class_label(row.cls) << "," << csv_field(row.dc) << "," << csv_field(row.hd) << ","
            << row.hd_flag << "," << csv_field(row.dv) << ",,,,\n";
    }
    // group aggregates (mean and population sd), plus the all-groups rows
    auto aggregate = [&](const std::string& label, PatientGroup g, bool all, int cls) {
        std::vector<const EvalRow*> members;
        for (const auto& row : rows)
            if (row.error.empty() && row.cls == cls && (all || row.group == g))
                members.push_back(&row);
        if (members.empty()) return;
        auto stats = [&](auto getter) {
            double mean = 0.0;
            for (const auto* r : members) mean += getter(*r);
            mean /= static_cast<double>(members.size());
            double var = 0.0;
            for (const auto* r : members) {
                const double d = getter(*r) - mean;
                var += d * d;
            }
            var /= static_cast<double>(members.size());
            return std::make_pair(mean, std::sqrt(var));
        };
        const auto dc = stats([](const EvalRow& r) { return r.dc; });
        const auto hd = stats([](const EvalRow& r) { return r.hd; });
        const auto dv = stats([](const EvalRow& r) { return r.dv; });
        csv << "aggregate,all," << label << "," << class_label(cls) << "," << csv_field(dc.first)
            << "," << csv_field(hd.first) << ",," << csv_field(dv.first) << ","
            << csv_field(dc.second) << "," << csv_field(hd.second) << "," << csv_field(dv.second)
            << ",\n";
    };
    for (int cls : {kLabelPenumbra, kLabelCore}) {
        aggregate("LVO", PatientGroup::LVO, false, cls);
        aggregate("Non-LVO", PatientGroup::NonLVO, false, cls);
        aggregate("WIS", PatientGroup::WIS, false, cls);
        aggregate("All", PatientGroup::LVO, true, cls);
    }
    csv.close();

    RunManifest manifest("eval", opts.seed);
    manifest.config("model", opts.model_path);
    manifest.config("dataset", dataset_path);
    manifest.flag("split", split_name(opts.split));
    manifest.flag("mc_samples", opts.mc_samples);
    manifest.output(opts.report_path);
    manifest.errors(errors);
    manifest.write(opts.report_path + ".manifest.json");
    res.errors = errors;
    res.exit_code = errors.empty() ? 0 : 1;
    return res;
}

namespace {

template <typename T>
void run_predict(const LoadedModel& model, const PredictOptions& opts,
                 RunManifest& manifest) {
    Network<T> net = instantiate<T>(model);
    CtpStudy<T> study = read_study<T>(opts.study_path);
    auto pred = predict_volume(net, study.raw, model.cfg.architecture, opts.mc_samples, opts.seed);
    write_mask(opts.out_mask, pred.mask, study.meta);
    manifest.output(opts.out_mask);
    if (opts.mc_samples > 1) {
        const std::string var_path = opts.out_mask + ".variance.ctp4";
        write_field(var_path, pred.prob_variance, study.meta);
        manifest.output(var_path);
    }
    if (opts.overlay) {
        // grayscale backdrop: temporal maximum-intensity projection
        const std::int64_t nx = study.raw.dim(0), ny = study.raw.dim(1), nz = study.raw.dim(2),
                           nt = study.raw.dim(3);
        double lo = 0, hi = 0;
        bool first = true;
        Tensor<double> mip({nx, ny, nz}, {Axis::Width, Axis::Height, Axis::Depth});
        for (std::int64_t v = 0; v < nx * ny * nz; ++v) {
            double m = static_cast<double>(study.raw[v * nt]);
            for (std::int64_t t = 1; t < nt; ++t)
                m = std::max(m, static_cast<double>(study.raw[v * nt + t]));
            mip[v] = m;
            if (first) {
                lo = hi = m;
                first = false;
            } else {
                lo = std::min(lo, m);
                hi = std::max(hi, m);
            }
        }
        const double scale = hi > lo ? 255.0 / (hi - lo) : 0.0;
        for (std::int64_t z = 0; z < nz; ++z) {
            std::vector<std::uint8_t> rgb(static_cast<std::size_t>(nx * ny * 3));
            for (std::int64_t x = 0; x < nx; ++x)
                for (std::int64_t y = 0; y < ny; ++y) {
                    const std::uint8_t g = static_cast<std::uint8_t>(
                        (mip.at({x, y, z}) - lo) * scale);
                    double r = g, gg = g, b = g;
                    const std::uint8_t cls = pred.mask.at({x, y, z});
                    if (cls == kLabelPenumbra) {
                        r = 0.55 * r + 0.45 * 255.0;
                        gg = 0.55 * gg + 0.45 * 215.0;
                        b = 0.55 * b;
                    } else if (cls == kLabelCore) {
                        r = 0.45 * r + 0.55 * 255.0;
                        gg = 0.45 * gg;
                        b = 0.45 * b;
                    }
                    const std::size_t o = static_cast<std::size_t>((x * ny + y) * 3);
                    rgb[o] = static_cast<std::uint8_t>(r);
                    rgb[o + 1] = static_cast<std::uint8_t>(gg);
                    rgb[o + 2] = static_cast<std::uint8_t>(b);
                }
            char suffix[24];
            std::snprintf(suffix, sizeof(suffix), ".z%03lld.png", static_cast<long long>(z));
            const std::string png_path = opts.out_mask + suffix;
            write_png_rgb(png_path, static_cast<int>(ny), static_cast<int>(nx), rgb);
            manifest.output(png_path);
        }
    }
}

}  // namespace

CommandResult cmd_predict(const PredictOptions& opts) {
    CommandResult res;
    LoadedModel model = load_model(opts.model_path);
    RunManifest manifest("predict", opts.seed);
    manifest.config("model", opts.model_path);
    manifest.config("study", opts.study_path);
    manifest.flag("mc_samples", opts.mc_samples);
    manifest.flag("overlay", opts.overlay);
    if (model.precision == Precision::F64)
        run_predict<double>(model, opts, manifest);
    else
        run_predict<float>(model, opts, manifest);
    manifest.write(opts.out_mask + ".manifest.json");
    return res;
}

}  // namespace ctpseg
