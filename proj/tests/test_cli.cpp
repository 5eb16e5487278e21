#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <json.hpp>

#include "ctpseg/io.hpp"
#include "ctpseg/metrics.hpp"
#include "ctpseg/pipeline.hpp"

using namespace ctpseg;
namespace fs = std::filesystem;

#ifndef CTPSEG_CLI_PATH
#define CTPSEG_CLI_PATH "ctpseg"
#endif

namespace {

int run_cli(const std::string& args) {
    const std::string cmd = std::string(CTPSEG_CLI_PATH) + " " + args + " >/dev/null 2>&1";
    const int status = std::system(cmd.c_str());
    return WEXITSTATUS(status);
}

fs::path fresh_dir(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / "ctpseg_cli" / name;
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

void write_spec(const fs::path& path, int size = 12) {
    std::ofstream out(path);
    out << "{ \"size_x\": " << size << ", \"size_y\": " << size
        << ", \"size_z\": 3, \"time_schedule\": [0,1,2,3], \"seed\": 0 }\n";
}

void write_train_config(const fs::path& path) {
    std::ofstream out(path);
    out << R"({
      "precision": "f64",
      "loss": "sdcl",
      "network": {
        "architecture": "mjnet_4d",
        "time_pool_schedule": [2, 2],
        "temporal_widths": [2, 3],
        "spatial_widths": [3, 4],
        "init_seed": 1
      },
      "train": { "learning_rate": 0.003, "max_epochs": 3, "seed": 5 }
    })";
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return std::vector<char>(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("usage errors exit with code 2") {
    CHECK(run_cli("--help") == 0);
    CHECK(run_cli("") == 2);                 // missing subcommand
    CHECK(run_cli("frobnicate") == 2);       // unknown subcommand
    CHECK(run_cli("synth") == 2);            // missing required args
    const auto dir = fresh_dir("usage");
    write_train_config(dir / "t.json");
    CHECK(run_cli("train " + (dir / "t.json").string() + " " + (dir / "missing_data").string() +
                  " " + (dir / "m.ckpt").string()) == 2);  // data dir absent
}

TEST_CASE("synth writes studies, masks, dataset and manifest") {
    const auto dir = fresh_dir("synth");
    write_spec(dir / "spec.json");
    CHECK(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "out").string() +
                  " --count 3 --seed 9") == 0);
    CHECK(fs::exists(dir / "out" / "p0000.ctp4"));
    CHECK(fs::exists(dir / "out" / "p0002.mask.ctp4"));
    CHECK(fs::exists(dir / "out" / "dataset.json"));
    CHECK(fs::exists(dir / "out" / "manifest.json"));
    std::size_t studies = 0, masks = 0;
    for (const auto& e : fs::directory_iterator(dir / "out")) {
        const std::string name = e.path().filename().string();
        if (name.ends_with(".mask.ctp4"))
            ++masks;
        else if (name.ends_with(".ctp4"))
            ++studies;
    }
    CHECK(studies == 3);
    CHECK(masks == 3);

    // determinism: same spec and seed give identical bytes
    CHECK(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "out2").string() +
                  " --count 3 --seed 9") == 0);
    CHECK(slurp(dir / "out" / "p0001.ctp4") == slurp(dir / "out2" / "p0001.ctp4"));
    CHECK(slurp(dir / "out" / "p0001.mask.ctp4") == slurp(dir / "out2" / "p0001.mask.ctp4"));

    // count 0: manifest only, exit 0
    CHECK(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "empty").string() +
                  " --count 0") == 0);
    CHECK(fs::exists(dir / "empty" / "manifest.json"));
    CHECK_FALSE(fs::exists(dir / "empty" / "p0000.ctp4"));
}

TEST_CASE("preprocess records flags and is idempotent") {
    const auto dir = fresh_dir("prep");
    write_spec(dir / "spec.json");
    REQUIRE(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "raw").string() +
                    " --count 2 --seed 4 --precision f64") == 0);

    CHECK(run_cli("preprocess " + (dir / "raw").string() + " " + (dir / "a").string() +
                  " --no-resample") == 0);
    CHECK(run_cli("preprocess " + (dir / "raw").string() + " " + (dir / "b").string() +
                  " --no-resample") == 0);
    CHECK(slurp(dir / "a" / "p0000.ctp4") == slurp(dir / "b" / "p0000.ctp4"));

    nlohmann::json manifest;
    std::ifstream((dir / "a" / "manifest.json")) >> manifest;
    CHECK(manifest["flags"]["histogram_equalization"] == true);
    CHECK(manifest["flags"]["gamma"] == true);
    CHECK(manifest["flags"]["zscore"] == true);
    CHECK(manifest["flags"]["resample"] == false);

    // pass-through mode
    CHECK(run_cli("preprocess " + (dir / "raw").string() + " " + (dir / "c").string() +
                  " --no-he --no-gamma --no-zscore --no-resample") == 0);
    nlohmann::json m2;
    std::ifstream((dir / "c" / "manifest.json")) >> m2;
    CHECK(m2["flags"]["histogram_equalization"] == false);
    CHECK(m2["flags"]["gamma"] == false);
}

TEST_CASE("train, eval and predict round trip through the CLI") {
    const auto dir = fresh_dir("full");
    write_spec(dir / "spec.json");
    write_train_config(dir / "train.json");
    REQUIRE(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "raw").string() +
                    " --count 8 --seed 21 --precision f64") == 0);
    REQUIRE(run_cli("preprocess " + (dir / "raw").string() + " " + (dir / "prep").string() +
                    " --no-resample") == 0);
    REQUIRE(run_cli("train " + (dir / "train.json").string() + " " + (dir / "prep").string() +
                    " " + (dir / "model.ckpt").string()) == 0);
    CHECK(fs::exists(dir / "model.ckpt"));
    CHECK(fs::exists(dir / "model.history.csv"));
    CHECK(fs::exists(dir / "model.ckpt.manifest.json"));
    {
        std::ifstream csv(dir / "model.history.csv");
        std::string header;
        std::getline(csv, header);
        CHECK(header == "epoch,lr,train_loss,val_loss,stopped");
        std::string row;
        CHECK(static_cast<bool>(std::getline(csv, row)));
        CHECK(row.rfind("1,", 0) == 0);
    }

    CHECK(run_cli("eval " + (dir / "model.ckpt").string() + " " + (dir / "prep").string() + " " +
                  (dir / "report.csv").string() + " --split test") == 0);
    CHECK(fs::exists(dir / "report.csv"));
    {
        std::ifstream csv(dir / "report.csv");
        std::string line;
        std::getline(csv, line);
        CHECK(line.rfind("row_type,", 0) == 0);
        bool has_patient = false, has_aggregate = false;
        while (std::getline(csv, line)) {
            has_patient = has_patient || line.rfind("patient,", 0) == 0;
            has_aggregate = has_aggregate || line.rfind("aggregate,", 0) == 0;
        }
        CHECK(has_patient);
        CHECK(has_aggregate);
    }

    CHECK(run_cli("predict " + (dir / "model.ckpt").string() + " " +
                  (dir / "prep" / "p0000.ctp4").string() + " " + (dir / "out.ctp4").string()) == 0);
    auto mask = read_mask((dir / "out.ctp4").string());
    auto study = read_study<double>((dir / "prep" / "p0000.ctp4").string());
    CHECK(mask.mask.dim(2) == study.raw.dim(2));  // output depth == study depth

    // mc-samples 1 twice -> identical masks
    CHECK(run_cli("predict " + (dir / "model.ckpt").string() + " " +
                  (dir / "prep" / "p0000.ctp4").string() + " " + (dir / "out2.ctp4").string()) == 0);
    CHECK(slurp(dir / "out.ctp4") == slurp(dir / "out2.ctp4"));

    // mc-samples 4 -> variance file appears
    CHECK(run_cli("predict " + (dir / "model.ckpt").string() + " " +
                  (dir / "prep" / "p0000.ctp4").string() + " " + (dir / "mc.ctp4").string() +
                  " --mc-samples 4 --overlay") == 0);
    CHECK(fs::exists(dir / "mc.ctp4.variance.ctp4"));
    CHECK(fs::exists(dir / "mc.ctp4.z000.png"));
    CHECK(fs::exists(dir / "mc.ctp4.z002.png"));
}

TEST_CASE("eval ground truth as prediction scores perfectly") {
    // feed the gt masks back through the metric path: identical masks give
    // DC 1, HD 0, dV 0 on every row
    const auto dir = fresh_dir("oracle");
    write_spec(dir / "spec.json");
    REQUIRE(run_cli("synth " + (dir / "spec.json").string() + " " + (dir / "raw").string() +
                    " --count 4 --seed 2") == 0);
    auto manifest = read_dataset_manifest((dir / "raw" / "dataset.json").string());
    VolumeMeta meta;
    for (const auto& p : manifest.patients) {
        auto gt = read_mask((dir / "raw" / p.mask_path).string());
        CHECK(dice_coeff(gt.mask, gt.mask, kLabelPenumbra) == 1.0);
        auto hd = hausdorff_mm(gt.mask, gt.mask, kLabelPenumbra, gt.meta);
        CHECK(hd.mm == 0.0);
        CHECK(delta_v_ml(gt.mask, gt.mask, kLabelPenumbra, gt.meta) == 0.0);
    }
}
