#include "ctpseg/dataset.hpp"

#include <cmath>
#include <fstream>

#include <json.hpp>

#include "ctpseg/rng.hpp"

namespace ctpseg {

namespace {

struct GroupFractions {
    double train;
    double validation;
};

GroupFractions fractions_for(PatientGroup g) {
    switch (g) {
        case PatientGroup::LVO: return {42.0 / 77.0, 16.0 / 77.0};
        case PatientGroup::NonLVO: return {36.0 / 60.0, 13.0 / 60.0};
        case PatientGroup::WIS: return {9.0 / 15.0, 3.0 / 15.0};
    }
    return {0.586, 0.197};
}

}  // namespace

std::vector<Split> split_dataset(const std::vector<PatientGroup>& groups, std::uint64_t seed,
                                 std::vector<std::string>* warnings) {
    std::vector<Split> out(groups.size(), Split::Train);
    Rng rng(seed);
    const PatientGroup kinds[3] = {PatientGroup::LVO, PatientGroup::NonLVO, PatientGroup::WIS};
    for (int gi = 0; gi < 3; ++gi) {
        std::vector<std::size_t> members;
        for (std::size_t i = 0; i < groups.size(); ++i)
            if (groups[i] == kinds[gi]) members.push_back(i);
        const std::int64_t n = static_cast<std::int64_t>(members.size());
        if (n == 0) continue;
        if (n < 3) {
            if (warnings)
                warnings->push_back(std::string(group_name(kinds[gi])) + " has fewer than 3 patients; all assigned to training");
            continue;
        }
        const GroupFractions f = fractions_for(kinds[gi]);
        std::int64_t n_train = std::llround(static_cast<double>(n) * f.train);
        std::int64_t n_val = std::llround(static_cast<double>(n) * f.validation);
        if (n_train < 1) n_train = 1;
        if (n_val < 1) n_val = 1;
        while (n_train + n_val >= n) {
            if (n_train > n_val && n_train > 1)
                --n_train;
            else if (n_val > 1)
                --n_val;
            else
                break;
        }
        Rng group_rng = rng.fork(static_cast<std::uint64_t>(gi), 0x51u);
        group_rng.shuffle(members);
        for (std::int64_t i = 0; i < n; ++i) {
            Split s = Split::Test;
            if (i < n_train)
                s = Split::Train;
            else if (i < n_train + n_val)
                s = Split::Validation;
            out[members[static_cast<std::size_t>(i)]] = s;
        }
    }
    return out;
}

DatasetManifest read_dataset_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open dataset manifest '" + path + "'");
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed dataset manifest '" + path + "': " + e.what());
    }
    DatasetManifest m;
    for (const auto& p : j.at("patients")) {
        PatientEntry e;
        e.id = p.at("id").get<std::string>();
        e.group = group_from_name(p.at("group").get<std::string>());
        e.study_path = p.at("study").get<std::string>();
        e.mask_path = p.value("mask", "");
        e.split = split_from_name(p.value("split", "train"));
        m.patients.push_back(std::move(e));
    }
    return m;
}

void write_dataset_manifest(const std::string& path, const DatasetManifest& manifest) {
    nlohmann::json j;
    j["patients"] = nlohmann::json::array();
    for (const auto& e : manifest.patients) {
        nlohmann::json p;
        p["id"] = e.id;
        p["group"] = group_name(e.group);
        p["study"] = e.study_path;
        if (!e.mask_path.empty()) p["mask"] = e.mask_path;
        p["split"] = split_name(e.split);
        j["patients"].push_back(std::move(p));
    }
    std::ofstream out(path);
    if (!out) throw DataError("cannot write dataset manifest '" + path + "'");
    out << j.dump(2) << "\n";
}

}  // namespace ctpseg
