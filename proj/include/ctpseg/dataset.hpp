#pragma once

#include <array>
#include <string>
#include <vector>

#include "ctpseg/meta.hpp"

namespace ctpseg {

enum class Split { Train, Validation, Test };

inline const char* split_name(Split s) {
    switch (s) {
        case Split::Train: return "train";
        case Split::Validation: return "validation";
        case Split::Test: return "test";
    }
    return "?";
}

inline Split split_from_name(const std::string& s) {
    if (s == "train") return Split::Train;
    if (s == "validation") return Split::Validation;
    if (s == "test") return Split::Test;
    throw ConfigError("unknown split '" + s + "'");
}

struct PatientEntry {
    std::string id;
    PatientGroup group = PatientGroup::LVO;
    std::string study_path;  // relative to the manifest directory
    std::string mask_path;
    Split split = Split::Train;
};

struct DatasetManifest {
    std::vector<PatientEntry> patients;
};

// Stratified random split. Within each group the train/validation fractions
// follow the published division (LVO 42/16/19 of 77, Non-LVO 36/13/11 of
// 60, WIS 9/3/3 of 15); groups with fewer than three patients go entirely
// to training with a warning. Deterministic for a fixed seed.
std::vector<Split> split_dataset(const std::vector<PatientGroup>& groups, std::uint64_t seed,
                                 std::vector<std::string>* warnings = nullptr);

DatasetManifest read_dataset_manifest(const std::string& path);
void write_dataset_manifest(const std::string& path, const DatasetManifest& manifest);

}  // namespace ctpseg
