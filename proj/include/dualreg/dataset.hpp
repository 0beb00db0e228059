#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

#include "dualreg/synth.hpp"
#include "dualreg/training.hpp"

namespace dualreg {

/// The "synth" section of the shared config file.
struct SynthConfig {
    PhantomSpec spec{};
    int n_pairs = 4;
    int n_test = 0;  // the last n_test pairs form the test split
};

SynthConfig synth_config_from_json(const nlohmann::json& j);
nlohmann::json to_json(const SynthConfig& c);

/// One registration pair as listed in a dataset manifest. Paths are absolute
/// after loading; `gt_field` is empty when no ground truth exists.
struct PairEntry {
    std::string id;
    std::string split;
    std::uint64_t seed = 0;
    std::filesystem::path moving;
    std::filesystem::path fixed;
    std::filesystem::path moving_labels;
    std::filesystem::path fixed_labels;
    std::filesystem::path gt_field;
};

/// manifest.json of a dataset directory. Either lists explicit "pairs", or
/// "subjects" ({id, volume, labels, split}) expanded into all ordered pairs
/// within each split.
struct Manifest {
    std::filesystem::path root;
    std::uint64_t seed = 0;
    std::vector<PairEntry> pairs;

    std::vector<PairEntry> split(const std::string& name) const;
};

inline constexpr const char* kManifestName = "manifest.json";

/// Writes n_pairs synthetic pairs plus manifest.json under `out_dir`.
Manifest write_synthetic_dataset(const SynthConfig& config, const std::filesystem::path& out_dir);

Manifest load_manifest(const std::filesystem::path& dir);

/// Per-pair seed derived from the dataset seed.
std::uint64_t pair_seed(std::uint64_t dataset_seed, int index);

std::vector<VolumePair> load_volume_pairs(const std::vector<PairEntry>& entries);

}  // namespace dualreg
