#include "dualreg/dataset.hpp"

#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace dualreg {

using json = nlohmann::json;
namespace fs = std::filesystem;

SynthConfig synth_config_from_json(const json& j) {
    SynthConfig c;
    try {
        if (!j.is_object()) throw std::invalid_argument("synth config must be a JSON object");
        if (j.contains("shape")) {
            const auto shape = j.at("shape").get<std::vector<std::int64_t>>();
            if (shape.size() != 3) throw std::invalid_argument("synth.shape must have 3 entries");
            c.spec.shape = {shape[0], shape[1], shape[2]};
        }
        c.spec.num_regions = j.value("num_regions", c.spec.num_regions);
        c.spec.amplitude = j.value("amplitude", c.spec.amplitude);
        c.spec.smoothness_sigma = j.value("smoothness_sigma", c.spec.smoothness_sigma);
        c.spec.noise_sigma = j.value("noise_sigma", c.spec.noise_sigma);
        c.spec.seed = j.value("seed", c.spec.seed);
        c.n_pairs = j.value("n_pairs", c.n_pairs);
        c.n_test = j.value("n_test", c.n_test);
    } catch (const json::exception& e) {
        throw std::invalid_argument(std::string("malformed synth config: ") + e.what());
    }
    c.spec.validate();
    if (c.n_pairs < 1) throw std::invalid_argument("synth.n_pairs must be >= 1");
    if (c.n_test < 0 || c.n_test > c.n_pairs) throw std::invalid_argument("synth.n_test must be in [0, n_pairs]");
    return c;
}

json to_json(const SynthConfig& c) {
    return json{{"shape", c.spec.shape.dims},
                {"num_regions", c.spec.num_regions},
                {"amplitude", c.spec.amplitude},
                {"smoothness_sigma", c.spec.smoothness_sigma},
                {"noise_sigma", c.spec.noise_sigma},
                {"seed", c.spec.seed},
                {"n_pairs", c.n_pairs},
                {"n_test", c.n_test}};
}

std::uint64_t pair_seed(std::uint64_t dataset_seed, int index) {
    return dataset_seed * 1000003ULL + static_cast<std::uint64_t>(index);
}

std::vector<PairEntry> Manifest::split(const std::string& name) const {
    std::vector<PairEntry> out;
    for (const auto& p : pairs) {
        if (p.split == name) out.push_back(p);
    }
    return out;
}

Manifest write_synthetic_dataset(const SynthConfig& config, const fs::path& out_dir) {
    fs::create_directories(out_dir);
    Manifest m;
    m.root = out_dir;
    m.seed = config.spec.seed;
    json entries = json::array();
    for (int i = 0; i < config.n_pairs; ++i) {
        char id[32];
        std::snprintf(id, sizeof id, "pair_%03d", i);
        PhantomSpec spec = config.spec;
        spec.seed = pair_seed(config.spec.seed, i);
        const auto pair = make_pair(spec);

        const std::string dir = id;
        save_volume(pair.moving, out_dir / dir / "moving");
        save_volume(pair.fixed, out_dir / dir / "fixed");
        save_labels(pair.moving_labels, out_dir / dir / "moving_labels");
        save_labels(pair.fixed_labels, out_dir / dir / "fixed_labels");
        save_field(pair.gt_field, out_dir / dir / "gt_field");

        const std::string split = i >= config.n_pairs - config.n_test ? "test" : "train";
        entries.push_back({{"id", id},
                           {"split", split},
                           {"seed", spec.seed},
                           {"moving", dir + "/moving"},
                           {"fixed", dir + "/fixed"},
                           {"moving_labels", dir + "/moving_labels"},
                           {"fixed_labels", dir + "/fixed_labels"},
                           {"gt_field", dir + "/gt_field"}});
        m.pairs.push_back({id, split, spec.seed, out_dir / dir / "moving", out_dir / dir / "fixed",
                           out_dir / dir / "moving_labels", out_dir / dir / "fixed_labels", out_dir / dir / "gt_field"});
    }
    const json manifest{{"format", "dualreg-dataset"},
                        {"version", 1},
                        {"seed", config.spec.seed},
                        {"synth", to_json(config)},
                        {"pairs", std::move(entries)}};
    std::ofstream out(out_dir / kManifestName, std::ios::trunc);
    if (!out) throw DataError("cannot write manifest in '" + out_dir.string() + "'");
    out << manifest.dump(2) << "\n";
    return m;
}

Manifest load_manifest(const fs::path& dir) {
    const auto path = dir / kManifestName;
    std::ifstream in(path);
    if (!in) throw DataError("no dataset manifest at '" + path.string() + "'");
    Manifest m;
    m.root = dir;
    try {
        const auto j = json::parse(in);
        m.seed = j.value("seed", std::uint64_t{0});
        auto resolve = [&](const json& e, const char* key) -> fs::path {
            if (!e.contains(key) || e.at(key).is_null()) return {};
            const fs::path p = e.at(key).get<std::string>();
            return p.is_absolute() ? p : dir / p;
        };
        if (j.contains("pairs")) {
            for (const auto& e : j.at("pairs")) {
                m.pairs.push_back({e.at("id").get<std::string>(), e.value("split", std::string("train")),
                                   e.value("seed", std::uint64_t{0}), resolve(e, "moving"), resolve(e, "fixed"),
                                   resolve(e, "moving_labels"), resolve(e, "fixed_labels"), resolve(e, "gt_field")});
            }
        }
        if (j.contains("subjects")) {
            struct Subject {
                std::string id;
                fs::path volume;
                fs::path labels;
            };
            std::map<std::string, std::vector<Subject>> by_split;
            for (const auto& e : j.at("subjects")) {
                by_split[e.value("split", std::string("train"))].push_back(
                    {e.at("id").get<std::string>(), resolve(e, "volume"), resolve(e, "labels")});
            }
            for (const auto& [split, subjects] : by_split) {
                if (subjects.size() < 2) continue;
                for (const auto& [a, b] : enumerate_pairs(subjects)) {
                    m.pairs.push_back({a.id + "_to_" + b.id, split, 0, a.volume, b.volume, a.labels, b.labels, {}});
                }
            }
        }
    } catch (const json::exception& e) {
        throw DataError("'" + path.string() + "': malformed manifest: " + e.what());
    }
    if (m.pairs.empty()) throw DataError("'" + path.string() + "': manifest lists no pairs");
    return m;
}

std::vector<VolumePair> load_volume_pairs(const std::vector<PairEntry>& entries) {
    std::vector<VolumePair> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back({load_volume(e.moving), load_volume(e.fixed)});
    return out;
}

}  // namespace dualreg
