#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualreg/dataset.hpp"
#include "dualreg/training.hpp"

namespace dualreg {

/// Evaluation-time slice reduction: keep `keep` slices along `axis`, then
/// resample back to the model's input grid.
struct SliceReduction {
    int axis = 1;
    std::int64_t keep = 8;

    /// Parses "axis:keep".
    static SliceReduction parse(const std::string& text);
    std::string str() const;
};

struct PairEvaluation {
    std::string id;
    std::vector<RegionDice> regions;
    Real average = 0.0;
    Real baseline_average = 0.0;  // Dice before registration
    Real seconds = 0.0;           // registration wall time
};

struct EvalReport {
    std::string mode;
    std::string config_digest;
    std::optional<SliceReduction> reduction;
    std::vector<int> regions;
    std::vector<PairEvaluation> pairs;
    std::vector<Real> region_means;  // aligned with `regions`
    Real average = 0.0;              // mean of per-pair averages
    Real baseline_average = 0.0;
    Real mean_seconds = 0.0;
};

/// Registers every pair, warps the moving labels by the final field (nearest
/// neighbour) and scores them against the fixed labels.
EvalReport evaluate(const Checkpoint& ckpt, const std::vector<PairEntry>& pairs,
                    const std::optional<SliceReduction>& reduction = std::nullopt);

/// Recomputes region means and averages from the per-pair entries.
void summarize(EvalReport& report);

nlohmann::json to_json(const EvalReport& r);
EvalReport report_from_json(const nlohmann::json& j);
EvalReport load_report(const std::filesystem::path& path);
void save_report(const EvalReport& r, const std::filesystem::path& json_path);

/// One row per pair and region plus an "average" row per pair.
std::string report_csv(const EvalReport& r);

/// Grouped bars: one group per region plus "average", one series per report.
struct PlotData {
    std::vector<std::string> groups;
    std::vector<std::string> series;
    std::vector<std::vector<Real>> values;  // [series][group]; NaN when missing
};

PlotData plot_data(const std::vector<std::pair<std::string, EvalReport>>& reports);
std::string plot_csv(const PlotData& d);
std::string plot_svg(const PlotData& d);

}  // namespace dualreg
