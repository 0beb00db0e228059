#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace dualreg::cli {

struct SynthOptions {
    std::filesystem::path config;
    std::filesystem::path out_dir;
};

struct TrainOptions {
    std::filesystem::path config;
    std::filesystem::path data_dir;
    std::filesystem::path out;
    std::filesystem::path loss_log;  // default: <out>.loss.csv
    std::optional<long long> iterations;
    bool resume = false;
    bool quiet = false;
};

struct RegisterOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path moving;
    std::filesystem::path fixed;
    std::filesystem::path out_dir;
    bool emit_levels = false;
};

struct EvaluateOptions {
    std::filesystem::path checkpoint;
    std::filesystem::path data_dir;
    std::filesystem::path out;  // report JSON; CSV goes next to it
    std::optional<std::string> reduce_slices;
    std::string split = "test";
};

struct PlotOptions {
    std::vector<std::filesystem::path> reports;
    std::filesystem::path out;  // prefix for .svg and .csv
};

void cmd_synth(const SynthOptions& o, std::ostream& log);
void cmd_train(const TrainOptions& o, std::ostream& log);
void cmd_register(const RegisterOptions& o, std::ostream& log);
void cmd_evaluate(const EvaluateOptions& o, std::ostream& log);
void cmd_plot(const PlotOptions& o, std::ostream& log);

/// Parses arguments, dispatches, and maps failures to exit codes:
/// 0 success, 1 usage, 2 data error, 3 numeric failure.
int run(int argc, char** argv);

}  // namespace dualreg::cli
