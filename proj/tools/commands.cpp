#include "commands.hpp"

#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>

#include <CLI11.hpp>
#include <json.hpp>

#include "dualreg/dataset.hpp"
#include "dualreg/report.hpp"
#include "dualreg/training.hpp"

namespace dualreg::cli {

namespace fs = std::filesystem;
using json = nlohmann::json;

namespace {

json config_section(const fs::path& path, const char* section) {
    std::ifstream in(path);
    if (!in) throw DataError("cannot open config '" + path.string() + "'");
    json j;
    try {
        j = json::parse(in);
    } catch (const json::parse_error& e) {
        throw std::invalid_argument("config '" + path.string() + "': " + e.what());
    }
    if (!j.is_object()) throw std::invalid_argument("config '" + path.string() + "' must be a JSON object");
    return j.contains(section) ? j.at(section) : json::object();
}

std::vector<PairEntry> pick_split(const Manifest& m, const std::string& split) {
    auto pairs = m.split(split);
    if (pairs.empty()) throw DataError("dataset '" + m.root.string() + "' has no '" + split + "' pairs");
    return pairs;
}

/// Upsamples an accumulated level field to the input grid.
DisplacementField to_full_resolution(DisplacementField f, int level, const Shape3& input) {
    for (int l = level + 1; l <= kPyramidLevels + 1; ++l) f = upsample_field(f, level_shape(input, l));
    return f;
}

void save_field_and_warp(const DisplacementField& f, const Volume& moving, const fs::path& dir,
                         const std::string& field_name, const std::string& warped_name) {
    save_field(f, dir / field_name);
    save_volume(warp_trilinear(moving, f), dir / warped_name);
}

}  // namespace

void cmd_synth(const SynthOptions& o, std::ostream& log) {
    const auto config = synth_config_from_json(config_section(o.config, "synth"));
    const auto m = write_synthetic_dataset(config, o.out_dir);
    log << "wrote " << m.pairs.size() << " pairs to " << o.out_dir.string() << "\n";
}

void cmd_train(const TrainOptions& o, std::ostream& log) {
    auto section = config_section(o.config, "train");
    const auto manifest = load_manifest(o.data_dir);
    auto data = load_volume_pairs(pick_split(manifest, "train"));
    if (!section.contains("input_shape")) section["input_shape"] = data.front().moving.shape().dims;
    auto config = train_config_from_json(section);
    if (o.iterations) config.iterations = *o.iterations;
    config.validate();

    const auto log_path = o.loss_log.empty() ? fs::path(o.out.string() + ".loss.csv") : o.loss_log;
    std::optional<Trainer> trainer;
    bool append = false;
    if (o.resume && fs::exists(o.out)) {
        auto ckpt = load_checkpoint(o.out);
        ckpt.config.iterations = config.iterations;
        ckpt.config.checkpoint_every = config.checkpoint_every;
        trainer.emplace(ckpt, std::move(data));
        append = fs::exists(log_path);
        log << "resuming at iteration " << ckpt.iteration << "\n";
    } else {
        trainer.emplace(config, std::move(data));
    }

    if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
    std::ofstream csv(log_path, append ? std::ios::app : std::ios::trunc);
    if (!csv) throw DataError("cannot write loss log '" + log_path.string() + "'");
    if (!append) csv << "step,loss,nlcc,smooth\n";
    char line[160];
    trainer->run(
        [&](const LossRecord& r) {
            std::snprintf(line, sizeof line, "%lld,%.17g,%.17g,%.17g\n", static_cast<long long>(r.step), r.total,
                          r.similarity, r.smooth);
            csv << line << std::flush;
            if (!o.quiet && (r.step % 50 == 0 || r.step == trainer->config().iterations)) {
                std::snprintf(line, sizeof line, "step %lld loss %.6f nlcc %.6f smooth %.6f\n",
                              static_cast<long long>(r.step), r.total, r.similarity, r.smooth);
                log << line << std::flush;
            }
        },
        [&](const Checkpoint& c) { save_checkpoint(c, o.out); });
    save_checkpoint(trainer->checkpoint(), o.out);
    log << "checkpoint " << o.out.string() << " at iteration " << trainer->iteration() << "\n";
}

void cmd_register(const RegisterOptions& o, std::ostream& log) {
    const auto ckpt = load_checkpoint(o.checkpoint);
    const auto moving = load_volume(o.moving);
    const auto fixed = load_volume(o.fixed);
    const auto out = register_volumes(moving, fixed, ckpt);
    fs::create_directories(o.out_dir);
    save_field(out.final_field, o.out_dir / "final_field");
    save_volume(out.warped, o.out_dir / "warped");
    int emitted = 0;
    if (o.emit_levels) {
        for (int l = 1; l <= kPyramidLevels; ++l) {
            const auto& acc = out.accumulated[l - 1];
            if (!acc) continue;
            const auto tag = "level" + std::to_string(l);
            save_field(*acc, o.out_dir / (tag + "_field"));
            if (out.level_fields[l - 1]) save_field(*out.level_fields[l - 1], o.out_dir / (tag + "_residual"));
            save_field_and_warp(to_full_resolution(*acc, l, moving.shape()), moving, o.out_dir, tag + "_full_field",
                                tag + "_warped");
            ++emitted;
        }
    }
    log << "wrote final_field and warped";
    if (o.emit_levels) log << " plus " << emitted << " level fields";
    log << " to " << o.out_dir.string() << "\n";
}

void cmd_evaluate(const EvaluateOptions& o, std::ostream& log) {
    const auto ckpt = load_checkpoint(o.checkpoint);
    const auto manifest = load_manifest(o.data_dir);
    std::optional<SliceReduction> reduction;
    if (o.reduce_slices) reduction = SliceReduction::parse(*o.reduce_slices);
    const auto report = evaluate(ckpt, pick_split(manifest, o.split), reduction);
    save_report(report, o.out);
    char line[160];
    std::snprintf(line, sizeof line, "%zu pairs: mean Dice %.4f (identity %.4f), %.3f s per registration\n",
                  report.pairs.size(), report.average, report.baseline_average, report.mean_seconds);
    log << line;
}

void cmd_plot(const PlotOptions& o, std::ostream& log) {
    if (o.reports.empty()) throw std::invalid_argument("plot: no reports given");
    std::vector<std::pair<std::string, EvalReport>> reports;
    std::map<std::string, int> seen;
    for (const auto& p : o.reports) {
        auto r = load_report(p);
        std::string name = r.mode;
        if (r.reduction) name += " (slices " + r.reduction->str() + ")";
        if (seen[name]++ > 0) name += " [" + p.stem().string() + "]";
        reports.emplace_back(std::move(name), std::move(r));
    }
    const auto data = plot_data(reports);
    if (o.out.has_parent_path()) fs::create_directories(o.out.parent_path());
    const fs::path svg = o.out.string() + ".svg";
    const fs::path csv = o.out.string() + ".csv";
    std::ofstream(svg, std::ios::trunc) << plot_svg(data);
    std::ofstream(csv, std::ios::trunc) << plot_csv(data);
    if (!fs::exists(svg) || !fs::exists(csv)) throw DataError("cannot write plot output '" + o.out.string() + "'");
    log << "wrote " << svg.string() << " and " << csv.string() << "\n";
}

int run(int argc, char** argv) {
    CLI::App app{"Dual-stream pyramid registration toolkit"};
    app.require_subcommand(1);

    SynthOptions synth;
    auto* s = app.add_subcommand("synth", "Write a synthetic labeled dataset");
    s->add_option("-c,--config", synth.config, "Config JSON")->required();
    s->add_option("-o,--out", synth.out_dir, "Output dataset directory")->required();

    TrainOptions train;
    long long iterations = -1;
    auto* t = app.add_subcommand("train", "Train a registration network");
    t->add_option("-c,--config", train.config, "Config JSON")->required();
    t->add_option("-d,--data", train.data_dir, "Dataset directory")->required();
    t->add_option("-o,--out", train.out, "Checkpoint path")->required();
    t->add_option("--loss-log", train.loss_log, "Loss CSV path (default <out>.loss.csv)");
    t->add_option("--iterations", iterations, "Override the configured iteration count");
    t->add_flag("--resume", train.resume, "Continue from the checkpoint at --out if present");
    t->add_flag("-q,--quiet", train.quiet, "Only report the final checkpoint");

    RegisterOptions reg;
    auto* r = app.add_subcommand("register", "Register one moving volume to a fixed volume");
    r->add_option("--checkpoint", reg.checkpoint, "Checkpoint")->required();
    r->add_option("--moving", reg.moving, "Moving volume")->required();
    r->add_option("--fixed", reg.fixed, "Fixed volume")->required();
    r->add_option("-o,--out", reg.out_dir, "Output directory")->required();
    r->add_flag("--emit-levels", reg.emit_levels, "Also write every pyramid level field and warped volume");

    EvaluateOptions ev;
    std::string reduce;
    auto* e = app.add_subcommand("evaluate", "Score a checkpoint on a dataset split");
    e->add_option("--checkpoint", ev.checkpoint, "Checkpoint")->required();
    e->add_option("-d,--data", ev.data_dir, "Dataset directory")->required();
    e->add_option("-o,--out", ev.out, "Report JSON path")->required();
    e->add_option("--reduce-slices", reduce, "AXIS:KEEP slice reduction of moving volumes");
    e->add_option("--split", ev.split, "Manifest split")->capture_default_str();

    PlotOptions plot;
    auto* p = app.add_subcommand("plot", "Grouped-bar Dice chart from reports");
    p->add_option("reports", plot.reports, "Report JSON files");
    p->add_option("-o,--out", plot.out, "Output prefix")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& err) {
        return app.exit(err) == 0 ? 0 : 1;
    }

    try {
        if (s->parsed()) cmd_synth(synth, std::cout);
        if (t->parsed()) {
            if (iterations >= 0) train.iterations = iterations;
            cmd_train(train, std::cout);
        }
        if (r->parsed()) cmd_register(reg, std::cout);
        if (e->parsed()) {
            if (!reduce.empty()) ev.reduce_slices = reduce;
            cmd_evaluate(ev, std::cout);
        }
        if (p->parsed()) cmd_plot(plot, std::cout);
    } catch (const NumericError& err) {
        std::cerr << "dualreg: numeric error: " << err.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& err) {
        std::cerr << "dualreg: " << err.what() << "\n";
        return 1;
    } catch (const std::exception& err) {
        std::cerr << "dualreg: error: " << err.what() << "\n";
        return 2;
    }
    return 0;
}

}  // namespace dualreg::cli
