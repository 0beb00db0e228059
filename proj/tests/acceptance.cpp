// Acceptance run: prints one PASS/FAIL line per criterion.
// Usage: dualreg_acceptance [criterion numbers...]   (default: all)

#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iterator>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "dualreg/dataset.hpp"
#include "dualreg/losses.hpp"
#include "dualreg/report.hpp"
#include "dualreg/training.hpp"
#include "dualreg/warping.hpp"
#include "gradcheck.hpp"
#include "oracles.hpp"
#include "support.hpp"

using namespace dualreg;
using namespace dualreg::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

Shape3 small_shape(std::mt19937_64& rng, std::int64_t lo = 1) {
    std::uniform_int_distribution<std::int64_t> d(lo, 6);
    return {d(rng), d(rng), d(rng)};
}

// 1 -------------------------------------------------------------------------

Outcome oracles() {
    constexpr int kInstances = 120;
    constexpr Real kTol = 1e-6;
    std::mt19937_64 rng(2024);
    std::map<std::string, Real> worst;
    int mismatched_labels = 0;
    for (int n = 0; n < kInstances; ++n) {
        const auto s = small_shape(rng);
        const auto v = random_volume(s, rng, -1.0, 2.0);
        const auto f = random_field(s, rng, 2.5);
        const std::vector<Real> vals(v.data().begin(), v.data().end());

        const auto w = warp_trilinear(v, f);
        const auto wo = oracle::warp(vals, s, f);
        for (std::int64_t i = 0; i < s.voxels(); ++i)
            worst["warp_trilinear"] = std::max(worst["warp_trilinear"], oracle::rel_err(w.data()[i], wo[i], 1e-6));

        auto hf = f;
        if (n % 3 == 0)
            for (auto& x : hf.data()) x = std::round(x * 2) / 2;
        const auto labels = random_labels(s, rng, 6);
        const auto wl = warp_nearest(labels, hf);
        const auto wlo = oracle::warp_nearest({labels.data().begin(), labels.data().end()}, s, hf);
        if (!std::equal(wl.data().begin(), wl.data().end(), wlo.begin())) ++mismatched_labels;

        const auto cs = Shape3{std::max<std::int64_t>(1, s[0] / 2 + 1), std::max<std::int64_t>(1, s[1] / 2 + 1),
                               std::max<std::int64_t>(1, s[2] / 2 + 1)};
        const auto cf = random_field(cs, rng, 2.0);
        Shape3 to = doubled(cs);
        if (n % 2 == 1)
            for (int a = 0; a < 3; ++a) to.dims[a] = std::max<std::int64_t>(1, to.dims[a] - 1);
        const auto up = upsample_field(cf, to);
        const auto upo = oracle::upsample(cf, to);
        for (std::size_t i = 0; i < upo.size(); ++i)
            worst["upsample_field"] = std::max(worst["upsample_field"], oracle::rel_err(up.data()[i], upo[i], 1e-6));

        // windows must fit the grid
        const auto ls = small_shape(rng, 3);
        const auto a = random_volume(ls, rng, -1.0, 2.0);
        const auto b = random_volume(ls, rng, 0.0, 1.0);
        LossConfig cfg;
        const auto fit = std::min({ls[0], ls[1], ls[2]});
        const auto largest = fit % 2 == 1 ? fit : fit - 1;
        cfg.window = 3 + 2 * static_cast<int>(rng() % static_cast<std::uint64_t>((largest - 3) / 2 + 1));
        const Real got = nlcc(a, b, cfg);
        const Real want = oracle::nlcc({a.data().begin(), a.data().end()}, {b.data().begin(), b.data().end()}, ls,
                                       cfg.window, cfg.epsilon);
        worst["nlcc"] = std::max(worst["nlcc"], oracle::rel_err(got, want, 1e-12));

        worst["smoothness"] = std::max(worst["smoothness"], oracle::rel_err(smoothness(f), oracle::smoothness(f), 1e-12));
    }
    Outcome o{mismatched_labels == 0, ""};
    for (const auto& [name, err] : worst) {
        o.pass = o.pass && err <= kTol;
        o.detail += fmt("%s %.1e, ", name.c_str(), err);
    }
    o.detail += fmt("warp_nearest %d/%d exact; %d instances each", kInstances - mismatched_labels, kInstances,
                    kInstances);
    return o;
}

// 2 -------------------------------------------------------------------------

Outcome gradients() {
    int checked = 0, failed = 0, layers = 0, thin = 0;
    Real worst = 0.0;
    std::string worst_name;
    for (auto mode : {RegistrationMode::pyramid, RegistrationMode::single_field}) {
        for (const auto& r : check_network_gradients(mode, 20, 1e-6, 1e-2)) {
            ++layers;
            checked += r.checked;
            failed += r.failed;
            if (r.checked < 20) ++thin;
            if (r.worst > worst) {
                worst = r.worst;
                worst_name = to_string(mode) + ":" + r.name;
            }
        }
    }
    return {failed == 0,
            fmt("%d parameters over %d layer tensors (%d smaller than 20 fully covered), %d over rtol 1e-2, worst "
                "%.2e at %s",
                checked, layers, thin, failed, worst, worst_name.c_str())};
}

// 3 -------------------------------------------------------------------------

Outcome identity_start() {
    bool ok = true;
    Real worst_loss = 0.0;
    for (auto mode : {RegistrationMode::pyramid, RegistrationMode::single_field}) {
        TrainConfig cfg;
        cfg.mode = mode;
        RegistrationNet net(cfg.network());
        init_params(net, 1);
        PhantomSpec spec;
        spec.seed = 3;
        const auto pair = make_pair(spec);
        const auto out = net.register_pair(pair.moving, pair.fixed);
        ok = ok && std::equal(out.warped.data().begin(), out.warped.data().end(), pair.moving.data().begin());
        const auto same = net.register_pair(pair.moving, pair.moving);
        const auto terms = total_loss(pair.moving, pair.moving, same, cfg.loss);
        worst_loss = std::max(worst_loss, std::abs(terms.total + 1.0));
    }
    ok = ok && worst_loss <= 1e-4;
    return {ok, fmt("warped == moving bitwise for both modes; |total_loss + 1| = %.2e", worst_loss)};
}

// 4 -------------------------------------------------------------------------

Outcome shape_schedule() {
    bool ok = true;
    std::string detail;
    for (const Shape3 s : {Shape3{160, 192, 160}, Shape3{32, 32, 32}}) {
        TrainConfig cfg;
        RegistrationNet net(cfg.network());
        init_params(net, 1);
        const Volume v(s, 0.5);
        const auto out = net.register_pair(v, v);
        int levels = 0;
        for (int l = 0; l < kPyramidLevels; ++l) {
            if (!out.level_fields[l]) continue;
            ++levels;
            const std::int64_t d = std::int64_t{16} >> l;
            for (int a = 0; a < 3; ++a) ok = ok && out.level_fields[l]->shape()[a] == (s[a] + d - 1) / d;
            detail += fmt("%lldx%lldx%lld ", (long long)out.level_fields[l]->shape()[0],
                          (long long)out.level_fields[l]->shape()[1], (long long)out.level_fields[l]->shape()[2]);
        }
        ok = ok && levels == 4 && out.final_field.shape() == s;
        detail += fmt("-> %lldx%lldx%lld; ", (long long)s[0], (long long)s[1], (long long)s[2]);
    }
    return {ok, detail + "4 levels"};
}

// 5-7 -----------------------------------------------------------------------

nlohmann::json desk_config() {
    std::ifstream in(DUALREG_DESK_CONFIG);
    if (!in) throw std::runtime_error(std::string("cannot read ") + DUALREG_DESK_CONFIG);
    return nlohmann::json::parse(in);
}

struct DeskRun {
    EvalReport report;
    Checkpoint checkpoint;
    double seconds = 0.0;
};

class DeskScale {
public:
    explicit DeskScale(fs::path root) : root_(std::move(root)) {
        const auto desk = desk_config();
        const auto cfg = synth_config_from_json(desk.at("synth"));
        if (cfg.n_pairs - cfg.n_test != 24 || cfg.n_test != 8 || cfg.spec.shape != Shape3{32, 32, 32} ||
            cfg.spec.num_regions != 4 || cfg.spec.amplitude != 3.0) {
            throw std::runtime_error("desk config does not describe the 24/8 pair, 32^3, 4-region, amplitude-3 set");
        }
        train_config_ = train_config_from_json(desk.at("train"));
        manifest_ = write_synthetic_dataset(cfg, root_ / "data");
        train_ = load_volume_pairs(manifest_.split("train"));
        test_ = manifest_.split("test");
    }

    std::size_t train_pairs() const { return train_.size(); }
    std::size_t test_pairs() const { return test_.size(); }

    const DeskRun& run(RegistrationMode mode, std::uint64_t seed) {
        const auto key = to_string(mode) + "/" + std::to_string(seed);
        if (auto it = runs_.find(key); it != runs_.end()) return it->second;
        TrainConfig cfg = train_config_;
        cfg.mode = mode;
        cfg.seed = seed;
        cfg.iterations = 2000;
        cfg.checkpoint_every = 0;
        const auto t0 = std::chrono::steady_clock::now();
        DeskRun r;
        r.checkpoint = train(train_, cfg);
        r.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        r.report = evaluate(r.checkpoint, test_);
        std::printf("  trained %s seed %llu: test Dice %.4f (identity %.4f), %.0f s\n", to_string(mode).c_str(),
                    static_cast<unsigned long long>(seed), r.report.average, r.report.baseline_average, r.seconds);
        std::fflush(stdout);
        return runs_.emplace(key, std::move(r)).first->second;
    }

    EvalReport reduced(const Checkpoint& ckpt, const SliceReduction& red) const { return evaluate(ckpt, test_, red); }

private:
    fs::path root_;
    TrainConfig train_config_;
    Manifest manifest_;
    std::vector<VolumePair> train_;
    std::vector<PairEntry> test_;
    std::map<std::string, DeskRun> runs_;
};

Outcome desk_learning(DeskScale& desk) {
    const auto& r = desk.run(RegistrationMode::pyramid, 1);
    const Real gain = r.report.average - r.report.baseline_average;
    return {gain >= 0.15, fmt("%zu train / %zu test pairs, 2000 steps: Dice %.4f vs identity %.4f, gain %+.4f "
                              "(need >= 0.15), training %.0f s",
                              desk.train_pairs(), desk.test_pairs(), r.report.average, r.report.baseline_average, gain,
                              r.seconds)};
}

Outcome ablation(DeskScale& desk) {
    Real pyr = 0.0, single = 0.0;
    for (std::uint64_t seed : {1, 2, 3}) {
        pyr += desk.run(RegistrationMode::pyramid, seed).report.average / 3.0;
        single += desk.run(RegistrationMode::single_field, seed).report.average / 3.0;
    }
    return {pyr >= single, fmt("mean over seeds 1-3: pyramid %.4f, single_field %.4f", pyr, single)};
}

Outcome slice_reduction(DeskScale& desk) {
    const auto& r = desk.run(RegistrationMode::pyramid, 1);
    const SliceReduction red{1, 32 / 8};
    const auto rep = desk.reduced(r.checkpoint, red);
    const Real gain = rep.average - rep.baseline_average;
    return {gain >= 0.10, fmt("axis 1 kept %lld of 32 slices: Dice %.4f vs identity %.4f, gain %+.4f (need >= 0.10)",
                              static_cast<long long>(red.keep), rep.average, rep.baseline_average, gain)};
}

// 8 -------------------------------------------------------------------------

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

Outcome determinism(const fs::path& root) {
    TrainConfig cfg;
    cfg.iterations = 30;
    cfg.seed = 5;
    std::vector<VolumePair> data;
    for (std::uint64_t s = 0; s < 4; ++s) {
        PhantomSpec spec;
        spec.seed = 100 + s;
        auto p = make_pair(spec);
        data.push_back({std::move(p.moving), std::move(p.fixed)});
    }
    Trainer a(cfg, data);
    a.run();
    Trainer b(cfg, data);
    b.run();
    Real history_diff = 0.0;
    for (std::size_t i = 0; i < a.history().size(); ++i)
        history_diff = std::max(history_diff, std::abs(a.history()[i].total - b.history()[i].total));

    auto half = cfg;
    half.iterations = 15;
    Trainer c(half, data);
    c.run();
    save_checkpoint(c.checkpoint(), root / "half.ckpt");
    auto resumed = load_checkpoint(root / "half.ckpt");
    resumed.config.iterations = cfg.iterations;
    Trainer d(resumed, data);
    d.step();
    const Real resume_diff = std::abs(d.history().back().total - a.history()[15].total);
    d.run();
    Real resume_all = 0.0;
    for (std::size_t i = 0; i < a.history().size(); ++i)
        resume_all = std::max(resume_all, std::abs(a.history()[i].total - d.history()[i].total));

    save_checkpoint(a.checkpoint(), root / "a.ckpt");
    save_checkpoint(load_checkpoint(root / "a.ckpt"), root / "a2.ckpt");
    const bool bytes = slurp(root / "a.ckpt") == slurp(root / "a2.ckpt");

    const bool ok = history_diff <= 1e-6 && resume_diff <= 1e-6 && resume_all <= 1e-6 && bytes &&
                    a.history().size() == 30;
    return {ok, fmt("repeat-run max loss diff %.1e, resumed next-step diff %.1e (whole run %.1e), checkpoint "
                    "round trip %s",
                    history_diff, resume_diff, resume_all, bytes ? "byte-identical" : "DIFFERS")};
}

}  // namespace

int main(int argc, char** argv) {
    std::set<int> only;
    for (int i = 1; i < argc; ++i) only.insert(std::atoi(argv[i]));
    auto wanted = [&](int c) { return only.empty() || only.count(c) > 0; };

    TempDir scratch;
    std::unique_ptr<DeskScale> desk;
    auto desk_data = [&]() -> DeskScale& {
        if (!desk) desk = std::make_unique<DeskScale>(scratch.path);
        return *desk;
    };

    const std::vector<std::pair<int, std::function<Outcome()>>> criteria = {
        {1, oracles},
        {2, gradients},
        {3, identity_start},
        {4, shape_schedule},
        {5, [&] { return desk_learning(desk_data()); }},
        {6, [&] { return ablation(desk_data()); }},
        {7, [&] { return slice_reduction(desk_data()); }},
        {8, [&] { return determinism(scratch.path); }},
    };

    int failures = 0;
    for (const auto& [id, fn] : criteria) {
        if (!wanted(id)) continue;
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = fn();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %d: %s - %s [%.1f s]\n", id, o.pass ? "PASS" : "FAIL", o.detail.c_str(), secs);
        std::fflush(stdout);
        if (!o.pass) ++failures;
    }
    return failures == 0 ? 0 : 1;
}
