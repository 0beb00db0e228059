#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include <unistd.h>
#include <random>
#include <vector>

#include "dualreg/model.hpp"
#include "dualreg/synth.hpp"
#include "fd.hpp"

namespace dualreg::testing {

/// Scratch directory removed on destruction.
struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int counter = 0;
        path = std::filesystem::temp_directory_path() /
               ("dualreg_test_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() { std::filesystem::remove_all(path); }
    TempDir(const TempDir&) = delete;
    TempDir& operator=(const TempDir&) = delete;
};

inline Volume random_volume(const Shape3& s, std::mt19937_64& rng, Real lo = 0.0, Real hi = 1.0) {
    std::uniform_real_distribution<Real> u(lo, hi);
    Volume v(s);
    for (auto& x : v.data()) x = u(rng);
    return v;
}

inline DisplacementField random_field(const Shape3& s, std::mt19937_64& rng, Real amplitude) {
    std::uniform_real_distribution<Real> u(-amplitude, amplitude);
    DisplacementField f(s);
    for (auto& x : f.data()) x = u(rng);
    return f;
}

inline LabelMap random_labels(const Shape3& s, std::mt19937_64& rng, int regions) {
    std::uniform_int_distribution<int> u(0, regions);
    LabelMap m(s);
    for (auto& x : m.data()) x = static_cast<std::uint16_t>(u(rng));
    return m;
}

/// A small network with nonzero heads, so every parameter affects the loss.
inline RegistrationNet small_net(RegistrationMode mode, std::uint64_t seed, Real head_std = 0.05) {
    RegistrationNet net(NetworkConfig{BackboneConfig{{4, 8, 8, 8}, 4}, mode});
    init_params(net, seed);
    std::mt19937_64 rng(seed + 17);
    std::normal_distribution<Real> n(0.0, head_std);
    for (auto& e : net.params().entries()) {
        if (e.name.rfind("heads.", 0) == 0) {
            for (auto& v : e.value) v = n(rng);
        }
    }
    return net;
}

/// Two smooth phantom pairs stacked as a batch.
struct PairBatch {
    Tensor moving;
    Tensor fixed;
};

inline PairBatch phantom_batch(const Shape3& s, std::uint64_t seed, int batch = 2) {
    std::vector<Volume> m, f;
    for (int b = 0; b < batch; ++b) {
        PhantomSpec spec;
        spec.shape = s;
        spec.num_regions = 3;
        spec.amplitude = 2.0;
        spec.smoothness_sigma = 2.0;
        spec.seed = seed + static_cast<std::uint64_t>(b);
        auto p = make_pair(spec);
        m.push_back(std::move(p.moving));
        f.push_back(std::move(p.fixed));
    }
    std::vector<const Volume*> mp, fp;
    for (int b = 0; b < batch; ++b) {
        mp.push_back(&m[b]);
        fp.push_back(&f[b]);
    }
    return {stack_volumes(mp), stack_volumes(fp)};
}

}  // namespace dualreg::testing
