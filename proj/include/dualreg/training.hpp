#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "dualreg/model.hpp"

namespace dualreg {

struct TrainConfig {
    Real learning_rate = 1e-4;
    std::int64_t batch_size = 2;
    std::int64_t iterations = 2000;
    std::uint64_t seed = 1;
    RegistrationMode mode = RegistrationMode::pyramid;
    LossConfig loss{};
    BackboneConfig channels{{8, 16, 16, 16}, 8};
    Shape3 input_shape{32, 32, 32};
    std::int64_t checkpoint_every = 0;  // 0 disables periodic checkpoints
    bool augment = true;                // random flips, axis permutations and role swaps

    void validate() const;
    NetworkConfig network() const { return {channels, mode}; }
};

nlohmann::json to_json(const TrainConfig& c);
/// Missing keys keep their defaults; malformed values throw std::invalid_argument.
TrainConfig train_config_from_json(const nlohmann::json& j);

/// 64-bit FNV-1a of the canonical config JSON, as 16 hex digits.
std::string config_digest(const TrainConfig& c);

/// All ordered (moving, fixed) pairs of distinct subjects: n * (n - 1) entries.
template <typename T>
std::vector<std::pair<T, T>> enumerate_pairs(const std::vector<T>& subjects) {
    if (subjects.size() < 2) throw std::invalid_argument("enumerate_pairs: need at least 2 subjects");
    std::vector<std::pair<T, T>> out;
    out.reserve(subjects.size() * (subjects.size() - 1));
    for (std::size_t i = 0; i < subjects.size(); ++i)
        for (std::size_t j = 0; j < subjects.size(); ++j)
            if (i != j) out.emplace_back(subjects[i], subjects[j]);
    return out;
}

/// Position -> pair index under epoch-wise shuffling without replacement.
/// Pure in (seed, epoch).
std::vector<std::size_t> epoch_order(std::size_t count, std::uint64_t seed, std::uint64_t epoch);

struct VolumePair {
    Volume moving;
    Volume fixed;
};

/// Rigid grid symmetry applied to both volumes of a training pair: output
/// axis a reads input axis perm[a], optionally reversed; `swap` exchanges the
/// moving and fixed roles.
struct Augmentation {
    std::array<int, 3> perm{0, 1, 2};
    std::array<bool, 3> flip{false, false, false};
    bool swap = false;
};

/// Pure in (seed, step, slot). Only permutations that preserve `shape` are drawn.
Augmentation draw_augmentation(const Shape3& shape, std::uint64_t seed, std::int64_t step, std::int64_t slot);
Volume apply_augmentation(const Volume& v, const Augmentation& a);

struct LossRecord {
    std::int64_t step = 0;
    Real total = 0.0;
    Real similarity = 0.0;
    Real smooth = 0.0;
};

/// Adam with bias correction, beta = (0.9, 0.999), eps = 1e-8, no weight decay.
struct AdamState {
    std::vector<std::vector<Real>> m;
    std::vector<std::vector<Real>> v;

    static AdamState zeros_for(const ParamStore& store);
    void step(ParamStore& store, Real learning_rate, std::int64_t t);
};

struct Checkpoint {
    TrainConfig config;
    std::int64_t iteration = 0;
    std::vector<LossRecord> history;
    ParamStore params;
    AdamState adam;
};

inline constexpr std::uint32_t kCheckpointVersion = 1;

/// Layout: 8-byte magic "DRPNCKPT", u32 version, u64 header length, JSON
/// header (config, digest, iteration, history, tensor table), then raw
/// little-endian f64 tensors at the offsets listed in the table.
void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path);
Checkpoint load_checkpoint(const std::filesystem::path& path);

/// Builds the network described by a checkpoint and loads its parameters.
RegistrationNet network_from_checkpoint(const Checkpoint& ckpt);

/// Inference-mode registration with a checkpointed model.
RegistrationOutput register_volumes(const Volume& moving, const Volume& fixed, const Checkpoint& ckpt);

class Trainer {
public:
    Trainer(TrainConfig config, std::vector<VolumePair> data);
    Trainer(const Checkpoint& ckpt, std::vector<VolumePair> data);

    /// One optimization step on the next batch; returns the pre-update loss.
    LossRecord step();

    /// Runs until `config.iterations` steps are done. `on_step` sees every
    /// record; `on_checkpoint` fires at the configured cadence.
    void run(const std::function<void(const LossRecord&)>& on_step = {},
             const std::function<void(const Checkpoint&)>& on_checkpoint = {});

    Checkpoint checkpoint() const;

    const TrainConfig& config() const { return config_; }
    const RegistrationNet& net() const { return net_; }
    RegistrationNet& net() { return net_; }
    std::int64_t iteration() const { return iteration_; }
    const std::vector<LossRecord>& history() const { return history_; }

    /// Indices of the pairs in the batch for a given step.
    std::vector<std::size_t> batch_indices(std::int64_t step) const;

private:
    void check_data() const;

    TrainConfig config_;
    std::vector<VolumePair> data_;
    RegistrationNet net_;
    AdamState adam_;
    std::int64_t iteration_ = 0;
    std::vector<LossRecord> history_;
};

/// Convenience wrapper: trains from scratch and returns the final checkpoint.
Checkpoint train(std::vector<VolumePair> data, const TrainConfig& config);

}  // namespace dualreg
