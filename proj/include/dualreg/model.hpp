#pragma once

#include <cstdint>

#include "dualreg/backbone.hpp"
#include "dualreg/losses.hpp"
#include "dualreg/pyramid.hpp"

namespace dualreg {

struct NetworkConfig {
    BackboneConfig backbone{};
    RegistrationMode mode = RegistrationMode::pyramid;
};

/// Dual-stream backbone plus field heads, owning one parameter set.
class RegistrationNet {
public:
    struct Tape {
        Backbone::Tape moving_stream;
        Backbone::Tape fixed_stream;
        FeaturePyramid moving_features;
        FeaturePyramid fixed_features;
        PyramidTape pyramid;
        Tensor moving;
    };

    explicit RegistrationNet(const NetworkConfig& config);
    RegistrationNet(const RegistrationNet& other);
    RegistrationNet& operator=(const RegistrationNet& other);

    const NetworkConfig& config() const { return config_; }
    ParamStore& params() { return params_; }
    const ParamStore& params() const { return params_; }
    const Backbone& backbone() const { return backbone_; }
    const FieldHeads& heads() const { return heads_; }

    /// Batched forward on (batch, 1, ...) tensors. Training mode normalizes with
    /// batch statistics and records a tape for backward().
    BatchedRegistration forward(const Tensor& moving, const Tensor& fixed, bool training, Tape* tape = nullptr) const;

    /// Accumulates parameter gradients of a scalar given its gradients w.r.t.
    /// the warped volumes and final fields.
    void backward(const Tape& tape, const Tensor& grad_warped, const Tensor& grad_final_field);

    /// Folds the batch statistics recorded in `tape` into the running averages.
    void update_running_stats(const Tape& tape);

    /// Inference-mode registration of one pair.
    RegistrationOutput register_pair(const Volume& moving, const Volume& fixed) const;

private:
    void build();

    NetworkConfig config_;
    ParamStore params_;
    Backbone backbone_;
    FieldHeads heads_;
};

/// Stacks volumes of equal shape into a (batch, 1, ...) tensor.
Tensor stack_volumes(const std::vector<const Volume*>& volumes);

/// Fan-in scaled normal draws for backbone convolutions, zero biases, unit
/// norm scales, zero field heads. Deterministic in `seed`.
void init_params(RegistrationNet& net, std::uint64_t seed);

struct BatchLoss {
    Real total = 0.0;
    Real similarity = 0.0;
    Real smooth = 0.0;
};

/// Batch-mean total loss of a forward result; fills gradients w.r.t. the
/// warped volumes and final fields when the output tensors are given.
BatchLoss batch_loss(const BatchedRegistration& r, const Tensor& fixed, const LossConfig& cfg,
                     Tensor* grad_warped = nullptr, Tensor* grad_final_field = nullptr);

}  // namespace dualreg
