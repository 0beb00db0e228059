#pragma once

#include <array>
#include <optional>

#include "dualreg/backbone.hpp"
#include "dualreg/warping.hpp"

namespace dualreg {

enum class RegistrationMode { pyramid, single_field };

std::string to_string(RegistrationMode mode);
RegistrationMode parse_mode(const std::string& text);

/// One linear 3x3x3 convolution per level mapping stacked (moving, fixed)
/// features to a 3-channel residual field. Zero-initialized.
struct FieldHeads {
    std::array<Conv3d, kPyramidLevels> conv;

    static FieldHeads create(ParamStore& store, std::int64_t feature_channels);
};

/// Batched registration results. Fields are (batch, 3, ...) tensors in voxel
/// units of their own grid; index 0 is the coarsest level.
struct BatchedRegistration {
    std::array<std::optional<Tensor>, kPyramidLevels> level_fields;
    std::array<std::optional<Tensor>, kPyramidLevels> accumulated;
    Tensor final_field;
    Tensor warped;
};

/// Single-pair view with the public field types.
struct RegistrationOutput {
    std::array<std::optional<DisplacementField>, kPyramidLevels> level_fields;
    std::array<std::optional<DisplacementField>, kPyramidLevels> accumulated;
    DisplacementField final_field;
    Volume warped;
};

RegistrationOutput unbatch(const BatchedRegistration& r, std::int64_t sample, const Spacing& spacing = {1, 1, 1});

struct PyramidTape {
    std::array<Tensor, kPyramidLevels> upsampled;        // u(accumulated_{i-1}) at level i's grid
    std::array<Tensor, kPyramidLevels> warped_features;  // moving features after warping
    std::array<Tensor, kPyramidLevels> stacked;          // head inputs
    BatchedRegistration result;
};

/// Stacks (moving first) and applies the level's head convolution.
Tensor estimate_level_field(const ParamStore& store, const FieldHeads& heads, int level, const Tensor& warped_moving,
                            const Tensor& fixed);

/// Coarse-to-fine estimation: level 1 stacks raw features; each finer level
/// warps the moving features by the upsampled running composition, estimates a
/// residual and composes. The final field is one more upsampling of level 4.
BatchedRegistration run_pyramid(const ParamStore& store, const FieldHeads& heads, const FeaturePyramid& pm,
                                const FeaturePyramid& pf, const Tensor& moving, PyramidTape* tape = nullptr);

/// Ablation: a single field from the finest level, upsampled once.
BatchedRegistration single_field_variant(const ParamStore& store, const FieldHeads& heads, const FeaturePyramid& pm,
                                         const FeaturePyramid& pf, const Tensor& moving, PyramidTape* tape = nullptr);

struct PyramidGrads {
    std::array<Tensor, kPyramidLevels> moving;
    std::array<Tensor, kPyramidLevels> fixed;
};

/// Backpropagates gradients of a scalar w.r.t. `warped` and `final_field`
/// into head parameters and both feature pyramids.
PyramidGrads pyramid_backward(ParamStore& store, const FieldHeads& heads, RegistrationMode mode,
                              const FeaturePyramid& pm, const FeaturePyramid& pf, const Tensor& moving,
                              const PyramidTape& tape, const Tensor& grad_warped, const Tensor& grad_final_field);

}  // namespace dualreg
