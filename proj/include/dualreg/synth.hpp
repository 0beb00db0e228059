#pragma once

#include <cstdint>

#include "dualreg/volume.hpp"
#include "dualreg/warping.hpp"

namespace dualreg {

/// Parameters of a synthetic labeled phantom and its ground-truth deformation.
struct PhantomSpec {
    Shape3 shape{32, 32, 32};
    int num_regions = 4;
    Real amplitude = 3.0;         // max |component| of the ground-truth field, voxels
    Real smoothness_sigma = 16.0;  // Gaussian width of the field, voxels
    Real noise_sigma = 0.02;      // intensity noise before normalization
    std::uint64_t seed = 1;

    void validate() const;
};

struct Phantom {
    Volume volume;
    LabelMap labels;
};

/// Overlapping random ellipsoids labeled 1..K over background, one constant
/// intensity per region plus Gaussian noise, min-max normalized.
Phantom make_phantom(const PhantomSpec& spec);

/// Gaussian-smoothed white noise (separable, truncated at 3 sigma, edge
/// replicated) rescaled so the largest |component| equals `amplitude`.
DisplacementField random_smooth_field(const Shape3& shape, Real amplitude, Real smoothness_sigma, std::uint64_t seed);

struct SyntheticPair {
    Volume moving;
    Volume fixed;
    LabelMap moving_labels;
    LabelMap fixed_labels;
    DisplacementField gt_field;
};

/// fixed = phantom; moving = fixed warped by a random smooth field.
SyntheticPair make_pair(const PhantomSpec& spec);

/// Separable Gaussian blur of one grid in place (edge replicated).
void gaussian_blur(std::span<Real> values, const Shape3& shape, Real sigma);

}  // namespace dualreg
