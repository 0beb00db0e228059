#pragma once

#include <span>
#include <vector>

#include "dualreg/pyramid.hpp"
#include "dualreg/volume.hpp"
#include "dualreg/warping.hpp"

namespace dualreg {

struct LossConfig {
    int window = 9;       // odd cube edge of the local correlation window
    Real lambda = 1.0;    // smoothness weight
    Real epsilon = 1e-5;  // variance stabilizer

    void validate() const;
};

/// Zero-padded cube sums of edge `window` centered on every voxel.
std::vector<Real> box_sum(std::span<const Real> values, const Shape3& shape, int window);

/// Negative mean squared local correlation, in [-1, 0]. When `grad_warped` is
/// non-empty it receives d(nlcc)/d(warped) (overwritten).
Real nlcc(std::span<const Real> warped, std::span<const Real> fixed, const Shape3& shape, const LossConfig& cfg,
          std::span<Real> grad_warped = {});
Real nlcc(const Volume& warped, const Volume& fixed, const LossConfig& cfg);

/// Mean over voxels, components and axes of squared forward differences
/// (zero at the high border). `grad` is accumulated when non-empty.
Real smoothness(std::span<const Real> field, const Shape3& shape, std::span<Real> grad = {}, Real grad_scale = 1.0);
Real smoothness(const DisplacementField& f);

struct LossTerms {
    Real total = 0.0;
    Real similarity = 0.0;
    Real smooth = 0.0;
};

/// nlcc(out.warped, fixed) + lambda * smoothness(out.final_field).
LossTerms total_loss(const Volume& moving, const Volume& fixed, const RegistrationOutput& out, const LossConfig& cfg);

struct RegionDice {
    int region = 0;
    Real score = 0.0;
    bool absent = false;  // region missing from both maps; scored 1
};

struct DiceResult {
    std::vector<RegionDice> regions;
    Real average = 0.0;
};

/// Per-region Dice 2|a=r & b=r| / (|a=r| + |b=r|) and the unweighted mean.
DiceResult dice(const LabelMap& a, const LabelMap& b, const std::vector<int>& regions);

}  // namespace dualreg
