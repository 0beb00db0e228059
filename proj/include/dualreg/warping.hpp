#pragma once

#include <span>
#include <vector>

#include "dualreg/common.hpp"
#include "dualreg/tensor.hpp"
#include "dualreg/volume.hpp"

namespace dualreg {

/// Per-voxel displacement in voxel units. A warp reads its input at p + u(p).
/// Stored component-major: (3, s0, s1, s2).
class DisplacementField {
public:
    DisplacementField() = default;
    explicit DisplacementField(Shape3 shape, Real fill = 0.0)
        : shape_(shape), data_(static_cast<std::size_t>(3 * shape.voxels()), fill) {}
    DisplacementField(Shape3 shape, std::vector<Real> data);

    /// Field whose every voxel holds the same displacement.
    static DisplacementField constant(Shape3 shape, const std::array<Real, 3>& u);

    const Shape3& shape() const { return shape_; }
    std::span<const Real> data() const { return data_; }
    std::span<Real> data() { return data_; }

    std::span<const Real> component(int c) const {
        return std::span<const Real>(data_).subspan(static_cast<std::size_t>(c * shape_.voxels()),
                                                    static_cast<std::size_t>(shape_.voxels()));
    }
    std::span<Real> component(int c) {
        return std::span<Real>(data_).subspan(static_cast<std::size_t>(c * shape_.voxels()),
                                              static_cast<std::size_t>(shape_.voxels()));
    }
    Real& at(int c, std::int64_t i, std::int64_t j, std::int64_t k) {
        return data_[c * shape_.voxels() + shape_.index(i, j, k)];
    }
    Real at(int c, std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[c * shape_.voxels() + shape_.index(i, j, k)];
    }

    bool all_finite() const;
    Real max_abs() const;
    Real mean_abs() const;

private:
    Shape3 shape_{};
    std::vector<Real> data_;
};

DisplacementField load_field(const std::filesystem::path& path);
void save_field(const DisplacementField& f, const std::filesystem::path& path);

/// Trilinear warp with clamp-to-edge sampling.
Volume warp_trilinear(const Volume& src, const DisplacementField& f);

/// Zero-order warp: out(p) = src(round(p + u(p))), rounding half away from zero.
LabelMap warp_nearest(const LabelMap& src, const DisplacementField& f);

/// Trilinear upsampling by 2 with displacements scaled by 2. Fine voxel i
/// samples the coarse grid at i / 2, clamped; `target` defaults to twice the
/// input shape and may be one smaller per axis for odd fine extents.
DisplacementField upsample_field(const DisplacementField& f);
DisplacementField upsample_field(const DisplacementField& f, const Shape3& target);

/// Single field equivalent to applying `accumulated_up` then `residual`:
/// out(p) = accumulated_up(p + residual(p)) + residual(p).
DisplacementField compose(const DisplacementField& accumulated_up, const DisplacementField& residual);

// ---------------------------------------------------------------------------
// Raw kernels shared with the network. Grids are contiguous channel blocks of
// `shape.voxels()` values; `field` holds 3 such blocks. Backward variants
// accumulate into their outputs; null spans skip that gradient.
namespace kernels {

void warp(const Real* src, std::int64_t channels, const Shape3& shape, const Real* field, Real* out);

void warp_backward(const Real* src, std::int64_t channels, const Shape3& shape, const Real* field,
                   const Real* grad_out, Real* grad_src, Real* grad_field);

/// Upsampling from `from` to `to` (each extent 2s or 2s-1), fine i -> coarse i/2, times `scale`.
void upsample(const Real* src, std::int64_t channels, const Shape3& from, const Shape3& to, Real scale, Real* out);

void upsample_backward(const Real* grad_out, std::int64_t channels, const Shape3& from, const Shape3& to,
                       Real scale, Real* grad_src);

/// compose() on raw blocks; out must not alias inputs.
void compose(const Real* a, const Real* b, const Shape3& shape, Real* out);

void compose_backward(const Real* a, const Real* b, const Shape3& shape, const Real* grad_out, Real* grad_a,
                      Real* grad_b);

}  // namespace kernels

/// Per-channel warp of every sample of a feature tensor by a batched field tensor (3 channels).
Tensor warp_features(const Tensor& src, const Tensor& fields);

}  // namespace dualreg
