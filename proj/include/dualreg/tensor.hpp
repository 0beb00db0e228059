#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "dualreg/common.hpp"

namespace dualreg {

/// Batched multi-channel 3D grid laid out as (batch, channel, s0, s1, s2).
class Tensor {
public:
    Tensor() = default;
    Tensor(std::int64_t batch, std::int64_t channels, Shape3 spatial, Real fill = 0.0)
        : batch_(batch),
          channels_(channels),
          spatial_(spatial),
          values_(static_cast<std::size_t>(batch * channels * spatial.voxels()), fill) {}

    std::int64_t batch() const { return batch_; }
    std::int64_t channels() const { return channels_; }
    const Shape3& spatial() const { return spatial_; }
    std::int64_t voxels() const { return spatial_.voxels(); }
    std::int64_t size() const { return static_cast<std::int64_t>(values_.size()); }

    Real* data() { return values_.data(); }
    const Real* data() const { return values_.data(); }
    std::span<Real> values() { return values_; }
    std::span<const Real> values() const { return values_; }

    Real* sample(std::int64_t n) { return values_.data() + n * channels_ * voxels(); }
    const Real* sample(std::int64_t n) const { return values_.data() + n * channels_ * voxels(); }
    Real* channel(std::int64_t n, std::int64_t c) { return sample(n) + c * voxels(); }
    const Real* channel(std::int64_t n, std::int64_t c) const { return sample(n) + c * voxels(); }

    bool same_layout(const Tensor& o) const {
        return batch_ == o.batch_ && channels_ == o.channels_ && spatial_ == o.spatial_;
    }

    Tensor& operator+=(const Tensor& o);

private:
    std::int64_t batch_ = 0;
    std::int64_t channels_ = 0;
    Shape3 spatial_{};
    std::vector<Real, AlignedAllocator<Real>> values_;
};

/// A zero tensor with the same layout as `t`.
inline Tensor zeros_like(const Tensor& t) { return {t.batch(), t.channels(), t.spatial()}; }

/// Channel-wise concatenation of two tensors with equal batch and spatial shape.
Tensor concat_channels(const Tensor& a, const Tensor& b);

/// Splits a gradient w.r.t. concat_channels(a, b) into the two parts.
void split_channels(const Tensor& g, std::int64_t channels_a, Tensor& ga, Tensor& gb);

}  // namespace dualreg
