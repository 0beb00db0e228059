#pragma once

#include <array>
#include <vector>

#include "dualreg/layers.hpp"

namespace dualreg {

inline constexpr int kPyramidLevels = 4;

struct BackboneConfig {
    std::array<std::int64_t, 4> encoder_channels{16, 32, 32, 32};
    std::int64_t decoder_channels = 16;
};

/// Decoder feature maps for one stream, coarsest (1/16) first, finest (1/2) last.
struct FeaturePyramid {
    std::array<Tensor, kPyramidLevels> levels;
};

/// Spatial shape of pyramid level `level` (1 = coarsest) for a given input:
/// ceil(input / 2^(5 - level)) per axis.
Shape3 level_shape(const Shape3& input, int level);

/// Conv -> batch norm -> rectifier.
struct ConvUnit {
    Conv3d conv;
    BatchNorm3d bn;

    struct Tape {
        Tensor input;
        BatchNorm3d::Cache bn;
        Tensor output;
    };

    static ConvUnit create(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, int stride);
    Tensor forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const;
    Tensor backward(ParamStore& store, const Tape& tape, Tensor grad) const;
};

/// Two convolutions with an identity shortcut: relu(x + bn(conv(relu(bn(conv(x)))))).
struct ResBlock {
    ConvUnit first;
    Conv3d conv;
    BatchNorm3d bn;

    struct Tape {
        ConvUnit::Tape first;
        BatchNorm3d::Cache bn;
        Tensor output;
    };

    static ResBlock create(ParamStore& store, const std::string& name, std::int64_t channels);
    Tensor forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const;
    Tensor backward(ParamStore& store, const Tape& tape, Tensor grad) const;
};

/// Shared-weight encoder-decoder producing a 4-level feature pyramid per input volume.
/// Parameters live in an external ParamStore; one Backbone serves both streams.
class Backbone {
public:
    struct Tape {
        std::array<ConvUnit::Tape, 4> down;
        std::array<std::array<ResBlock::Tape, 2>, 4> res;  // unused for stage 0
        std::array<Tensor, 4> encoded;
    };

    Backbone() = default;
    Backbone(ParamStore& store, const BackboneConfig& config);

    const BackboneConfig& config() const { return config_; }

    /// Encoder stages at scales 1/2, 1/4, 1/8, 1/16. Input is (batch, 1, s0, s1, s2), each s >= 16.
    std::array<Tensor, 4> encode(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const;

    /// output = upsample(coarse) + conv1x1(skip) at the skip resolution.
    Tensor refine_unit(const ParamStore& store, int level, const Tensor& coarse, const Tensor& skip) const;

    FeaturePyramid decode(const ParamStore& store, const std::array<Tensor, 4>& encoded) const;

    FeaturePyramid forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const;

    /// Backpropagates pyramid-level gradients into the parameter gradients.
    void backward(ParamStore& store, const Tape& tape, const std::array<Tensor, 4>& level_grads) const;

    void update_running_stats(ParamStore& store, const Tape& tape) const;

    /// Level 1 projection of the deepest encoder stage to decoder width.
    const Conv3d& lateral() const { return lateral_; }
    /// 1x1x1 skip projection feeding level `level` (2..4).
    const Conv3d& refine_conv(int level) const { return refine_[level - 2]; }

private:
    BackboneConfig config_{};
    std::array<ConvUnit, 4> down_{};
    std::array<std::array<ResBlock, 2>, 4> res_{};
    Conv3d lateral_{};
    std::array<Conv3d, 3> refine_{};
};

/// Applies the same backbone and parameters to each volume independently.
std::pair<FeaturePyramid, FeaturePyramid> forward_dual(const Backbone& backbone, const ParamStore& store,
                                                       const Tensor& moving, const Tensor& fixed);

}  // namespace dualreg
