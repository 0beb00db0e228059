#include "dualreg/backbone.hpp"

namespace dualreg {

Shape3 level_shape(const Shape3& input, int level) {
    Shape3 s = input;
    for (int k = 0; k < 5 - level; ++k) s = halved(s);
    return s;
}

ConvUnit ConvUnit::create(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, int stride) {
    return {Conv3d::create(store, name + ".conv", in, out, 3, stride), BatchNorm3d::create(store, name + ".bn", out)};
}

Tensor ConvUnit::forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const {
    BatchNorm3d::Cache local;
    auto& cache = tape ? tape->bn : local;
    Tensor y = bn.forward(store, conv.forward(store, x), training, cache);
    relu_inplace(y);
    if (tape) {
        tape->input = x;
        tape->output = y;
    }
    return y;
}

Tensor ConvUnit::backward(ParamStore& store, const Tape& tape, Tensor grad) const {
    relu_backward_inplace(tape.output, grad);
    return conv.backward(store, tape.input, bn.backward(store, tape.bn, grad));
}

ResBlock ResBlock::create(ParamStore& store, const std::string& name, std::int64_t channels) {
    return {ConvUnit::create(store, name + ".a", channels, channels, 1),
            Conv3d::create(store, name + ".b.conv", channels, channels, 3, 1),
            BatchNorm3d::create(store, name + ".b.bn", channels)};
}

Tensor ResBlock::forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const {
    const Tensor h = first.forward(store, x, training, tape ? &tape->first : nullptr);
    BatchNorm3d::Cache local;
    Tensor y = bn.forward(store, conv.forward(store, h), training, tape ? tape->bn : local);
    y += x;
    relu_inplace(y);
    if (tape) tape->output = y;
    return y;
}

Tensor ResBlock::backward(ParamStore& store, const Tape& tape, Tensor grad) const {
    relu_backward_inplace(tape.output, grad);
    Tensor gh = conv.backward(store, tape.first.output, bn.backward(store, tape.bn, grad));
    Tensor gx = first.backward(store, tape.first, std::move(gh));
    gx += grad;
    return gx;
}

// ---------------------------------------------------------------------------

Backbone::Backbone(ParamStore& store, const BackboneConfig& config) : config_(config) {
    std::int64_t in = 1;
    for (int s = 0; s < 4; ++s) {
        const auto out = config.encoder_channels[s];
        const std::string name = "backbone.enc" + std::to_string(s + 1);
        down_[s] = ConvUnit::create(store, name + ".down", in, out, 2);
        if (s > 0) {
            res_[s][0] = ResBlock::create(store, name + ".res1", out);
            res_[s][1] = ResBlock::create(store, name + ".res2", out);
        }
        in = out;
    }
    const auto d = config.decoder_channels;
    lateral_ = Conv3d::create(store, "backbone.dec1.lateral", config.encoder_channels[3], d, 1, 1);
    for (int level = 2; level <= 4; ++level) {
        refine_[level - 2] = Conv3d::create(store, "backbone.dec" + std::to_string(level) + ".refine",
                                            config.encoder_channels[4 - level], d, 1, 1);
    }
}

std::array<Tensor, 4> Backbone::encode(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const {
    for (int a = 0; a < 3; ++a) {
        if (x.spatial()[a] < 16) {
            throw DataError("encode: input " + x.spatial().str() + " too small, every extent must be >= 16");
        }
    }
    std::array<Tensor, 4> out;
    Tensor h = x;
    for (int s = 0; s < 4; ++s) {
        h = down_[s].forward(store, h, training, tape ? &tape->down[s] : nullptr);
        if (s > 0) {
            for (int r = 0; r < 2; ++r) h = res_[s][r].forward(store, h, training, tape ? &tape->res[s][r] : nullptr);
        }
        out[s] = h;
    }
    if (tape) tape->encoded = out;
    return out;
}

Tensor Backbone::refine_unit(const ParamStore& store, int level, const Tensor& coarse, const Tensor& skip) const {
    const auto& c = refine_conv(level);
    Tensor y = c.forward(store, skip);
    y += upsample_features(coarse, skip.spatial());
    return y;
}

FeaturePyramid Backbone::decode(const ParamStore& store, const std::array<Tensor, 4>& encoded) const {
    FeaturePyramid p;
    p.levels[0] = lateral_.forward(store, encoded[3]);
    for (int level = 2; level <= 4; ++level) {
        p.levels[level - 1] = refine_unit(store, level, p.levels[level - 2], encoded[4 - level]);
    }
    return p;
}

FeaturePyramid Backbone::forward(const ParamStore& store, const Tensor& x, bool training, Tape* tape) const {
    return decode(store, encode(store, x, training, tape));
}

void Backbone::backward(ParamStore& store, const Tape& tape, const std::array<Tensor, 4>& level_grads) const {
    // Decoder, finest level first; each level also feeds the next finer one.
    std::array<Tensor, 4> enc_grad;
    Tensor g = level_grads[3];
    for (int level = 4; level >= 2; --level) {
        const auto& skip = tape.encoded[4 - level];
        enc_grad[4 - level] = refine_conv(level).backward(store, skip, g);
        Tensor coarse = upsample_features_backward(g, tape.encoded[5 - level].spatial());
        coarse += level_grads[level - 2];
        g = std::move(coarse);
    }
    enc_grad[3] = lateral_.backward(store, tape.encoded[3], g);

    // Encoder, deepest stage first.
    Tensor h = enc_grad[3];
    for (int s = 3; s >= 0; --s) {
        if (s < 3) h += enc_grad[s];
        if (s > 0) {
            for (int r = 1; r >= 0; --r) h = res_[s][r].backward(store, tape.res[s][r], std::move(h));
        }
        h = down_[s].backward(store, tape.down[s], std::move(h));
    }
}

void Backbone::update_running_stats(ParamStore& store, const Tape& tape) const {
    for (int s = 0; s < 4; ++s) {
        down_[s].bn.update_running(store, tape.down[s].bn);
        if (s == 0) continue;
        for (int r = 0; r < 2; ++r) {
            res_[s][r].first.bn.update_running(store, tape.res[s][r].first.bn);
            res_[s][r].bn.update_running(store, tape.res[s][r].bn);
        }
    }
}

std::pair<FeaturePyramid, FeaturePyramid> forward_dual(const Backbone& backbone, const ParamStore& store,
                                                       const Tensor& moving, const Tensor& fixed) {
    require_same_shape(moving.spatial(), fixed.spatial(), "forward_dual");
    return {backbone.forward(store, moving, false, nullptr), backbone.forward(store, fixed, false, nullptr)};
}

}  // namespace dualreg
