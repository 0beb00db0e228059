#include "dualreg/pyramid.hpp"

#include <algorithm>

namespace dualreg {

namespace {

Tensor upsample_fields(const Tensor& f, const Shape3& target) {
    Tensor out(f.batch(), 3, target);
    for (std::int64_t n = 0; n < f.batch(); ++n) {
        kernels::upsample(f.sample(n), 3, f.spatial(), target, 2.0, out.sample(n));
    }
    return out;
}

Tensor upsample_fields_backward(const Tensor& grad, const Shape3& source) {
    Tensor out(grad.batch(), 3, source);
    for (std::int64_t n = 0; n < grad.batch(); ++n) {
        kernels::upsample_backward(grad.sample(n), 3, source, grad.spatial(), 2.0, out.sample(n));
    }
    return out;
}

Tensor compose_fields(const Tensor& a, const Tensor& b) {
    Tensor out = zeros_like(b);
    for (std::int64_t n = 0; n < b.batch(); ++n) kernels::compose(a.sample(n), b.sample(n), b.spatial(), out.sample(n));
    return out;
}

void check_pyramids(const FeaturePyramid& pm, const FeaturePyramid& pf, const Tensor& moving) {
    for (int l = 0; l < kPyramidLevels; ++l) {
        const auto& a = pm.levels[l];
        const auto& b = pf.levels[l];
        if (a.size() == 0 || b.size() == 0) {
            throw DataError("pyramid registration: expected " + std::to_string(kPyramidLevels) + " pyramid levels");
        }
        if (!a.same_layout(b)) throw DataError("pyramid registration: level " + std::to_string(l + 1) + " mismatch");
        require_same_shape(a.spatial(), level_shape(moving.spatial(), l + 1), "pyramid registration");
    }
    if (moving.channels() != 1 || moving.batch() != pm.levels[0].batch()) {
        throw DataError("pyramid registration: moving volume batch mismatch");
    }
}

void finish(BatchedRegistration& r, const Tensor& finest, const Tensor& moving) {
    r.final_field = upsample_fields(finest, moving.spatial());
    r.warped = warp_features(moving, r.final_field);
}

}  // namespace

std::string to_string(RegistrationMode mode) {
    return mode == RegistrationMode::pyramid ? "pyramid" : "single_field";
}

RegistrationMode parse_mode(const std::string& text) {
    if (text == "pyramid") return RegistrationMode::pyramid;
    if (text == "single_field") return RegistrationMode::single_field;
    throw std::invalid_argument("unknown mode '" + text + "' (expected pyramid or single_field)");
}

FieldHeads FieldHeads::create(ParamStore& store, std::int64_t feature_channels) {
    FieldHeads h;
    for (int l = 0; l < kPyramidLevels; ++l) {
        h.conv[l] = Conv3d::create(store, "heads.level" + std::to_string(l + 1), 2 * feature_channels, 3, 3, 1);
    }
    return h;
}

RegistrationOutput unbatch(const BatchedRegistration& r, std::int64_t sample, const Spacing& spacing) {
    auto field = [&](const Tensor& t) {
        const auto n = 3 * t.voxels();
        return DisplacementField(t.spatial(), std::vector<Real>(t.sample(sample), t.sample(sample) + n));
    };
    RegistrationOutput out;
    for (int l = 0; l < kPyramidLevels; ++l) {
        if (r.level_fields[l]) out.level_fields[l] = field(*r.level_fields[l]);
        if (r.accumulated[l]) out.accumulated[l] = field(*r.accumulated[l]);
    }
    out.final_field = field(r.final_field);
    const auto* w = r.warped.sample(sample);
    out.warped = Volume(r.warped.spatial(), std::vector<Real>(w, w + r.warped.voxels()), spacing);
    return out;
}

Tensor estimate_level_field(const ParamStore& store, const FieldHeads& heads, int level, const Tensor& warped_moving,
                            const Tensor& fixed) {
    if (!warped_moving.same_layout(fixed)) throw DataError("estimate_level_field: feature layout mismatch");
    return heads.conv[level - 1].forward(store, concat_channels(warped_moving, fixed));
}

BatchedRegistration run_pyramid(const ParamStore& store, const FieldHeads& heads, const FeaturePyramid& pm,
                                const FeaturePyramid& pf, const Tensor& moving, PyramidTape* tape) {
    check_pyramids(pm, pf, moving);
    BatchedRegistration r;
    for (int l = 0; l < kPyramidLevels; ++l) {
        Tensor warped_features;
        Tensor upsampled;
        if (l == 0) {
            warped_features = pm.levels[0];
        } else {
            upsampled = upsample_fields(*r.accumulated[l - 1], pm.levels[l].spatial());
            warped_features = warp_features(pm.levels[l], upsampled);
        }
        Tensor stacked = concat_channels(warped_features, pf.levels[l]);
        Tensor residual = heads.conv[l].forward(store, stacked);
        r.accumulated[l] = l == 0 ? residual : compose_fields(upsampled, residual);
        r.level_fields[l] = std::move(residual);
        if (tape) {
            tape->upsampled[l] = std::move(upsampled);
            tape->warped_features[l] = std::move(warped_features);
            tape->stacked[l] = std::move(stacked);
        }
    }
    finish(r, *r.accumulated[kPyramidLevels - 1], moving);
    if (tape) tape->result = r;
    return r;
}

BatchedRegistration single_field_variant(const ParamStore& store, const FieldHeads& heads, const FeaturePyramid& pm,
                                         const FeaturePyramid& pf, const Tensor& moving, PyramidTape* tape) {
    check_pyramids(pm, pf, moving);
    constexpr int l = kPyramidLevels - 1;
    BatchedRegistration r;
    Tensor stacked = concat_channels(pm.levels[l], pf.levels[l]);
    Tensor field = heads.conv[l].forward(store, stacked);
    r.level_fields[l] = field;
    r.accumulated[l] = std::move(field);
    finish(r, *r.accumulated[l], moving);
    if (tape) {
        tape->stacked[l] = std::move(stacked);
        tape->warped_features[l] = pm.levels[l];
        tape->result = r;
    }
    return r;
}

PyramidGrads pyramid_backward(ParamStore& store, const FieldHeads& heads, RegistrationMode mode,
                              const FeaturePyramid& pm, const FeaturePyramid& pf, const Tensor& moving,
                              const PyramidTape& tape, const Tensor& grad_warped, const Tensor& grad_final_field) {
    const auto& r = tape.result;
    PyramidGrads g;
    for (int l = 0; l < kPyramidLevels; ++l) {
        g.moving[l] = zeros_like(pm.levels[l]);
        g.fixed[l] = zeros_like(pf.levels[l]);
    }

    Tensor g_final = grad_final_field.size() ? grad_final_field : zeros_like(r.final_field);
    for (std::int64_t n = 0; n < moving.batch(); ++n) {
        kernels::warp_backward(moving.sample(n), 1, moving.spatial(), r.final_field.sample(n), grad_warped.sample(n),
                               nullptr, g_final.sample(n));
    }
    Tensor g_acc = upsample_fields_backward(g_final, pm.levels[kPyramidLevels - 1].spatial());

    auto head_backward = [&](int l, const Tensor& g_residual) {
        Tensor g_stacked = heads.conv[l].backward(store, tape.stacked[l], g_residual);
        Tensor g_warped_features;
        split_channels(g_stacked, pm.levels[l].channels(), g_warped_features, g.fixed[l]);
        return g_warped_features;
    };

    if (mode == RegistrationMode::single_field) {
        constexpr int l = kPyramidLevels - 1;
        g.moving[l] = head_backward(l, g_acc);
        return g;
    }

    for (int l = kPyramidLevels - 1; l >= 1; --l) {
        const auto& up = tape.upsampled[l];
        const auto& residual = *r.level_fields[l];
        Tensor g_up = zeros_like(up);
        Tensor g_residual = zeros_like(residual);
        for (std::int64_t n = 0; n < up.batch(); ++n) {
            kernels::compose_backward(up.sample(n), residual.sample(n), up.spatial(), g_acc.sample(n), g_up.sample(n),
                                      g_residual.sample(n));
        }
        const Tensor g_warped_features = head_backward(l, g_residual);
        const auto& feats = pm.levels[l];
        for (std::int64_t n = 0; n < feats.batch(); ++n) {
            kernels::warp_backward(feats.sample(n), feats.channels(), feats.spatial(), up.sample(n),
                                   g_warped_features.sample(n), g.moving[l].sample(n), g_up.sample(n));
        }
        g_acc = upsample_fields_backward(g_up, pm.levels[l - 1].spatial());
    }
    g.moving[0] = head_backward(0, g_acc);
    return g;
}

}  // namespace dualreg
