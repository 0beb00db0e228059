#include "dualreg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

namespace dualreg {

void LossConfig::validate() const {
    if (window < 3 || window % 2 == 0) throw std::invalid_argument("loss window must be odd and >= 3");
    if (!(epsilon > 0.0)) throw std::invalid_argument("loss epsilon must be positive");
    if (!(lambda >= 0.0)) throw std::invalid_argument("loss lambda must be non-negative");
}

namespace {

// In-place running-window sum along one axis with zero padding.
void box_axis(std::vector<Real>& v, const Shape3& s, int axis, int radius) {
    const std::int64_t len = s[axis];
    const std::int64_t stride = axis == 0 ? s[1] * s[2] : (axis == 1 ? s[2] : 1);
    const std::int64_t lines = s.voxels() / len;
    std::vector<Real> prefix(static_cast<std::size_t>(len + 1));
    for (std::int64_t line = 0; line < lines; ++line) {
        // Decompose the line number into the base offset of that line.
        std::int64_t base;
        if (axis == 0) {
            base = line;
        } else if (axis == 1) {
            base = (line / s[2]) * s[1] * s[2] + line % s[2];
        } else {
            base = line * s[2];
        }
        prefix[0] = 0.0;
        for (std::int64_t i = 0; i < len; ++i) prefix[i + 1] = prefix[i] + v[base + i * stride];
        for (std::int64_t i = 0; i < len; ++i) {
            const auto lo = std::max<std::int64_t>(i - radius, 0);
            const auto hi = std::min<std::int64_t>(i + radius + 1, len);
            v[base + i * stride] = prefix[hi] - prefix[lo];
        }
    }
}

}  // namespace

std::vector<Real> box_sum(std::span<const Real> values, const Shape3& shape, int window) {
    std::vector<Real> out(values.begin(), values.end());
    for (int a = 0; a < 3; ++a) box_axis(out, shape, a, window / 2);
    return out;
}

Real nlcc(std::span<const Real> warped, std::span<const Real> fixed, const Shape3& shape, const LossConfig& cfg,
          std::span<Real> grad_warped) {
    cfg.validate();
    if (cfg.window > std::min({shape[0], shape[1], shape[2]})) {
        throw std::invalid_argument("nlcc: window " + std::to_string(cfg.window) + " larger than volume " +
                                    shape.str());
    }
    const auto N = shape.voxels();
    const Real n = static_cast<Real>(cfg.window) * cfg.window * cfg.window;
    std::vector<Real> i2(N), j2(N), ij(N);
    for (std::int64_t p = 0; p < N; ++p) {
        i2[p] = warped[p] * warped[p];
        j2[p] = fixed[p] * fixed[p];
        ij[p] = warped[p] * fixed[p];
    }
    const auto si = box_sum(warped, shape, cfg.window);
    const auto sj = box_sum(fixed, shape, cfg.window);
    const auto si2 = box_sum(i2, shape, cfg.window);
    const auto sj2 = box_sum(j2, shape, cfg.window);
    const auto sij = box_sum(ij, shape, cfg.window);

    const bool want_grad = !grad_warped.empty();
    std::vector<Real> ca, cb, cc;
    if (want_grad) {
        ca.resize(N);
        cb.resize(N);
        cc.resize(N);
    }
    Real total = 0.0;
    for (std::int64_t p = 0; p < N; ++p) {
        const Real cross = sij[p] - si[p] * sj[p] / n;
        const Real ivar = si2[p] - si[p] * si[p] / n;
        const Real jvar = sj2[p] - sj[p] * sj[p] / n;
        const Real denom = ivar * jvar + cfg.epsilon;
        total += cross * cross / denom;
        if (want_grad) {
            const Real a = 2.0 * cross / denom;                     // d cc / d sum(IJ)
            const Real b = -cross * cross * jvar / (denom * denom);  // d cc / d sum(I^2)
            ca[p] = a;
            cb[p] = b;
            cc[p] = -a * sj[p] / n - 2.0 * b * si[p] / n;  // d cc / d sum(I)
        }
    }
    if (want_grad) {
        const auto ba = box_sum(ca, shape, cfg.window);
        const auto bb = box_sum(cb, shape, cfg.window);
        const auto bc = box_sum(cc, shape, cfg.window);
        for (std::int64_t q = 0; q < N; ++q) {
            grad_warped[q] = -(bc[q] + 2.0 * warped[q] * bb[q] + fixed[q] * ba[q]) / static_cast<Real>(N);
        }
    }
    return -total / static_cast<Real>(N);
}

Real nlcc(const Volume& warped, const Volume& fixed, const LossConfig& cfg) {
    require_same_shape(warped.shape(), fixed.shape(), "nlcc");
    return nlcc(warped.data(), fixed.data(), warped.shape(), cfg);
}

Real smoothness(std::span<const Real> field, const Shape3& s, std::span<Real> grad, Real grad_scale) {
    const auto N = s.voxels();
    const Real norm = 9.0 * static_cast<Real>(N);
    const std::int64_t strides[3] = {s[1] * s[2], s[2], 1};
    Real total = 0.0;
    for (int c = 0; c < 3; ++c) {
        const Real* u = field.data() + c * N;
        Real* g = grad.empty() ? nullptr : grad.data() + c * N;
        for (std::int64_t i = 0, p = 0; i < s[0]; ++i)
            for (std::int64_t j = 0; j < s[1]; ++j)
                for (std::int64_t k = 0; k < s[2]; ++k, ++p) {
                    const bool inside[3] = {i + 1 < s[0], j + 1 < s[1], k + 1 < s[2]};
                    for (int a = 0; a < 3; ++a) {
                        if (!inside[a]) continue;
                        const Real d = u[p + strides[a]] - u[p];
                        total += d * d;
                        if (g) {
                            const Real w = grad_scale * 2.0 * d / norm;
                            g[p + strides[a]] += w;
                            g[p] -= w;
                        }
                    }
                }
    }
    return total / norm;
}

Real smoothness(const DisplacementField& f) { return smoothness(f.data(), f.shape()); }

LossTerms total_loss(const Volume& moving, const Volume& fixed, const RegistrationOutput& out, const LossConfig& cfg) {
    require_same_shape(moving.shape(), fixed.shape(), "total_loss");
    require_same_shape(out.warped.shape(), fixed.shape(), "total_loss");
    LossTerms t;
    t.similarity = nlcc(out.warped, fixed, cfg);
    t.smooth = smoothness(out.final_field);
    t.total = t.similarity + cfg.lambda * t.smooth;
    return t;
}

DiceResult dice(const LabelMap& a, const LabelMap& b, const std::vector<int>& regions) {
    require_same_shape(a.shape(), b.shape(), "dice");
    std::unordered_map<int, std::int64_t> count_a, count_b, overlap;
    const auto da = a.data();
    const auto db = b.data();
    for (std::size_t p = 0; p < da.size(); ++p) {
        ++count_a[da[p]];
        ++count_b[db[p]];
        if (da[p] == db[p]) ++overlap[da[p]];
    }
    DiceResult r;
    Real sum = 0.0;
    for (int region : regions) {
        RegionDice d;
        d.region = region;
        const auto na = count_a[region];
        const auto nb = count_b[region];
        if (na + nb == 0) {
            d.score = 1.0;
            d.absent = true;
        } else {
            d.score = 2.0 * static_cast<Real>(overlap[region]) / static_cast<Real>(na + nb);
        }
        sum += d.score;
        r.regions.push_back(d);
    }
    r.average = regions.empty() ? 0.0 : sum / static_cast<Real>(regions.size());
    return r;
}

}  // namespace dualreg
