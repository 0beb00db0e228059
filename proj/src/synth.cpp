#include "dualreg/synth.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "dualreg/losses.hpp"

namespace dualreg {

namespace {

constexpr int kMaxAttempts = 64;
constexpr std::int64_t kMinRegionVoxels = 8;

// Independent streams for the phantom and the field derived from one seed.
std::uint64_t mix(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

}  // namespace

void PhantomSpec::validate() const {
    for (int a = 0; a < 3; ++a) {
        if (shape[a] < 2) throw std::invalid_argument("phantom shape extents must be >= 2, got " + shape.str());
    }
    if (num_regions < 2 || num_regions > 255) throw std::invalid_argument("num_regions must be in [2, 255]");
    if (!(amplitude >= 0.0)) throw std::invalid_argument("amplitude must be non-negative");
    if (!(smoothness_sigma > 0.0)) throw std::invalid_argument("smoothness_sigma must be positive");
    if (!(noise_sigma >= 0.0)) throw std::invalid_argument("noise_sigma must be non-negative");
}

Phantom make_phantom(const PhantomSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(mix(spec.seed));
    std::uniform_real_distribution<Real> unit(0.0, 1.0);
    const auto& s = spec.shape;
    const Real min_extent = static_cast<Real>(std::min({s[0], s[1], s[2]}));

    for (int attempt = 0; attempt < kMaxAttempts; ++attempt) {
        LabelMap labels(s);
        for (int r = 1; r <= spec.num_regions; ++r) {
            std::array<Real, 3> center{}, radius{};
            for (int a = 0; a < 3; ++a) {
                center[a] = (0.25 + 0.5 * unit(rng)) * static_cast<Real>(s[a] - 1);
                radius[a] = std::max<Real>(1.5, (0.15 + 0.15 * unit(rng)) * min_extent);
            }
            for (std::int64_t i = 0; i < s[0]; ++i)
                for (std::int64_t j = 0; j < s[1]; ++j)
                    for (std::int64_t k = 0; k < s[2]; ++k) {
                        const Real d0 = (static_cast<Real>(i) - center[0]) / radius[0];
                        const Real d1 = (static_cast<Real>(j) - center[1]) / radius[1];
                        const Real d2 = (static_cast<Real>(k) - center[2]) / radius[2];
                        if (d0 * d0 + d1 * d1 + d2 * d2 <= 1.0) labels.at(i, j, k) = static_cast<std::uint16_t>(r);
                    }
        }
        std::vector<std::int64_t> counts(static_cast<std::size_t>(spec.num_regions + 1), 0);
        for (auto v : labels.data()) ++counts[v];
        const bool all_visible = std::all_of(counts.begin() + 1, counts.end(),
                                             [](std::int64_t c) { return c >= kMinRegionVoxels; });
        if (!all_visible) continue;

        // Distinct region intensities, well separated from background (0).
        std::vector<Real> level(static_cast<std::size_t>(spec.num_regions + 1), 0.0);
        for (int r = 1; r <= spec.num_regions; ++r) {
            Real v = 0.0;
            bool ok = false;
            for (int tries = 0; tries < 1000 && !ok; ++tries) {
                v = 0.2 + 0.8 * unit(rng);
                ok = std::all_of(level.begin(), level.begin() + r, [&](Real u) { return std::abs(u - v) > 0.08; });
            }
            if (!ok) v = static_cast<Real>(r) / static_cast<Real>(spec.num_regions);
            level[r] = v;
        }
        Volume v(s);
        std::normal_distribution<Real> noise(0.0, 1.0);
        for (std::int64_t p = 0; p < s.voxels(); ++p) {
            v[p] = level[labels[p]];
            if (spec.noise_sigma > 0.0) v[p] += spec.noise_sigma * noise(rng);
        }
        return {normalize(v), std::move(labels)};
    }
    throw std::invalid_argument("make_phantom: could not fit " + std::to_string(spec.num_regions) +
                                " visible regions into shape " + s.str());
}

namespace {

/// Normalized Gaussian taps truncated at 3 sigma (at least one tap each side).
std::vector<Real> gaussian_kernel(Real sigma) {
    const int radius = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<Real> kernel(static_cast<std::size_t>(2 * radius + 1));
    Real sum = 0.0;
    for (int t = -radius; t <= radius; ++t) {
        kernel[t + radius] = std::exp(-0.5 * t * t / (sigma * sigma));
        sum += kernel[t + radius];
    }
    for (auto& w : kernel) w /= sum;
    return kernel;
}

/// Separable blur of a grid padded by the kernel radius on every side,
/// evaluated only on the unpadded interior. Each pass shrinks one axis.
std::vector<Real> blur_interior(std::vector<Real> values, const Shape3& padded, const std::vector<Real>& kernel) {
    const auto radius = static_cast<std::int64_t>(kernel.size() / 2);
    Shape3 cur = padded;
    for (int axis = 0; axis < 3; ++axis) {
        Shape3 next = cur;
        next.dims[axis] -= 2 * radius;
        const std::int64_t stride = axis == 0 ? cur[1] * cur[2] : (axis == 1 ? cur[2] : 1);
        std::vector<Real> out(static_cast<std::size_t>(next.voxels()));
        for (std::int64_t i = 0; i < next[0]; ++i)
            for (std::int64_t j = 0; j < next[1]; ++j)
                for (std::int64_t k = 0; k < next[2]; ++k) {
                    // (i, j, k) in `next` is the window start in `cur` along `axis`
                    const Real* src = values.data() + cur.index(i, j, k);
                    Real acc = 0.0;
                    for (std::size_t o = 0; o < kernel.size(); ++o) acc += kernel[o] * src[static_cast<std::int64_t>(o) * stride];
                    out[static_cast<std::size_t>(next.index(i, j, k))] = acc;
                }
        values = std::move(out);
        cur = next;
    }
    return values;
}

}  // namespace

void gaussian_blur(std::span<Real> values, const Shape3& s, Real sigma) {
    const auto kernel = gaussian_kernel(sigma);
    const int radius = static_cast<int>(kernel.size() / 2);

    std::vector<Real> line;
    for (int axis = 0; axis < 3; ++axis) {
        const std::int64_t len = s[axis];
        const std::int64_t stride = axis == 0 ? s[1] * s[2] : (axis == 1 ? s[2] : 1);
        line.resize(static_cast<std::size_t>(len));
        for (std::int64_t i = 0; i < s[0]; ++i)
            for (std::int64_t j = 0; j < s[1]; ++j)
                for (std::int64_t k = 0; k < s[2]; ++k) {
                    const std::int64_t pos[3] = {i, j, k};
                    if (pos[axis] != 0) continue;  // visit each line once, from its first voxel
                    const auto base = s.index(i, j, k);
                    for (std::int64_t t = 0; t < len; ++t) line[t] = values[base + t * stride];
                    for (std::int64_t t = 0; t < len; ++t) {
                        Real acc = 0.0;
                        for (int o = -radius; o <= radius; ++o) {
                            const auto q = std::clamp<std::int64_t>(t + o, 0, len - 1);
                            acc += kernel[o + radius] * line[q];
                        }
                        values[base + t * stride] = acc;
                    }
                }
    }
}

DisplacementField random_smooth_field(const Shape3& shape, Real amplitude, Real smoothness_sigma, std::uint64_t seed) {
    if (!(smoothness_sigma > 0.0)) throw std::invalid_argument("smoothness_sigma must be positive");
    if (!(amplitude >= 0.0)) throw std::invalid_argument("amplitude must be non-negative");
    DisplacementField f(shape);
    if (amplitude == 0.0) return f;
    // Noise on a grid padded by the kernel radius, so the cropped interior
    // never sees the replicated border.
    const auto kernel = gaussian_kernel(smoothness_sigma);
    const auto pad = static_cast<std::int64_t>(kernel.size() / 2);
    const Shape3 big{shape[0] + 2 * pad, shape[1] + 2 * pad, shape[2] + 2 * pad};
    std::mt19937_64 rng(mix(seed ^ 0x5eedf1e1dULL));
    std::normal_distribution<Real> normal(0.0, 1.0);
    std::vector<Real> noise(static_cast<std::size_t>(big.voxels()));
    for (int c = 0; c < 3; ++c) {
        for (auto& v : noise) v = normal(rng);
        const auto smooth = blur_interior(noise, big, kernel);
        std::copy(smooth.begin(), smooth.end(), f.component(c).begin());
    }
    const Real peak = f.max_abs();
    if (peak > 0.0) {
        for (auto& v : f.data()) v *= amplitude / peak;
    }
    return f;
}

SyntheticPair make_pair(const PhantomSpec& spec) {
    auto phantom = make_phantom(spec);
    auto field = random_smooth_field(spec.shape, spec.amplitude, spec.smoothness_sigma, spec.seed);
    SyntheticPair p;
    p.moving = warp_trilinear(phantom.volume, field);
    p.moving_labels = warp_nearest(phantom.labels, field);
    p.fixed = std::move(phantom.volume);
    p.fixed_labels = std::move(phantom.labels);
    p.gt_field = std::move(field);
    return p;
}

}  // namespace dualreg
