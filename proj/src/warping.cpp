#include "dualreg/warping.hpp"

#include <algorithm>
#include <cmath>

namespace dualreg {

namespace {

// Clamped linear interpolation along one axis. `deriv` is d(clamped x)/dx.
struct AxisTap {
    std::int64_t i0 = 0;
    std::int64_t i1 = 0;
    Real frac = 0.0;
    Real deriv = 0.0;
};

inline AxisTap axis_tap(Real x, std::int64_t extent) {
    if (extent == 1) return {};
    Real deriv = 1.0;
    const Real hi = static_cast<Real>(extent - 1);
    if (x < 0.0) {
        x = 0.0;
        deriv = 0.0;
    } else if (x > hi) {
        x = hi;
        deriv = 0.0;
    }
    const auto i0 = std::min(static_cast<std::int64_t>(std::floor(x)), extent - 2);
    return {i0, i0 + 1, x - static_cast<Real>(i0), deriv};
}

struct Cell {
    std::int64_t offset[8];
    Real weight[8];
    AxisTap tap[3];
};

inline Cell make_cell(const Shape3& s, Real x0, Real x1, Real x2) {
    Cell c;
    c.tap[0] = axis_tap(x0, s[0]);
    c.tap[1] = axis_tap(x1, s[1]);
    c.tap[2] = axis_tap(x2, s[2]);
    int n = 0;
    for (int b0 = 0; b0 < 2; ++b0) {
        const auto i = b0 ? c.tap[0].i1 : c.tap[0].i0;
        const Real w0 = b0 ? c.tap[0].frac : 1.0 - c.tap[0].frac;
        for (int b1 = 0; b1 < 2; ++b1) {
            const auto j = b1 ? c.tap[1].i1 : c.tap[1].i0;
            const Real w1 = b1 ? c.tap[1].frac : 1.0 - c.tap[1].frac;
            for (int b2 = 0; b2 < 2; ++b2) {
                const auto k = b2 ? c.tap[2].i1 : c.tap[2].i0;
                const Real w2 = b2 ? c.tap[2].frac : 1.0 - c.tap[2].frac;
                c.offset[n] = s.index(i, j, k);
                c.weight[n] = w0 * w1 * w2;
                ++n;
            }
        }
    }
    return c;
}

// Partial derivatives of the interpolated value w.r.t. the (unclamped) sample coordinate.
inline void cell_gradient(const Cell& c, const Real* v, Real g[3]) {
    const Real f0 = c.tap[0].frac, f1 = c.tap[1].frac, f2 = c.tap[2].frac;
    // v index = b0 * 4 + b1 * 2 + b2
    const Real d0 = (1 - f1) * (1 - f2) * (v[4] - v[0]) + (1 - f1) * f2 * (v[5] - v[1]) +
                    f1 * (1 - f2) * (v[6] - v[2]) + f1 * f2 * (v[7] - v[3]);
    const Real d1 = (1 - f0) * (1 - f2) * (v[2] - v[0]) + (1 - f0) * f2 * (v[3] - v[1]) +
                    f0 * (1 - f2) * (v[6] - v[4]) + f0 * f2 * (v[7] - v[5]);
    const Real d2 = (1 - f0) * (1 - f1) * (v[1] - v[0]) + (1 - f0) * f1 * (v[3] - v[2]) +
                    f0 * (1 - f1) * (v[5] - v[4]) + f0 * f1 * (v[7] - v[6]);
    g[0] = d0 * c.tap[0].deriv;
    g[1] = d1 * c.tap[1].deriv;
    g[2] = d2 * c.tap[2].deriv;
}

struct UpTaps {
    std::vector<AxisTap> axis[3];
};

UpTaps upsample_taps(const Shape3& from, const Shape3& to) {
    UpTaps t;
    for (int a = 0; a < 3; ++a) {
        if (to[a] != 2 * from[a] && to[a] != 2 * from[a] - 1) {
            throw DataError("upsample: target " + to.str() + " is not a doubling of " + from.str());
        }
        t.axis[a].resize(static_cast<std::size_t>(to[a]));
        for (std::int64_t i = 0; i < to[a]; ++i) t.axis[a][i] = axis_tap(0.5 * static_cast<Real>(i), from[a]);
    }
    return t;
}

}  // namespace

namespace kernels {

void warp(const Real* src, std::int64_t channels, const Shape3& s, const Real* field, Real* out) {
    const auto n = s.voxels();
    const Real* u0 = field;
    const Real* u1 = field + n;
    const Real* u2 = field + 2 * n;
    for (std::int64_t i = 0, p = 0; i < s[0]; ++i) {
        for (std::int64_t j = 0; j < s[1]; ++j) {
            for (std::int64_t k = 0; k < s[2]; ++k, ++p) {
                const Cell c = make_cell(s, static_cast<Real>(i) + u0[p], static_cast<Real>(j) + u1[p],
                                         static_cast<Real>(k) + u2[p]);
                for (std::int64_t ch = 0; ch < channels; ++ch) {
                    const Real* g = src + ch * n;
                    Real acc = 0.0;
                    for (int q = 0; q < 8; ++q) acc += c.weight[q] * g[c.offset[q]];
                    out[ch * n + p] = acc;
                }
            }
        }
    }
}

void warp_backward(const Real* src, std::int64_t channels, const Shape3& s, const Real* field,
                   const Real* grad_out, Real* grad_src, Real* grad_field) {
    const auto n = s.voxels();
    const Real* u0 = field;
    const Real* u1 = field + n;
    const Real* u2 = field + 2 * n;
    for (std::int64_t i = 0, p = 0; i < s[0]; ++i) {
        for (std::int64_t j = 0; j < s[1]; ++j) {
            for (std::int64_t k = 0; k < s[2]; ++k, ++p) {
                const Cell c = make_cell(s, static_cast<Real>(i) + u0[p], static_cast<Real>(j) + u1[p],
                                         static_cast<Real>(k) + u2[p]);
                Real gu[3] = {0.0, 0.0, 0.0};
                for (std::int64_t ch = 0; ch < channels; ++ch) {
                    const Real go = grad_out[ch * n + p];
                    if (go == 0.0) continue;
                    if (grad_src) {
                        Real* gs = grad_src + ch * n;
                        for (int q = 0; q < 8; ++q) gs[c.offset[q]] += c.weight[q] * go;
                    }
                    if (grad_field) {
                        const Real* g = src + ch * n;
                        Real v[8];
                        for (int q = 0; q < 8; ++q) v[q] = g[c.offset[q]];
                        Real d[3];
                        cell_gradient(c, v, d);
                        gu[0] += go * d[0];
                        gu[1] += go * d[1];
                        gu[2] += go * d[2];
                    }
                }
                if (grad_field) {
                    grad_field[p] += gu[0];
                    grad_field[n + p] += gu[1];
                    grad_field[2 * n + p] += gu[2];
                }
            }
        }
    }
}

void upsample(const Real* src, std::int64_t channels, const Shape3& from, const Shape3& to, Real scale, Real* out) {
    const auto taps = upsample_taps(from, to);
    const auto nf = from.voxels();
    const auto nt = to.voxels();
    for (std::int64_t ch = 0; ch < channels; ++ch) {
        const Real* g = src + ch * nf;
        Real* o = out + ch * nt;
        for (std::int64_t i = 0, p = 0; i < to[0]; ++i) {
            const auto& ti = taps.axis[0][i];
            for (std::int64_t j = 0; j < to[1]; ++j) {
                const auto& tj = taps.axis[1][j];
                for (std::int64_t k = 0; k < to[2]; ++k, ++p) {
                    const auto& tk = taps.axis[2][k];
                    auto at = [&](std::int64_t a, std::int64_t b, std::int64_t c) { return g[from.index(a, b, c)]; };
                    const Real c00 = at(ti.i0, tj.i0, tk.i0) * (1 - tk.frac) + at(ti.i0, tj.i0, tk.i1) * tk.frac;
                    const Real c01 = at(ti.i0, tj.i1, tk.i0) * (1 - tk.frac) + at(ti.i0, tj.i1, tk.i1) * tk.frac;
                    const Real c10 = at(ti.i1, tj.i0, tk.i0) * (1 - tk.frac) + at(ti.i1, tj.i0, tk.i1) * tk.frac;
                    const Real c11 = at(ti.i1, tj.i1, tk.i0) * (1 - tk.frac) + at(ti.i1, tj.i1, tk.i1) * tk.frac;
                    const Real c0 = c00 * (1 - tj.frac) + c01 * tj.frac;
                    const Real c1 = c10 * (1 - tj.frac) + c11 * tj.frac;
                    o[p] = scale * (c0 * (1 - ti.frac) + c1 * ti.frac);
                }
            }
        }
    }
}

void upsample_backward(const Real* grad_out, std::int64_t channels, const Shape3& from, const Shape3& to, Real scale,
                       Real* grad_src) {
    const auto taps = upsample_taps(from, to);
    const auto nf = from.voxels();
    const auto nt = to.voxels();
    for (std::int64_t ch = 0; ch < channels; ++ch) {
        const Real* go = grad_out + ch * nt;
        Real* g = grad_src + ch * nf;
        for (std::int64_t i = 0, p = 0; i < to[0]; ++i) {
            const auto& ti = taps.axis[0][i];
            for (std::int64_t j = 0; j < to[1]; ++j) {
                const auto& tj = taps.axis[1][j];
                for (std::int64_t k = 0; k < to[2]; ++k, ++p) {
                    const auto& tk = taps.axis[2][k];
                    const Real v = scale * go[p];
                    if (v == 0.0) continue;
                    for (int b0 = 0; b0 < 2; ++b0) {
                        const Real w0 = b0 ? ti.frac : 1 - ti.frac;
                        const auto a = b0 ? ti.i1 : ti.i0;
                        for (int b1 = 0; b1 < 2; ++b1) {
                            const Real w1 = b1 ? tj.frac : 1 - tj.frac;
                            const auto b = b1 ? tj.i1 : tj.i0;
                            g[from.index(a, b, tk.i0)] += v * w0 * w1 * (1 - tk.frac);
                            g[from.index(a, b, tk.i1)] += v * w0 * w1 * tk.frac;
                        }
                    }
                }
            }
        }
    }
}

void compose(const Real* a, const Real* b, const Shape3& s, Real* out) {
    warp(a, 3, s, b, out);
    const auto n = 3 * s.voxels();
    for (std::int64_t q = 0; q < n; ++q) out[q] += b[q];
}

void compose_backward(const Real* a, const Real* b, const Shape3& s, const Real* grad_out, Real* grad_a,
                      Real* grad_b) {
    warp_backward(a, 3, s, b, grad_out, grad_a, grad_b);
    if (grad_b) {
        const auto n = 3 * s.voxels();
        for (std::int64_t q = 0; q < n; ++q) grad_b[q] += grad_out[q];
    }
}

}  // namespace kernels

// ---------------------------------------------------------------------------

DisplacementField::DisplacementField(Shape3 shape, std::vector<Real> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != 3 * shape_.voxels()) {
        throw DataError("field: size mismatch for shape " + shape_.str());
    }
}

DisplacementField DisplacementField::constant(Shape3 shape, const std::array<Real, 3>& u) {
    DisplacementField f(shape);
    for (int c = 0; c < 3; ++c) std::fill(f.component(c).begin(), f.component(c).end(), u[c]);
    return f;
}

bool DisplacementField::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real x) { return std::isfinite(x); });
}

Real DisplacementField::max_abs() const {
    Real m = 0.0;
    for (auto x : data_) m = std::max(m, std::abs(x));
    return m;
}

Real DisplacementField::mean_abs() const {
    if (data_.empty()) return 0.0;
    Real s = 0.0;
    for (auto x : data_) s += std::abs(x);
    return s / static_cast<Real>(data_.size());
}

DisplacementField load_field(const std::filesystem::path& path) {
    RawHeader h;
    auto values = read_raw(path, h);
    if (h.shape.size() != 4 || h.shape[0] != 3 || h.dtype == "u16") {
        throw DataError("'" + path.string() + "': expected a real-valued field of shape [3,s0,s1,s2]");
    }
    DisplacementField f({h.shape[1], h.shape[2], h.shape[3]}, std::move(values));
    if (!f.all_finite()) throw DataError("'" + path.string() + "': non-finite values in payload");
    return f;
}

void save_field(const DisplacementField& f, const std::filesystem::path& path) {
    const auto& s = f.shape();
    write_raw(path, {{3, s[0], s[1], s[2]}, "f32", {1.0, 1.0, 1.0}}, f.data());
}

Volume warp_trilinear(const Volume& src, const DisplacementField& f) {
    require_same_shape(src.shape(), f.shape(), "warp_trilinear");
    Volume out(src.shape(), 0.0, src.spacing());
    kernels::warp(src.data().data(), 1, src.shape(), f.data().data(), out.data().data());
    return out;
}

LabelMap warp_nearest(const LabelMap& src, const DisplacementField& f) {
    require_same_shape(src.shape(), f.shape(), "warp_nearest");
    const auto& s = src.shape();
    LabelMap out(s);
    auto pick = [](Real x, std::int64_t extent) {
        return std::clamp<std::int64_t>(static_cast<std::int64_t>(std::round(x)), 0, extent - 1);
    };
    for (std::int64_t i = 0; i < s[0]; ++i)
        for (std::int64_t j = 0; j < s[1]; ++j)
            for (std::int64_t k = 0; k < s[2]; ++k) {
                const auto a = pick(static_cast<Real>(i) + f.at(0, i, j, k), s[0]);
                const auto b = pick(static_cast<Real>(j) + f.at(1, i, j, k), s[1]);
                const auto c = pick(static_cast<Real>(k) + f.at(2, i, j, k), s[2]);
                out.at(i, j, k) = src.at(a, b, c);
            }
    return out;
}

DisplacementField upsample_field(const DisplacementField& f) { return upsample_field(f, doubled(f.shape())); }

DisplacementField upsample_field(const DisplacementField& f, const Shape3& target) {
    DisplacementField out(target);
    kernels::upsample(f.data().data(), 3, f.shape(), target, 2.0, out.data().data());
    return out;
}

DisplacementField compose(const DisplacementField& accumulated_up, const DisplacementField& residual) {
    require_same_shape(accumulated_up.shape(), residual.shape(), "compose");
    DisplacementField out(residual.shape());
    kernels::compose(accumulated_up.data().data(), residual.data().data(), residual.shape(), out.data().data());
    return out;
}

Tensor warp_features(const Tensor& src, const Tensor& fields) {
    if (fields.channels() != 3 || fields.batch() != src.batch()) {
        throw DataError("warp_features: expected one 3-channel field per sample");
    }
    require_same_shape(src.spatial(), fields.spatial(), "warp_features");
    Tensor out = zeros_like(src);
    for (std::int64_t n = 0; n < src.batch(); ++n) {
        kernels::warp(src.sample(n), src.channels(), src.spatial(), fields.sample(n), out.sample(n));
    }
    return out;
}

}  // namespace dualreg
