#include "dualreg/layers.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Core>

#include "dualreg/warping.hpp"

namespace dualreg {

namespace {

using RowMatrix = Eigen::Matrix<Real, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using AlignedBuffer = std::vector<Real, AlignedAllocator<Real>>;
using MatMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstMatMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

// Upper bound on im2col buffer entries per chunk (~32 MB of doubles).
constexpr std::int64_t kMaxColumnEntries = std::int64_t{1} << 22;

struct ConvGeometry {
    Shape3 in;
    Shape3 out;
    std::int64_t channels;
    int kernel;
    int stride;
    int pad;

    std::int64_t rows() const { return channels * kernel * kernel * kernel; }
    std::int64_t plane() const { return out[1] * out[2]; }

    // Output d0-slab [i0, i1) whose column matrix stays under the buffer bound.
    std::int64_t slab_rows() const {
        const auto per_slab = rows() * plane();
        return std::clamp<std::int64_t>(kMaxColumnEntries / std::max<std::int64_t>(per_slab, 1), 1, out[0]);
    }
};

void im2col(const ConvGeometry& g, const Real* x, std::int64_t i0, std::int64_t i1, Real* cols) {
    const auto width = (i1 - i0) * g.plane();
    const auto nin = g.in.voxels();
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        const Real* xc = x + c * nin;
        for (int a = 0; a < g.kernel; ++a)
            for (int b = 0; b < g.kernel; ++b)
                for (int e = 0; e < g.kernel; ++e, ++row) {
                    Real* dst = cols + row * width;
                    for (std::int64_t i = i0; i < i1; ++i) {
                        const auto si = i * g.stride - g.pad + a;
                        const bool row_ok = si >= 0 && si < g.in[0];
                        for (std::int64_t j = 0; j < g.out[1]; ++j) {
                            const auto sj = j * g.stride - g.pad + b;
                            Real* d = dst + ((i - i0) * g.out[1] + j) * g.out[2];
                            if (!row_ok || sj < 0 || sj >= g.in[1]) {
                                std::fill_n(d, g.out[2], 0.0);
                                continue;
                            }
                            const Real* srow = xc + (si * g.in[1] + sj) * g.in[2];
                            for (std::int64_t k = 0; k < g.out[2]; ++k) {
                                const auto sk = k * g.stride - g.pad + e;
                                d[k] = (sk >= 0 && sk < g.in[2]) ? srow[sk] : 0.0;
                            }
                        }
                    }
                }
    }
}

void col2im(const ConvGeometry& g, const Real* cols, std::int64_t i0, std::int64_t i1, Real* gx) {
    const auto width = (i1 - i0) * g.plane();
    const auto nin = g.in.voxels();
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < g.channels; ++c) {
        Real* gc = gx + c * nin;
        for (int a = 0; a < g.kernel; ++a)
            for (int b = 0; b < g.kernel; ++b)
                for (int e = 0; e < g.kernel; ++e, ++row) {
                    const Real* src = cols + row * width;
                    for (std::int64_t i = i0; i < i1; ++i) {
                        const auto si = i * g.stride - g.pad + a;
                        if (si < 0 || si >= g.in[0]) continue;
                        for (std::int64_t j = 0; j < g.out[1]; ++j) {
                            const auto sj = j * g.stride - g.pad + b;
                            if (sj < 0 || sj >= g.in[1]) continue;
                            const Real* s = src + ((i - i0) * g.out[1] + j) * g.out[2];
                            Real* drow = gc + (si * g.in[1] + sj) * g.in[2];
                            for (std::int64_t k = 0; k < g.out[2]; ++k) {
                                const auto sk = k * g.stride - g.pad + e;
                                if (sk >= 0 && sk < g.in[2]) drow[sk] += s[k];
                            }
                        }
                    }
                }
    }
}

bool is_pointwise(const Conv3d& c) { return c.kernel == 1 && c.stride == 1; }

}  // namespace

// ---------------------------------------------------------------------------

std::size_t ParamStore::add(std::string name, std::vector<std::int64_t> shape, bool trainable, Real fill) {
    std::int64_t n = 1;
    for (auto d : shape) n *= d;
    Entry e;
    e.name = std::move(name);
    e.shape = std::move(shape);
    e.value.assign(static_cast<std::size_t>(n), fill);
    e.grad.assign(static_cast<std::size_t>(n), 0.0);
    e.trainable = trainable;
    entries_.push_back(std::move(e));
    return entries_.size() - 1;
}

std::size_t ParamStore::find(const std::string& name) const {
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].name == name) return i;
    }
    throw DataError("parameter '" + name + "' not found");
}

void ParamStore::zero_grad() {
    for (auto& e : entries_) std::fill(e.grad.begin(), e.grad.end(), 0.0);
}

std::int64_t ParamStore::trainable_count() const {
    std::int64_t n = 0;
    for (const auto& e : entries_) {
        if (e.trainable) n += static_cast<std::int64_t>(e.value.size());
    }
    return n;
}

// ---------------------------------------------------------------------------

Conv3d Conv3d::create(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                      int stride) {
    Conv3d c;
    c.in_channels = in;
    c.out_channels = out;
    c.kernel = kernel;
    c.stride = stride;
    c.weight = store.add(name + ".weight", {out, in, kernel, kernel, kernel});
    c.bias = store.add(name + ".bias", {out});
    return c;
}

Shape3 Conv3d::output_shape(const Shape3& in) const {
    Shape3 o;
    for (int a = 0; a < 3; ++a) o[a] = (in[a] + 2 * pad() - kernel) / stride + 1;
    return o;
}

Tensor Conv3d::forward(const ParamStore& store, const Tensor& x) const {
    if (x.channels() != in_channels) throw DataError("conv3d: expected " + std::to_string(in_channels) + " channels");
    const ConvGeometry g{x.spatial(), output_shape(x.spatial()), in_channels, kernel, stride, pad()};
    Tensor y(x.batch(), out_channels, g.out);
    const AlignedBuffer w(store[weight].value.begin(), store[weight].value.end());
    const auto& b = store[bias].value;
    const ConstMatMap W(w.data(), out_channels, g.rows(), Eigen::OuterStride<>(g.rows()));
    const auto P = g.out.voxels();

    if (is_pointwise(*this)) {
        for (std::int64_t n = 0; n < x.batch(); ++n) {
            const ConstMatMap X(x.sample(n), in_channels, P, Eigen::OuterStride<>(P));
            MatMap Y(y.sample(n), out_channels, P, Eigen::OuterStride<>(P));
            Y.noalias() = W * X;
            for (std::int64_t c = 0; c < out_channels; ++c) Y.row(c).array() += b[c];
        }
        return y;
    }

    const auto slab = g.slab_rows();
    AlignedBuffer cols(static_cast<std::size_t>(g.rows() * slab * g.plane()));
    for (std::int64_t n = 0; n < x.batch(); ++n) {
        for (std::int64_t i0 = 0; i0 < g.out[0]; i0 += slab) {
            const auto i1 = std::min(i0 + slab, g.out[0]);
            const auto width = (i1 - i0) * g.plane();
            im2col(g, x.sample(n), i0, i1, cols.data());
            const ConstMatMap C(cols.data(), g.rows(), width, Eigen::OuterStride<>(width));
            MatMap Y(y.sample(n) + i0 * g.plane(), out_channels, width, Eigen::OuterStride<>(P));
            Y.noalias() = W * C;
            for (std::int64_t c = 0; c < out_channels; ++c) Y.row(c).array() += b[c];
        }
    }
    return y;
}

Tensor Conv3d::backward(ParamStore& store, const Tensor& x, const Tensor& grad_out, bool want_input_grad) const {
    const ConvGeometry g{x.spatial(), output_shape(x.spatial()), in_channels, kernel, stride, pad()};
    require_same_shape(grad_out.spatial(), g.out, "conv3d backward");
    const AlignedBuffer w(store[weight].value.begin(), store[weight].value.end());
    AlignedBuffer gw(store[weight].grad.size(), 0.0);
    auto& gb = store[bias].grad;
    auto bias_sums = [&](const ConstMatMap& gy) {
        for (std::int64_t c = 0; c < out_channels; ++c) {
            Real s = 0.0;
            for (std::int64_t q = 0; q < gy.cols(); ++q) s += gy(c, q);
            gb[static_cast<std::size_t>(c)] += s;
        }
    };
    auto flush = [&] {
        auto& dst = store[weight].grad;
        for (std::size_t q = 0; q < dst.size(); ++q) dst[q] += gw[q];
    };
    const ConstMatMap W(w.data(), out_channels, g.rows(), Eigen::OuterStride<>(g.rows()));
    MatMap GW(gw.data(), out_channels, g.rows(), Eigen::OuterStride<>(g.rows()));
    const auto P = g.out.voxels();

    Tensor gx;
    if (want_input_grad) gx = zeros_like(x);

    if (is_pointwise(*this)) {
        for (std::int64_t n = 0; n < x.batch(); ++n) {
            const ConstMatMap X(x.sample(n), in_channels, P, Eigen::OuterStride<>(P));
            const ConstMatMap GY(grad_out.sample(n), out_channels, P, Eigen::OuterStride<>(P));
            GW.noalias() += GY * X.transpose();
            bias_sums(GY);
            if (want_input_grad) {
                MatMap GX(gx.sample(n), in_channels, P, Eigen::OuterStride<>(P));
                GX.noalias() = W.transpose() * GY;
            }
        }
        flush();
        return gx;
    }

    const auto slab = g.slab_rows();
    AlignedBuffer cols(static_cast<std::size_t>(g.rows() * slab * g.plane()));
    AlignedBuffer gcols(want_input_grad ? cols.size() : 0);
    for (std::int64_t n = 0; n < x.batch(); ++n) {
        for (std::int64_t i0 = 0; i0 < g.out[0]; i0 += slab) {
            const auto i1 = std::min(i0 + slab, g.out[0]);
            const auto width = (i1 - i0) * g.plane();
            im2col(g, x.sample(n), i0, i1, cols.data());
            const ConstMatMap C(cols.data(), g.rows(), width, Eigen::OuterStride<>(width));
            const ConstMatMap GY(grad_out.sample(n) + i0 * g.plane(), out_channels, width, Eigen::OuterStride<>(P));
            GW.noalias() += GY * C.transpose();
            bias_sums(GY);
            if (want_input_grad) {
                MatMap GC(gcols.data(), g.rows(), width, Eigen::OuterStride<>(width));
                GC.noalias() = W.transpose() * GY;
                col2im(g, gcols.data(), i0, i1, gx.sample(n));
            }
        }
    }
    flush();
    return gx;
}

// ---------------------------------------------------------------------------

BatchNorm3d BatchNorm3d::create(ParamStore& store, const std::string& name, std::int64_t channels) {
    BatchNorm3d bn;
    bn.channels = channels;
    bn.gamma = store.add(name + ".gamma", {channels}, true, 1.0);
    bn.beta = store.add(name + ".beta", {channels}, true, 0.0);
    bn.running_mean = store.add(name + ".running_mean", {channels}, false, 0.0);
    bn.running_var = store.add(name + ".running_var", {channels}, false, 1.0);
    return bn;
}

Tensor BatchNorm3d::forward(const ParamStore& store, const Tensor& x, bool training, Cache& cache) const {
    if (x.channels() != channels) throw DataError("batchnorm: channel mismatch");
    const auto V = x.voxels();
    const auto count = static_cast<Real>(x.batch() * V);
    const auto& g = store[gamma].value;
    const auto& b = store[beta].value;
    cache.training = training;
    cache.normalized = zeros_like(x);
    cache.inv_std.assign(static_cast<std::size_t>(channels), 0.0);
    cache.batch_mean.assign(static_cast<std::size_t>(channels), 0.0);
    cache.batch_var_unbiased.assign(static_cast<std::size_t>(channels), 0.0);
    Tensor y = zeros_like(x);
    for (std::int64_t c = 0; c < channels; ++c) {
        Real mean = 0.0;
        Real var = 0.0;
        if (training) {
            for (std::int64_t n = 0; n < x.batch(); ++n) {
                const Real* p = x.channel(n, c);
                for (std::int64_t v = 0; v < V; ++v) mean += p[v];
            }
            mean /= count;
            for (std::int64_t n = 0; n < x.batch(); ++n) {
                const Real* p = x.channel(n, c);
                for (std::int64_t v = 0; v < V; ++v) var += (p[v] - mean) * (p[v] - mean);
            }
            cache.batch_var_unbiased[c] = count > 1 ? var / (count - 1) : 0.0;
            var /= count;
            cache.batch_mean[c] = mean;
        } else {
            mean = store[running_mean].value[c];
            var = store[running_var].value[c];
        }
        const Real inv = 1.0 / std::sqrt(var + eps);
        cache.inv_std[c] = inv;
        for (std::int64_t n = 0; n < x.batch(); ++n) {
            const Real* p = x.channel(n, c);
            Real* h = cache.normalized.channel(n, c);
            Real* o = y.channel(n, c);
            for (std::int64_t v = 0; v < V; ++v) {
                h[v] = (p[v] - mean) * inv;
                o[v] = g[c] * h[v] + b[c];
            }
        }
    }
    return y;
}

Tensor BatchNorm3d::backward(ParamStore& store, const Cache& cache, const Tensor& grad_out) const {
    const auto V = grad_out.voxels();
    const auto count = static_cast<Real>(grad_out.batch() * V);
    const auto& g = store[gamma].value;
    auto& gg = store[gamma].grad;
    auto& gbeta = store[beta].grad;
    Tensor gx = zeros_like(grad_out);
    for (std::int64_t c = 0; c < channels; ++c) {
        Real sum_g = 0.0;
        Real sum_gh = 0.0;
        for (std::int64_t n = 0; n < grad_out.batch(); ++n) {
            const Real* go = grad_out.channel(n, c);
            const Real* h = cache.normalized.channel(n, c);
            for (std::int64_t v = 0; v < V; ++v) {
                sum_g += go[v];
                sum_gh += go[v] * h[v];
            }
        }
        gbeta[c] += sum_g;
        gg[c] += sum_gh;
        const Real scale = g[c] * cache.inv_std[c];
        for (std::int64_t n = 0; n < grad_out.batch(); ++n) {
            const Real* go = grad_out.channel(n, c);
            const Real* h = cache.normalized.channel(n, c);
            Real* o = gx.channel(n, c);
            if (cache.training) {
                for (std::int64_t v = 0; v < V; ++v) o[v] = scale * (go[v] - sum_g / count - h[v] * sum_gh / count);
            } else {
                for (std::int64_t v = 0; v < V; ++v) o[v] = scale * go[v];
            }
        }
    }
    return gx;
}

void BatchNorm3d::update_running(ParamStore& store, const Cache& cache) const {
    if (!cache.training) return;
    auto& rm = store[running_mean].value;
    auto& rv = store[running_var].value;
    for (std::int64_t c = 0; c < channels; ++c) {
        rm[c] = (1 - momentum) * rm[c] + momentum * cache.batch_mean[c];
        rv[c] = (1 - momentum) * rv[c] + momentum * cache.batch_var_unbiased[c];
    }
}

// ---------------------------------------------------------------------------

void relu_inplace(Tensor& x) {
    for (auto& v : x.values()) v = v > 0.0 ? v : 0.0;
}

void relu_backward_inplace(const Tensor& y, Tensor& grad) {
    const auto yv = y.values();
    auto gv = grad.values();
    for (std::size_t i = 0; i < gv.size(); ++i) {
        if (!(yv[i] > 0.0)) gv[i] = 0.0;
    }
}

Tensor upsample_features(const Tensor& x, const Shape3& target) {
    Tensor y(x.batch(), x.channels(), target);
    for (std::int64_t n = 0; n < x.batch(); ++n) {
        kernels::upsample(x.sample(n), x.channels(), x.spatial(), target, 1.0, y.sample(n));
    }
    return y;
}

Tensor upsample_features_backward(const Tensor& grad_out, const Shape3& source) {
    Tensor g(grad_out.batch(), grad_out.channels(), source);
    for (std::int64_t n = 0; n < grad_out.batch(); ++n) {
        kernels::upsample_backward(grad_out.sample(n), grad_out.channels(), source, grad_out.spatial(), 1.0,
                                   g.sample(n));
    }
    return g;
}

}  // namespace dualreg
