#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "dualreg/tensor.hpp"

namespace dualreg {

/// Named parameter tensors with gradient buffers. Non-trainable entries hold
/// normalization running statistics.
class ParamStore {
public:
    struct Entry {
        std::string name;
        std::vector<std::int64_t> shape;
        std::vector<Real> value;
        std::vector<Real> grad;
        bool trainable = true;
    };

    std::size_t add(std::string name, std::vector<std::int64_t> shape, bool trainable = true, Real fill = 0.0);

    Entry& operator[](std::size_t i) { return entries_[i]; }
    const Entry& operator[](std::size_t i) const { return entries_[i]; }
    std::size_t size() const { return entries_.size(); }
    std::vector<Entry>& entries() { return entries_; }
    const std::vector<Entry>& entries() const { return entries_; }

    /// Index of the named entry; throws DataError if absent.
    std::size_t find(const std::string& name) const;

    void zero_grad();
    std::int64_t trainable_count() const;

private:
    std::vector<Entry> entries_;
};

/// 3D convolution with zero padding (kernel / 2) and a bias.
struct Conv3d {
    std::size_t weight = 0;  // (out, in, k, k, k)
    std::size_t bias = 0;    // (out)
    std::int64_t in_channels = 0;
    std::int64_t out_channels = 0;
    int kernel = 3;
    int stride = 1;

    static Conv3d create(ParamStore& store, const std::string& name, std::int64_t in, std::int64_t out, int kernel,
                         int stride);

    int pad() const { return kernel / 2; }
    Shape3 output_shape(const Shape3& in) const;

    Tensor forward(const ParamStore& store, const Tensor& x) const;

    /// Accumulates weight/bias gradients; returns the input gradient when `want_input_grad`.
    Tensor backward(ParamStore& store, const Tensor& x, const Tensor& grad_out, bool want_input_grad = true) const;
};

/// Per-channel batch normalization over (batch, spatial).
struct BatchNorm3d {
    std::size_t gamma = 0;
    std::size_t beta = 0;
    std::size_t running_mean = 0;
    std::size_t running_var = 0;
    std::int64_t channels = 0;
    Real momentum = 0.1;
    Real eps = 1e-5;

    struct Cache {
        bool training = false;
        Tensor normalized;
        std::vector<Real> inv_std;
        std::vector<Real> batch_mean;
        std::vector<Real> batch_var_unbiased;
    };

    static BatchNorm3d create(ParamStore& store, const std::string& name, std::int64_t channels);

    /// Training mode normalizes with batch statistics; inference uses running averages.
    Tensor forward(const ParamStore& store, const Tensor& x, bool training, Cache& cache) const;
    Tensor backward(ParamStore& store, const Cache& cache, const Tensor& grad_out) const;
    void update_running(ParamStore& store, const Cache& cache) const;
};

void relu_inplace(Tensor& x);
/// Masks `grad` where the rectifier output `y` is not positive.
void relu_backward_inplace(const Tensor& y, Tensor& grad);

/// Trilinear upsampling by 2 of every channel onto `target` (2s or 2s-1 per axis).
Tensor upsample_features(const Tensor& x, const Shape3& target);
Tensor upsample_features_backward(const Tensor& grad_out, const Shape3& source);

}  // namespace dualreg
