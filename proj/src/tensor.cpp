#include "dualreg/tensor.hpp"

#include <algorithm>

namespace dualreg {

Tensor& Tensor::operator+=(const Tensor& o) {
    if (!same_layout(o)) throw DataError("tensor add: layout mismatch");
    for (std::size_t i = 0; i < values_.size(); ++i) values_[i] += o.values_[i];
    return *this;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
    if (a.batch() != b.batch()) throw DataError("concat_channels: batch mismatch");
    require_same_shape(a.spatial(), b.spatial(), "concat_channels");
    Tensor out(a.batch(), a.channels() + b.channels(), a.spatial());
    const auto na = a.channels() * a.voxels();
    const auto nb = b.channels() * b.voxels();
    for (std::int64_t n = 0; n < a.batch(); ++n) {
        std::copy_n(a.sample(n), na, out.sample(n));
        std::copy_n(b.sample(n), nb, out.sample(n) + na);
    }
    return out;
}

void split_channels(const Tensor& g, std::int64_t channels_a, Tensor& ga, Tensor& gb) {
    const auto cb = g.channels() - channels_a;
    ga = Tensor(g.batch(), channels_a, g.spatial());
    gb = Tensor(g.batch(), cb, g.spatial());
    const auto na = channels_a * g.voxels();
    const auto nb = cb * g.voxels();
    for (std::int64_t n = 0; n < g.batch(); ++n) {
        std::copy_n(g.sample(n), na, ga.sample(n));
        std::copy_n(g.sample(n) + na, nb, gb.sample(n));
    }
}

}  // namespace dualreg
