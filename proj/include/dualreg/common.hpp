#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <new>
#include <stdexcept>
#include <string>

namespace dualreg {

/// Scalar type for all in-memory grids, parameters and gradients.
using Real = double;

/// Cache-line aligned storage. Vectorized kernels pick their summation order
/// from pointer alignment, so a fixed alignment keeps results bit-reproducible.
template <typename T, std::size_t Align = 64>
struct AlignedAllocator {
    using value_type = T;
    template <typename U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };
    AlignedAllocator() = default;
    template <typename U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) {}
    T* allocate(std::size_t n) { return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align))); }
    void deallocate(T* p, std::size_t) { ::operator delete(p, std::align_val_t(Align)); }
    template <typename U>
    bool operator==(const AlignedAllocator<U, Align>&) const { return true; }
};

/// Spatial extent (s0, s1, s2) of a 3D grid; s0 is the slowest-varying axis.
struct Shape3 {
    std::array<std::int64_t, 3> dims{0, 0, 0};

    constexpr Shape3() = default;
    constexpr Shape3(std::int64_t a, std::int64_t b, std::int64_t c) : dims{a, b, c} {}

    constexpr std::int64_t operator[](std::size_t i) const { return dims[i]; }
    constexpr std::int64_t& operator[](std::size_t i) { return dims[i]; }
    constexpr std::int64_t voxels() const { return dims[0] * dims[1] * dims[2]; }
    constexpr std::int64_t index(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return (i * dims[1] + j) * dims[2] + k;
    }
    friend constexpr bool operator==(const Shape3&, const Shape3&) = default;

    std::string str() const;
};

/// Shape after a stride-2, pad-1, kernel-3 convolution: ceil(s / 2) per axis.
constexpr Shape3 halved(const Shape3& s) {
    return {(s[0] + 1) / 2, (s[1] + 1) / 2, (s[2] + 1) / 2};
}

constexpr Shape3 doubled(const Shape3& s) { return {2 * s[0], 2 * s[1], 2 * s[2]}; }

/// Bad or inconsistent input data: missing files, shape mismatches, corrupt payloads.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Non-finite values or divergence during optimization.
class NumericError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

void require_same_shape(const Shape3& a, const Shape3& b, const char* what);

}  // namespace dualreg
