#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "dualreg/common.hpp"

namespace dualreg {

using Spacing = std::array<double, 3>;

/// Scalar intensity grid, row-major with s0 slowest.
class Volume {
public:
    Volume() = default;
    explicit Volume(Shape3 shape, Real fill = 0.0, Spacing spacing = {1.0, 1.0, 1.0});
    Volume(Shape3 shape, std::vector<Real> data, Spacing spacing = {1.0, 1.0, 1.0});

    const Shape3& shape() const { return shape_; }
    const Spacing& spacing() const { return spacing_; }
    void set_spacing(const Spacing& s) { spacing_ = s; }

    std::span<const Real> data() const { return data_; }
    std::span<Real> data() { return data_; }
    std::int64_t size() const { return static_cast<std::int64_t>(data_.size()); }

    Real& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[shape_.index(i, j, k)]; }
    Real at(std::int64_t i, std::int64_t j, std::int64_t k) const { return data_[shape_.index(i, j, k)]; }
    Real& operator[](std::int64_t n) { return data_[n]; }
    Real operator[](std::int64_t n) const { return data_[n]; }

    bool all_finite() const;

private:
    Shape3 shape_{};
    Spacing spacing_{1.0, 1.0, 1.0};
    std::vector<Real> data_;
};

/// Integer region labels; 0 is background.
class LabelMap {
public:
    LabelMap() = default;
    explicit LabelMap(Shape3 shape, std::uint16_t fill = 0);
    LabelMap(Shape3 shape, std::vector<std::uint16_t> data);

    const Shape3& shape() const { return shape_; }
    std::span<const std::uint16_t> data() const { return data_; }
    std::span<std::uint16_t> data() { return data_; }

    std::uint16_t& at(std::int64_t i, std::int64_t j, std::int64_t k) { return data_[shape_.index(i, j, k)]; }
    std::uint16_t at(std::int64_t i, std::int64_t j, std::int64_t k) const {
        return data_[shape_.index(i, j, k)];
    }
    std::uint16_t operator[](std::int64_t n) const { return data_[n]; }

    /// Sorted distinct nonzero labels present.
    std::vector<int> region_ids() const;

private:
    Shape3 shape_{};
    std::vector<std::uint16_t> data_;
};

// ---------------------------------------------------------------------------
// Native two-file format: `<base>.json` sidecar plus `<base>.raw` payload.
// `path` may name the base, the sidecar, or the payload.

struct RawHeader {
    std::vector<std::int64_t> shape;
    std::string dtype;  // "f32", "f64" or "u16"
    Spacing spacing{1.0, 1.0, 1.0};
};

std::filesystem::path sidecar_path(const std::filesystem::path& path);
std::filesystem::path payload_path(const std::filesystem::path& path);

RawHeader read_header(const std::filesystem::path& path);

/// Reads header and payload of any native file, converting values to Real.
std::vector<Real> read_raw(const std::filesystem::path& path, RawHeader& header);

/// Writes values with `header.dtype` ("f32", "f64" or "u16") plus the sidecar.
void write_raw(const std::filesystem::path& path, const RawHeader& header, std::span<const Real> values);

/// Little-endian encoding of values in the given dtype, as stored in a payload.
std::string encode_payload(const std::string& dtype, std::span<const Real> values);
std::vector<Real> decode_payload(const std::string& dtype, std::string_view bytes);

/// Native format, or NIfTI-1 when the path ends in .nii.
Volume load_volume(const std::filesystem::path& path);
void save_volume(const Volume& v, const std::filesystem::path& path);

LabelMap load_labels(const std::filesystem::path& path);
void save_labels(const LabelMap& labels, const std::filesystem::path& path, const Spacing& spacing = {1.0, 1.0, 1.0});

/// Reads a single-file NIfTI-1 (.nii) scalar volume. Orientation is ignored;
/// the result is indexed v[x, y, z].
Volume load_nifti(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Preprocessing

/// Min-max scaling to [0, 1]; a constant volume maps to all zeros.
Volume normalize(const Volume& v);

/// Keeps a target-sized window starting at floor((s - t) / 2) on each axis.
Volume center_crop(const Volume& v, const Shape3& target);
LabelMap center_crop(const LabelMap& v, const Shape3& target);

/// Slice indices kept by reduce_slices: round(j * (n - 1) / (keep - 1)).
std::vector<std::int64_t> reduced_slice_indices(std::int64_t extent, std::int64_t keep);

/// Keeps `keep` evenly spaced slices along `axis`.
Volume reduce_slices(const Volume& v, int axis, std::int64_t keep);

/// Corner-aligned trilinear resampling onto a grid of `target` shape.
Volume resample_to(const Volume& v, const Shape3& target);

}  // namespace dualreg
