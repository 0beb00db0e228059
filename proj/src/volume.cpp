#include "dualreg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <set>
#include <sstream>
#include <string_view>

#include <json.hpp>

namespace dualreg {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string Shape3::str() const {
    std::ostringstream os;
    os << "(" << dims[0] << "," << dims[1] << "," << dims[2] << ")";
    return os.str();
}

void require_same_shape(const Shape3& a, const Shape3& b, const char* what) {
    if (a != b) {
        throw DataError(std::string(what) + ": shape mismatch " + a.str() + " vs " + b.str());
    }
}

Volume::Volume(Shape3 shape, Real fill, Spacing spacing)
    : shape_(shape), spacing_(spacing), data_(static_cast<std::size_t>(shape.voxels()), fill) {}

Volume::Volume(Shape3 shape, std::vector<Real> data, Spacing spacing)
    : shape_(shape), spacing_(spacing), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.voxels()) {
        throw DataError("volume: size mismatch between shape " + shape_.str() + " and " +
                        std::to_string(data_.size()) + " values");
    }
}

bool Volume::all_finite() const {
    return std::all_of(data_.begin(), data_.end(), [](Real x) { return std::isfinite(x); });
}

LabelMap::LabelMap(Shape3 shape, std::uint16_t fill)
    : shape_(shape), data_(static_cast<std::size_t>(shape.voxels()), fill) {}

LabelMap::LabelMap(Shape3 shape, std::vector<std::uint16_t> data) : shape_(shape), data_(std::move(data)) {
    if (static_cast<std::int64_t>(data_.size()) != shape_.voxels()) {
        throw DataError("labels: size mismatch between shape " + shape_.str() + " and " +
                        std::to_string(data_.size()) + " values");
    }
}

std::vector<int> LabelMap::region_ids() const {
    std::set<int> ids;
    for (auto v : data_) {
        if (v != 0) ids.insert(v);
    }
    return {ids.begin(), ids.end()};
}

// ---------------------------------------------------------------------------

namespace {

fs::path base_path(const fs::path& path) {
    auto ext = path.extension();
    if (ext == ".json" || ext == ".raw") {
        auto p = path;
        return p.replace_extension();
    }
    return path;
}

std::size_t dtype_size(const std::string& dtype) {
    if (dtype == "f32") return 4;
    if (dtype == "f64") return 8;
    if (dtype == "u16") return 2;
    throw DataError("unsupported dtype '" + dtype + "'");
}

template <typename T>
T from_le(T v) {
    if constexpr (std::endian::native == std::endian::big) {
        auto* b = reinterpret_cast<unsigned char*>(&v);
        std::reverse(b, b + sizeof(T));
    }
    return v;
}

template <typename T>
void append_le(std::string& out, T v) {
    v = from_le(v);
    out.append(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_le(const char* p) {
    T v;
    std::memcpy(&v, p, sizeof(T));
    return from_le(v);
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw DataError("cannot open '" + path.string() + "'");
    std::ostringstream os;
    os << in.rdbuf();
    return os.str();
}

void write_file(const fs::path& path, const std::string& bytes) {
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw DataError("cannot write '" + path.string() + "'");
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw DataError("write failed for '" + path.string() + "'");
}

void write_header(const fs::path& path, const RawHeader& h) {
    json j;
    j["shape"] = h.shape;
    j["dtype"] = h.dtype;
    j["spacing"] = h.spacing;
    write_file(sidecar_path(path), j.dump() + "\n");
}

std::int64_t product(const std::vector<std::int64_t>& v) {
    std::int64_t n = 1;
    for (auto d : v) n *= d;
    return n;
}

std::vector<Real> read_payload(const fs::path& path, const RawHeader& h) {
    const auto bytes = read_file(payload_path(path));
    const auto width = dtype_size(h.dtype);
    const auto count = product(h.shape);
    if (bytes.size() != static_cast<std::size_t>(count) * width) {
        throw DataError("'" + payload_path(path).string() + "': size mismatch, header declares " +
                        std::to_string(count) + " " + h.dtype + " values, payload has " +
                        std::to_string(bytes.size()) + " bytes");
    }
    return decode_payload(h.dtype, bytes);
}

Shape3 spatial_shape(const RawHeader& h, const fs::path& path) {
    if (h.shape.size() != 3) throw DataError("'" + path.string() + "': expected a 3D shape");
    return {h.shape[0], h.shape[1], h.shape[2]};
}

}  // namespace

fs::path sidecar_path(const fs::path& path) {
    auto p = base_path(path);
    p += ".json";
    return p;
}

fs::path payload_path(const fs::path& path) {
    auto p = base_path(path);
    p += ".raw";
    return p;
}

std::string encode_payload(const std::string& dtype, std::span<const Real> values) {
    std::string bytes;
    bytes.reserve(values.size() * dtype_size(dtype));
    for (auto x : values) {
        if (dtype == "f32") {
            append_le(bytes, static_cast<float>(x));
        } else if (dtype == "f64") {
            append_le(bytes, static_cast<double>(x));
        } else {
            append_le(bytes, static_cast<std::uint16_t>(x));
        }
    }
    return bytes;
}

std::vector<Real> decode_payload(const std::string& dtype, std::string_view bytes) {
    const auto width = dtype_size(dtype);
    if (bytes.size() % width != 0) throw DataError("payload: size mismatch for dtype " + dtype);
    std::vector<Real> out(bytes.size() / width);
    for (std::size_t n = 0; n < out.size(); ++n) {
        const char* p = bytes.data() + n * width;
        if (dtype == "f32") {
            out[n] = read_le<float>(p);
        } else if (dtype == "f64") {
            out[n] = read_le<double>(p);
        } else {
            out[n] = read_le<std::uint16_t>(p);
        }
    }
    return out;
}

std::vector<Real> read_raw(const fs::path& path, RawHeader& header) {
    header = read_header(path);
    return read_payload(path, header);
}

void write_raw(const fs::path& path, const RawHeader& header, std::span<const Real> values) {
    if (product(header.shape) != static_cast<std::int64_t>(values.size())) {
        throw DataError("write_raw: size mismatch for '" + path.string() + "'");
    }
    if (header.dtype != "u16" &&
        !std::all_of(values.begin(), values.end(), [](Real x) { return std::isfinite(x); })) {
        throw DataError("non-finite value, refusing to write '" + path.string() + "'");
    }
    write_file(payload_path(path), encode_payload(header.dtype, values));
    write_header(path, header);
}

RawHeader read_header(const fs::path& path) {
    const auto text = read_file(sidecar_path(path));
    RawHeader h;
    try {
        const auto j = json::parse(text);
        h.shape = j.at("shape").get<std::vector<std::int64_t>>();
        h.dtype = j.at("dtype").get<std::string>();
        if (j.contains("spacing")) h.spacing = j.at("spacing").get<Spacing>();
    } catch (const json::exception& e) {
        throw DataError("'" + sidecar_path(path).string() + "': malformed header: " + e.what());
    }
    dtype_size(h.dtype);
    for (auto d : h.shape) {
        if (d < 1) throw DataError("'" + sidecar_path(path).string() + "': non-positive extent");
    }
    return h;
}

Volume load_volume(const fs::path& path) {
    if (path.extension() == ".nii") return load_nifti(path);
    const auto h = read_header(path);
    if (h.dtype == "u16") throw DataError("'" + path.string() + "': expected a real-valued volume");
    const auto shape = spatial_shape(h, path);
    auto data = read_payload(path, h);
    Volume v(shape, std::move(data), h.spacing);
    if (!v.all_finite()) throw DataError("'" + path.string() + "': non-finite values in payload");
    return v;
}

void save_volume(const Volume& v, const fs::path& path) {
    write_raw(path, {{v.shape()[0], v.shape()[1], v.shape()[2]}, "f32", v.spacing()}, v.data());
}

LabelMap load_labels(const fs::path& path) {
    const auto h = read_header(path);
    if (h.dtype != "u16") throw DataError("'" + path.string() + "': labels must be u16");
    const auto shape = spatial_shape(h, path);
    const auto data = read_payload(path, h);
    std::vector<std::uint16_t> labels(data.size());
    std::transform(data.begin(), data.end(), labels.begin(), [](Real x) { return static_cast<std::uint16_t>(x); });
    return {shape, std::move(labels)};
}

void save_labels(const LabelMap& labels, const fs::path& path, const Spacing& spacing) {
    const std::vector<Real> values(labels.data().begin(), labels.data().end());
    const auto& s = labels.shape();
    write_raw(path, {{s[0], s[1], s[2]}, "u16", spacing}, values);
}

// ---------------------------------------------------------------------------

Volume load_nifti(const fs::path& path) {
    const auto bytes = read_file(path);
    if (bytes.size() < 348) throw DataError("'" + path.string() + "': too short for a NIfTI-1 header");

    bool swap = false;
    std::int32_t sizeof_hdr;
    std::memcpy(&sizeof_hdr, bytes.data(), 4);
    if (sizeof_hdr != 348) {
        auto* b = reinterpret_cast<unsigned char*>(&sizeof_hdr);
        std::reverse(b, b + 4);
        if (sizeof_hdr != 348) throw DataError("'" + path.string() + "': not a NIfTI-1 file");
        swap = true;
    }
    auto get = [&]<typename T>(std::size_t offset, T) {
        T v;
        std::memcpy(&v, bytes.data() + offset, sizeof(T));
        if (swap) {
            auto* b = reinterpret_cast<unsigned char*>(&v);
            std::reverse(b, b + sizeof(T));
        }
        return v;
    };

    const auto ndim = get(40, std::int16_t{});
    if (ndim < 3) throw DataError("'" + path.string() + "': expected at least 3 dimensions");
    for (int d = 4; d <= std::min<int>(ndim, 7); ++d) {
        if (get(40 + 2 * d, std::int16_t{}) > 1) throw DataError("'" + path.string() + "': only scalar 3D volumes are supported");
    }
    const std::int64_t nx = get(42, std::int16_t{}), ny = get(44, std::int16_t{}), nz = get(46, std::int16_t{});
    const auto datatype = get(70, std::int16_t{});
    const Spacing spacing{get(80, float{}), get(84, float{}), get(88, float{})};
    const auto vox_offset = static_cast<std::size_t>(get(108, float{}));
    float slope = get(112, float{});
    const float inter = get(116, float{});
    if (slope == 0.0f) slope = 1.0f;

    std::size_t width = 0;
    switch (datatype) {
        case 2: width = 1; break;    // uint8
        case 4: width = 2; break;    // int16
        case 8: width = 4; break;    // int32
        case 16: width = 4; break;   // float32
        case 64: width = 8; break;   // float64
        case 512: width = 2; break;  // uint16
        default: throw DataError("'" + path.string() + "': unsupported NIfTI datatype " + std::to_string(datatype));
    }
    const std::int64_t n = nx * ny * nz;
    if (bytes.size() < vox_offset + static_cast<std::size_t>(n) * width) {
        throw DataError("'" + path.string() + "': size mismatch, voxel data truncated");
    }

    Volume v({nx, ny, nz}, 0.0, spacing);
    // NIfTI stores x fastest; native layout has s0 slowest, so transpose.
    for (std::int64_t z = 0; z < nz; ++z) {
        for (std::int64_t y = 0; y < ny; ++y) {
            for (std::int64_t x = 0; x < nx; ++x) {
                const std::size_t off = vox_offset + static_cast<std::size_t>((z * ny + y) * nx + x) * width;
                double raw = 0.0;
                switch (datatype) {
                    case 2: raw = static_cast<unsigned char>(bytes[off]); break;
                    case 4: raw = get(off, std::int16_t{}); break;
                    case 8: raw = get(off, std::int32_t{}); break;
                    case 16: raw = get(off, float{}); break;
                    case 64: raw = get(off, double{}); break;
                    case 512: raw = get(off, std::uint16_t{}); break;
                }
                v.at(x, y, z) = raw * slope + inter;
            }
        }
    }
    if (!v.all_finite()) throw DataError("'" + path.string() + "': non-finite values");
    return v;
}

// ---------------------------------------------------------------------------

Volume normalize(const Volume& v) {
    Volume out(v.shape(), 0.0, v.spacing());
    if (v.size() == 0) return out;
    const auto [lo, hi] = std::minmax_element(v.data().begin(), v.data().end());
    const Real range = *hi - *lo;
    if (range <= 0.0) return out;
    const Real mn = *lo;
    std::transform(v.data().begin(), v.data().end(), out.data().begin(), [&](Real x) { return (x - mn) / range; });
    return out;
}

namespace {

std::array<std::int64_t, 3> crop_origin(const Shape3& s, const Shape3& t) {
    std::array<std::int64_t, 3> o{};
    for (int a = 0; a < 3; ++a) {
        if (t[a] < 1 || t[a] > s[a]) {
            throw std::invalid_argument("center_crop: target " + t.str() + " exceeds shape " + s.str());
        }
        o[a] = (s[a] - t[a]) / 2;
    }
    return o;
}

template <typename Grid, typename Out>
void copy_window(const Grid& in, Out& out, const std::array<std::int64_t, 3>& o) {
    const auto& t = out.shape();
    for (std::int64_t i = 0; i < t[0]; ++i)
        for (std::int64_t j = 0; j < t[1]; ++j)
            for (std::int64_t k = 0; k < t[2]; ++k) out.at(i, j, k) = in.at(i + o[0], j + o[1], k + o[2]);
}

}  // namespace

Volume center_crop(const Volume& v, const Shape3& target) {
    const auto o = crop_origin(v.shape(), target);
    Volume out(target, 0.0, v.spacing());
    copy_window(v, out, o);
    return out;
}

LabelMap center_crop(const LabelMap& v, const Shape3& target) {
    const auto o = crop_origin(v.shape(), target);
    LabelMap out(target);
    copy_window(v, out, o);
    return out;
}

std::vector<std::int64_t> reduced_slice_indices(std::int64_t extent, std::int64_t keep) {
    if (keep < 2 || keep > extent) {
        throw std::invalid_argument("reduce_slices: keep=" + std::to_string(keep) + " out of range [2, " +
                                    std::to_string(extent) + "]");
    }
    std::vector<std::int64_t> idx(static_cast<std::size_t>(keep));
    for (std::int64_t j = 0; j < keep; ++j) {
        idx[j] = static_cast<std::int64_t>(std::round(static_cast<double>(j) * (extent - 1) / (keep - 1)));
    }
    return idx;
}

Volume reduce_slices(const Volume& v, int axis, std::int64_t keep) {
    if (axis < 0 || axis > 2) throw std::invalid_argument("reduce_slices: axis must be 0, 1 or 2");
    const auto idx = reduced_slice_indices(v.shape()[axis], keep);
    Shape3 t = v.shape();
    t[axis] = keep;
    auto spacing = v.spacing();
    spacing[axis] *= static_cast<double>(v.shape()[axis] - 1) / static_cast<double>(keep - 1);
    Volume out(t, 0.0, spacing);
    for (std::int64_t i = 0; i < t[0]; ++i)
        for (std::int64_t j = 0; j < t[1]; ++j)
            for (std::int64_t k = 0; k < t[2]; ++k) {
                std::array<std::int64_t, 3> src{i, j, k};
                src[axis] = idx[src[axis]];
                out.at(i, j, k) = v.at(src[0], src[1], src[2]);
            }
    return out;
}

Volume resample_to(const Volume& v, const Shape3& target) {
    const auto& s = v.shape();
    for (int a = 0; a < 3; ++a) {
        if (target[a] < 2) throw std::invalid_argument("resample_to: target extents must be >= 2");
    }
    // Per-axis source coordinate i * (s - 1) / (t - 1), split into base index and weight.
    std::array<std::vector<std::int64_t>, 3> base;
    std::array<std::vector<Real>, 3> frac;
    for (int a = 0; a < 3; ++a) {
        base[a].resize(target[a]);
        frac[a].resize(target[a]);
        for (std::int64_t i = 0; i < target[a]; ++i) {
            const Real x = static_cast<Real>(i) * static_cast<Real>(s[a] - 1) / static_cast<Real>(target[a] - 1);
            auto b = static_cast<std::int64_t>(std::floor(x));
            b = std::clamp<std::int64_t>(b, 0, std::max<std::int64_t>(s[a] - 2, 0));
            base[a][i] = b;
            frac[a][i] = s[a] > 1 ? x - static_cast<Real>(b) : 0.0;
        }
    }
    auto spacing = v.spacing();
    for (int a = 0; a < 3; ++a) spacing[a] *= static_cast<double>(s[a] - 1) / static_cast<double>(target[a] - 1);
    Volume out(target, 0.0, spacing);
    auto nxt = [&](int a, std::int64_t b) { return std::min(b + 1, s[a] - 1); };
    for (std::int64_t i = 0; i < target[0]; ++i) {
        const auto i0 = base[0][i], i1 = nxt(0, i0);
        const Real fi = frac[0][i];
        for (std::int64_t j = 0; j < target[1]; ++j) {
            const auto j0 = base[1][j], j1 = nxt(1, j0);
            const Real fj = frac[1][j];
            for (std::int64_t k = 0; k < target[2]; ++k) {
                const auto k0 = base[2][k], k1 = nxt(2, k0);
                const Real fk = frac[2][k];
                const Real c00 = v.at(i0, j0, k0) * (1 - fk) + v.at(i0, j0, k1) * fk;
                const Real c01 = v.at(i0, j1, k0) * (1 - fk) + v.at(i0, j1, k1) * fk;
                const Real c10 = v.at(i1, j0, k0) * (1 - fk) + v.at(i1, j0, k1) * fk;
                const Real c11 = v.at(i1, j1, k0) * (1 - fk) + v.at(i1, j1, k1) * fk;
                out.at(i, j, k) = (c00 * (1 - fj) + c01 * fj) * (1 - fi) + (c10 * (1 - fj) + c11 * fj) * fi;
            }
        }
    }
    return out;
}

}  // namespace dualreg
