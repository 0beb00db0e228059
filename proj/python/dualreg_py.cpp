#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <algorithm>
#include <optional>
#include <string>
#include <vector>

#include "dualreg/dataset.hpp"
#include "dualreg/losses.hpp"
#include "dualreg/report.hpp"
#include "dualreg/synth.hpp"
#include "dualreg/training.hpp"
#include "dualreg/warping.hpp"

namespace py = pybind11;
using namespace dualreg;

namespace {

using RealArray = py::array_t<Real, py::array::c_style | py::array::forcecast>;
using LabelArray = py::array_t<std::uint16_t, py::array::c_style | py::array::forcecast>;

Shape3 shape_of(const py::array& a, int first) {
    if (a.ndim() != first + 3) throw std::invalid_argument("expected a " + std::to_string(first + 3) + "-d array");
    return {a.shape(first), a.shape(first + 1), a.shape(first + 2)};
}

Volume to_volume(const RealArray& a) {
    const auto s = shape_of(a, 0);
    return Volume(s, std::vector<Real>(a.data(), a.data() + a.size()));
}

LabelMap to_labels(const LabelArray& a) {
    const auto s = shape_of(a, 0);
    return LabelMap(s, std::vector<std::uint16_t>(a.data(), a.data() + a.size()));
}

DisplacementField to_field(const RealArray& a) {
    const auto s = shape_of(a, 1);
    if (a.shape(0) != 3) throw std::invalid_argument("a displacement field has shape (3, s0, s1, s2)");
    return DisplacementField(s, std::vector<Real>(a.data(), a.data() + a.size()));
}

py::array_t<Real> from_volume(const Volume& v) {
    const auto& d = v.shape().dims;
    py::array_t<Real> out({d[0], d[1], d[2]});
    std::copy(v.data().begin(), v.data().end(), out.mutable_data());
    return out;
}

py::array_t<std::uint16_t> from_labels(const LabelMap& m) {
    const auto& d = m.shape().dims;
    py::array_t<std::uint16_t> out({d[0], d[1], d[2]});
    std::copy(m.data().begin(), m.data().end(), out.mutable_data());
    return out;
}

py::array_t<Real> from_field(const DisplacementField& f) {
    const auto& d = f.shape().dims;
    py::array_t<Real> out({std::int64_t{3}, d[0], d[1], d[2]});
    std::copy(f.data().begin(), f.data().end(), out.mutable_data());
    return out;
}

py::dict registration_dict(const RegistrationOutput& r) {
    py::dict out;
    out["final_field"] = from_field(r.final_field);
    out["warped"] = from_volume(r.warped);
    py::list levels, accumulated;
    for (int l = 0; l < kPyramidLevels; ++l) {
        levels.append(r.level_fields[l] ? py::object(from_field(*r.level_fields[l])) : py::none());
        accumulated.append(r.accumulated[l] ? py::object(from_field(*r.accumulated[l])) : py::none());
    }
    out["level_fields"] = levels;
    out["accumulated"] = accumulated;
    return out;
}

py::object json_to_py(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json py_to_json(const py::object& o) {
    return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

py::list history_list(const std::vector<LossRecord>& h) {
    py::list out;
    for (const auto& r : h) {
        py::dict d;
        d["step"] = r.step;
        d["loss"] = r.total;
        d["nlcc"] = r.similarity;
        d["smooth"] = r.smooth;
        out.append(d);
    }
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Dual-stream pyramid registration core";

    py::register_exception<DataError>(m, "DataError", PyExc_ValueError);
    py::register_exception<NumericError>(m, "NumericError", PyExc_ArithmeticError);

    m.def("level_shape", [](std::array<std::int64_t, 3> s, int level) {
        return level_shape(Shape3{s[0], s[1], s[2]}, level).dims;
    }, py::arg("shape"), py::arg("level"));

    m.def("warp_trilinear", [](const RealArray& v, const RealArray& f) {
        return from_volume(warp_trilinear(to_volume(v), to_field(f)));
    }, py::arg("volume"), py::arg("field"));
    m.def("warp_nearest", [](const LabelArray& v, const RealArray& f) {
        return from_labels(warp_nearest(to_labels(v), to_field(f)));
    }, py::arg("labels"), py::arg("field"));
    m.def("upsample_field", [](const RealArray& f, std::optional<std::array<std::int64_t, 3>> target) {
        const auto field = to_field(f);
        return from_field(target ? upsample_field(field, Shape3{(*target)[0], (*target)[1], (*target)[2]})
                                 : upsample_field(field));
    }, py::arg("field"), py::arg("target") = py::none());
    m.def("compose", [](const RealArray& a, const RealArray& r) {
        return from_field(compose(to_field(a), to_field(r)));
    }, py::arg("accumulated_up"), py::arg("residual"));

    m.def("nlcc", [](const RealArray& w, const RealArray& f, int window, Real epsilon) {
        LossConfig cfg;
        cfg.window = window;
        cfg.epsilon = epsilon;
        cfg.validate();
        return nlcc(to_volume(w), to_volume(f), cfg);
    }, py::arg("warped"), py::arg("fixed"), py::arg("window") = 9, py::arg("epsilon") = 1e-5);
    m.def("smoothness", [](const RealArray& f) { return smoothness(to_field(f)); }, py::arg("field"));
    m.def("dice", [](const LabelArray& a, const LabelArray& b, std::optional<std::vector<int>> regions) {
        const auto la = to_labels(a);
        const auto lb = to_labels(b);
        std::vector<int> ids;
        if (regions) {
            ids = *regions;
        } else {
            ids = la.region_ids();
            for (int id : lb.region_ids()) ids.push_back(id);
            std::sort(ids.begin(), ids.end());
            ids.erase(std::unique(ids.begin(), ids.end()), ids.end());
        }
        const auto r = dice(la, lb, ids);
        py::dict per;
        for (const auto& d : r.regions) per[py::int_(d.region)] = d.score;
        return py::make_tuple(per, r.average);
    }, py::arg("a"), py::arg("b"), py::arg("regions") = py::none());

    m.def("random_smooth_field", [](std::array<std::int64_t, 3> s, Real amplitude, Real sigma, std::uint64_t seed) {
        return from_field(random_smooth_field(Shape3{s[0], s[1], s[2]}, amplitude, sigma, seed));
    }, py::arg("shape"), py::arg("amplitude"), py::arg("smoothness_sigma"), py::arg("seed"));
    m.def("make_pair", [](std::array<std::int64_t, 3> s, int num_regions, Real amplitude, Real smoothness_sigma,
                          Real noise_sigma, std::uint64_t seed) {
        PhantomSpec spec;
        spec.shape = {s[0], s[1], s[2]};
        spec.num_regions = num_regions;
        spec.amplitude = amplitude;
        spec.smoothness_sigma = smoothness_sigma;
        spec.noise_sigma = noise_sigma;
        spec.seed = seed;
        const auto p = make_pair(spec);
        py::dict out;
        out["moving"] = from_volume(p.moving);
        out["fixed"] = from_volume(p.fixed);
        out["moving_labels"] = from_labels(p.moving_labels);
        out["fixed_labels"] = from_labels(p.fixed_labels);
        out["gt_field"] = from_field(p.gt_field);
        return out;
    }, py::arg("shape") = std::array<std::int64_t, 3>{32, 32, 32}, py::arg("num_regions") = PhantomSpec{}.num_regions,
       py::arg("amplitude") = PhantomSpec{}.amplitude, py::arg("smoothness_sigma") = PhantomSpec{}.smoothness_sigma,
       py::arg("noise_sigma") = PhantomSpec{}.noise_sigma, py::arg("seed") = 1);

    m.def("load_volume", [](const std::filesystem::path& p) { return from_volume(load_volume(p)); });
    m.def("save_volume", [](const RealArray& v, const std::filesystem::path& p) { save_volume(to_volume(v), p); });
    m.def("load_labels", [](const std::filesystem::path& p) { return from_labels(load_labels(p)); });
    m.def("save_labels", [](const LabelArray& v, const std::filesystem::path& p) { save_labels(to_labels(v), p); });
    m.def("load_field", [](const std::filesystem::path& p) { return from_field(load_field(p)); });
    m.def("save_field", [](const RealArray& f, const std::filesystem::path& p) { save_field(to_field(f), p); });

    py::class_<Checkpoint>(m, "Checkpoint")
        .def_static("load", &load_checkpoint, py::arg("path"))
        .def("save", [](const Checkpoint& c, const std::filesystem::path& p) { save_checkpoint(c, p); })
        .def_property_readonly("iteration", [](const Checkpoint& c) { return c.iteration; })
        .def_property_readonly("config", [](const Checkpoint& c) { return json_to_py(to_json(c.config)); })
        .def_property_readonly("digest", [](const Checkpoint& c) { return config_digest(c.config); })
        .def_property_readonly("history", [](const Checkpoint& c) { return history_list(c.history); })
        .def("register", [](const Checkpoint& c, const RealArray& moving, const RealArray& fixed) {
            return registration_dict(register_volumes(to_volume(moving), to_volume(fixed), c));
        }, py::arg("moving"), py::arg("fixed"));

    m.def("train", [](const std::vector<std::pair<RealArray, RealArray>>& pairs, const py::dict& config) {
        std::vector<VolumePair> data;
        for (const auto& [mv, fx] : pairs) data.push_back({to_volume(mv), to_volume(fx)});
        auto j = py_to_json(config);
        if (!j.contains("input_shape") && !data.empty()) j["input_shape"] = data.front().moving.shape().dims;
        const auto cfg = train_config_from_json(j);
        py::gil_scoped_release release;
        return train(std::move(data), cfg);
    }, py::arg("pairs"), py::arg("config") = py::dict());

    m.def("synthesize_dataset", [](const py::dict& config, const std::filesystem::path& out) {
        const auto m = write_synthetic_dataset(synth_config_from_json(py_to_json(config)), out);
        return m.pairs.size();
    }, py::arg("config"), py::arg("out_dir"));
    m.def("evaluate", [](const Checkpoint& c, const std::filesystem::path& data_dir, const std::string& split,
                         std::optional<std::string> reduce) {
        const auto manifest = load_manifest(data_dir);
        std::optional<SliceReduction> r;
        if (reduce) r = SliceReduction::parse(*reduce);
        return json_to_py(to_json(evaluate(c, manifest.split(split), r)));
    }, py::arg("checkpoint"), py::arg("data_dir"), py::arg("split") = "test", py::arg("reduce_slices") = py::none());
}
