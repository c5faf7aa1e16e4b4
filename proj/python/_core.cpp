#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "fodshift/harness.hpp"
#include "fodshift/io.hpp"
#include "fodshift/metrics.hpp"
#include "fodshift/phantom.hpp"

namespace py = pybind11;
using namespace fodshift;

namespace {

// (nx, ny, nz, nc) array over a copy of the volume; channels are contiguous.
template <class T>
py::array_t<T> to_numpy(const Volume<T>& v) {
    const auto s = static_cast<py::ssize_t>(sizeof(T));
    const auto nc = static_cast<py::ssize_t>(v.channels());
    const Dims d = v.dims();
    std::vector<py::ssize_t> shape{d.nx, d.ny, d.nz, nc};
    std::vector<py::ssize_t> strides{nc * s, d.nx * nc * s, static_cast<py::ssize_t>(d.nx) * d.ny * nc * s, s};
    return py::array_t<T>(shape, strides, v.data().data());
}

template <class T>
Volume<T> from_numpy(const py::array& a) {
    const auto arr = py::array_t<T, py::array::forcecast>::ensure(a);
    if (!arr || (arr.ndim() != 3 && arr.ndim() != 4)) throw InvalidArgument("expected an array of shape (nx, ny, nz[, nc])");
    const int nc = arr.ndim() == 4 ? static_cast<int>(arr.shape(3)) : 1;
    Volume<T> v(Dims{static_cast<int>(arr.shape(0)), static_cast<int>(arr.shape(1)), static_cast<int>(arr.shape(2))}, nc);
    const auto d = v.dims();
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x)
                for (int c = 0; c < nc; ++c) {
                    const char* p = reinterpret_cast<const char*>(arr.data()) + x * arr.strides(0) + y * arr.strides(1) +
                                    z * arr.strides(2) + (arr.ndim() == 4 ? c * arr.strides(3) : 0);
                    v.at(x, y, z, c) = *reinterpret_cast<const T*>(p);
                }
    return v;
}

py::dict report_to_dict(const MetricsReport& m) {
    py::list classes;
    for (const auto& c : m.classes) {
        py::dict d;
        d["fiber_class"] = c.fiber_class;
        d["ar"] = c.ar;
        d["ae"] = c.ae;
        d["n_voxels"] = c.n_voxels;
        classes.append(d);
    }
    py::dict out;
    out["classes"] = classes;
    out["delta_afd"] = m.delta_afd;
    out["n_mask_voxels"] = m.n_mask_voxels;
    return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Phantoms, metrics and experiments of the fodshift toolkit";

    py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<InvalidArgument>(m, "InvalidArgument", PyExc_ValueError);

    m.def("sh_n_coeffs", &sh_n_coeffs, py::arg("lmax"));
    m.def("fa_of_tensor", &fa_of_tensor, py::arg("lambda_parallel"), py::arg("lambda_perp"));
    m.def(
        "tessellation",
        [](int level) {
            const auto t = make_tessellation(level);
            py::array_t<double> out({static_cast<py::ssize_t>(t.points.size()), py::ssize_t{3}});
            auto w = out.mutable_unchecked<2>();
            for (std::size_t i = 0; i < t.points.size(); ++i) {
                w(i, 0) = t.points[i].x;
                w(i, 1) = t.points[i].y;
                w(i, 2) = t.points[i].z;
            }
            return out;
        },
        py::arg("level"), "Icosahedral sphere points, shape (n, 3)");

    m.def(
        "mom_alpha_beta",
        [](double target_mean, double target_var, double source_mean, double source_var) {
            const Dims one{1, 1, 1};
            MomentMaps t{Volume<double>(one, 1, target_mean), Volume<double>(one, 1, target_var)};
            MomentMaps s{Volume<double>(one, 1, source_mean), Volume<double>(one, 1, source_var)};
            const auto map = derive_mapping(t, s);
            return py::make_tuple(map.alpha(0), map.beta(0));
        },
        py::arg("target_mean"), py::arg("target_var"), py::arg("source_mean"), py::arg("source_var"),
        "Affine map (alpha, beta) taking the target moments onto the source moments");

    py::class_<Subject>(m, "Subject")
        .def_readonly("id", &Subject::id)
        .def_readonly("age", &Subject::age)
        .def_readonly("site_label", &Subject::site_label)
        .def_readonly("lmax", &Subject::lmax)
        .def_property_readonly("dims", [](const Subject& s) { return py::make_tuple(s.dims.nx, s.dims.ny, s.dims.nz); })
        .def_property_readonly("dwi", [](const Subject& s) { return to_numpy(s.dwi); })
        .def_property_readonly("gt_fod", [](const Subject& s) { return to_numpy(s.gt_fod); })
        .def_property_readonly("wm_mask", [](const Subject& s) { return to_numpy(s.wm_mask); })
        .def_property_readonly("b_values", [](const Subject& s) { return s.gradients.b_values; })
        .def_property_readonly("directions",
                               [](const Subject& s) {
                                   py::array_t<double> out({static_cast<py::ssize_t>(s.gradients.size()), py::ssize_t{3}});
                                   auto w = out.mutable_unchecked<2>();
                                   for (std::size_t i = 0; i < s.gradients.size(); ++i) {
                                       w(i, 0) = s.gradients.directions[i].x;
                                       w(i, 1) = s.gradients.directions[i].y;
                                       w(i, 2) = s.gradients.directions[i].z;
                                   }
                                   return out;
                               })
        .def("__repr__", [](const Subject& s) { return "<Subject " + s.id + " age " + std::to_string(s.age) + ">"; });

    m.def(
        "build_cohort",
        [](const std::string& site, int n_subjects, int grid, std::uint64_t seed, const std::string& group) {
            CohortConfig cfg;
            cfg.preset = preset_by_name(site);
            cfg.label = site;
            cfg.n_subjects = n_subjects;
            cfg.grid = Dims{grid, grid, grid};
            cfg.seed = seed;
            std::pair<double, double> w;
            if (group == "baseline") w = cfg.preset.baseline_ages;
            else if (group == "young") w = cfg.preset.young_ages;
            else if (group == "old") w = cfg.preset.old_ages;
            else throw InvalidArgument("group must be baseline, young or old");
            cfg.age_lo = w.first;
            cfg.age_hi = w.second;
            py::gil_scoped_release release;
            return build_cohort(cfg);
        },
        py::arg("site") = "dhcp", py::arg("n_subjects") = 20, py::arg("grid") = 12, py::arg("seed") = 1,
        py::arg("group") = "baseline");

    m.def("read_subject", [](const std::string& dir) { return read_subject(dir); }, py::arg("dir"));
    m.def(
        "write_cohort", [](const std::string& dir, const std::vector<Subject>& subjects) { write_cohort(dir, subjects); },
        py::arg("dir"), py::arg("subjects"));

    m.def(
        "mean_wm_fa", [](const Subject& s) { return mean_wm_fa(s); }, py::arg("subject"),
        "Mean tensor FA over the subject's WM mask");

    m.def(
        "evaluate_fods",
        [](const py::array& pred, const py::array& gt, const py::array& mask) {
            return report_to_dict(evaluate_fods(from_numpy<float>(pred), from_numpy<float>(gt), from_numpy<unsigned char>(mask)));
        },
        py::arg("pred"), py::arg("gt"), py::arg("mask"), "AR, AE and dAFD of predicted against reference FODs");

    m.def(
        "run_experiment_json",
        [](const std::string& spec_json) {
            const ExperimentSpec spec = spec_from_json(nlohmann::json::parse(spec_json));
            RunRecord rec;
            {
                py::gil_scoped_release release;
                rec = run_experiment(spec);
            }
            return record_to_json(rec).dump();
        },
        py::arg("spec_json"));
    m.def(
        "render_csv_json",
        [](const std::vector<std::string>& records_json) {
            std::vector<RunRecord> recs;
            for (const auto& r : records_json) recs.push_back(record_from_json(nlohmann::json::parse(r)));
            return render_csv(recs);
        },
        py::arg("records_json"));
    m.def(
        "leakage_audit_json",
        [](const std::string& record_json) { return leakage_audit(record_from_json(nlohmann::json::parse(record_json))); },
        py::arg("record_json"));
}
