#include "uwsdf/assets.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/meshing.hpp"
#include "uwsdf/renderer.hpp"
#include "uwsdf/segmentation.hpp"
#include "uwsdf/synth.hpp"

#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <array>

namespace py = pybind11;
using namespace uwsdf;

namespace {

using F64 = py::array_t<double, py::array::c_style | py::array::forcecast>;
using U32 = py::array_t<std::uint32_t, py::array::c_style | py::array::forcecast>;
using U8 = py::array_t<std::uint8_t, py::array::c_style | py::array::forcecast>;

std::vector<Vec3> rows3(const F64& a, const char* what) {
    if (a.ndim() != 2 || a.shape(1) != 3) throw ShapeError(std::string(what) + " must have shape (n, 3)");
    std::vector<Vec3> out(static_cast<std::size_t>(a.shape(0)));
    auto r = a.unchecked<2>();
    for (py::ssize_t i = 0; i < a.shape(0); ++i) out[i] = Vec3(r(i, 0), r(i, 1), r(i, 2));
    return out;
}

F64 to_array(const std::vector<Vec3>& v) {
    F64 out({static_cast<py::ssize_t>(v.size()), py::ssize_t{3}});
    auto w = out.mutable_unchecked<2>();
    for (std::size_t i = 0; i < v.size(); ++i)
        for (int c = 0; c < 3; ++c) w(i, c) = v[i](c);
    return out;
}

TriangleMesh to_mesh(const F64& vertices, const U32& faces) {
    TriangleMesh m;
    m.vertices = rows3(vertices, "vertices");
    if (faces.ndim() != 2 || faces.shape(1) != 3) throw ShapeError("faces must have shape (n, 3)");
    auto f = faces.unchecked<2>();
    for (py::ssize_t i = 0; i < faces.shape(0); ++i) {
        const std::array<std::uint32_t, 3> tri{f(i, 0), f(i, 1), f(i, 2)};
        for (auto k : tri)
            if (k >= m.vertices.size()) throw BoundsError("face index out of range");
        m.faces.push_back(tri);
    }
    return m;
}

py::tuple from_mesh(const TriangleMesh& m) {
    U32 faces({static_cast<py::ssize_t>(m.faces.size()), py::ssize_t{3}});
    auto w = faces.mutable_unchecked<2>();
    for (std::size_t i = 0; i < m.faces.size(); ++i)
        for (int c = 0; c < 3; ++c) w(i, c) = m.faces[i][c];
    return py::make_tuple(to_array(m.vertices), faces);
}

BinaryMask to_mask(const U8& a) {
    if (a.ndim() != 2) throw ShapeError("mask must be 2-D");
    BinaryMask m(static_cast<int>(a.shape(1)), static_cast<int>(a.shape(0)));
    const std::uint8_t* p = a.data();
    for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] = p[i] != 0;
    return m;
}

U8 from_mask(const BinaryMask& m) {
    U8 out({static_cast<py::ssize_t>(m.height), static_cast<py::ssize_t>(m.width)});
    std::copy(m.data.begin(), m.data.end(), out.mutable_data());
    return out;
}

AnalyticField field_by_name(const std::string& shape) {
    if (shape == "sphere") return AnalyticField::sphere(0.5);
    if (shape == "box") return AnalyticField::box(Vec3(0.4, 0.4, 0.4));
    if (shape == "torus") return AnalyticField::torus(0.5, 0.2);
    throw ValidationError("unknown shape '" + shape + "'");
}

}  // namespace

PYBIND11_MODULE(_uwsdf, m) {
    m.doc() = "Neural SDF reconstruction toolkit";

    auto base = py::register_exception<Error>(m, "UwsdfError", PyExc_RuntimeError);
    py::register_exception<NumericError>(m, "NumericError", base.ptr());
    py::register_exception<ValidationError>(m, "ValidationError", base.ptr());
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<EmptySurfaceError>(m, "EmptySurfaceError", base.ptr());

    m.def("density", py::vectorize(density_from_sdf), py::arg("sdf"), py::arg("beta"),
          "Laplace-CDF density of signed distances.");

    m.def(
        "composite",
        [](const F64& t, const F64& delta, const F64& sigma, const F64& rgb, const std::array<double, 3>& background) {
            RaySamples s;
            s.t.assign(t.data(), t.data() + t.size());
            s.delta.assign(delta.data(), delta.data() + delta.size());
            if (s.delta.size() != s.t.size()) throw ShapeError("t and delta differ in length");
            const auto colors = rows3(rgb, "rgb");
            const Vec3 bg(background[0], background[1], background[2]);
            const auto out = composite(s, std::vector<double>(sigma.data(), sigma.data() + sigma.size()), colors,
                                       std::vector<Vec3>(colors.size(), Vec3::UnitZ()), bg);
            py::dict d;
            d["weights"] = py::array_t<double>(static_cast<py::ssize_t>(out.weights.size()), out.weights.data());
            d["color"] = py::make_tuple(out.color.x(), out.color.y(), out.color.z());
            d["depth"] = out.depth;
            d["opacity"] = out.opacity;
            return d;
        },
        py::arg("t"), py::arg("delta"), py::arg("sigma"), py::arg("rgb"), py::arg("background") = std::array<double, 3>{0.0, 0.0, 0.0});

    m.def(
        "mesh_shape",
        [](const std::string& shape, int res) {
            return from_mesh(marching_cubes(analytic_scalar_field(field_by_name(shape)), Aabb{}, res));
        },
        py::arg("shape") = "sphere", py::arg("res") = 64, "Marching cubes over an analytic shape in [-1, 1]^3.");

    m.def("read_mesh", [](const std::filesystem::path& p) { return from_mesh(read_mesh_obj(p)); });
    m.def("write_mesh", [](const F64& v, const U32& f, const std::filesystem::path& p) { write_mesh_obj(to_mesh(v, f), p); });

    m.def(
        "acc_comp",
        [](const F64& rv, const U32& rf, const F64& gv, const U32& gf, std::size_t samples, std::uint64_t seed) {
            const MetricsReport r = acc_comp(to_mesh(rv, rf), to_mesh(gv, gf), samples, seed);
            return py::make_tuple(r.acc, r.comp);
        },
        py::arg("recon_vertices"), py::arg("recon_faces"), py::arg("gt_vertices"), py::arg("gt_faces"),
        py::arg("samples") = 100000, py::arg("seed") = 0);

    m.def("convex_hull", [](const std::vector<std::pair<long, long>>& pts) {
        std::vector<Point2i> in;
        for (const auto& [x, y] : pts) in.push_back({x, y});
        std::vector<std::pair<long, long>> out;
        for (const auto& p : convex_hull_graham(in)) out.emplace_back(p.x, p.y);
        return out;
    });

    m.def("optimize_mask", [](const U8& mask) { return from_mask(optimize_mask(to_mask(mask))); },
          "Denoise, then fill the convex hull of the foreground.");

    m.def(
        "synthesize",
        [](const std::filesystem::path& out, std::uint64_t seed, int res, int views, const std::string& shape) {
            SynthSceneSpec spec;
            spec.field = field_by_name(shape);
            spec.seed = seed;
            spec.width = spec.height = res;
            spec.camera_count = views;
            return generate_dataset(spec, out).views.size();
        },
        py::arg("out"), py::arg("seed") = 0, py::arg("res") = 64, py::arg("views") = 20, py::arg("shape") = "sphere",
        "Render a synthetic dataset to `out`; returns the number of views.");
}
