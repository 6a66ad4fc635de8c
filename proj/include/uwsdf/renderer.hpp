#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/field.hpp"
#include "uwsdf/geometry.hpp"
#include "uwsdf/rng.hpp"

#include <functional>
#include <vector>

namespace uwsdf {

// Laplace-CDF density: (1/beta)(1 - exp(s/beta)/2) inside, exp(-s/beta)/(2 beta) outside.
double density_from_sdf(double s, double beta);

struct DensityDerivatives {
    double sigma;
    double d_sdf;
    double d_beta;
};
DensityDerivatives density_with_derivatives(double s, double beta);

struct RaySamples {
    Ray ray;
    std::vector<double> t;      // strictly increasing
    std::vector<double> delta;  // t[i+1] - t[i]; the last one reaches t_far

    [[nodiscard]] std::size_t size() const { return t.size(); }
    [[nodiscard]] Vec3 point(std::size_t i) const { return ray.at(t[i]); }
};

// Stratified sampling: one uniform draw per equal-width bin of [t_near, t_far].
RaySamples sample_ray(const Ray& ray, double t_near, double t_far, int count, const std::function<double()>& uniform);
RaySamples sample_ray(const Ray& ray, double t_near, double t_far, int count, Rng& rng);

struct RayRenderOutput {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    Vec3 normal = Vec3::Zero();
    double opacity = 0.0;
    std::vector<double> weights;
};

// Alpha compositing of per-sample densities, colors and unit normals. The color receives
// (1 - opacity) * background.
RayRenderOutput composite(const RaySamples& samples, const std::vector<double>& sigma, const std::vector<Vec3>& rgb,
                          const std::vector<Vec3>& normals, const Vec3& background = Vec3::Zero());

struct CompositeAdjoint {
    Vec3 color = Vec3::Zero();
    double depth = 0.0;
    Vec3 normal = Vec3::Zero();
    double opacity = 0.0;
};

struct CompositeGradient {
    std::vector<double> sigma;
    std::vector<Vec3> rgb;
    std::vector<Vec3> normals;
};

// Reverse-mode pass of composite() for the given output adjoints.
CompositeGradient composite_backward(const RaySamples& samples, const std::vector<double>& sigma,
                                     const std::vector<Vec3>& rgb, const std::vector<Vec3>& normals,
                                     const RayRenderOutput& forward, const CompositeAdjoint& adj,
                                     const Vec3& background = Vec3::Zero());

struct RenderSettings {
    int samples = 128;
    double bound_radius = 1.0;
    Vec3 background = Vec3::Zero();
};

// Evaluates a field at a column batch of points seen along `dir`: fills signed distance,
// gradient and color per point.
using FieldEvaluator =
    std::function<void(const Matrix3Xd& points, const Vec3& dir, VectorXd& sdf, Matrix3Xd& gradient, Matrix3Xd& rgb)>;

FieldEvaluator network_evaluator(const SdfNetwork& sdf, const RadianceNetwork& radiance);
FieldEvaluator analytic_evaluator(const AnalyticField& field);

// Bounds -> stratified samples -> field evaluation -> density -> compositing. Normals fed to
// the compositor are normalized SDF gradients. Throws MissError when the ray misses the
// bounding sphere.
RayRenderOutput render_ray(const FieldEvaluator& field, const Ray& ray, const RenderSettings& settings, double beta,
                           Rng& rng);
RayRenderOutput render_ray(const SdfNetwork& sdf, const RadianceNetwork& radiance, const Ray& ray,
                           const RenderSettings& settings, double beta, Rng& rng);

struct RenderedView {
    ImageBuffer color;    // 3 channels
    ImageBuffer normal;   // (n + 1) / 2, 3 channels
    ImageBuffer opacity;  // 1 channel
    std::vector<float> depth;  // metric ray depth per pixel (0 where the ray misses)
};

// Renders every pixel of a camera; pixel p uses the RNG stream derive_seed(seed, p), so the
// result does not depend on the worker count.
RenderedView render_view_maps(const FieldEvaluator& field, const CameraRecord& cam, const RenderSettings& settings,
                              double beta, std::uint64_t seed);

}  // namespace uwsdf
