#include "uwsdf/renderer.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/parallel.hpp"

#include <cmath>

namespace uwsdf {

double density_from_sdf(double s, double beta) {
    if (!(beta > 0)) throw ValidationError("beta must be positive");
    if (s < 0) return (1.0 / beta) * (1.0 - 0.5 * std::exp(s / beta));
    return (0.5 / beta) * std::exp(-s / beta);
}

DensityDerivatives density_with_derivatives(double s, double beta) {
    if (!(beta > 0)) throw ValidationError("beta must be positive");
    if (s < 0) {
        const double e = std::exp(s / beta);
        const double sigma = (1.0 / beta) * (1.0 - 0.5 * e);
        return {sigma, -0.5 * e / (beta * beta), -sigma / beta + 0.5 * s * e / (beta * beta * beta)};
    }
    const double sigma = (0.5 / beta) * std::exp(-s / beta);
    return {sigma, -sigma / beta, -sigma / beta + sigma * s / (beta * beta)};
}

RaySamples sample_ray(const Ray& ray, double t_near, double t_far, int count, const std::function<double()>& uniform) {
    if (!(t_near < t_far) || !std::isfinite(t_near) || !std::isfinite(t_far))
        throw ValidationError("sample interval must satisfy t_near < t_far");
    if (count < 2) throw ValidationError("at least two samples per ray are required");
    RaySamples out;
    out.ray = ray;
    out.t.resize(count);
    out.delta.resize(count);
    const double bin = (t_far - t_near) / count;
    for (int i = 0; i < count; ++i) out.t[i] = t_near + (i + uniform()) * bin;
    for (int i = 0; i + 1 < count; ++i) out.delta[i] = out.t[i + 1] - out.t[i];
    out.delta[count - 1] = t_far - out.t[count - 1];
    return out;
}

RaySamples sample_ray(const Ray& ray, double t_near, double t_far, int count, Rng& rng) {
    return sample_ray(ray, t_near, t_far, count, [&rng] { return rng.uniform(); });
}

RayRenderOutput composite(const RaySamples& samples, const std::vector<double>& sigma, const std::vector<Vec3>& rgb,
                          const std::vector<Vec3>& normals, const Vec3& background) {
    const std::size_t m = samples.size();
    if (sigma.size() != m || rgb.size() != m || normals.size() != m)
        throw ShapeError("composite inputs must all have one entry per sample");
    RayRenderOutput out;
    out.weights.resize(m);
    double transmittance = 1.0;
    for (std::size_t i = 0; i < m; ++i) {
        if (!(sigma[i] >= 0)) throw ValidationError("densities must be non-negative");
        const double survive = std::exp(-sigma[i] * samples.delta[i]);
        const double w = transmittance * (1.0 - survive);
        out.weights[i] = w;
        out.color += w * rgb[i];
        out.depth += w * samples.t[i];
        out.normal += w * normals[i];
        out.opacity += w;
        transmittance *= survive;
    }
    if (out.opacity > 1.0) {  // rounding only; keep the weights a sub-partition of unity
        const double k = 1.0 / out.opacity;
        for (double& w : out.weights) w *= k;
        out.color *= k;
        out.depth *= k;
        out.normal *= k;
        out.opacity = 0.0;
        for (double w : out.weights) out.opacity += w;
        if (out.opacity > 1.0) {
            out.weights.back() -= out.opacity - 1.0;
            out.opacity = 1.0;
        }
    }
    out.color += (1.0 - out.opacity) * background;
    return out;
}

CompositeGradient composite_backward(const RaySamples& samples, const std::vector<double>& sigma,
                                     const std::vector<Vec3>& rgb, const std::vector<Vec3>& normals,
                                     const RayRenderOutput& forward, const CompositeAdjoint& adj,
                                     const Vec3& background) {
    const std::size_t m = samples.size();
    CompositeGradient g;
    g.sigma.assign(m, 0.0);
    g.rgb.resize(m);
    g.normals.resize(m);
    // Adjoint of each weight w_i.
    std::vector<double> gw(m);
    for (std::size_t i = 0; i < m; ++i) {
        gw[i] = adj.color.dot(rgb[i] - background) + adj.depth * samples.t[i] + adj.normal.dot(normals[i]) + adj.opacity;
        g.rgb[i] = forward.weights[i] * adj.color;
        g.normals[i] = forward.weights[i] * adj.normal;
    }
    // w_k depends on sigma_i through T_k (k > i) and through alpha_i (k = i).
    double suffix = 0.0;
    for (std::size_t i = m; i-- > 0;) {
        g.sigma[i] = -samples.delta[i] * suffix;
        suffix += forward.weights[i] * gw[i];
    }
    double transmittance = 1.0;
    for (std::size_t i = 0; i < m; ++i) {
        transmittance *= std::exp(-sigma[i] * samples.delta[i]);  // T_{i+1}
        g.sigma[i] += samples.delta[i] * transmittance * gw[i];
    }
    return g;
}

FieldEvaluator network_evaluator(const SdfNetwork& sdf, const RadianceNetwork& radiance) {
    return [&sdf, &radiance](const Matrix3Xd& points, const Vec3& dir, VectorXd& s, Matrix3Xd& gradient,
                             Matrix3Xd& rgb) {
        SdfBatch batch;
        sdf_forward(sdf, points, true, batch);
        Matrix3Xd dirs(3, points.cols());
        dirs.colwise() = dir;
        RadianceBatch rad;
        radiance_forward(radiance, batch.feature, dirs, rad);
        s = batch.sdf;
        gradient = batch.gradient;
        rgb = rad.rgb;
    };
}

FieldEvaluator analytic_evaluator(const AnalyticField& field) {
    return [field](const Matrix3Xd& points, const Vec3&, VectorXd& s, Matrix3Xd& gradient, Matrix3Xd& rgb) {
        const Eigen::Index n = points.cols();
        s.resize(n);
        gradient.resize(3, n);
        rgb.resize(3, n);
        for (Eigen::Index i = 0; i < n; ++i) {
            const Vec3 p = points.col(i);
            s(i) = analytic_sdf(field, p);
            gradient.col(i) = analytic_gradient(field, p);
            rgb.col(i) = analytic_shade(field, p, gradient.col(i));
        }
    };
}

RayRenderOutput render_ray(const FieldEvaluator& field, const Ray& ray, const RenderSettings& settings, double beta,
                           Rng& rng) {
    const auto bounds = ray_sphere_bounds(ray, settings.bound_radius);
    if (!bounds) throw MissError("ray misses the bounding sphere");
    const RaySamples samples = sample_ray(ray, bounds->t_near, bounds->t_far, settings.samples, rng);
    const std::size_t m = samples.size();
    Matrix3Xd points(3, m);
    for (std::size_t i = 0; i < m; ++i) points.col(i) = samples.point(i);
    VectorXd s;
    Matrix3Xd gradient, rgb;
    field(points, ray.direction, s, gradient, rgb);

    std::vector<double> sigma(m);
    std::vector<Vec3> colors(m), normals(m);
    for (std::size_t i = 0; i < m; ++i) {
        sigma[i] = density_from_sdf(s(i), beta);
        colors[i] = rgb.col(i);
        const double len = gradient.col(i).norm();
        normals[i] = len > 0 ? Vec3(gradient.col(i) / len) : Vec3::Zero();
    }
    return composite(samples, sigma, colors, normals, settings.background);
}

RayRenderOutput render_ray(const SdfNetwork& sdf, const RadianceNetwork& radiance, const Ray& ray,
                           const RenderSettings& settings, double beta, Rng& rng) {
    return render_ray(network_evaluator(sdf, radiance), ray, settings, beta, rng);
}

RenderedView render_view_maps(const FieldEvaluator& field, const CameraRecord& cam, const RenderSettings& settings,
                              double beta, std::uint64_t seed) {
    RenderedView view{ImageBuffer(cam.width, cam.height, 3), ImageBuffer(cam.width, cam.height, 3, 0.5f),
                      ImageBuffer(cam.width, cam.height, 1), std::vector<float>(cam.width * cam.height, 0.0f)};
    const auto rows = static_cast<std::size_t>(cam.height);
    parallel_for(rows, [&](std::size_t y) {
        for (int x = 0; x < cam.width; ++x) {
            const std::size_t pixel = y * cam.width + x;
            const Ray ray = ray_for_pixel(cam, x, static_cast<double>(y));
            const int yi = static_cast<int>(y);
            if (!ray_sphere_bounds(ray, settings.bound_radius)) {
                for (int c = 0; c < 3; ++c) view.color.at(x, yi, c) = static_cast<float>(settings.background(c));
                continue;
            }
            Rng rng(derive_seed(seed, pixel));
            const RayRenderOutput out = render_ray(field, ray, settings, beta, rng);
            const double n_len = out.normal.norm();
            for (int c = 0; c < 3; ++c) {
                view.color.at(x, yi, c) = static_cast<float>(std::clamp(out.color(c), 0.0, 1.0));
                if (n_len > 0) view.normal.at(x, yi, c) = static_cast<float>((out.normal(c) / n_len + 1.0) * 0.5);
            }
            view.opacity.at(x, yi) = static_cast<float>(std::clamp(out.opacity, 0.0, 1.0));
            view.depth[pixel] = out.opacity > 0 ? static_cast<float>(out.depth / out.opacity) : 0.0f;
        }
    });
    return view;
}

}  // namespace uwsdf
