// Batched forward/backward of the full training objective.

#include "uwsdf/errors.hpp"
#include "uwsdf/losses.hpp"
#include "uwsdf/parallel.hpp"
#include "uwsdf/renderer.hpp"
#include "uwsdf/rng.hpp"
#include "uwsdf/training.hpp"

#include <cmath>

namespace uwsdf {

namespace {

constexpr std::size_t kRaysPerChunk = 32;
constexpr std::size_t kPointsPerChunk = 512;
constexpr std::uint64_t kEikonalStream = 0xE1C0'0000'0000ULL;

struct RayCache {
    bool hit = false;
    Eigen::Index column = 0;  // first sample column inside the chunk batch
    RaySamples samples;
    std::vector<double> sigma;
    std::vector<double> dsigma_ds;
    std::vector<double> dsigma_dbeta;
    std::vector<Vec3> rgb;
    std::vector<Vec3> normals;
    std::vector<double> grad_norm;
    RayRenderOutput out;
};

struct ChunkCache {
    std::size_t begin = 0;
    std::size_t end = 0;
    SdfBatch sdf;
    RadianceBatch radiance;
    std::vector<RayCache> rays;
};

struct RayAdjoint {
    CompositeAdjoint composite;
};

void forward_chunk(const Model& model, const RayBatch& batch, const PipelineConfig& cfg, ChunkCache& chunk) {
    const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
    chunk.rays.resize(chunk.end - chunk.begin);
    Eigen::Index columns = 0;
    for (std::size_t r = chunk.begin; r < chunk.end; ++r) {
        auto& rc = chunk.rays[r - chunk.begin];
        const Ray& ray = batch.rays[r].ray;
        const auto bounds = ray_sphere_bounds(ray, cfg.bound_radius);
        if (!bounds) continue;
        rc.hit = true;
        Rng rng(derive_seed(batch.seed, r));
        rc.samples = sample_ray(ray, bounds->t_near, bounds->t_far, cfg.samples_per_ray, rng);
        rc.column = columns;
        columns += static_cast<Eigen::Index>(m);
    }
    if (columns == 0) return;

    Matrix3Xd points(3, columns);
    Matrix3Xd dirs(3, columns);
    for (const auto& rc : chunk.rays) {
        if (!rc.hit) continue;
        for (std::size_t i = 0; i < m; ++i) {
            points.col(rc.column + i) = rc.samples.point(i);
            dirs.col(rc.column + i) = rc.samples.ray.direction;
        }
    }
    sdf_forward(model.sdf, points, true, chunk.sdf);
    radiance_forward(model.radiance, chunk.sdf.feature, dirs, chunk.radiance);

    const Vec3 background(cfg.background[0], cfg.background[1], cfg.background[2]);
    for (auto& rc : chunk.rays) {
        if (!rc.hit) continue;
        rc.sigma.resize(m);
        rc.dsigma_ds.resize(m);
        rc.dsigma_dbeta.resize(m);
        rc.rgb.resize(m);
        rc.normals.resize(m);
        rc.grad_norm.resize(m);
        for (std::size_t i = 0; i < m; ++i) {
            const Eigen::Index c = rc.column + static_cast<Eigen::Index>(i);
            const auto d = density_with_derivatives(chunk.sdf.sdf(c), model.beta);
            rc.sigma[i] = d.sigma;
            rc.dsigma_ds[i] = d.d_sdf;
            rc.dsigma_dbeta[i] = d.d_beta;
            rc.rgb[i] = chunk.radiance.rgb.col(c);
            const double len = chunk.sdf.gradient.col(c).norm();
            rc.grad_norm[i] = len;
            rc.normals[i] = len > 0 ? Vec3(chunk.sdf.gradient.col(c) / len) : Vec3::Zero();
        }
        rc.out = composite(rc.samples, rc.sigma, rc.rgb, rc.normals, background);
    }
}

void backward_chunk(const Model& model, const PipelineConfig& cfg, const ChunkCache& chunk,
                    const std::vector<RayAdjoint>& adjoints, Model& grad) {
    const std::size_t m = static_cast<std::size_t>(cfg.samples_per_ray);
    const Eigen::Index columns = chunk.sdf.sdf.size();
    if (columns == 0) return;
    VectorXd adj_s = VectorXd::Zero(columns);
    Matrix3Xd adj_g = Matrix3Xd::Zero(3, columns);
    MatrixXd adj_rgb = MatrixXd::Zero(3, columns);
    const Vec3 background(cfg.background[0], cfg.background[1], cfg.background[2]);

    for (std::size_t r = chunk.begin; r < chunk.end; ++r) {
        const auto& rc = chunk.rays[r - chunk.begin];
        if (!rc.hit) continue;
        const auto cg = composite_backward(rc.samples, rc.sigma, rc.rgb, rc.normals, rc.out, adjoints[r].composite,
                                           background);
        for (std::size_t i = 0; i < m; ++i) {
            const Eigen::Index c = rc.column + static_cast<Eigen::Index>(i);
            adj_s(c) = cg.sigma[i] * rc.dsigma_ds[i];
            grad.beta += cg.sigma[i] * rc.dsigma_dbeta[i];
            adj_rgb.col(c) = cg.rgb[i];
            if (rc.grad_norm[i] > 0) {
                const Vec3& n = rc.normals[i];
                adj_g.col(c) = (cg.normals[i] - n * n.dot(cg.normals[i])) / rc.grad_norm[i];
            }
        }
    }
    const MatrixXd adj_feature = radiance_backward(model.radiance, chunk.radiance, adj_rgb, grad.radiance);
    sdf_backward(model.sdf, chunk.sdf, adj_s, &adj_feature, &adj_g, grad.sdf);
}

void add_into(Model& acc, const Model& g) {
    for (std::size_t l = 0; l < acc.sdf.layers.size(); ++l) {
        acc.sdf.layers[l].weight += g.sdf.layers[l].weight;
        acc.sdf.layers[l].bias += g.sdf.layers[l].bias;
    }
    for (std::size_t l = 0; l < acc.radiance.layers.size(); ++l) {
        acc.radiance.layers[l].weight += g.radiance.layers[l].weight;
        acc.radiance.layers[l].bias += g.radiance.layers[l].bias;
    }
    acc.beta += g.beta;
}

void check_finite(double v, const char* term) {
    if (!std::isfinite(v)) throw NumericError(std::string("non-finite ") + term + " loss");
}

std::vector<ChunkCache> forward_all(const Model& model, const RayBatch& batch, const PipelineConfig& cfg) {
    const std::size_t n_rays = batch.rays.size();
    const std::size_t n_chunks = (n_rays + kRaysPerChunk - 1) / kRaysPerChunk;
    std::vector<ChunkCache> chunks(n_chunks);
    for (std::size_t c = 0; c < n_chunks; ++c) {
        chunks[c].begin = c * kRaysPerChunk;
        chunks[c].end = std::min(n_rays, chunks[c].begin + kRaysPerChunk);
    }
    parallel_for(n_chunks, [&](std::size_t c) { forward_chunk(model, batch, cfg, chunks[c]); });
    return chunks;
}

GradientResult evaluate(const Model& model, const RayBatch& batch, const PipelineConfig& cfg, bool want_gradient) {
    if (batch.rays.empty()) throw ValidationError("ray batch is empty");
    if (!model.all_finite()) throw NumericError("model parameters are not finite");
    if (!(model.beta > 0)) throw NumericError("beta must stay positive");

    const std::size_t n_rays = batch.rays.size();
    std::vector<ChunkCache> chunks = forward_all(model, batch, cfg);
    const std::size_t n_chunks = chunks.size();

    auto ray_cache = [&](std::size_t r) -> const RayCache& {
        return chunks[r / kRaysPerChunk].rays[r % kRaysPerChunk];
    };
    const Vec3 background(cfg.background[0], cfg.background[1], cfg.background[2]);

    // Ray-level terms.
    std::vector<Vec3> pred_rgb(n_rays), obs_rgb(n_rays);
    std::vector<double> opacity(n_rays), labels(n_rays);
    std::vector<double> depth_pred, depth_prior;
    std::vector<std::size_t> depth_rays;
    std::vector<Vec3> normal_pred, normal_prior;
    std::vector<std::size_t> normal_rays;
    std::vector<Vec3> surface;
    for (std::size_t r = 0; r < n_rays; ++r) {
        const auto& rc = ray_cache(r);
        const auto& sup = batch.rays[r];
        pred_rgb[r] = rc.hit ? rc.out.color : background;
        obs_rgb[r] = sup.color;
        opacity[r] = rc.hit ? rc.out.opacity : 0.0;
        labels[r] = sup.fg;
        if (!rc.hit) continue;
        if (sup.has_depth) {
            depth_pred.push_back(rc.out.depth);
            depth_prior.push_back(sup.depth);
            depth_rays.push_back(r);
        }
        if (sup.has_normal && rc.out.normal.norm() > 1e-12) {
            normal_pred.push_back(rc.out.normal);
            normal_prior.push_back(sup.normal);
            normal_rays.push_back(r);
        }
        const auto best = std::max_element(rc.out.weights.begin(), rc.out.weights.end());
        if (*best > 0) surface.push_back(rc.samples.point(static_cast<std::size_t>(best - rc.out.weights.begin())));
    }

    GradientResult result;
    LossReport& rep = result.report;
    std::vector<Vec3> adj_rgb, adj_normal;
    std::vector<double> adj_opacity, adj_depth;
    rep.rgb = rgb_loss_grad(pred_rgb, obs_rgb, adj_rgb);
    rep.fg = mask_loss_grad(opacity, labels, adj_opacity);
    ScaleShift fit;
    rep.depth = depth_loss_grad(depth_pred, depth_prior, adj_depth, &fit);
    rep.scale = fit.scale;
    rep.shift = fit.shift;
    rep.depth_degenerate = fit.degenerate;
    rep.normal = normal_loss_grad(normal_pred, normal_prior, adj_normal);

    // Eikonal term on its own point set.
    const EikonalSampleSet eik = make_eikonal_samples(n_rays, surface, cfg.bound_radius, cfg.eikonal_near_std,
                                                      derive_seed(batch.seed, kEikonalStream));
    const std::size_t n_pts = eik.points.size();
    const std::size_t n_pchunks = (n_pts + kPointsPerChunk - 1) / kPointsPerChunk;
    std::vector<SdfBatch> eik_cache(n_pchunks);
    std::vector<double> eik_partial(n_pchunks, 0.0);
    parallel_for(n_pchunks, [&](std::size_t c) {
        const std::size_t b = c * kPointsPerChunk, e = std::min(n_pts, b + kPointsPerChunk);
        Matrix3Xd pts(3, e - b);
        for (std::size_t i = b; i < e; ++i) pts.col(i - b) = eik.points[i];
        sdf_forward(model.sdf, pts, true, eik_cache[c]);
        eik_partial[c] = (eik_cache[c].gradient.colwise().norm().array() - 1.0).square().sum();
    });
    for (double v : eik_partial) rep.eikonal += v;
    rep.eikonal /= static_cast<double>(n_pts);

    check_finite(rep.rgb, "rgb");
    check_finite(rep.eikonal, "eikonal");
    check_finite(rep.fg, "foreground mask");
    check_finite(rep.depth, "depth");
    check_finite(rep.normal, "normal");
    rep.total = rep.rgb + cfg.lambda1 * rep.eikonal + cfg.lambda2 * rep.fg + cfg.lambda3 * rep.depth +
                cfg.lambda4 * rep.normal;
    if (!want_gradient) return result;

    std::vector<RayAdjoint> adjoints(n_rays);
    for (std::size_t r = 0; r < n_rays; ++r) {
        adjoints[r].composite.color = adj_rgb[r];
        adjoints[r].composite.opacity = cfg.lambda2 * adj_opacity[r];
    }
    for (std::size_t k = 0; k < depth_rays.size(); ++k) adjoints[depth_rays[k]].composite.depth = cfg.lambda3 * adj_depth[k];
    for (std::size_t k = 0; k < normal_rays.size(); ++k)
        adjoints[normal_rays[k]].composite.normal = cfg.lambda4 * adj_normal[k];

    std::vector<Model> ray_grads(n_chunks, model.zeros_like());
    parallel_for(n_chunks, [&](std::size_t c) { backward_chunk(model, cfg, chunks[c], adjoints, ray_grads[c]); });
    std::vector<Model> eik_grads(n_pchunks, model.zeros_like());
    if (cfg.lambda1 > 0) {
        parallel_for(n_pchunks, [&](std::size_t c) {
            const SdfBatch& cache = eik_cache[c];
            const Eigen::Index cols = cache.sdf.size();
            Matrix3Xd adj_g(3, cols);
            for (Eigen::Index i = 0; i < cols; ++i) {
                const double len = cache.gradient.col(i).norm();
                adj_g.col(i) = len > 0 ? Vec3(cfg.lambda1 * 2.0 * (len - 1.0) / static_cast<double>(n_pts) *
                                              cache.gradient.col(i) / len)
                                       : Vec3::Zero();
            }
            sdf_backward(model.sdf, cache, VectorXd::Zero(cols), nullptr, &adj_g, eik_grads[c].sdf);
        });
    }
    result.gradient = model.zeros_like();
    for (const auto& g : ray_grads) add_into(result.gradient, g);
    for (const auto& g : eik_grads) add_into(result.gradient, g);
    return result;
}

}  // namespace

LossReport total_loss(const RayBatch& batch, const Model& model, const PipelineConfig& cfg) {
    return evaluate(model, batch, cfg, false).report;
}

std::vector<RayRenderOutput> render_batch(const RayBatch& batch, const Model& model, const PipelineConfig& cfg) {
    const auto chunks = forward_all(model, batch, cfg);
    std::vector<RayRenderOutput> out(batch.rays.size());
    const Vec3 background(cfg.background[0], cfg.background[1], cfg.background[2]);
    for (std::size_t r = 0; r < out.size(); ++r) {
        const auto& rc = chunks[r / kRaysPerChunk].rays[r % kRaysPerChunk];
        if (rc.hit)
            out[r] = rc.out;
        else
            out[r].color = background;
    }
    return out;
}

GradientResult compute_gradients(const Model& model, const RayBatch& batch, const PipelineConfig& cfg) {
    return evaluate(model, batch, cfg, true);
}

}  // namespace uwsdf
