#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/field.hpp"
#include "uwsdf/geometry.hpp"
#include "uwsdf/renderer.hpp"

#include <functional>
#include <span>
#include <string>
#include <vector>

namespace uwsdf {

// One supervised pixel ray. Priors are flagged valid per ray; background rays carry only
// color and fg = 0.
struct SupervisedRay {
    Ray ray;
    Vec3 color = Vec3::Zero();
    double fg = 0.0;
    bool has_depth = false;
    double depth = 0.0;
    bool has_normal = false;
    Vec3 normal = Vec3::Zero();  // world frame, unit
    int view = -1;
    int px = -1;
    int py = -1;
};

struct RayBatch {
    std::vector<SupervisedRay> rays;
    std::uint64_t seed = 0;  // drives stratified and eikonal sampling
    std::vector<std::string> warnings;
};

struct EikonalSampleSet {
    std::vector<Vec3> points;
};

// Half uniform in the ball of `radius`, half Gaussian (std `near_std`) around `surface`
// points, cycling through them. Falls back to all-uniform without surface points.
EikonalSampleSet make_eikonal_samples(std::size_t count, std::span<const Vec3> surface, double radius,
                                      double near_std, std::uint64_t seed);

struct LossReport {
    double total = 0.0;
    double rgb = 0.0;
    double eikonal = 0.0;
    double fg = 0.0;
    double depth = 0.0;
    double normal = 0.0;
    double scale = 1.0;  // fitted w
    double shift = 0.0;  // fitted q
    bool depth_degenerate = false;
};

// Every term is a mean over rays (or points). The *_grad variants also fill the adjoint of
// the predictions and return the same value.
double rgb_loss(std::span<const Vec3> pred, std::span<const Vec3> obs);
double rgb_loss_grad(std::span<const Vec3> pred, std::span<const Vec3> obs, std::vector<Vec3>& adj_pred);

using GradientFn = std::function<Vec3(const Vec3&)>;
double eikonal_loss(const GradientFn& gradient, const EikonalSampleSet& samples);
double eikonal_loss(const SdfNetwork& net, const EikonalSampleSet& samples);

inline constexpr double kMaskClamp = 1e-4;
double mask_loss(std::span<const double> opacity, std::span<const double> labels);
double mask_loss_grad(std::span<const double> opacity, std::span<const double> labels, std::vector<double>& adj);

struct ScaleShift {
    double scale = 1.0;
    double shift = 0.0;
    bool degenerate = false;
};
// Least-squares (w, q) minimizing sum (w * pred + q - prior)^2. With fewer than two rays or
// Var(pred) <= 1e-12 returns (1, mean(prior - pred)) flagged degenerate.
ScaleShift solve_scale_shift(std::span<const double> pred, std::span<const double> prior);

// Mean squared residual after the scale/shift fit.
double depth_loss(std::span<const double> pred, std::span<const double> prior, ScaleShift* fit = nullptr);
// (w, q) sit at their least-squares optimum, so holding them fixed gives the exact gradient.
double depth_loss_grad(std::span<const double> pred, std::span<const double> prior, std::vector<double>& adj,
                       ScaleShift* fit = nullptr);

// Mean of ||n - p||_1 + |1 - n.p| after renormalizing both vectors.
double normal_loss(std::span<const Vec3> pred, std::span<const Vec3> prior);
double normal_loss_grad(std::span<const Vec3> pred, std::span<const Vec3> prior, std::vector<Vec3>& adj_pred);

// Full objective rgb + l1 eikonal + l2 fg + l3 depth + l4 normal for a batch (rendering
// included). Deterministic given batch.seed.
LossReport total_loss(const RayBatch& batch, const Model& model, const PipelineConfig& cfg);

// Per-ray predictions exactly as the objective sees them; rays missing the bound sphere get
// the background color and zero opacity.
std::vector<RayRenderOutput> render_batch(const RayBatch& batch, const Model& model, const PipelineConfig& cfg);

}  // namespace uwsdf
