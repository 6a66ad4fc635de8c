#include "uwsdf/losses.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/rng.hpp"

#include <algorithm>
#include <cmath>

namespace uwsdf {

namespace {

double sign(double v) { return v > 0 ? 1.0 : (v < 0 ? -1.0 : 0.0); }

void require_same(std::size_t a, std::size_t b, const char* what) {
    if (a != b) throw ShapeError(std::string(what) + ": prediction and target counts differ");
}

}  // namespace

EikonalSampleSet make_eikonal_samples(std::size_t count, std::span<const Vec3> surface, double radius,
                                      double near_std, std::uint64_t seed) {
    if (count == 0) throw ValidationError("eikonal sample set must be nonempty");
    Rng rng(seed);
    EikonalSampleSet set;
    set.points.reserve(count);
    const std::size_t near = surface.empty() ? 0 : count / 2;
    while (set.points.size() < count - near) {
        const Vec3 p(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1));
        if (p.squaredNorm() <= 1.0) set.points.push_back(radius * p);
    }
    for (std::size_t i = 0; i < near; ++i) {
        const Vec3& c = surface[i % surface.size()];
        set.points.push_back(c + near_std * Vec3(rng.normal(), rng.normal(), rng.normal()));
    }
    return set;
}

double rgb_loss(std::span<const Vec3> pred, std::span<const Vec3> obs) {
    std::vector<Vec3> unused;
    return rgb_loss_grad(pred, obs, unused);
}

double rgb_loss_grad(std::span<const Vec3> pred, std::span<const Vec3> obs, std::vector<Vec3>& adj_pred) {
    require_same(pred.size(), obs.size(), "rgb_loss");
    adj_pred.assign(pred.size(), Vec3::Zero());
    if (pred.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const Vec3 d = pred[i] - obs[i];
        sum += d.cwiseAbs().sum();
        adj_pred[i] = inv * Vec3(sign(d.x()), sign(d.y()), sign(d.z()));
    }
    return sum * inv;
}

double eikonal_loss(const GradientFn& gradient, const EikonalSampleSet& samples) {
    if (samples.points.empty()) throw ValidationError("eikonal sample set must be nonempty");
    double sum = 0.0;
    for (const auto& p : samples.points) {
        const double e = gradient(p).norm() - 1.0;
        sum += e * e;
    }
    return sum / static_cast<double>(samples.points.size());
}

double eikonal_loss(const SdfNetwork& net, const EikonalSampleSet& samples) {
    if (samples.points.empty()) throw ValidationError("eikonal sample set must be nonempty");
    Matrix3Xd pts(3, samples.points.size());
    for (std::size_t i = 0; i < samples.points.size(); ++i) pts.col(i) = samples.points[i];
    SdfBatch batch;
    sdf_forward(net, pts, true, batch);
    const Eigen::ArrayXd e = batch.gradient.colwise().norm().array() - 1.0;
    return e.square().mean();
}

double mask_loss(std::span<const double> opacity, std::span<const double> labels) {
    std::vector<double> unused;
    return mask_loss_grad(opacity, labels, unused);
}

double mask_loss_grad(std::span<const double> opacity, std::span<const double> labels, std::vector<double>& adj) {
    require_same(opacity.size(), labels.size(), "mask_loss");
    adj.assign(opacity.size(), 0.0);
    if (opacity.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(opacity.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < opacity.size(); ++i) {
        const double y = labels[i];
        if (y != 0.0 && y != 1.0) throw ValidationError("mask labels must be 0 or 1");
        const double p = std::clamp(opacity[i], kMaskClamp, 1.0 - kMaskClamp);
        sum += -(y * std::log(p) + (1.0 - y) * std::log(1.0 - p));
        if (opacity[i] > kMaskClamp && opacity[i] < 1.0 - kMaskClamp) adj[i] = inv * (-y / p + (1.0 - y) / (1.0 - p));
    }
    return sum * inv;
}

ScaleShift solve_scale_shift(std::span<const double> pred, std::span<const double> prior) {
    require_same(pred.size(), prior.size(), "solve_scale_shift");
    if (pred.empty()) throw ValidationError("scale/shift fit needs at least one ray");
    const double n = static_cast<double>(pred.size());
    double mean_p = 0.0, mean_d = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        mean_p += pred[i];
        mean_d += prior[i];
    }
    mean_p /= n;
    mean_d /= n;
    double var = 0.0, cov = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        var += (pred[i] - mean_p) * (pred[i] - mean_p);
        cov += (pred[i] - mean_p) * (prior[i] - mean_d);
    }
    var /= n;
    cov /= n;
    if (pred.size() < 2 || var <= 1e-12) return {1.0, mean_d - mean_p, true};
    const double w = cov / var;
    return {w, mean_d - w * mean_p, false};
}

double depth_loss(std::span<const double> pred, std::span<const double> prior, ScaleShift* fit) {
    std::vector<double> unused;
    return depth_loss_grad(pred, prior, unused, fit);
}

double depth_loss_grad(std::span<const double> pred, std::span<const double> prior, std::vector<double>& adj,
                       ScaleShift* fit) {
    adj.assign(pred.size(), 0.0);
    if (pred.empty()) {
        if (fit) *fit = ScaleShift{};
        return 0.0;
    }
    const ScaleShift ss = solve_scale_shift(pred, prior);
    if (fit) *fit = ss;
    const double inv = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double r = ss.scale * pred[i] + ss.shift - prior[i];
        sum += r * r;
        adj[i] = inv * 2.0 * r * ss.scale;
    }
    return sum * inv;
}

double normal_loss(std::span<const Vec3> pred, std::span<const Vec3> prior) {
    std::vector<Vec3> unused;
    return normal_loss_grad(pred, prior, unused);
}

double normal_loss_grad(std::span<const Vec3> pred, std::span<const Vec3> prior, std::vector<Vec3>& adj_pred) {
    require_same(pred.size(), prior.size(), "normal_loss");
    adj_pred.assign(pred.size(), Vec3::Zero());
    if (pred.empty()) return 0.0;
    const double inv = 1.0 / static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double len = pred[i].norm();
        const double prior_len = prior[i].norm();
        if (len == 0.0 || prior_len == 0.0) throw ValidationError("normal_loss needs nonzero normals");
        const Vec3 n = pred[i] / len;
        const Vec3 p = prior[i] / prior_len;
        const Vec3 d = n - p;
        const double cos_term = 1.0 - n.dot(p);
        sum += d.cwiseAbs().sum() + std::abs(cos_term);
        const Vec3 adj_n = Vec3(sign(d.x()), sign(d.y()), sign(d.z())) - sign(cos_term) * p;
        adj_pred[i] = inv * (adj_n - n * n.dot(adj_n)) / len;
    }
    return sum * inv;
}

}  // namespace uwsdf
