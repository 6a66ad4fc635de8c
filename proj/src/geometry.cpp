#include "uwsdf/geometry.hpp"
#include "uwsdf/errors.hpp"

#include <cmath>

namespace uwsdf {

Ray ray_for_pixel(const CameraRecord& cam, double px, double py) {
    if (!(px >= 0 && px < cam.width && py >= 0 && py < cam.height))
        throw BoundsError("pixel (" + std::to_string(px) + ", " + std::to_string(py) + ") outside " +
                          std::to_string(cam.width) + "x" + std::to_string(cam.height));
    const Vec3 dir_cam((px + 0.5 - cam.cx) / cam.fx, (py + 0.5 - cam.cy) / cam.fy, -1.0);
    Ray ray;
    ray.origin = cam.center();
    ray.direction = (cam.rotation() * dir_cam).normalized();
    return ray;
}

std::optional<std::pair<double, double>> project_point(const CameraRecord& cam, const Vec3& world) {
    const Vec3 p = cam.rotation().transpose() * (world - cam.center());
    if (p.z() >= 0) return std::nullopt;
    const double depth = -p.z();
    return std::pair{cam.fx * p.x() / depth + cam.cx, cam.fy * p.y() / depth + cam.cy};
}

std::pair<std::vector<CameraRecord>, SceneTransform> normalize_scene(const std::vector<CameraRecord>& cams,
                                                                      double target_radius) {
    if (cams.size() < 2) throw DegenerateSceneError("scene normalization needs at least two cameras");
    if (!(target_radius > 0)) throw ValidationError("target radius must be positive");
    Vec3 centroid = Vec3::Zero();
    for (const auto& c : cams) centroid += c.center();
    centroid /= static_cast<double>(cams.size());
    double max_dist = 0;
    for (const auto& c : cams) max_dist = std::max(max_dist, (c.center() - centroid).norm());
    if (max_dist < 1e-12) throw DegenerateSceneError("all camera centers coincide");

    SceneTransform xf;
    xf.translation = -centroid;
    xf.scale = target_radius / max_dist;
    std::vector<CameraRecord> out = cams;
    for (auto& c : out) c.world_from_camera.block<3, 1>(0, 3) = xf.apply(c.center());
    return {out, xf};
}

std::optional<RayInterval> ray_sphere_bounds(const Ray& ray, double radius) {
    if (!(radius > 0)) throw ValidationError("sphere radius must be positive");
    // |o + t v|^2 = r^2 with |v| = 1
    const double b = ray.origin.dot(ray.direction);
    const double c = ray.origin.squaredNorm() - radius * radius;
    const double disc = b * b - c;
    if (disc <= 0) return std::nullopt;
    const double root = std::sqrt(disc);
    // Numerically stable pair of roots.
    const double q = b > 0 ? -(b + root) : -(b - root);
    double t0 = q;
    double t1 = (q != 0) ? c / q : 0.0;
    if (t0 > t1) std::swap(t0, t1);
    if (t1 <= 0) return std::nullopt;
    return RayInterval{std::max(t0, 0.0), t1};
}

}  // namespace uwsdf
