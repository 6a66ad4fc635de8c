#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/types.hpp"

#include <optional>
#include <utility>
#include <vector>

namespace uwsdf {

struct Ray {
    Vec3 origin = Vec3::Zero();
    Vec3 direction = Vec3(0, 0, -1);  // unit length

    [[nodiscard]] Vec3 at(double t) const { return origin + t * direction; }
};

// Maps original coordinates to normalized ones: p' = scale * (p + translation).
struct SceneTransform {
    Vec3 translation = Vec3::Zero();
    double scale = 1.0;

    [[nodiscard]] Vec3 apply(const Vec3& p) const { return scale * (p + translation); }
    [[nodiscard]] Vec3 invert(const Vec3& p) const { return p / scale - translation; }
};

// Ray through the center of pixel (px, py). Throws BoundsError outside the image.
Ray ray_for_pixel(const CameraRecord& cam, double px, double py);

// Pixel coordinates (continuous, pixel centers at +0.5) of a world point, or nullopt when
// the point is behind the camera.
std::optional<std::pair<double, double>> project_point(const CameraRecord& cam, const Vec3& world);

// Recenters camera centers on their centroid and scales the farthest one to target_radius.
std::pair<std::vector<CameraRecord>, SceneTransform> normalize_scene(const std::vector<CameraRecord>& cams,
                                                                      double target_radius);

// Entry/exit parameters of an origin-centered sphere, clamped to t >= 0.
struct RayInterval {
    double t_near;
    double t_far;
};
std::optional<RayInterval> ray_sphere_bounds(const Ray& ray, double radius);

}  // namespace uwsdf
