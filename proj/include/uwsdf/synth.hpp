#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/field.hpp"
#include "uwsdf/training.hpp"

#include <filesystem>
#include <functional>
#include <string>
#include <utility>
#include <vector>

namespace uwsdf {

struct WaterTint {
    Vec3 attenuation = Vec3::Zero();  // per-channel, 1/scene units
    Vec3 haze = Vec3(0.1, 0.35, 0.45);
};

struct SynthSceneSpec {
    AnalyticField field = AnalyticField::sphere(0.5);
    int camera_count = 20;
    double camera_radius = 3.0;
    double elevation_deg = 30.0;  // cameras alternate between +elevation and -elevation
    int width = 64;
    int height = 64;
    double fov_deg = 30.0;  // horizontal
    bool apply_tint = false;
    WaterTint tint;
    double depth_noise_std = 0.0;
    double normal_noise_std = 0.0;
    Vec3 background = Vec3::Zero();
    double bound_radius = 1.0;
    std::uint64_t seed = 0;

    // Throws ValidationError.
    void validate() const;
};

// Cameras on a ring around the origin, each looking at the origin.
std::vector<CameraRecord> camera_ring(const SynthSceneSpec& spec);

// A camera at `eye` looking at `target`; image x follows the world-space right vector.
CameraRecord look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height, double fov_deg);

struct TraceHit {
    bool hit = false;
    double t = 0.0;
    Vec3 point = Vec3::Zero();
};

// Sphere tracing inside the bound sphere: 64 steps, converged when |s| < 1e-6.
TraceHit sphere_trace(const AnalyticField& field, const Ray& ray, double bound_radius);

// Color image plus world-frame priors. Background pixels carry mask 0, depth 0, zero normal.
// Noise in the spec perturbs the priors with a per-view seed stream (view_index).
std::pair<ImageBuffer, PriorBundle> render_view(const SynthSceneSpec& spec, const CameraRecord& cam,
                                                std::size_t view_index = 0);

// Writes images/, masks/, depth/, normal/ (camera frame), poses.txt, manifest.json and
// returns the dataset as load_dataset would read it.
Dataset generate_dataset(const SynthSceneSpec& spec, const std::filesystem::path& out_dir);

// Scales each channel so its mean equals the global luminance mean; clamps to [0, 1].
ImageBuffer enhance_grayworld(const ImageBuffer& img);

using Enhancer = std::function<ImageBuffer(const ImageBuffer&)>;
// "identity" or "grayworld"; throws ConfigError otherwise.
Enhancer enhancer_by_name(const std::string& name);

}  // namespace uwsdf
