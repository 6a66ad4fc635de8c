#include "uwsdf/synth.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/geometry.hpp"
#include "uwsdf/parallel.hpp"
#include "uwsdf/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>

namespace uwsdf {

namespace fs = std::filesystem;

void SynthSceneSpec::validate() const {
    if (camera_count < 2) throw ValidationError("synthetic scene needs at least two cameras");
    if (width < 1 || height < 1) throw ValidationError("image size must be positive");
    if (!(fov_deg > 0 && fov_deg < 180)) throw ValidationError("field of view must lie in (0, 180) degrees");
    if (!(bound_radius > 0)) throw ValidationError("bound radius must be positive");
    if (!(camera_radius > bound_radius)) throw ValidationError("cameras must sit outside the object bound");
    if ((tint.attenuation.array() < 0).any()) throw ValidationError("tint attenuation must be nonnegative");
    if (depth_noise_std < 0 || normal_noise_std < 0) throw ValidationError("noise std must be nonnegative");
}

CameraRecord look_at_camera(const Vec3& eye, const Vec3& target, const Vec3& up, int width, int height,
                            double fov_deg) {
    const Vec3 forward = (target - eye).normalized();
    Vec3 right = forward.cross(up);
    if (right.norm() < 1e-9) right = forward.cross(Vec3::UnitX());
    right.normalize();
    const Vec3 back = -forward;
    const Vec3 y_axis = back.cross(right);

    CameraRecord cam;
    cam.width = width;
    cam.height = height;
    cam.fx = 0.5 * width / std::tan(0.5 * fov_deg * std::numbers::pi / 180.0);
    cam.fy = cam.fx;
    cam.cx = 0.5 * width;
    cam.cy = 0.5 * height;
    cam.world_from_camera.setIdentity();
    cam.world_from_camera.block<3, 1>(0, 0) = right;
    cam.world_from_camera.block<3, 1>(0, 1) = y_axis;
    cam.world_from_camera.block<3, 1>(0, 2) = back;
    cam.world_from_camera.block<3, 1>(0, 3) = eye;
    return cam;
}

std::vector<CameraRecord> camera_ring(const SynthSceneSpec& spec) {
    spec.validate();
    std::vector<CameraRecord> cams;
    const double elev = spec.elevation_deg * std::numbers::pi / 180.0;
    for (int i = 0; i < spec.camera_count; ++i) {
        const double az = 2.0 * std::numbers::pi * i / spec.camera_count;
        const double e = (i % 2 == 0) ? elev : -elev;
        const Vec3 eye = spec.camera_radius * Vec3(std::cos(e) * std::cos(az), std::sin(e), std::cos(e) * std::sin(az));
        cams.push_back(look_at_camera(eye, Vec3::Zero(), Vec3::UnitY(), spec.width, spec.height, spec.fov_deg));
    }
    return cams;
}

TraceHit sphere_trace(const AnalyticField& field, const Ray& ray, double bound_radius) {
    TraceHit out;
    const auto bounds = ray_sphere_bounds(ray, bound_radius);
    if (!bounds) return out;
    double t = bounds->t_near;
    for (int step = 0; step < 64; ++step) {
        const Vec3 p = ray.at(t);
        const double s = analytic_sdf(field, p);
        if (std::abs(s) < 1e-6) {
            out.hit = true;
            out.t = t;
            out.point = p;
            return out;
        }
        t += s;
        if (t > bounds->t_far) break;
    }
    return out;
}

std::pair<ImageBuffer, PriorBundle> render_view(const SynthSceneSpec& spec, const CameraRecord& cam,
                                                std::size_t view_index) {
    spec.validate();
    const int w = cam.width, h = cam.height;
    ImageBuffer img(w, h, 3);
    PriorBundle priors;
    priors.mask = BinaryMask(w, h);
    priors.depth.assign(static_cast<std::size_t>(w) * h, 0.0f);
    priors.normal.assign(static_cast<std::size_t>(w) * h, Vec3::Zero());
    Rng noise(derive_seed(spec.seed, view_index));

    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x) {
            const std::size_t p = static_cast<std::size_t>(y) * w + x;
            const Ray ray = ray_for_pixel(cam, x, y);
            const TraceHit hit = sphere_trace(spec.field, ray, spec.bound_radius);
            Vec3 color = spec.background;
            if (hit.hit) {
                const Vec3 n = analytic_gradient(spec.field, hit.point).normalized();
                color = analytic_shade(spec.field, hit.point, n);
                if (spec.apply_tint) {
                    const Vec3 transmit = (-spec.tint.attenuation * hit.t).array().exp().matrix();
                    color = color.cwiseProduct(transmit) + spec.tint.haze.cwiseProduct(Vec3::Ones() - transmit);
                }
                priors.mask.set(x, y, true);
                double depth = hit.t;
                Vec3 normal = n;
                if (spec.depth_noise_std > 0) depth += spec.depth_noise_std * noise.normal();
                if (spec.normal_noise_std > 0) {
                    const double nx = noise.normal(), ny = noise.normal(), nz = noise.normal();
                    normal = (normal + spec.normal_noise_std * Vec3(nx, ny, nz)).normalized();
                }
                priors.depth[p] = static_cast<float>(depth);
                priors.normal[p] = normal;
            }
            for (int c = 0; c < 3; ++c) img.at(x, y, c) = static_cast<float>(std::clamp(color(c), 0.0, 1.0));
        }
    return {std::move(img), std::move(priors)};
}

namespace {

std::string view_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu", i);
    return buf;
}

const char* kind_name(AnalyticField::Kind k) {
    switch (k) {
        case AnalyticField::Kind::Sphere: return "sphere";
        case AnalyticField::Kind::Box: return "box";
        case AnalyticField::Kind::Torus: return "torus";
    }
    return "unknown";
}

}  // namespace

Dataset generate_dataset(const SynthSceneSpec& spec, const fs::path& out_dir) {
    spec.validate();
    const auto cams = camera_ring(spec);
    std::vector<std::pair<ImageBuffer, PriorBundle>> rendered(cams.size());
    parallel_for(cams.size(), [&](std::size_t i) { rendered[i] = render_view(spec, cams[i], i); });

    std::error_code ec;
    for (const char* sub : {"images", "masks", "depth", "normal"}) {
        fs::create_directories(out_dir / sub, ec);
        if (ec) throw IoError("cannot create " + (out_dir / sub).string() + ": " + ec.message());
    }

    nlohmann::json views = nlohmann::json::array();
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const std::string name = view_name(i);
        const auto& [img, priors] = rendered[i];
        const int w = img.width, h = img.height;
        write_image(img, out_dir / "images" / (name + ".ppm"));

        ImageBuffer mask(w, h, 1);
        for (std::size_t p = 0; p < mask.values.size(); ++p) mask.values[p] = priors.mask.data[p] ? 1.0f : 0.0f;
        write_image(mask, out_dir / "masks" / (name + ".pgm"));

        write_tensor(Tensor({static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w)}, priors.depth),
                     out_dir / "depth" / (name + ".uwtf"));

        const Mat3 camera_from_world = cams[i].rotation().transpose();
        Tensor normals({static_cast<std::uint32_t>(h), static_cast<std::uint32_t>(w), 3u});
        for (std::size_t p = 0; p < priors.normal.size(); ++p) {
            const Vec3 n = camera_from_world * priors.normal[p];
            for (int c = 0; c < 3; ++c) normals.data[3 * p + c] = static_cast<float>(n(c));
        }
        write_tensor(normals, out_dir / "normal" / (name + ".uwtf"));

        views.push_back({{"name", name},
                         {"image", "images/" + name + ".ppm"},
                         {"mask", "masks/" + name + ".pgm"},
                         {"depth", "depth/" + name + ".uwtf"},
                         {"normal", "normal/" + name + ".uwtf"}});
    }
    write_pose_file(cams, out_dir / "poses.txt");

    nlohmann::json manifest = {{"poses", "poses.txt"},
                               {"normal_frame", "camera"},
                               {"scene",
                                {{"field", kind_name(spec.field.kind)},
                                 {"seed", spec.seed},
                                 {"camera_count", spec.camera_count},
                                 {"camera_radius", spec.camera_radius},
                                 {"tinted", spec.apply_tint}}},
                               {"views", views}};
    std::ofstream out(out_dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (out_dir / "manifest.json").string());
    out << manifest.dump(2) << '\n';
    out.close();
    return load_dataset(out_dir);
}

ImageBuffer enhance_grayworld(const ImageBuffer& img) {
    if (img.channels != 3) throw ShapeError("gray-world enhancement expects an RGB image");
    const std::size_t n = img.pixel_count();
    if (n == 0) return img;
    Vec3 mean = Vec3::Zero();
    for (std::size_t p = 0; p < n; ++p)
        for (int c = 0; c < 3; ++c) mean(c) += img.values[3 * p + c];
    mean /= static_cast<double>(n);
    const double luminance = 0.299 * mean(0) + 0.587 * mean(1) + 0.114 * mean(2);
    Vec3 gain;
    for (int c = 0; c < 3; ++c) gain(c) = mean(c) > 0 ? luminance / mean(c) : 1.0;
    ImageBuffer out = img;
    for (std::size_t p = 0; p < n; ++p)
        for (int c = 0; c < 3; ++c)
            out.values[3 * p + c] = static_cast<float>(std::clamp(img.values[3 * p + c] * gain(c), 0.0, 1.0));
    return out;
}

Enhancer enhancer_by_name(const std::string& name) {
    if (name == "identity") return [](const ImageBuffer& img) { return img; };
    if (name == "grayworld") return enhance_grayworld;
    throw ConfigError("unknown enhancer '" + name + "' (expected identity or grayworld)");
}

}  // namespace uwsdf
