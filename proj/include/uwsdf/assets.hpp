#pragma once

#include "uwsdf/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uwsdf {

// Dense float32 array. On disk ("UWTF"): 4 magic bytes, u32 ndim, ndim x u32 dims,
// then the row-major payload, all little-endian.
struct Tensor {
    std::vector<std::uint32_t> dims;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<std::uint32_t> d, std::vector<float> values);
    explicit Tensor(std::vector<std::uint32_t> d);

    [[nodiscard]] std::size_t element_count() const;
    // Throws ValidationError if dims are empty, contain a zero, or disagree with data.size().
    void validate() const;

    friend bool operator==(const Tensor&, const Tensor&) = default;
};

Tensor read_tensor(const std::filesystem::path& path);
void write_tensor(const Tensor& t, const std::filesystem::path& path);

// Interleaved pixel values in [0,1], row-major, `channels` floats per pixel.
struct ImageBuffer {
    int width = 0;
    int height = 0;
    int channels = 0;
    std::vector<float> values;

    ImageBuffer() = default;
    ImageBuffer(int w, int h, int c, float fill = 0.0f);

    float& at(int x, int y, int c = 0) { return values[(static_cast<std::size_t>(y) * width + x) * channels + c]; }
    [[nodiscard]] float at(int x, int y, int c = 0) const {
        return values[(static_cast<std::size_t>(y) * width + x) * channels + c];
    }
    [[nodiscard]] std::size_t pixel_count() const { return static_cast<std::size_t>(width) * height; }
};

// Binary PPM (P6) or PGM (P5) with maxval 255.
ImageBuffer read_image(const std::filesystem::path& path);
void write_image(const ImageBuffer& img, const std::filesystem::path& path);

// Pinhole camera. world_from_camera maps camera-space points (looking down -z, y down) to world.
struct CameraRecord {
    double fx = 1.0;
    double fy = 1.0;
    double cx = 0.0;
    double cy = 0.0;
    Mat4 world_from_camera = Mat4::Identity();
    int width = 1;
    int height = 1;

    [[nodiscard]] Vec3 center() const { return world_from_camera.block<3, 1>(0, 3); }
    [[nodiscard]] Mat3 rotation() const { return world_from_camera.block<3, 3>(0, 0); }
};

// Text format, per camera: "fx fy cx cy w h" followed by four rows of world_from_camera.
std::vector<CameraRecord> read_pose_file(const std::filesystem::path& path);
void write_pose_file(const std::vector<CameraRecord>& cams, const std::filesystem::path& path);

// Wavefront OBJ subset: "v x y z" and "f i j k" (1-based). Other lines are ignored on read.
void write_mesh_obj(const TriangleMesh& mesh, const std::filesystem::path& path);
TriangleMesh read_mesh_obj(const std::filesystem::path& path);

struct PipelineConfig {
    // Loss weights: eikonal, foreground mask, depth, normal.
    double lambda1 = 0.1;
    double lambda2 = 0.5;
    double lambda3 = 0.1;
    double lambda4 = 0.05;

    double learning_rate = 5e-4;
    double final_learning_rate = 5e-5;
    int iterations = 2000;
    int samples_per_ray = 64;
    int eval_samples_per_ray = 128;
    int batch_size = 512;
    double beta_init = 0.1;
    double beta_floor = 1e-4;
    int grid_resolution = 64;
    std::uint64_t seed = 0;

    double fg_fraction = 0.8;
    int bbox_dilation = 16;
    double eikonal_near_std = 0.05;
    double bound_radius = 1.0;
    std::array<double, 3> background{0.0, 0.0, 0.0};
    int checkpoint_every = 1000;

    int sdf_hidden_layers = 4;
    int sdf_width = 128;
    int feature_width = 64;
    int radiance_hidden_layers = 2;
    int radiance_width = 64;
    int position_frequencies = 6;
    int direction_frequencies = 4;
    double init_radius = 0.5;
    double softplus_beta = 100.0;

    std::string dataset_dir;
    std::string output_dir;

    // Throws ConfigError on any out-of-range value.
    void validate() const;
};

// Flat JSON object; missing keys keep defaults, unknown keys are reported through `warnings`
// (or std::clog when null). Type mismatches and invalid values raise ConfigError.
PipelineConfig load_config(const std::filesystem::path& path, std::vector<std::string>* warnings = nullptr);
PipelineConfig config_from_json_text(const std::string& text, std::vector<std::string>* warnings = nullptr);
std::string config_to_json_text(const PipelineConfig& cfg);

}  // namespace uwsdf
