#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/field.hpp"
#include "uwsdf/losses.hpp"

#include <chrono>
#include <filesystem>
#include <functional>
#include <optional>
#include <ostream>
#include <vector>

namespace uwsdf {

// Per-view priors. Depth and normal maps are optional; invalid pixels carry depth 0 /
// a zero normal. Normals are stored in world frame.
struct PriorBundle {
    BinaryMask mask;
    std::vector<float> depth;
    std::vector<Vec3> normal;

    [[nodiscard]] bool has_depth() const { return !depth.empty(); }
    [[nodiscard]] bool has_normal() const { return !normal.empty(); }
};

struct DatasetView {
    std::string name;
    ImageBuffer image;
    CameraRecord camera;
    PriorBundle priors;
};

struct Dataset {
    std::vector<DatasetView> views;

    // Throws ValidationError when a view breaks the shared-prior or dimension invariants.
    void validate() const;
};

// Reads the directory layout written by generate_dataset (manifest.json, poses.txt,
// images/, masks/, depth/, normal/). Camera-frame normals are rotated to world frame.
Dataset load_dataset(const std::filesystem::path& dir);

// ceil(fg_fraction * batch_size) rays from foreground pixels, the rest from background pixels
// inside the foreground bounding box dilated by `bbox_dilation` pixels. Views with an empty
// mask are skipped and reported in batch.warnings.
RayBatch sample_pixel_batch(const Dataset& ds, int batch_size, double fg_fraction, int bbox_dilation,
                            std::uint64_t seed);

struct GradientResult {
    Model gradient;  // same layout as the model
    LossReport report;
};

// Exact gradients of total_loss with respect to every network parameter and beta. Throws
// NumericError naming the offending term when the loss is not finite.
GradientResult compute_gradients(const Model& model, const RayBatch& batch, const PipelineConfig& cfg);

struct OptimizerState {
    VectorXd first_moment;
    VectorXd second_moment;
    std::int64_t step = 0;
    double learning_rate = 5e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
};

OptimizerState make_optimizer(std::size_t parameter_count, double learning_rate);

// Bias-corrected Adam update in place.
void adam_step(VectorXd& params, const VectorXd& grads, OptimizerState& state);

// Cosine decay from cfg.learning_rate to cfg.final_learning_rate over cfg.iterations.
double learning_rate_at(const PipelineConfig& cfg, int iteration);

struct TrainLogEntry {
    int iteration = 0;
    LossReport report;
    double beta = 0.0;
    double wall_seconds = 0.0;
};

struct TrainOptions {
    std::optional<std::filesystem::path> checkpoint_dir;  // written every cfg.checkpoint_every and at the end
    std::optional<std::filesystem::path> log_path;        // JSON lines, appended
    bool resume = false;                                  // continue from checkpoint_dir when present
    std::ostream* progress = nullptr;
    int progress_every = 100;
};

struct TrainResult {
    Model model;
    std::vector<TrainLogEntry> log;
    int iterations_done = 0;
};

ModelShape model_shape_from_config(const PipelineConfig& cfg);

TrainResult train(const Dataset& ds, const PipelineConfig& cfg, const TrainOptions& options = {});

std::string log_entry_json(const TrainLogEntry& e);

}  // namespace uwsdf
