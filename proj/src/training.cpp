#include "uwsdf/training.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/geometry.hpp"
#include "uwsdf/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <iostream>
#include <numbers>

namespace uwsdf {

namespace fs = std::filesystem;
using nlohmann::json;

void Dataset::validate() const {
    if (views.empty()) throw ValidationError("dataset has no views");
    const bool depth = views.front().priors.has_depth();
    const bool normal = views.front().priors.has_normal();
    for (const auto& v : views) {
        const std::size_t pixels = v.image.pixel_count();
        if (v.image.width != v.camera.width || v.image.height != v.camera.height)
            throw ValidationError("view " + v.name + ": image size differs from camera");
        if (v.priors.mask.width != v.image.width || v.priors.mask.height != v.image.height)
            throw ValidationError("view " + v.name + ": mask size differs from image");
        for (auto m : v.priors.mask.data)
            if (m > 1) throw ValidationError("view " + v.name + ": mask is not binary");
        if (v.priors.has_depth() != depth || v.priors.has_normal() != normal)
            throw ValidationError("views disagree on prior availability");
        if (depth && v.priors.depth.size() != pixels) throw ValidationError("view " + v.name + ": depth size mismatch");
        if (normal && v.priors.normal.size() != pixels)
            throw ValidationError("view " + v.name + ": normal size mismatch");
    }
}

Dataset load_dataset(const fs::path& dir) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("missing dataset manifest in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("bad dataset manifest: ") + e.what());
    }
    const auto cams = read_pose_file(dir / manifest.value("poses", std::string("poses.txt")));
    const auto& views = manifest.at("views");
    if (views.size() != cams.size()) throw FormatError("manifest view count differs from pose count");
    const bool camera_frame = manifest.value("normal_frame", std::string("camera")) == "camera";

    Dataset ds;
    for (std::size_t i = 0; i < views.size(); ++i) {
        const auto& entry = views[i];
        DatasetView v;
        v.name = entry.at("name").get<std::string>();
        v.camera = cams[i];
        v.image = read_image(dir / entry.at("image").get<std::string>());
        const ImageBuffer mask = read_image(dir / entry.at("mask").get<std::string>());
        if (mask.channels != 1) throw FormatError("mask " + v.name + " must be a PGM");
        v.priors.mask = BinaryMask(mask.width, mask.height);
        for (std::size_t p = 0; p < mask.values.size(); ++p) v.priors.mask.data[p] = mask.values[p] >= 0.5f ? 1 : 0;

        if (entry.contains("depth")) {
            const Tensor t = read_tensor(dir / entry.at("depth").get<std::string>());
            if (t.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(v.image.height),
                                                      static_cast<std::uint32_t>(v.image.width)})
                throw ValidationError("depth map " + v.name + " has wrong shape");
            v.priors.depth = t.data;
        }
        if (entry.contains("normal")) {
            const Tensor t = read_tensor(dir / entry.at("normal").get<std::string>());
            if (t.dims != std::vector<std::uint32_t>{static_cast<std::uint32_t>(v.image.height),
                                                      static_cast<std::uint32_t>(v.image.width), 3u})
                throw ValidationError("normal map " + v.name + " has wrong shape");
            const Mat3 rot = v.camera.rotation();
            v.priors.normal.resize(v.image.pixel_count());
            for (std::size_t p = 0; p < v.priors.normal.size(); ++p) {
                Vec3 n(t.data[3 * p], t.data[3 * p + 1], t.data[3 * p + 2]);
                if (camera_frame) n = rot * n;
                const double len = n.norm();
                v.priors.normal[p] = len > 1e-6 ? Vec3(n / len) : Vec3::Zero();
            }
        }
        ds.views.push_back(std::move(v));
    }
    ds.validate();
    return ds;
}

namespace {

struct ViewPixels {
    std::size_t view;
    std::vector<std::uint32_t> fg;
    std::vector<std::uint32_t> bg;
};

ViewPixels classify_pixels(const DatasetView& v, std::size_t index, int dilation) {
    ViewPixels px{index, {}, {}};
    const auto& mask = v.priors.mask;
    int x0 = mask.width, y0 = mask.height, x1 = -1, y1 = -1;
    for (int y = 0; y < mask.height; ++y)
        for (int x = 0; x < mask.width; ++x)
            if (mask.at(x, y)) {
                px.fg.push_back(static_cast<std::uint32_t>(y * mask.width + x));
                x0 = std::min(x0, x);
                y0 = std::min(y0, y);
                x1 = std::max(x1, x);
                y1 = std::max(y1, y);
            }
    if (px.fg.empty()) return px;
    x0 = std::max(0, x0 - dilation);
    y0 = std::max(0, y0 - dilation);
    x1 = std::min(mask.width - 1, x1 + dilation);
    y1 = std::min(mask.height - 1, y1 + dilation);
    for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x)
            if (!mask.at(x, y)) px.bg.push_back(static_cast<std::uint32_t>(y * mask.width + x));
    return px;
}

}  // namespace

RayBatch sample_pixel_batch(const Dataset& ds, int batch_size, double fg_fraction, int bbox_dilation,
                            std::uint64_t seed) {
    if (batch_size < 1) throw ValidationError("batch size must be >= 1");
    if (fg_fraction < 0 || fg_fraction > 1) throw ValidationError("fg_fraction must lie in [0,1]");
    RayBatch batch;
    batch.seed = seed;
    std::vector<ViewPixels> usable;
    for (std::size_t i = 0; i < ds.views.size(); ++i) {
        ViewPixels px = classify_pixels(ds.views[i], i, bbox_dilation);
        if (px.fg.empty()) {
            batch.warnings.push_back("ViewSkippedWarning: view '" + ds.views[i].name + "' has an empty mask");
            continue;
        }
        usable.push_back(std::move(px));
    }
    if (usable.empty()) throw EmptyMaskError("no view has foreground pixels");

    const auto n_fg = static_cast<std::size_t>(std::ceil(fg_fraction * batch_size - 1e-9));
    batch.rays.reserve(batch_size);
    for (std::size_t i = 0; i < static_cast<std::size_t>(batch_size); ++i) {
        Rng rng(derive_seed(seed, i));
        const ViewPixels& px = usable[rng.below(usable.size())];
        const double u = rng.uniform();
        const bool from_fg = i < n_fg || px.bg.empty();
        const auto& pool = from_fg ? px.fg : px.bg;
        const std::uint32_t pixel = pool[std::min(pool.size() - 1, static_cast<std::size_t>(u * pool.size()))];

        const DatasetView& view = ds.views[px.view];
        const int x = static_cast<int>(pixel % view.image.width);
        const int y = static_cast<int>(pixel / view.image.width);
        SupervisedRay sr;
        sr.ray = ray_for_pixel(view.camera, x, y);
        sr.view = static_cast<int>(px.view);
        sr.px = x;
        sr.py = y;
        for (int c = 0; c < 3; ++c) sr.color(c) = view.image.at(x, y, view.image.channels == 3 ? c : 0);
        sr.fg = from_fg ? 1.0 : 0.0;
        if (from_fg && view.priors.has_depth() && view.priors.depth[pixel] > 0) {
            sr.has_depth = true;
            sr.depth = view.priors.depth[pixel];
        }
        if (from_fg && view.priors.has_normal() && view.priors.normal[pixel].squaredNorm() > 0) {
            sr.has_normal = true;
            sr.normal = view.priors.normal[pixel];
        }
        batch.rays.push_back(sr);
    }
    return batch;
}

OptimizerState make_optimizer(std::size_t parameter_count, double learning_rate) {
    OptimizerState s;
    s.first_moment = VectorXd::Zero(static_cast<Eigen::Index>(parameter_count));
    s.second_moment = VectorXd::Zero(static_cast<Eigen::Index>(parameter_count));
    s.learning_rate = learning_rate;
    return s;
}

void adam_step(VectorXd& params, const VectorXd& grads, OptimizerState& state) {
    if (params.size() != grads.size() || params.size() != state.first_moment.size() ||
        params.size() != state.second_moment.size())
        throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
    ++state.step;
    state.first_moment = state.beta1 * state.first_moment + (1.0 - state.beta1) * grads;
    state.second_moment = state.beta2 * state.second_moment + (1.0 - state.beta2) * grads.cwiseAbs2();
    const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.step));
    const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.step));
    params.array() -= state.learning_rate * (state.first_moment.array() / c1) /
                      ((state.second_moment.array() / c2).sqrt() + state.epsilon);
}

double learning_rate_at(const PipelineConfig& cfg, int iteration) {
    if (cfg.iterations <= 0) return cfg.learning_rate;
    const double progress = std::clamp(static_cast<double>(iteration) / cfg.iterations, 0.0, 1.0);
    return cfg.final_learning_rate +
           0.5 * (cfg.learning_rate - cfg.final_learning_rate) * (1.0 + std::cos(std::numbers::pi * progress));
}

ModelShape model_shape_from_config(const PipelineConfig& cfg) {
    ModelShape shape;
    shape.sdf.hidden_layers = cfg.sdf_hidden_layers;
    shape.sdf.width = cfg.sdf_width;
    shape.sdf.feature_width = cfg.feature_width;
    shape.sdf.frequencies = cfg.position_frequencies;
    shape.sdf.init_radius = cfg.init_radius;
    shape.sdf.softplus_beta = cfg.softplus_beta;
    shape.radiance.hidden_layers = cfg.radiance_hidden_layers;
    shape.radiance.width = cfg.radiance_width;
    shape.radiance.feature_width = cfg.feature_width;
    shape.radiance.frequencies = cfg.direction_frequencies;
    shape.beta_init = cfg.beta_init;
    return shape;
}

std::string log_entry_json(const TrainLogEntry& e) {
    const json j = {{"iteration", e.iteration},
                    {"total", e.report.total},
                    {"rgb", e.report.rgb},
                    {"eikonal", e.report.eikonal},
                    {"fg", e.report.fg},
                    {"depth", e.report.depth},
                    {"normal", e.report.normal},
                    {"scale", e.report.scale},
                    {"shift", e.report.shift},
                    {"beta", e.beta},
                    {"wall_time", e.wall_seconds}};
    return j.dump();
}

namespace {

Tensor flat_tensor(const VectorXd& v) {
    Tensor t({static_cast<std::uint32_t>(std::max<Eigen::Index>(1, v.size()))});
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v(i));
    return t;
}

VectorXd tensor_flat(const Tensor& t, std::size_t expected) {
    if (t.data.size() != expected) throw FormatError("optimizer state size mismatch");
    VectorXd v(static_cast<Eigen::Index>(expected));
    for (std::size_t i = 0; i < expected; ++i) v(static_cast<Eigen::Index>(i)) = t.data[i];
    return v;
}

void save_checkpoint(const fs::path& dir, const Model& model, const OptimizerState& opt, int iteration,
                     const PipelineConfig& cfg) {
    const json extra = {{"iteration", iteration},
                        {"optimizer",
                         {{"step", opt.step},
                          {"first_moment", "adam_m.uwtf"},
                          {"second_moment", "adam_v.uwtf"}}},
                        {"config", json::parse(config_to_json_text(cfg))}};
    save_model(model, dir, extra.dump());
    write_tensor(flat_tensor(opt.first_moment), dir / "adam_m.uwtf");
    write_tensor(flat_tensor(opt.second_moment), dir / "adam_v.uwtf");
}

}  // namespace

TrainResult train(const Dataset& ds, const PipelineConfig& cfg, const TrainOptions& options) {
    cfg.validate();
    ds.validate();
    TrainResult result;
    result.model = create_model(model_shape_from_config(cfg), cfg.seed);
    OptimizerState opt = make_optimizer(result.model.parameter_count(), cfg.learning_rate);
    int start = 0;

    if (options.resume && options.checkpoint_dir && fs::exists(*options.checkpoint_dir / "manifest.json")) {
        std::string extra_text;
        result.model = load_model(*options.checkpoint_dir, &extra_text);
        const json extra = json::parse(extra_text);
        start = extra.value("iteration", 0);
        const std::size_t count = result.model.parameter_count();
        opt = make_optimizer(count, cfg.learning_rate);
        if (extra.contains("optimizer")) {
            opt.step = extra["optimizer"].value("step", 0);
            opt.first_moment = tensor_flat(read_tensor(*options.checkpoint_dir / "adam_m.uwtf"), count);
            opt.second_moment = tensor_flat(read_tensor(*options.checkpoint_dir / "adam_v.uwtf"), count);
        }
    }

    std::ofstream log_file;
    if (options.log_path) {
        log_file.open(*options.log_path, std::ios::app);
        if (!log_file) throw IoError("cannot open training log " + options.log_path->string());
    }
    const auto t0 = std::chrono::steady_clock::now();
    bool warned = false;
    VectorXd params = result.model.flatten();
    for (int it = start; it < cfg.iterations; ++it) {
        const std::uint64_t batch_seed = derive_seed(cfg.seed, static_cast<std::uint64_t>(it) + 1);
        const RayBatch batch = sample_pixel_batch(ds, cfg.batch_size, cfg.fg_fraction, cfg.bbox_dilation, batch_seed);
        if (!warned && options.progress)
            for (const auto& w : batch.warnings) *options.progress << "warning: " << w << '\n';
        warned = true;

        const GradientResult g = compute_gradients(result.model, batch, cfg);
        opt.learning_rate = learning_rate_at(cfg, it);
        adam_step(params, g.gradient.flatten(), opt);
        params(params.size() - 1) = std::max(params(params.size() - 1), cfg.beta_floor);
        result.model.assign(params);
        if (!result.model.all_finite()) throw NumericError("parameters became non-finite at iteration " + std::to_string(it));

        TrainLogEntry entry{it + 1, g.report, result.model.beta,
                            std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count()};
        if (log_file) log_file << log_entry_json(entry) << '\n';
        if (options.progress && ((it + 1) % options.progress_every == 0 || it + 1 == cfg.iterations))
            *options.progress << "iter " << entry.iteration << " loss " << entry.report.total << " rgb "
                              << entry.report.rgb << " beta " << entry.beta << '\n';
        result.log.push_back(entry);
        result.iterations_done = it + 1;
        if (options.checkpoint_dir && (it + 1) % cfg.checkpoint_every == 0)
            save_checkpoint(*options.checkpoint_dir, result.model, opt, it + 1, cfg);
    }
    result.iterations_done = std::max(result.iterations_done, start);
    if (options.checkpoint_dir) save_checkpoint(*options.checkpoint_dir, result.model, opt, result.iterations_done, cfg);
    return result;
}

}  // namespace uwsdf
