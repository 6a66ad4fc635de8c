#include "uwsdf/assets.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/meshing.hpp"
#include "uwsdf/renderer.hpp"
#include "uwsdf/segmentation.hpp"
#include "uwsdf/synth.hpp"
#include "uwsdf/training.hpp"

#include <CLI11.hpp>
#include <json.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

namespace fs = std::filesystem;
using namespace uwsdf;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitNumeric = 1;
constexpr int kExitUsage = 2;

PipelineConfig resolve_config(const std::string& path, std::optional<std::uint64_t> seed, std::optional<int> iters) {
    PipelineConfig cfg;
    if (!path.empty()) {
        std::vector<std::string> warnings;
        cfg = load_config(path, &warnings);
        for (const auto& w : warnings) std::cerr << "warning: " << w << '\n';
    }
    if (seed) cfg.seed = *seed;
    if (iters) cfg.iterations = *iters;
    cfg.validate();
    return cfg;
}

// The config stored next to a checkpoint, or defaults when absent.
PipelineConfig checkpoint_config(const std::string& extra_text) {
    const auto extra = nlohmann::json::parse(extra_text);
    if (!extra.contains("config")) return PipelineConfig{};
    return config_from_json_text(extra["config"].dump());
}

std::string view_name(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "view_%03zu", i);
    return buf;
}

AnalyticField field_by_name(const std::string& shape, const std::string& albedo) {
    AnalyticField f;
    if (shape == "sphere")
        f = AnalyticField::sphere(0.5);
    else if (shape == "box")
        f = AnalyticField::box(Vec3(0.35, 0.35, 0.35));
    else if (shape == "torus")
        f = AnalyticField::torus(0.5, 0.2);
    else
        throw ConfigError("unknown shape '" + shape + "'");
    if (albedo == "striped")
        f.albedo_mode = AnalyticField::Albedo::Striped;
    else if (albedo != "constant")
        throw ConfigError("unknown albedo mode '" + albedo + "'");
    return f;
}

struct SynthArgs {
    std::string out;
    std::uint64_t seed = 0;
    int res = 64;
    int views = 20;
    std::string shape = "sphere";
    std::string albedo = "constant";
    bool tint = false;
    double depth_noise = 0.0;
    double normal_noise = 0.0;
    int gt_res = 128;
};

int run_synth(const SynthArgs& a) {
    SynthSceneSpec spec;
    spec.field = field_by_name(a.shape, a.albedo);
    spec.camera_count = a.views;
    spec.width = spec.height = a.res;
    spec.seed = a.seed;
    spec.apply_tint = a.tint;
    if (a.tint) spec.tint.attenuation = Vec3(0.6, 0.15, 0.1);
    spec.depth_noise_std = a.depth_noise;
    spec.normal_noise_std = a.normal_noise;
    const Dataset ds = generate_dataset(spec, a.out);
    const double r = spec.bound_radius;
    const TriangleMesh gt = marching_cubes(analytic_scalar_field(spec.field), Aabb{Vec3::Constant(-r), Vec3::Constant(r)}, a.gt_res);
    write_mesh_obj(gt, fs::path(a.out) / "gt.obj");
    std::cout << "wrote " << ds.views.size() << " views and gt.obj to " << a.out << '\n';
    return kExitOk;
}

struct TrainArgs {
    std::string config;
    std::string data;
    std::string out;
    std::optional<std::uint64_t> seed;
    std::optional<int> iters;
    bool resume = false;
    std::string enhance = "identity";
};

int run_train(const TrainArgs& a) {
    PipelineConfig cfg = resolve_config(a.config, a.seed, a.iters);
    const std::string data = a.data.empty() ? cfg.dataset_dir : a.data;
    const std::string out = a.out.empty() ? cfg.output_dir : a.out;
    if (data.empty()) throw ConfigError("no dataset directory (use --data or dataset_dir)");
    if (out.empty()) throw ConfigError("no output directory (use --out or output_dir)");
    Dataset ds = load_dataset(data);
    const Enhancer enhance = enhancer_by_name(a.enhance);
    for (auto& v : ds.views) v.image = enhance(v.image);

    fs::create_directories(out);
    TrainOptions opt;
    opt.checkpoint_dir = fs::path(out) / "checkpoint";
    opt.log_path = fs::path(out) / "train_log.jsonl";
    opt.resume = a.resume;
    opt.progress = &std::cout;
    if (!a.resume) fs::remove(*opt.log_path);
    const TrainResult r = train(ds, cfg, opt);
    std::cout << "trained to iteration " << r.iterations_done << ", checkpoint in " << opt.checkpoint_dir->string() << '\n';
    return kExitOk;
}

int run_mesh(const std::string& checkpoint, const std::string& out, int res) {
    std::string extra;
    const Model model = load_model(checkpoint, &extra);
    const PipelineConfig cfg = checkpoint_config(extra);
    const double r = cfg.bound_radius;
    const TriangleMesh mesh = marching_cubes(network_scalar_field(model.sdf), Aabb{Vec3::Constant(-r), Vec3::Constant(r)}, res);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_mesh_obj(mesh, out);
    std::cout << "wrote " << mesh.vertices.size() << " vertices, " << mesh.faces.size() << " faces to " << out << '\n';
    return kExitOk;
}

int run_eval(const std::string& recon, const std::string& gt, const std::string& out, std::size_t samples,
             std::uint64_t seed, std::optional<double> cap) {
    const TriangleMesh r = read_mesh_obj(recon);
    const TriangleMesh g = read_mesh_obj(gt);
    const MetricsReport rep = acc_comp(r, g, samples, seed, cap);
    if (fs::path(out).has_parent_path()) fs::create_directories(fs::path(out).parent_path());
    write_metrics_report(rep, out);
    std::cout << metrics_json(rep) << '\n';
    return kExitOk;
}

int run_render(const std::string& checkpoint, const std::string& poses, const std::string& out, std::uint64_t seed) {
    std::string extra;
    const Model model = load_model(checkpoint, &extra);
    if (!model.all_finite()) throw NumericError("checkpoint has non-finite parameters");
    const PipelineConfig cfg = checkpoint_config(extra);
    const auto cams = read_pose_file(poses);
    RenderSettings settings;
    settings.samples = cfg.eval_samples_per_ray;
    settings.bound_radius = cfg.bound_radius;
    settings.background = Vec3(cfg.background[0], cfg.background[1], cfg.background[2]);
    const FieldEvaluator field = network_evaluator(model.sdf, model.radiance);
    fs::create_directories(out);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        const RenderedView v = render_view_maps(field, cams[i], settings, model.beta, seed);
        const fs::path base = fs::path(out) / view_name(i);
        write_image(v.color, base.string() + "_color.ppm");
        write_image(v.normal, base.string() + "_normal.ppm");
        write_image(v.opacity, base.string() + "_opacity.pgm");
        Tensor depth({static_cast<std::uint32_t>(cams[i].height), static_cast<std::uint32_t>(cams[i].width)});
        depth.data = v.depth;
        write_tensor(depth, base.string() + "_depth.uwtf");
    }
    std::cout << "rendered " << cams.size() << " views to " << out << '\n';
    return kExitOk;
}

struct SegmentArgs {
    std::string mode = "toy";
    std::string ref_image;
    std::string ref_mask;
    std::vector<std::string> targets;
    std::string group;
    std::string images;
    std::string features;
    std::string rough;
    std::string out;
    std::size_t min_component = 16;
};

FeatureMap features_for(const SegmentArgs& a, const fs::path& image_path, const ImageBuffer& img) {
    if (a.mode == "toy") return extract_features_toy(img);
    const fs::path tensor = fs::path(a.features) / (image_path.stem().string() + ".uwtf");
    if (!fs::exists(tensor)) throw IoError("missing feature tensor " + tensor.string());
    return feature_map_from_tensor(read_tensor(tensor));
}

int run_segment(SegmentArgs a) {
    if (a.mode != "toy" && a.mode != "tensor") throw ConfigError("--mode must be toy or tensor");
    if (a.mode == "tensor" && a.features.empty()) throw ConfigError("tensor mode needs --features");
    if (!a.group.empty()) {
        const GroupManifest g = read_group_manifest(a.group);
        const fs::path dir = a.images.empty() ? fs::path(a.group).parent_path() : fs::path(a.images);
        a.ref_image = (dir / (g.reference_view + ".ppm")).string();
        for (const auto& t : g.target_views) a.targets.push_back((dir / (t + ".ppm")).string());
    }
    if (a.ref_image.empty() || a.ref_mask.empty()) throw ConfigError("need --ref-image and --ref-mask (or --group)");
    if (a.targets.empty()) throw ConfigError("no target views");

    const ImageBuffer ref = read_image(a.ref_image);
    const FeatureMap ref_features = features_for(a, a.ref_image, ref);
    const LocalFeatureSet local = crop_foreground_features(ref_features, read_mask(a.ref_mask));

    const fs::path out(a.out);
    fs::create_directories(out / "prompts");
    int optimized = 0;
    for (const auto& target : a.targets) {
        const fs::path path(target);
        const ImageBuffer img = read_image(path);
        const FeatureMap f = features_for(a, path, img);
        const PromptPair p = select_prompts(mean_confidence(f, local));
        const std::string id = path.stem().string();
        emit_prompt_file(p, id, out / "prompts" / (id + ".json"), img.width, img.height, f.width, f.height);
        if (!a.rough.empty()) {
            const fs::path rough = fs::path(a.rough) / (id + ".pgm");
            if (fs::exists(rough)) {
                fs::create_directories(out / "masks");
                write_mask(optimize_mask(read_mask(rough), {a.min_component}), out / "masks" / (id + ".pgm"));
                ++optimized;
            }
        }
    }
    std::cout << "wrote " << a.targets.size() << " prompt files and " << optimized << " optimized masks to " << a.out << '\n';
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-view SDF reconstruction toolkit"};
    app.require_subcommand(1);

    SynthArgs synth;
    auto* synth_cmd = app.add_subcommand("synth", "Generate a synthetic multi-view dataset");
    synth_cmd->add_option("--out", synth.out, "Output directory")->required();
    synth_cmd->add_option("--seed", synth.seed, "Noise seed");
    synth_cmd->add_option("--res", synth.res, "Image width and height")->check(CLI::Range(2, 4096));
    synth_cmd->add_option("--views", synth.views, "Number of cameras")->check(CLI::Range(2, 10000));
    synth_cmd->add_option("--shape", synth.shape, "sphere, box or torus");
    synth_cmd->add_option("--albedo", synth.albedo, "constant or striped");
    synth_cmd->add_flag("--tint", synth.tint, "Apply water attenuation and haze");
    synth_cmd->add_option("--depth-noise", synth.depth_noise, "Depth prior noise std");
    synth_cmd->add_option("--normal-noise", synth.normal_noise, "Normal prior noise std");
    synth_cmd->add_option("--gt-res", synth.gt_res, "Grid resolution of gt.obj")->check(CLI::Range(8, 1024));

    TrainArgs tr;
    std::uint64_t train_seed = 0;
    int train_iters = 0;
    auto* train_cmd = app.add_subcommand("train", "Train the SDF and radiance fields");
    train_cmd->add_option("--config", tr.config, "JSON config")->check(CLI::ExistingFile);
    train_cmd->add_option("--data", tr.data, "Dataset directory");
    train_cmd->add_option("--out", tr.out, "Output directory (checkpoint/, train_log.jsonl)");
    auto* seed_opt = train_cmd->add_option("--seed", train_seed, "Seed override");
    auto* iters_opt = train_cmd->add_option("--iters", train_iters, "Iteration override")->check(CLI::NonNegativeNumber);
    train_cmd->add_flag("--resume", tr.resume, "Continue from the checkpoint in --out");
    train_cmd->add_option("--enhance", tr.enhance, "Image enhancer: identity or grayworld");

    std::string mesh_ckpt, mesh_out;
    int mesh_res = 64;
    auto* mesh_cmd = app.add_subcommand("mesh", "Extract a mesh from a checkpoint");
    mesh_cmd->add_option("--checkpoint", mesh_ckpt, "Checkpoint directory")->required();
    mesh_cmd->add_option("--out", mesh_out, "Output OBJ")->required();
    mesh_cmd->add_option("--res", mesh_res, "Grid cells per axis")->check(CLI::Range(8, 1024));

    std::string eval_recon, eval_gt, eval_out;
    std::size_t eval_samples = 100000;
    std::uint64_t eval_seed = 0;
    std::optional<double> eval_cap;
    auto* eval_cmd = app.add_subcommand("eval", "Accuracy and completeness between two meshes");
    eval_cmd->add_option("--recon", eval_recon, "Reconstructed OBJ")->required();
    eval_cmd->add_option("--gt", eval_gt, "Ground-truth OBJ")->required();
    eval_cmd->add_option("--out", eval_out, "Report JSON")->required();
    eval_cmd->add_option("--samples", eval_samples, "Samples per mesh")->check(CLI::PositiveNumber);
    eval_cmd->add_option("--seed", eval_seed, "Sampling seed");
    eval_cmd->add_option("--cap", eval_cap, "Distance cap")->check(CLI::PositiveNumber);

    std::string render_ckpt, render_poses, render_out;
    std::uint64_t render_seed = 0;
    auto* render_cmd = app.add_subcommand("render", "Render color, depth, normal and opacity maps");
    render_cmd->add_option("--checkpoint", render_ckpt, "Checkpoint directory")->required();
    render_cmd->add_option("--poses", render_poses, "Pose file")->required();
    render_cmd->add_option("--out", render_out, "Output directory")->required();
    render_cmd->add_option("--seed", render_seed, "Sampling seed");

    SegmentArgs seg;
    auto* seg_cmd = app.add_subcommand("segment", "Prompt points and optimized masks for target views");
    seg_cmd->add_option("--mode", seg.mode, "toy or tensor");
    seg_cmd->add_option("--ref-image", seg.ref_image, "Reference image");
    seg_cmd->add_option("--ref-mask", seg.ref_mask, "Reference mask (PGM)");
    seg_cmd->add_option("targets", seg.targets, "Target images");
    seg_cmd->add_option("--group", seg.group, "Group manifest JSON");
    seg_cmd->add_option("--images", seg.images, "Image directory for --group");
    seg_cmd->add_option("--features", seg.features, "Directory of <image>.uwtf feature tensors");
    seg_cmd->add_option("--rough", seg.rough, "Directory of rough <image>.pgm masks to optimize");
    seg_cmd->add_option("--min-component", seg.min_component, "Denoise component threshold");
    seg_cmd->add_option("--out", seg.out, "Output directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        if (*synth_cmd) return run_synth(synth);
        if (*train_cmd) {
            if (*seed_opt) tr.seed = train_seed;
            if (*iters_opt) tr.iters = train_iters;
            return run_train(tr);
        }
        if (*mesh_cmd) return run_mesh(mesh_ckpt, mesh_out, mesh_res);
        if (*eval_cmd) return run_eval(eval_recon, eval_gt, eval_out, eval_samples, eval_seed, eval_cap);
        if (*render_cmd) return run_render(render_ckpt, render_poses, render_out, render_seed);
        if (*seg_cmd) return run_segment(seg);
    } catch (const NumericError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const EmptySurfaceError& e) {
        std::cerr << "numeric error: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return kExitNumeric;
    }
    return kExitUsage;
}
