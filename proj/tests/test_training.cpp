#include <doctest.h>

#include "test_util.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/parallel.hpp"
#include "uwsdf/rng.hpp"
#include "uwsdf/synth.hpp"
#include "uwsdf/training.hpp"

#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iterator>
#include <limits>
#include <sstream>

using namespace uwsdf;
namespace fs = std::filesystem;

namespace {

Dataset small_sphere_dataset(int views = 4, int size = 16) {
    SynthSceneSpec spec;
    spec.camera_count = views;
    spec.width = spec.height = size;
    Dataset ds;
    const auto cams = camera_ring(spec);
    for (std::size_t i = 0; i < cams.size(); ++i) {
        auto [img, priors] = render_view(spec, cams[i], i);
        ds.views.push_back({"v" + std::to_string(i), img, cams[i], priors});
    }
    ds.validate();
    return ds;
}

// Two hidden layers, four rays: small enough for a full finite-difference sweep.
Model tiny_model(std::uint64_t seed = 3) {
    ModelShape shape;
    shape.sdf = {2, 16, 8, 2, 0.4, 100.0};
    shape.radiance = {1, 16, 8, 2};
    shape.beta_init = 0.1;
    return create_model(shape, seed);
}

RayBatch random_batch(int n, std::uint64_t seed) {
    Rng rng(seed);
    RayBatch batch;
    batch.seed = 5;
    for (int i = 0; i < n; ++i) {
        SupervisedRay r;
        const Vec3 o = 2.5 * Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
        const Vec3 target(rng.uniform(-.3, .3), rng.uniform(-.3, .3), rng.uniform(-.3, .3));
        r.ray.origin = o;
        r.ray.direction = (target - o).normalized();
        r.color = Vec3(rng.uniform(), rng.uniform(), rng.uniform());
        r.fg = i % 2;
        r.has_depth = true;
        r.depth = rng.uniform(1.5, 2.5);
        r.has_normal = true;
        r.normal = Vec3(rng.normal(), rng.normal(), rng.normal()).normalized();
        batch.rays.push_back(r);
    }
    return batch;
}

PipelineConfig tiny_config() {
    PipelineConfig cfg;
    cfg.sdf_hidden_layers = 2;
    cfg.sdf_width = 16;
    cfg.feature_width = 8;
    cfg.radiance_hidden_layers = 1;
    cfg.radiance_width = 16;
    cfg.position_frequencies = 2;
    cfg.direction_frequencies = 2;
    cfg.samples_per_ray = 16;
    cfg.eval_samples_per_ray = 16;
    cfg.batch_size = 32;
    cfg.iterations = 6;
    cfg.checkpoint_every = 3;
    cfg.learning_rate = 1e-3;
    cfg.final_learning_rate = 1e-4;
    cfg.init_radius = 0.3;
    return cfg;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("fg_fraction 1 samples only foreground") {
    const Dataset ds = small_sphere_dataset();
    const RayBatch b = sample_pixel_batch(ds, 200, 1.0, 16, 9);
    REQUIRE(b.rays.size() == 200);
    for (const auto& r : b.rays) {
        CHECK(r.fg == 1.0);
        CHECK(ds.views[r.view].priors.mask.at(r.px, r.py) == 1);
        CHECK(r.has_depth);
        CHECK(r.has_normal);
    }
}

TEST_CASE("all-foreground masks make the batch independent of fg_fraction") {
    Dataset ds = small_sphere_dataset();
    for (auto& v : ds.views) std::fill(v.priors.mask.data.begin(), v.priors.mask.data.end(), 1);
    const RayBatch a = sample_pixel_batch(ds, 64, 0.2, 16, 4);
    const RayBatch b = sample_pixel_batch(ds, 64, 1.0, 16, 4);
    for (std::size_t i = 0; i < a.rays.size(); ++i) {
        CHECK(a.rays[i].view == b.rays[i].view);
        CHECK(a.rays[i].px == b.rays[i].px);
        CHECK(a.rays[i].py == b.rays[i].py);
        CHECK(a.rays[i].fg == 1.0);
    }
}

TEST_CASE("foreground share at fg_fraction 0.8") {
    const Dataset ds = small_sphere_dataset();
    double fg = 0;
    int total = 0;
    for (std::uint64_t s = 0; s < 100; ++s) {
        const RayBatch b = sample_pixel_batch(ds, 100, 0.8, 16, s);
        for (const auto& r : b.rays) fg += r.fg;
        total += static_cast<int>(b.rays.size());
    }
    CHECK(total == 10000);
    CHECK(std::abs(fg / total - 0.8) <= 0.01);
    CHECK(sample_pixel_batch(ds, 7, 0.8, 16, 0).rays.size() == 7);
}

TEST_CASE("background rays: color and mask only, inside the dilated box") {
    const Dataset ds = small_sphere_dataset(4, 32);
    const int dilation = 2;
    const RayBatch b = sample_pixel_batch(ds, 400, 0.5, dilation, 21);
    int bg = 0;
    for (const auto& r : b.rays) {
        const auto& v = ds.views[r.view];
        CHECK(r.color.x() == doctest::Approx(v.image.at(r.px, r.py, 0)));
        if (r.fg != 0.0) continue;
        ++bg;
        CHECK_FALSE(r.has_depth);
        CHECK_FALSE(r.has_normal);
        CHECK(v.priors.mask.at(r.px, r.py) == 0);
        int x0 = 1 << 30, x1 = -1, y0 = 1 << 30, y1 = -1;
        for (int y = 0; y < v.priors.mask.height; ++y)
            for (int x = 0; x < v.priors.mask.width; ++x)
                if (v.priors.mask.at(x, y)) {
                    x0 = std::min(x0, x);
                    x1 = std::max(x1, x);
                    y0 = std::min(y0, y);
                    y1 = std::max(y1, y);
                }
        CHECK(r.px >= x0 - dilation);
        CHECK(r.px <= x1 + dilation);
        CHECK(r.py >= y0 - dilation);
        CHECK(r.py <= y1 + dilation);
    }
    CHECK(bg == 200);
}

TEST_CASE("sampling determinism and argument errors") {
    const Dataset ds = small_sphere_dataset();
    const RayBatch a = sample_pixel_batch(ds, 50, 0.8, 16, 77);
    const RayBatch b = sample_pixel_batch(ds, 50, 0.8, 16, 77);
    const RayBatch c = sample_pixel_batch(ds, 50, 0.8, 16, 78);
    bool differs = false;
    for (std::size_t i = 0; i < a.rays.size(); ++i) {
        CHECK(a.rays[i].px == b.rays[i].px);
        CHECK(a.rays[i].ray.direction == b.rays[i].ray.direction);
        differs |= a.rays[i].px != c.rays[i].px || a.rays[i].view != c.rays[i].view;
    }
    CHECK(differs);
    CHECK_THROWS_AS(sample_pixel_batch(ds, 0, 0.8, 16, 0), ValidationError);
    CHECK_THROWS_AS(sample_pixel_batch(ds, 10, 1.5, 16, 0), ValidationError);
}

TEST_CASE("views with empty masks are skipped with a warning") {
    Dataset ds = small_sphere_dataset();
    std::fill(ds.views[1].priors.mask.data.begin(), ds.views[1].priors.mask.data.end(), 0);
    const RayBatch b = sample_pixel_batch(ds, 100, 0.8, 16, 1);
    REQUIRE(b.warnings.size() == 1);
    CHECK(b.warnings[0].find("ViewSkippedWarning") != std::string::npos);
    for (const auto& r : b.rays) CHECK(r.view != 1);

    for (auto& v : ds.views) std::fill(v.priors.mask.data.begin(), v.priors.mask.data.end(), 0);
    CHECK_THROWS_AS(sample_pixel_batch(ds, 10, 0.8, 16, 1), EmptyMaskError);
}

TEST_CASE("dataset validation") {
    Dataset ds = small_sphere_dataset();
    ds.views[0].priors.mask.data[0] = 2;
    CHECK_THROWS_AS(ds.validate(), ValidationError);
    ds = small_sphere_dataset();
    ds.views[2].priors.depth.clear();
    CHECK_THROWS_AS(ds.validate(), ValidationError);
    CHECK_THROWS_AS(Dataset{}.validate(), ValidationError);
}

TEST_CASE("compute_gradients matches central differences") {
    const Model m = tiny_model();
    const RayBatch batch = random_batch(4, 11);
    PipelineConfig cfg;
    cfg.samples_per_ray = 16;
    const GradientResult g = compute_gradients(m, batch, cfg);
    const VectorXd analytic = g.gradient.flatten();
    const VectorXd theta = m.flatten();
    REQUIRE(analytic.size() == theta.size());
    CHECK(std::isfinite(g.report.total));

    const double h = 1e-4;
    double worst = 0;
    Model probe = m;
    for (Eigen::Index p = 0; p < theta.size(); ++p) {
        VectorXd t = theta;
        t(p) += h;
        probe.assign(t);
        const double up = total_loss(batch, probe, cfg).total;
        t(p) -= 2 * h;
        probe.assign(t);
        const double down = total_loss(batch, probe, cfg).total;
        const double fd = (up - down) / (2 * h);
        const double rel = std::abs(analytic(p) - fd) / std::max({std::abs(analytic(p)), std::abs(fd), 1e-8});
        worst = std::max(worst, rel);
    }
    CHECK(worst < 1e-4);
    CHECK(g.report.total == total_loss(batch, m, cfg).total);
}

TEST_CASE("zero weights and matched colors give exactly zero gradients") {
    const Model m = tiny_model();
    RayBatch batch = random_batch(40, 3);
    PipelineConfig cfg;
    cfg.samples_per_ray = 16;
    cfg.lambda1 = cfg.lambda2 = cfg.lambda3 = cfg.lambda4 = 0.0;
    const auto pred = render_batch(batch, m, cfg);
    REQUIRE(pred.size() == batch.rays.size());
    for (std::size_t r = 0; r < pred.size(); ++r) batch.rays[r].color = pred[r].color;
    const GradientResult g = compute_gradients(m, batch, cfg);
    CHECK(g.report.rgb == 0.0);
    const VectorXd flat = g.gradient.flatten();
    CHECK(flat.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("gradients are bitwise reproducible and thread-count independent") {
    const Model m = tiny_model(8);
    const RayBatch batch = random_batch(70, 9);  // spans several ray chunks
    PipelineConfig cfg;
    cfg.samples_per_ray = 16;
    const Model before = m;
    const VectorXd a = compute_gradients(m, batch, cfg).gradient.flatten();
    const VectorXd b = compute_gradients(m, batch, cfg).gradient.flatten();
    CHECK((a.array() == b.array()).all());
    CHECK((m.flatten().array() == before.flatten().array()).all());

    ::setenv("UWSDF_THREADS", "3", 1);
    const VectorXd c = compute_gradients(m, batch, cfg).gradient.flatten();
    ::setenv("UWSDF_THREADS", "1", 1);
    const VectorXd d = compute_gradients(m, batch, cfg).gradient.flatten();
    ::unsetenv("UWSDF_THREADS");
    CHECK((a.array() == c.array()).all());
    CHECK((a.array() == d.array()).all());
}

TEST_CASE("non-finite loss names the offending term") {
    const Model m = tiny_model();
    RayBatch batch = random_batch(4, 2);
    batch.rays[0].color = Vec3(std::numeric_limits<double>::quiet_NaN(), 0, 0);
    PipelineConfig cfg;
    cfg.samples_per_ray = 8;
    try {
        (void)compute_gradients(m, batch, cfg);
        FAIL("expected NumericError");
    } catch (const NumericError& e) {
        CHECK(std::string(e.what()).find("rgb") != std::string::npos);
    }
}

TEST_CASE("with fg_fraction 1 and no mask loss, background pixels do not matter") {
    Dataset ds = small_sphere_dataset();
    Dataset noisy = ds;
    Rng rng(4);
    for (auto& v : noisy.views)
        for (int y = 0; y < v.image.height; ++y)
            for (int x = 0; x < v.image.width; ++x)
                if (!v.priors.mask.at(x, y))
                    for (int c = 0; c < 3; ++c) v.image.at(x, y, c) = static_cast<float>(rng.uniform());
    PipelineConfig cfg = tiny_config();
    cfg.lambda2 = 0.0;
    const Model m = create_model(model_shape_from_config(cfg), 1);
    const RayBatch a = sample_pixel_batch(ds, 48, 1.0, 16, 5);
    const RayBatch b = sample_pixel_batch(noisy, 48, 1.0, 16, 5);
    const VectorXd ga = compute_gradients(m, a, cfg).gradient.flatten();
    const VectorXd gb = compute_gradients(m, b, cfg).gradient.flatten();
    CHECK((ga.array() == gb.array()).all());
}

TEST_CASE("adam: zero gradient, first step, quadratic bowl") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        VectorXd p = VectorXd::LinSpaced(5, -1, 1);
        const VectorXd start = p;
        OptimizerState s = make_optimizer(5, 0.1);
        for (int i = 0; i < 10; ++i) adam_step(p, VectorXd::Zero(5), s);
        CHECK((p.array() == start.array()).all());
        CHECK(s.step == 10);
    }
    SUBCASE("first step closed form") {
        VectorXd p = VectorXd::Zero(3);
        VectorXd g(3);
        g << 0.5, -2.0, 1e-3;
        OptimizerState s = make_optimizer(3, 0.01);
        adam_step(p, g, s);
        for (int i = 0; i < 3; ++i) {
            // m_hat = g, v_hat = g^2 after bias correction
            const double expected = -0.01 * g(i) / (std::abs(g(i)) + 1e-8);
            CHECK(p(i) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    SUBCASE("quadratic bowl") {
        VectorXd target(4);
        target << 1.0, -2.0, 0.5, 3.0;
        VectorXd curvature(4);
        curvature << 1.0, 10.0, 0.1, 3.0;
        VectorXd p = VectorXd::Zero(4);
        OptimizerState s = make_optimizer(4, 0.05);
        int steps = 0;
        for (; steps < 5000; ++steps) {
            if ((p - target).cwiseAbs().maxCoeff() < 1e-6) break;
            s.learning_rate = 0.05 * std::pow(0.998, steps);
            adam_step(p, curvature.cwiseProduct(p - target), s);
        }
        CHECK(steps < 5000);
        CHECK((p - target).cwiseAbs().maxCoeff() < 1e-6);
    }
    SUBCASE("shape mismatch") {
        VectorXd p = VectorXd::Zero(3);
        OptimizerState s = make_optimizer(2, 0.1);
        CHECK_THROWS_AS(adam_step(p, VectorXd::Zero(3), s), ShapeError);
    }
}

TEST_CASE("cosine learning-rate schedule") {
    PipelineConfig cfg;
    cfg.learning_rate = 5e-4;
    cfg.final_learning_rate = 5e-5;
    cfg.iterations = 1000;
    CHECK(learning_rate_at(cfg, 0) == doctest::Approx(5e-4));
    CHECK(learning_rate_at(cfg, 500) == doctest::Approx(2.75e-4));
    CHECK(learning_rate_at(cfg, 1000) == doctest::Approx(5e-5));
    CHECK(learning_rate_at(cfg, 5000) == doctest::Approx(5e-5));
    for (int i = 1; i <= 1000; ++i) CHECK(learning_rate_at(cfg, i) <= learning_rate_at(cfg, i - 1));
}

TEST_CASE("train with zero iterations returns the initial model") {
    const Dataset ds = small_sphere_dataset();
    PipelineConfig cfg = tiny_config();
    cfg.iterations = 0;
    const TrainResult r = train(ds, cfg);
    CHECK(r.log.empty());
    CHECK(r.iterations_done == 0);
    const Model init = create_model(model_shape_from_config(cfg), cfg.seed);
    CHECK((r.model.flatten().array() == init.flatten().array()).all());
}

TEST_CASE("train: finite log, checkpoints, determinism, resume") {
    const Dataset ds = small_sphere_dataset();
    const PipelineConfig cfg = tiny_config();
    testutil::TempDir tmp("train");

    TrainOptions opt;
    opt.checkpoint_dir = tmp / "a";
    opt.log_path = tmp / "a.log";
    std::ostringstream progress;
    opt.progress = &progress;
    opt.progress_every = 2;
    const TrainResult a = train(ds, cfg, opt);
    REQUIRE(a.log.size() == 6);
    for (std::size_t i = 0; i < a.log.size(); ++i) {
        CHECK(a.log[i].iteration == static_cast<int>(i) + 1);
        CHECK(std::isfinite(a.log[i].report.total));
        CHECK(a.log[i].beta >= cfg.beta_floor);
    }
    CHECK(fs::exists(tmp / "a" / "manifest.json"));
    CHECK(progress.str().find("iter 6") != std::string::npos);
    {
        std::ifstream log(tmp / "a.log");
        int lines = 0;
        for (std::string line; std::getline(log, line);) ++lines;
        CHECK(lines == 6);
    }

    opt.checkpoint_dir = tmp / "b";
    opt.log_path.reset();
    opt.progress = nullptr;
    const TrainResult b = train(ds, cfg, opt);
    for (const auto& entry : fs::directory_iterator(tmp / "a")) {
        const auto name = entry.path().filename();
        CHECK_MESSAGE(slurp(entry.path()) == slurp(tmp / "b" / name), name.string());
    }

    // Stop after 3 iterations, then resume to 6.
    PipelineConfig half = cfg;
    half.iterations = 3;
    opt.checkpoint_dir = tmp / "c";
    const TrainResult first = train(ds, half, opt);
    CHECK(first.iterations_done == 3);
    opt.resume = true;
    const TrainResult resumed = train(ds, cfg, opt);
    CHECK(resumed.iterations_done == 6);
    REQUIRE(resumed.log.size() == 3);
    CHECK(resumed.log.front().iteration == 4);
    std::string extra;
    (void)load_model(tmp / "c", &extra);
    CHECK(extra.find("\"iteration\":6") != std::string::npos);
}
