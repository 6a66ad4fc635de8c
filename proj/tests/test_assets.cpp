#include <doctest.h>

#include "test_util.hpp"
#include "uwsdf/assets.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/rng.hpp"

#include <Eigen/Geometry>

#include <cstring>
#include <fstream>
#include <iterator>

using namespace uwsdf;
using testutil::TempDir;

namespace {

std::vector<char> file_bytes(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_bytes(const std::filesystem::path& p, const std::string& bytes) {
    std::ofstream out(p, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
}

CameraRecord rotated_camera(double angle) {
    CameraRecord c;
    c.fx = 80;
    c.fy = 81;
    c.cx = 31.5;
    c.cy = 32.25;
    c.width = 64;
    c.height = 64;
    c.world_from_camera.block<3, 3>(0, 0) = Eigen::AngleAxisd(angle, Vec3(0.2, 1.0, -0.3).normalized()).toRotationMatrix();
    c.world_from_camera.block<3, 1>(0, 3) = Vec3(std::sin(angle), 0.25, 3.0 * std::cos(angle));
    return c;
}

}  // namespace

TEST_CASE("tensor round trip of zeros") {
    TempDir dir("tensor");
    Tensor t({2, 3});
    write_tensor(t, dir / "z.uwtf");
    CHECK(read_tensor(dir / "z.uwtf") == t);
}

TEST_CASE("tensor on-disk layout is magic, ndim, dims, payload") {
    TempDir dir("tensor");
    Tensor t({1}, {3.5f});
    write_tensor(t, dir / "one.uwtf");
    const auto bytes = file_bytes(dir / "one.uwtf");
    REQUIRE(bytes.size() == 4 + 4 + 4 + 4);
    CHECK(std::string(bytes.begin(), bytes.begin() + 4) == "UWTF");
    std::uint32_t ndim = 0, d0 = 0;
    float v = 0;
    std::memcpy(&ndim, bytes.data() + 4, 4);
    std::memcpy(&d0, bytes.data() + 8, 4);
    std::memcpy(&v, bytes.data() + 12, 4);
    CHECK(ndim == 1);
    CHECK(d0 == 1);
    CHECK(v == 3.5f);
    CHECK(read_tensor(dir / "one.uwtf") == t);
}

TEST_CASE("tensor errors") {
    TempDir dir("tensor");
    SUBCASE("bad magic") {
        write_bytes(dir / "bad.uwtf", std::string("XXXX\x01\x00\x00\x00\x01\x00\x00\x00\x00\x00\x00\x00", 16));
        CHECK_THROWS_AS(read_tensor(dir / "bad.uwtf"), FormatError);
    }
    SUBCASE("truncated payload") {
        Tensor t({4, 4});
        write_tensor(t, dir / "t.uwtf");
        auto bytes = file_bytes(dir / "t.uwtf");
        bytes.resize(bytes.size() - 5);
        write_bytes(dir / "t.uwtf", std::string(bytes.begin(), bytes.end()));
        CHECK_THROWS_AS(read_tensor(dir / "t.uwtf"), TruncationError);
    }
    SUBCASE("truncated header") {
        write_bytes(dir / "h.uwtf", "UWTF\x02");
        CHECK_THROWS_AS(read_tensor(dir / "h.uwtf"), TruncationError);
    }
    SUBCASE("empty dims rejected") {
        Tensor t;
        CHECK_THROWS_AS(write_tensor(t, dir / "e.uwtf"), ValidationError);
        CHECK_THROWS_AS(Tensor({2, 0}, {}), ValidationError);
        CHECK_THROWS_AS(Tensor({2, 2}, {1.0f}), ValidationError);
    }
    SUBCASE("missing file and unwritable path") {
        CHECK_THROWS_AS(read_tensor(dir / "nope.uwtf"), IoError);
        CHECK_THROWS_AS(write_tensor(Tensor({1}), dir / "no" / "such" / "dir.uwtf"), IoError);
    }
}

TEST_CASE("random tensors round trip bitwise") {
    TempDir dir("tensor");
    Rng rng(7);
    Tensor big({100000});
    for (auto& v : big.data) v = static_cast<float>(rng.normal() * 1e3);
    big.data[5] = -0.0f;
    big.data[6] = std::numeric_limits<float>::denorm_min();
    write_tensor(big, dir / "big.uwtf");
    const Tensor back = read_tensor(dir / "big.uwtf");
    REQUIRE(back.dims == big.dims);
    CHECK(std::memcmp(back.data.data(), big.data.data(), big.data.size() * sizeof(float)) == 0);

    Tensor feat({128, 128, 64});
    for (auto& v : feat.data) v = static_cast<float>(rng.uniform(-1, 1));
    write_tensor(feat, dir / "feat.uwtf");
    const Tensor fb = read_tensor(dir / "feat.uwtf");
    CHECK(fb.dims == feat.dims);
    CHECK(std::memcmp(fb.data.data(), feat.data.data(), feat.data.size() * sizeof(float)) == 0);
}

TEST_CASE("image reading") {
    TempDir dir("img");
    write_bytes(dir / "red.ppm", std::string("P6\n1 1\n255\n\xff\x00\x00", 14));
    const ImageBuffer red = read_image(dir / "red.ppm");
    CHECK(red.channels == 3);
    CHECK(red.at(0, 0, 0) == 1.0f);
    CHECK(red.at(0, 0, 1) == 0.0f);
    CHECK(red.at(0, 0, 2) == 0.0f);

    write_bytes(dir / "gray.pgm", std::string("P5\n# comment\n2 2\n255\n\x80\x80\x80\x80", 25));
    const ImageBuffer gray = read_image(dir / "gray.pgm");
    CHECK(gray.channels == 1);
    REQUIRE(gray.values.size() == 4);
    for (float v : gray.values) CHECK(v == 128.0f / 255.0f);

    write_bytes(dir / "ascii.ppm", "P3\n1 1\n255\n255 0 0\n");
    CHECK_THROWS_AS(read_image(dir / "ascii.ppm"), FormatError);
    write_bytes(dir / "deep.pgm", std::string("P5\n1 1\n65535\n\x00\x01", 15));
    CHECK_THROWS_AS(read_image(dir / "deep.pgm"), FormatError);
    write_bytes(dir / "short.pgm", std::string("P5\n4 4\n255\n\x01\x02", 13));
    CHECK_THROWS_AS(read_image(dir / "short.pgm"), TruncationError);
}

TEST_CASE("image write/read within quantization bound") {
    TempDir dir("img");
    Rng rng(3);
    ImageBuffer img(64, 64, 3);
    for (auto& v : img.values) v = static_cast<float>(rng.uniform());
    write_image(img, dir / "a.ppm");
    const ImageBuffer back = read_image(dir / "a.ppm");
    REQUIRE(back.values.size() == img.values.size());
    for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(std::abs(back.values[i] - img.values[i]) <= 0.5f / 255.0f + 1e-7f);

    CHECK_THROWS_AS(ImageBuffer(1, 1, 2), ValidationError);
}

TEST_CASE("pose files") {
    TempDir dir("pose");
    SUBCASE("identity camera") {
        std::ofstream(dir / "p.txt") << "100 100 32 32 64 64\n1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        const auto cams = read_pose_file(dir / "p.txt");
        REQUIRE(cams.size() == 1);
        CHECK(cams[0].fx == 100);
        CHECK(cams[0].width == 64);
        CHECK(cams[0].center().norm() == 0.0);
        CHECK(cams[0].rotation().isIdentity());
    }
    SUBCASE("malformed line count") {
        std::ofstream(dir / "p.txt") << "100 100 32 32 64 64\n1 0 0 0\n0 1 0 0\n0 0 1 0\n";
        CHECK_THROWS_AS(read_pose_file(dir / "p.txt"), FormatError);
    }
    SUBCASE("non-orthonormal rotation") {
        std::ofstream(dir / "p.txt") << "100 100 32 32 64 64\n1.01 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        CHECK_THROWS_AS(read_pose_file(dir / "p.txt"), ValidationError);
    }
    SUBCASE("reflection rejected") {
        std::ofstream(dir / "p.txt") << "100 100 32 32 64 64\n-1 0 0 0\n0 1 0 0\n0 0 1 0\n0 0 0 1\n";
        CHECK_THROWS_AS(read_pose_file(dir / "p.txt"), ValidationError);
    }
    SUBCASE("ring round trip within 1e-9") {
        std::vector<CameraRecord> cams;
        for (int i = 0; i < 20; ++i) cams.push_back(rotated_camera(0.31 * i));
        write_pose_file(cams, dir / "ring.txt");
        const auto back = read_pose_file(dir / "ring.txt");
        REQUIRE(back.size() == cams.size());
        for (std::size_t i = 0; i < cams.size(); ++i) {
            CHECK((back[i].world_from_camera - cams[i].world_from_camera).cwiseAbs().maxCoeff() < 1e-9);
            CHECK(back[i].fx == doctest::Approx(cams[i].fx).epsilon(1e-12));
            CHECK(back[i].cy == doctest::Approx(cams[i].cy).epsilon(1e-12));
        }
    }
}

TEST_CASE("mesh obj round trip") {
    TempDir dir("mesh");
    TriangleMesh tet;
    tet.vertices = {Vec3(0, 0, 0), Vec3(1, 0, 0), Vec3(0, 1, 0), Vec3(0, 0, 1)};
    tet.faces = {{0, 2, 1}, {0, 1, 3}, {0, 3, 2}, {1, 2, 3}};
    write_mesh_obj(tet, dir / "tet.obj");
    const TriangleMesh back = read_mesh_obj(dir / "tet.obj");
    CHECK(back.vertices.size() == 4);
    CHECK(back.faces == tet.faces);

    Rng rng(11);
    TriangleMesh noisy;
    for (int i = 0; i < 200; ++i) noisy.vertices.push_back(Vec3(rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)));
    noisy.faces.push_back({0, 1, 2});
    write_mesh_obj(noisy, dir / "noisy.obj");
    const TriangleMesh nb = read_mesh_obj(dir / "noisy.obj");
    for (std::size_t i = 0; i < noisy.vertices.size(); ++i) CHECK((nb.vertices[i] - noisy.vertices[i]).norm() < 1e-7);

    std::ofstream(dir / "bad.obj") << "v 0 0 0\nv 1 0 0\nv 0 1 0\nv 0 0 1\nf 1 2 5\n";
    CHECK_THROWS_AS(read_mesh_obj(dir / "bad.obj"), ValidationError);
}

TEST_CASE("config defaults and validation") {
    std::vector<std::string> warnings;
    const PipelineConfig cfg = config_from_json_text("{}", &warnings);
    CHECK(cfg.lambda1 == 0.1);
    CHECK(cfg.lambda2 == 0.5);
    CHECK(cfg.lambda3 == 0.1);
    CHECK(cfg.lambda4 == 0.05);
    CHECK(cfg.samples_per_ray == 64);
    CHECK(cfg.beta_init == 0.1);
    CHECK(warnings.empty());

    CHECK_THROWS_AS(config_from_json_text(R"({"lambda1": -1})", &warnings), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"iterations": "many"})", &warnings), ConfigError);
    CHECK_THROWS_AS(config_from_json_text(R"({"samples_per_ray": 1})", &warnings), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("[1, 2]", &warnings), ConfigError);
    CHECK_THROWS_AS(config_from_json_text("{not json", &warnings), ConfigError);

    warnings.clear();
    const PipelineConfig extra = config_from_json_text(R"({"lambda3": 0.0, "colour": "blue"})", &warnings);
    CHECK(extra.lambda3 == 0.0);
    REQUIRE(warnings.size() == 1);
    CHECK(warnings[0].find("colour") != std::string::npos);
}

TEST_CASE("config text round trip and shipped config files") {
    PipelineConfig cfg;
    cfg.lambda2 = 0.25;
    cfg.seed = 99;
    cfg.background = {0.1, 0.2, 0.3};
    cfg.dataset_dir = "data/x";
    std::vector<std::string> warnings;
    const PipelineConfig back = config_from_json_text(config_to_json_text(cfg), &warnings);
    CHECK(warnings.empty());
    CHECK(back.lambda2 == 0.25);
    CHECK(back.seed == 99);
    CHECK(back.background[2] == 0.3);
    CHECK(back.dataset_dir == "data/x");

    const auto desk = load_config(std::filesystem::path(UWSDF_SOURCE_DIR) / "configs" / "desk.json", &warnings);
    CHECK(warnings.empty());
    CHECK(desk.sdf_width == 64);
    CHECK(desk.iterations == 2000);
    const auto full = load_config(std::filesystem::path(UWSDF_SOURCE_DIR) / "configs" / "default.json", &warnings);
    CHECK(warnings.empty());
    CHECK(full.sdf_width == 128);
    CHECK(full.lambda4 == 0.05);
    CHECK_THROWS_AS(load_config("/nonexistent/config.json", &warnings), IoError);
}
