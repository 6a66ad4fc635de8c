#include "uwsdf/assets.hpp"
#include "uwsdf/errors.hpp"

#include <Eigen/LU>
#include <json.hpp>

#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <sstream>

namespace uwsdf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr char kTensorMagic[4] = {'U', 'W', 'T', 'F'};

void put_u32(std::ostream& os, std::uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

bool get_u32(std::istream& is, std::uint32_t& v) {
    unsigned char b[4];
    if (!is.read(reinterpret_cast<char*>(b), 4)) return false;
    v = static_cast<std::uint32_t>(b[0]) | (static_cast<std::uint32_t>(b[1]) << 8) |
        (static_cast<std::uint32_t>(b[2]) << 16) | (static_cast<std::uint32_t>(b[3]) << 24);
    return true;
}

std::ifstream open_in(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path.string());
    return in;
}

std::ofstream open_out(const fs::path& path) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    return out;
}

// Reads the next whitespace-separated PNM header token, skipping '#' comments.
std::string pnm_token(std::istream& in) {
    std::string tok;
    int ch;
    while ((ch = in.get()) != EOF) {
        if (ch == '#') {
            while ((ch = in.get()) != EOF && ch != '\n') {}
            continue;
        }
        if (std::isspace(ch)) {
            if (!tok.empty()) break;
            continue;
        }
        tok.push_back(static_cast<char>(ch));
    }
    return tok;
}

int parse_positive(const std::string& tok, const fs::path& path) {
    try {
        std::size_t used = 0;
        const int v = std::stoi(tok, &used);
        if (used != tok.size() || v <= 0) throw FormatError("");
        return v;
    } catch (const std::exception&) {
        throw FormatError("bad PNM header field '" + tok + "' in " + path.string());
    }
}

}  // namespace

Tensor::Tensor(std::vector<std::uint32_t> d, std::vector<float> values) : dims(std::move(d)), data(std::move(values)) {
    validate();
}

Tensor::Tensor(std::vector<std::uint32_t> d) : dims(std::move(d)) {
    data.assign(element_count(), 0.0f);
    validate();
}

std::size_t Tensor::element_count() const {
    if (dims.empty()) return 0;
    std::size_t n = 1;
    for (auto d : dims) n *= d;
    return n;
}

void Tensor::validate() const {
    if (dims.empty()) throw ValidationError("tensor must have at least one dimension");
    for (auto d : dims)
        if (d == 0) throw ValidationError("tensor extents must be >= 1");
    if (element_count() != data.size())
        throw ValidationError("tensor payload has " + std::to_string(data.size()) + " values, dims imply " +
                              std::to_string(element_count()));
}

Tensor read_tensor(const fs::path& path) {
    auto in = open_in(path);
    char magic[4];
    if (!in.read(magic, 4) || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError("not a UWTF tensor: " + path.string());
    std::uint32_t ndim = 0;
    if (!get_u32(in, ndim)) throw TruncationError("truncated tensor header: " + path.string());
    if (ndim == 0) throw FormatError("tensor with zero dimensions: " + path.string());
    Tensor t;
    t.dims.resize(ndim);
    std::size_t count = 1;
    for (auto& d : t.dims) {
        if (!get_u32(in, d)) throw TruncationError("truncated tensor header: " + path.string());
        if (d == 0) throw FormatError("zero extent in " + path.string());
        count *= d;
    }
    t.data.resize(count);
    std::vector<unsigned char> raw(count * 4);
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw TruncationError("truncated tensor payload: " + path.string());
    for (std::size_t i = 0; i < count; ++i) {
        const std::uint32_t bits = static_cast<std::uint32_t>(raw[4 * i]) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 1]) << 8) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 2]) << 16) |
                                   (static_cast<std::uint32_t>(raw[4 * i + 3]) << 24);
        t.data[i] = std::bit_cast<float>(bits);
    }
    return t;
}

void write_tensor(const Tensor& t, const fs::path& path) {
    t.validate();
    auto out = open_out(path);
    out.write(kTensorMagic, 4);
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    for (auto d : t.dims) put_u32(out, d);
    for (float v : t.data) put_u32(out, std::bit_cast<std::uint32_t>(v));
    if (!out) throw IoError("write failed: " + path.string());
}

ImageBuffer::ImageBuffer(int w, int h, int c, float fill) : width(w), height(h), channels(c) {
    if (w <= 0 || h <= 0) throw ValidationError("image dimensions must be positive");
    if (c != 1 && c != 3) throw ValidationError("image must have 1 or 3 channels");
    values.assign(static_cast<std::size_t>(w) * h * c, fill);
}

ImageBuffer read_image(const fs::path& path) {
    auto in = open_in(path);
    const std::string magic = pnm_token(in);
    int channels = 0;
    if (magic == "P6")
        channels = 3;
    else if (magic == "P5")
        channels = 1;
    else
        throw FormatError("unsupported image header '" + magic + "' in " + path.string());
    const int w = parse_positive(pnm_token(in), path);
    const int h = parse_positive(pnm_token(in), path);
    const int maxval = parse_positive(pnm_token(in), path);
    if (maxval != 255) throw FormatError("only maxval 255 is supported: " + path.string());
    // pnm_token consumed exactly one whitespace byte after maxval.
    ImageBuffer img(w, h, channels);
    std::vector<unsigned char> raw(img.values.size());
    if (!in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size())))
        throw TruncationError("truncated image payload: " + path.string());
    for (std::size_t i = 0; i < raw.size(); ++i) img.values[i] = static_cast<float>(raw[i]) / 255.0f;
    return img;
}

void write_image(const ImageBuffer& img, const fs::path& path) {
    if (img.width <= 0 || img.height <= 0 || (img.channels != 1 && img.channels != 3) ||
        img.values.size() != img.pixel_count() * static_cast<std::size_t>(img.channels))
        throw ValidationError("malformed image buffer");
    auto out = open_out(path);
    out << (img.channels == 3 ? "P6" : "P5") << '\n' << img.width << ' ' << img.height << "\n255\n";
    std::vector<unsigned char> raw(img.values.size());
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const float v = std::clamp(img.values[i], 0.0f, 1.0f);
        raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
    }
    out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::vector<CameraRecord> read_pose_file(const fs::path& path) {
    auto in = open_in(path);
    std::vector<std::vector<double>> rows;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::vector<double> row;
        double v;
        while (ls >> v) row.push_back(v);
        if (!ls.eof()) throw FormatError("non-numeric token in pose file " + path.string());
        if (!row.empty()) rows.push_back(std::move(row));
    }
    if (rows.empty() || rows.size() % 5 != 0)
        throw FormatError("pose file must contain 5 lines per camera: " + path.string());

    std::vector<CameraRecord> cams;
    for (std::size_t i = 0; i < rows.size(); i += 5) {
        const auto& head = rows[i];
        if (head.size() != 6) throw FormatError("camera header must be 'fx fy cx cy w h'");
        CameraRecord cam;
        cam.fx = head[0];
        cam.fy = head[1];
        cam.cx = head[2];
        cam.cy = head[3];
        cam.width = static_cast<int>(head[4]);
        cam.height = static_cast<int>(head[5]);
        if (!(cam.fx > 0 && cam.fy > 0)) throw ValidationError("focal lengths must be positive");
        if (cam.width <= 0 || cam.height <= 0) throw ValidationError("image size must be positive");
        for (int r = 0; r < 4; ++r) {
            const auto& row = rows[i + 1 + r];
            if (row.size() != 4) throw FormatError("pose matrix rows must have 4 entries");
            for (int c = 0; c < 4; ++c) cam.world_from_camera(r, c) = row[c];
        }
        const Mat3 rot = cam.rotation();
        const double err = (rot.transpose() * rot - Mat3::Identity()).cwiseAbs().maxCoeff();
        if (err > 1e-3 || rot.determinant() < 0)
            throw ValidationError("camera " + std::to_string(i / 5) + " rotation is not orthonormal");
        cams.push_back(cam);
    }
    return cams;
}

void write_pose_file(const std::vector<CameraRecord>& cams, const fs::path& path) {
    auto out = open_out(path);
    out << std::setprecision(17);
    for (const auto& cam : cams) {
        out << cam.fx << ' ' << cam.fy << ' ' << cam.cx << ' ' << cam.cy << ' ' << cam.width << ' ' << cam.height
            << '\n';
        for (int r = 0; r < 4; ++r) {
            for (int c = 0; c < 4; ++c) out << cam.world_from_camera(r, c) << (c == 3 ? '\n' : ' ');
        }
    }
    if (!out) throw IoError("write failed: " + path.string());
}

void write_mesh_obj(const TriangleMesh& mesh, const fs::path& path) {
    auto out = open_out(path);
    out << std::setprecision(9);
    for (const auto& v : mesh.vertices) out << "v " << v.x() << ' ' << v.y() << ' ' << v.z() << '\n';
    for (const auto& f : mesh.faces) {
        for (auto idx : f)
            if (idx >= mesh.vertices.size()) throw ValidationError("face index out of range");
        out << "f " << f[0] + 1 << ' ' << f[1] + 1 << ' ' << f[2] + 1 << '\n';
    }
    if (!out) throw IoError("write failed: " + path.string());
}

TriangleMesh read_mesh_obj(const fs::path& path) {
    auto in = open_in(path);
    TriangleMesh mesh;
    std::vector<std::array<long, 3>> raw_faces;
    std::string line;
    while (std::getline(in, line)) {
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "v") {
            Vec3 v;
            if (!(ls >> v.x() >> v.y() >> v.z())) throw FormatError("bad vertex line: " + line);
            mesh.vertices.push_back(v);
        } else if (tag == "f") {
            std::array<long, 3> f{};
            for (auto& idx : f) {
                std::string tok;
                if (!(ls >> tok)) throw FormatError("faces must be triangles: " + line);
                // Accept "i", "i/t", "i/t/n".
                try {
                    idx = std::stol(tok.substr(0, tok.find('/')));
                } catch (const std::exception&) {
                    throw FormatError("bad face index in: " + line);
                }
            }
            std::string extra;
            if (ls >> extra) throw FormatError("faces must be triangles: " + line);
            raw_faces.push_back(f);
        }
    }
    const long n = static_cast<long>(mesh.vertices.size());
    for (const auto& f : raw_faces) {
        std::array<std::uint32_t, 3> face{};
        for (int k = 0; k < 3; ++k) {
            if (f[k] < 1 || f[k] > n)
                throw ValidationError("face references vertex " + std::to_string(f[k]) + " of " + std::to_string(n));
            face[k] = static_cast<std::uint32_t>(f[k] - 1);
        }
        mesh.faces.push_back(face);
    }
    return mesh;
}

void PipelineConfig::validate() const {
    auto require = [](bool ok, const std::string& what) {
        if (!ok) throw ConfigError(what);
    };
    require(lambda1 >= 0 && lambda2 >= 0 && lambda3 >= 0 && lambda4 >= 0, "loss weights must be >= 0");
    require(learning_rate > 0 && final_learning_rate > 0, "learning rates must be > 0");
    require(iterations >= 0, "iterations must be >= 0");
    require(samples_per_ray >= 2 && eval_samples_per_ray >= 2, "samples per ray must be >= 2");
    require(batch_size >= 1, "batch_size must be >= 1");
    require(beta_floor > 0 && beta_init >= beta_floor, "beta_init must be >= beta_floor > 0");
    require(grid_resolution >= 8, "grid_resolution must be >= 8");
    require(fg_fraction >= 0 && fg_fraction <= 1, "fg_fraction must lie in [0,1]");
    require(bbox_dilation >= 0, "bbox_dilation must be >= 0");
    require(eikonal_near_std > 0, "eikonal_near_std must be > 0");
    require(bound_radius > 0, "bound_radius must be > 0");
    require(checkpoint_every >= 1, "checkpoint_every must be >= 1");
    require(sdf_hidden_layers >= 1 && sdf_width >= 1 && feature_width >= 1, "invalid SDF network shape");
    require(radiance_hidden_layers >= 1 && radiance_width >= 1, "invalid radiance network shape");
    require(position_frequencies >= 0 && direction_frequencies >= 0, "frequencies must be >= 0");
    require(init_radius > 0 && softplus_beta > 0, "init_radius and softplus_beta must be > 0");
    for (double c : background) require(c >= 0 && c <= 1, "background color must lie in [0,1]");
}

namespace {

template <typename T>
void take(const json& obj, const char* key, T& field, std::vector<std::string>& seen) {
    seen.emplace_back(key);
    auto it = obj.find(key);
    if (it == obj.end()) return;
    if constexpr (std::is_same_v<T, std::string>) {
        if (!it->is_string()) throw ConfigError(std::string("config key '") + key + "' must be a string");
        field = it->template get<std::string>();
    } else if constexpr (std::is_floating_point_v<T>) {
        if (!it->is_number()) throw ConfigError(std::string("config key '") + key + "' must be a number");
        field = it->template get<double>();
    } else if constexpr (std::is_same_v<T, std::array<double, 3>>) {
        if (!it->is_array() || it->size() != 3)
            throw ConfigError(std::string("config key '") + key + "' must be a 3-element array");
        for (int i = 0; i < 3; ++i) {
            if (!(*it)[i].is_number()) throw ConfigError(std::string("config key '") + key + "' must hold numbers");
            field[i] = (*it)[i].template get<double>();
        }
    } else {
        if (!it->is_number_integer()) throw ConfigError(std::string("config key '") + key + "' must be an integer");
        if constexpr (std::is_unsigned_v<T>) {
            if (it->template get<long long>() < 0) throw ConfigError(std::string("config key '") + key + "' must be >= 0");
        }
        field = it->template get<T>();
    }
}

}  // namespace

PipelineConfig config_from_json_text(const std::string& text, std::vector<std::string>* warnings) {
    json obj;
    try {
        obj = json::parse(text);
    } catch (const json::parse_error& e) {
        throw ConfigError(std::string("config is not valid JSON: ") + e.what());
    }
    if (!obj.is_object()) throw ConfigError("config must be a flat JSON object");

    PipelineConfig cfg;
    std::vector<std::string> seen;
    take(obj, "lambda1", cfg.lambda1, seen);
    take(obj, "lambda2", cfg.lambda2, seen);
    take(obj, "lambda3", cfg.lambda3, seen);
    take(obj, "lambda4", cfg.lambda4, seen);
    take(obj, "learning_rate", cfg.learning_rate, seen);
    take(obj, "final_learning_rate", cfg.final_learning_rate, seen);
    take(obj, "iterations", cfg.iterations, seen);
    take(obj, "samples_per_ray", cfg.samples_per_ray, seen);
    take(obj, "eval_samples_per_ray", cfg.eval_samples_per_ray, seen);
    take(obj, "batch_size", cfg.batch_size, seen);
    take(obj, "beta_init", cfg.beta_init, seen);
    take(obj, "beta_floor", cfg.beta_floor, seen);
    take(obj, "grid_resolution", cfg.grid_resolution, seen);
    take(obj, "seed", cfg.seed, seen);
    take(obj, "fg_fraction", cfg.fg_fraction, seen);
    take(obj, "bbox_dilation", cfg.bbox_dilation, seen);
    take(obj, "eikonal_near_std", cfg.eikonal_near_std, seen);
    take(obj, "bound_radius", cfg.bound_radius, seen);
    take(obj, "background", cfg.background, seen);
    take(obj, "checkpoint_every", cfg.checkpoint_every, seen);
    take(obj, "sdf_hidden_layers", cfg.sdf_hidden_layers, seen);
    take(obj, "sdf_width", cfg.sdf_width, seen);
    take(obj, "feature_width", cfg.feature_width, seen);
    take(obj, "radiance_hidden_layers", cfg.radiance_hidden_layers, seen);
    take(obj, "radiance_width", cfg.radiance_width, seen);
    take(obj, "position_frequencies", cfg.position_frequencies, seen);
    take(obj, "direction_frequencies", cfg.direction_frequencies, seen);
    take(obj, "init_radius", cfg.init_radius, seen);
    take(obj, "softplus_beta", cfg.softplus_beta, seen);
    take(obj, "dataset_dir", cfg.dataset_dir, seen);
    take(obj, "output_dir", cfg.output_dir, seen);

    for (auto it = obj.begin(); it != obj.end(); ++it) {
        if (std::find(seen.begin(), seen.end(), it.key()) != seen.end()) continue;
        const std::string msg = "unknown config key '" + it.key() + "' ignored";
        if (warnings)
            warnings->push_back(msg);
        else
            std::clog << "warning: " << msg << '\n';
    }
    cfg.validate();
    return cfg;
}

PipelineConfig load_config(const fs::path& path, std::vector<std::string>* warnings) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config " + path.string());
    std::stringstream ss;
    ss << in.rdbuf();
    return config_from_json_text(ss.str(), warnings);
}

std::string config_to_json_text(const PipelineConfig& cfg) {
    json obj = {
        {"lambda1", cfg.lambda1},
        {"lambda2", cfg.lambda2},
        {"lambda3", cfg.lambda3},
        {"lambda4", cfg.lambda4},
        {"learning_rate", cfg.learning_rate},
        {"final_learning_rate", cfg.final_learning_rate},
        {"iterations", cfg.iterations},
        {"samples_per_ray", cfg.samples_per_ray},
        {"eval_samples_per_ray", cfg.eval_samples_per_ray},
        {"batch_size", cfg.batch_size},
        {"beta_init", cfg.beta_init},
        {"beta_floor", cfg.beta_floor},
        {"grid_resolution", cfg.grid_resolution},
        {"seed", cfg.seed},
        {"fg_fraction", cfg.fg_fraction},
        {"bbox_dilation", cfg.bbox_dilation},
        {"eikonal_near_std", cfg.eikonal_near_std},
        {"bound_radius", cfg.bound_radius},
        {"background", cfg.background},
        {"checkpoint_every", cfg.checkpoint_every},
        {"sdf_hidden_layers", cfg.sdf_hidden_layers},
        {"sdf_width", cfg.sdf_width},
        {"feature_width", cfg.feature_width},
        {"radiance_hidden_layers", cfg.radiance_hidden_layers},
        {"radiance_width", cfg.radiance_width},
        {"position_frequencies", cfg.position_frequencies},
        {"direction_frequencies", cfg.direction_frequencies},
        {"init_radius", cfg.init_radius},
        {"softplus_beta", cfg.softplus_beta},
        {"dataset_dir", cfg.dataset_dir},
        {"output_dir", cfg.output_dir},
    };
    return obj.dump(2);
}

}  // namespace uwsdf
