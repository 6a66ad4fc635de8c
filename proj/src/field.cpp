#include "uwsdf/field.hpp"
#include "uwsdf/assets.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/rng.hpp"

#include <json.hpp>

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

namespace uwsdf {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

MatrixXd softplus(const MatrixXd& a, double beta) {
    return a.unaryExpr([beta](double v) {
        const double x = beta * v;
        return x > 20.0 ? v : std::log1p(std::exp(x)) / beta;
    });
}

MatrixXd sigmoid_scaled(const MatrixXd& a, double beta) {
    return a.unaryExpr([beta](double v) {
        const double x = beta * v;
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    });
}

template <typename Fn>
void for_each_block(const Model& m, Fn&& fn) {
    for (const auto& l : m.sdf.layers) {
        fn(l.weight.data(), l.weight.size());
        fn(l.bias.data(), l.bias.size());
    }
    for (const auto& l : m.radiance.layers) {
        fn(l.weight.data(), l.weight.size());
        fn(l.bias.data(), l.bias.size());
    }
    fn(&m.beta, 1);
}

template <typename Fn>
void for_each_block_mut(Model& m, Fn&& fn) {
    for (auto& l : m.sdf.layers) {
        fn(l.weight.data(), l.weight.size());
        fn(l.bias.data(), l.bias.size());
    }
    for (auto& l : m.radiance.layers) {
        fn(l.weight.data(), l.weight.size());
        fn(l.bias.data(), l.bias.size());
    }
    fn(&m.beta, 1);
}

DenseLayer zero_layer(const DenseLayer& l) {
    return {MatrixXd::Zero(l.weight.rows(), l.weight.cols()), VectorXd::Zero(l.bias.size())};
}

}  // namespace

VectorXd encode(const Vec3& x, const PositionalEncoding& enc) {
    Matrix3Xd col(3, 1);
    col.col(0) = x;
    MatrixXd out;
    encode_batch(col, enc, out);
    return out.col(0);
}

void encode_batch(const Matrix3Xd& x, const PositionalEncoding& enc, MatrixXd& out, std::array<MatrixXd, 3>* jacobian) {
    const Eigen::Index n = x.cols();
    const int width = enc.output_width();
    out.resize(width, n);
    out.topRows(3) = x;
    if (jacobian) {
        for (int k = 0; k < 3; ++k) {
            (*jacobian)[k] = MatrixXd::Zero(width, n);
            (*jacobian)[k].row(k).setOnes();
        }
    }
    double freq = std::numbers::pi;
    for (int l = 0; l < enc.frequencies; ++l, freq *= 2.0) {
        const int base = 3 + 6 * l;
        for (int j = 0; j < 3; ++j) {
            for (Eigen::Index c = 0; c < n; ++c) {
                const double arg = freq * x(j, c);
                const double s = std::sin(arg);
                const double co = std::cos(arg);
                out(base + j, c) = s;
                out(base + 3 + j, c) = co;
                if (jacobian) {
                    (*jacobian)[j](base + j, c) = freq * co;
                    (*jacobian)[j](base + 3 + j, c) = -freq * s;
                }
            }
        }
    }
}

SdfNetwork SdfNetwork::create(const SdfNetworkShape& shape, std::uint64_t seed) {
    if (shape.hidden_layers < 1 || shape.width < 1 || shape.feature_width < 1)
        throw ValidationError("invalid SDF network shape");
    Rng rng(seed);
    SdfNetwork net;
    net.encoding.frequencies = shape.frequencies;
    net.feature_width = shape.feature_width;
    net.softplus_beta = shape.softplus_beta;

    int in_dim = net.encoding.output_width();
    for (int l = 0; l < shape.hidden_layers; ++l) {
        DenseLayer layer{MatrixXd::Zero(shape.width, in_dim), VectorXd::Zero(shape.width)};
        const double stddev = std::sqrt(2.0) / std::sqrt(static_cast<double>(shape.width));
        // The first layer only sees the raw coordinates; encoded columns start at zero.
        const int cols = (l == 0) ? 3 : in_dim;
        for (int c = 0; c < cols; ++c)
            for (int r = 0; r < shape.width; ++r) layer.weight(r, c) = stddev * rng.normal();
        net.layers.push_back(std::move(layer));
        in_dim = shape.width;
    }
    DenseLayer out{MatrixXd::Zero(1 + shape.feature_width, in_dim), VectorXd::Zero(1 + shape.feature_width)};
    const double geo_mean = std::sqrt(std::numbers::pi) / std::sqrt(static_cast<double>(in_dim));
    const double feat_std = 1.0 / std::sqrt(static_cast<double>(in_dim));
    for (int c = 0; c < in_dim; ++c) {
        out.weight(0, c) = geo_mean + 1e-4 * rng.normal();
        for (int r = 1; r <= shape.feature_width; ++r) out.weight(r, c) = feat_std * rng.normal();
    }
    out.bias(0) = -shape.init_radius;
    net.layers.push_back(std::move(out));
    return net;
}

RadianceNetwork RadianceNetwork::create(const RadianceNetworkShape& shape, std::uint64_t seed) {
    if (shape.hidden_layers < 1 || shape.width < 1 || shape.feature_width < 1)
        throw ValidationError("invalid radiance network shape");
    Rng rng(seed);
    RadianceNetwork net;
    net.encoding.frequencies = shape.frequencies;
    net.feature_width = shape.feature_width;
    int in_dim = net.input_width();
    for (int l = 0; l <= shape.hidden_layers; ++l) {
        const int out_dim = (l == shape.hidden_layers) ? 3 : shape.width;
        const double stddev = (l == shape.hidden_layers) ? std::sqrt(1.0 / in_dim) : std::sqrt(2.0 / in_dim);
        DenseLayer layer{MatrixXd(out_dim, in_dim), VectorXd::Zero(out_dim)};
        for (int c = 0; c < in_dim; ++c)
            for (int r = 0; r < out_dim; ++r) layer.weight(r, c) = stddev * rng.normal();
        net.layers.push_back(std::move(layer));
        in_dim = out_dim;
    }
    return net;
}

std::size_t Model::parameter_count() const {
    std::size_t n = 0;
    for_each_block(*this, [&](const double*, Eigen::Index size) { n += static_cast<std::size_t>(size); });
    return n;
}

VectorXd Model::flatten() const {
    VectorXd flat(static_cast<Eigen::Index>(parameter_count()));
    Eigen::Index offset = 0;
    for_each_block(*this, [&](const double* p, Eigen::Index size) {
        flat.segment(offset, size) = Eigen::Map<const VectorXd>(p, size);
        offset += size;
    });
    return flat;
}

void Model::assign(const VectorXd& flat) {
    if (static_cast<std::size_t>(flat.size()) != parameter_count())
        throw ShapeError("flat parameter vector has wrong length");
    Eigen::Index offset = 0;
    for_each_block_mut(*this, [&](double* p, Eigen::Index size) {
        Eigen::Map<VectorXd>(p, size) = flat.segment(offset, size);
        offset += size;
    });
}

Model Model::zeros_like() const {
    Model z;
    z.sdf.encoding = sdf.encoding;
    z.sdf.feature_width = sdf.feature_width;
    z.sdf.softplus_beta = sdf.softplus_beta;
    for (const auto& l : sdf.layers) z.sdf.layers.push_back(zero_layer(l));
    z.radiance.encoding = radiance.encoding;
    z.radiance.feature_width = radiance.feature_width;
    for (const auto& l : radiance.layers) z.radiance.layers.push_back(zero_layer(l));
    z.beta = 0.0;
    return z;
}

bool Model::all_finite() const {
    bool ok = true;
    for_each_block(*this, [&](const double* p, Eigen::Index size) {
        ok = ok && Eigen::Map<const VectorXd>(p, size).allFinite();
    });
    return ok;
}

Model create_model(const ModelShape& shape, std::uint64_t seed) {
    if (shape.sdf.feature_width != shape.radiance.feature_width)
        throw ShapeError("SDF feature width and radiance input width disagree");
    Model m;
    m.sdf = SdfNetwork::create(shape.sdf, seed);
    m.radiance = RadianceNetwork::create(shape.radiance, seed ^ 0x9e3779b97f4a7c15ULL);
    m.beta = shape.beta_init;
    return m;
}

void sdf_forward(const SdfNetwork& net, const Matrix3Xd& points, bool with_gradient, SdfBatch& out) {
    const std::size_t hidden = net.layers.size() - 1;
    out.has_gradient = with_gradient;
    out.inputs.assign(hidden + 1, MatrixXd());
    out.pre.assign(hidden, MatrixXd());
    out.input_tangents.clear();
    out.pre_tangents.clear();
    if (with_gradient) {
        out.input_tangents.resize(hidden + 1);
        out.pre_tangents.resize(hidden);
    }
    encode_batch(points, net.encoding, out.inputs[0], with_gradient ? &out.input_tangents[0] : nullptr);

    for (std::size_t l = 0; l < hidden; ++l) {
        const auto& layer = net.layers[l];
        out.pre[l] = (layer.weight * out.inputs[l]).colwise() + layer.bias;
        out.inputs[l + 1] = softplus(out.pre[l], net.softplus_beta);
        if (with_gradient) {
            const MatrixXd slope = sigmoid_scaled(out.pre[l], net.softplus_beta);
            for (int k = 0; k < 3; ++k) {
                out.pre_tangents[l][k] = layer.weight * out.input_tangents[l][k];
                out.input_tangents[l + 1][k] = slope.cwiseProduct(out.pre_tangents[l][k]);
            }
        }
    }
    const auto& last = net.layers.back();
    const MatrixXd y = (last.weight * out.inputs[hidden]).colwise() + last.bias;
    out.sdf = y.row(0).transpose();
    out.feature = y.bottomRows(net.feature_width);
    if (with_gradient) {
        out.gradient.resize(3, points.cols());
        for (int k = 0; k < 3; ++k) out.gradient.row(k) = last.weight.row(0) * out.input_tangents[hidden][k];
    }
}

void sdf_backward(const SdfNetwork& net, const SdfBatch& cache, const VectorXd& adj_sdf, const MatrixXd* adj_feature,
                  const Matrix3Xd* adj_gradient, SdfNetwork& grad) {
    const std::size_t hidden = net.layers.size() - 1;
    const Eigen::Index n = cache.sdf.size();
    const bool tangents = adj_gradient != nullptr;
    if (tangents && !cache.has_gradient) throw ValidationError("forward pass did not record gradients");

    const auto& last = net.layers.back();
    MatrixXd adj_y = MatrixXd::Zero(last.weight.rows(), n);
    adj_y.row(0) = adj_sdf.transpose();
    if (adj_feature) adj_y.bottomRows(net.feature_width) = *adj_feature;

    auto& glast = grad.layers.back();
    glast.weight.noalias() += adj_y * cache.inputs[hidden].transpose();
    glast.bias += adj_y.rowwise().sum();
    MatrixXd adj_h = last.weight.transpose() * adj_y;
    std::array<MatrixXd, 3> adj_dh;
    if (tangents) {
        const VectorXd w0 = last.weight.row(0).transpose();
        for (int k = 0; k < 3; ++k) {
            glast.weight.row(0).noalias() += adj_gradient->row(k) * cache.input_tangents[hidden][k].transpose();
            adj_dh[k] = w0 * adj_gradient->row(k);
        }
    }

    const double beta = net.softplus_beta;
    for (std::size_t l = hidden; l-- > 0;) {
        const auto& layer = net.layers[l];
        auto& g = grad.layers[l];
        const MatrixXd slope = sigmoid_scaled(cache.pre[l], beta);
        MatrixXd adj_a = slope.cwiseProduct(adj_h);
        std::array<MatrixXd, 3> adj_da;
        if (tangents) {
            const MatrixXd curvature = beta * slope.cwiseProduct((1.0 - slope.array()).matrix());
            for (int k = 0; k < 3; ++k) {
                adj_da[k] = slope.cwiseProduct(adj_dh[k]);
                adj_a.array() += curvature.array() * cache.pre_tangents[l][k].array() * adj_dh[k].array();
            }
        }
        g.weight.noalias() += adj_a * cache.inputs[l].transpose();
        g.bias += adj_a.rowwise().sum();
        if (tangents)
            for (int k = 0; k < 3; ++k) g.weight.noalias() += adj_da[k] * cache.input_tangents[l][k].transpose();
        if (l > 0) {
            adj_h = layer.weight.transpose() * adj_a;
            if (tangents)
                for (int k = 0; k < 3; ++k) adj_dh[k] = layer.weight.transpose() * adj_da[k];
        }
    }
}

void radiance_forward(const RadianceNetwork& net, const MatrixXd& features, const Matrix3Xd& dirs, RadianceBatch& out) {
    if (features.rows() != net.feature_width || features.cols() != dirs.cols())
        throw ShapeError("radiance input has " + std::to_string(features.rows()) + " feature rows, expected " +
                         std::to_string(net.feature_width));
    const std::size_t count = net.layers.size();
    out.inputs.assign(count, MatrixXd());
    out.pre.assign(count - 1, MatrixXd());
    MatrixXd enc;
    encode_batch(dirs, net.encoding, enc);
    out.inputs[0].resize(net.input_width(), features.cols());
    out.inputs[0] << features, enc;
    for (std::size_t l = 0; l + 1 < count; ++l) {
        out.pre[l] = (net.layers[l].weight * out.inputs[l]).colwise() + net.layers[l].bias;
        out.inputs[l + 1] = out.pre[l].cwiseMax(0.0);
    }
    const MatrixXd logits = (net.layers.back().weight * out.inputs.back()).colwise() + net.layers.back().bias;
    out.rgb = sigmoid_scaled(logits, 1.0);
}

MatrixXd radiance_backward(const RadianceNetwork& net, const RadianceBatch& cache, const MatrixXd& adj_rgb,
                           RadianceNetwork& grad) {
    const std::size_t count = net.layers.size();
    MatrixXd adj = adj_rgb.cwiseProduct(cache.rgb.cwiseProduct((1.0 - cache.rgb.array()).matrix()));
    for (std::size_t l = count; l-- > 0;) {
        if (l + 1 < count) adj = adj.cwiseProduct((cache.pre[l].array() > 0.0).cast<double>().matrix());
        grad.layers[l].weight.noalias() += adj * cache.inputs[l].transpose();
        grad.layers[l].bias += adj.rowwise().sum();
        adj = net.layers[l].weight.transpose() * adj;
    }
    return adj.topRows(net.feature_width);
}

SdfValue eval_sdf(const SdfNetwork& net, const Vec3& x) {
    for (const auto& l : net.layers)
        if (!l.weight.allFinite() || !l.bias.allFinite()) throw NumericError("SDF network has non-finite parameters");
    Matrix3Xd pts(3, 1);
    pts.col(0) = x;
    SdfBatch batch;
    sdf_forward(net, pts, false, batch);
    return {batch.sdf(0), batch.feature.col(0)};
}

Vec3 eval_radiance(const RadianceNetwork& net, const VectorXd& feature, const Vec3& dir) {
    if (feature.size() != net.feature_width) throw ShapeError("feature vector width mismatch");
    Matrix3Xd d(3, 1);
    d.col(0) = dir;
    RadianceBatch batch;
    radiance_forward(net, MatrixXd(feature), d, batch);
    return batch.rgb.col(0);
}

Vec3 sdf_gradient(const SdfNetwork& net, const Vec3& x) {
    Matrix3Xd pts(3, 1);
    pts.col(0) = x;
    SdfBatch batch;
    sdf_forward(net, pts, true, batch);
    return batch.gradient.col(0);
}

AnalyticField AnalyticField::sphere(double r, const Vec3& c) {
    AnalyticField f;
    f.kind = Kind::Sphere;
    f.radius = r;
    f.center = c;
    return f;
}

AnalyticField AnalyticField::box(const Vec3& half, const Vec3& c) {
    AnalyticField f;
    f.kind = Kind::Box;
    f.half_extents = half;
    f.center = c;
    return f;
}

AnalyticField AnalyticField::torus(double major, double minor, const Vec3& c) {
    AnalyticField f;
    f.kind = Kind::Torus;
    f.major_radius = major;
    f.minor_radius = minor;
    f.center = c;
    return f;
}

double analytic_sdf(const AnalyticField& field, const Vec3& x) {
    const Vec3 p = x - field.center;
    switch (field.kind) {
    case AnalyticField::Kind::Sphere:
        return p.norm() - field.radius;
    case AnalyticField::Kind::Box: {
        const Vec3 q = p.cwiseAbs() - field.half_extents;
        return q.cwiseMax(0.0).norm() + std::min(q.maxCoeff(), 0.0);
    }
    case AnalyticField::Kind::Torus: {
        const double rho = std::hypot(p.x(), p.z());
        return std::hypot(rho - field.major_radius, p.y()) - field.minor_radius;
    }
    }
    return 0.0;
}

Vec3 analytic_gradient(const AnalyticField& field, const Vec3& x) {
    const Vec3 p = x - field.center;
    switch (field.kind) {
    case AnalyticField::Kind::Sphere: {
        const double r = p.norm();
        return r > 0 ? Vec3(p / r) : Vec3(0, 0, 1);
    }
    case AnalyticField::Kind::Box: {
        const Vec3 q = p.cwiseAbs() - field.half_extents;
        const Vec3 sign(p.x() < 0 ? -1.0 : 1.0, p.y() < 0 ? -1.0 : 1.0, p.z() < 0 ? -1.0 : 1.0);
        if (q.maxCoeff() > 0) {
            const Vec3 outside = q.cwiseMax(0.0);
            return outside.normalized().cwiseProduct(sign);
        }
        Eigen::Index axis = 0;
        q.maxCoeff(&axis);
        Vec3 g = Vec3::Zero();
        g(axis) = sign(axis);
        return g;
    }
    case AnalyticField::Kind::Torus: {
        const double rho = std::hypot(p.x(), p.z());
        const double dr = rho - field.major_radius;
        const double len = std::hypot(dr, p.y());
        if (len == 0) return Vec3(0, 1, 0);
        const double radial = dr / len;
        if (rho == 0) return Vec3(0, p.y() / len, 0);
        return Vec3(radial * p.x() / rho, p.y() / len, radial * p.z() / rho);
    }
    }
    return Vec3::Zero();
}

Vec3 analytic_albedo(const AnalyticField& field, const Vec3& x) {
    if (field.albedo_mode == AnalyticField::Albedo::Constant) return field.albedo;
    const Vec3 p = x - field.center;
    const double pattern = 0.5 + 0.5 * std::sin(12.0 * p.x()) * std::sin(12.0 * p.y()) * std::sin(12.0 * p.z() + 0.7);
    return field.albedo * (0.35 + 0.65 * pattern);
}

Vec3 analytic_shade(const AnalyticField& field, const Vec3& x, const Vec3& normal) {
    const double lambert = std::max(0.0, normal.dot(field.light_dir.normalized()));
    return (lambert * analytic_albedo(field, x)).cwiseMin(1.0);
}

namespace {

Tensor matrix_tensor(const MatrixXd& m) {
    Tensor t({static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())});
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) t.data[r * m.cols() + c] = static_cast<float>(m(r, c));
    return t;
}

Tensor vector_tensor(const VectorXd& v) {
    Tensor t({static_cast<std::uint32_t>(v.size())});
    for (Eigen::Index i = 0; i < v.size(); ++i) t.data[i] = static_cast<float>(v(i));
    return t;
}

MatrixXd tensor_matrix(const Tensor& t) {
    if (t.dims.size() != 2) throw FormatError("expected a 2-D weight tensor");
    MatrixXd m(t.dims[0], t.dims[1]);
    for (std::uint32_t r = 0; r < t.dims[0]; ++r)
        for (std::uint32_t c = 0; c < t.dims[1]; ++c) m(r, c) = t.data[r * t.dims[1] + c];
    return m;
}

VectorXd tensor_vector(const Tensor& t) {
    if (t.dims.size() != 1) throw FormatError("expected a 1-D bias tensor");
    VectorXd v(t.dims[0]);
    for (std::uint32_t i = 0; i < t.dims[0]; ++i) v(i) = t.data[i];
    return v;
}

}  // namespace

void save_model(const Model& model, const fs::path& dir, const std::string& extra_json) {
    fs::create_directories(dir);
    json manifest = json::parse(extra_json);
    json tensors = json::array();
    auto put = [&](const std::string& name, const Tensor& t) {
        const std::string file = name + ".uwtf";
        write_tensor(t, dir / file);
        tensors.push_back({{"name", name}, {"file", file}, {"shape", t.dims}});
    };
    for (std::size_t l = 0; l < model.sdf.layers.size(); ++l) {
        put("sdf." + std::to_string(l) + ".weight", matrix_tensor(model.sdf.layers[l].weight));
        put("sdf." + std::to_string(l) + ".bias", vector_tensor(model.sdf.layers[l].bias));
    }
    for (std::size_t l = 0; l < model.radiance.layers.size(); ++l) {
        put("radiance." + std::to_string(l) + ".weight", matrix_tensor(model.radiance.layers[l].weight));
        put("radiance." + std::to_string(l) + ".bias", vector_tensor(model.radiance.layers[l].bias));
    }
    put("beta", Tensor({1}, {static_cast<float>(model.beta)}));
    manifest["format"] = "uwsdf-checkpoint";
    manifest["version"] = 1;
    manifest["sdf"] = {{"layers", model.sdf.layers.size()},
                       {"frequencies", model.sdf.encoding.frequencies},
                       {"feature_width", model.sdf.feature_width},
                       {"softplus_beta", model.sdf.softplus_beta}};
    manifest["radiance"] = {{"layers", model.radiance.layers.size()},
                            {"frequencies", model.radiance.encoding.frequencies},
                            {"feature_width", model.radiance.feature_width}};
    manifest["tensors"] = tensors;
    std::ofstream out(dir / "manifest.json", std::ios::trunc);
    if (!out) throw IoError("cannot write manifest in " + dir.string());
    out << manifest.dump(2) << '\n';
}

Model load_model(const fs::path& dir, std::string* extra_json) {
    std::ifstream in(dir / "manifest.json");
    if (!in) throw IoError("missing checkpoint manifest in " + dir.string());
    json manifest;
    try {
        manifest = json::parse(in);
    } catch (const json::parse_error& e) {
        throw FormatError(std::string("bad checkpoint manifest: ") + e.what());
    }
    if (manifest.value("format", "") != "uwsdf-checkpoint") throw FormatError("not a uwsdf checkpoint");

    auto load = [&](const std::string& name) {
        for (const auto& t : manifest.at("tensors"))
            if (t.at("name") == name) return read_tensor(dir / t.at("file").get<std::string>());
        throw FormatError("checkpoint lacks tensor " + name);
    };
    Model m;
    const auto& sdf = manifest.at("sdf");
    m.sdf.encoding.frequencies = sdf.at("frequencies");
    m.sdf.feature_width = sdf.at("feature_width");
    m.sdf.softplus_beta = sdf.at("softplus_beta");
    for (std::size_t l = 0; l < sdf.at("layers").get<std::size_t>(); ++l)
        m.sdf.layers.push_back({tensor_matrix(load("sdf." + std::to_string(l) + ".weight")),
                                tensor_vector(load("sdf." + std::to_string(l) + ".bias"))});
    const auto& rad = manifest.at("radiance");
    m.radiance.encoding.frequencies = rad.at("frequencies");
    m.radiance.feature_width = rad.at("feature_width");
    for (std::size_t l = 0; l < rad.at("layers").get<std::size_t>(); ++l)
        m.radiance.layers.push_back({tensor_matrix(load("radiance." + std::to_string(l) + ".weight")),
                                     tensor_vector(load("radiance." + std::to_string(l) + ".bias"))});
    m.beta = load("beta").data.at(0);

    if (m.sdf.layers.empty() || m.sdf.layers[0].weight.cols() != m.sdf.encoding.output_width() ||
        m.sdf.layers.back().weight.rows() != 1 + m.sdf.feature_width)
        throw FormatError("checkpoint SDF layer shapes are inconsistent");
    if (m.radiance.layers.empty() || m.radiance.layers[0].weight.cols() != m.radiance.input_width() ||
        m.radiance.layers.back().weight.rows() != 3)
        throw FormatError("checkpoint radiance layer shapes are inconsistent");

    if (extra_json) {
        json extra = manifest;
        for (const char* key : {"format", "version", "sdf", "radiance", "tensors"}) extra.erase(key);
        *extra_json = extra.dump();
    }
    return m;
}

}  // namespace uwsdf
