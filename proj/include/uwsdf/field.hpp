#pragma once

#include "uwsdf/types.hpp"

#include <Eigen/Core>

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace uwsdf {

using Eigen::MatrixXd;
using Eigen::VectorXd;
using Matrix3Xd = Eigen::Matrix<double, 3, Eigen::Dynamic>;

// Frequency encoding [x, sin(2^0 pi x), cos(2^0 pi x), ..., sin(2^(L-1) pi x), cos(2^(L-1) pi x)].
// Within each frequency the three sin terms come first, then the three cos terms.
struct PositionalEncoding {
    int frequencies = 0;

    [[nodiscard]] int output_width(int input_dim = 3) const { return input_dim * (2 * frequencies + 1); }
};

VectorXd encode(const Vec3& x, const PositionalEncoding& enc);

// Column-wise encoding of a 3xN batch. When `jacobian` is given, (*jacobian)[k] receives the
// derivative of every output with respect to input component k.
void encode_batch(const Matrix3Xd& x, const PositionalEncoding& enc, MatrixXd& out,
                  std::array<MatrixXd, 3>* jacobian = nullptr);

struct DenseLayer {
    MatrixXd weight;  // out x in
    VectorXd bias;    // out
};

struct SdfNetworkShape {
    int hidden_layers = 4;
    int width = 128;
    int feature_width = 64;
    int frequencies = 6;
    double init_radius = 0.5;
    double softplus_beta = 100.0;
};

struct RadianceNetworkShape {
    int hidden_layers = 2;
    int width = 64;
    int feature_width = 64;
    int frequencies = 4;
};

// F_d: x -> (s, z). Softplus hidden layers, linear output whose row 0 is the signed distance.
struct SdfNetwork {
    PositionalEncoding encoding;
    std::vector<DenseLayer> layers;  // hidden layers followed by the (1 + feature_width) output layer
    int feature_width = 0;
    double softplus_beta = 100.0;

    // Geometric initialization: the untrained field approximates a sphere of radius shape.init_radius.
    static SdfNetwork create(const SdfNetworkShape& shape, std::uint64_t seed);
};

// F_c: (z, v) -> rgb. ReLU hidden layers, sigmoid output.
struct RadianceNetwork {
    PositionalEncoding encoding;  // applied to the view direction
    std::vector<DenseLayer> layers;
    int feature_width = 0;

    static RadianceNetwork create(const RadianceNetworkShape& shape, std::uint64_t seed);
    [[nodiscard]] int input_width() const { return feature_width + encoding.output_width(); }
};

// Everything the optimizer updates. Gradients use the same type.
struct Model {
    SdfNetwork sdf;
    RadianceNetwork radiance;
    double beta = 0.1;

    [[nodiscard]] std::size_t parameter_count() const;
    [[nodiscard]] VectorXd flatten() const;
    void assign(const VectorXd& flat);
    [[nodiscard]] Model zeros_like() const;
    [[nodiscard]] bool all_finite() const;
};

struct ModelShape {
    SdfNetworkShape sdf;
    RadianceNetworkShape radiance;
    double beta_init = 0.1;
};
Model create_model(const ModelShape& shape, std::uint64_t seed);

// Forward cache for a batch of points; kept so the backward pass can reuse activations.
struct SdfBatch {
    std::vector<MatrixXd> inputs;  // input of every layer (inputs[0] is the encoding)
    std::vector<MatrixXd> pre;     // pre-activation of every hidden layer
    std::vector<std::array<MatrixXd, 3>> input_tangents;
    std::vector<std::array<MatrixXd, 3>> pre_tangents;
    bool has_gradient = false;

    VectorXd sdf;        // N
    MatrixXd feature;    // feature_width x N
    Matrix3Xd gradient;  // ds/dx, filled when has_gradient
};

void sdf_forward(const SdfNetwork& net, const Matrix3Xd& points, bool with_gradient, SdfBatch& out);

// Accumulates parameter gradients into `grad` given adjoints of s, z and (optionally) ds/dx.
void sdf_backward(const SdfNetwork& net, const SdfBatch& cache, const VectorXd& adj_sdf, const MatrixXd* adj_feature,
                  const Matrix3Xd* adj_gradient, SdfNetwork& grad);

struct RadianceBatch {
    std::vector<MatrixXd> inputs;
    std::vector<MatrixXd> pre;
    MatrixXd rgb;  // 3 x N
};

// `dirs` is 3xN unit view directions paired with the columns of `features`.
void radiance_forward(const RadianceNetwork& net, const MatrixXd& features, const Matrix3Xd& dirs, RadianceBatch& out);

// Accumulates parameter gradients and returns the adjoint of the feature input.
MatrixXd radiance_backward(const RadianceNetwork& net, const RadianceBatch& cache, const MatrixXd& adj_rgb,
                           RadianceNetwork& grad);

struct SdfValue {
    double sdf;
    VectorXd feature;
};

// Single-point conveniences over the batched passes. eval_sdf throws NumericError on
// non-finite parameters.
SdfValue eval_sdf(const SdfNetwork& net, const Vec3& x);
Vec3 eval_radiance(const RadianceNetwork& net, const VectorXd& feature, const Vec3& dir);
Vec3 sdf_gradient(const SdfNetwork& net, const Vec3& x);

// Closed-form oracle fields. Signed distance is negative inside.
struct AnalyticField {
    enum class Kind { Sphere, Box, Torus };
    enum class Albedo { Constant, Striped };

    Kind kind = Kind::Sphere;
    Vec3 center = Vec3::Zero();
    double radius = 0.5;                     // sphere radius
    Vec3 half_extents = Vec3(0.4, 0.4, 0.4);  // box
    double major_radius = 0.5;               // torus, ring in the xz plane
    double minor_radius = 0.2;
    Vec3 albedo = Vec3(0.8, 0.6, 0.4);
    Albedo albedo_mode = Albedo::Constant;
    Vec3 light_dir = Vec3(0.3, 0.5, 0.8).normalized();  // direction towards the light

    static AnalyticField sphere(double r, const Vec3& c = Vec3::Zero());
    static AnalyticField box(const Vec3& half, const Vec3& c = Vec3::Zero());
    static AnalyticField torus(double major, double minor, const Vec3& c = Vec3::Zero());
};

double analytic_sdf(const AnalyticField& field, const Vec3& x);
Vec3 analytic_gradient(const AnalyticField& field, const Vec3& x);
Vec3 analytic_albedo(const AnalyticField& field, const Vec3& x);
// Lambertian max(0, n.l) * albedo at a surface point with unit normal n.
Vec3 analytic_shade(const AnalyticField& field, const Vec3& x, const Vec3& normal);

// Checkpoint: manifest.json plus one UWTF tensor per parameter block. `extra` is merged into
// the manifest (used for iteration counters and optimizer bookkeeping).
void save_model(const Model& model, const std::filesystem::path& dir, const std::string& extra_json = "{}");
Model load_model(const std::filesystem::path& dir, std::string* extra_json = nullptr);

}  // namespace uwsdf
