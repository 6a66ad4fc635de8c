#pragma once

#include "uwsdf/field.hpp"
#include "uwsdf/types.hpp"

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <vector>

namespace uwsdf {

struct Aabb {
    Vec3 min = Vec3::Constant(-1.0);
    Vec3 max = Vec3::Constant(1.0);
};

// Fills `values` with the field at each column of `points`.
using ScalarFieldBatch = std::function<void(const Matrix3Xd& points, VectorXd& values)>;

ScalarFieldBatch analytic_scalar_field(const AnalyticField& field);
// Throws NumericError when the network has non-finite parameters.
ScalarFieldBatch network_scalar_field(const SdfNetwork& net);

// Marching cubes over res^3 cells with linear edge interpolation. Shared edge vertices are
// merged, zero-area triangles dropped, triangles wound so normals point towards positive
// values. Throws EmptySurfaceError when the field never crosses `iso`.
TriangleMesh marching_cubes(const ScalarFieldBatch& field, const Aabb& bounds, int res, double iso = 0.0);

// Area-weighted uniform samples; deterministic given the seed.
PointCloud sample_mesh_points(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed);

// Exact Euclidean nearest-neighbour search.
class KdTree {
public:
    explicit KdTree(std::vector<Vec3> points);

    // Index and distance of the closest point; `skip` excludes one index (self queries).
    [[nodiscard]] std::pair<std::size_t, double> nearest(const Vec3& q,
                                                         std::size_t skip = static_cast<std::size_t>(-1)) const;
    [[nodiscard]] std::size_t size() const { return points_.size(); }

private:
    struct Node {
        std::uint32_t begin, end;
        int axis;
        double split;
        std::int32_t left, right;
    };
    std::int32_t build(std::uint32_t begin, std::uint32_t end, int depth);
    void search(std::int32_t node, const Vec3& q, std::size_t skip, std::size_t& best, double& best_d2) const;

    std::vector<Vec3> points_;
    std::vector<std::uint32_t> order_;
    std::vector<Node> nodes_;
};

std::vector<double> nearest_distance(const PointCloud& query, const PointCloud& target);

// Mean distance from each point to its nearest other point in the same cloud.
double mean_nearest_spacing(const PointCloud& cloud);

struct MetricsReport {
    double acc = 0.0;
    double comp = 0.0;
    std::size_t samples = 0;
    std::uint64_t seed = 0;
    std::optional<double> cap;
    double recon_spacing = 0.0;  // sample spacing, bounds the point-to-point approximation error
    double gt_spacing = 0.0;
};

// Acc: mean distance from recon samples to gt samples; Comp: the reverse.
MetricsReport acc_comp(const TriangleMesh& recon, const TriangleMesh& gt, std::size_t samples_per_mesh,
                       std::uint64_t seed, std::optional<double> cap = std::nullopt);
MetricsReport acc_comp_seeded(const TriangleMesh& recon, const TriangleMesh& gt, std::size_t samples_per_mesh,
                              std::uint64_t recon_seed, std::uint64_t gt_seed, std::optional<double> cap = std::nullopt);

std::string metrics_json(const MetricsReport& report);
void write_metrics_report(const MetricsReport& report, const std::filesystem::path& path);

}  // namespace uwsdf
