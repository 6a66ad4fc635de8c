#include "uwsdf/meshing.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/parallel.hpp"
#include "uwsdf/rng.hpp"

#include "mc_tables.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <unordered_map>

namespace uwsdf {

namespace fs = std::filesystem;

ScalarFieldBatch analytic_scalar_field(const AnalyticField& field) {
    return [field](const Matrix3Xd& pts, VectorXd& values) {
        values.resize(pts.cols());
        for (Eigen::Index i = 0; i < pts.cols(); ++i) values(i) = analytic_sdf(field, pts.col(i));
    };
}

ScalarFieldBatch network_scalar_field(const SdfNetwork& net) {
    for (const auto& l : net.layers)
        if (!l.weight.allFinite() || !l.bias.allFinite()) throw NumericError("SDF network has non-finite parameters");
    return [&net](const Matrix3Xd& pts, VectorXd& values) {
        SdfBatch batch;
        sdf_forward(net, pts, false, batch);
        values = batch.sdf;
    };
}

namespace {

// Corner offsets and edge endpoints in the classic table's numbering.
constexpr int kCorner[8][3] = {{0, 0, 0}, {1, 0, 0}, {1, 1, 0}, {0, 1, 0}, {0, 0, 1}, {1, 0, 1}, {1, 1, 1}, {0, 1, 1}};
constexpr int kEdge[12][2] = {{0, 1}, {1, 2}, {2, 3}, {3, 0}, {4, 5}, {5, 6}, {6, 7}, {7, 4}, {0, 4}, {1, 5}, {2, 6}, {3, 7}};

}  // namespace

TriangleMesh marching_cubes(const ScalarFieldBatch& field, const Aabb& bounds, int res, double iso) {
    if (res < 8) throw ValidationError("marching cubes resolution must be >= 8");
    const int n = res + 1;
    const Vec3 cell = (bounds.max - bounds.min) / res;
    auto grid_point = [&](int x, int y, int z) { return Vec3(bounds.min + cell.cwiseProduct(Vec3(x, y, z))); };

    // Sample the grid one z-slice per task.
    std::vector<double> values(static_cast<std::size_t>(n) * n * n);
    parallel_for(static_cast<std::size_t>(n), [&](std::size_t z) {
        Matrix3Xd pts(3, n * n);
        for (int y = 0; y < n; ++y)
            for (int x = 0; x < n; ++x) pts.col(y * n + x) = grid_point(x, y, static_cast<int>(z));
        VectorXd v;
        field(pts, v);
        if (!v.allFinite()) throw NumericError("field produced non-finite values");
        std::copy(v.data(), v.data() + v.size(), values.begin() + static_cast<std::ptrdiff_t>(z * n * n));
    });
    auto value = [&](int x, int y, int z) { return values[(static_cast<std::size_t>(z) * n + y) * n + x]; };
    auto grid_index = [&](int x, int y, int z) { return (static_cast<std::uint64_t>(z) * n + y) * n + x; };

    constexpr std::uint64_t kCornerKey = std::uint64_t{1} << 62;
    TriangleMesh mesh;
    std::unordered_map<std::uint64_t, std::uint32_t> edge_vertex;
    auto vertex_on_edge = [&](int x, int y, int z, int edge) {
        const int* a = kCorner[kEdge[edge][0]];
        const int* b = kCorner[kEdge[edge][1]];
        std::uint64_t ia = grid_index(x + a[0], y + a[1], z + a[2]);
        std::uint64_t ib = grid_index(x + b[0], y + b[1], z + b[2]);
        if (ia > ib) std::swap(ia, ib);
        const int axis = (a[0] != b[0]) ? 0 : (a[1] != b[1] ? 1 : 2);
        const double va = value(x + a[0], y + a[1], z + a[2]);
        const double vb = value(x + b[0], y + b[1], z + b[2]);
        const double denom = vb - va;
        double t = denom != 0 ? std::clamp((iso - va) / denom, 0.0, 1.0) : 0.5;
        // Crossings within kSnap of a grid corner become that corner, shared by all its edges,
        // so coincident vertices are welded instead of leaving sliver triangles.
        constexpr double kSnap = 1e-6;
        std::uint64_t key = ia * 3 + static_cast<std::uint64_t>(axis);
        if (t <= kSnap || t >= 1.0 - kSnap) {
            const int* c = t <= kSnap ? a : b;
            key = kCornerKey | grid_index(x + c[0], y + c[1], z + c[2]);
            t = t <= kSnap ? 0.0 : 1.0;
        }
        if (auto it = edge_vertex.find(key); it != edge_vertex.end()) return it->second;
        const Vec3 pa = grid_point(x + a[0], y + a[1], z + a[2]);
        const Vec3 pb = grid_point(x + b[0], y + b[1], z + b[2]);
        const auto idx = static_cast<std::uint32_t>(mesh.vertices.size());
        mesh.vertices.push_back(pa + t * (pb - pa));
        edge_vertex.emplace(key, idx);
        return idx;
    };

    for (int z = 0; z < res; ++z)
        for (int y = 0; y < res; ++y)
            for (int x = 0; x < res; ++x) {
                int cube = 0;
                for (int c = 0; c < 8; ++c)
                    if (value(x + kCorner[c][0], y + kCorner[c][1], z + kCorner[c][2]) < iso) cube |= 1 << c;
                if (cube == 0 || cube == 255) continue;
                const int* tri = detail::kTriTable[cube];
                for (int k = 0; tri[k] != -1; k += 3) {
                    const std::uint32_t i0 = vertex_on_edge(x, y, z, tri[k]);
                    const std::uint32_t i1 = vertex_on_edge(x, y, z, tri[k + 1]);
                    const std::uint32_t i2 = vertex_on_edge(x, y, z, tri[k + 2]);
                    if (i0 == i1 || i1 == i2 || i0 == i2) continue;
                    const Vec3 nrm = (mesh.vertices[i1] - mesh.vertices[i0]).cross(mesh.vertices[i2] - mesh.vertices[i0]);
                    if (nrm.squaredNorm() == 0.0) continue;
                    // The table winds triangles towards the low-value side; flip so normals face outward.
                    mesh.faces.push_back({i0, i2, i1});
                }
            }
    if (mesh.faces.empty()) throw EmptySurfaceError("field has no iso-crossing inside the bounds");
    return mesh;
}

PointCloud sample_mesh_points(const TriangleMesh& mesh, std::size_t count, std::uint64_t seed) {
    if (mesh.faces.empty()) throw ValidationError("cannot sample an empty mesh");
    std::vector<double> cumulative(mesh.faces.size());
    double total = 0.0;
    for (std::size_t f = 0; f < mesh.faces.size(); ++f) {
        const auto& tri = mesh.faces[f];
        const Vec3& a = mesh.vertices[tri[0]];
        total += 0.5 * (mesh.vertices[tri[1]] - a).cross(mesh.vertices[tri[2]] - a).norm();
        cumulative[f] = total;
    }
    if (!(total > 0)) throw ValidationError("mesh has zero surface area");
    Rng rng(seed);
    PointCloud cloud;
    cloud.points.reserve(count);
    for (std::size_t i = 0; i < count; ++i) {
        const double pick = rng.uniform() * total;
        auto it = std::upper_bound(cumulative.begin(), cumulative.end(), pick);
        if (it == cumulative.end()) --it;
        const auto& tri = mesh.faces[static_cast<std::size_t>(it - cumulative.begin())];
        const double r1 = std::sqrt(rng.uniform());
        const double r2 = rng.uniform();
        const Vec3& a = mesh.vertices[tri[0]];
        const Vec3& b = mesh.vertices[tri[1]];
        const Vec3& c = mesh.vertices[tri[2]];
        cloud.points.push_back((1.0 - r1) * a + r1 * (1.0 - r2) * b + r1 * r2 * c);
    }
    return cloud;
}

KdTree::KdTree(std::vector<Vec3> points) : points_(std::move(points)) {
    if (points_.empty()) throw ValidationError("kd-tree needs at least one point");
    order_.resize(points_.size());
    std::iota(order_.begin(), order_.end(), 0u);
    nodes_.reserve(2 * points_.size() / 8 + 1);
    build(0, static_cast<std::uint32_t>(points_.size()), 0);
}

std::int32_t KdTree::build(std::uint32_t begin, std::uint32_t end, int depth) {
    constexpr std::uint32_t kLeaf = 8;
    const auto id = static_cast<std::int32_t>(nodes_.size());
    nodes_.push_back({begin, end, -1, 0.0, -1, -1});
    if (end - begin <= kLeaf) return id;

    Vec3 lo = points_[order_[begin]], hi = lo;
    for (std::uint32_t i = begin; i < end; ++i) {
        lo = lo.cwiseMin(points_[order_[i]]);
        hi = hi.cwiseMax(points_[order_[i]]);
    }
    int axis = 0;
    (hi - lo).maxCoeff(&axis);
    const std::uint32_t mid = begin + (end - begin) / 2;
    std::nth_element(order_.begin() + begin, order_.begin() + mid, order_.begin() + end,
                     [&](std::uint32_t a, std::uint32_t b) { return points_[a](axis) < points_[b](axis); });
    const double split = points_[order_[mid]](axis);
    const std::int32_t left = build(begin, mid, depth + 1);
    const std::int32_t right = build(mid, end, depth + 1);
    nodes_[id].axis = axis;
    nodes_[id].split = split;
    nodes_[id].left = left;
    nodes_[id].right = right;
    (void)depth;
    return id;
}

void KdTree::search(std::int32_t node_id, const Vec3& q, std::size_t skip, std::size_t& best, double& best_d2) const {
    const Node& node = nodes_[node_id];
    if (node.axis < 0) {
        for (std::uint32_t i = node.begin; i < node.end; ++i) {
            const std::uint32_t idx = order_[i];
            if (idx == skip) continue;
            const double d2 = (points_[idx] - q).squaredNorm();
            if (d2 < best_d2 || (d2 == best_d2 && idx < best)) {
                best_d2 = d2;
                best = idx;
            }
        }
        return;
    }
    const double diff = q(node.axis) - node.split;
    const std::int32_t near = diff < 0 ? node.left : node.right;
    const std::int32_t far = diff < 0 ? node.right : node.left;
    search(near, q, skip, best, best_d2);
    if (diff * diff <= best_d2) search(far, q, skip, best, best_d2);
}

std::pair<std::size_t, double> KdTree::nearest(const Vec3& q, std::size_t skip) const {
    std::size_t best = std::numeric_limits<std::size_t>::max();
    double best_d2 = std::numeric_limits<double>::infinity();
    search(0, q, skip, best, best_d2);
    if (best == std::numeric_limits<std::size_t>::max()) throw ValidationError("no candidate point");
    return {best, std::sqrt(best_d2)};
}

std::vector<double> nearest_distance(const PointCloud& query, const PointCloud& target) {
    if (target.points.empty()) throw ValidationError("nearest_distance target must be nonempty");
    const KdTree tree(target.points);
    std::vector<double> out(query.points.size());
    constexpr std::size_t kBlock = 1024;
    const std::size_t blocks = (out.size() + kBlock - 1) / kBlock;
    parallel_for(blocks, [&](std::size_t b) {
        const std::size_t end = std::min(out.size(), (b + 1) * kBlock);
        for (std::size_t i = b * kBlock; i < end; ++i) out[i] = tree.nearest(query.points[i]).second;
    });
    return out;
}

double mean_nearest_spacing(const PointCloud& cloud) {
    if (cloud.points.size() < 2) throw ValidationError("spacing needs at least two points");
    const KdTree tree(cloud.points);
    std::vector<double> d(cloud.points.size());
    constexpr std::size_t kBlock = 1024;
    const std::size_t blocks = (d.size() + kBlock - 1) / kBlock;
    parallel_for(blocks, [&](std::size_t b) {
        const std::size_t end = std::min(d.size(), (b + 1) * kBlock);
        for (std::size_t i = b * kBlock; i < end; ++i) d[i] = tree.nearest(cloud.points[i], i).second;
    });
    return std::accumulate(d.begin(), d.end(), 0.0) / static_cast<double>(d.size());
}

namespace {

double capped_mean(const std::vector<double>& d, std::optional<double> cap) {
    double sum = 0.0;
    for (double v : d) sum += cap ? std::min(v, *cap) : v;
    return sum / static_cast<double>(d.size());
}

}  // namespace

MetricsReport acc_comp_seeded(const TriangleMesh& recon, const TriangleMesh& gt, std::size_t samples_per_mesh,
                              std::uint64_t recon_seed, std::uint64_t gt_seed, std::optional<double> cap) {
    if (recon.empty() || gt.empty()) throw ValidationError("acc/comp needs two nonempty meshes");
    if (samples_per_mesh < 2) throw ValidationError("need at least two samples per mesh");
    const PointCloud r = sample_mesh_points(recon, samples_per_mesh, recon_seed);
    const PointCloud g = sample_mesh_points(gt, samples_per_mesh, gt_seed);
    MetricsReport rep;
    rep.acc = capped_mean(nearest_distance(r, g), cap);
    rep.comp = capped_mean(nearest_distance(g, r), cap);
    rep.samples = samples_per_mesh;
    rep.cap = cap;
    rep.recon_spacing = mean_nearest_spacing(r);
    rep.gt_spacing = mean_nearest_spacing(g);
    return rep;
}

MetricsReport acc_comp(const TriangleMesh& recon, const TriangleMesh& gt, std::size_t samples_per_mesh,
                       std::uint64_t seed, std::optional<double> cap) {
    MetricsReport rep =
        acc_comp_seeded(recon, gt, samples_per_mesh, derive_seed(seed, 0), derive_seed(seed, 1), cap);
    rep.seed = seed;
    return rep;
}

std::string metrics_json(const MetricsReport& report) {
    nlohmann::json j = {{"acc", report.acc},
                        {"comp", report.comp},
                        {"samples", report.samples},
                        {"seed", report.seed},
                        {"cap", report.cap ? nlohmann::json(*report.cap) : nlohmann::json(nullptr)},
                        {"recon_spacing", report.recon_spacing},
                        {"gt_spacing", report.gt_spacing}};
    return j.dump(2);
}

void write_metrics_report(const MetricsReport& report, const fs::path& path) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << metrics_json(report) << '\n';
}

}  // namespace uwsdf
