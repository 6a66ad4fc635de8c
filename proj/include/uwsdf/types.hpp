#pragma once

#include <Eigen/Core>
#include <Eigen/Geometry>

#include <array>
#include <cstdint>
#include <vector>

namespace uwsdf {

using Vec3 = Eigen::Vector3d;
using Mat3 = Eigen::Matrix3d;
using Mat4 = Eigen::Matrix4d;

struct TriangleMesh {
    std::vector<Vec3> vertices;
    std::vector<std::array<std::uint32_t, 3>> faces;

    [[nodiscard]] bool empty() const { return faces.empty(); }
};

struct PointCloud {
    std::vector<Vec3> points;
};

// Row-major h x w mask, one byte (0 or 1) per pixel.
struct BinaryMask {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;

    BinaryMask() = default;
    BinaryMask(int w, int h, bool fill = false)
        : width(w), height(h), data(static_cast<std::size_t>(w) * h, fill ? 1 : 0) {}

    [[nodiscard]] bool at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x] != 0; }
    void set(int x, int y, bool v) { data[static_cast<std::size_t>(y) * width + x] = v ? 1 : 0; }
    [[nodiscard]] bool in_bounds(int x, int y) const { return x >= 0 && y >= 0 && x < width && y < height; }
    [[nodiscard]] std::size_t count() const {
        std::size_t n = 0;
        for (auto v : data) n += v != 0;
        return n;
    }

    friend bool operator==(const BinaryMask&, const BinaryMask&) = default;
};

}  // namespace uwsdf
