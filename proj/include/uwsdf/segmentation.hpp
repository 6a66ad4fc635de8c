#pragma once

#include "uwsdf/assets.hpp"
#include "uwsdf/types.hpp"

#include <filesystem>
#include <string>
#include <vector>

namespace uwsdf {

// h x w x c features, row-major with channels innermost.
struct FeatureMap {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> data;
    bool normalized = false;
    std::vector<std::uint8_t> zero_pixels;  // set by normalize(): 1 where the vector had zero norm

    FeatureMap() = default;
    FeatureMap(int h, int w, int c) : height(h), width(w), channels(c), data(static_cast<std::size_t>(h) * w * c, 0.0) {}

    [[nodiscard]] const double* pixel(int x, int y) const {
        return data.data() + (static_cast<std::size_t>(y) * width + x) * channels;
    }
    double* pixel(int x, int y) { return data.data() + (static_cast<std::size_t>(y) * width + x) * channels; }

    // Per-pixel L2 normalization; zero vectors stay zero and are flagged.
    void normalize();
};

// Accepts a UWTF tensor of shape [h, w, c] and L2-normalizes it.
FeatureMap feature_map_from_tensor(const Tensor& t);

// |Gx|, |Gy| Sobel responses of the luminance, edge-clamped; two values per pixel.
std::vector<double> sobel_magnitudes(const ImageBuffer& img);

// Toy encoder: 3 colors, 2 Sobel magnitudes, 3 box-blurred colors (radius 4), normalized.
FeatureMap extract_features_toy(const ImageBuffer& img);

struct LocalFeatureSet {
    int channels = 0;
    std::vector<std::vector<double>> vectors;
    std::vector<std::pair<int, int>> pixels;  // (x, y) in feature coordinates

    [[nodiscard]] std::size_t size() const { return vectors.size(); }
};

// Nearest-neighbour resampling of a mask onto an h x w grid.
BinaryMask resample_mask(const BinaryMask& mask, int width, int height);

// One vector per foreground pixel in row-major order. Throws EmptyMaskError.
LocalFeatureSet crop_foreground_features(const FeatureMap& features, const BinaryMask& mask);

struct ConfidenceMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    [[nodiscard]] double at(int x, int y) const { return values[static_cast<std::size_t>(y) * width + x]; }
};

// S^i[p] = <F[p], T^i>, clamped to [-1, 1].
std::vector<ConfidenceMap> confidence_maps(const FeatureMap& target, const LocalFeatureSet& local);
ConfidenceMap aggregate_confidence(const std::vector<ConfidenceMap>& maps);
// Same result as aggregate_confidence(confidence_maps(...)) without materializing n maps.
ConfidenceMap mean_confidence(const FeatureMap& target, const LocalFeatureSet& local);

struct PromptPoint {
    int x = 0;
    int y = 0;
    double score = 0.0;
};

struct PromptPair {
    PromptPoint positive;  // argmax
    PromptPoint negative;  // argmin
};

// Ties resolve to the smallest row-major index.
PromptPair select_prompts(const ConfidenceMap& map);

// JSON {image, positive:[x,y], negative:[x,y], scores:{positive, negative}, feature_size:[w,h]}.
// Coordinates are mapped from the feature grid to image pixels (cell centers).
void emit_prompt_file(const PromptPair& prompts, const std::string& image_id, const std::filesystem::path& path,
                      int image_width = 0, int image_height = 0, int feature_width = 0, int feature_height = 0);

struct PromptRecord {
    std::string image;
    int positive[2];
    int negative[2];
    double positive_score;
    double negative_score;
};
PromptRecord read_prompt_file(const std::filesystem::path& path);

struct GroupManifest {
    std::string reference_view;
    std::vector<std::string> target_views;
};
GroupManifest read_group_manifest(const std::filesystem::path& path);

// 3x3 opening followed by removal of 4-connected components smaller than min_component.
BinaryMask denoise_mask(const BinaryMask& mask, std::size_t min_component);

struct Point2i {
    long x = 0;
    long y = 0;
    friend bool operator==(const Point2i&, const Point2i&) = default;
    friend auto operator<=>(const Point2i&, const Point2i&) = default;
};

// Counter-clockwise (positive cross product in x/y) hull without collinear points.
// Degenerate inputs give a single point or the two extreme points.
std::vector<Point2i> convex_hull_graham(std::vector<Point2i> points);

// Scanline fill of a convex polygon: every lattice point inside or on the boundary is set.
BinaryMask fill_hull(const std::vector<Point2i>& hull, int height, int width);

struct MaskOptimizeConfig {
    std::size_t min_component = 16;
};

// fill_hull(convex_hull_graham(foreground of denoise_mask(rough))).
BinaryMask optimize_mask(const BinaryMask& rough, const MaskOptimizeConfig& cfg = {});

// PGM helpers: nonzero pixels are foreground; written as 0/255.
BinaryMask read_mask(const std::filesystem::path& path);
void write_mask(const BinaryMask& mask, const std::filesystem::path& path);

}  // namespace uwsdf
