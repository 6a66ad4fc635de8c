#include "uwsdf/segmentation.hpp"
#include "uwsdf/errors.hpp"

#include <json.hpp>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>

namespace uwsdf {

namespace fs = std::filesystem;
using nlohmann::json;

void FeatureMap::normalize() {
    zero_pixels.assign(static_cast<std::size_t>(height) * width, 0);
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            double* v = pixel(x, y);
            double sq = 0.0;
            for (int c = 0; c < channels; ++c) sq += v[c] * v[c];
            if (sq == 0.0) {
                zero_pixels[static_cast<std::size_t>(y) * width + x] = 1;
                continue;
            }
            const double inv = 1.0 / std::sqrt(sq);
            for (int c = 0; c < channels; ++c) v[c] *= inv;
        }
    }
    normalized = true;
}

FeatureMap feature_map_from_tensor(const Tensor& t) {
    if (t.dims.size() != 3) throw ShapeError("feature tensor must have shape [h, w, c]");
    FeatureMap f(static_cast<int>(t.dims[0]), static_cast<int>(t.dims[1]), static_cast<int>(t.dims[2]));
    std::copy(t.data.begin(), t.data.end(), f.data.begin());
    f.normalize();
    return f;
}

std::vector<double> sobel_magnitudes(const ImageBuffer& img) {
    const int w = img.width, h = img.height;
    auto lum = [&](int x, int y) {
        x = std::clamp(x, 0, w - 1);
        y = std::clamp(y, 0, h - 1);
        if (img.channels == 1) return static_cast<double>(img.at(x, y));
        return 0.299 * img.at(x, y, 0) + 0.587 * img.at(x, y, 1) + 0.114 * img.at(x, y, 2);
    };
    std::vector<double> out(static_cast<std::size_t>(w) * h * 2);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            const double gx = (lum(x + 1, y - 1) + 2 * lum(x + 1, y) + lum(x + 1, y + 1)) -
                              (lum(x - 1, y - 1) + 2 * lum(x - 1, y) + lum(x - 1, y + 1));
            const double gy = (lum(x - 1, y + 1) + 2 * lum(x, y + 1) + lum(x + 1, y + 1)) -
                              (lum(x - 1, y - 1) + 2 * lum(x, y - 1) + lum(x + 1, y - 1));
            out[2 * (static_cast<std::size_t>(y) * w + x)] = std::abs(gx);
            out[2 * (static_cast<std::size_t>(y) * w + x) + 1] = std::abs(gy);
        }
    }
    return out;
}

FeatureMap extract_features_toy(const ImageBuffer& img) {
    if (img.channels != 3) throw ShapeError("toy feature extractor expects an RGB image");
    constexpr int kBlurRadius = 4;
    const int w = img.width, h = img.height;
    FeatureMap f(h, w, 8);
    const auto grad = sobel_magnitudes(img);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            double* v = f.pixel(x, y);
            for (int c = 0; c < 3; ++c) v[c] = img.at(x, y, c);
            v[3] = grad[2 * (static_cast<std::size_t>(y) * w + x)];
            v[4] = grad[2 * (static_cast<std::size_t>(y) * w + x) + 1];
            double sum[3] = {0, 0, 0};
            int count = 0;
            for (int dy = -kBlurRadius; dy <= kBlurRadius; ++dy)
                for (int dx = -kBlurRadius; dx <= kBlurRadius; ++dx) {
                    const int xx = std::clamp(x + dx, 0, w - 1), yy = std::clamp(y + dy, 0, h - 1);
                    for (int c = 0; c < 3; ++c) sum[c] += img.at(xx, yy, c);
                    ++count;
                }
            for (int c = 0; c < 3; ++c) v[5 + c] = sum[c] / count;
        }
    }
    f.normalize();
    return f;
}

BinaryMask resample_mask(const BinaryMask& mask, int width, int height) {
    if (mask.width == width && mask.height == height) return mask;
    BinaryMask out(width, height);
    for (int y = 0; y < height; ++y) {
        const int sy = std::min(mask.height - 1, static_cast<int>((y + 0.5) * mask.height / height));
        for (int x = 0; x < width; ++x) {
            const int sx = std::min(mask.width - 1, static_cast<int>((x + 0.5) * mask.width / width));
            out.set(x, y, mask.at(sx, sy));
        }
    }
    return out;
}

LocalFeatureSet crop_foreground_features(const FeatureMap& features, const BinaryMask& mask) {
    const BinaryMask m = resample_mask(mask, features.width, features.height);
    LocalFeatureSet set;
    set.channels = features.channels;
    for (int y = 0; y < features.height; ++y)
        for (int x = 0; x < features.width; ++x) {
            if (!m.at(x, y)) continue;
            const double* v = features.pixel(x, y);
            set.vectors.emplace_back(v, v + features.channels);
            set.pixels.emplace_back(x, y);
        }
    if (set.vectors.empty()) throw EmptyMaskError("reference mask has no foreground pixels");
    return set;
}

std::vector<ConfidenceMap> confidence_maps(const FeatureMap& target, const LocalFeatureSet& local) {
    if (target.channels != local.channels) throw ShapeError("feature widths differ");
    if (!target.normalized) throw ValidationError("target features must be L2-normalized");
    std::vector<ConfidenceMap> maps;
    maps.reserve(local.size());
    for (const auto& t : local.vectors) {
        ConfidenceMap s{target.height, target.width, std::vector<double>(static_cast<std::size_t>(target.height) * target.width)};
        for (int y = 0; y < target.height; ++y)
            for (int x = 0; x < target.width; ++x) {
                const double* f = target.pixel(x, y);
                double dot = 0.0;
                for (int c = 0; c < target.channels; ++c) dot += f[c] * t[c];
                s.values[static_cast<std::size_t>(y) * target.width + x] = std::clamp(dot, -1.0, 1.0);
            }
        maps.push_back(std::move(s));
    }
    return maps;
}

ConfidenceMap aggregate_confidence(const std::vector<ConfidenceMap>& maps) {
    if (maps.empty()) throw ValidationError("no confidence maps to aggregate");
    ConfidenceMap out{maps[0].height, maps[0].width, std::vector<double>(maps[0].values.size(), 0.0)};
    for (const auto& m : maps) {
        if (m.height != out.height || m.width != out.width) throw ShapeError("confidence map sizes differ");
        for (std::size_t i = 0; i < m.values.size(); ++i) out.values[i] += m.values[i];
    }
    for (auto& v : out.values) v /= static_cast<double>(maps.size());
    return out;
}

ConfidenceMap mean_confidence(const FeatureMap& target, const LocalFeatureSet& local) {
    if (target.channels != local.channels) throw ShapeError("feature widths differ");
    if (!target.normalized) throw ValidationError("target features must be L2-normalized");
    if (local.vectors.empty()) throw EmptyMaskError("no local features");
    // Clamping each S^i is a no-op for unit vectors, so the mean map is the dot with the mean vector.
    std::vector<double> mean(local.channels, 0.0);
    for (const auto& t : local.vectors)
        for (int c = 0; c < local.channels; ++c) mean[c] += t[c];
    for (auto& m : mean) m /= static_cast<double>(local.size());
    ConfidenceMap out{target.height, target.width, std::vector<double>(static_cast<std::size_t>(target.height) * target.width)};
    for (int y = 0; y < target.height; ++y)
        for (int x = 0; x < target.width; ++x) {
            const double* f = target.pixel(x, y);
            double dot = 0.0;
            for (int c = 0; c < target.channels; ++c) dot += f[c] * mean[c];
            out.values[static_cast<std::size_t>(y) * target.width + x] = std::clamp(dot, -1.0, 1.0);
        }
    return out;
}

PromptPair select_prompts(const ConfidenceMap& map) {
    if (map.values.empty()) throw ValidationError("confidence map is empty");
    std::size_t hi = 0, lo = 0;
    for (std::size_t i = 1; i < map.values.size(); ++i) {
        if (map.values[i] > map.values[hi]) hi = i;
        if (map.values[i] < map.values[lo]) lo = i;
    }
    const auto point = [&](std::size_t i) {
        return PromptPoint{static_cast<int>(i % map.width), static_cast<int>(i / map.width), map.values[i]};
    };
    return {point(hi), point(lo)};
}

void emit_prompt_file(const PromptPair& prompts, const std::string& image_id, const fs::path& path, int image_width,
                      int image_height, int feature_width, int feature_height) {
    auto to_image = [&](const PromptPoint& p) {
        if (image_width <= 0 || feature_width <= 0) return std::vector<int>{p.x, p.y};
        const double sx = static_cast<double>(image_width) / feature_width;
        const double sy = static_cast<double>(image_height) / feature_height;
        return std::vector<int>{std::min(image_width - 1, static_cast<int>((p.x + 0.5) * sx)),
                                std::min(image_height - 1, static_cast<int>((p.y + 0.5) * sy))};
    };
    json j = {{"image", image_id},
              {"positive", to_image(prompts.positive)},
              {"negative", to_image(prompts.negative)},
              {"scores", {{"positive", prompts.positive.score}, {"negative", prompts.negative.score}}}};
    if (feature_width > 0) j["feature_size"] = {feature_width, feature_height};
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << j.dump(2) << '\n';
}

PromptRecord read_prompt_file(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
        PromptRecord r{};
        r.image = j.at("image").get<std::string>();
        for (int k = 0; k < 2; ++k) {
            r.positive[k] = j.at("positive").at(k).get<int>();
            r.negative[k] = j.at("negative").at(k).get<int>();
        }
        r.positive_score = j.at("scores").at("positive").get<double>();
        r.negative_score = j.at("scores").at("negative").get<double>();
        return r;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad prompt file: ") + e.what());
    }
}

GroupManifest read_group_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open " + path.string());
    try {
        const json j = json::parse(in);
        GroupManifest g;
        g.reference_view = j.at("reference_view").get<std::string>();
        g.target_views = j.at("target_views").get<std::vector<std::string>>();
        return g;
    } catch (const json::exception& e) {
        throw FormatError(std::string("bad group manifest: ") + e.what());
    }
}

namespace {

BinaryMask morph(const BinaryMask& m, bool erode) {
    BinaryMask out(m.width, m.height);
    for (int y = 0; y < m.height; ++y)
        for (int x = 0; x < m.width; ++x) {
            bool v = erode;
            for (int dy = -1; dy <= 1 && v == erode; ++dy)
                for (int dx = -1; dx <= 1; ++dx) {
                    const int xx = x + dx, yy = y + dy;
                    const bool inside = m.in_bounds(xx, yy) && m.at(xx, yy);
                    if (erode && !inside) {
                        v = false;
                        break;
                    }
                    if (!erode && inside) {
                        v = true;
                        break;
                    }
                }
            out.set(x, y, v);
        }
    return out;
}

long cross(const Point2i& o, const Point2i& a, const Point2i& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

long dist2(const Point2i& a, const Point2i& b) { return (a.x - b.x) * (a.x - b.x) + (a.y - b.y) * (a.y - b.y); }

}  // namespace

BinaryMask denoise_mask(const BinaryMask& mask, std::size_t min_component) {
    BinaryMask opened = morph(morph(mask, true), false);
    std::vector<int> label(opened.data.size(), -1);
    std::vector<std::size_t> stack;
    std::vector<std::size_t> component;
    const int w = opened.width;
    for (std::size_t start = 0; start < opened.data.size(); ++start) {
        if (!opened.data[start] || label[start] >= 0) continue;
        component.clear();
        stack.assign(1, start);
        label[start] = 1;
        while (!stack.empty()) {
            const std::size_t p = stack.back();
            stack.pop_back();
            component.push_back(p);
            const int x = static_cast<int>(p % w), y = static_cast<int>(p / w);
            const int nx[4] = {x - 1, x + 1, x, x};
            const int ny[4] = {y, y, y - 1, y + 1};
            for (int k = 0; k < 4; ++k) {
                if (!opened.in_bounds(nx[k], ny[k])) continue;
                const std::size_t q = static_cast<std::size_t>(ny[k]) * w + nx[k];
                if (opened.data[q] && label[q] < 0) {
                    label[q] = 1;
                    stack.push_back(q);
                }
            }
        }
        if (component.size() < min_component)
            for (auto p : component) opened.data[p] = 0;
    }
    return opened;
}

std::vector<Point2i> convex_hull_graham(std::vector<Point2i> points) {
    if (points.empty()) throw ValidationError("convex hull needs at least one point");
    std::sort(points.begin(), points.end());
    points.erase(std::unique(points.begin(), points.end()), points.end());
    if (points.size() == 1) return points;

    // Pivot: lowest y, then lowest x.
    const auto pivot_it = std::min_element(points.begin(), points.end(), [](const Point2i& a, const Point2i& b) {
        return a.y != b.y ? a.y < b.y : a.x < b.x;
    });
    std::iter_swap(points.begin(), pivot_it);
    const Point2i pivot = points.front();
    std::sort(points.begin() + 1, points.end(), [&](const Point2i& a, const Point2i& b) {
        const long c = cross(pivot, a, b);
        if (c != 0) return c > 0;
        return dist2(pivot, a) < dist2(pivot, b);
    });

    std::vector<Point2i> hull;
    for (const auto& p : points) {
        while (hull.size() >= 2 && cross(hull[hull.size() - 2], hull.back(), p) <= 0) hull.pop_back();
        hull.push_back(p);
    }
    return hull;
}

BinaryMask fill_hull(const std::vector<Point2i>& hull, int height, int width) {
    BinaryMask out(width, height);
    if (hull.empty()) return out;
    for (const auto& p : hull)
        if (p.x < 0 || p.y < 0 || p.x >= width || p.y >= height) throw BoundsError("hull vertex outside the mask");
    if (hull.size() == 1) {
        out.set(static_cast<int>(hull[0].x), static_cast<int>(hull[0].y), true);
        return out;
    }
    long ymin = hull[0].y, ymax = hull[0].y;
    for (const auto& p : hull) {
        ymin = std::min(ymin, p.y);
        ymax = std::max(ymax, p.y);
    }
    const std::size_t n = hull.size();
    for (long y = ymin; y <= ymax; ++y) {
        double xmin = std::numeric_limits<double>::infinity();
        double xmax = -std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < n; ++i) {
            const Point2i& a = hull[i];
            const Point2i& b = hull[(i + 1) % n];
            if (y < std::min(a.y, b.y) || y > std::max(a.y, b.y)) continue;
            if (a.y == b.y) {
                xmin = std::min({xmin, static_cast<double>(a.x), static_cast<double>(b.x)});
                xmax = std::max({xmax, static_cast<double>(a.x), static_cast<double>(b.x)});
                continue;
            }
            const double x = a.x + static_cast<double>(y - a.y) * static_cast<double>(b.x - a.x) / static_cast<double>(b.y - a.y);
            xmin = std::min(xmin, x);
            xmax = std::max(xmax, x);
        }
        if (xmin > xmax) continue;
        const long x0 = static_cast<long>(std::ceil(xmin - 1e-9));
        const long x1 = static_cast<long>(std::floor(xmax + 1e-9));
        for (long x = std::max(0L, x0); x <= std::min<long>(width - 1, x1); ++x)
            out.set(static_cast<int>(x), static_cast<int>(y), true);
    }
    return out;
}

BinaryMask optimize_mask(const BinaryMask& rough, const MaskOptimizeConfig& cfg) {
    const BinaryMask clean = denoise_mask(rough, cfg.min_component);
    std::vector<Point2i> points;
    for (int y = 0; y < clean.height; ++y)
        for (int x = 0; x < clean.width; ++x)
            if (clean.at(x, y)) points.push_back({x, y});
    if (points.empty()) return BinaryMask(rough.width, rough.height);
    return fill_hull(convex_hull_graham(std::move(points)), rough.height, rough.width);
}

BinaryMask read_mask(const fs::path& path) {
    const ImageBuffer img = read_image(path);
    BinaryMask m(img.width, img.height);
    for (int y = 0; y < img.height; ++y)
        for (int x = 0; x < img.width; ++x) {
            bool on = false;
            for (int c = 0; c < img.channels; ++c) on = on || img.at(x, y, c) > 0.0f;
            m.set(x, y, on);
        }
    return m;
}

void write_mask(const BinaryMask& mask, const fs::path& path) {
    ImageBuffer img(mask.width, mask.height, 1);
    for (std::size_t i = 0; i < mask.data.size(); ++i) img.values[i] = mask.data[i] ? 1.0f : 0.0f;
    write_image(img, path);
}

}  // namespace uwsdf
