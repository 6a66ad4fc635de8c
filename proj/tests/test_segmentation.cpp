#include <doctest.h>

#include "test_util.hpp"
#include "uwsdf/errors.hpp"
#include "uwsdf/rng.hpp"
#include "uwsdf/segmentation.hpp"

#include <cmath>
#include <fstream>
#include <numeric>
#include <set>

using namespace uwsdf;

namespace {

FeatureMap random_features(int h, int w, int c, std::uint64_t seed) {
    Rng rng(seed);
    FeatureMap f(h, w, c);
    for (auto& v : f.data) v = rng.normal();
    f.normalize();
    return f;
}

BinaryMask disk_mask(int w, int h, double cx, double cy, double r) {
    BinaryMask m(w, h);
    for (int y = 0; y < h; ++y)
        for (int x = 0; x < w; ++x)
            if ((x - cx) * (x - cx) + (y - cy) * (y - cy) <= r * r) m.set(x, y, true);
    return m;
}

ImageBuffer disk_image(int size) {
    ImageBuffer img(size, size, 3);
    const BinaryMask d = disk_mask(size, size, size / 2.0, size / 2.0, size / 4.0);
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const bool in = d.at(x, y);
            img.at(x, y, 0) = in ? 0.9f : 0.1f;
            img.at(x, y, 1) = in ? 0.3f : 0.4f;
            img.at(x, y, 2) = in ? 0.1f : 0.7f;
        }
    return img;
}

long cross(const Point2i& o, const Point2i& a, const Point2i& b) {
    return (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x);
}

// O(n^3): i is a hull vertex when some directed edge i->j has every other point strictly to
// the left or on the open segment.
std::set<Point2i> brute_hull(std::vector<Point2i> pts) {
    std::sort(pts.begin(), pts.end());
    pts.erase(std::unique(pts.begin(), pts.end()), pts.end());
    if (pts.size() == 1) return {pts[0]};
    std::set<Point2i> out;
    for (const auto& a : pts)
        for (const auto& b : pts) {
            if (a == b) continue;
            bool edge = true;
            for (const auto& k : pts) {
                if (k == a || k == b) continue;
                const long c = cross(a, b, k);
                if (c < 0) {
                    edge = false;
                    break;
                }
                if (c == 0) {
                    const long dot = (k.x - a.x) * (b.x - a.x) + (k.y - a.y) * (b.y - a.y);
                    const long len = (b.x - a.x) * (b.x - a.x) + (b.y - a.y) * (b.y - a.y);
                    if (dot <= 0 || dot >= len) {
                        edge = false;
                        break;
                    }
                }
            }
            if (edge) {
                out.insert(a);
                out.insert(b);
            }
        }
    return out;
}

long gcd_len(const Point2i& a, const Point2i& b) { return std::gcd(std::abs(a.x - b.x), std::abs(a.y - b.y)); }

// Inside-or-on test against a CCW convex polygon with at least three vertices.
bool inside_convex(const std::vector<Point2i>& hull, const Point2i& p) {
    for (std::size_t i = 0; i < hull.size(); ++i)
        if (cross(hull[i], hull[(i + 1) % hull.size()], p) < 0) return false;
    return true;
}

std::size_t symmetric_difference(const BinaryMask& a, const BinaryMask& b) {
    std::size_t n = 0;
    for (std::size_t i = 0; i < a.data.size(); ++i) n += a.data[i] != b.data[i];
    return n;
}

}  // namespace

TEST_CASE("toy features: unit norm, constant image, step edge") {
    ImageBuffer constant(10, 7, 3);
    for (auto& v : constant.values) v = 0.4f;
    const FeatureMap fc = extract_features_toy(constant);
    CHECK(fc.channels == 8);
    for (int y = 0; y < 7; ++y)
        for (int x = 0; x < 10; ++x) {
            CHECK(fc.pixel(x, y)[3] == 0.0);
            CHECK(fc.pixel(x, y)[4] == 0.0);
        }

    ImageBuffer step(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 4; x < 8; ++x)
            for (int c = 0; c < 3; ++c) step.at(x, y, c) = 1.0f;
    const auto sob = sobel_magnitudes(step);
    for (int y = 0; y < 8; ++y) {
        for (int x = 0; x < 8; ++x) {
            const double gx = sob[2 * (y * 8 + x)];
            if (x == 3 || x == 4)
                CHECK(gx == doctest::Approx(4.0));
            else
                CHECK(gx == 0.0);
            CHECK(sob[2 * (y * 8 + x) + 1] == 0.0);
        }
    }
    const FeatureMap fs = extract_features_toy(step);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x) {
            double sq = 0;
            for (int c = 0; c < 8; ++c) sq += fs.pixel(x, y)[c] * fs.pixel(x, y)[c];
            CHECK(std::abs(std::sqrt(sq) - 1.0) < 1e-5);
        }
    CHECK_THROWS_AS(extract_features_toy(ImageBuffer(4, 4, 1)), ShapeError);
}

TEST_CASE("feature tensors are normalized and zero vectors flagged") {
    Tensor t({2, 2, 3});
    for (std::size_t i = 0; i < t.data.size(); ++i) t.data[i] = static_cast<float>(i + 1);
    std::fill(t.data.begin() + 3, t.data.begin() + 6, 0.0f);
    const FeatureMap f = feature_map_from_tensor(t);
    CHECK(f.normalized);
    CHECK(f.zero_pixels[1] == 1);
    CHECK(f.zero_pixels[0] == 0);
    CHECK(f.pixel(1, 0)[0] == 0.0);
    const double* v = f.pixel(0, 0);
    CHECK(std::sqrt(v[0] * v[0] + v[1] * v[1] + v[2] * v[2]) == doctest::Approx(1.0));
    CHECK_THROWS_AS(feature_map_from_tensor(Tensor({4, 3})), ShapeError);
}

TEST_CASE("crop_foreground_features") {
    const FeatureMap f = random_features(6, 5, 4, 1);
    SUBCASE("full mask") {
        const auto set = crop_foreground_features(f, BinaryMask(5, 6, true));
        CHECK(set.size() == 30);
        CHECK(set.pixels[7] == std::pair<int, int>{2, 1});
    }
    SUBCASE("single pixel") {
        BinaryMask m(5, 6);
        m.set(3, 2, true);
        const auto set = crop_foreground_features(f, m);
        REQUIRE(set.size() == 1);
        for (int c = 0; c < 4; ++c) CHECK(set.vectors[0][c] == f.pixel(3, 2)[c]);
    }
    SUBCASE("random masks match popcount") {
        Rng rng(8);
        for (int trial = 0; trial < 20; ++trial) {
            BinaryMask m(5, 6);
            for (auto& d : m.data) d = rng.uniform() < 0.4;
            if (m.count() == 0) m.data[0] = 1;
            CHECK(crop_foreground_features(f, m).size() == m.count());
        }
    }
    SUBCASE("empty mask") { CHECK_THROWS_AS(crop_foreground_features(f, BinaryMask(5, 6)), EmptyMaskError); }
    SUBCASE("mask at another resolution is resampled") {
        BinaryMask coarse(5, 3);
        coarse.set(1, 1, true);
        const BinaryMask fine = resample_mask(coarse, 5, 6);
        CHECK(fine.count() == 2);
        CHECK(fine.at(1, 2));
        CHECK(fine.at(1, 3));
        CHECK(crop_foreground_features(f, coarse).size() == 2);
    }
}

TEST_CASE("confidence maps against a naive loop") {
    const FeatureMap target = random_features(8, 8, 6, 2);
    const FeatureMap ref = random_features(8, 8, 6, 3);
    BinaryMask m(8, 8);
    Rng rng(4);
    for (auto& d : m.data) d = rng.uniform() < 0.3;
    m.data[0] = 1;
    const auto local = crop_foreground_features(ref, m);
    const auto maps = confidence_maps(target, local);
    REQUIRE(maps.size() == local.size());
    for (std::size_t i = 0; i < maps.size(); ++i)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 8; ++x) {
                double dot = 0;
                for (int c = 0; c < 6; ++c) dot += target.pixel(x, y)[c] * local.vectors[i][c];
                CHECK(std::abs(maps[i].at(x, y) - dot) < 1e-12);
                CHECK(std::abs(maps[i].at(x, y)) <= 1.0);
            }

    const ConfidenceMap mean = aggregate_confidence(maps);
    const ConfidenceMap fast = mean_confidence(target, local);
    for (std::size_t p = 0; p < mean.values.size(); ++p) {
        double sum = 0, lo = 1, hi = -1;
        for (const auto& s : maps) {
            sum += s.values[p];
            lo = std::min(lo, s.values[p]);
            hi = std::max(hi, s.values[p]);
        }
        CHECK(std::abs(mean.values[p] - sum / maps.size()) < 1e-12);
        CHECK(std::abs(fast.values[p] - mean.values[p]) < 1e-12);
        CHECK(mean.values[p] >= lo - 1e-15);
        CHECK(mean.values[p] <= hi + 1e-15);
    }
}

TEST_CASE("self-similarity, orthogonality and errors") {
    const FeatureMap f = random_features(5, 5, 3, 9);
    BinaryMask m(5, 5);
    m.set(2, 3, true);
    const auto maps = confidence_maps(f, crop_foreground_features(f, m));
    CHECK(maps[0].at(2, 3) == doctest::Approx(1.0).epsilon(1e-12));

    FeatureMap axis(1, 2, 2);
    axis.pixel(0, 0)[0] = 1;
    axis.pixel(1, 0)[1] = 1;
    axis.normalize();
    BinaryMask first(2, 1);
    first.set(0, 0, true);
    const auto ortho = confidence_maps(axis, crop_foreground_features(axis, first));
    CHECK(ortho[0].at(1, 0) == 0.0);

    CHECK_THROWS_AS(confidence_maps(random_features(2, 2, 4, 1), crop_foreground_features(f, m)), ShapeError);
    FeatureMap raw(2, 2, 3);
    CHECK_THROWS_AS(confidence_maps(raw, crop_foreground_features(f, m)), ValidationError);
    CHECK_THROWS_AS(aggregate_confidence({}), ValidationError);
}

TEST_CASE("aggregate: single map, negation, five maps") {
    Rng rng(12);
    std::vector<ConfidenceMap> maps(5, ConfidenceMap{3, 4, std::vector<double>(12)});
    for (auto& s : maps)
        for (auto& v : s.values) v = rng.uniform(-1, 1);
    CHECK(aggregate_confidence({maps[0]}).values == maps[0].values);
    ConfidenceMap neg = maps[0];
    for (auto& v : neg.values) v = -v;
    for (double v : aggregate_confidence({maps[0], neg}).values) CHECK(v == 0.0);
    const ConfidenceMap mean = aggregate_confidence(maps);
    for (std::size_t p = 0; p < 12; ++p) {
        double s = 0;
        for (const auto& m : maps) s += m.values[p];
        CHECK(mean.values[p] == doctest::Approx(s / 5).epsilon(1e-14));
    }
    CHECK_THROWS_AS(aggregate_confidence({maps[0], ConfidenceMap{2, 2, std::vector<double>(4)}}), ShapeError);
}

TEST_CASE("select_prompts") {
    ConfidenceMap s{6, 5, std::vector<double>(30, 0.2)};
    s.values[4 * 5 + 3] = 0.9;
    s.values[0] = -0.7;
    PromptPair p = select_prompts(s);
    CHECK(p.positive.x == 3);
    CHECK(p.positive.y == 4);
    CHECK(p.negative.x == 0);
    CHECK(p.negative.y == 0);
    CHECK(p.positive.score >= p.negative.score);

    const ConfidenceMap flat{3, 3, std::vector<double>(9, 0.5)};
    p = select_prompts(flat);
    CHECK(p.positive.x == 0);
    CHECK(p.positive.y == 0);
    CHECK(p.negative.x == 0);
    CHECK(p.negative.y == 0);

    // ties after the first occurrence do not move the choice
    ConfidenceMap ties{2, 3, {0.1, 0.8, 0.8, -0.2, 0.0, -0.2}};
    p = select_prompts(ties);
    CHECK(p.positive.x == 1);
    CHECK(p.negative.x == 0);
    CHECK(p.negative.y == 1);

    Rng rng(3);
    ConfidenceMap r{7, 9, std::vector<double>(63)};
    for (auto& v : r.values) v = rng.uniform(-1, 1);
    ConfidenceMap mono = r;
    for (auto& v : mono.values) v = std::exp(3 * v) - 2;
    const PromptPair a = select_prompts(r), b = select_prompts(mono);
    CHECK(a.positive.x == b.positive.x);
    CHECK(a.positive.y == b.positive.y);
    CHECK(a.negative.x == b.negative.x);
    CHECK(a.negative.y == b.negative.y);
    CHECK_THROWS_AS(select_prompts(ConfidenceMap{}), ValidationError);
}

TEST_CASE("reference scored against its own mask features puts the positive prompt inside") {
    const ImageBuffer img = disk_image(32);
    const BinaryMask mask = disk_mask(32, 32, 16, 16, 8);
    const FeatureMap f = extract_features_toy(img);
    const PromptPair p = select_prompts(mean_confidence(f, crop_foreground_features(f, mask)));
    CHECK(mask.at(p.positive.x, p.positive.y));
    CHECK_FALSE(mask.at(p.negative.x, p.negative.y));
}

TEST_CASE("prompt files and group manifests") {
    testutil::TempDir tmp("prompts");
    PromptPair p{{3, 4, 0.9}, {0, 1, -0.25}};
    emit_prompt_file(p, "view_003", tmp / "a.json");
    PromptRecord r = read_prompt_file(tmp / "a.json");
    CHECK(r.image == "view_003");
    CHECK(r.positive[0] == 3);
    CHECK(r.positive[1] == 4);
    CHECK(r.negative[0] == 0);
    CHECK(r.negative[1] == 1);
    CHECK(r.positive_score == 0.9);
    CHECK(r.negative_score == -0.25);

    // feature cell (3,4) of an 8x8 grid maps to the center of its 4x4 pixel block
    emit_prompt_file(p, "v", tmp / "b.json", 32, 32, 8, 8);
    r = read_prompt_file(tmp / "b.json");
    CHECK(r.positive[0] == 14);
    CHECK(r.positive[1] == 18);

    for (int i = 0; i < 20; ++i) emit_prompt_file(p, "view_" + std::to_string(i), tmp / ("p" + std::to_string(i) + ".json"));
    int records = 0;
    for (const auto& e : std::filesystem::directory_iterator(tmp.path()))
        if (e.path().filename().string().starts_with("p")) {
            (void)read_prompt_file(e.path());
            ++records;
        }
    CHECK(records == 20);

    {
        std::ofstream(tmp / "bad.json") << "{\"image\": 3}";
        std::ofstream(tmp / "group.json") << R"({"reference_view": "view_000", "target_views": ["view_001", "view_002"]})";
        std::ofstream(tmp / "badgroup.json") << R"({"reference_view": 1})";
    }
    CHECK_THROWS_AS(read_prompt_file(tmp / "bad.json"), FormatError);
    CHECK_THROWS_AS(read_prompt_file(tmp / "missing.json"), IoError);
    const GroupManifest g = read_group_manifest(tmp / "group.json");
    CHECK(g.reference_view == "view_000");
    REQUIRE(g.target_views.size() == 2);
    CHECK(g.target_views[1] == "view_002");
    CHECK_THROWS_AS(read_group_manifest(tmp / "badgroup.json"), FormatError);
}

TEST_CASE("denoise_mask") {
    BinaryMask single(9, 9);
    single.set(4, 4, true);
    CHECK(denoise_mask(single, 5).count() == 0);

    const BinaryMask base = denoise_mask(disk_mask(40, 40, 20, 20, 9), 1);
    CHECK(base.count() > 200);
    CHECK(denoise_mask(base, 1).data == base.data);

    BinaryMask noisy = base;
    Rng rng(6);
    int salted = 0;
    while (salted < 30) {
        const int x = static_cast<int>(rng.below(40)), y = static_cast<int>(rng.below(40));
        if (std::hypot(x - 20.0, y - 20.0) < 13) continue;
        noisy.set(x, y, true);
        ++salted;
    }
    CHECK(denoise_mask(noisy, 16).data == base.data);

    // random masks: output within the opening, no small components survive
    for (int trial = 0; trial < 10; ++trial) {
        BinaryMask m(24, 24);
        for (auto& d : m.data) d = rng.uniform() < 0.6;
        const BinaryMask opened = denoise_mask(m, 0);
        const BinaryMask out = denoise_mask(m, 12);
        for (std::size_t i = 0; i < out.data.size(); ++i)
            if (out.data[i]) CHECK(opened.data[i]);
        // every surviving pixel belongs to a 4-connected component of >= 12 pixels
        std::vector<int> seen(out.data.size(), 0);
        for (std::size_t s = 0; s < out.data.size(); ++s) {
            if (!out.data[s] || seen[s]) continue;
            std::vector<std::size_t> stack{s};
            seen[s] = 1;
            std::size_t size = 0;
            while (!stack.empty()) {
                const std::size_t p = stack.back();
                stack.pop_back();
                ++size;
                const int x = static_cast<int>(p % 24), y = static_cast<int>(p / 24);
                const int nx[4] = {x - 1, x + 1, x, x}, ny[4] = {y, y, y - 1, y + 1};
                for (int k = 0; k < 4; ++k) {
                    if (!out.in_bounds(nx[k], ny[k])) continue;
                    const std::size_t q = static_cast<std::size_t>(ny[k]) * 24 + nx[k];
                    if (out.data[q] && !seen[q]) {
                        seen[q] = 1;
                        stack.push_back(q);
                    }
                }
            }
            CHECK(size >= 12);
        }
    }
}

TEST_CASE("graham scan: fixtures") {
    auto hull = convex_hull_graham({{0, 0}, {4, 0}, {4, 4}, {0, 4}, {2, 2}});
    REQUIRE(hull.size() == 4);
    CHECK(hull[0] == Point2i{0, 0});
    CHECK(hull[1] == Point2i{4, 0});
    CHECK(hull[2] == Point2i{4, 4});
    CHECK(hull[3] == Point2i{0, 4});

    hull = convex_hull_graham({{1, 1}, {3, 3}, {2, 2}, {0, 0}, {5, 5}, {3, 3}});
    REQUIRE(hull.size() == 2);
    CHECK(std::set<Point2i>(hull.begin(), hull.end()) == std::set<Point2i>{{0, 0}, {5, 5}});

    hull = convex_hull_graham({{7, 2}, {7, 2}});
    REQUIRE(hull.size() == 1);
    CHECK(hull[0] == Point2i{7, 2});
    CHECK_THROWS_AS(convex_hull_graham({}), ValidationError);
}

TEST_CASE("graham scan agrees with the brute-force hull") {
    Rng rng(99);
    for (int trial = 0; trial < 500; ++trial) {
        const int n = 1 + static_cast<int>(rng.below(50));
        const long span = trial % 3 == 0 ? 4 : 12;  // small spans force duplicates and collinear runs
        std::vector<Point2i> pts;
        for (int i = 0; i < n; ++i) pts.push_back({static_cast<long>(rng.below(span)), static_cast<long>(rng.below(span))});
        const auto hull = convex_hull_graham(pts);
        CHECK(std::set<Point2i>(hull.begin(), hull.end()) == brute_hull(pts));
        if (hull.size() >= 3) {
            for (std::size_t i = 0; i < hull.size(); ++i)
                CHECK(cross(hull[i], hull[(i + 1) % hull.size()], hull[(i + 2) % hull.size()]) > 0);
            for (const auto& p : pts) CHECK(inside_convex(hull, p));
        }
    }
}

TEST_CASE("fill_hull: Pick's theorem, single point, triangle") {
    CHECK(fill_hull({{3, 2}}, 5, 5).count() == 1);
    CHECK(fill_hull({{3, 2}}, 5, 5).at(3, 2));
    CHECK_THROWS_AS(fill_hull({{5, 0}}, 5, 5), BoundsError);

    const BinaryMask seg = fill_hull({{0, 0}, {4, 2}}, 5, 5);
    CHECK(seg.count() == 3);  // lattice points on the segment
    CHECK(seg.at(2, 1));

    // Triangle with legs 10 and 6: A = 30, B = 10 + 6 + gcd(10, 6) = 18, lattice count A + B/2 + 1.
    const BinaryMask tri = fill_hull({{0, 0}, {10, 0}, {0, 6}}, 12, 12);
    CHECK(tri.count() == 40);
    CHECK(std::abs(static_cast<double>(tri.count()) - 30.0) <= 11.0);

    Rng rng(5);
    for (int trial = 0; trial < 200; ++trial) {
        std::vector<Point2i> pts;
        for (int i = 0; i < 12; ++i) pts.push_back({static_cast<long>(rng.below(30)), static_cast<long>(rng.below(30))});
        const auto hull = convex_hull_graham(pts);
        if (hull.size() < 3) continue;
        long twice_area = 0, boundary = 0;
        for (std::size_t i = 0; i < hull.size(); ++i) {
            const auto& a = hull[i];
            const auto& b = hull[(i + 1) % hull.size()];
            twice_area += a.x * b.y - b.x * a.y;
            boundary += gcd_len(a, b);
        }
        const BinaryMask filled = fill_hull(hull, 30, 30);
        CHECK(2 * static_cast<long>(filled.count()) == twice_area + boundary + 2);
        for (const auto& p : pts) CHECK(filled.at(static_cast<int>(p.x), static_cast<int>(p.y)));
    }
}

TEST_CASE("optimize_mask") {
    SUBCASE("clean rectangle is unchanged") {
        BinaryMask rect(20, 20);
        for (int y = 5; y < 15; ++y)
            for (int x = 3; x < 17; ++x) rect.set(x, y, true);
        CHECK(optimize_mask(rect).data == rect.data);
    }
    SUBCASE("two blobs merge into one convex region") {
        BinaryMask m = disk_mask(48, 48, 12, 12, 6);
        const BinaryMask other = disk_mask(48, 48, 34, 30, 7);
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= other.data[i];
        const BinaryMask clean = denoise_mask(m, 16);
        const BinaryMask out = optimize_mask(m);
        for (std::size_t i = 0; i < m.data.size(); ++i)
            if (clean.data[i]) CHECK(out.data[i]);
        CHECK(out.at(23, 21));  // between the blobs
    }
    SUBCASE("noisy fixture matches the oracle pipeline") {
        BinaryMask m = disk_mask(64, 64, 30, 28, 12);
        const BinaryMask lobe = disk_mask(64, 64, 42, 40, 6);
        for (std::size_t i = 0; i < m.data.size(); ++i) m.data[i] |= lobe.data[i];
        Rng rng(31);
        for (int k = 0; k < 60; ++k) m.set(static_cast<int>(rng.below(64)), static_cast<int>(rng.below(64)), true);
        for (int k = 0; k < 10; ++k) m.set(static_cast<int>(25 + rng.below(8)), static_cast<int>(25 + rng.below(8)), false);

        const BinaryMask clean = denoise_mask(m, 16);
        std::vector<Point2i> pts;
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x)
                if (clean.at(x, y)) pts.push_back({x, y});
        const auto hull = convex_hull_graham(pts);
        BinaryMask golden(64, 64);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) golden.set(x, y, inside_convex(hull, {x, y}));
        const BinaryMask out = optimize_mask(m);
        CHECK(out.data == golden.data);

        // idempotence up to a 1-px boundary band
        const BinaryMask again = optimize_mask(out);
        for (int y = 0; y < 64; ++y)
            for (int x = 0; x < 64; ++x) {
                if (again.at(x, y) == out.at(x, y)) continue;
                bool near_boundary = false;
                for (int dy = -1; dy <= 1; ++dy)
                    for (int dx = -1; dx <= 1; ++dx)
                        if (out.in_bounds(x + dx, y + dy) && out.at(x + dx, y + dy) != out.at(x, y)) near_boundary = true;
                CHECK(near_boundary);
            }
        CHECK(symmetric_difference(again, out) < out.count() / 10);
    }
    SUBCASE("empty result") { CHECK(optimize_mask(BinaryMask(8, 8)).count() == 0); }
}

TEST_CASE("mask PGM round trip") {
    testutil::TempDir tmp("mask");
    const BinaryMask m = disk_mask(13, 9, 6, 4, 3);
    write_mask(m, tmp / "m.pgm");
    CHECK(read_mask(tmp / "m.pgm").data == m.data);
}
