#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <random>
#include <vector>

#include <Eigen/Dense>

#include "bevtrack/error.hpp"
#include "bevtrack/feature_flow.hpp"

using namespace bevtrack;

namespace {

std::vector<std::uint8_t> bytes(const std::string& header, std::initializer_list<int> payload) {
    std::vector<std::uint8_t> out(header.begin(), header.end());
    for (int v : payload) out.push_back(static_cast<std::uint8_t>(v));
    return out;
}

GrayFrame square_frame(int n, int lo, int hi) {
    GrayFrame f(n, n, 0);
    for (int y = lo; y < hi; ++y) {
        for (int x = lo; x < hi; ++x) f.at(x, y) = 255;
    }
    return f;
}

// Smooth texture sampled at (x - sx, y - sy): a shifted copy is exact.
struct Texture {
    struct Wave {
        double kx, ky, phase, amp;
    };
    std::vector<Wave> waves;

    explicit Texture(std::uint64_t seed) {
        std::mt19937_64 rng(seed);
        std::uniform_real_distribution<double> k(0.15, 0.6);
        std::uniform_real_distribution<double> sgn(-1.0, 1.0);
        std::uniform_real_distribution<double> ph(0.0, 6.283);
        for (int i = 0; i < 8; ++i) waves.push_back({k(rng) * (sgn(rng) < 0 ? -1 : 1), k(rng), ph(rng), 12.0});
    }

    GrayFrame render(int w, int h, double sx, double sy) const {
        GrayFrame f(w, h);
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double v = 128.0;
                for (const auto& wv : waves) v += wv.amp * std::sin(wv.kx * (x - sx) + wv.ky * (y - sy) + wv.phase);
                f.at(x, y) = static_cast<std::uint8_t>(std::clamp(std::lround(v), 0L, 255L));
            }
        }
        return f;
    }
};

// Harris response via separable Sobel filters and an explicit 3x3 window sum.
Eigen::MatrixXd oracle_response(const GrayFrame& f, double k) {
    const int w = f.width;
    const int h = f.height;
    Eigen::MatrixXd img(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) img(y, x) = f.at(x, y) / 255.0;
    }
    Eigen::MatrixXd gx = Eigen::MatrixXd::Zero(h, w);
    Eigen::MatrixXd gy = Eigen::MatrixXd::Zero(h, w);
    for (int y = 1; y < h - 1; ++y) {
        for (int x = 1; x < w - 1; ++x) {
            const Eigen::Vector3d smooth(1, 2, 1);
            const Eigen::Vector3d diff(-1, 0, 1);
            const Eigen::Matrix3d patch = img.block(y - 1, x - 1, 3, 3);
            gx(y, x) = smooth.dot(patch * diff);
            gy(y, x) = diff.dot(patch * smooth);
        }
    }
    Eigen::MatrixXd r = Eigen::MatrixXd::Zero(h, w);
    for (int y = 2; y < h - 2; ++y) {
        for (int x = 2; x < w - 2; ++x) {
            const auto bx = gx.block(y - 1, x - 1, 3, 3).array();
            const auto by = gy.block(y - 1, x - 1, 3, 3).array();
            const double a = (bx * bx).sum();
            const double b = (by * by).sum();
            const double c = (bx * by).sum();
            r(y, x) = a * b - c * c - k * (a + b) * (a + b);
        }
    }
    return r;
}

double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace

TEST_CASE("decode_pgm") {
    const auto f = decode_pgm(bytes("P5 2 2 255\n", {0, 64, 128, 255}));
    CHECK(f.width == 2);
    CHECK(f.height == 2);
    CHECK(f.data == std::vector<std::uint8_t>{0, 64, 128, 255});
    const auto c = decode_pgm(bytes("P5\n# comment\n2 1\n# more\n255\n", {7, 9}));
    CHECK(c.data == std::vector<std::uint8_t>{7, 9});

    CHECK_THROWS_AS(decode_pgm(bytes("P6 2 2 255\n", {0, 0, 0, 0})), Error);
    CHECK_THROWS_AS(decode_pgm(bytes("P5 2 2 255\n", {0, 0, 0})), Error);
    CHECK_THROWS_AS(decode_pgm(bytes("P5 0 2 255\n", {})), Error);
    CHECK_THROWS_AS(decode_pgm(bytes("P5 2 2 65535\n", {0, 0, 0, 0})), Error);
    try {
        decode_pgm(bytes("P2 1 1 255\n", {0}));
        FAIL("expected Malformed");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::Malformed);
    }

    GrayFrame g(5, 3, 17);
    g.at(4, 2) = 200;
    CHECK(decode_pgm(encode_pgm(g)).data == g.data);
    CHECK(frame_filename(42) == "frame_000042.pgm");
}

TEST_CASE("harris_corners on flat and square images") {
    const GrayFrame flat(64, 64, 90);
    CHECK(harris_corners(flat, {0, 0, 64, 64}, 25).empty());

    const GrayFrame sq = square_frame(64, 20, 44);
    const auto corners = harris_corners(sq, {0, 0, 64, 64}, 25);
    REQUIRE(corners.size() == 4);
    const std::vector<Point2> truth{{19.5, 19.5}, {43.5, 19.5}, {19.5, 43.5}, {43.5, 43.5}};
    for (const auto& t : truth) {
        double best = 1e9;
        for (const auto& c : corners) best = std::min(best, std::hypot(c.pos.x - t.x, c.pos.y - t.y));
        CHECK(best <= 1.5);
    }

    // Exhaustive oracle: each emitted corner sits on a strict local maximum of
    // the independently computed response map, above the quality threshold.
    const Eigen::MatrixXd r = oracle_response(sq, 0.04);
    const double rmax = r.maxCoeff();
    for (const auto& c : corners) {
        CHECK(c.response > 0.0);
        const int x = static_cast<int>(std::lround(c.pos.x));
        const int y = static_cast<int>(std::lround(c.pos.y));
        CHECK(r(y, x) > 0.01 * rmax);
        CHECK(r(y, x) >= r.block(y - 1, x - 1, 3, 3).maxCoeff());
    }
}

TEST_CASE("harris corner count is invariant under 90 degree rotation") {
    GrayFrame f(80, 80, 20);
    for (int y = 15; y < 35; ++y) {
        for (int x = 10; x < 50; ++x) f.at(x, y) = 220;
    }
    for (int y = 45; y < 70; ++y) {
        for (int x = 40; x < 60; ++x) f.at(x, y) = 160;
    }
    GrayFrame rot(80, 80);
    for (int y = 0; y < 80; ++y) {
        for (int x = 0; x < 80; ++x) rot.at(79 - y, x) = f.at(x, y);
    }
    const auto a = harris_corners(f, {0, 0, 80, 80}, 100);
    const auto b = harris_corners(rot, {0, 0, 80, 80}, 100);
    CHECK(!a.empty());
    CHECK(a.size() == b.size());
}

TEST_CASE("property: emitted corners are positive and separated") {
    const Texture tex(3);
    const GrayFrame f = tex.render(96, 96, 0, 0);
    const auto pts = harris_corners(f, {8, 8, 80, 80}, 60);
    REQUIRE(pts.size() > 4);
    for (std::size_t i = 0; i < pts.size(); ++i) {
        CHECK(pts[i].response > 0.0);
        if (i > 0) CHECK(pts[i].response <= pts[i - 1].response);
        for (std::size_t j = i + 1; j < pts.size(); ++j) {
            CHECK(std::hypot(pts[i].pos.x - pts[j].pos.x, pts[i].pos.y - pts[j].pos.y) > 1.0);
        }
    }
}

TEST_CASE("lk_track") {
    const Texture tex(11);
    const GrayFrame a = tex.render(96, 96, 0, 0);
    const auto pts = harris_corners(a, {20, 20, 56, 56}, 25);
    REQUIRE(pts.size() >= 5);

    SUBCASE("identical frames") {
        const auto out = lk_track(a, a, pts);
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (!out[i].valid) continue;
            CHECK(std::abs(out[i].pos.x - pts[i].pos.x) < 1e-6);
            CHECK(std::abs(out[i].pos.y - pts[i].pos.y) < 1e-6);
        }
    }
    SUBCASE("shift by (2, 0)") {
        const GrayFrame b = tex.render(96, 96, 2, 0);
        const auto out = lk_track(a, b, pts);
        std::vector<double> dx, dy;
        double before = 0.0, after = 0.0;
        int n = 0;
        for (std::size_t i = 0; i < pts.size(); ++i) {
            if (!out[i].valid) continue;
            dx.push_back(out[i].pos.x - pts[i].pos.x);
            dy.push_back(out[i].pos.y - pts[i].pos.y);
            const int px = static_cast<int>(std::lround(pts[i].pos.x));
            const int py = static_cast<int>(std::lround(pts[i].pos.y));
            const int qx = static_cast<int>(std::lround(out[i].pos.x));
            const int qy = static_cast<int>(std::lround(out[i].pos.y));
            before += std::abs(b.at(px, py) - a.at(px, py));
            after += std::abs(b.at(qx, qy) - a.at(px, py));
            ++n;
        }
        REQUIRE(n >= 5);
        CHECK(std::abs(median(dx) - 2.0) <= 0.25);
        CHECK(std::abs(median(dy)) <= 0.25);
        CHECK(after / n <= before / n);
    }
    SUBCASE("textureless point") {
        const GrayFrame flat(64, 64, 100);
        const std::vector<FeaturePoint> p{{{32, 32}, 1.0}};
        CHECK_FALSE(lk_track(flat, flat, p)[0].valid);
    }
    SUBCASE("size mismatch") {
        const GrayFrame small(32, 32);
        try {
            lk_track(a, small, pts);
            FAIL("expected DimensionMismatch");
        } catch (const Error& e) {
            CHECK(e.code() == Errc::DimensionMismatch);
        }
    }
}

TEST_CASE("predict_displacement") {
    const Texture tex(5);
    const Homography id;
    std::vector<GrayFrame> moving, still;
    for (int i = 0; i <= 5; ++i) {
        moving.push_back(tex.render(120, 96, i, 0));
        still.push_back(tex.render(120, 96, 0, 0));
    }
    const auto seeds = harris_corners(moving[0], {30, 20, 50, 56}, 25);
    REQUIRE(!seeds.empty());

    const auto zero = predict_displacement(still, seeds, id, {60, 48});
    CHECK(std::abs(zero.image.x) < 1e-6);
    CHECK(std::abs(zero.image.y) < 1e-6);

    const auto d = predict_displacement(moving, seeds, id, {60, 48});
    CHECK(std::abs(d.image.x - 5.0) <= 0.5);
    CHECK(std::abs(d.image.y) <= 0.5);
    CHECK(d.bev.x == doctest::Approx(d.image.x));

    // BEV displacement is the warped image displacement at the anchor.
    Eigen::Matrix3d m;
    m << 2, 0, 10, 0, 3, -4, 0, 0, 1;
    const auto scaled = predict_displacement(moving, seeds, Homography::from_matrix(m), {60, 48});
    CHECK(scaled.bev.x == doctest::Approx(2.0 * scaled.image.x));
    CHECK(scaled.bev.y == doctest::Approx(3.0 * scaled.image.y));

    const GrayFrame flat(120, 96, 50);
    const std::vector<GrayFrame> blank{flat, flat, flat};
    const std::vector<FeaturePoint> dead{{{60, 48}, 1.0}, {{30, 30}, 1.0}};
    try {
        predict_displacement(blank, dead, id, {60, 48});
        FAIL("expected NoValidPoints");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::NoValidPoints);
    }
}

TEST_CASE("property: displacement is equivariant to integer translation") {
    const Texture tex(21);
    const Homography id;
    for (int t = 1; t <= 4; ++t) {
        std::vector<GrayFrame> fr;
        for (int i = 0; i <= 3; ++i) fr.push_back(tex.render(120, 96, i * t * 0.5, 0));
        std::vector<GrayFrame> shifted;
        for (int i = 0; i <= 3; ++i) shifted.push_back(tex.render(120, 96, i * t * 0.5, t));
        const auto seeds = harris_corners(fr[0], {30, 20, 50, 50}, 25);
        std::vector<FeaturePoint> moved = seeds;
        for (auto& s : moved) s.pos.y += t;
        const auto a = predict_displacement(fr, seeds, id, {60, 48});
        const auto b = predict_displacement(shifted, moved, id, {60, 48 + static_cast<double>(t)});
        CHECK(std::abs(a.image.x - b.image.x) <= 0.5);
        CHECK(std::abs(a.image.y - b.image.y) <= 0.5);
        CHECK(std::abs(a.image.x - 1.5 * t) <= 0.5);
    }
}
