#include <doctest.h>

#include <cmath>
#include <functional>
#include <numeric>
#include <random>
#include <vector>

#include "bevtrack/analytics.hpp"
#include "bevtrack/error.hpp"
#include "field_counts.hpp"

using namespace bevtrack;

namespace {

Track path_track(int id, const std::vector<std::pair<int, Point2>>& pts, const std::string& cls = "car") {
    Track t;
    t.id = id;
    t.cls = cls;
    for (const auto& [f, p] : pts) {
        BevDetection d;
        d.frame = f;
        d.cls = cls;
        d.center = p;
        d.bbox = BBox::centered(p, 20, 13);
        d.score = 0.9;
        KalmanState s;
        s.mean << p.x, p.y, 0, 0;
        t.append(d, s, AssocStage::First);
    }
    return t;
}

// Track whose x position follows pos(t) at the given fps; y fixed.
Track timed_track(int id, int f0, int f1, double fps, double y, const std::function<double(double)>& pos,
                  const std::string& cls = "car") {
    std::vector<std::pair<int, Point2>> pts;
    for (int f = f0; f <= f1; ++f) pts.push_back({f, {pos(f / fps), y}});
    return path_track(id, pts, cls);
}

Errc code_of(auto&& fn) {
    try {
        fn();
    } catch (const Error& e) {
        return e.code();
    }
    FAIL("expected an error");
    return Errc::IoError;
}

}  // namespace

TEST_CASE("direction_of") {
    auto a = direction_of(path_track(1, {{0, {0, 0}}, {1, {0, 100}}}));
    CHECK(a.direction == 1);
    CHECK(a.bearing_deg == doctest::Approx(90.0));
    auto b = direction_of(path_track(1, {{0, {0, 100}}, {1, {0, 0}}}));
    CHECK(b.direction == 2);
    CHECK(b.bearing_deg == doctest::Approx(270.0));
    auto c = direction_of(path_track(1, {{0, {50, 50}}, {1, {10, 48}}}));
    CHECK(c.direction == 2);
    CHECK(code_of([] { direction_of(path_track(1, {{0, {5, 5}}, {1, {5, 5}}})); }) == Errc::TooShort);
}

TEST_CASE("property: direction_of is invariant to uniform scaling") {
    std::mt19937_64 rng(2);
    std::uniform_real_distribution<double> u(-300.0, 300.0);
    std::uniform_real_distribution<double> s(0.1, 10.0);
    for (int i = 0; i < 500; ++i) {
        const Point2 p{u(rng), u(rng)}, q{u(rng), u(rng)};
        if (std::hypot(q.x - p.x, q.y - p.y) < 20.0) continue;
        const double k = s(rng);
        const auto a = direction_of(path_track(1, {{0, p}, {1, q}}), 1e-6);
        const auto b = direction_of(path_track(1, {{0, k * p}, {1, k * q}}), 1e-6);
        CHECK(a.direction == b.direction);
        CHECK(a.bearing_deg == doctest::Approx(b.bearing_deg));
    }
}

TEST_CASE("detect_lanes") {
    std::mt19937_64 rng(6);
    std::normal_distribution<double> n10(10.0, 1.0), n22(22.0, 1.0);
    std::vector<Track> two;
    for (int i = 0; i < 40; ++i) {
        std::vector<std::pair<int, Point2>> pts;
        for (int f = 0; f < 30; ++f) pts.push_back({f, {5.0 * f, i % 2 == 0 ? n10(rng) : n22(rng)}});
        two.push_back(path_track(i + 1, pts));
    }
    const auto m = detect_lanes(two, 1);
    CHECK(m.axis == Axis::Y);
    REQUIRE(m.centers.size() == 2);
    CHECK(std::abs(m.centers[0] - 10.0) <= 1.0);
    CHECK(std::abs(m.centers[1] - 22.0) <= 1.0);

    std::vector<Track> one(two.begin(), two.end());
    std::erase_if(one, [](const Track& t) { return t.id % 2 == 0; });
    CHECK(detect_lanes(one, 1).centers.size() == 1);

    CHECK(code_of([] { detect_lanes(std::vector<Track>{}, 1); }) == Errc::NoLanesFound);
    // No track travels in direction 2.
    CHECK(code_of([&] { detect_lanes(two, 2); }) == Errc::NoLanesFound);
}

TEST_CASE("assign_lane") {
    LaneModel m;
    m.axis = Axis::Y;
    m.centers = {10.0, 22.0};
    m.width = 12.0;
    auto at = [](std::vector<double> ys) {
        std::vector<std::pair<int, Point2>> pts;
        for (std::size_t i = 0; i < ys.size(); ++i) pts.push_back({static_cast<int>(i), {10.0 * i, ys[i]}});
        return path_track(1, pts);
    };
    CHECK(m.center_of(assign_lane(at({10.4, 10.4, 10.4}), m)) == 10.0);
    CHECK(assign_lane(at({16.0, 16.0, 16.0}), m) == 1);
    // 7 of 10 samples in the lane at 22.
    CHECK(m.center_of(assign_lane(at({10, 10, 10, 22, 22, 22, 22, 22, 22, 22}), m)) == 22.0);

    // Lane 1 is the innermost: the largest center when lane1_at_high.
    m.lane1_at_high = true;
    CHECK(m.center_of(1) == 22.0);
    CHECK(assign_lane(at({16.0, 16.0}), m) == 1);
}

TEST_CASE("kinematics_series") {
    const double fps = 15.0;
    const auto cal = CalibrationModel::uniform(800, 200, 1.0, 1.0);
    SUBCASE("88 ft/s is 60 mph") {
        const auto t = timed_track(1, 0, 90, fps, 100, [](double s) { return 10.0 + 88.0 * s; });
        const auto k = kinematics_series(t, cal, fps);
        REQUIRE(k.speed_mph.size() == 90);
        for (const auto& [time, v] : k.speed_mph) CHECK(v == doctest::Approx(60.0).epsilon(1e-12));
        REQUIRE(!k.accel_mps2.empty());
        for (const auto& [time, a] : k.accel_mps2) CHECK(std::abs(a) < 1e-9);
    }
    SUBCASE("single state") {
        CHECK(code_of([&] { kinematics_series(path_track(1, {{0, {0, 0}}}), cal, fps); }) == Errc::TooShort);
    }
    SUBCASE("ramp through the full pipeline of a track") {
        // 60 mph at t=1 s rising 2 mph/s; 1 ft per px.
        const auto pos = [](double s) {
            const double u = s - 1.0;
            return 100.0 + 88.0 * u + 0.5 * (2.0 / kFtPerSecToMph) * u * u;
        };
        const auto t = timed_track(1, 0, 7 * 15, fps, 100, pos);
        const auto k = kinematics_series(t, cal, fps);
        // Speeds within half a smoothing window of either end are biased.
        const double lo = k.speed_mph.front().first + 0.5;
        const double hi = k.speed_mph.back().first - 0.5;
        int interior = 0;
        for (const auto& [time, a] : k.accel_mps2) {
            if (time - 2.5 < lo || time + 2.5 > hi) continue;
            ++interior;
            CHECK(std::abs(a - 0.89408) <= 1e-9);
        }
        CHECK(interior >= 10);
    }
}

TEST_CASE("acceleration_series on a 60 to 70 mph ramp") {
    std::vector<std::pair<double, double>> v;
    for (int i = 0; i <= 50; ++i) v.push_back({i / 10.0, 60.0 + 2.0 * (i / 10.0)});
    const auto a = acceleration_series(v, 5.0);
    REQUIRE(a.size() == 1);
    CHECK(a[0].first == doctest::Approx(2.5));
    CHECK(std::abs(a[0].second - 0.89408) <= 1e-9);

    const std::vector<std::pair<double, double>> short_series(v.begin(), v.begin() + 50);
    CHECK(acceleration_series(short_series, 5.0).empty());
}

TEST_CASE("space_mean_speed") {
    const std::vector<double> a{60, 30};
    CHECK(space_mean_speed(a) == 40.0);
    const std::vector<double> b{57.5};
    CHECK(space_mean_speed(b) == 57.5);
    const std::vector<double> c{50, 50, 50};
    CHECK(space_mean_speed(c) == doctest::Approx(50.0));
    const std::vector<double> z{50, 0};
    CHECK(code_of([&] { space_mean_speed(z); }) == Errc::ZeroSpeed);
}

TEST_CASE("property: harmonic mean never exceeds arithmetic mean") {
    std::mt19937_64 rng(99);
    std::uniform_real_distribution<double> v(1.0, 90.0);
    std::uniform_int_distribution<int> n(1, 40);
    for (int i = 0; i < 1000; ++i) {
        std::vector<double> s(static_cast<std::size_t>(n(rng)));
        for (auto& x : s) x = v(rng);
        const double am = std::accumulate(s.begin(), s.end(), 0.0) / s.size();
        CHECK(space_mean_speed(s) <= am * (1.0 + 1e-12));
    }
}

TEST_CASE("error_rate") {
    CHECK(round_to(error_rate(542, 548), 2) == doctest::Approx(1.09));
    CHECK(round_to(error_rate(442, 440), 2) == doctest::Approx(0.45));
    CHECK(error_rate(17, 17) == 0.0);
    CHECK(code_of([] { error_rate(3, 0); }) == Errc::ZeroDenominator);
    for (const auto& row : testsupport::kFieldCounts) {
        for (const auto& [est, er] : row.cells) {
            CHECK(std::abs(error_rate(est, row.real) - er) <= 0.005 + 1e-9);
        }
    }
}

TEST_CASE("directional_counts") {
    CHECK(directional_counts(std::vector<VehicleRecord>{}).empty());
    std::vector<VehicleRecord> r;
    for (int i = 0; i < 3; ++i) r.push_back({.id = i, .cls = "car", .direction = 1, .lane = 1 + i % 2});
    for (int i = 0; i < 2; ++i) r.push_back({.id = 10 + i, .cls = "truck", .direction = 2, .lane = 1});
    const auto c = directional_counts(r);
    CHECK(c.at({1, "car", 1}) == 2);
    CHECK(c.at({1, "car", 2}) == 1);
    CHECK(c.at({2, "truck", 1}) == 2);
    CHECK(c.size() == 3);
}

TEST_CASE("analyze_tracks on a two-direction scene") {
    const double fps = 15.0;
    const auto cal = CalibrationModel::uniform(800, 200, 0.5, 0.5);
    std::vector<Track> tracks;
    int id = 1;
    const double lanes1[] = {120, 150, 180};
    const double lanes2[] = {80, 50, 20};
    for (int k = 0; k < 12; ++k) {
        const double v = 140.0 + 10.0 * (k % 3);  // px/s
        const int f0 = k * 20;
        tracks.push_back(timed_track(id++, f0, f0 + 60, fps, lanes1[k % 3],
                                     [=](double s) { return 20.0 + v * (s - f0 / fps); }, k % 4 == 0 ? "truck" : "car"));
        tracks.push_back(timed_track(id++, f0 + 5, f0 + 65, fps, lanes2[k % 3],
                                     [=](double s) { return 780.0 - v * (s - (f0 + 5) / fps); }));
    }
    tracks.push_back(path_track(id++, {{3, {400, 100}}, {4, {401, 100}}}));  // barely moves

    const auto res = analyze_tracks(tracks, cal, fps, 20.0);
    CHECK(res.records.size() == 24);
    CHECK(res.summary.excluded_tracks == 1);
    CHECK(res.summary.duration_s == 20.0);
    REQUIRE(res.lanes.size() == 2);
    CHECK(res.lanes.at(1).centers.size() == 3);
    CHECK(res.lanes.at(2).centers.size() == 3);
    CHECK(res.lanes.at(1).center_of(1) == doctest::Approx(120.0).epsilon(0.01));
    CHECK(res.lanes.at(2).center_of(1) == doctest::Approx(80.0).epsilon(0.01));

    for (const auto& r : res.records) {
        const double y = r.direction == 1 ? lanes1[r.lane - 1] : lanes2[r.lane - 1];
        const auto& t = tracks[static_cast<std::size_t>(r.id - 1)];
        CHECK(t.entries.front().det.center.y == y);
        CHECK(r.last_frame > r.first_frame);
        // px/s * 0.5 ft/px -> mph
        const double truth = (140.0 + 10.0 * ((r.id - 1) / 2 % 3)) * 0.5 * kFtPerSecToMph;
        CHECK(r.mean_speed == doctest::Approx(truth).epsilon(0.02));
    }
    for (int dir = 1; dir <= 2; ++dir) {
        for (const std::string cls : {"car", "truck"}) {
            int lanes = 0;
            for (const auto& [key, n] : res.summary.counts) {
                if (std::get<0>(key) == dir && std::get<1>(key) == cls) lanes += n;
            }
            int direct = 0;
            for (const auto& r : res.records) direct += r.direction == dir && r.cls == cls ? 1 : 0;
            CHECK(lanes == direct);
            CHECK(res.summary.total(dir, cls) == direct);
        }
        CHECK(res.summary.directions.at(dir).vehicles == 12);
    }
    CHECK(res.summary.total(1, "truck") == 3);
    const double expect = space_mean_speed(std::vector<double>{
        140 * 0.5 * kFtPerSecToMph, 150 * 0.5 * kFtPerSecToMph, 160 * 0.5 * kFtPerSecToMph});
    CHECK(res.summary.directions.at(2).space_mean_speed_mph == doctest::Approx(expect).epsilon(1e-6));
}
