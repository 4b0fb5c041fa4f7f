#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <iterator>
#include <sstream>
#include <string>

#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"
#include "bevtrack/pipeline.hpp"

using namespace bevtrack;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
    const fs::path p = fs::temp_directory_path() / ("bevtrack_test_" + name);
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

std::size_t parse_error_line(const std::string& text) {
    std::istringstream in(text);
    try {
        parse_detections(in);
    } catch (const ParseError& e) {
        return e.line();
    }
    FAIL("expected a parse error");
    return 0;
}

SynthSpec basic_spec() {
    SynthSpec s;
    s.seed = 7;
    return s;
}

}  // namespace

TEST_CASE("parse_detections") {
    std::istringstream in(R"({"frame": 0, "cls": "car", "bbox": [10, 20, 30, 15], "score": 0.93}

{"frame": 0, "cls": "truck", "bbox": [1.5, 2, 3, 4], "score": 1}
{"frame": 2, "cls": "car", "bbox": [0, 0, 0, 0], "score": 0})");
    const auto d = parse_detections(in);
    REQUIRE(d.size() == 3);
    CHECK(d[0] == Detection{0, "car", {10, 20, 30, 15}, 0.93});
    CHECK(d[1].cls == "truck");
    CHECK(d[2].frame == 2);
    CHECK(frame_groups(d) == std::vector<std::pair<std::size_t, std::size_t>>{{0, 2}, {2, 3}});

    const std::string ok = R"({"frame": 5, "cls": "car", "bbox": [1, 1, 2, 2], "score": 0.5})";
    CHECK(parse_error_line(ok + "\n" + R"({"frame": 5, "cls": "car", "bbox": [1, 1, 2, 2], "score": 1.2})") == 2);
    CHECK(parse_error_line(ok + "\n" + R"({"frame": 3, "cls": "car", "bbox": [1, 1, 2, 2], "score": 0.5})") == 2);
    CHECK(parse_error_line(ok + "\n\n" + R"({"frame": 6, "cls": "car", "bbox": [1, 1, -2, 2], "score": 0.5})") == 3);
    CHECK(parse_error_line(R"({"frame": 1, "cls": "car", "bbox": [1, 1, 2], "score": 0.5})") == 1);
    CHECK(parse_error_line(R"({"frame": -1, "cls": "car", "bbox": [1, 1, 2, 2], "score": 0.5})") == 1);
    CHECK(parse_error_line(R"({"frame": 1.5, "cls": "car", "bbox": [1, 1, 2, 2], "score": 0.5})") == 1);
    CHECK(parse_error_line(R"({"frame": 1, "cls": "", "bbox": [1, 1, 2, 2], "score": 0.5})") == 1);
    CHECK(parse_error_line(R"({"frame": 1, "bbox": [1, 1, 2, 2], "score": 0.5})") == 1);
    CHECK(parse_error_line("not json") == 1);
}

TEST_CASE("detections round trip") {
    const auto scene = gen_synthetic_scene(basic_spec(), example_scene());
    std::ostringstream out;
    write_detections(out, scene.detections);
    std::istringstream in(out.str());
    const auto back = parse_detections(in);
    REQUIRE(back.size() == scene.detections.size());
    for (std::size_t i = 0; i < back.size(); ++i) CHECK(back[i] == scene.detections[i]);
}

TEST_CASE("scene configuration") {
    const SceneConfig ex = example_scene();
    CHECK_NOTHROW(validate(ex));
    const auto j = scene_to_json(ex);
    const SceneConfig back = scene_from_json(j);
    CHECK(scene_to_json(back) == j);

    auto bad = j;
    bad["unexpected"] = 1;
    CHECK_THROWS_AS(scene_from_json(bad), Error);
    bad = j;
    bad["fps"] = 0;
    CHECK_THROWS_AS(scene_from_json(bad), Error);

    SceneConfig both = ex;
    both.roi = scene_correspondences(ex);
    CHECK_THROWS_AS(validate(both), Error);

    // The BYTE coasting budget follows the frame rate unless given.
    auto fps30 = j;
    fps30["fps"] = 30;
    fps30.erase("byte");
    CHECK(scene_from_json(fps30).byte.max_coast == 30);

    // The four corners of the region map to the BEV rectangle corners.
    const auto h = scene_homography(ex);
    const auto corr = scene_correspondences(ex);
    for (const auto& c : corr) {
        const auto p = h.apply(c.src);
        CHECK(p.x == doctest::Approx(c.dst.x).scale(1.0).epsilon(1e-9));
        CHECK(p.y == doctest::Approx(c.dst.y).scale(1.0).epsilon(1e-9));
    }
    CHECK(parse_tracker_kind("motpy") == TrackerKind::Motpy);
    CHECK(to_string(TrackerKind::Byte) == "byte");
    CHECK_THROWS_AS(parse_tracker_kind("sort"), Error);
}

TEST_CASE("invert_measurement reproduces the requested BEV box") {
    const auto cfg = example_scene();
    const auto h = scene_homography(cfg);
    for (double x : {30.0, 200.0, 500.0, 770.0}) {
        for (double y : {20.0, 100.0, 180.0}) {
            const double w = 18.0 + 0.005 * x;
            const double hh = 12.0 + 0.01 * y;
            const auto m = measure_bev(h, invert_measurement(h, {x, y}, w, hh));
            CHECK(m.center.x == doctest::Approx(x).epsilon(1e-9));
            CHECK(m.center.y == doctest::Approx(y).epsilon(1e-9));
            CHECK(m.w == doctest::Approx(w).epsilon(1e-9));
            CHECK(m.h == doctest::Approx(hh).epsilon(1e-9));
        }
    }
}

TEST_CASE("synthetic generation is deterministic") {
    const auto a = gen_synthetic_scene(basic_spec(), example_scene());
    const auto b = gen_synthetic_scene(basic_spec(), example_scene());
    CHECK(a.detections == b.detections);
    CHECK(truth_to_json(a.truth) == truth_to_json(b.truth));
    auto other = basic_spec();
    other.seed = 8;
    CHECK_FALSE(gen_synthetic_scene(other, example_scene()).detections == a.detections);
    CHECK(truth_to_json(truth_from_json(truth_to_json(a.truth))) == truth_to_json(a.truth));
    const auto spec_json = synth_spec_to_json(basic_spec());
    CHECK(synth_spec_to_json(synth_spec_from_json(spec_json)) == spec_json);
}

TEST_CASE("perfect synthetic scene with BYTE") {
    const auto cfg = example_scene();
    const auto scene = gen_synthetic_scene(basic_spec(), cfg);
    CHECK(scene.truth.counts.at({1, "car"}) == 50);
    CHECK(scene.truth.counts.at({2, "car"}) == 50);
    const auto res = run_pipeline(cfg, scene.detections);
    CHECK(res.analytics.summary.total(1, "car") == 50);
    CHECK(res.analytics.summary.total(2, "car") == 50);
    const auto m = evaluate_tracks(res.tracks, scene.truth);
    CHECK(m.id_switches == 0);
    CHECK(m.split_vehicles == 0);
    CHECK(m.unmatched_detections == 0);
    CHECK(m.error_rate_pct.at(1) == 0.0);
    CHECK(m.error_rate_pct.at(2) == 0.0);
    CHECK_FALSE(res.diagnostics.calibration_fallback);
    for (const auto& r : res.analytics.records) CHECK(r.mean_speed == doctest::Approx(60.0).epsilon(0.02));
    // Lane assignment agrees with the generator.
    std::map<int, int> lane_of;
    for (const auto& v : scene.truth.vehicles) lane_of[v.id] = v.lane;
    for (const auto& t : res.tracks) {
        const int truth_id = scene.truth.detection_ids[static_cast<std::size_t>(t.entries.front().det.source)];
        const auto it = std::find_if(res.analytics.records.begin(), res.analytics.records.end(),
                                     [&](const VehicleRecord& r) { return r.id == t.id; });
        REQUIRE(it != res.analytics.records.end());
        CHECK(it->lane == lane_of.at(truth_id));
    }
}

TEST_CASE("dropout windows shorter than one second are stitched") {
    auto cfg = example_scene();
    cfg.byte.max_coast = 0;
    auto spec = basic_spec();
    spec.dropout_prob = 1.0;
    spec.dropout_min_frames = 3;
    spec.dropout_max_frames = 14;
    const auto scene = gen_synthetic_scene(spec, cfg);
    int with_gap = 0;
    for (const auto& v : scene.truth.vehicles) {
        CHECK(v.dropped < cfg.fps);
        with_gap += v.dropped > 0 ? 1 : 0;
    }
    CHECK(with_gap >= 90);

    cfg.stitching = false;
    const auto raw = evaluate_tracks(run_pipeline(cfg, scene.detections).tracks, scene.truth);
    CHECK(raw.split_vehicles == with_gap);

    cfg.stitching = true;
    const auto res = run_pipeline(cfg, scene.detections);
    const auto m = evaluate_tracks(res.tracks, scene.truth);
    CHECK(res.diagnostics.tracks_before_stitching > res.diagnostics.tracks_after_stitching);
    CHECK(m.split_vehicles <= raw.split_vehicles / 10);
    CHECK(m.error_rate_pct.at(1) <= 5.0);
    CHECK(m.error_rate_pct.at(2) <= 5.0);
}

TEST_CASE("stitching with optical flow on rendered frames") {
    auto cfg = example_scene();
    cfg.byte.max_coast = 0;
    auto spec = basic_spec();
    spec.classes[0].per_direction = 20;
    spec.dropout_prob = 1.0;
    spec.dropout_min_frames = 3;
    spec.dropout_max_frames = 14;
    const auto scene = gen_synthetic_scene(spec, cfg);
    const fs::path frames = scratch("frames");
    render_frames(cfg, scene.detections, scene.truth, frames, spec.seed);
    const auto first = read_pgm(frames / frame_filename(scene.detections.front().frame));
    CHECK(first.width == 320);
    CHECK(first.height == 240);

    cfg.frames_dir = frames.string();
    const auto res = run_pipeline(cfg, scene.detections);
    const auto m = evaluate_tracks(res.tracks, scene.truth);
    CHECK(res.diagnostics.tracks_before_stitching == 80);
    CHECK(m.split_vehicles == 0);
    CHECK(m.id_switches == 0);

    // Missing frames leave the kinematic prediction in charge.
    cfg.frames_dir = (frames / "absent").string();
    CHECK(evaluate_tracks(run_pipeline(cfg, scene.detections).tracks, scene.truth).split_vehicles == 0);
    fs::remove_all(frames);
}

TEST_CASE("empty detection stream") {
    const auto res = run_pipeline(example_scene(), std::vector<Detection>{});
    CHECK(res.tracks.empty());
    CHECK(res.analytics.records.empty());
    CHECK(res.analytics.summary.counts.empty());
    CHECK(res.diagnostics.calibration_fallback);
    CHECK(res.diagnostics.calibration_note.find("InsufficientSamples") != std::string::npos);
    CHECK(stream_duration_s(example_scene(), std::vector<Detection>{}) == 0.0);
}

TEST_CASE("errors carry the stage name") {
    auto cfg = example_scene();
    cfg.fps = -1;
    try {
        run_pipeline(cfg, std::vector<Detection>{});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::ConfigError);
        CHECK(std::string(e.what()).find("config stage") != std::string::npos);
    }

    cfg = example_scene();
    auto corr = scene_correspondences(cfg);
    cfg.boundary_lines.reset();
    corr[2].src = corr[0].src + 0.5 * (corr[1].src - corr[0].src);  // collinear with a and b
    corr[3].src = corr[0].src + 0.25 * (corr[1].src - corr[0].src);
    cfg.roi = corr;
    try {
        run_pipeline(cfg, std::vector<Detection>{});
        FAIL("expected an error");
    } catch (const Error& e) {
        CHECK(e.code() == Errc::DegenerateConfiguration);
        CHECK(std::string(e.what()).find("homography stage") != std::string::npos);
    }
}

TEST_CASE("outputs are byte-identical across runs") {
    const auto cfg = example_scene();
    const auto scene = gen_synthetic_scene(basic_spec(), cfg);
    const RealCounts real{{{1, "car"}, 50}, {{2, "all"}, 48}};
    const fs::path a = scratch("out_a");
    const fs::path b = scratch("out_b");
    for (const auto& dir : {a, b}) {
        const auto res = run_pipeline(cfg, scene.detections);
        write_outputs(res.analytics, res.calibration, dir, &res.diagnostics, &real);
        write_tracks(dir / "tracks.jsonl", res.tracks);
    }
    for (const char* f : {"vehicles.csv", "summary.json", "calibration.json", "speed_hist.csv", "accel_hist.csv",
                          "tracks.jsonl"}) {
        CHECK_MESSAGE(slurp(a / f) == slurp(b / f), f);
        CHECK(!slurp(a / f).empty());
    }
    const auto summary = nlohmann::json::parse(slurp(a / "summary.json"));
    CHECK(summary.at("vehicles") == 100);
    const auto& ers = summary.at("error_rates");
    REQUIRE(ers.size() == 2);
    CHECK(ers[0].at("er_pct") == 0.0);
    CHECK(ers[1].at("er_pct").get<double>() == doctest::Approx(4.17));

    const auto back = read_tracks(a / "tracks.jsonl");
    const auto again = run_pipeline(cfg, scene.detections);
    REQUIRE(back.size() == again.tracks.size());
    for (std::size_t i = 0; i < back.size(); ++i) {
        CHECK(track_to_json(back[i]) == track_to_json(again.tracks[i]));
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("real counts file formats") {
    const fs::path d = scratch("real");
    {
        std::ofstream(d / "a.json") << R"({"counts": [{"direction": 1, "class": "car", "count": 548}]})";
        std::ofstream(d / "b.json") << R"([{"direction": 2, "count": 440}])";
        std::ofstream(d / "c.json") << R"([{"direction": 2, "count": -1}])";
    }
    CHECK(read_real_counts(d / "a.json").at({1, "car"}) == 548);
    CHECK(read_real_counts(d / "b.json").at({2, "all"}) == 440);
    CHECK_THROWS_AS(read_real_counts(d / "c.json"), Error);
    CHECK_THROWS_AS(read_real_counts(d / "missing.json"), Error);
    fs::remove_all(d);
}
