#include "bevtrack/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"

namespace bevtrack {

using nlohmann::json;

namespace {

json point_json(Point2 p) { return json::array({p.x, p.y}); }

Point2 point_from(const json& j) {
    if (!j.is_array() || j.size() != 2) throw Error(Errc::ConfigError, "expected [x, y]");
    return {j[0].get<double>(), j[1].get<double>()};
}

LineSeg line_from(const json& j) {
    if (!j.is_array() || j.size() != 2) throw Error(Errc::ConfigError, "expected [[x0, y0], [x1, y1]]");
    return {point_from(j[0]), point_from(j[1])};
}

std::pair<double, double> pair_from(const json& j, const char* what) {
    if (!j.is_array() || j.size() != 2) throw Error(Errc::ConfigError, std::string(what) + ": expected two numbers");
    return {j[0].get<double>(), j[1].get<double>()};
}

void reject_unknown(const json& j, std::initializer_list<const char*> keys, const char* where) {
    for (const auto& [k, v] : j.items()) {
        if (std::none_of(keys.begin(), keys.end(), [&](const char* s) { return k == s; })) {
            throw Error(Errc::ConfigError, std::string("unknown key '") + k + "' in " + where);
        }
    }
}

template <typename F>
auto in_stage(const char* stage, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const ParseError&) {
        throw;
    } catch (const Error& e) {
        throw Error(e.code(), std::string(stage) + " stage: " + e.what());
    }
}

bool in_unit(double v) { return v >= 0.0 && v <= 1.0; }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration

void validate(const SceneConfig& cfg) {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, m); };
    if (cfg.schema_version != 1) fail("unsupported schema_version " + std::to_string(cfg.schema_version));
    if (!(cfg.fps > 0.0)) fail("fps must be positive");
    if (!(cfg.image_w > 0.0 && cfg.image_h > 0.0)) fail("image_size must be positive");
    if (!(cfg.bev_w > 0.0 && cfg.bev_h > 0.0)) fail("bev_size must be positive");
    if (cfg.roi.has_value() == cfg.boundary_lines.has_value()) fail("exactly one of roi / boundary_lines is required");
    if (cfg.classes.empty()) fail("at least one class is required");
    std::set<std::string> names;
    for (const auto& c : cfg.classes) {
        if (c.name.empty()) fail("class name must not be empty");
        if (!names.insert(c.name).second) fail("duplicate class '" + c.name + "'");
        if (!(c.bev_w > 0.0 && c.bev_h > 0.0)) fail("class '" + c.name + "' needs a positive BEV size");
    }
    const auto& m = cfg.motpy;
    if (!in_unit(m.sigma_l) || !in_unit(m.sigma_h) || !in_unit(m.sigma_iou)) fail("motpy thresholds must lie in [0,1]");
    if (m.min_tsize < 1 || m.max_coast < 0) fail("motpy min_tsize >= 1 and max_coast >= 0 required");
    const auto& b = cfg.byte;
    if (!in_unit(b.tau) || !in_unit(b.match_thresh_high) || !in_unit(b.match_thresh_low)) {
        fail("byte thresholds must lie in [0,1]");
    }
    if (b.max_coast < 0) fail("byte max_coast must be non-negative");
    const auto& k = cfg.kalman;
    if (!(k.q_pos > 0.0 && k.q_vel > 0.0 && k.r_pos > 0.0 && k.init_vel_var > 0.0)) fail("kalman noise must be positive");
    if (cfg.box_warmup < 1) fail("box_warmup must be >= 1");
    const auto& s = cfg.stitch;
    if (!(s.max_deflection_deg >= 0.0 && s.max_deflection_deg <= 180.0)) fail("max_deflection_deg must lie in [0,180]");
    if (!(s.dist_fraction > 0.0) || !(s.dp_epsilon >= 0.0) || s.max_passes < 1) fail("invalid stitching settings");
    const auto& c = cfg.calibration;
    if (c.degree < 1 || c.degree > 2) fail("calibration degree must be 1 or 2");
    if (c.min_samples < 1 || !(c.min_span_fraction >= 0.0 && c.min_span_fraction <= 1.0) || !(c.cell_px > 0.0)) {
        fail("invalid calibration settings");
    }
    if (!(cfg.fallback_ft_per_px.first > 0.0 && cfg.fallback_ft_per_px.second > 0.0)) {
        fail("fallback_ft_per_px must be positive");
    }
    const auto& a = cfg.analytics;
    if (!(a.kinematics.smooth_window_s >= 0.0 && a.kinematics.accel_window_s > 0.0)) fail("invalid analytics windows");
    if (!(a.lanes.bin_px > 0.0) || a.lanes.smooth_bins < 1 || !(a.lanes.min_separation > 0.0)) {
        fail("invalid lane settings");
    }
}

SceneConfig scene_from_json(const json& j) {
    SceneConfig cfg;
    cfg.classes.clear();
    try {
        reject_unknown(j,
                       {"schema_version", "image_size", "fps", "bev_size", "roi", "boundary_lines", "classes", "tracker",
                        "motpy", "byte", "kalman", "box_warmup", "stitching", "calibration", "analytics", "frames_dir"},
                       "scene");
        cfg.schema_version = j.at("schema_version").get<int>();
        std::tie(cfg.image_w, cfg.image_h) = pair_from(j.at("image_size"), "image_size");
        cfg.fps = j.at("fps").get<double>();
        if (j.contains("bev_size")) std::tie(cfg.bev_w, cfg.bev_h) = pair_from(j.at("bev_size"), "bev_size");
        if (j.contains("roi")) {
            const auto& r = j.at("roi");
            if (!r.is_array() || r.size() != 4) throw Error(Errc::ConfigError, "roi needs 4 correspondences");
            std::array<Correspondence, 4> pairs;
            for (std::size_t i = 0; i < 4; ++i) pairs[i] = {point_from(r[i].at("src")), point_from(r[i].at("dst"))};
            cfg.roi = pairs;
        }
        if (j.contains("boundary_lines")) {
            const auto& b = j.at("boundary_lines");
            BoundaryLines bl;
            bl.left = line_from(b.at("left"));
            bl.right = line_from(b.at("right"));
            bl.near_y = b.value("near_y", cfg.image_h);
            if (b.contains("far_y") && !b.at("far_y").is_null()) bl.far_y = b.at("far_y").get<double>();
            cfg.boundary_lines = bl;
        }
        if (j.contains("classes")) {
            for (const auto& c : j.at("classes")) {
                const auto [w, h] = pair_from(c.at("bev_size"), "bev_size");
                cfg.classes.push_back({c.at("name").get<std::string>(), w, h});
            }
        } else {
            cfg.classes = SceneConfig{}.classes;
        }
        if (j.contains("tracker")) cfg.tracker = parse_tracker_kind(j.at("tracker").get<std::string>());
        if (j.contains("motpy")) {
            const auto& m = j.at("motpy");
            cfg.motpy.sigma_l = m.value("sigma_l", cfg.motpy.sigma_l);
            cfg.motpy.sigma_h = m.value("sigma_h", cfg.motpy.sigma_h);
            cfg.motpy.sigma_iou = m.value("sigma_iou", cfg.motpy.sigma_iou);
            cfg.motpy.min_tsize = m.value("min_tsize", cfg.motpy.min_tsize);
            cfg.motpy.max_coast = m.value("max_coast", cfg.motpy.max_coast);
        }
        cfg.byte.max_coast = static_cast<int>(std::lround(cfg.fps));  // one second unless configured
        if (j.contains("byte")) {
            const auto& b = j.at("byte");
            cfg.byte.tau = b.value("tau", cfg.byte.tau);
            cfg.byte.match_thresh_high = b.value("match_thresh_high", cfg.byte.match_thresh_high);
            cfg.byte.match_thresh_low = b.value("match_thresh_low", cfg.byte.match_thresh_low);
            cfg.byte.max_coast = b.value("max_coast", cfg.byte.max_coast);
        }
        if (j.contains("kalman")) {
            const auto& k = j.at("kalman");
            cfg.kalman.q_pos = k.value("q_pos", cfg.kalman.q_pos);
            cfg.kalman.q_vel = k.value("q_vel", cfg.kalman.q_vel);
            cfg.kalman.r_pos = k.value("r_pos", cfg.kalman.r_pos);
            cfg.kalman.init_vel_var = k.value("init_vel_var", cfg.kalman.init_vel_var);
        }
        cfg.box_warmup = j.value("box_warmup", cfg.box_warmup);
        if (j.contains("stitching")) {
            const auto& s = j.at("stitching");
            cfg.stitching = s.value("enabled", cfg.stitching);
            cfg.stitch.max_deflection_deg = s.value("max_deflection_deg", cfg.stitch.max_deflection_deg);
            cfg.stitch.dist_fraction = s.value("dist_fraction", cfg.stitch.dist_fraction);
            cfg.stitch.dp_epsilon = s.value("dp_epsilon", cfg.stitch.dp_epsilon);
            cfg.stitch.max_passes = s.value("max_passes", cfg.stitch.max_passes);
        }
        if (j.contains("calibration")) {
            const auto& c = j.at("calibration");
            cfg.calibration.fit_class = c.value("fit_class", cfg.calibration.fit_class);
            cfg.calibration.min_samples = c.value("min_samples", cfg.calibration.min_samples);
            cfg.calibration.min_span_fraction = c.value("min_span_fraction", cfg.calibration.min_span_fraction);
            cfg.calibration.degree = c.value("degree", cfg.calibration.degree);
            cfg.calibration.cell_px = c.value("cell_px", cfg.calibration.cell_px);
            if (c.contains("fallback_ft_per_px")) {
                cfg.fallback_ft_per_px = pair_from(c.at("fallback_ft_per_px"), "fallback_ft_per_px");
            }
        }
        if (j.contains("analytics")) {
            const auto& a = j.at("analytics");
            auto& p = cfg.analytics;
            p.min_displacement = a.value("min_displacement", p.min_displacement);
            p.stop_speed_mph = a.value("stop_speed_mph", p.stop_speed_mph);
            p.kinematics.smooth_window_s = a.value("smooth_window_s", p.kinematics.smooth_window_s);
            p.kinematics.accel_window_s = a.value("accel_window_s", p.kinematics.accel_window_s);
            p.lanes.bin_px = a.value("lane_bin_px", p.lanes.bin_px);
            p.lanes.smooth_bins = a.value("lane_smooth_bins", p.lanes.smooth_bins);
            p.lanes.min_prominence = a.value("lane_min_prominence", p.lanes.min_prominence);
            p.lanes.min_separation = a.value("lane_min_separation", p.lanes.min_separation);
        }
        cfg.frames_dir = j.value("frames_dir", std::string{});
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, std::string("scene document: ") + e.what());
    }
    validate(cfg);
    return cfg;
}

json scene_to_json(const SceneConfig& cfg) {
    json j;
    j["schema_version"] = cfg.schema_version;
    j["image_size"] = {cfg.image_w, cfg.image_h};
    j["fps"] = cfg.fps;
    j["bev_size"] = {cfg.bev_w, cfg.bev_h};
    if (cfg.roi) {
        json r = json::array();
        for (const auto& c : *cfg.roi) r.push_back({{"src", point_json(c.src)}, {"dst", point_json(c.dst)}});
        j["roi"] = r;
    }
    if (cfg.boundary_lines) {
        const auto& b = *cfg.boundary_lines;
        j["boundary_lines"] = {
            {"left", {point_json(b.left.p0), point_json(b.left.p1)}},
            {"right", {point_json(b.right.p0), point_json(b.right.p1)}},
            {"near_y", b.near_y},
            {"far_y", b.far_y ? json(*b.far_y) : json(nullptr)},
        };
    }
    json classes = json::array();
    for (const auto& c : cfg.classes) classes.push_back({{"name", c.name}, {"bev_size", {c.bev_w, c.bev_h}}});
    j["classes"] = classes;
    j["tracker"] = to_string(cfg.tracker);
    j["motpy"] = {{"sigma_l", cfg.motpy.sigma_l},     {"sigma_h", cfg.motpy.sigma_h},
                  {"sigma_iou", cfg.motpy.sigma_iou}, {"min_tsize", cfg.motpy.min_tsize},
                  {"max_coast", cfg.motpy.max_coast}};
    j["byte"] = {{"tau", cfg.byte.tau},
                 {"match_thresh_high", cfg.byte.match_thresh_high},
                 {"match_thresh_low", cfg.byte.match_thresh_low},
                 {"max_coast", cfg.byte.max_coast}};
    j["kalman"] = {{"q_pos", cfg.kalman.q_pos},
                   {"q_vel", cfg.kalman.q_vel},
                   {"r_pos", cfg.kalman.r_pos},
                   {"init_vel_var", cfg.kalman.init_vel_var}};
    j["box_warmup"] = cfg.box_warmup;
    j["stitching"] = {{"enabled", cfg.stitching},
                      {"max_deflection_deg", cfg.stitch.max_deflection_deg},
                      {"dist_fraction", cfg.stitch.dist_fraction},
                      {"dp_epsilon", cfg.stitch.dp_epsilon},
                      {"max_passes", cfg.stitch.max_passes}};
    j["calibration"] = {{"fit_class", cfg.calibration.fit_class},
                        {"min_samples", cfg.calibration.min_samples},
                        {"min_span_fraction", cfg.calibration.min_span_fraction},
                        {"degree", cfg.calibration.degree},
                        {"cell_px", cfg.calibration.cell_px},
                        {"fallback_ft_per_px", {cfg.fallback_ft_per_px.first, cfg.fallback_ft_per_px.second}}};
    const auto& a = cfg.analytics;
    j["analytics"] = {{"min_displacement", a.min_displacement},
                      {"stop_speed_mph", a.stop_speed_mph},
                      {"smooth_window_s", a.kinematics.smooth_window_s},
                      {"accel_window_s", a.kinematics.accel_window_s},
                      {"lane_bin_px", a.lanes.bin_px},
                      {"lane_smooth_bins", a.lanes.smooth_bins},
                      {"lane_min_prominence", a.lanes.min_prominence},
                      {"lane_min_separation", a.lanes.min_separation}};
    j["frames_dir"] = cfg.frames_dir;
    return j;
}

SceneConfig load_scene(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    json j;
    try {
        j = json::parse(in);
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, path.string() + ": " + e.what());
    }
    return scene_from_json(j);
}

SceneConfig example_scene() {
    SceneConfig cfg;
    BoundaryLines bl;
    bl.left = {{0.0, 240.0}, {160.0, 60.0}};
    bl.right = {{320.0, 240.0}, {160.0, 60.0}};
    bl.near_y = 240.0;
    bl.far_y = 150.0;
    cfg.boundary_lines = bl;
    return cfg;
}

std::array<Correspondence, 4> scene_correspondences(const SceneConfig& cfg) {
    if (cfg.roi) return *cfg.roi;
    if (!cfg.boundary_lines) throw Error(Errc::ConfigError, "scene has neither roi nor boundary_lines");
    const auto& b = *cfg.boundary_lines;
    double far_y = 0.0;
    if (b.far_y) {
        far_y = *b.far_y;
    } else {
        far_y = default_far_scanline(intersect_lines(b.left, b.right), cfg.image_h);
    }
    return roi_correspondences(roi_quad(b.left, b.right, b.near_y, far_y), cfg.bev_w, cfg.bev_h);
}

Homography scene_homography(const SceneConfig& cfg) {
    const auto pairs = scene_correspondences(cfg);
    return Homography::estimate(pairs);
}

TrackerKind parse_tracker_kind(const std::string& s) {
    if (s == "motpy") return TrackerKind::Motpy;
    if (s == "byte") return TrackerKind::Byte;
    throw Error(Errc::ConfigError, "unknown tracker '" + s + "' (expected motpy or byte)");
}

std::string to_string(TrackerKind k) { return k == TrackerKind::Motpy ? "motpy" : "byte"; }

// ---------------------------------------------------------------------------
// Detection records

std::vector<Detection> parse_detections(std::istream& in) {
    std::vector<Detection> out;
    std::string line;
    std::size_t lineno = 0;
    int last_frame = std::numeric_limits<int>::min();
    while (std::getline(in, line)) {
        ++lineno;
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.find_first_not_of(" \t") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw ParseError(lineno, std::string("invalid record: ") + e.what());
        }
        if (!j.is_object()) throw ParseError(lineno, "record must be an object");
        for (const char* key : {"frame", "cls", "bbox", "score"}) {
            if (!j.contains(key)) throw ParseError(lineno, std::string("missing field '") + key + "'");
        }
        Detection d;
        const auto& f = j["frame"];
        if (!f.is_number_integer() || f.get<long long>() < 0 || f.get<long long>() > std::numeric_limits<int>::max()) {
            throw ParseError(lineno, "frame must be a non-negative integer");
        }
        d.frame = f.get<int>();
        if (!j["cls"].is_string() || j["cls"].get<std::string>().empty()) {
            throw ParseError(lineno, "cls must be a non-empty string");
        }
        d.cls = j["cls"].get<std::string>();
        const auto& b = j["bbox"];
        if (!b.is_array() || b.size() != 4 || !std::all_of(b.begin(), b.end(), [](const json& v) { return v.is_number(); })) {
            throw ParseError(lineno, "bbox must be four numbers [x, y, w, h]");
        }
        d.bbox = {b[0].get<double>(), b[1].get<double>(), b[2].get<double>(), b[3].get<double>()};
        if (!std::isfinite(d.bbox.x) || !std::isfinite(d.bbox.y) || !std::isfinite(d.bbox.w) ||
            !std::isfinite(d.bbox.h)) {
            throw ParseError(lineno, "bbox values must be finite");
        }
        if (d.bbox.w < 0.0 || d.bbox.h < 0.0) throw ParseError(lineno, "bbox size must be non-negative");
        if (!j["score"].is_number()) throw ParseError(lineno, "score must be a number");
        d.score = j["score"].get<double>();
        if (!(d.score >= 0.0 && d.score <= 1.0)) throw ParseError(lineno, "score must lie in [0, 1]");
        if (d.frame < last_frame) {
            throw ParseError(lineno, "frame " + std::to_string(d.frame) + " follows frame " + std::to_string(last_frame));
        }
        last_frame = d.frame;
        out.push_back(std::move(d));
    }
    return out;
}

std::vector<Detection> read_detections(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    return parse_detections(in);
}

void write_detections(std::ostream& out, std::span<const Detection> dets) {
    for (const auto& d : dets) {
        nlohmann::ordered_json j;
        j["frame"] = d.frame;
        j["cls"] = d.cls;
        j["bbox"] = {d.bbox.x, d.bbox.y, d.bbox.w, d.bbox.h};
        j["score"] = d.score;
        out << j.dump() << '\n';
    }
}

void write_detections(const std::filesystem::path& path, std::span<const Detection> dets) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    write_detections(out, dets);
    if (!out) throw Error(Errc::IoError, "write failed: " + path.string());
}

std::vector<std::pair<std::size_t, std::size_t>> frame_groups(std::span<const Detection> dets) {
    std::vector<std::pair<std::size_t, std::size_t>> out;
    std::size_t i = 0;
    while (i < dets.size()) {
        std::size_t j = i + 1;
        while (j < dets.size() && dets[j].frame == dets[i].frame) ++j;
        out.emplace_back(i, j);
        i = j;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Stages

BevMeasurement measure_bev(const Homography& h, const BBox& b) {
    BevMeasurement m;
    m.center = h.apply(b.center());
    double x0 = std::numeric_limits<double>::infinity();
    double y0 = x0;
    double x1 = -x0;
    double y1 = -x0;
    for (const Point2 c : {Point2{b.x, b.y}, Point2{b.x + b.w, b.y}, Point2{b.x + b.w, b.y + b.h}, Point2{b.x, b.y + b.h}}) {
        const BevPoint p = h.apply(c);
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    m.w = x1 - x0;
    m.h = y1 - y0;
    return m;
}

std::vector<BevDetection> project_detections(const SceneConfig& cfg, const Homography& h,
                                             std::span<const Detection> dets) {
    std::map<std::string, std::pair<double, double>> defaults;
    for (const auto& c : cfg.classes) defaults[c.name] = {c.bev_w, c.bev_h};
    BevBoxSizer sizer(defaults, cfg.box_warmup);
    std::vector<BevDetection> out;
    out.reserve(dets.size());
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const Detection& d = dets[i];
        BevMeasurement m;
        try {
            m = measure_bev(h, d.bbox);
        } catch (const Error& e) {
            if (e.code() == Errc::AtInfinity) continue;
            throw;
        }
        const BevPoint c = m.center;
        if (!(c.x >= 0.0 && c.x <= cfg.bev_w && c.y >= 0.0 && c.y <= cfg.bev_h)) continue;
        if (std::isfinite(m.w) && std::isfinite(m.h)) sizer.observe(d.cls, m.w, m.h);
        const auto [w, hh] = sizer.size(d.cls);
        BevDetection b;
        b.frame = d.frame;
        b.cls = d.cls;
        b.center = c;
        b.bbox = BBox::centered(c, w, hh);
        b.observed_w = m.w;
        b.observed_h = m.h;
        b.image_bbox = d.bbox;
        b.score = d.score;
        b.source = static_cast<int>(i);
        out.push_back(std::move(b));
    }
    return out;
}

namespace {

template <typename Tracker>
std::vector<Track> drive(Tracker& tracker, std::span<const BevDetection> dets) {
    std::vector<Track> done;
    if (dets.empty()) return done;
    std::size_t i = 0;
    for (int frame = dets.front().frame; frame <= dets.back().frame; ++frame) {
        std::size_t j = i;
        while (j < dets.size() && dets[j].frame == frame) ++j;
        auto res = tracker.step(frame, dets.subspan(i, j - i));
        for (auto& t : res.finished) done.push_back(std::move(t));
        i = j;
    }
    for (auto& t : tracker.flush()) done.push_back(std::move(t));
    std::sort(done.begin(), done.end(), [](const Track& a, const Track& b) { return a.id < b.id; });
    return done;
}

}  // namespace

std::vector<Track> run_tracker(const SceneConfig& cfg, std::span<const BevDetection> dets) {
    if (cfg.tracker == TrackerKind::Motpy) {
        MotpyTracker t(cfg.motpy, cfg.kalman);
        return drive(t, dets);
    }
    ByteTracker t(cfg.byte, cfg.kalman);
    return drive(t, dets);
}

std::vector<CalSample> calibration_samples(std::span<const Track> tracks) {
    std::vector<CalSample> out;
    for (const auto& t : tracks) {
        for (const auto& e : t.entries) out.push_back({e.det.center, e.det.observed_w, e.det.observed_h, t.cls});
    }
    return out;
}

namespace {

constexpr std::size_t kMaxCachedFrames = 256;

GrayFrame crop(const GrayFrame& f, int x0, int y0, int x1, int y1) {
    GrayFrame out(x1 - x0, y1 - y0);
    for (int y = y0; y < y1; ++y) {
        std::copy_n(f.data.begin() + static_cast<std::ptrdiff_t>(y) * f.width + x0, x1 - x0,
                    out.data.begin() + static_cast<std::ptrdiff_t>(y - y0) * out.width);
    }
    return out;
}

}  // namespace

DisplacementPredictor make_flow_predictor(const std::filesystem::path& frames_dir, const Homography& image_to_bev,
                                          int max_points, const LkParams& lk) {
    auto cache = std::make_shared<std::map<int, std::optional<GrayFrame>>>();
    auto load = [cache, frames_dir](int frame) -> const std::optional<GrayFrame>& {
        auto it = cache->find(frame);
        if (it != cache->end()) return it->second;
        if (cache->size() >= kMaxCachedFrames) cache->clear();
        std::optional<GrayFrame> f;
        const auto path = frames_dir / frame_filename(frame);
        if (std::filesystem::exists(path)) {
            try {
                f = read_pgm(path);
            } catch (const Error&) {
                f.reset();
            }
        }
        return cache->emplace(frame, std::move(f)).first->second;
    };
    // (track, frame, gap) -> prediction; stitching asks again on later passes.
    auto memo = std::make_shared<std::map<std::tuple<int, int, int>, std::optional<Point2>>>();
    const Homography bev_to_image = image_to_bev.inverse();

    return [load, memo, image_to_bev, bev_to_image, max_points, lk](const Fragment& ending,
                                                                      int gap) -> std::optional<Point2> {
        if (gap < 1) return std::nullopt;
        const auto key = std::make_tuple(ending.track_id, ending.frame, gap);
        if (const auto it = memo->find(key); it != memo->end()) return it->second;
        auto& slot = (*memo)[key];

        const BBox& box = ending.anchor.image_bbox;
        // Flow only needs the neighbourhood of the vehicle: the box and where
        // its own motion would carry it, padded for the pyramid's reach.
        BBox reach = box;
        try {
            const ImagePoint ahead = bev_to_image.apply(ending.anchor.center + static_cast<double>(gap) * ending.velocity);
            const ImagePoint shift = ahead - bev_to_image.apply(ending.anchor.center);
            reach = {std::min(box.x, box.x + shift.x), std::min(box.y, box.y + shift.y), box.w + std::abs(shift.x),
                     box.h + std::abs(shift.y)};
        } catch (const Error&) {
        }
        const double pad = static_cast<double>(lk.window) * (1 << std::max(0, lk.levels - 1));

        std::vector<GrayFrame> frames;
        frames.reserve(static_cast<std::size_t>(gap) + 1);
        int x0 = 0, y0 = 0, x1 = 0, y1 = 0;
        for (int f = ending.frame; f <= ending.frame + gap; ++f) {
            const auto& g = load(f);
            if (!g) return std::nullopt;
            if (frames.empty()) {
                x0 = std::clamp(static_cast<int>(std::floor(reach.x - pad)), 0, g->width);
                y0 = std::clamp(static_cast<int>(std::floor(reach.y - pad)), 0, g->height);
                x1 = std::clamp(static_cast<int>(std::ceil(reach.x + reach.w + pad)), 0, g->width);
                y1 = std::clamp(static_cast<int>(std::ceil(reach.y + reach.h + pad)), 0, g->height);
                if (x1 - x0 < 16 || y1 - y0 < 16) return std::nullopt;
            }
            frames.push_back(crop(*g, x0, y0, x1, y1));
        }
        const BBox local{box.x - x0, box.y - y0, box.w, box.h};
        const auto seeds = harris_corners(frames.front(), local, max_points);
        if (seeds.empty()) return std::nullopt;
        try {
            slot = predict_displacement(frames, seeds, image_to_bev, box.center(), lk).bev;
        } catch (const Error&) {
            slot.reset();
        }
        return slot;
    };
}

CalibrationModel fit_scene_calibration(const SceneConfig& cfg, std::span<const Track> tracks, Diagnostics& diag) {
    const auto samples = calibration_samples(tracks);
    try {
        CalibrationModel m = fit_calibration(samples, cfg.bev_w, cfg.bev_h, cfg.calibration);
        diag.calibration_samples = m.samples;
        diag.width_rms = m.width_rms;
        diag.height_rms = m.height_rms;
        diag.calibration_fallback = false;
        diag.calibration_note = "fitted";
        return m;
    } catch (const Error& e) {
        if (e.code() != Errc::InsufficientSamples) throw;
        diag.calibration_fallback = true;
        diag.calibration_note = std::string("uniform fallback: ") + e.what();
        return CalibrationModel::uniform(cfg.bev_w, cfg.bev_h, cfg.fallback_ft_per_px.first,
                                         cfg.fallback_ft_per_px.second, cfg.calibration.cell_px);
    }
}

double stream_duration_s(const SceneConfig& cfg, std::span<const Detection> dets) {
    if (dets.empty()) return 0.0;
    return (dets.back().frame - dets.front().frame + 1) / cfg.fps;
}

PipelineResult run_pipeline(const SceneConfig& cfg, std::span<const Detection> dets) {
    in_stage("config", [&] { validate(cfg); });
    PipelineResult res{{}, {}, CalibrationModel::uniform(cfg.bev_w, cfg.bev_h, 1.0, 1.0), {}};
    auto& diag = res.diagnostics;
    diag.detections_in = dets.size();

    const Homography h = in_stage("homography", [&] { return scene_homography(cfg); });
    const auto bev = in_stage("projection", [&] { return project_detections(cfg, h, dets); });
    diag.detections_projected = bev.size();

    std::vector<Track> tracks = in_stage("tracking", [&] { return run_tracker(cfg, bev); });
    diag.tracks_before_stitching = tracks.size();
    if (cfg.stitching) {
        DisplacementPredictor predictor;
        if (!cfg.frames_dir.empty()) predictor = make_flow_predictor(cfg.frames_dir, h);
        tracks = in_stage("stitching", [&] {
            return join_tracks(std::move(tracks), cfg.fps, cfg.image_w, cfg.image_h, cfg.stitch, predictor);
        });
    }
    diag.tracks_after_stitching = tracks.size();

    res.calibration = in_stage("calibration", [&] { return fit_scene_calibration(cfg, tracks, diag); });
    res.analytics = in_stage("analytics", [&] {
        return analyze_tracks(tracks, res.calibration, cfg.fps, stream_duration_s(cfg, dets), cfg.analytics);
    });
    res.tracks = std::move(tracks);
    return res;
}

// ---------------------------------------------------------------------------
// Track documents

namespace {

const char* stage_name(AssocStage s) {
    switch (s) {
        case AssocStage::Birth: return "birth";
        case AssocStage::Motpy: return "motpy";
        case AssocStage::First: return "first";
        case AssocStage::Second: return "second";
    }
    return "birth";
}

AssocStage stage_from(const std::string& s) {
    if (s == "motpy") return AssocStage::Motpy;
    if (s == "first") return AssocStage::First;
    if (s == "second") return AssocStage::Second;
    if (s == "birth") return AssocStage::Birth;
    throw Error(Errc::ConfigError, "unknown association stage '" + s + "'");
}

BBox box_from(const json& j) {
    if (!j.is_array() || j.size() != 4) throw Error(Errc::ConfigError, "expected [x, y, w, h]");
    return {j[0].get<double>(), j[1].get<double>(), j[2].get<double>(), j[3].get<double>()};
}

}  // namespace

namespace {

nlohmann::ordered_json ordered_track_json(const Track& t) {
    nlohmann::ordered_json j;
    j["id"] = t.id;
    j["cls"] = t.cls;
    nlohmann::ordered_json entries = nlohmann::ordered_json::array();
    for (const auto& e : t.entries) {
        nlohmann::ordered_json o;
        o["frame"] = e.frame;
        o["cls"] = e.det.cls;
        o["center"] = {e.det.center.x, e.det.center.y};
        o["bbox"] = {e.det.bbox.x, e.det.bbox.y, e.det.bbox.w, e.det.bbox.h};
        o["observed"] = {e.det.observed_w, e.det.observed_h};
        o["image_bbox"] = {e.det.image_bbox.x, e.det.image_bbox.y, e.det.image_bbox.w, e.det.image_bbox.h};
        o["score"] = e.det.score;
        o["source"] = e.det.source;
        o["stage"] = stage_name(e.stage);
        o["velocity"] = {e.state.mean(2), e.state.mean(3)};
        entries.push_back(std::move(o));
    }
    j["entries"] = std::move(entries);
    return j;
}

}  // namespace

json track_to_json(const Track& t) { return json::parse(ordered_track_json(t).dump()); }

Track track_from_json(const json& j) {
    try {
        Track t;
        t.id = j.at("id").get<int>();
        for (const auto& o : j.at("entries")) {
            BevDetection d;
            d.frame = o.at("frame").get<int>();
            d.cls = o.at("cls").get<std::string>();
            d.center = point_from(o.at("center"));
            d.bbox = box_from(o.at("bbox"));
            const auto [ow, oh] = pair_from(o.at("observed"), "observed");
            d.observed_w = ow;
            d.observed_h = oh;
            d.image_bbox = box_from(o.at("image_bbox"));
            d.score = o.at("score").get<double>();
            d.source = o.value("source", -1);
            KalmanState s;
            s.mean << d.center.x, d.center.y, 0.0, 0.0;
            if (o.contains("velocity")) {
                const Point2 v = point_from(o.at("velocity"));
                s.mean(2) = v.x;
                s.mean(3) = v.y;
            }
            t.append(d, s, stage_from(o.value("stage", std::string("birth"))));
        }
        if (t.entries.empty()) throw Error(Errc::ConfigError, "track without entries");
        if (j.contains("cls")) t.cls = j.at("cls").get<std::string>();
        t.status = TrackStatus::Finished;
        return t;
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, std::string("track document: ") + e.what());
    }
}

void write_tracks(const std::filesystem::path& path, std::span<const Track> tracks) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + path.string());
    for (const auto& t : tracks) out << ordered_track_json(t).dump() << '\n';
    if (!out) throw Error(Errc::IoError, "write failed: " + path.string());
}

std::vector<Track> read_tracks(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    std::vector<Track> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            out.push_back(track_from_json(json::parse(line)));
        } catch (const json::exception& e) {
            throw ParseError(lineno, e.what());
        } catch (const Error& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return out;
}

}  // namespace bevtrack
