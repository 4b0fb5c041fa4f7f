#include <algorithm>
#include <cmath>
#include <map>
#include <limits>
#include <random>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"
#include "bevtrack/pipeline.hpp"

namespace bevtrack {

using nlohmann::json;

namespace {

constexpr double kMphToFtPerSec = 5280.0 / 3600.0;
constexpr double kEdgeInset = 1.0;  // BEV px kept between trajectories and the ROI border

// Position after t seconds for a vehicle whose BEV step obeys
// dx/dt = sign * v * (c0 + c1 x) / ref_ft, i.e. constant real-world speed.
double advance(double x0, double sign, double v_fts, double c0, double c1, double ref_ft, double t) {
    if (std::abs(c1) < 1e-15) return x0 + sign * v_fts * c0 * t / ref_ft;
    return ((c0 + c1 * x0) * std::exp(sign * c1 * v_fts * t / ref_ft) - c0) / c1;
}

double travel_time(double x0, double x1, double v_fts, double c0, double c1, double ref_ft) {
    if (std::abs(c1) < 1e-15) return std::abs(x1 - x0) * ref_ft / (v_fts * c0);
    return std::abs(std::log((c0 + c1 * x1) / (c0 + c1 * x0))) * ref_ft / (c1 * v_fts);
}

std::uint32_t hash3(int a, int b, int c) {
    std::uint32_t h = 2166136261u;
    for (int v : {a, b, c}) {
        h ^= static_cast<std::uint32_t>(v);
        h *= 16777619u;
        h ^= h >> 13;
    }
    return h;
}

}  // namespace

void validate(const SynthSpec& s) {
    auto fail = [](const std::string& m) { throw Error(Errc::ConfigError, "synth spec: " + m); };
    if (s.classes.empty()) fail("at least one class is required");
    for (const auto& c : s.classes) {
        if (c.name.empty() || c.per_direction < 0) fail("class entries need a name and a non-negative count");
        if (!(c.length_scale > 0.0 && c.width_scale > 0.0)) fail("class size scales must be positive");
    }
    if (s.lanes.empty()) fail("lane layout is empty");
    for (const auto& [dir, ys] : s.lanes) {
        if (dir != 1 && dir != 2) fail("directions are 1 or 2");
        if (ys.empty()) fail("direction without lanes");
    }
    if (!(s.speed_mean_mph > 0.0) || !(s.speed_sd_mph >= 0.0) || !(s.speed_min_mph > 0.0) ||
        !(s.speed_max_mph >= s.speed_min_mph)) {
        fail("invalid speed distribution");
    }
    if (!(s.width_c0 > 0.0 && s.height_c0 > 0.0)) fail("size intercepts must be positive");
    if (!(s.min_headway_s >= 0.0 && s.extra_headway_mean_s >= 0.0)) fail("headways must be non-negative");
    for (double p : {s.dropout_prob, s.dip_prob, s.dip_score, s.base_score}) {
        if (!(p >= 0.0 && p <= 1.0)) fail("probabilities and scores must lie in [0,1]");
    }
    if (s.dropout_min_frames < 1 || s.dropout_max_frames < s.dropout_min_frames) fail("invalid dropout window range");
    if (s.dip_frames < 1) fail("dip_frames must be >= 1");
    if (!(s.noise_px >= 0.0)) fail("noise_px must be non-negative");
}

SynthSpec synth_spec_from_json(const json& j) {
    SynthSpec s;
    try {
        if (j.contains("classes")) {
            s.classes.clear();
            for (const auto& c : j.at("classes")) {
                SynthClass sc;
                sc.name = c.at("name").get<std::string>();
                sc.per_direction = c.value("per_direction", sc.per_direction);
                sc.length_scale = c.value("length_scale", sc.length_scale);
                sc.width_scale = c.value("width_scale", sc.width_scale);
                s.classes.push_back(sc);
            }
        }
        if (j.contains("speed_mph")) {
            const auto& v = j.at("speed_mph");
            s.speed_mean_mph = v.value("mean", s.speed_mean_mph);
            s.speed_sd_mph = v.value("sd", s.speed_sd_mph);
            s.speed_min_mph = v.value("min", s.speed_min_mph);
            s.speed_max_mph = v.value("max", s.speed_max_mph);
        }
        if (j.contains("lanes")) {
            s.lanes.clear();
            for (const auto& [k, v] : j.at("lanes").items()) s.lanes[std::stoi(k)] = v.get<std::vector<double>>();
        }
        if (j.contains("box_width")) {
            s.width_c0 = j.at("box_width").at(0).get<double>();
            s.width_c1 = j.at("box_width").at(1).get<double>();
        }
        if (j.contains("box_height")) {
            s.height_c0 = j.at("box_height").at(0).get<double>();
            s.height_c1 = j.at("box_height").at(1).get<double>();
        }
        s.min_headway_s = j.value("min_headway_s", s.min_headway_s);
        s.extra_headway_mean_s = j.value("extra_headway_mean_s", s.extra_headway_mean_s);
        if (j.contains("dropout")) {
            const auto& d = j.at("dropout");
            s.dropout_prob = d.value("prob", s.dropout_prob);
            s.dropout_min_frames = d.value("min_frames", s.dropout_min_frames);
            s.dropout_max_frames = d.value("max_frames", s.dropout_max_frames);
        }
        if (j.contains("score_dip")) {
            const auto& d = j.at("score_dip");
            s.dip_prob = d.value("prob", s.dip_prob);
            s.dip_frames = d.value("frames", s.dip_frames);
            s.dip_score = d.value("score", s.dip_score);
        }
        s.base_score = j.value("base_score", s.base_score);
        s.noise_px = j.value("noise_px", s.noise_px);
        s.seed = j.value("seed", s.seed);
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, std::string("synth spec: ") + e.what());
    } catch (const std::invalid_argument&) {
        throw Error(Errc::ConfigError, "synth spec: lane keys must be direction numbers");
    }
    validate(s);
    return s;
}

json synth_spec_to_json(const SynthSpec& s) {
    json classes = json::array();
    for (const auto& c : s.classes) {
        classes.push_back({{"name", c.name},
                           {"per_direction", c.per_direction},
                           {"length_scale", c.length_scale},
                           {"width_scale", c.width_scale}});
    }
    json lanes = json::object();
    for (const auto& [dir, ys] : s.lanes) lanes[std::to_string(dir)] = ys;
    return {
        {"classes", classes},
        {"speed_mph", {{"mean", s.speed_mean_mph}, {"sd", s.speed_sd_mph}, {"min", s.speed_min_mph}, {"max", s.speed_max_mph}}},
        {"lanes", lanes},
        {"box_width", {s.width_c0, s.width_c1}},
        {"box_height", {s.height_c0, s.height_c1}},
        {"min_headway_s", s.min_headway_s},
        {"extra_headway_mean_s", s.extra_headway_mean_s},
        {"dropout", {{"prob", s.dropout_prob}, {"min_frames", s.dropout_min_frames}, {"max_frames", s.dropout_max_frames}}},
        {"score_dip", {{"prob", s.dip_prob}, {"frames", s.dip_frames}, {"score", s.dip_score}}},
        {"base_score", s.base_score},
        {"noise_px", s.noise_px},
        {"seed", s.seed},
    };
}

BBox invert_measurement(const Homography& h, BevPoint center, double w, double hh) {
    const Homography inv = h.inverse();
    const ImagePoint ic = inv.apply(center);

    // Start from the image extent of the target BEV box.
    double x0 = std::numeric_limits<double>::infinity();
    double y0 = x0;
    double x1 = -x0;
    double y1 = -x0;
    for (const Point2 d : {Point2{-0.5 * w, -0.5 * hh}, Point2{0.5 * w, -0.5 * hh}, Point2{0.5 * w, 0.5 * hh},
                           Point2{-0.5 * w, 0.5 * hh}}) {
        const ImagePoint p = inv.apply(center + d);
        x0 = std::min(x0, p.x);
        x1 = std::max(x1, p.x);
        y0 = std::min(y0, p.y);
        y1 = std::max(y1, p.y);
    }
    Eigen::Vector2d s(std::max(x1 - x0, 1e-6), std::max(y1 - y0, 1e-6));

    auto residual = [&](const Eigen::Vector2d& v) {
        const BevMeasurement m = measure_bev(h, BBox::centered(ic, v(0), v(1)));
        return Eigen::Vector2d(m.w - w, m.h - hh);
    };
    Eigen::Vector2d r = residual(s);
    const double tol = 1e-13 * (w + hh);
    for (int it = 0; it < 100 && r.norm() > tol; ++it) {
        Eigen::Matrix2d jac;
        for (int k = 0; k < 2; ++k) {
            Eigen::Vector2d sp = s;
            const double step = 1e-7 * std::max(s(k), 1e-3);
            sp(k) += step;
            jac.col(k) = (residual(sp) - r) / step;
        }
        const Eigen::Vector2d delta = jac.fullPivLu().solve(-r);
        double lambda = 1.0;
        bool improved = false;
        for (int k = 0; k < 40; ++k, lambda *= 0.5) {
            const Eigen::Vector2d cand = s + lambda * delta;
            if (cand(0) <= 0.0 || cand(1) <= 0.0) continue;
            const Eigen::Vector2d rc = residual(cand);
            if (rc.norm() < r.norm()) {
                s = cand;
                r = rc;
                improved = true;
                break;
            }
        }
        if (!improved) break;
    }
    return BBox::centered(ic, s(0), s(1));
}

SynthScene gen_synthetic_scene(const SynthSpec& spec, const SceneConfig& cfg) {
    validate(spec);
    validate(cfg);
    const Homography h = scene_homography(cfg);
    std::mt19937_64 rng(spec.seed);

    struct Plan {
        int id;
        std::size_t cls;
        int direction;
        int lane;
        double lane_y;
        double speed_mph;
        int entry_frame;
    };
    std::vector<Plan> plans;
    const double lo_x = kEdgeInset;
    const double hi_x = cfg.bev_w - kEdgeInset;
    int next_id = 1;
    for (const auto& [dir, lane_ys] : spec.lanes) {
        std::vector<std::size_t> order;
        for (std::size_t c = 0; c < spec.classes.size(); ++c) {
            for (int k = 0; k < spec.classes[c].per_direction; ++k) order.push_back(c);
        }
        std::shuffle(order.begin(), order.end(), rng);
        std::vector<double> last_entry(lane_ys.size(), -std::numeric_limits<double>::infinity());
        std::vector<double> last_exit(lane_ys.size(), -std::numeric_limits<double>::infinity());
        std::normal_distribution<double> speed_dist(spec.speed_mean_mph, spec.speed_sd_mph);
        std::exponential_distribution<double> extra(spec.extra_headway_mean_s > 0 ? 1.0 / spec.extra_headway_mean_s : 1.0);
        for (std::size_t i = 0; i < order.size(); ++i) {
            const std::size_t lane = i % lane_ys.size();
            double v = spec.speed_mean_mph;
            if (spec.speed_sd_mph > 0.0) v = std::clamp(speed_dist(rng), spec.speed_min_mph, spec.speed_max_mph);
            const double T = travel_time(lo_x, hi_x, v * kMphToFtPerSec, spec.width_c0, spec.width_c1, kSedanLengthFt);
            double te = std::max({last_entry[lane] + spec.min_headway_s, last_exit[lane] + spec.min_headway_s - T, 0.0});
            if (spec.extra_headway_mean_s > 0.0) te += extra(rng);
            const int entry = static_cast<int>(std::ceil(te * cfg.fps - 1e-9));
            last_entry[lane] = entry / cfg.fps;
            last_exit[lane] = last_entry[lane] + T;
            plans.push_back({next_id++, order[i], dir, static_cast<int>(lane) + 1, lane_ys[lane], v, entry});
        }
    }

    struct Emitted {
        Detection det;
        int id;
    };
    std::vector<Emitted> emitted;
    SynthScene scene;
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);
    for (const Plan& p : plans) {
        const SynthClass& sc = spec.classes[p.cls];
        const double sign = p.direction == 1 ? 1.0 : -1.0;
        const double x_start = p.direction == 1 ? lo_x : hi_x;
        const double v_fts = p.speed_mph * kMphToFtPerSec;

        std::vector<double> xs;
        for (int k = 0;; ++k) {
            const double x = advance(x_start, sign, v_fts, spec.width_c0, spec.width_c1, kSedanLengthFt, k / cfg.fps);
            if (x < lo_x - 1e-9 || x > hi_x + 1e-9) break;
            xs.push_back(x);
        }
        const int n = static_cast<int>(xs.size());

        std::vector<char> keep(static_cast<std::size_t>(n), 1);
        std::vector<char> dip(static_cast<std::size_t>(n), 0);
        TruthVehicle tv;
        tv.id = p.id;
        tv.cls = sc.name;
        tv.direction = p.direction;
        tv.lane = p.lane;
        tv.speed_mph = p.speed_mph;
        if (spec.dropout_prob > 0.0 && unit(rng) < spec.dropout_prob) {
            const int len = std::uniform_int_distribution<int>(spec.dropout_min_frames, spec.dropout_max_frames)(rng);
            if (n >= len + 6) {
                const int start = std::uniform_int_distribution<int>(3, n - len - 3)(rng);
                for (int k = start; k < start + len; ++k) keep[static_cast<std::size_t>(k)] = 0;
                tv.dropped = len;
            }
        }
        if (spec.dip_prob > 0.0 && unit(rng) < spec.dip_prob && n >= spec.dip_frames + 6) {
            const int start = std::uniform_int_distribution<int>(3, n - spec.dip_frames - 3)(rng);
            for (int k = start; k < start + spec.dip_frames; ++k) dip[static_cast<std::size_t>(k)] = 1;
        }

        for (int k = 0; k < n; ++k) {
            if (!keep[static_cast<std::size_t>(k)]) continue;
            const BevPoint c{xs[static_cast<std::size_t>(k)], p.lane_y};
            const double w = (spec.width_c0 + spec.width_c1 * c.x) * sc.length_scale;
            const double hh = (spec.height_c0 + spec.height_c1 * c.y) * sc.width_scale;
            BBox box = invert_measurement(h, c, w, hh);
            if (spec.noise_px > 0.0) {
                box.x += spec.noise_px * noise(rng);
                box.y += spec.noise_px * noise(rng);
                box.w = std::max(0.1, box.w + spec.noise_px * noise(rng));
                box.h = std::max(0.1, box.h + spec.noise_px * noise(rng));
            }
            Detection d;
            d.frame = p.entry_frame + k;
            d.cls = sc.name;
            d.bbox = box;
            d.score = spec.base_score;
            if (dip[static_cast<std::size_t>(k)]) {
                d.score = spec.dip_score;
                ++tv.dipped;
            }
            emitted.push_back({d, p.id});
            tv.speed_series.emplace_back(d.frame, p.speed_mph);
            ++tv.detections;
        }
        tv.first_frame = p.entry_frame;
        tv.last_frame = p.entry_frame + n - 1;
        ++scene.truth.counts[{p.direction, sc.name}];
        scene.truth.vehicles.push_back(std::move(tv));
    }

    std::stable_sort(emitted.begin(), emitted.end(), [](const Emitted& a, const Emitted& b) {
        return std::tie(a.det.frame, a.id) < std::tie(b.det.frame, b.id);
    });
    scene.detections.reserve(emitted.size());
    scene.truth.detection_ids.reserve(emitted.size());
    for (auto& e : emitted) {
        scene.detections.push_back(std::move(e.det));
        scene.truth.detection_ids.push_back(e.id);
    }
    std::sort(scene.truth.vehicles.begin(), scene.truth.vehicles.end(),
              [](const TruthVehicle& a, const TruthVehicle& b) { return a.id < b.id; });
    return scene;
}

void render_frames(const SceneConfig& cfg, std::span<const Detection> dets, const GroundTruth& truth,
                   const std::filesystem::path& dir, std::uint64_t seed) {
    std::filesystem::create_directories(dir);
    if (dets.empty()) return;
    const int w = static_cast<int>(std::lround(cfg.image_w));
    const int hgt = static_cast<int>(std::lround(cfg.image_h));
    const int salt = static_cast<int>(seed & 0x7fffffff);

    GrayFrame background(w, hgt);
    for (int y = 0; y < hgt; ++y) {
        for (int x = 0; x < w; ++x) {
            background.at(x, y) = static_cast<std::uint8_t>(60 + hash3(x / 3, y / 3, salt) % 16);
        }
    }

    // Boxes per frame, with each vehicle's missed frames filled by linear
    // interpolation: a detector miss does not remove the vehicle from view.
    const int first = dets.front().frame;
    const int last = dets.back().frame;
    std::vector<std::vector<std::pair<int, BBox>>> boxes(static_cast<std::size_t>(last - first + 1));
    std::map<int, std::vector<std::pair<int, BBox>>> by_id;
    for (std::size_t i = 0; i < dets.size(); ++i) {
        const int id = i < truth.detection_ids.size() ? truth.detection_ids[i] : -static_cast<int>(i) - 1;
        by_id[id].emplace_back(dets[i].frame, dets[i].bbox);
    }
    for (const auto& [id, seq] : by_id) {
        for (std::size_t k = 0; k < seq.size(); ++k) {
            boxes[static_cast<std::size_t>(seq[k].first - first)].emplace_back(id, seq[k].second);
            if (k + 1 == seq.size()) continue;
            const auto& [fa, a] = seq[k];
            const auto& [fb, b] = seq[k + 1];
            for (int f = fa + 1; f < fb; ++f) {
                const double t = static_cast<double>(f - fa) / (fb - fa);
                const BBox m{a.x + t * (b.x - a.x), a.y + t * (b.y - a.y), a.w + t * (b.w - a.w), a.h + t * (b.h - a.h)};
                boxes[static_cast<std::size_t>(f - first)].emplace_back(id, m);
            }
        }
    }

    // Vehicles are drawn with area coverage so sub-pixel motion reaches the
    // image; their texture is a smooth pattern fixed to the box.
    auto overlap = [](double lo, double hi, int px) {
        return std::max(0.0, std::min(hi, px + 1.0) - std::max(lo, static_cast<double>(px)));
    };
    std::vector<double> canvas(static_cast<std::size_t>(w) * hgt);
    for (int frame = first; frame <= last; ++frame) {
        for (int y = 0; y < hgt; ++y) {
            for (int x = 0; x < w; ++x) canvas[static_cast<std::size_t>(y) * w + x] = background.at(x, y);
        }
        for (const auto& [id, b] : boxes[static_cast<std::size_t>(frame - first)]) {
            const double phase = (hash3(id, 1, salt) % 628) / 100.0;
            const int px0 = std::max(0, static_cast<int>(std::floor(b.x)));
            const int py0 = std::max(0, static_cast<int>(std::floor(b.y)));
            const int px1 = std::min(w - 1, static_cast<int>(std::ceil(b.x + b.w)));
            const int py1 = std::min(hgt - 1, static_cast<int>(std::ceil(b.y + b.h)));
            for (int y = py0; y <= py1; ++y) {
                const double cy = overlap(b.y, b.y + b.h, y);
                for (int x = px0; x <= px1; ++x) {
                    const double cover = cy * overlap(b.x, b.x + b.w, x);
                    if (cover <= 0.0) continue;
                    const double u = (x + 0.5 - b.x) / std::max(b.w, 1.0);
                    const double v = (y + 0.5 - b.y) / std::max(b.h, 1.0);
                    const double shade = 190.0 + 45.0 * std::sin(6.0 * u + 4.0 * v + phase);
                    double& c = canvas[static_cast<std::size_t>(y) * w + x];
                    c = (1.0 - cover) * c + cover * shade;
                }
            }
        }
        GrayFrame f(w, hgt);
        for (std::size_t i = 0; i < canvas.size(); ++i) {
            f.data[i] = static_cast<std::uint8_t>(std::clamp(std::lround(canvas[i]), 0L, 255L));
        }
        write_pgm(dir / frame_filename(frame), f);
    }
}

json truth_to_json(const GroundTruth& t) {
    json vehicles = json::array();
    for (const auto& v : t.vehicles) {
        json series = json::array();
        for (const auto& [f, s] : v.speed_series) series.push_back({f, s});
        vehicles.push_back({{"id", v.id},
                            {"cls", v.cls},
                            {"direction", v.direction},
                            {"lane", v.lane},
                            {"speed_mph", v.speed_mph},
                            {"first_frame", v.first_frame},
                            {"last_frame", v.last_frame},
                            {"detections", v.detections},
                            {"dropped", v.dropped},
                            {"dipped", v.dipped},
                            {"speed_series", series}});
    }
    json counts = json::array();
    for (const auto& [key, n] : t.counts) {
        counts.push_back({{"direction", key.first}, {"class", key.second}, {"count", n}});
    }
    return {{"schema_version", 1}, {"detection_ids", t.detection_ids}, {"vehicles", vehicles}, {"counts", counts}};
}

GroundTruth truth_from_json(const json& j) {
    GroundTruth t;
    try {
        t.detection_ids = j.at("detection_ids").get<std::vector<int>>();
        for (const auto& v : j.at("vehicles")) {
            TruthVehicle tv;
            tv.id = v.at("id").get<int>();
            tv.cls = v.at("cls").get<std::string>();
            tv.direction = v.at("direction").get<int>();
            tv.lane = v.at("lane").get<int>();
            tv.speed_mph = v.at("speed_mph").get<double>();
            tv.first_frame = v.at("first_frame").get<int>();
            tv.last_frame = v.at("last_frame").get<int>();
            tv.detections = v.value("detections", 0);
            tv.dropped = v.value("dropped", 0);
            tv.dipped = v.value("dipped", 0);
            if (v.contains("speed_series")) {
                for (const auto& p : v.at("speed_series")) tv.speed_series.emplace_back(p.at(0).get<int>(), p.at(1).get<double>());
            }
            t.vehicles.push_back(std::move(tv));
        }
        for (const auto& c : j.at("counts")) {
            t.counts[{c.at("direction").get<int>(), c.at("class").get<std::string>()}] = c.at("count").get<int>();
        }
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, std::string("truth document: ") + e.what());
    }
    return t;
}

}  // namespace bevtrack
