#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"
#include "bevtrack/pipeline.hpp"

namespace bevtrack {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

constexpr double kSpeedBin = 5.0;   // mph
constexpr double kAccelBin = 0.1;   // m/s^2

std::string fmt(double v, int decimals) {
    if (!std::isfinite(v)) return "";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", decimals, v);
    std::string s = buf;
    if (s.front() == '-' && s.find_first_not_of("-0.") == std::string::npos) s.erase(0, 1);
    return s;
}

std::ofstream open_out(const std::filesystem::path& p) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw Error(Errc::IoError, "cannot write " + p.string());
    return out;
}

void finish(std::ofstream& out, const std::filesystem::path& p) {
    out.flush();
    if (!out) throw Error(Errc::IoError, "write failed: " + p.string());
}

// Rows (direction, lane, bin_lo, bin_hi, count) over the given values.
void write_histogram(const std::filesystem::path& path, const std::string& unit,
                     const std::map<std::pair<int, int>, std::vector<double>>& groups, double bin, int decimals) {
    auto out = open_out(path);
    out << "direction,lane,bin_lo_" << unit << ",bin_hi_" << unit << ",count\n";
    for (const auto& [key, vals] : groups) {
        if (vals.empty()) continue;
        const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
        const long lo = static_cast<long>(std::floor(*mn / bin));
        const long hi = static_cast<long>(std::floor(*mx / bin));
        std::vector<int> counts(static_cast<std::size_t>(hi - lo + 1), 0);
        for (double v : vals) ++counts[static_cast<std::size_t>(static_cast<long>(std::floor(v / bin)) - lo)];
        for (long b = lo; b <= hi; ++b) {
            out << key.first << ',' << key.second << ',' << fmt(b * bin, decimals) << ',' << fmt((b + 1) * bin, decimals)
                << ',' << counts[static_cast<std::size_t>(b - lo)] << '\n';
        }
    }
    finish(out, path);
}

}  // namespace

RealCounts read_real_counts(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw Error(Errc::IoError, "cannot open " + path.string());
    RealCounts out;
    try {
        const json j = json::parse(in);
        const json& list = j.is_object() ? j.at("counts") : j;
        for (const auto& c : list) {
            const int n = c.at("count").get<int>();
            if (n < 0) throw Error(Errc::ConfigError, "real counts must be non-negative");
            out[{c.at("direction").get<int>(), c.value("class", std::string("all"))}] = n;
        }
    } catch (const json::exception& e) {
        throw Error(Errc::ConfigError, path.string() + ": " + e.what());
    }
    return out;
}

json summary_to_json(const AnalyticsResult& res, const Diagnostics* diag, const RealCounts* real) {
    ordered_json j;
    j["schema_version"] = 1;
    j["duration_s"] = res.summary.duration_s;
    j["vehicles"] = res.records.size();
    j["excluded_tracks"] = res.summary.excluded_tracks;

    ordered_json counts = ordered_json::array();
    for (const auto& [key, n] : res.summary.counts) {
        ordered_json c;
        c["direction"] = std::get<0>(key);
        c["class"] = std::get<1>(key);
        c["lane"] = std::get<2>(key);
        c["count"] = n;
        counts.push_back(std::move(c));
    }
    j["counts"] = std::move(counts);

    ordered_json dirs = ordered_json::array();
    for (const auto& [dir, st] : res.summary.directions) {
        ordered_json d;
        d["direction"] = dir;
        d["vehicles"] = st.vehicles;
        d["space_mean_speed_mph"] = st.space_mean_speed_mph;
        d["excluded_slow"] = st.excluded_slow;
        const auto lm = res.lanes.find(dir);
        ordered_json lanes = ordered_json::array();
        if (lm != res.lanes.end()) {
            for (int lane = 1; lane <= static_cast<int>(lm->second.centers.size()); ++lane) {
                std::vector<double> speeds;
                int n = 0;
                for (const auto& r : res.records) {
                    if (r.direction != dir || r.lane != lane) continue;
                    ++n;
                    if (r.mean_speed >= 1.0) speeds.push_back(r.mean_speed);
                }
                ordered_json l;
                l["lane"] = lane;
                l["center_px"] = lm->second.center_of(lane);
                l["vehicles"] = n;
                l["space_mean_speed_mph"] = speeds.empty() ? 0.0 : space_mean_speed(speeds);
                lanes.push_back(std::move(l));
            }
        }
        d["lanes"] = std::move(lanes);
        dirs.push_back(std::move(d));
    }
    j["directions"] = std::move(dirs);

    if (real != nullptr) {
        ordered_json ers = ordered_json::array();
        for (const auto& [key, r] : *real) {
            const int est = key.second == "all"
                                ? [&] {
                                      int n = 0;
                                      for (const auto& rec : res.records) n += rec.direction == key.first ? 1 : 0;
                                      return n;
                                  }()
                                : res.summary.total(key.first, key.second);
            ordered_json e;
            e["direction"] = key.first;
            e["class"] = key.second;
            e["estimated"] = est;
            e["real"] = r;
            e["er_pct"] = r > 0 ? json(round_to(error_rate(est, r), 2)) : json(nullptr);
            ers.push_back(std::move(e));
        }
        j["error_rates"] = std::move(ers);
    }
    if (diag != nullptr) {
        ordered_json d;
        d["detections_in"] = diag->detections_in;
        d["detections_projected"] = diag->detections_projected;
        d["tracks_before_stitching"] = diag->tracks_before_stitching;
        d["tracks_after_stitching"] = diag->tracks_after_stitching;
        d["calibration_samples"] = diag->calibration_samples;
        d["width_rms"] = diag->width_rms;
        d["height_rms"] = diag->height_rms;
        d["calibration_fallback"] = diag->calibration_fallback;
        d["calibration_note"] = diag->calibration_note;
        j["diagnostics"] = std::move(d);
    }
    return json::parse(j.dump());
}

void write_outputs(const AnalyticsResult& res, const CalibrationModel& model, const std::filesystem::path& out_dir,
                   const Diagnostics* diag, const RealCounts* real) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error(Errc::IoError, "cannot create " + out_dir.string() + ": " + ec.message());

    {
        const auto p = out_dir / "vehicles.csv";
        auto out = open_out(p);
        out << "id,class,direction,lane,first_frame,last_frame,mean_speed_mph,mean_accel_ms2\n";
        for (const auto& r : res.records) {
            out << r.id << ',' << r.cls << ',' << r.direction << ',' << r.lane << ',' << r.first_frame << ','
                << r.last_frame << ',' << fmt(r.mean_speed, 3) << ',' << fmt(r.mean_accel, 4) << '\n';
        }
        finish(out, p);
    }
    {
        const auto p = out_dir / "summary.json";
        auto out = open_out(p);
        out << summary_to_json(res, diag, real).dump(2) << '\n';
        finish(out, p);
    }
    {
        const auto p = out_dir / "calibration.json";
        auto out = open_out(p);
        out << calibration_to_json(model).dump(2) << '\n';
        finish(out, p);
    }
    std::map<std::pair<int, int>, std::vector<double>> speeds;
    std::map<std::pair<int, int>, std::vector<double>> accels;
    for (const auto& r : res.records) {
        speeds[{r.direction, r.lane}].push_back(r.mean_speed);
        if (std::isfinite(r.mean_accel)) accels[{r.direction, r.lane}].push_back(r.mean_accel);
    }
    write_histogram(out_dir / "speed_hist.csv", "mph", speeds, kSpeedBin, 1);
    write_histogram(out_dir / "accel_hist.csv", "ms2", accels, kAccelBin, 2);
}

TrackMetrics evaluate_tracks(std::span<const Track> tracks, const GroundTruth& truth, double min_displacement) {
    TrackMetrics m;
    m.truth_vehicles = static_cast<int>(truth.vehicles.size());
    m.pred_tracks = static_cast<int>(tracks.size());

    std::map<int, std::vector<std::pair<int, int>>> seen;  // truth id -> (frame, pred id)
    std::size_t covered = 0;
    for (const auto& t : tracks) {
        for (const auto& e : t.entries) {
            const int src = e.det.source;
            if (src < 0 || static_cast<std::size_t>(src) >= truth.detection_ids.size()) continue;
            seen[truth.detection_ids[static_cast<std::size_t>(src)]].emplace_back(e.frame, t.id);
            ++covered;
        }
    }
    m.unmatched_detections = static_cast<int>(truth.detection_ids.size() - std::min(covered, truth.detection_ids.size()));
    for (auto& [id, obs] : seen) {
        std::sort(obs.begin(), obs.end());
        std::set<int> ids;
        for (std::size_t i = 0; i < obs.size(); ++i) {
            ids.insert(obs[i].second);
            if (i > 0 && obs[i].second != obs[i - 1].second) ++m.id_switches;
        }
        if (ids.size() > 1) ++m.split_vehicles;
    }

    for (const auto& v : truth.vehicles) ++m.counts[v.direction].second;
    for (const auto& t : tracks) {
        if (t.entries.size() < 2) continue;
        try {
            ++m.counts[direction_of(t, min_displacement).direction].first;
        } catch (const Error&) {
        }
    }
    for (const auto& [dir, c] : m.counts) {
        if (c.second > 0) m.error_rate_pct[dir] = error_rate(c.first, c.second);
    }
    return m;
}

json metrics_to_json(const TrackMetrics& m) {
    ordered_json j;
    j["truth_vehicles"] = m.truth_vehicles;
    j["pred_tracks"] = m.pred_tracks;
    j["id_switches"] = m.id_switches;
    j["split_vehicles"] = m.split_vehicles;
    j["unmatched_detections"] = m.unmatched_detections;
    ordered_json counts = ordered_json::array();
    for (const auto& [dir, c] : m.counts) {
        ordered_json o;
        o["direction"] = dir;
        o["estimated"] = c.first;
        o["real"] = c.second;
        const auto it = m.error_rate_pct.find(dir);
        o["er_pct"] = it == m.error_rate_pct.end() ? json(nullptr) : json(it->second);
        counts.push_back(std::move(o));
    }
    j["counts"] = std::move(counts);
    return json::parse(j.dump());
}

}  // namespace bevtrack
