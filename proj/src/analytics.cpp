#include "bevtrack/analytics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numbers>
#include <numeric>

#include "bevtrack/error.hpp"

namespace bevtrack {

namespace {

constexpr double kTimeSlack = 1e-9;

double coord(Point2 p, Axis a) { return a == Axis::X ? p.x : p.y; }

double median_of(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 == 1 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

// Linear interpolation in a time-sorted series; t must lie within its range.
double interp(std::span<const std::pair<double, double>> s, double t) {
    const auto it = std::lower_bound(s.begin(), s.end(), t,
                                     [](const std::pair<double, double>& p, double v) { return p.first < v; });
    if (it == s.begin()) return it->second;
    if (it == s.end()) return s.back().second;
    const auto& hi = *it;
    const auto& lo = *(it - 1);
    if (hi.first == lo.first) return hi.second;
    const double w = (t - lo.first) / (hi.first - lo.first);
    return lo.second + w * (hi.second - lo.second);
}

}  // namespace

DirectionInfo direction_of(const Track& track, double min_displacement) {
    if (track.entries.empty()) throw Error(Errc::TooShort, "empty track");
    const Point2 d = track.entries.back().det.center - track.entries.front().det.center;
    if (norm(d) < min_displacement || norm(d) == 0.0) {
        throw Error(Errc::TooShort, "track " + std::to_string(track.id) + " moves less than the minimum displacement");
    }
    double bearing = std::atan2(d.y, d.x) * 180.0 / std::numbers::pi;
    if (bearing < 0.0) bearing += 360.0;
    if (bearing >= 360.0) bearing -= 360.0;
    const double dom = std::abs(d.x) >= std::abs(d.y) ? d.x : d.y;
    return {dom > 0.0 ? 1 : 2, bearing};
}

double LaneModel::center_of(int lane) const {
    const auto n = static_cast<int>(centers.size());
    if (lane < 1 || lane > n) throw Error(Errc::ConfigError, "lane index out of range");
    return lane1_at_high ? centers[static_cast<std::size_t>(n - lane)] : centers[static_cast<std::size_t>(lane - 1)];
}

LaneModel detect_lanes(std::span<const Track> tracks, int direction, const LaneParams& params) {
    std::vector<const Track*> sel;
    double travel_x = 0.0;
    double travel_y = 0.0;
    for (const Track& t : tracks) {
        try {
            if (direction_of(t, params.min_displacement).direction != direction) continue;
        } catch (const Error&) {
            continue;
        }
        const Point2 d = t.entries.back().det.center - t.entries.front().det.center;
        travel_x += std::abs(d.x);
        travel_y += std::abs(d.y);
        sel.push_back(&t);
    }
    if (sel.empty()) throw Error(Errc::NoLanesFound, "no tracks in direction " + std::to_string(direction));

    LaneModel model;
    model.axis = travel_x >= travel_y ? Axis::Y : Axis::X;
    const bool positive = direction == 1;
    // Left of the heading in a y-down plane: heading +x -> -y, heading +y -> +x.
    model.lane1_at_high = model.axis == Axis::Y ? !positive : positive;

    std::vector<double> vals;
    for (const Track* t : sel) {
        for (const auto& e : t->entries) vals.push_back(coord(e.det.center, model.axis));
    }
    const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
    const int pad = params.smooth_bins;
    const double origin = std::floor(*mn / params.bin_px) * params.bin_px - pad * params.bin_px;
    const int nbins = static_cast<int>(std::ceil((*mx - origin) / params.bin_px)) + 1 + pad;
    std::vector<double> hist(static_cast<std::size_t>(nbins), 0.0);
    for (double v : vals) {
        const int b = std::clamp(static_cast<int>(std::floor((v - origin) / params.bin_px)), 0, nbins - 1);
        hist[static_cast<std::size_t>(b)] += 1.0;
    }
    const int half = params.smooth_bins / 2;
    std::vector<double> sm(hist.size(), 0.0);
    for (int i = 0; i < nbins; ++i) {
        double s = 0.0;
        for (int k = -half; k <= half; ++k) {
            if (i + k >= 0 && i + k < nbins) s += hist[static_cast<std::size_t>(i + k)];
        }
        sm[static_cast<std::size_t>(i)] = s / params.smooth_bins;
    }
    const double top = *std::max_element(sm.begin(), sm.end());

    struct Peak {
        int bin;
        double height;
    };
    std::vector<Peak> peaks;
    for (int i = 0; i < nbins; ++i) {
        const double h = sm[static_cast<std::size_t>(i)];
        if (h <= 0.0) continue;
        const double left = i > 0 ? sm[static_cast<std::size_t>(i - 1)] : 0.0;
        // Plateaus: take their first bin.
        int j = i;
        while (j + 1 < nbins && sm[static_cast<std::size_t>(j + 1)] == h) ++j;
        const double right = j + 1 < nbins ? sm[static_cast<std::size_t>(j + 1)] : 0.0;
        if (!(h > left && h > right)) continue;
        double lmin = h;
        for (int k = i - 1; k >= 0 && sm[static_cast<std::size_t>(k)] <= h; --k) lmin = std::min(lmin, sm[static_cast<std::size_t>(k)]);
        double rmin = h;
        for (int k = j + 1; k < nbins && sm[static_cast<std::size_t>(k)] <= h; ++k) rmin = std::min(rmin, sm[static_cast<std::size_t>(k)]);
        const double prominence = h - std::max(lmin, rmin);
        if (prominence >= params.min_prominence * top) peaks.push_back({(i + j) / 2, h});
        i = j;
    }
    std::stable_sort(peaks.begin(), peaks.end(), [](const Peak& a, const Peak& b) { return a.height > b.height; });

    std::vector<double> centers;
    for (const Peak& p : peaks) {
        const double c = origin + (p.bin + 0.5) * params.bin_px;
        const bool far_enough = std::all_of(centers.begin(), centers.end(), [&](double o) {
            return std::abs(o - c) >= params.min_separation;
        });
        if (far_enough) centers.push_back(c);
    }
    if (centers.empty()) throw Error(Errc::NoLanesFound, "no histogram peak");
    std::sort(centers.begin(), centers.end());

    // Refine each peak to the mean of the samples nearest to it.
    std::vector<double> sum(centers.size(), 0.0);
    std::vector<int> cnt(centers.size(), 0);
    for (double v : vals) {
        std::size_t best = 0;
        for (std::size_t k = 1; k < centers.size(); ++k) {
            if (std::abs(v - centers[k]) < std::abs(v - centers[best])) best = k;
        }
        if (std::abs(v - centers[best]) <= 0.5 * params.min_separation) {
            sum[best] += v;
            ++cnt[best];
        }
    }
    for (std::size_t k = 0; k < centers.size(); ++k) {
        if (cnt[k] > 0) centers[k] = sum[k] / cnt[k];
    }
    model.centers = centers;
    if (centers.size() >= 2) {
        model.width = (centers.back() - centers.front()) / static_cast<double>(centers.size() - 1);
    } else {
        const double mean = std::accumulate(vals.begin(), vals.end(), 0.0) / static_cast<double>(vals.size());
        double var = 0.0;
        for (double v : vals) var += (v - mean) * (v - mean);
        model.width = std::max(params.bin_px, 4.0 * std::sqrt(var / static_cast<double>(vals.size())));
    }
    return model;
}

int assign_lane(const Track& track, const LaneModel& lanes) {
    if (lanes.centers.empty()) throw Error(Errc::NoLanesFound, "empty lane model");
    std::vector<double> v;
    for (const auto& e : track.entries) v.push_back(coord(e.det.center, lanes.axis));
    if (v.empty()) throw Error(Errc::TooShort, "empty track");
    const double m = median_of(std::move(v));
    const int n = static_cast<int>(lanes.centers.size());
    int best = 1;
    double best_d = std::numeric_limits<double>::infinity();
    for (int lane = 1; lane <= n; ++lane) {
        const double d = std::abs(m - lanes.center_of(lane));
        if (d < best_d) {
            best_d = d;
            best = lane;
        }
    }
    return best;
}

std::vector<std::pair<double, double>> acceleration_series(std::span<const std::pair<double, double>> speed_mph,
                                                           double window_s) {
    std::vector<std::pair<double, double>> out;
    if (speed_mph.size() < 2) return out;
    const double half = 0.5 * window_s;
    const double t0 = speed_mph.front().first;
    const double t1 = speed_mph.back().first;
    for (const auto& [t, v] : speed_mph) {
        if (t - half < t0 - kTimeSlack || t + half > t1 + kTimeSlack) continue;
        const double dv = interp(speed_mph, std::min(t + half, t1)) - interp(speed_mph, std::max(t - half, t0));
        out.emplace_back(t, dv / window_s * kMphToMps);
    }
    return out;
}

Kinematics kinematics_series(const Track& track, const CalibrationModel& cal, double fps,
                             const KinematicsParams& params) {
    if (!(fps > 0.0)) throw Error(Errc::ConfigError, "fps must be positive");
    if (track.entries.size() < 2) throw Error(Errc::TooShort, "need at least two track states");

    std::vector<std::pair<double, double>> raw;
    raw.reserve(track.entries.size() - 1);
    for (std::size_t i = 1; i < track.entries.size(); ++i) {
        const auto& a = track.entries[i - 1];
        const auto& b = track.entries[i];
        const double dt = (b.frame - a.frame) / fps;
        const Point2 d = b.det.center - a.det.center;
        const Point2 mid = a.det.center + 0.5 * d;
        const auto [dx_ft, dy_ft] = calibrated_displacement(cal, mid, d.x, d.y);
        const double v = std::hypot(dx_ft, dy_ft) / dt * kFtPerSecToMph;
        raw.emplace_back(0.5 * (a.frame + b.frame) / fps, v);
    }

    Kinematics k;
    const double half = 0.5 * params.smooth_window_s;
    k.speed_mph.reserve(raw.size());
    std::size_t lo = 0;
    std::size_t hi = 0;
    double acc = 0.0;
    for (std::size_t i = 0; i < raw.size(); ++i) {
        const double t = raw[i].first;
        while (hi < raw.size() && raw[hi].first <= t + half + kTimeSlack) acc += raw[hi++].second;
        while (raw[lo].first < t - half - kTimeSlack) acc -= raw[lo++].second;
        k.speed_mph.emplace_back(t, acc / static_cast<double>(hi - lo));
    }
    k.accel_mps2 = acceleration_series(k.speed_mph, params.accel_window_s);
    return k;
}

double space_mean_speed(std::span<const double> speeds_mph) {
    if (speeds_mph.empty()) throw Error(Errc::ZeroSpeed, "no speeds");
    double inv = 0.0;
    for (double v : speeds_mph) {
        if (!(v > 1e-9)) throw Error(Errc::ZeroSpeed, "speed must be positive");
        inv += 1.0 / v;
    }
    return static_cast<double>(speeds_mph.size()) / inv;
}

double error_rate(double estimated, double real) {
    if (!(real > 0.0)) throw Error(Errc::ZeroDenominator, "real count must be positive");
    return 100.0 * std::abs(estimated - real) / real;
}

double round_to(double v, int decimals) {
    const double s = std::pow(10.0, decimals);
    return std::round(v * s) / s;
}

int SceneSummary::total(int direction, const std::string& cls) const {
    int n = 0;
    for (const auto& [key, c] : counts) {
        if (std::get<0>(key) == direction && std::get<1>(key) == cls) n += c;
    }
    return n;
}

std::map<CountKey, int> directional_counts(std::span<const VehicleRecord> records) {
    std::map<CountKey, int> out;
    for (const auto& r : records) ++out[{r.direction, r.cls, r.lane}];
    return out;
}

AnalyticsResult analyze_tracks(std::span<const Track> tracks, const CalibrationModel& cal, double fps,
                               double duration_s, const AnalyticsParams& params) {
    AnalyticsResult res;
    res.summary.duration_s = duration_s;

    std::map<int, std::vector<Track>> by_dir;
    std::vector<std::pair<const Track*, int>> usable;
    for (const Track& t : tracks) {
        if (t.entries.size() < 2) {
            ++res.summary.excluded_tracks;
            continue;
        }
        try {
            const int dir = direction_of(t, params.min_displacement).direction;
            by_dir[dir].push_back(t);
            usable.emplace_back(&t, dir);
        } catch (const Error&) {
            ++res.summary.excluded_tracks;
        }
    }
    LaneParams lp = params.lanes;
    lp.min_displacement = params.min_displacement;
    for (const auto& [dir, ts] : by_dir) res.lanes[dir] = detect_lanes(ts, dir, lp);

    for (const auto& [t, dir] : usable) {
        const Kinematics k = kinematics_series(*t, cal, fps, params.kinematics);
        VehicleRecord r;
        r.id = t->id;
        r.cls = t->cls;
        r.direction = dir;
        r.lane = assign_lane(*t, res.lanes.at(dir));
        r.first_frame = t->first_frame();
        r.last_frame = t->last_frame();
        r.speed_series = k.speed_mph;
        r.accel_series = k.accel_mps2;
        double s = 0.0;
        for (const auto& p : k.speed_mph) s += p.second;
        r.mean_speed = k.speed_mph.empty() ? 0.0 : s / static_cast<double>(k.speed_mph.size());
        double a = 0.0;
        for (const auto& p : k.accel_mps2) a += p.second;
        r.mean_accel = k.accel_mps2.empty() ? std::numeric_limits<double>::quiet_NaN()
                                            : a / static_cast<double>(k.accel_mps2.size());
        res.records.push_back(std::move(r));
    }
    std::sort(res.records.begin(), res.records.end(),
              [](const VehicleRecord& a, const VehicleRecord& b) { return a.id < b.id; });

    res.summary.counts = directional_counts(res.records);
    for (const auto& [dir, ts] : by_dir) {
        DirectionStats st;
        std::vector<double> speeds;
        for (const auto& r : res.records) {
            if (r.direction != dir) continue;
            ++st.vehicles;
            if (r.mean_speed < params.stop_speed_mph) {
                ++st.excluded_slow;
            } else {
                speeds.push_back(r.mean_speed);
            }
        }
        st.space_mean_speed_mph = speeds.empty() ? 0.0 : space_mean_speed(speeds);
        res.summary.directions[dir] = st;
    }
    return res;
}

}  // namespace bevtrack
