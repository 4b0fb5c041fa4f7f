#pragma once

#include <map>
#include <span>
#include <string>
#include <tuple>
#include <utility>
#include <vector>

#include "bevtrack/calibration.hpp"
#include "bevtrack/tracking.hpp"

namespace bevtrack {

inline constexpr double kFtPerSecToMph = 3600.0 / 5280.0;
inline constexpr double kMphToMps = 0.44704;

struct DirectionInfo {
    int direction = 0;       // 1 when the dominant-axis component is positive, else 2
    double bearing_deg = 0;  // [0, 360), 0 along +x
};

DirectionInfo direction_of(const Track& track, double min_displacement = 10.0);

enum class Axis { X = 0, Y = 1 };

struct LaneParams {
    double bin_px = 2.0;
    int smooth_bins = 5;
    double min_prominence = 0.2;  // fraction of the tallest smoothed bin
    double min_separation = 10.0;
    double min_displacement = 10.0;
};

struct LaneModel {
    Axis axis = Axis::Y;           // cross-travel axis
    std::vector<double> centers;   // strictly increasing
    double width = 0.0;
    bool lane1_at_high = false;    // lane 1 is the largest center when true

    // Center of the given 1-based lane.
    double center_of(int lane) const;
};

LaneModel detect_lanes(std::span<const Track> tracks, int direction, const LaneParams& params = {});

// 1-based; lane 1 is the innermost lane for the model's direction.
int assign_lane(const Track& track, const LaneModel& lanes);

struct KinematicsParams {
    double smooth_window_s = 1.0;
    double accel_window_s = 5.0;
};

struct Kinematics {
    std::vector<std::pair<double, double>> speed_mph;    // (time s, speed)
    std::vector<std::pair<double, double>> accel_mps2;   // (time s, acceleration)
};

Kinematics kinematics_series(const Track& track, const CalibrationModel& cal, double fps,
                             const KinematicsParams& params = {});

// Centered window difference over a speed series (mph), converted to m/s^2.
// Only times whose full window lies inside the series are reported.
std::vector<std::pair<double, double>> acceleration_series(std::span<const std::pair<double, double>> speed_mph,
                                                           double window_s);

double space_mean_speed(std::span<const double> speeds_mph);

double error_rate(double estimated, double real);
double round_to(double v, int decimals);

struct VehicleRecord {
    int id = 0;
    std::string cls;
    int direction = 0;
    int lane = 0;
    int first_frame = 0;
    int last_frame = 0;
    std::vector<std::pair<double, double>> speed_series;
    std::vector<std::pair<double, double>> accel_series;
    double mean_speed = 0.0;
    double mean_accel = 0.0;  // NaN when no acceleration sample exists
};

using CountKey = std::tuple<int, std::string, int>;  // direction, class, lane

struct DirectionStats {
    int vehicles = 0;
    double space_mean_speed_mph = 0.0;  // 0 when no moving vehicle
    int excluded_slow = 0;
};

struct SceneSummary {
    std::map<CountKey, int> counts;
    std::map<int, DirectionStats> directions;
    double duration_s = 0.0;
    int excluded_tracks = 0;  // too short to carry a direction

    int total(int direction, const std::string& cls) const;
};

std::map<CountKey, int> directional_counts(std::span<const VehicleRecord> records);

struct AnalyticsParams {
    LaneParams lanes;
    KinematicsParams kinematics;
    double min_displacement = 10.0;
    double stop_speed_mph = 1.0;
};

struct AnalyticsResult {
    std::vector<VehicleRecord> records;
    SceneSummary summary;
    std::map<int, LaneModel> lanes;
};

AnalyticsResult analyze_tracks(std::span<const Track> tracks, const CalibrationModel& cal, double fps,
                               double duration_s, const AnalyticsParams& params = {});

}  // namespace bevtrack
