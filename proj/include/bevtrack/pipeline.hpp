#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "bevtrack/analytics.hpp"
#include "bevtrack/calibration.hpp"
#include "bevtrack/feature_flow.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/stitching.hpp"
#include "bevtrack/tracking.hpp"

namespace bevtrack {

// ---------------------------------------------------------------------------
// Scene configuration

struct ClassSpec {
    std::string name;
    double bev_w = 20.0;  // default canonical box, BEV px
    double bev_h = 13.0;
};

struct BoundaryLines {
    LineSeg left;
    LineSeg right;
    double near_y = 0.0;  // scene config defaults it to the image height
    std::optional<double> far_y;  // defaults to halfway between vanishing point and image bottom
};

enum class TrackerKind { Motpy, Byte };

struct SceneConfig {
    int schema_version = 1;
    double image_w = 320.0;
    double image_h = 240.0;
    double fps = 15.0;
    double bev_w = 800.0;  // along travel
    double bev_h = 200.0;  // across travel
    std::optional<std::array<Correspondence, 4>> roi;
    std::optional<BoundaryLines> boundary_lines;
    std::vector<ClassSpec> classes{{"car", 20.0, 13.0}, {"truck", 40.0, 14.0}};
    TrackerKind tracker = TrackerKind::Byte;
    MotpyConfig motpy;
    ByteConfig byte;
    KalmanParams kalman;
    int box_warmup = 10;
    bool stitching = true;
    StitchConfig stitch;
    CalibrationSettings calibration;
    std::pair<double, double> fallback_ft_per_px{0.75, 0.45};
    AnalyticsParams analytics;
    std::string frames_dir;
};

// Throws ConfigError on an invalid configuration.
void validate(const SceneConfig& cfg);
SceneConfig scene_from_json(const nlohmann::json& j);
nlohmann::json scene_to_json(const SceneConfig& cfg);
SceneConfig load_scene(const std::filesystem::path& path);

// Example camera: 320x240, 15 fps, lanes converging at (160, 60).
SceneConfig example_scene();

std::array<Correspondence, 4> scene_correspondences(const SceneConfig& cfg);
Homography scene_homography(const SceneConfig& cfg);

TrackerKind parse_tracker_kind(const std::string& s);
std::string to_string(TrackerKind k);

// ---------------------------------------------------------------------------
// Detection records, one JSON object per line.

std::vector<Detection> parse_detections(std::istream& in);
std::vector<Detection> read_detections(const std::filesystem::path& path);
void write_detections(std::ostream& out, std::span<const Detection> dets);
void write_detections(const std::filesystem::path& path, std::span<const Detection> dets);

// Consecutive runs of equal frame index, as [begin, end) index ranges.
std::vector<std::pair<std::size_t, std::size_t>> frame_groups(std::span<const Detection> dets);

// ---------------------------------------------------------------------------
// Stages

// BEV center of an image box and the extent of its warped outline.
struct BevMeasurement {
    BevPoint center;
    double w = 0.0;
    double h = 0.0;
};

BevMeasurement measure_bev(const Homography& h, const BBox& image_box);

// Warps every detection; detections whose BEV center lies outside the BEV
// rectangle are dropped. `source` keeps the input index.
std::vector<BevDetection> project_detections(const SceneConfig& cfg, const Homography& h,
                                             std::span<const Detection> dets);

// Tracks sorted by id.
std::vector<Track> run_tracker(const SceneConfig& cfg, std::span<const BevDetection> dets);

std::vector<CalSample> calibration_samples(std::span<const Track> tracks);

// Uses frames_dir/frame_%06d.pgm; missing frames or failed flow give nullopt.
DisplacementPredictor make_flow_predictor(const std::filesystem::path& frames_dir, const Homography& image_to_bev,
                                          int max_points = 40, const LkParams& lk = {});

struct Diagnostics {
    std::size_t detections_in = 0;
    std::size_t detections_projected = 0;
    std::size_t tracks_before_stitching = 0;
    std::size_t tracks_after_stitching = 0;
    int calibration_samples = 0;
    double width_rms = 0.0;
    double height_rms = 0.0;
    bool calibration_fallback = false;
    std::string calibration_note;
};

// Fits on car tracks; falls back to the uniform model on InsufficientSamples.
CalibrationModel fit_scene_calibration(const SceneConfig& cfg, std::span<const Track> tracks, Diagnostics& diag);

struct PipelineResult {
    std::vector<Track> tracks;  // after stitching
    AnalyticsResult analytics;
    CalibrationModel calibration;
    Diagnostics diagnostics;
};

double stream_duration_s(const SceneConfig& cfg, std::span<const Detection> dets);

// Errors from any stage are rethrown with the stage name prefixed.
PipelineResult run_pipeline(const SceneConfig& cfg, std::span<const Detection> dets);

// ---------------------------------------------------------------------------
// Synthetic scenes

struct SynthClass {
    std::string name = "car";
    int per_direction = 50;
    double length_scale = 1.0;  // BEV box size relative to the calibration line
    double width_scale = 1.0;
};

struct SynthSpec {
    std::vector<SynthClass> classes{SynthClass{}};
    double speed_mean_mph = 60.0;
    double speed_sd_mph = 0.0;
    double speed_min_mph = 45.0;
    double speed_max_mph = 75.0;
    // Lane centers (BEV y), innermost first.
    std::map<int, std::vector<double>> lanes{{1, {120.0, 150.0, 180.0}}, {2, {80.0, 50.0, 20.0}}};
    // Observed car box: w(x) = width_c0 + width_c1 x, h(y) = height_c0 + height_c1 y.
    double width_c0 = 18.0;
    double width_c1 = 0.005;
    double height_c0 = 12.0;
    double height_c1 = 0.01;
    double min_headway_s = 2.5;
    double extra_headway_mean_s = 1.0;
    double dropout_prob = 0.0;
    int dropout_min_frames = 3;
    int dropout_max_frames = 10;
    double dip_prob = 0.0;
    int dip_frames = 1;
    double dip_score = 0.3;
    double base_score = 0.9;
    double noise_px = 0.0;  // image-plane sd on box coordinates
    std::uint64_t seed = 1;
};

struct TruthVehicle {
    int id = 0;
    std::string cls;
    int direction = 0;
    int lane = 0;
    double speed_mph = 0.0;
    int first_frame = 0;
    int last_frame = 0;
    int detections = 0;
    int dropped = 0;
    int dipped = 0;
    std::vector<std::pair<int, double>> speed_series;  // (frame, mph)
};

struct GroundTruth {
    std::vector<int> detection_ids;  // truth id per emitted detection
    std::vector<TruthVehicle> vehicles;
    std::map<std::pair<int, std::string>, int> counts;  // (direction, class)
};

struct SynthScene {
    std::vector<Detection> detections;
    GroundTruth truth;
};

void validate(const SynthSpec& spec);
SynthSpec synth_spec_from_json(const nlohmann::json& j);
nlohmann::json synth_spec_to_json(const SynthSpec& s);

SynthScene gen_synthetic_scene(const SynthSpec& spec, const SceneConfig& cfg);

// Image box whose BEV measurement equals (center, w, h).
BBox invert_measurement(const Homography& h, BevPoint center, double w, double h_extent);

// Textured vehicles over a textured background, one PGM per frame.
void render_frames(const SceneConfig& cfg, std::span<const Detection> dets, const GroundTruth& truth,
                   const std::filesystem::path& dir, std::uint64_t seed);

nlohmann::json truth_to_json(const GroundTruth& t);
GroundTruth truth_from_json(const nlohmann::json& j);

// ---------------------------------------------------------------------------
// Serialization

nlohmann::json track_to_json(const Track& t);
Track track_from_json(const nlohmann::json& j);
void write_tracks(const std::filesystem::path& path, std::span<const Track> tracks);
std::vector<Track> read_tracks(const std::filesystem::path& path);

// (direction, class) -> real count
using RealCounts = std::map<std::pair<int, std::string>, int>;
RealCounts read_real_counts(const std::filesystem::path& path);

nlohmann::json summary_to_json(const AnalyticsResult& res, const Diagnostics* diag, const RealCounts* real);

// vehicles.csv, summary.json, calibration.json, speed_hist.csv, accel_hist.csv
void write_outputs(const AnalyticsResult& res, const CalibrationModel& model, const std::filesystem::path& out_dir,
                   const Diagnostics* diag = nullptr, const RealCounts* real = nullptr);

// ---------------------------------------------------------------------------
// Evaluation against synthetic ground truth

struct TrackMetrics {
    int truth_vehicles = 0;
    int pred_tracks = 0;
    int id_switches = 0;
    int split_vehicles = 0;  // covered by more than one predicted id
    int unmatched_detections = 0;
    std::map<int, std::pair<int, int>> counts;  // direction -> (estimated, real)
    std::map<int, double> error_rate_pct;
};

// Tracks must carry source indices into the stream the truth describes.
TrackMetrics evaluate_tracks(std::span<const Track> tracks, const GroundTruth& truth, double min_displacement = 10.0);
nlohmann::json metrics_to_json(const TrackMetrics& m);

}  // namespace bevtrack
