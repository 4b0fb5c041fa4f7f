#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "bevtrack/geometry.hpp"

namespace bevtrack {

// Axis-aligned box, top-left corner plus size.
struct BBox {
    double x = 0.0;
    double y = 0.0;
    double w = 0.0;
    double h = 0.0;

    Point2 center() const { return {x + 0.5 * w, y + 0.5 * h}; }
    static BBox centered(Point2 c, double w, double h) { return {c.x - 0.5 * w, c.y - 0.5 * h, w, h}; }

    friend bool operator==(const BBox&, const BBox&) = default;
};

double iou(const BBox& a, const BBox& b);

struct Detection {
    int frame = 0;
    std::string cls;
    BBox bbox;
    double score = 0.0;

    friend bool operator==(const Detection&, const Detection&) = default;
};

struct BevDetection {
    int frame = 0;
    std::string cls;
    BevPoint center;
    BBox bbox;            // class-canonical box used for association
    double observed_w = 0.0;  // extent of the warped image box
    double observed_h = 0.0;
    BBox image_bbox;
    double score = 0.0;
    int source = -1;      // index into the originating detection stream
};

// ---------------------------------------------------------------------------
// Constant-velocity Kalman filter over (cx, cy, vx, vy).

struct KalmanParams {
    double q_pos = 1.0;
    double q_vel = 4.0;
    double r_pos = 4.0;
    double init_vel_var = 100.0;
};

struct KalmanState {
    Eigen::Vector4d mean = Eigen::Vector4d::Zero();
    Eigen::Matrix4d cov = Eigen::Matrix4d::Identity();

    Point2 position() const { return {mean(0), mean(1)}; }
    Point2 velocity() const { return {mean(2), mean(3)}; }
};

KalmanState kf_init(BevPoint z, const KalmanParams& p);
KalmanState kf_predict(const KalmanState& s, const KalmanParams& p);
KalmanState kf_update(const KalmanState& s, BevPoint z, const KalmanParams& p);

// ---------------------------------------------------------------------------
// Assignment.

// Optimal min-cost matching over an m x n cost matrix (rectangular allowed).
// Pairs whose cost exceeds `max_cost` are dropped after solving; entries above
// it are treated as forbidden while solving.
std::vector<std::pair<int, int>> assign_min_cost(const Eigen::MatrixXd& cost, double max_cost);

// ---------------------------------------------------------------------------
// Tracks.

enum class AssocStage { Birth, Motpy, First, Second };
enum class TrackStatus { Active, Finished };

struct TrackEntry {
    int frame = 0;
    KalmanState state;
    BevDetection det;
    AssocStage stage = AssocStage::Birth;
};

struct Track {
    int id = 0;
    std::string cls;
    std::vector<TrackEntry> entries;
    double max_score = 0.0;
    TrackStatus status = TrackStatus::Active;

    KalmanState filter;   // current (possibly coasted) estimate
    int misses = 0;       // consecutive unmatched frames

    int first_frame() const { return entries.front().frame; }
    int last_frame() const { return entries.back().frame; }
    std::size_t size() const { return entries.size(); }

    // Box at the filter's position with the size of the latest detection box.
    BBox predicted_box() const;
    void append(const BevDetection& det, const KalmanState& state, AssocStage stage);
    // Majority class; ties go to the class with the larger summed score.
    void refresh_class();
};

struct MotpyConfig {
    double sigma_l = 0.1;
    double sigma_h = 0.5;
    double sigma_iou = 0.25;
    int min_tsize = 3;
    int max_coast = 0;
};

struct ByteConfig {
    double tau = 0.5;
    double match_thresh_high = 0.3;
    double match_thresh_low = 0.2;
    int max_coast = 15;
};

struct StepResult {
    std::vector<Track> finished;
};

class MotpyTracker {
public:
    MotpyTracker(MotpyConfig cfg, KalmanParams kf);

    // All detections must carry `frame`, which must exceed the previous step.
    StepResult step(int frame, std::span<const BevDetection> dets);
    // Ends the scene: active tracks satisfying the finish rule are returned.
    std::vector<Track> flush();

    const std::vector<Track>& active() const { return active_; }

private:
    bool finishable(const Track& t) const;

    MotpyConfig cfg_;
    KalmanParams kf_;
    std::vector<Track> active_;
    int next_id_ = 1;
    int last_frame_ = -1;
};

class ByteTracker {
public:
    ByteTracker(ByteConfig cfg, KalmanParams kf);

    StepResult step(int frame, std::span<const BevDetection> dets);
    std::vector<Track> flush();

    const std::vector<Track>& active() const { return tracks_; }

private:
    ByteConfig cfg_;
    KalmanParams kf_;
    std::vector<Track> tracks_;
    int next_id_ = 1;
    int last_frame_ = -1;
};

// Running per-class mean of observed BEV box sizes.
class BevBoxSizer {
public:
    BevBoxSizer(std::map<std::string, std::pair<double, double>> defaults, int warmup_count,
                std::pair<double, double> fallback = {10.0, 24.0});

    void observe(const std::string& cls, double w, double h);
    std::pair<double, double> size(const std::string& cls) const;

private:
    struct Stats {
        double sum_w = 0.0;
        double sum_h = 0.0;
        int n = 0;
    };
    std::map<std::string, std::pair<double, double>> defaults_;
    std::map<std::string, Stats> stats_;
    int warmup_;
    std::pair<double, double> fallback_;
};

}  // namespace bevtrack
