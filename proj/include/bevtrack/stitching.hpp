#pragma once

#include <functional>
#include <optional>
#include <span>
#include <vector>

#include "bevtrack/geometry.hpp"
#include "bevtrack/tracking.hpp"

namespace bevtrack {

enum class FragmentKind { Begin, End };

struct Fragment {
    FragmentKind kind = FragmentKind::Begin;
    int track_id = 0;
    int frame = 0;
    BevDetection anchor;
    std::vector<BevPoint> polyline;  // simplified whole track
    Point2 velocity;                 // filter velocity at the anchor, BEV px / frame
    int direction = 0;               // 1 / 2 by dominant-axis sign, 0 if stationary
};

struct JoinCandidate {
    Fragment end_fragment;
    Fragment begin_fragment;
    double deflection_deg = 0.0;
    double predicted_gap = 0.0;
};

struct StitchConfig {
    double max_deflection_deg = 30.0;
    double dist_fraction = 0.02;   // of the image diagonal
    double dp_epsilon = 1.0;       // Douglas-Peucker tolerance, BEV px
    int max_passes = 8;
};

// Returns the BEV displacement of the ending vehicle over `gap_frames`, or
// nullopt when no estimate is available (kinematic extrapolation is used then).
using DisplacementPredictor = std::function<std::optional<Point2>(const Fragment& ending, int gap_frames)>;

std::vector<BevPoint> douglas_peucker(std::span<const BevPoint> pts, double epsilon);

// Tracks with fewer than two entries produce no fragments. Order: for each
// track, its Begin then its End fragment.
std::vector<Fragment> build_fragments(std::span<const Track> tracks, double dp_epsilon = 1.0);

// Angle in degrees, [0, 180], between the ending polyline's final heading and
// the begin polyline's initial heading. 0 when either heading is undefined.
double deflection_deg(const Fragment& ending, const Fragment& begin);

std::vector<JoinCandidate> find_joinable(const Fragment& ending, std::span<const Fragment> begins, double fps,
                                         double max_deflection_deg);

double distance_threshold(double image_width, double image_height, double fraction);

std::optional<JoinCandidate> candidate_select(const Fragment& ending, std::span<const JoinCandidate> candidates,
                                              const DisplacementPredictor& predictor, double dist_thresh);

std::vector<Track> join_tracks(std::vector<Track> tracks, double fps, double image_width, double image_height,
                               const StitchConfig& cfg, const DisplacementPredictor& predictor = {});

}  // namespace bevtrack
