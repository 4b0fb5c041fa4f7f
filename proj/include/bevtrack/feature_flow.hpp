#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "bevtrack/geometry.hpp"
#include "bevtrack/tracking.hpp"

namespace bevtrack {

struct GrayFrame {
    int width = 0;
    int height = 0;
    std::vector<std::uint8_t> data;  // row-major

    GrayFrame() = default;
    GrayFrame(int w, int h, std::uint8_t fill = 0);

    std::uint8_t at(int x, int y) const { return data[static_cast<std::size_t>(y) * width + x]; }
    std::uint8_t& at(int x, int y) { return data[static_cast<std::size_t>(y) * width + x]; }
};

struct FeaturePoint {
    ImagePoint pos;
    double response = 0.0;
};

// Binary P5, maxval 255. Comments ('#' to end of line) are skipped.
GrayFrame decode_pgm(std::span<const std::uint8_t> bytes);
std::vector<std::uint8_t> encode_pgm(const GrayFrame& f);
GrayFrame read_pgm(const std::filesystem::path& path);
void write_pgm(const std::filesystem::path& path, const GrayFrame& f);
std::string frame_filename(int frame);  // frame_%06d.pgm

struct HarrisParams {
    double k = 0.04;
    double quality_level = 0.01;
};

std::vector<FeaturePoint> harris_corners(const GrayFrame& f, const BBox& roi, int max_points,
                                         const HarrisParams& params = {});

struct LkParams {
    int window = 15;
    int levels = 3;
    int max_iterations = 30;
    double epsilon = 0.01;
    double min_eigen_fraction = 1e-4;  // of the window area, intensities scaled to [0,1]
};

struct TrackedPoint {
    ImagePoint pos;
    bool valid = false;
};

std::vector<TrackedPoint> lk_track(const GrayFrame& prev, const GrayFrame& next, std::span<const FeaturePoint> pts,
                                   const LkParams& params = {});

struct FlowDisplacement {
    Point2 image;  // median cumulative displacement in the original view
    Point2 bev;    // same displacement carried through the scene homography
};

// Chains lk_track over consecutive frames starting from `seeds` on frames[0].
// `anchor` is the image point whose BEV image anchors the warped displacement.
FlowDisplacement predict_displacement(std::span<const GrayFrame> frames, std::span<const FeaturePoint> seeds,
                                      const Homography& image_to_bev, ImagePoint anchor,
                                      const LkParams& params = {});

}  // namespace bevtrack
