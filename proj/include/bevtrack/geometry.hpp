#pragma once

#include <array>
#include <span>

#include <Eigen/Core>

namespace bevtrack {

struct Point2 {
    double x = 0.0;
    double y = 0.0;

    friend bool operator==(const Point2&, const Point2&) = default;
};

// Image plane (pixels, y down) and bird's-eye-view plane share a representation;
// the aliases document which plane a value lives in.
using ImagePoint = Point2;
using BevPoint = Point2;

inline Point2 operator+(Point2 a, Point2 b) { return {a.x + b.x, a.y + b.y}; }
inline Point2 operator-(Point2 a, Point2 b) { return {a.x - b.x, a.y - b.y}; }
inline Point2 operator*(double s, Point2 p) { return {s * p.x, s * p.y}; }
double norm(Point2 p);

struct Correspondence {
    ImagePoint src;
    BevPoint dst;
};

struct LineSeg {
    ImagePoint p0;
    ImagePoint p1;
};

// Ordered near-left, near-right, far-right, far-left.
struct RoiQuad {
    ImagePoint a;
    ImagePoint b;
    ImagePoint c;
    ImagePoint d;

    std::array<ImagePoint, 4> corners() const { return {a, b, c, d}; }
};

enum class Side { Left, Right };

// Planar projective map. The stored matrix is scaled so its largest-magnitude
// entry is exactly 1.
class Homography {
public:
    Homography();  // identity

    // Normalizes; throws Singular if the matrix is not invertible.
    static Homography from_matrix(const Eigen::Matrix3d& m);

    // Least-squares DLT over >= 4 pairs with Hartley conditioning.
    static Homography estimate(std::span<const Correspondence> pairs);

    BevPoint apply(ImagePoint p) const;
    Homography inverse() const;

    const Eigen::Matrix3d& matrix() const { return h_; }

private:
    explicit Homography(const Eigen::Matrix3d& normalized) : h_(normalized) {}

    Eigen::Matrix3d h_;
};

Eigen::Matrix3d normalize_max_abs(const Eigen::Matrix3d& m);

// Signed area of the triangle divided by the squared bounding diagonal of the
// three points; 0 for coincident points.
double normalized_triangle_area(Point2 a, Point2 b, Point2 c);

ImagePoint intersect_lines(const LineSeg& l1, const LineSeg& l2);

ImagePoint second_vanishing_point(ImagePoint vp1, double image_width, Side side);

RoiQuad roi_quad(const LineSeg& left, const LineSeg& right, double near_y, double far_y);

// far_y defaults to halfway between the vanishing point and the image bottom.
double default_far_scanline(ImagePoint vanishing_point, double image_height);

// Maps the quad onto a bev_width x bev_height rectangle with travel (near -> far)
// along +x and the left boundary at y = 0.
std::array<Correspondence, 4> roi_correspondences(const RoiQuad& quad, double bev_width,
                                                  double bev_height);

}  // namespace bevtrack
