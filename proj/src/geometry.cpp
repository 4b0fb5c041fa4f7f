#include "bevtrack/geometry.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include <Eigen/Dense>

#include "bevtrack/error.hpp"

namespace bevtrack {

namespace {

constexpr double kInfinityTol = 1e-12;
constexpr double kMaxCondition = 1e12;
constexpr double kCollinearTol = 1e-9;
constexpr double kRankTol = 1e-10;

bool finite(Point2 p) { return std::isfinite(p.x) && std::isfinite(p.y); }

double condition_number(const Eigen::Matrix3d& m) {
    Eigen::JacobiSVD<Eigen::Matrix3d> svd(m);
    const auto& s = svd.singularValues();
    if (s(2) <= 0.0) return std::numeric_limits<double>::infinity();
    return s(0) / s(2);
}

// Similarity taking the centroid to the origin and the mean distance to sqrt(2).
Eigen::Matrix3d conditioning_transform(const std::vector<Point2>& pts) {
    Point2 c{};
    for (const auto& p : pts) c = c + p;
    c = (1.0 / static_cast<double>(pts.size())) * c;
    double mean_dist = 0.0;
    for (const auto& p : pts) mean_dist += norm(p - c);
    mean_dist /= static_cast<double>(pts.size());
    const double s = mean_dist > 0.0 ? std::sqrt(2.0) / mean_dist : 1.0;
    Eigen::Matrix3d t;
    t << s, 0, -s * c.x,
         0, s, -s * c.y,
         0, 0, 1;
    return t;
}

Point2 transform(const Eigen::Matrix3d& t, Point2 p) {
    const Eigen::Vector3d v = t * Eigen::Vector3d(p.x, p.y, 1.0);
    return {v(0) / v(2), v(1) / v(2)};
}

bool any_three_collinear(const std::array<Point2, 4>& p) {
    for (int skip = 0; skip < 4; ++skip) {
        std::array<Point2, 3> tri{};
        int k = 0;
        for (int i = 0; i < 4; ++i) {
            if (i != skip) tri[k++] = p[i];
        }
        if (std::abs(normalized_triangle_area(tri[0], tri[1], tri[2])) < kCollinearTol) return true;
    }
    return false;
}

Eigen::Vector3d homogeneous_line(const LineSeg& l) {
    return Eigen::Vector3d(l.p0.x, l.p0.y, 1.0).cross(Eigen::Vector3d(l.p1.x, l.p1.y, 1.0));
}

// Intersection of the infinite line through seg with the horizontal line y = scan_y.
ImagePoint at_scanline(const LineSeg& seg, double scan_y) {
    const double dy = seg.p1.y - seg.p0.y;
    if (std::abs(dy) < kInfinityTol) {
        throw Error(Errc::Degenerate, "boundary line is parallel to the scanline");
    }
    const double t = (scan_y - seg.p0.y) / dy;
    return {seg.p0.x + t * (seg.p1.x - seg.p0.x), scan_y};
}

double cross(Point2 a, Point2 b) { return a.x * b.y - a.y * b.x; }

bool segments_cross(Point2 p1, Point2 p2, Point2 q1, Point2 q2) {
    const double d1 = cross(q2 - q1, p1 - q1);
    const double d2 = cross(q2 - q1, p2 - q1);
    const double d3 = cross(p2 - p1, q1 - p1);
    const double d4 = cross(p2 - p1, q2 - p1);
    return ((d1 > 0 && d2 < 0) || (d1 < 0 && d2 > 0)) && ((d3 > 0 && d4 < 0) || (d3 < 0 && d4 > 0));
}

}  // namespace

double norm(Point2 p) { return std::hypot(p.x, p.y); }

Eigen::Matrix3d normalize_max_abs(const Eigen::Matrix3d& m) {
    Eigen::Index r = 0;
    Eigen::Index c = 0;
    m.cwiseAbs().maxCoeff(&r, &c);
    const double pivot = m(r, c);
    if (pivot == 0.0 || !std::isfinite(pivot)) {
        throw Error(Errc::Singular, "zero or non-finite matrix");
    }
    Eigen::Matrix3d out = m / pivot;
    out(r, c) = 1.0;
    return out;
}

Homography::Homography() : h_(Eigen::Matrix3d::Identity()) {}

Homography Homography::from_matrix(const Eigen::Matrix3d& m) {
    if (!m.allFinite()) throw Error(Errc::Singular, "non-finite homography entries");
    const Eigen::Matrix3d n = normalize_max_abs(m);
    if (condition_number(n) > kMaxCondition) {
        throw Error(Errc::Singular, "homography is rank deficient");
    }
    return Homography(n);
}

Homography Homography::estimate(std::span<const Correspondence> pairs) {
    const std::size_t n = pairs.size();
    if (n < 4) {
        throw Error(Errc::DegenerateConfiguration, "need at least 4 correspondences");
    }
    std::vector<Point2> src;
    std::vector<Point2> dst;
    src.reserve(n);
    dst.reserve(n);
    for (const auto& c : pairs) {
        if (!finite(c.src) || !finite(c.dst)) {
            throw Error(Errc::DegenerateConfiguration, "non-finite correspondence");
        }
        src.push_back(c.src);
        dst.push_back(c.dst);
    }
    if (n == 4 && (any_three_collinear({src[0], src[1], src[2], src[3]}) ||
                   any_three_collinear({dst[0], dst[1], dst[2], dst[3]}))) {
        throw Error(Errc::DegenerateConfiguration, "three of the four points are collinear");
    }

    const Eigen::Matrix3d ts = conditioning_transform(src);
    const Eigen::Matrix3d td = conditioning_transform(dst);

    // Pad to at least 9 rows so the SVD always yields nine singular values.
    const Eigen::Index rows = std::max<Eigen::Index>(static_cast<Eigen::Index>(2 * n), 9);
    Eigen::MatrixXd a = Eigen::MatrixXd::Zero(rows, 9);
    for (std::size_t i = 0; i < n; ++i) {
        const Point2 s = transform(ts, src[i]);
        const Point2 d = transform(td, dst[i]);
        const auto r = static_cast<Eigen::Index>(2 * i);
        a.row(r) << s.x, s.y, 1, 0, 0, 0, -d.x * s.x, -d.x * s.y, -d.x;
        a.row(r + 1) << 0, 0, 0, s.x, s.y, 1, -d.y * s.x, -d.y * s.y, -d.y;
    }

    Eigen::JacobiSVD<Eigen::MatrixXd> svd(a, Eigen::ComputeFullV);
    const Eigen::VectorXd& sv = svd.singularValues();
    if (sv(0) <= 0.0 || sv(7) / sv(0) < kRankTol) {
        throw Error(Errc::DegenerateConfiguration, "correspondences do not determine a unique map");
    }
    const Eigen::VectorXd h = svd.matrixV().col(8);
    Eigen::Matrix3d hn;
    hn << h(0), h(1), h(2),
          h(3), h(4), h(5),
          h(6), h(7), h(8);
    return from_matrix(td.inverse() * hn * ts);
}

BevPoint Homography::apply(ImagePoint p) const {
    const double den = h_(2, 0) * p.x + h_(2, 1) * p.y + h_(2, 2);
    if (std::abs(den) < kInfinityTol) {
        throw Error(Errc::AtInfinity, "point maps to the line at infinity");
    }
    return {(h_(0, 0) * p.x + h_(0, 1) * p.y + h_(0, 2)) / den,
            (h_(1, 0) * p.x + h_(1, 1) * p.y + h_(1, 2)) / den};
}

Homography Homography::inverse() const {
    if (condition_number(h_) > kMaxCondition) {
        throw Error(Errc::Singular, "homography is ill-conditioned");
    }
    return Homography(normalize_max_abs(h_.inverse()));
}

double normalized_triangle_area(Point2 a, Point2 b, Point2 c) {
    const double lo_x = std::min({a.x, b.x, c.x});
    const double hi_x = std::max({a.x, b.x, c.x});
    const double lo_y = std::min({a.y, b.y, c.y});
    const double hi_y = std::max({a.y, b.y, c.y});
    const double diag2 = (hi_x - lo_x) * (hi_x - lo_x) + (hi_y - lo_y) * (hi_y - lo_y);
    if (diag2 == 0.0) return 0.0;
    return 0.5 * cross(b - a, c - a) / diag2;
}

ImagePoint intersect_lines(const LineSeg& l1, const LineSeg& l2) {
    if (l1.p0 == l1.p1 || l2.p0 == l2.p1) {
        throw Error(Errc::Degenerate, "line segment endpoints coincide");
    }
    const Eigen::Vector3d l = homogeneous_line(l1);
    const Eigen::Vector3d m = homogeneous_line(l2);
    const Eigen::Vector3d x = l.cross(m);
    // Scale-free test: compare against the magnitudes of the line coefficients.
    const double scale = l.head<2>().norm() * m.head<2>().norm();
    if (std::abs(x(2)) < kInfinityTol * std::max(scale, 1.0)) {
        throw Error(Errc::Parallel, "lines do not intersect");
    }
    return {x(0) / x(2), x(1) / x(2)};
}

ImagePoint second_vanishing_point(ImagePoint vp1, double image_width, Side side) {
    if (!(image_width > 0.0)) throw Error(Errc::ConfigError, "image width must be positive");
    const double offset = 2.0 * image_width;
    return {side == Side::Right ? vp1.x + offset : vp1.x - offset, vp1.y};
}

RoiQuad roi_quad(const LineSeg& left, const LineSeg& right, double near_y, double far_y) {
    if (!(near_y > far_y)) throw Error(Errc::Degenerate, "near scanline must lie below the far one");
    const RoiQuad q{at_scanline(left, near_y), at_scanline(right, near_y), at_scanline(right, far_y),
                    at_scanline(left, far_y)};
    const auto pts = q.corners();
    for (const auto& p : pts) {
        if (!finite(p)) throw Error(Errc::Degenerate, "non-finite ROI corner");
    }
    double area2 = 0.0;
    double scale2 = 0.0;
    for (std::size_t i = 0; i < 4; ++i) {
        const Point2 e = pts[(i + 1) % 4] - pts[i];
        area2 += cross(pts[i], pts[(i + 1) % 4]);
        scale2 = std::max(scale2, e.x * e.x + e.y * e.y);
    }
    const double tol = kCollinearTol * std::max(scale2, 1.0);
    for (std::size_t i = 0; i < 4; ++i) {
        const Point2 e = pts[(i + 1) % 4] - pts[i];
        if (e.x * e.x + e.y * e.y < tol) throw Error(Errc::Degenerate, "ROI has a zero-length edge");
    }
    if (std::abs(area2) < tol) throw Error(Errc::Degenerate, "ROI has zero area");
    if (segments_cross(q.a, q.b, q.c, q.d) || segments_cross(q.b, q.c, q.d, q.a)) {
        throw Error(Errc::Degenerate, "ROI is self-intersecting");
    }
    return q;
}

double default_far_scanline(ImagePoint vanishing_point, double image_height) {
    return 0.5 * (vanishing_point.y + image_height);
}

std::array<Correspondence, 4> roi_correspondences(const RoiQuad& quad, double bev_width,
                                                  double bev_height) {
    return {{{quad.a, {0.0, 0.0}},
             {quad.b, {0.0, bev_height}},
             {quad.c, {bev_width, bev_height}},
             {quad.d, {bev_width, 0.0}}}};
}

}  // namespace bevtrack
