#pragma once

#include <array>
#include <cmath>
#include <random>

#include <Eigen/Dense>

#include "bevtrack/geometry.hpp"

namespace testsupport {

// Moderate projective map over a 320x240 image; condition stays well below 1e4.
inline Eigen::Matrix3d random_homography(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> lin(-0.3, 0.3);
    std::uniform_real_distribution<double> tr(-40.0, 40.0);
    std::uniform_real_distribution<double> proj(-5e-4, 5e-4);
    Eigen::Matrix3d h;
    h << 1.0 + lin(rng), lin(rng), tr(rng),
         lin(rng), 1.0 + lin(rng), tr(rng),
         proj(rng), proj(rng), 1.0;
    return h;
}

inline Eigen::Matrix3d max_abs_normalized(const Eigen::Matrix3d& m) {
    Eigen::Index r = 0;
    Eigen::Index c = 0;
    m.cwiseAbs().maxCoeff(&r, &c);
    return m / m(r, c);
}

inline bevtrack::Point2 apply_raw(const Eigen::Matrix3d& h, bevtrack::Point2 p) {
    const Eigen::Vector3d v = h * Eigen::Vector3d(p.x, p.y, 1.0);
    return {v(0) / v(2), v(1) / v(2)};
}

// Four points, one per image quadrant, so no three are collinear.
inline std::array<bevtrack::Point2, 4> spread_points(std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(10.0, 150.0);
    std::uniform_real_distribution<double> v(10.0, 110.0);
    return {{{u(rng), v(rng)}, {160.0 + u(rng), v(rng)}, {160.0 + u(rng), 120.0 + v(rng)}, {u(rng), 120.0 + v(rng)}}};
}

// Independent oracle: fix h33 = 1 and solve the 8x8 system directly.
inline Eigen::Matrix3d solve_h33(const std::array<bevtrack::Correspondence, 4>& pairs) {
    Eigen::Matrix<double, 8, 8> a;
    Eigen::Matrix<double, 8, 1> b;
    for (int i = 0; i < 4; ++i) {
        const auto [s, d] = pairs[static_cast<std::size_t>(i)];
        a.row(2 * i) << s.x, s.y, 1, 0, 0, 0, -d.x * s.x, -d.x * s.y;
        a.row(2 * i + 1) << 0, 0, 0, s.x, s.y, 1, -d.y * s.x, -d.y * s.y;
        b(2 * i) = d.x;
        b(2 * i + 1) = d.y;
    }
    const Eigen::Matrix<double, 8, 1> x = a.fullPivLu().solve(b);
    Eigen::Matrix3d h;
    h << x(0), x(1), x(2), x(3), x(4), x(5), x(6), x(7), 1.0;
    return h;
}

}  // namespace testsupport
