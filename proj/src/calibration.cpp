#include "bevtrack/calibration.hpp"

#include <algorithm>
#include <cmath>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"

namespace bevtrack {

namespace {

constexpr double kGridSlack = 1e-9;

std::vector<double> grid_nodes(double extent, double cell) {
    std::vector<double> nodes;
    for (double v = 0.0; v < extent; v += cell) nodes.push_back(v);
    nodes.push_back(extent);
    return nodes;
}

// Minimum of the polynomial over [0, extent]; exact for degree <= 2.
double min_over(std::span<const double> c, double extent) {
    double lo = std::min(eval_poly(c, 0.0), eval_poly(c, extent));
    if (c.size() == 3 && c[2] != 0.0) {
        const double vertex = -c[1] / (2.0 * c[2]);
        if (vertex > 0.0 && vertex < extent) lo = std::min(lo, eval_poly(c, vertex));
    }
    return lo;
}

double rms_residual(std::span<const double> coeffs, std::span<const double> x, std::span<const double> y) {
    double s = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double r = y[i] - eval_poly(coeffs, x[i]);
        s += r * r;
    }
    return x.empty() ? 0.0 : std::sqrt(s / static_cast<double>(x.size()));
}

}  // namespace

double eval_poly(std::span<const double> coeffs, double x) {
    double v = 0.0;
    for (auto it = coeffs.rbegin(); it != coeffs.rend(); ++it) v = v * x + *it;
    return v;
}

std::vector<double> fit_polynomial(std::span<const double> x, std::span<const double> y, int degree) {
    const auto n = static_cast<Eigen::Index>(x.size());
    Eigen::MatrixXd a(n, degree + 1);
    Eigen::VectorXd b(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        double p = 1.0;
        for (int d = 0; d <= degree; ++d) {
            a(i, d) = p;
            p *= x[static_cast<std::size_t>(i)];
        }
        b(i) = y[static_cast<std::size_t>(i)];
    }
    const Eigen::VectorXd c = a.colPivHouseholderQr().solve(b);
    return {c.data(), c.data() + c.size()};
}

CalibrationModel::CalibrationModel(std::vector<double> width_coeffs, std::vector<double> height_coeffs,
                                   double grid_width, double grid_height, double cell_px, double ref_length_ft,
                                   double ref_height_ft)
    : width_coeffs_(std::move(width_coeffs)),
      height_coeffs_(std::move(height_coeffs)),
      grid_w_(grid_width),
      grid_h_(grid_height),
      cell_(cell_px),
      ref_length_ft_(ref_length_ft),
      ref_height_ft_(ref_height_ft) {
    if (!(grid_w_ > 0.0 && grid_h_ > 0.0 && cell_ > 0.0)) {
        throw Error(Errc::ConfigError, "calibration grid dimensions must be positive");
    }
    if (width_coeffs_.empty() || height_coeffs_.empty() || width_coeffs_.size() > 3 || height_coeffs_.size() > 3) {
        throw Error(Errc::ConfigError, "calibration polynomials must have degree 0..2");
    }
    if (!(min_over(width_coeffs_, grid_w_) > 0.0) || !(min_over(height_coeffs_, grid_h_) > 0.0)) {
        throw Error(Errc::NonPositivePrediction, "predicted box size is not positive over the whole grid");
    }
    xs_ = grid_nodes(grid_w_, cell_);
    ys_ = grid_nodes(grid_h_, cell_);
    const auto rows = static_cast<Eigen::Index>(ys_.size());
    const auto cols = static_cast<Eigen::Index>(xs_.size());
    k_w_grid_.resize(rows, cols);
    k_h_grid_.resize(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r) {
        for (Eigen::Index c = 0; c < cols; ++c) {
            k_w_grid_(r, c) = 1.0 / predicted_width(xs_[static_cast<std::size_t>(c)]);
            k_h_grid_(r, c) = 1.0 / predicted_height(ys_[static_cast<std::size_t>(r)]);
        }
    }
}

CalibrationModel CalibrationModel::uniform(double grid_width, double grid_height, double ft_per_px_x,
                                           double ft_per_px_y, double cell_px) {
    if (!(ft_per_px_x > 0.0 && ft_per_px_y > 0.0)) {
        throw Error(Errc::ConfigError, "fallback scale must be positive");
    }
    CalibrationModel m({kSedanLengthFt / ft_per_px_x}, {kSedanHeightFt / ft_per_px_y}, grid_width, grid_height,
                       cell_px);
    m.fallback = true;
    return m;
}

double CalibrationModel::predicted_width(double x) const { return eval_poly(width_coeffs_, x); }
double CalibrationModel::predicted_height(double y) const { return eval_poly(height_coeffs_, y); }

double CalibrationModel::lookup(const Eigen::MatrixXd& grid, BevPoint at) const {
    if (!(at.x >= -kGridSlack && at.x <= grid_w_ + kGridSlack && at.y >= -kGridSlack &&
          at.y <= grid_h_ + kGridSlack)) {
        throw Error(Errc::OutOfGrid, "point (" + std::to_string(at.x) + ", " + std::to_string(at.y) +
                                         ") lies outside the calibration grid");
    }
    auto cell_of = [](const std::vector<double>& nodes, double v) {
        const auto it = std::upper_bound(nodes.begin(), nodes.end(), v);
        std::size_t i = it == nodes.begin() ? 0 : static_cast<std::size_t>(it - nodes.begin()) - 1;
        i = std::min(i, nodes.size() - 2);
        const double t = std::clamp((v - nodes[i]) / (nodes[i + 1] - nodes[i]), 0.0, 1.0);
        return std::make_pair(static_cast<Eigen::Index>(i), t);
    };
    if (xs_.size() < 2 || ys_.size() < 2) return grid(0, 0);
    const auto [c, tx] = cell_of(xs_, at.x);
    const auto [r, ty] = cell_of(ys_, at.y);
    return (1 - ty) * ((1 - tx) * grid(r, c) + tx * grid(r, c + 1)) +
           ty * ((1 - tx) * grid(r + 1, c) + tx * grid(r + 1, c + 1));
}

double CalibrationModel::k_w(BevPoint at) const { return lookup(k_w_grid_, at); }
double CalibrationModel::k_h(BevPoint at) const { return lookup(k_h_grid_, at); }

CalibrationModel fit_calibration(std::span<const CalSample> samples, double grid_width, double grid_height,
                                 const CalibrationSettings& settings) {
    if (settings.degree < 1 || settings.degree > 2) throw Error(Errc::ConfigError, "degree must be 1 or 2");
    std::vector<double> xs, ws, ys, hs;
    for (const auto& s : samples) {
        if (s.cls != settings.fit_class || !(s.w > 0.0) || !(s.h > 0.0)) continue;
        xs.push_back(s.center.x);
        ws.push_back(s.w);
        ys.push_back(s.center.y);
        hs.push_back(s.h);
    }
    const int n = static_cast<int>(xs.size());
    if (n < settings.min_samples || n < settings.degree + 1) {
        throw Error(Errc::InsufficientSamples, std::to_string(n) + " '" + settings.fit_class + "' samples, need " +
                                                   std::to_string(settings.min_samples));
    }
    const auto [x_lo, x_hi] = std::minmax_element(xs.begin(), xs.end());
    const auto [y_lo, y_hi] = std::minmax_element(ys.begin(), ys.end());
    if (*x_hi - *x_lo < settings.min_span_fraction * grid_width ||
        *y_hi - *y_lo < settings.min_span_fraction * grid_height) {
        throw Error(Errc::InsufficientSamples, "samples do not span enough of the grid");
    }
    std::vector<double> wc = fit_polynomial(xs, ws, settings.degree);
    std::vector<double> hc = fit_polynomial(ys, hs, settings.degree);
    CalibrationModel m(wc, hc, grid_width, grid_height, settings.cell_px, settings.ref_length_ft,
                       settings.ref_height_ft);
    m.samples = n;
    m.width_rms = rms_residual(wc, xs, ws);
    m.height_rms = rms_residual(hc, ys, hs);
    return m;
}

std::pair<double, double> calibrated_displacement(const CalibrationModel& m, BevPoint at, double dxp, double dyp) {
    return {m.ref_length_ft() * m.k_w(at) * dxp, m.ref_height_ft() * m.k_h(at) * dyp};
}

nlohmann::json calibration_to_json(const CalibrationModel& m) {
    return {
        {"schema_version", 1},
        {"kind", "bevtrack.calibration"},
        {"width_coeffs", m.width_coeffs()},
        {"height_coeffs", m.height_coeffs()},
        {"grid", {{"width", m.grid_width()}, {"height", m.grid_height()}, {"cell_px", m.cell_px()}}},
        {"ref_length_ft", m.ref_length_ft()},
        {"ref_height_ft", m.ref_height_ft()},
        {"fit", {{"samples", m.samples}, {"width_rms", m.width_rms}, {"height_rms", m.height_rms},
                 {"fallback", m.fallback}}},
    };
}

CalibrationModel calibration_from_json(const nlohmann::json& j) {
    try {
        if (j.at("schema_version").get<int>() != 1) {
            throw Error(Errc::ConfigError, "unsupported calibration schema_version");
        }
        const auto& g = j.at("grid");
        CalibrationModel m(j.at("width_coeffs").get<std::vector<double>>(),
                           j.at("height_coeffs").get<std::vector<double>>(), g.at("width").get<double>(),
                           g.at("height").get<double>(), g.value("cell_px", 8.0),
                           j.value("ref_length_ft", kSedanLengthFt), j.value("ref_height_ft", kSedanHeightFt));
        if (j.contains("fit")) {
            const auto& f = j.at("fit");
            m.samples = f.value("samples", 0);
            m.width_rms = f.value("width_rms", 0.0);
            m.height_rms = f.value("height_rms", 0.0);
            m.fallback = f.value("fallback", false);
        }
        return m;
    } catch (const nlohmann::json::exception& e) {
        throw Error(Errc::ConfigError, std::string("calibration document: ") + e.what());
    }
}

}  // namespace bevtrack
