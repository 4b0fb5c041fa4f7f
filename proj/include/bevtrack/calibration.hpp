#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>
#include <nlohmann/json_fwd.hpp>

#include "bevtrack/geometry.hpp"

namespace bevtrack {

inline constexpr double kSedanLengthFt = 14.7;
inline constexpr double kSedanHeightFt = 6.0;

struct CalSample {
    BevPoint center;
    double w = 0.0;
    double h = 0.0;
    std::string cls;
};

struct CalibrationSettings {
    std::string fit_class = "car";
    int min_samples = 30;
    double min_span_fraction = 0.25;
    int degree = 1;     // 1 or 2
    double cell_px = 8.0;
    double ref_length_ft = kSedanLengthFt;
    double ref_height_ft = kSedanHeightFt;
};

// Two correction layers over the BEV plane: k_w(x) = 1 / w_hat(x) scales
// displacements along x, k_h(y) = 1 / h_hat(y) along y.
class CalibrationModel {
public:
    CalibrationModel(std::vector<double> width_coeffs, std::vector<double> height_coeffs, double grid_width,
                     double grid_height, double cell_px = 8.0, double ref_length_ft = kSedanLengthFt,
                     double ref_height_ft = kSedanHeightFt);

    // Constant scale; used when too few samples exist for a fit.
    static CalibrationModel uniform(double grid_width, double grid_height, double ft_per_px_x, double ft_per_px_y,
                                    double cell_px = 8.0);

    double predicted_width(double x) const;   // w_hat, BEV px
    double predicted_height(double y) const;  // h_hat, BEV px

    double k_w(BevPoint at) const;  // bilinear lookup in the width layer
    double k_h(BevPoint at) const;

    const std::vector<double>& width_coeffs() const { return width_coeffs_; }
    const std::vector<double>& height_coeffs() const { return height_coeffs_; }
    const Eigen::MatrixXd& k_w_grid() const { return k_w_grid_; }  // rows: y nodes, cols: x nodes
    const Eigen::MatrixXd& k_h_grid() const { return k_h_grid_; }
    double grid_width() const { return grid_w_; }
    double grid_height() const { return grid_h_; }
    double cell_px() const { return cell_; }
    double ref_length_ft() const { return ref_length_ft_; }
    double ref_height_ft() const { return ref_height_ft_; }

    // Fit diagnostics; zero for models not produced by fit_calibration.
    int samples = 0;
    double width_rms = 0.0;
    double height_rms = 0.0;
    bool fallback = false;

private:
    double lookup(const Eigen::MatrixXd& grid, BevPoint at) const;

    std::vector<double> width_coeffs_;
    std::vector<double> height_coeffs_;
    double grid_w_;
    double grid_h_;
    double cell_;
    double ref_length_ft_;
    double ref_height_ft_;
    std::vector<double> xs_;
    std::vector<double> ys_;
    Eigen::MatrixXd k_w_grid_;
    Eigen::MatrixXd k_h_grid_;
};

double eval_poly(std::span<const double> coeffs, double x);

// Ordinary least squares polynomial fit of y on x; coefficients low order first.
std::vector<double> fit_polynomial(std::span<const double> x, std::span<const double> y, int degree);

CalibrationModel fit_calibration(std::span<const CalSample> samples, double grid_width, double grid_height,
                                 const CalibrationSettings& settings = {});

// Real-world displacement in feet for a BEV pixel displacement at `at`.
std::pair<double, double> calibrated_displacement(const CalibrationModel& m, BevPoint at, double dxp, double dyp);

nlohmann::json calibration_to_json(const CalibrationModel& m);
CalibrationModel calibration_from_json(const nlohmann::json& j);

}  // namespace bevtrack
