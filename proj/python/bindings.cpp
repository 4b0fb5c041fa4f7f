#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "bevtrack/analytics.hpp"
#include "bevtrack/error.hpp"
#include "bevtrack/geometry.hpp"
#include "bevtrack/pipeline.hpp"

namespace py = pybind11;
using nlohmann::json;

namespace {

using Pair = std::pair<double, double>;
using Matrix = std::vector<std::vector<double>>;

Matrix to_rows(const Eigen::Matrix3d& m) {
    Matrix out(3, std::vector<double>(3));
    for (int r = 0; r < 3; ++r) {
        for (int c = 0; c < 3; ++c) out[r][c] = m(r, c);
    }
    return out;
}

Eigen::Matrix3d from_rows(const Matrix& rows) {
    if (rows.size() != 3) throw bevtrack::Error(bevtrack::Errc::ConfigError, "matrix must be 3x3");
    Eigen::Matrix3d m;
    for (int r = 0; r < 3; ++r) {
        if (rows[r].size() != 3) throw bevtrack::Error(bevtrack::Errc::ConfigError, "matrix must be 3x3");
        for (int c = 0; c < 3; ++c) m(r, c) = rows[r][c];
    }
    return m;
}

std::vector<bevtrack::Detection> detections_from(const std::string& text) {
    std::istringstream in(text);
    return bevtrack::parse_detections(in);
}

std::string detections_to(const std::vector<bevtrack::Detection>& dets) {
    std::ostringstream out;
    bevtrack::write_detections(out, dets);
    return out.str();
}

}  // namespace

PYBIND11_MODULE(_bevtrack, m) {
    m.doc() = "Native core of the bevtrack package";

    static py::exception<bevtrack::Error> error(m, "BevtrackError");
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const bevtrack::ParseError& e) {
            py::object args = py::make_tuple(std::string(bevtrack::to_string(e.code())), e.what(), e.line());
            PyErr_SetObject(error.ptr(), args.ptr());
        } catch (const bevtrack::Error& e) {
            py::object args = py::make_tuple(std::string(bevtrack::to_string(e.code())), e.what());
            PyErr_SetObject(error.ptr(), args.ptr());
        }
    });

    py::class_<bevtrack::Homography>(m, "Homography")
        .def(py::init<>())
        .def_static("from_matrix", [](const Matrix& rows) { return bevtrack::Homography::from_matrix(from_rows(rows)); })
        .def_static("estimate",
                    [](const std::vector<std::pair<Pair, Pair>>& pairs) {
                        std::vector<bevtrack::Correspondence> c;
                        for (const auto& [s, d] : pairs) c.push_back({{s.first, s.second}, {d.first, d.second}});
                        return bevtrack::Homography::estimate(c);
                    },
                    py::arg("pairs"))
        .def("apply",
             [](const bevtrack::Homography& h, Pair p) {
                 const auto q = h.apply({p.first, p.second});
                 return Pair{q.x, q.y};
             })
        .def("inverse", &bevtrack::Homography::inverse)
        .def_property_readonly("matrix", [](const bevtrack::Homography& h) { return to_rows(h.matrix()); });

    m.def("error_rate", [](double est, double real) { return bevtrack::error_rate(est, real); });
    m.def("space_mean_speed", [](const std::vector<double>& v) { return bevtrack::space_mean_speed(v); });
    m.def("acceleration_series",
          [](const std::vector<Pair>& speed_mph, double window_s) {
              return bevtrack::acceleration_series(speed_mph, window_s);
          },
          py::arg("speed_mph"), py::arg("window_s") = 5.0);

    m.def("example_scene", [] { return bevtrack::scene_to_json(bevtrack::example_scene()).dump(); });
    m.def("default_synth_spec", [] { return bevtrack::synth_spec_to_json(bevtrack::SynthSpec{}).dump(); });

    m.def("parse_detections", [](const std::string& text) { return detections_to(detections_from(text)); });

    m.def("synthesize", [](const std::string& spec_json, const std::string& scene_json) {
        const auto cfg = bevtrack::scene_from_json(json::parse(scene_json));
        const auto spec = bevtrack::synth_spec_from_json(json::parse(spec_json));
        const auto scene = bevtrack::gen_synthetic_scene(spec, cfg);
        return std::make_pair(detections_to(scene.detections), bevtrack::truth_to_json(scene.truth).dump());
    });

    m.def("run_pipeline", [](const std::string& scene_json, const std::string& detections) {
        const auto cfg = bevtrack::scene_from_json(json::parse(scene_json));
        const auto dets = detections_from(detections);
        const auto res = [&] {
            py::gil_scoped_release release;
            return bevtrack::run_pipeline(cfg, dets);
        }();
        json tracks = json::array();
        for (const auto& t : res.tracks) tracks.push_back(bevtrack::track_to_json(t));
        json out;
        out["summary"] = bevtrack::summary_to_json(res.analytics, &res.diagnostics, nullptr);
        out["tracks"] = std::move(tracks);
        out["calibration"] = bevtrack::calibration_to_json(res.calibration);
        return out.dump();
    });

    m.def("evaluate_tracks", [](const std::string& tracks_json, const std::string& truth_json) {
        std::vector<bevtrack::Track> tracks;
        for (const auto& t : json::parse(tracks_json)) tracks.push_back(bevtrack::track_from_json(t));
        const auto truth = bevtrack::truth_from_json(json::parse(truth_json));
        return bevtrack::metrics_to_json(bevtrack::evaluate_tracks(tracks, truth)).dump();
    });
}
