#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "bevtrack/error.hpp"
#include "bevtrack/pipeline.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw bevtrack::Error(bevtrack::Errc::IoError, "cannot open " + p.string());
    try {
        return json::parse(in);
    } catch (const json::exception& e) {
        throw bevtrack::Error(bevtrack::Errc::ConfigError, p.string() + ": " + e.what());
    }
}

void write_json(const fs::path& p, const json& j) {
    std::ofstream out(p, std::ios::binary);
    if (!out) throw bevtrack::Error(bevtrack::Errc::IoError, "cannot write " + p.string());
    out << j.dump(2) << '\n';
}

void ensure_dir(const fs::path& d) {
    std::error_code ec;
    fs::create_directories(d, ec);
    if (ec) throw bevtrack::Error(bevtrack::Errc::IoError, "cannot create " + d.string() + ": " + ec.message());
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Traffic counts, speeds and accelerations from detections in a bird's-eye view"};
    app.require_subcommand(1);

    std::optional<std::uint64_t> seed;
    std::string frames_dir;
    app.add_option("--seed", seed, "Random seed (overrides the synthetic spec)");
    app.add_option("--frames-dir", frames_dir, "Directory of frame_%06d.pgm files");

    // synth
    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene with ground truth");
    std::string synth_spec;
    std::string synth_out;
    synth->add_option("--spec", synth_spec, "Synthetic scene spec (JSON)")->required()->check(CLI::ExistingFile);
    synth->add_option("--out", synth_out, "Output directory")->required();

    // calibrate
    auto* calibrate = app.add_subcommand("calibrate", "Fit the perspective calibration from detections");
    std::string cal_dets;
    std::string cal_scene;
    std::string cal_out;
    calibrate->add_option("--detections", cal_dets, "Detection records (JSON lines)")->required()->check(CLI::ExistingFile);
    calibrate->add_option("--scene", cal_scene, "Scene configuration")->required()->check(CLI::ExistingFile);
    calibrate->add_option("--out", cal_out, "Calibration model file")->required();

    // track
    auto* track = app.add_subcommand("track", "Project, track and stitch detections");
    std::string trk_dets;
    std::string trk_scene;
    std::string trk_kind;
    std::string trk_out;
    track->add_option("--detections", trk_dets, "Detection records (JSON lines)")->required()->check(CLI::ExistingFile);
    track->add_option("--scene", trk_scene, "Scene configuration")->required()->check(CLI::ExistingFile);
    track->add_option("--tracker", trk_kind, "Tracker")->check(CLI::IsMember({"motpy", "byte"}));
    track->add_option("--out", trk_out, "Output directory")->required();

    // analyze
    auto* analyze = app.add_subcommand("analyze", "Counts, lanes, speeds and accelerations from tracks");
    std::string an_tracks;
    std::string an_cal;
    std::string an_out;
    std::string an_real;
    analyze->add_option("--tracks", an_tracks, "Directory written by 'track'")->required()->check(CLI::ExistingDirectory);
    analyze->add_option("--calibration", an_cal, "Calibration model file")->required()->check(CLI::ExistingFile);
    analyze->add_option("--out", an_out, "Output directory")->required();
    analyze->add_option("--real-counts", an_real, "Reference counts for error rates")->check(CLI::ExistingFile);

    // metrics
    auto* metrics = app.add_subcommand("metrics", "Compare tracks with synthetic ground truth");
    std::string m_pred;
    std::string m_truth;
    metrics->add_option("--pred", m_pred, "tracks.jsonl")->required()->check(CLI::ExistingFile);
    metrics->add_option("--truth", m_truth, "truth.json")->required()->check(CLI::ExistingFile);

    CLI11_PARSE(app, argc, argv);

    try {
        if (synth->parsed()) {
            const json spec_doc = read_json(synth_spec);
            bevtrack::SceneConfig cfg = spec_doc.contains("scene") ? bevtrack::scene_from_json(spec_doc.at("scene"))
                                                                   : bevtrack::example_scene();
            json body = spec_doc;
            body.erase("scene");
            bevtrack::SynthSpec spec = bevtrack::synth_spec_from_json(body);
            if (seed) spec.seed = *seed;
            const auto scene = bevtrack::gen_synthetic_scene(spec, cfg);
            const fs::path out = synth_out;
            ensure_dir(out);
            bevtrack::write_detections(out / "detections.jsonl", scene.detections);
            write_json(out / "truth.json", bevtrack::truth_to_json(scene.truth));
            if (!frames_dir.empty()) {
                bevtrack::render_frames(cfg, scene.detections, scene.truth, frames_dir, spec.seed);
                cfg.frames_dir = frames_dir;
            }
            write_json(out / "scene.json", bevtrack::scene_to_json(cfg));
            std::cout << "wrote " << scene.detections.size() << " detections for " << scene.truth.vehicles.size()
                      << " vehicles to " << out.string() << '\n';
        } else if (calibrate->parsed()) {
            bevtrack::SceneConfig cfg = bevtrack::load_scene(cal_scene);
            const auto dets = bevtrack::read_detections(cal_dets);
            const auto h = bevtrack::scene_homography(cfg);
            const auto bev = bevtrack::project_detections(cfg, h, dets);
            auto tracks = bevtrack::run_tracker(cfg, bev);
            if (cfg.stitching) tracks = bevtrack::join_tracks(std::move(tracks), cfg.fps, cfg.image_w, cfg.image_h, cfg.stitch);
            bevtrack::Diagnostics diag;
            const auto model = bevtrack::fit_scene_calibration(cfg, tracks, diag);
            write_json(cal_out, bevtrack::calibration_to_json(model));
            std::cout << "calibration: " << diag.calibration_note << " (" << diag.calibration_samples << " samples)\n";
        } else if (track->parsed()) {
            bevtrack::SceneConfig cfg = bevtrack::load_scene(trk_scene);
            if (!trk_kind.empty()) cfg.tracker = bevtrack::parse_tracker_kind(trk_kind);
            if (!frames_dir.empty()) cfg.frames_dir = frames_dir;
            const auto dets = bevtrack::read_detections(trk_dets);
            const auto res = bevtrack::run_pipeline(cfg, dets);
            const fs::path out = trk_out;
            ensure_dir(out);
            bevtrack::write_tracks(out / "tracks.jsonl", res.tracks);
            json scene = bevtrack::scene_to_json(cfg);
            write_json(out / "scene.json", scene);
            json diag = bevtrack::summary_to_json(res.analytics, &res.diagnostics, nullptr).at("diagnostics");
            diag["duration_s"] = bevtrack::stream_duration_s(cfg, dets);
            write_json(out / "diagnostics.json", diag);
            std::cout << "tracks: " << res.diagnostics.tracks_before_stitching << " before stitching, "
                      << res.diagnostics.tracks_after_stitching << " after\n";
        } else if (analyze->parsed()) {
            const fs::path dir = an_tracks;
            const bevtrack::SceneConfig cfg = bevtrack::load_scene(dir / "scene.json");
            const auto tracks = bevtrack::read_tracks(dir / "tracks.jsonl");
            const auto model = bevtrack::calibration_from_json(read_json(an_cal));
            double duration = 0.0;
            if (fs::exists(dir / "diagnostics.json")) duration = read_json(dir / "diagnostics.json").value("duration_s", 0.0);
            const auto res = bevtrack::analyze_tracks(tracks, model, cfg.fps, duration, cfg.analytics);
            std::optional<bevtrack::RealCounts> real;
            if (!an_real.empty()) real = bevtrack::read_real_counts(an_real);
            bevtrack::write_outputs(res, model, an_out, nullptr, real ? &*real : nullptr);
            std::cout << "wrote " << res.records.size() << " vehicle records to " << an_out << '\n';
        } else if (metrics->parsed()) {
            const auto tracks = bevtrack::read_tracks(m_pred);
            const auto truth = bevtrack::truth_from_json(read_json(m_truth));
            std::cout << bevtrack::metrics_to_json(bevtrack::evaluate_tracks(tracks, truth)).dump(2) << '\n';
        }
    } catch (const bevtrack::Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 0;
}
