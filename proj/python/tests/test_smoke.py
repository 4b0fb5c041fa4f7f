import math

import pytest

import bevtrack


def test_homography_round_trip():
    pairs = [((0, 0), (0, 0)), ((100, 0), (200, 0)), ((100, 80), (200, 160)), ((0, 80), (0, 160))]
    h = bevtrack.Homography.estimate(pairs)
    x, y = h.apply((50, 40))
    assert x == pytest.approx(100) and y == pytest.approx(80)
    bx, by = h.inverse().apply((x, y))
    assert bx == pytest.approx(50) and by == pytest.approx(40)
    assert max(abs(v) for row in h.matrix for v in row) == pytest.approx(1.0)


def test_degenerate_correspondences_raise():
    pairs = [((0, 0), (0, 0)), ((1, 1), (1, 0)), ((2, 2), (1, 1)), ((3, 3), (0, 1))]
    with pytest.raises(bevtrack.BevtrackError) as info:
        bevtrack.Homography.estimate(pairs)
    assert info.value.args[0] == "DegenerateConfiguration"


def test_formulas():
    assert round(bevtrack.error_rate(542, 548), 2) == 1.09
    assert bevtrack.space_mean_speed([60, 30]) == 40.0
    ramp = [(i / 10, 60 + 2 * i / 10) for i in range(51)]
    (t, a), = bevtrack.acceleration_series(ramp, 5.0)
    assert t == pytest.approx(2.5) and a == pytest.approx(0.89408, abs=1e-9)
    with pytest.raises(bevtrack.BevtrackError):
        bevtrack.space_mean_speed([10, 0])


def test_parse_errors_carry_line_numbers():
    text = '{"frame": 0, "cls": "car", "bbox": [1, 2, 3, 4], "score": 0.5}\n{"frame": 0, "cls": "car", "bbox": [1, 2, 3, 4], "score": 1.2}\n'
    with pytest.raises(bevtrack.BevtrackError) as info:
        bevtrack.parse_detections(text)
    assert info.value.args[0] == "ParseError"
    assert info.value.args[2] == 2


def test_synthetic_scene_end_to_end():
    spec = bevtrack.default_synth_spec()
    spec["seed"] = 3
    dets, truth = bevtrack.synthesize(spec)
    assert len(truth["vehicles"]) == 100
    out = bevtrack.run_pipeline(dets)
    summary = out["summary"]
    assert summary["vehicles"] == 100
    for d in summary["directions"]:
        assert d["vehicles"] == 50
        assert d["space_mean_speed_mph"] == pytest.approx(60.0, rel=0.02)
    metrics = bevtrack.evaluate_tracks(out["tracks"], truth)
    assert metrics["id_switches"] == 0
    assert all(c["er_pct"] == 0 for c in metrics["counts"])
    assert not summary["diagnostics"]["calibration_fallback"]
    assert math.isclose(out["calibration"]["width_coeffs"][0], 18.0, rel_tol=1e-9)
