"""Traffic counts, speeds and accelerations from vehicle detections in a bird's-eye view."""

import json

from . import _bevtrack
from ._bevtrack import BevtrackError, Homography, acceleration_series, error_rate, space_mean_speed

__all__ = [
    "BevtrackError",
    "Homography",
    "acceleration_series",
    "default_synth_spec",
    "error_rate",
    "evaluate_tracks",
    "example_scene",
    "parse_detections",
    "run_pipeline",
    "space_mean_speed",
    "synthesize",
]


def example_scene():
    """Default scene configuration as a dict."""
    return json.loads(_bevtrack.example_scene())


def default_synth_spec():
    return json.loads(_bevtrack.default_synth_spec())


def _lines(records):
    return "".join(json.dumps(r) + "\n" for r in records)


def parse_detections(text):
    """Validate JSON-lines detection records; returns a list of dicts."""
    return [json.loads(line) for line in _bevtrack.parse_detections(text).splitlines()]


def synthesize(spec=None, scene=None):
    """Synthetic detections and ground truth: (list of detection dicts, truth dict)."""
    spec = default_synth_spec() if spec is None else spec
    scene = example_scene() if scene is None else scene
    dets, truth = _bevtrack.synthesize(json.dumps(spec), json.dumps(scene))
    return [json.loads(line) for line in dets.splitlines()], json.loads(truth)


def run_pipeline(detections, scene=None):
    """Project, track, stitch, calibrate and analyze.

    Returns a dict with "summary", "tracks" and "calibration".
    """
    scene = example_scene() if scene is None else scene
    return json.loads(_bevtrack.run_pipeline(json.dumps(scene), _lines(detections)))


def evaluate_tracks(tracks, truth):
    return json.loads(_bevtrack.evaluate_tracks(json.dumps(tracks), json.dumps(truth)))
