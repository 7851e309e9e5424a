import json

import numpy as np
import pytest

from crowdhl import data, nn
from crowdhl.rng import SplitMix64


def constant_checkpoint(path, input_dims, positive=True):
    """Checkpoint whose softmax output is (0, 1) (or (1, 0)) for every input.

    A coarse max-pool shrinks the input before a zero-weight dense head whose
    bias alone decides the class.
    """
    c, h, w, t = input_dims
    config = {
        "format_version": 1,
        "input": list(input_dims),
        "layers": [
            {"type": "maxpool3d", "pool": [h, w, t]},
            {"type": "flatten"},
            {"type": "dense", "units": 2, "activation": "linear"},
        ],
    }
    params = nn.ModelParams.from_config(config, seed=0)
    w_arr, b_arr = params.parameters()
    w_arr[:] = 0
    b_arr[:] = (0.0, 100.0) if positive else (100.0, 0.0)
    nn.write_checkpoint(path, params)
    return params


def make_video(path, n_frames, size=(270, 420), fps=6.0, channels=1, seed=0):
    """Random frames written as PNM files; returns the in-memory FrameSequence (quantized)."""
    h, w = size
    raw = (SplitMix64(seed).next_u64(n_frames * channels * h * w) >> np.uint64(56)).astype(np.uint8)
    seq = data.FrameSequence(data.dequantize(raw.reshape(n_frames, channels, h, w)), fps)
    data.write_frames(path, seq)
    return seq


def write_manifest(path, fps, roi, events=()):
    x, y, w, h = roi
    obj = {"fps": fps, "roi": {"x": x, "y": y, "w": w, "h": h},
           "events": [{"time_s": t, "type": k} for t, k in events]}
    path.write_text(json.dumps(obj))
    return path


@pytest.fixture
def rng():
    return SplitMix64(1234)


# 420x270 grayscale frames at 6 fps for 40 s; downsampled to 3 fps this gives
# 120 frames, i.e. four 30-frame hops at t0 = 0, 10, 20, 30 s.
VIDEO_ROI = (10, 10, 400, 250)
VIDEO_FPS = 6.0
VIDEO_FRAMES = 240


@pytest.fixture(scope="session")
def video(tmp_path_factory):
    root = tmp_path_factory.mktemp("video")
    seq = make_video(root / "frames", VIDEO_FRAMES, size=(270, 420), fps=VIDEO_FPS, seed=11)
    goal = write_manifest(root / "goal.json", VIDEO_FPS, VIDEO_ROI, [(0.0, "goal")])
    quiet = write_manifest(root / "quiet.json", VIDEO_FPS, VIDEO_ROI, [])
    return {"frames": root / "frames", "seq": seq, "goal_manifest": goal, "quiet_manifest": quiet, "root": root}


SCORING_ARCH = {
    "format_version": 1,
    "input": [1, 100, 100, 30],
    "layers": [
        {"type": "maxpool3d", "pool": [4, 4, 3]},
        {"type": "conv3d", "filters": 3, "kernel": [3, 3, 3], "activation": "relu"},
        {"type": "maxpool3d", "pool": [2, 2, 2]},
        {"type": "flatten"},
        {"type": "dense", "units": 8, "activation": "relu"},
        {"type": "dense", "units": 2, "activation": "linear"},
    ],
}


# Acceptance outcomes, one line per criterion, printed after the run.
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
