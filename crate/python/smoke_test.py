"""Smoke test for the dim_gesture_py extension.

Build it first:  pip install --no-build-isolation -e crates/py
"""

import math
import os
import random
import tempfile

import dim_gesture_py as dg


def check_rotation():
    v = [0.3, -1.1, 2.0]
    back = dg.matrix_to_expmap(dg.expmap_to_matrix(v))
    assert max(abs(a - b) for a, b in zip(v, back)) < 1e-9, back


def check_schedule():
    s = dg.NoiseSchedule(1000, 1e-4, 8e-2)
    assert len(s) == 1000
    assert abs(s.beta(1) - 1e-4) < 1e-15
    assert abs(s.beta(1000) - 8e-2) < 1e-15
    g = s.q_sample([[1.0, 2.0]], 1, [[0.0, 0.0]])
    assert abs(g[0][0] - math.sqrt(1 - 1e-4)) < 1e-12
    try:
        s.beta(0)
    except ValueError:
        pass
    else:
        raise AssertionError("step 0 accepted")


def check_metrics():
    d = dg.frechet_distance([0.0], [[1.0]], [3.0], [[4.0]])
    assert abs(d - 10.0) < 1e-8, d
    assert dg.beat_align([0.5, 1.5], [0.5, 1.5]) == 1.0
    rng = random.Random(0)
    clips = [[[rng.gauss(0, 1) for _ in range(3)] for _ in range(60)] for _ in range(4)]
    assert abs(dg.fgd_raw(clips, clips, 10)) < 1e-6


def check_features():
    rows = [[float(i * 4 + j) for j in range(4)] for i in range(7)]
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "x.dimf")
        dg.write_features(path, rows, 50.0)
        back, rate = dg.read_features(path, 4)
        assert back == rows and rate == 50.0
        try:
            dg.read_features(path, 5)
        except ValueError:
            pass
        else:
            raise AssertionError("wrong dims accepted")
    mel = dg.mel_features([0.0] * dg.SAMPLE_RATE)
    assert len(mel[0]) == 80


def check_config():
    cfg = dg.Config.preset("tiny")
    again = dg.Config.from_json(cfg.to_json())
    assert again.hash() == cfg.hash()
    assert cfg.gesture_fps == 20.0


if __name__ == "__main__":
    check_rotation()
    check_schedule()
    check_metrics()
    check_features()
    check_config()
    print("smoke test ok")
