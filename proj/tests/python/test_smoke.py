import json
import math
from pathlib import Path

import numpy as np
import pytest

import cmtraj

ROOT = Path(__file__).resolve().parents[2]
TINY = str(ROOT / "configs" / "tiny.json")


def test_schedule_values():
    s = cmtraj.sigmas(10)
    assert s[0] == 0.0 and s[1] == 0.002 and s[-1] == 1.0
    p = cmtraj.timestep_pmf(10)
    assert p[0] == 0.0
    assert math.isclose(sum(p), 1.0, abs_tol=1e-12)
    lo, hi = cmtraj.ratio_range(4, 2)
    assert abs(lo - 0.69) <= 0.01 and abs(hi - 0.80) <= 0.01
    for t in range(1, 41):
        assert 0 <= cmtraj.teacher_index(t, 50, N=40) < t


def test_scalings_at_boundary():
    assert cmtraj.c_skip(0.002) == 1.0
    assert cmtraj.c_out(0.002) == 0.0


def test_config_hash_tracks_content():
    cfg = cmtraj.default_config()
    h = cmtraj.config_hash(cfg)
    assert h == cmtraj.config_hash(json.loads(json.dumps(cfg)))
    cfg["seed"] = 5
    assert cmtraj.config_hash(cfg) != h


def test_bad_config_raises():
    cfg = cmtraj.default_config()
    cfg["train"]["epochs"] = 0
    with pytest.raises(ValueError):
        cmtraj.config_hash(cfg)
    with pytest.raises(ValueError):
        cmtraj.config_hash({"not_a_key": 1})


def test_scenes_are_deterministic():
    a = cmtraj.generate_scenes(3, "test", 4)
    b = cmtraj.generate_scenes(3, "test", 4)
    assert a == b and len(a) == 4
    assert cmtraj.generate_scenes(3, "train", 1)[0]["scene_id"] != a[0]["scene_id"]


def test_codec_round_trip_on_rank10_family():
    rng = np.random.default_rng(0)
    data = rng.normal(size=(300, 10)) @ rng.normal(size=(10, 60))
    codec = cmtraj.fit_codec(data, latent_dim=10, epochs=5)
    back = cmtraj.decode(codec, cmtraj.encode(codec, data))
    assert np.max(np.abs(back - data)) < 1e-6


def test_tiny_pipeline_is_deterministic(tmp_path):
    a = cmtraj.run_pipeline(TINY, str(tmp_path / "a"))
    b = cmtraj.run_pipeline(TINY, str(tmp_path / "b"))
    assert (tmp_path / "a" / "metrics.json").read_bytes() == (tmp_path / "b" / "metrics.json").read_bytes()
    assert a["config_hash"] == b["config_hash"] == cmtraj.config_hash(TINY)
    assert a["k"] == 6 and a["scene_count"] == 20
    svgs = list((tmp_path / "a").glob("scene_*.svg"))
    assert len(svgs) == 2
    rep = cmtraj.evaluate(str(tmp_path / "a" / "predictions.jsonl"), str(tmp_path / "a" / "test_scenes.jsonl"), TINY)
    assert rep["ade_k"] == a["ade_k"]


def test_unknown_axis_is_usage_error(tmp_path):
    with pytest.raises(cmtraj.UsageError):
        cmtraj.run_ablation(TINY, "nope", str(tmp_path))
