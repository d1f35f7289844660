import math

import numpy as np
import pytest

import aftune


def test_honest_run_verifies(tmp_path):
    m = aftune.example_manifest(depth=2, steps=8, layer_block=2, step_block=4)
    rec = aftune.record_train(m, tmp_path / "run")
    assert rec["blocks"] == 3 * 2
    reports = aftune.verify_all(tmp_path / "run")
    assert [r["verdict"] for r in reports] == ["pass"] * 6
    assert aftune.ledger_digest(tmp_path / "run") == rec["ledger_digest"]


def test_attack_is_caught(tmp_path):
    m = aftune.example_manifest(depth=3, steps=16)
    aftune.record_train(m, tmp_path / "honest")
    out = aftune.apply_attack(tmp_path / "honest", "under-train", tmp_path / "bad")
    assert out["compromised"]
    i, j = map(int, out["compromised"][0].split(","))
    assert aftune.verify(tmp_path / "bad", (i, j))["verdict"] == "fail"


def test_inference_run(tmp_path):
    m = aftune.example_manifest(depth=2, steps=4, step_block=1)
    m["grid"]["checkpoint_interval"] = "inf"
    aftune.record_infer(m, tmp_path / "inf")
    assert all(r["verdict"] == "pass" for r in aftune.verify_all(tmp_path / "inf"))


def test_detection_probability():
    p = 1 - aftune.p_evade_exact(1000, 100, 10)
    assert abs(p - 0.653) < 1e-3
    b, e = aftune.p_detect_approx(0.1, 10)
    assert b == pytest.approx(1 - 0.9 ** 10)
    assert e == pytest.approx(1 - math.exp(-1))


def test_sampling_is_seeded():
    a = aftune.sample(3, 3, "uniform", 3, seed=7)
    assert a == aftune.sample(3, 3, "uniform", 3, seed=7)
    assert len(set(a)) == 3
    assert all(i == 0 for i, _ in aftune.sample(4, 5, "input-row", 5, seed=1))


def test_hash_schedule_independence():
    x = np.random.default_rng(0).standard_normal(10_001).astype(np.float32)
    one = aftune.chunked_hash(x, 1000, "blake3", 1)
    assert aftune.chunked_hash(x, 1000, "blake3", 4) == one
    x[5] = np.nextafter(x[5], np.float32(np.inf))
    assert aftune.chunked_hash(x, 1000, "blake3", 1) != one


def test_bad_inputs_raise():
    with pytest.raises(ValueError):
        aftune.p_evade_exact(5, 6, 1)
    with pytest.raises(ValueError):
        aftune.sample(2, 2, "nope", 1)
