"""Auditable fine-tuning and inference.

Thin wrappers over the C++ core: records runs, verifies block cells, plans
audits and runs the attack harness. Reports come back as plain dicts.
"""

import json

from . import _aftune
from ._aftune import (AftuneError, ConfigError, chunked_hash, chunked_hash64,
                      commit_seed, p_detect_approx,
                      p_evade_exact, sample)

__all__ = [
    "AftuneError", "ConfigError", "apply_attack", "chunked_hash",
    "chunked_hash64", "commit_seed", "example_manifest", "export_ledger",
    "ledger_digest", "p_detect_approx", "p_evade_exact", "record_infer",
    "record_train", "sample", "toy_attack", "verify", "verify_all",
]


def example_manifest(depth=3, steps=16, layer_block=2, step_block=4):
    return json.loads(_aftune.example_manifest(depth, steps, layer_block, step_block))


def _text(manifest):
    return manifest if isinstance(manifest, str) else json.dumps(manifest)


def record_train(manifest, run_dir):
    return json.loads(_aftune.record_train(_text(manifest), str(run_dir)))


def record_infer(manifest, run_dir):
    return json.loads(_aftune.record_infer(_text(manifest), str(run_dir)))


def verify(run_dir, block, full_scan=False, verifier=""):
    """Verify one block ("i,j" or (i, j)). `verifier` names an aftune binary to
    run the check in an isolated process."""
    if not isinstance(block, str):
        block = "%d,%d" % tuple(block)
    return json.loads(_aftune.verify(str(run_dir), block, full_scan, str(verifier)))


def verify_all(run_dir):
    return json.loads(_aftune.verify_all(str(run_dir)))


def ledger_digest(run_dir):
    return _aftune.ledger_digest(str(run_dir))


def export_ledger(run_dir):
    return json.loads(_aftune.export_ledger(str(run_dir)))


def apply_attack(from_dir, scenario, out_dir):
    """Re-record `from_dir` with a scenario ({"kind": ..., overrides}) into `out_dir`."""
    if isinstance(scenario, str):
        scenario = {"kind": scenario}
    return json.loads(_aftune.apply_attack(str(from_dir), json.dumps(scenario), str(out_dir)))


def toy_attack(layer_blocks=(1, 2, 4), train_steps=600):
    return json.loads(_aftune.toy_attack(list(layer_blocks), train_steps))
