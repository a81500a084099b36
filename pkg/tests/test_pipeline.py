import json
import shutil

import numpy as np
import pytest

from rsnlab.pipeline import (
    STEP_ORDER,
    ConfigError,
    HashMismatch,
    MissingInput,
    Pipeline,
    load_config,
    make_config,
    sha256_file,
    stable_output_hashes,
    verify_run,
)
from conftest import SMALL_TOML, small_config


def test_every_step_has_manifest_and_outputs(small_run):
    pipe, manifests = small_run
    assert [m.step for m in manifests] == list(STEP_ORDER)
    for m in manifests:
        assert not m.cached
        assert m.outputs, m.step
        for rel, digest in m.outputs.items():
            assert sha256_file(pipe.abspath(rel)) == digest
        on_disk = json.loads(pipe.manifest_path(m.step).read_text())
        assert on_disk["config_hash"] == m.config_hash
        assert on_disk["seeds"] == {"global": 0}
        assert on_disk["config"]["params"] == pipe.cfg.params(m.step)
    log_lines = (pipe.run_dir / "manifests.jsonl").read_text().splitlines()
    assert len(log_lines) >= len(STEP_ORDER)


def test_step_inputs_chain_to_upstream_outputs(small_run):
    pipe, _ = small_run
    for step, upstream in [("groupica", "preprocess"), ("dualreg", "groupica"), ("train", "represent"), ("evaluate", "train")]:
        down = pipe.load_manifest(step)
        up = pipe.load_manifest(upstream)
        shared = set(down.inputs) & set(up.outputs)
        assert shared, (step, upstream)
        assert all(down.inputs[k] == up.outputs[k] for k in shared)


def test_expected_artifacts(small_run):
    pipe, _ = small_run
    names = {p.name for p in pipe.outputs_of("represent")}
    assert {"labels.tsv", "labelset.json", "features.npy", "splits.json"} <= names
    feats = np.load(pipe.output_of("represent", "features.npy"))
    assert feats.shape == (4 * 4, 20 * 24 * 20)
    truth = json.loads(pipe.output_of("verify", "truth_match.json").read_text())
    assert truth["passed"]
    assert pipe.output_of("train", "model.bin").read_bytes()[:6] == b"RSNMLP"


def test_rerun_is_cached(small_run):
    pipe, _ = small_run
    again = Pipeline(pipe.cfg).run_all()
    assert all(m.cached for m in again)
    assert verify_run(pipe.run_dir) == []


def test_param_change_reruns_downstream_only(small_run, tmp_path):
    pipe, _ = small_run
    run_dir = tmp_path / "copy"
    shutil.copytree(pipe.run_dir, run_dir)
    cfg = small_config(tmp_path, run_id="copy", train={"epochs": 3})
    ms = {m.step: m for m in Pipeline(cfg).run_all()}
    assert all(ms[s].cached for s in ("synth", "preprocess", "groupica", "dualreg", "represent", "verify"))
    assert not ms["train"].cached and not ms["evaluate"].cached
    assert ms["train"].config["params"]["epochs"] == 3


def test_bit_flip_detected(small_run, tmp_path):
    pipe, _ = small_run
    run_dir = tmp_path / "flip"
    shutil.copytree(pipe.run_dir, run_dir)
    target = run_dir / "groupica" / "mixing.txt"
    raw = bytearray(target.read_bytes())
    raw[10] ^= 0x01
    target.write_bytes(bytes(raw))
    problems = verify_run(run_dir)
    assert [p["file"] for p in problems] == ["groupica/mixing.txt"]
    with pytest.raises(HashMismatch):
        Pipeline(small_config(tmp_path, run_id="flip")).run_step("groupica")


def test_missing_output_reported(small_run, tmp_path):
    pipe, _ = small_run
    run_dir = tmp_path / "gone"
    shutil.copytree(pipe.run_dir, run_dir)
    (run_dir / "train" / "model.bin").unlink()
    problems = verify_run(run_dir)
    assert problems == [{"step": "train", "file": "train/model.bin", "expected": pipe.load_manifest("train").outputs["train/model.bin"], "actual": None}]


def test_volatile_files_flagged(small_run):
    pipe, _ = small_run
    assert pipe.load_manifest("train").volatile == ["train/history.json"]
    stable = stable_output_hashes(pipe.run_dir)
    assert "train/history.json" not in stable["train"]
    assert "train/model.bin" in stable["train"]


def test_step_without_upstream_fails(tmp_path):
    with pytest.raises(MissingInput):
        Pipeline(small_config(tmp_path)).run_step("groupica")


def test_config_errors(tmp_path):
    with pytest.raises(ConfigError):
        make_config({"synth": {"n_subject": 3}})
    with pytest.raises(ConfigError):
        make_config({"steps": ["synth", "bogus"]})
    with pytest.raises(ConfigError):
        make_config({"synth": 4})


def test_config_hash_tracks_parameters():
    a = make_config()
    b = make_config({"groupica": {"model_order": 9}})
    assert a.config_hash("groupica") != b.config_hash("groupica")
    assert a.config_hash("synth") == b.config_hash("synth")
    assert a.config_hash("synth") != make_config({"seed": 1}).config_hash("synth")


def test_load_config_resolves_relative_paths(tmp_path):
    cfg_path = tmp_path / "conf" / "run.toml"
    cfg_path.parent.mkdir()
    cfg_path.write_text(SMALL_TOML + '[represent]\nlabels = "labels.tsv"\n')
    cfg = load_config(cfg_path, seed=5)
    assert cfg.seed == 5
    assert cfg.run_dir == tmp_path / "conf" / "runs" / "small"
    assert cfg.values["represent"]["labels"] == str(tmp_path / "conf" / "labels.tsv")
    assert load_config(cfg_path, out=str(tmp_path / "x" / "y")).run_dir == tmp_path / "x" / "y"
