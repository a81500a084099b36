"""Local, content-hashed pipeline runner.

A run lives in ``<output_dir>/<run_id>/`` with one directory per step. Each
step directory holds its outputs and a ``manifest.json`` recording the
materialised parameters, SHA-256 hashes of every input and output file, seeds
and timings. ``manifests.jsonl`` in the run directory is an append-only log of
every manifest produced (including cache hits).

A step is skipped when its manifest already records the same config hash and
input hashes and its outputs still hash-verify.
"""
from __future__ import annotations

import copy
import glob
import hashlib
import json
import logging
import os
import platform
import shutil
import time
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import tomli

from . import __version__
from .errors import RsnError

log = logging.getLogger(__name__)

STEP_ORDER = ["synth", "preprocess", "groupica", "dualreg", "represent", "train", "evaluate", "verify"]

DEFAULTS: dict = {
    "run_id": "default",
    "output_dir": "runs",
    "seed": 0,
    "threads": 1,
    "steps": list(STEP_ORDER),
    "synth": {
        "n_subjects": 12,
        "dims": [40, 48, 40],
        "n_timepoints": 60,
        "tr_s": 2.0,
        "n_networks": 6,
        "voxel_size_mm": [4.0, 4.0, 4.0],
        "blob_sigma_vox": 2.0,
        "amplitude_jitter": 0.1,
        "shift_jitter_vox": 0.5,
        "noise_sigma": 0.05,
        "baseline": 100.0,
        "head_fraction": 0.42,
        "smoothing_window": 5,
    },
    "preprocess": {
        "inputs": "",
        "motion_correct": True,
        "ref_index": 0,
        "fwhm_mm": 7.0,
        "highpass_cutoff_s": 100.0,
        "register": True,
        "reference": "",
        "dof": 12,
    },
    "groupica": {
        "model_order": 8,
        "mask_threshold": 0.5,
        "tol": 1e-4,
        "max_iter": 200,
        "contrast": "tanh",
    },
    "dualreg": {"variance_normalize": True},
    "represent": {
        "mode": "flat",
        "labels": "",
        "train": 0.7,
        "val": 0.1,
        "test": 0.2,
        "export_png": False,
    },
    "train": {
        "learning_rate": 1e-3,
        "batch_size": 32,
        "epochs": 25,
        "dropout_p": 0.66,
        "class_weight_mode": "inverse_frequency",
    },
    "evaluate": {"split": "test"},
    "verify": {"min_corr": 0.9},
}


class PipelineError(RsnError):
    pass


class ConfigError(PipelineError):
    pass


class MissingInput(PipelineError):
    pass


class StepFailed(PipelineError):
    pass


class HashMismatch(PipelineError):
    pass


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _merge(base: dict, extra: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for key, value in extra.items():
        if key not in base:
            raise ConfigError(f"unknown config key {where}{key}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}{key} must be a table")
            out[key] = _merge(base[key], value, f"{where}{key}.")
        else:
            out[key] = value
    return out


@dataclass
class PipelineConfig:
    values: dict
    source: Path | None = None

    @property
    def run_dir(self) -> Path:
        return Path(self.values["output_dir"]) / self.values["run_id"]

    @property
    def seed(self) -> int:
        return int(self.values["seed"])

    @property
    def steps(self) -> list[str]:
        return list(self.values["steps"])

    def params(self, step: str) -> dict:
        return self.values.get(step, {})

    def materialized(self, step: str) -> dict:
        """Everything that determines a step's outputs, defaults filled in."""
        return {"step": step, "seed": self.seed, "code_version": __version__, "params": self.params(step)}

    def config_hash(self, step: str) -> str:
        return hashlib.sha256(canonical_json(self.materialized(step)).encode()).hexdigest()


def make_config(overrides: dict | None = None, source=None) -> PipelineConfig:
    values = _merge(DEFAULTS, overrides or {})
    steps = values["steps"]
    if len(set(steps)) != len(steps):
        raise ConfigError("step names must be unique")
    for s in steps:
        if s not in STEP_ORDER:
            raise ConfigError(f"unknown step {s!r}")
    return PipelineConfig(values, Path(source) if source else None)


def load_config(path=None, seed: int | None = None, out: str | None = None, threads: int | None = None) -> PipelineConfig:
    raw = {}
    if path is not None:
        with open(path, "rb") as f:
            raw = tomli.load(f)
    if seed is not None:
        raw["seed"] = seed
    if out is not None:
        raw["output_dir"] = str(Path(out).parent)
        raw["run_id"] = Path(out).name
    if threads is not None:
        raw["threads"] = threads
    cfg = make_config(raw, path)
    # relative paths in a config file are relative to that file
    if path is not None:
        base = Path(path).resolve().parent
        for section, key in (("preprocess", "inputs"), ("preprocess", "reference"), ("represent", "labels")):
            v = cfg.values[section][key]
            if v and not os.path.isabs(v):
                cfg.values[section][key] = str(base / v)
        if out is None and not os.path.isabs(cfg.values["output_dir"]):
            cfg.values["output_dir"] = str(base / cfg.values["output_dir"])
    return cfg


@dataclass
class RunManifest:
    step: str
    config_hash: str
    config: dict
    inputs: dict[str, str]
    outputs: dict[str, str]
    volatile: list[str] = field(default_factory=list)
    volatile_inputs: dict[str, str] = field(default_factory=dict)
    seeds: dict[str, int] = field(default_factory=dict)
    code_version: str = __version__
    environment: dict = field(default_factory=dict)
    started: str = ""
    finished: str = ""
    duration_s: float = 0.0
    info: dict = field(default_factory=dict)
    cached: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "RunManifest":
        return cls(**d)


def _atomic_write_text(path: Path, text: str) -> None:
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _environment(threads: int) -> dict:
    import scipy

    return {
        "python": platform.python_version(),
        "numpy": np.__version__,
        "scipy": scipy.__version__,
        "platform": platform.platform(),
        "threads": threads,
    }


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


class Pipeline:
    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.run_dir = cfg.run_dir

    # paths ---------------------------------------------------------------
    def step_dir(self, step: str) -> Path:
        return self.run_dir / step

    def rel(self, path) -> str:
        p = Path(path).resolve()
        try:
            return p.relative_to(self.run_dir.resolve()).as_posix()
        except ValueError:
            return str(p)

    def abspath(self, rel: str) -> Path:
        p = Path(rel)
        return p if p.is_absolute() else self.run_dir / p

    def manifest_path(self, step: str) -> Path:
        return self.step_dir(step) / "manifest.json"

    def load_manifest(self, step: str) -> RunManifest | None:
        p = self.manifest_path(step)
        if not p.exists():
            return None
        return RunManifest.from_dict(json.loads(p.read_text()))

    def outputs_of(self, step: str, suffix: str = "") -> list[Path]:
        m = self.load_manifest(step)
        if m is None:
            raise MissingInput(f"step {step!r} has not been run in {self.run_dir}")
        return [self.abspath(r) for r in sorted(m.outputs) if r.endswith(suffix)]

    def output_of(self, step: str, name: str) -> Path:
        for p in self.outputs_of(step):
            if p.name == name:
                return p
        raise MissingInput(f"step {step!r} did not produce {name}")

    # execution -----------------------------------------------------------
    def run_step(self, step: str, force: bool = False) -> RunManifest:
        from . import steps as step_impl

        if step not in STEP_ORDER:
            raise ConfigError(f"unknown step {step!r}")
        impl = step_impl.STEPS[step]
        inputs, volatile_inputs = impl.inputs(self)
        for p in [*inputs, *volatile_inputs]:
            if not Path(p).exists():
                raise MissingInput(f"{step}: input {p} does not exist")
        input_hashes = {self.rel(p): sha256_file(p) for p in inputs}
        config_hash = self.cfg.config_hash(step)

        previous = self.load_manifest(step)
        if not force and previous is not None and previous.config_hash == config_hash and previous.inputs == input_hashes:
            bad = [r for r, h in previous.outputs.items() if not self.abspath(r).exists() or sha256_file(self.abspath(r)) != h]
            if bad:
                raise HashMismatch(f"{step}: cached outputs fail verification: {', '.join(bad)}")
            previous.cached = True
            self._append_log(previous)
            log.info("%s: cached", step)
            return previous

        out_dir = self.step_dir(step)
        if out_dir.exists():
            shutil.rmtree(out_dir)
        out_dir.mkdir(parents=True)
        started = _now()
        t0 = time.perf_counter()
        log.info("%s: running", step)
        try:
            result = impl.run(self, out_dir)
        except RsnError as exc:
            raise StepFailed(f"{step}: {type(exc).__name__}: {exc}") from exc
        duration = time.perf_counter() - t0

        written = sorted(p for p in out_dir.rglob("*") if p.is_file() and p.name != "manifest.json")
        volatile = sorted(self.rel(p) for p in result.get("volatile", []))
        manifest = RunManifest(
            step=step,
            config_hash=config_hash,
            config=self.cfg.materialized(step),
            inputs=input_hashes,
            outputs={self.rel(p): sha256_file(p) for p in written},
            volatile=volatile,
            volatile_inputs={self.rel(p): sha256_file(p) for p in volatile_inputs},
            seeds={"global": self.cfg.seed},
            environment=_environment(int(self.cfg.values["threads"])),
            started=started,
            finished=_now(),
            duration_s=duration,
            info=result.get("info", {}),
        )
        _atomic_write_text(self.manifest_path(step), json.dumps(manifest.to_dict(), indent=2, sort_keys=True) + "\n")
        self._append_log(manifest)
        return manifest

    def run_all(self, steps=None, force: bool = False) -> list[RunManifest]:
        wanted = steps or self.cfg.steps
        return [self.run_step(s, force) for s in STEP_ORDER if s in wanted]

    def _append_log(self, manifest: RunManifest) -> None:
        self.run_dir.mkdir(parents=True, exist_ok=True)
        with open(self.run_dir / "manifests.jsonl", "a") as f:
            f.write(canonical_json(manifest.to_dict()) + "\n")
            f.flush()
            os.fsync(f.fileno())


def verify_run(run_dir) -> list[dict]:
    """Re-hash every output recorded in the step manifests under ``run_dir``.

    Returns one entry per mismatching or missing file; empty means intact.
    """
    run_dir = Path(run_dir)
    problems = []
    for manifest_path in sorted(run_dir.glob("*/manifest.json")):
        m = json.loads(manifest_path.read_text())
        for rel, expected in sorted(m["outputs"].items()):
            p = Path(rel) if os.path.isabs(rel) else run_dir / rel
            if not p.exists():
                problems.append({"step": m["step"], "file": rel, "expected": expected, "actual": None})
                continue
            actual = sha256_file(p)
            if actual != expected:
                problems.append({"step": m["step"], "file": rel, "expected": expected, "actual": actual})
    return problems


def stable_output_hashes(run_dir) -> dict[str, dict[str, str]]:
    """Per step, the output hashes excluding files flagged volatile (wall-clock timings)."""
    out = {}
    for manifest_path in sorted(Path(run_dir).glob("*/manifest.json")):
        m = json.loads(manifest_path.read_text())
        out[m["step"]] = {k: v for k, v in m["outputs"].items() if k not in set(m["volatile"])}
    return out


def expand_inputs(pattern: str) -> list[Path]:
    return [Path(p) for p in sorted(glob.glob(pattern))]
