"""Command line entry point: ``rsnlab <subcommand> [--config PATH] ...``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from .errors import RsnError
from .pipeline import STEP_ORDER, Pipeline, load_config, verify_run

STEP_COMMANDS = ["synth", "preprocess", "groupica", "dualreg", "represent", "train", "evaluate"]


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", type=Path, help="TOML pipeline configuration")
    p.add_argument("--seed", type=int, help="override the global seed")
    p.add_argument("--out", help="run directory (overrides output_dir/run_id)")
    p.add_argument("--threads", type=int, help="worker threads for per-frame work")
    p.add_argument("--force", action="store_true", help="ignore cached results")
    p.add_argument("-v", "--verbose", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsnlab", description="Resting-state network labeling pipeline")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STEP_COMMANDS:
        _common(sub.add_parser(name, help=f"run the {name} step"))
    run_all = sub.add_parser("run-all", help="run every configured step in order")
    _common(run_all)
    run_all.add_argument("--step", help="comma-separated subset of steps to run")
    verify = sub.add_parser("verify", help="re-hash run outputs and compare against synthetic ground truth")
    _common(verify)
    predict = sub.add_parser("predict", help="classify component maps with a trained model")
    predict.add_argument("--model", type=Path, required=True)
    predict.add_argument("--labelset", type=Path, required=True)
    predict.add_argument("--input", type=Path, required=True, help="3D or 4D NIfTI; each frame is one map")
    predict.add_argument("--output", type=Path, help="write predictions TSV here instead of stdout")
    return parser


def _pipeline(args) -> Pipeline:
    cfg = load_config(args.config, seed=args.seed, out=args.out, threads=args.threads)
    return Pipeline(cfg)


def _summary(manifest) -> dict:
    return {"step": manifest.step, "cached": manifest.cached, "outputs": len(manifest.outputs), "duration_s": round(manifest.duration_s, 3)}


def _predict(args) -> int:
    from . import nn
    from .nifti_io import read_nifti
    from .represent import LabelSet, flat_features

    model = nn.load_model(args.model)
    labelset = LabelSet.load(args.labelset)
    vol = read_nifti(args.input)
    feats = np.stack([flat_features(vol.frame(t)) for t in range(vol.nt)])
    pred, probs = nn.mlp_predict(model, feats)
    lines = ["frame\tlabel\tprobability"]
    lines += [f"{t}\t{labelset.labels[k]}\t{probs[t, k]:.6f}" for t, k in enumerate(pred)]
    text = "\n".join(lines) + "\n"
    if args.output:
        args.output.write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command == "predict":
            return _predict(args)
        pipe = _pipeline(args)
        if args.command in STEP_COMMANDS:
            print(json.dumps(_summary(pipe.run_step(args.command, force=args.force))))
            return 0
        if args.command == "run-all":
            steps = args.step.split(",") if args.step else None
            for s in steps or []:
                if s not in STEP_ORDER:
                    raise RsnError(f"unknown step {s!r}")
            for m in pipe.run_all(steps, force=args.force):
                print(json.dumps(_summary(m)))
            return 0
        if args.command == "verify":
            result = {}
            if "verify" in pipe.cfg.steps and pipe.load_manifest("synth") is not None:
                m = pipe.run_step("verify", force=args.force)
                result["truth"] = json.loads((pipe.step_dir("verify") / "truth_match.json").read_text())
                result["truth_cached"] = m.cached
            mismatches = verify_run(pipe.run_dir)
            result["mismatches"] = mismatches
            print(json.dumps(result))
            if mismatches:
                files = ", ".join(m["file"] for m in mismatches)
                print(json.dumps({"error": "HashMismatch", "message": f"{len(mismatches)} output(s) changed: {files}"}), file=sys.stderr)
                return 1
            return 0
    except (RsnError, OSError, ValueError) as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc)}), file=sys.stderr)
        return 1
    return 2


if __name__ == "__main__":
    sys.exit(main())
