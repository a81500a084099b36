"""Step bodies for the pipeline runner.

Each step exposes ``inputs(pipeline) -> (hashed_inputs, volatile_inputs)`` and
``run(pipeline, out_dir) -> {"volatile": [...], "info": {...}}``.
"""
from __future__ import annotations

import hashlib
import json
from pathlib import Path

import numpy as np

from . import dualreg, ica, nn, preprocess, represent, synthkit
from .evaluation import evaluate, report_emit, table_row
from .nifti_io import Volume4D, as_volume3d, make_volume, read_nifti, write_nifti
from .pipeline import MissingInput, Pipeline, expand_inputs

BOLD = "_bold.nii"


def subject_id_of(path: Path) -> str:
    name = Path(path).name
    for suffix in (".nii.gz", ".nii"):
        if name.endswith(suffix):
            name = name[: -len(suffix)]
    return name[: -len("_bold")] if name.endswith("_bold") else name


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _bold_inputs(p: Pipeline, step: str) -> list[Path]:
    return [f for f in p.outputs_of(step) if f.name.endswith(BOLD) or f.name.endswith(BOLD + ".gz")]


# --------------------------------------------------------------------------

class Synth:
    @staticmethod
    def inputs(p: Pipeline):
        return [], []

    @staticmethod
    def run(p: Pipeline, out: Path):
        spec = synthkit.SynthSpec.from_dict({**p.cfg.params("synth"), "seed": p.cfg.seed})
        _, truth = synthkit.synth_generate(spec, out)
        return {"info": {"labels": truth.labels, "n_subjects": spec.n_subjects}}


class Preprocess:
    @staticmethod
    def _sources(p: Pipeline):
        prm = p.cfg.params("preprocess")
        if prm["inputs"]:
            subjects = expand_inputs(prm["inputs"])
            if not subjects:
                raise MissingInput(f"preprocess: no files match {prm['inputs']!r}")
        else:
            subjects = _bold_inputs(p, "synth")
        reference = None
        if prm["register"]:
            reference = Path(prm["reference"]) if prm["reference"] else p.output_of("synth", "template.nii")
        return subjects, reference

    @classmethod
    def inputs(cls, p: Pipeline):
        subjects, reference = cls._sources(p)
        return subjects + ([reference] if reference else []), []

    @classmethod
    def run(cls, p: Pipeline, out: Path):
        prm = p.cfg.params("preprocess")
        subjects, reference = cls._sources(p)
        ref_vol = as_volume3d(read_nifti(reference)) if reference else None
        threads = int(p.cfg.values["threads"])
        info = {}
        for path in subjects:
            sid = subject_id_of(path)
            vol = read_nifti(path)
            sub_info = {"affine_source": vol.header.affine_source}
            if prm["motion_correct"]:
                vol, xfms = preprocess.motion_correct(vol, int(prm["ref_index"]), threads=threads)
                preprocess.write_motion_table(out / f"{sid}_motion.txt", xfms)
            vol = preprocess.gaussian_smooth(vol, preprocess.SmoothingSpec(float(prm["fwhm_mm"])))
            vol = preprocess.highpass_temporal(vol, preprocess.HighpassSpec(vol.header.tr_s, float(prm["highpass_cutoff_s"])))
            if ref_vol is not None:
                mean = as_volume3d(vol.with_data(vol.data.mean(axis=3)))
                xfm = preprocess.register_affine(mean, ref_vol, int(prm["dof"]))
                np.savetxt(out / f"{sid}_affine.txt", xfm.matrix, fmt="%.10e")
                vol = preprocess.resample_to_grid(vol, xfm, ref_vol.header)
            write_nifti(vol, out / f"{sid}{BOLD}")
            info[sid] = sub_info
        return {"info": {"subjects": info}}


class GroupIca:
    @staticmethod
    def inputs(p: Pipeline):
        return _bold_inputs(p, "preprocess"), []

    @staticmethod
    def run(p: Pipeline, out: Path):
        prm = p.cfg.params("groupica")
        files = _bold_inputs(p, "preprocess")
        vols = [read_nifti(f) for f in files]
        mask = ica.build_mask(vols, float(prm["mask_threshold"]))
        data = ica.concat_normalize(vols, mask, [subject_id_of(f) for f in files])
        del vols
        pca = ica.pca_reduce(data, int(prm["model_order"]))
        res = ica.fastica(pca.reduced, p.cfg.seed, float(prm["tol"]), int(prm["max_iter"]), prm["contrast"], basis=pca.basis)
        write_nifti(make_volume(mask.mask.astype(np.float64), mask.header.voxel_size_mm, affine=mask.header.affine), out / "mask.nii", dtype=np.uint8)
        ica.save_ica(res, mask, out / "group_maps.nii", out / "mixing.txt", out / "ica.json")
        return {"info": {**res.metadata(), "n_mask_voxels": mask.n_voxels, "explained_variance": pca.explained_fraction}}


def _load_mask(path) -> ica.BrainMask:
    vol = read_nifti(path)
    return ica.BrainMask(vol.header.with_frames(1), vol.data[..., 0] > 0)


def _load_group(p: Pipeline) -> tuple[ica.BrainMask, ica.IcaResult]:
    mask = _load_mask(p.output_of("groupica", "mask.nii"))
    maps_vol = read_nifti(p.output_of("groupica", "group_maps.nii"))
    maps = maps_vol.data.reshape(-1, maps_vol.nt, order="F")[mask.flat_index].T
    meta = json.loads(p.output_of("groupica", "ica.json").read_text())
    mixing = np.atleast_2d(np.loadtxt(p.output_of("groupica", "mixing.txt")))
    res = ica.IcaResult(meta["model_order"], maps, mixing, meta["seed"], meta["iterations_used"], meta["converged"])
    return mask, res


class DualReg:
    @staticmethod
    def inputs(p: Pipeline):
        group = [p.output_of("groupica", n) for n in ("mask.nii", "group_maps.nii", "mixing.txt", "ica.json")]
        return group + _bold_inputs(p, "preprocess"), []

    @staticmethod
    def run(p: Pipeline, out: Path):
        vn = bool(p.cfg.params("dualreg")["variance_normalize"])
        mask, group = _load_group(p)
        for f in _bold_inputs(p, "preprocess"):
            sid = subject_id_of(f)
            comp = dualreg.dual_regress(group, read_nifti(f), mask, sid, vn)
            dualreg.save_subject(comp, mask, out / f"{sid}_maps.nii", out / f"{sid}_timecourses.txt")
        return {"info": {"variance_normalize": vn}}


def _subject_maps(p: Pipeline) -> list[tuple[str, Path]]:
    return [(f.name[: -len("_maps.nii")], f) for f in p.outputs_of("dualreg", "_maps.nii")]


class Represent:
    @staticmethod
    def _label_source(p: Pipeline):
        labels = p.cfg.params("represent")["labels"]
        if labels:
            return [Path(labels)]
        return [p.output_of("groupica", "group_maps.nii"), p.output_of("synth", "truth_maps.nii"), p.output_of("synth", "ground_truth.json")]

    @classmethod
    def inputs(cls, p: Pipeline):
        maps = [f for _, f in _subject_maps(p)]
        return maps + [p.output_of("groupica", "mask.nii")] + cls._label_source(p), []

    @classmethod
    def run(cls, p: Pipeline, out: Path):
        prm = p.cfg.params("represent")
        mask = _load_mask(p.output_of("groupica", "mask.nii"))
        if prm["labels"]:
            labels = represent.read_labels_file(prm["labels"])
        else:
            labels = auto_labels(p, mask)
        represent.write_labels_file(out / "labels.tsv", labels)
        labelset = represent.LabelSet(labels.values())
        labelset.save(out / "labelset.json")

        subjects = []
        for sid, f in _subject_maps(p):
            vol = read_nifti(f)
            maps = vol.data.reshape(-1, vol.nt, order="F")[mask.flat_index].T
            subjects.append(dualreg.SubjectComponents(sid, np.zeros((0, vol.nt)), maps, vol.header.with_frames(1)))
        examples = represent.build_dataset(subjects, mask, labels, labelset, prm["mode"])

        if prm["mode"] == "flat":
            features = np.stack([e.features for e in examples])
        else:
            images = np.stack([e.features.pixels for e in examples])
            np.save(out / "images.npy", images)
            features = np.stack([represent.flat_features(im.astype(np.float64)) for im in images])
        export = prm["export_png"] or prm["mode"] == "rgb"
        if export:
            (out / "png").mkdir()
            for e in examples:
                img = e.features if prm["mode"] == "rgb" else represent.project_2p5d(mask.unmask(subjects_by_id(subjects, e.subject_id).maps[e.component_index])[..., 0])
                represent.export_png(img, out / "png" / f"{e.subject_id}_ic{e.component_index:03d}.png")
        np.save(out / "features.npy", features)

        rows = []
        for e, row in zip(examples, features):
            rows.append({
                "subject_id": e.subject_id,
                "component_index": e.component_index,
                "class_index": e.class_index,
                "label": labelset.labels[e.class_index],
                "sha256": hashlib.sha256(np.ascontiguousarray(row).tobytes()).hexdigest(),
            })
        _write_json(out / "examples.json", rows)

        spec = represent.SplitSpec(prm["train"], prm["val"], prm["test"], p.cfg.seed)
        tr, va, te = represent.split_subjects([s.subject_id for s in subjects], spec)
        _write_json(out / "splits.json", {"train": tr, "val": va, "test": te})
        return {"info": {"n_examples": len(examples), "feature_length": int(features.shape[1]), "n_classes": len(labelset), "normalization": "per-example z-score"}}


def subjects_by_id(subjects, sid):
    return next(s for s in subjects if s.subject_id == sid)


def auto_labels(p: Pipeline, mask: ica.BrainMask) -> dict[int, str]:
    """Label group ICs by matching them to synthetic ground truth; the rest are NOISE."""
    meta = json.loads(p.output_of("synth", "ground_truth.json").read_text())
    truth = read_nifti(p.output_of("synth", "truth_maps.nii"))
    group = read_nifti(p.output_of("groupica", "group_maps.nii"))
    t = truth.data.reshape(-1, truth.nt, order="F")[mask.flat_index].T
    g = group.data.reshape(-1, group.nt, order="F")[mask.flat_index].T
    labels = {k: represent.NOISE for k in range(g.shape[0])}
    for m in synthkit.match_components(g, t):
        labels[m.estimate_index] = meta["labels"][m.truth_index]
    return labels


def _load_dataset(p: Pipeline):
    features = np.load(p.output_of("represent", "features.npy"))
    rows = json.loads(p.output_of("represent", "examples.json").read_text())
    splits = json.loads(p.output_of("represent", "splits.json").read_text())
    labelset = represent.LabelSet.load(p.output_of("represent", "labelset.json"))
    y = np.array([r["class_index"] for r in rows], dtype=np.intp)
    sids = np.array([r["subject_id"] for r in rows])

    def part(name):
        sel = np.isin(sids, splits[name])
        return features[sel], y[sel]

    return part, labelset, rows


_DATASET_FILES = ("features.npy", "examples.json", "splits.json", "labelset.json")


class Train:
    @staticmethod
    def inputs(p: Pipeline):
        return [p.output_of("represent", n) for n in _DATASET_FILES], []

    @staticmethod
    def run(p: Pipeline, out: Path):
        prm = p.cfg.params("train")
        part, labelset, _ = _load_dataset(p)
        cfg = nn.TrainConfig(prm["learning_rate"], int(prm["batch_size"]), int(prm["epochs"]), prm["dropout_p"], p.cfg.seed, prm["class_weight_mode"])
        x_tr, y_tr = part("train")
        c = len(labelset)
        model = nn.mlp_init(x_tr.shape[1], c, p.cfg.seed)
        if cfg.class_weight_mode == "none":
            weights = np.ones(c)
        else:
            weights = nn.class_weights(np.bincount(y_tr, minlength=c))
        model, hist = nn.mlp_train((x_tr, y_tr), part("val"), cfg, weights, model=model)
        nn.save_model(model, out / "model.bin")
        _write_json(out / "class_weights.json", dict(zip(labelset.labels, weights.tolist())))
        _write_json(out / "history.json", hist.to_dict())
        return {"volatile": [out / "history.json"], "info": {"final_train_loss": hist.train_loss[-1], "n_params": model.n_params}}


class Evaluate:
    @staticmethod
    def inputs(p: Pipeline):
        hashed = [p.output_of("train", "model.bin")] + [p.output_of("represent", n) for n in _DATASET_FILES]
        return hashed, [p.output_of("train", "history.json")]

    @staticmethod
    def run(p: Pipeline, out: Path):
        split = p.cfg.params("evaluate")["split"]
        part, labelset, rows = _load_dataset(p)
        model = nn.load_model(p.output_of("train", "model.bin"))
        hist = json.loads(p.output_of("train", "history.json").read_text())
        x, y = part(split)
        report = evaluate(model, x, y, labelset.labels, hist["train_duration_s"])
        json_path, _ = report_emit(report, out / "report")
        x_tr, y_tr = part("train")
        train_report = evaluate(model, x_tr, y_tr, labelset.labels)
        pred, probs = nn.mlp_predict(model, x)
        split_rows = [r for r in rows if r["subject_id"] in set(json.loads(p.output_of("represent", "splits.json").read_text())[split])]
        lines = ["subject_id\tcomponent_index\ttrue\tpredicted\tprobability"]
        for r, k, pr in zip(split_rows, pred, probs):
            lines.append(f"{r['subject_id']}\t{r['component_index']}\t{r['label']}\t{labelset.labels[k]}\t{pr[k]:.6f}")
        (out / "predictions.tsv").write_text("\n".join(lines) + "\n")
        header = "Model\tTraining Accuracy\tTesting Accuracy\tTraining Duration\tInference Duration"
        (out / "table.txt").write_text(header + "\n" + table_row("MLP", train_report.accuracy, report) + "\n")
        return {
            "volatile": [json_path, out / "table.txt"],
            "info": {"accuracy": report.accuracy, "train_accuracy": train_report.accuracy, "n_examples": report.n_examples},
        }


class Verify:
    """Compare recovered components with the synthetic ground truth."""

    @staticmethod
    def inputs(p: Pipeline):
        synth = [f for f in p.outputs_of("synth") if "truth" in f.name]
        group = [p.output_of("groupica", n) for n in ("mask.nii", "group_maps.nii")]
        return synth + group + [f for _, f in _subject_maps(p)], []

    @staticmethod
    def run(p: Pipeline, out: Path):
        min_corr = float(p.cfg.params("verify")["min_corr"])
        report = truth_report(p)
        report["min_corr"] = min_corr
        report["passed"] = all(n["best_abs_corr"] >= min_corr for n in report["networks"])
        _write_json(out / "truth_match.json", report)
        return {"info": {"passed": report["passed"]}}


def truth_report(p: Pipeline) -> dict:
    mask = _load_mask(p.output_of("groupica", "mask.nii"))
    meta = json.loads(p.output_of("synth", "ground_truth.json").read_text())

    def rows(path):
        v = read_nifti(path)
        return v.data.reshape(-1, v.nt, order="F")[mask.flat_index].T

    truth = rows(p.output_of("synth", "truth_maps.nii"))
    group_matches = synthkit.match_components(rows(p.output_of("groupica", "group_maps.nii")), truth)
    per_subject = []
    for sid, f in _subject_maps(p):
        subject_truth = rows(p.output_of("synth", f"{sid}_truth_maps.nii"))
        per_subject.append([m.correlation for m in synthkit.match_components(rows(f), subject_truth)])
    dr = np.abs(np.array(per_subject))
    networks = []
    for g, m in enumerate(group_matches):
        dr_mean = float(dr[:, g].mean()) if dr.size else float("nan")
        networks.append({
            "label": meta["labels"][g],
            "group_ic": m.estimate_index,
            "group_corr": m.correlation,
            "dualreg_mean_abs_corr": dr_mean,
            "dualreg_min_abs_corr": float(dr[:, g].min()) if dr.size else float("nan"),
            "best_abs_corr": max(abs(m.correlation), dr_mean),
        })
    return {"networks": networks, "n_subjects": len(per_subject)}


STEPS = {
    "synth": Synth,
    "preprocess": Preprocess,
    "groupica": GroupIca,
    "dualreg": DualReg,
    "represent": Represent,
    "train": Train,
    "evaluate": Evaluate,
    "verify": Verify,
}
