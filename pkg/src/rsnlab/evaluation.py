"""Classification metrics and the accuracy/duration report."""
from __future__ import annotations

import csv
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch
from .nn import MlpModel, mlp_predict


@dataclass
class EvalReport:
    n_examples: int
    accuracy: float
    class_names: list[str]
    precision: list[float]
    recall: list[float]
    f1: list[float]
    confusion: list[list[int]]  # rows = true class, columns = predicted class
    no_predictions: list[str] = field(default_factory=list)
    no_instances: list[str] = field(default_factory=list)
    train_duration_s: float = 0.0
    inference_duration_s: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def confusion_matrix(y_true, y_pred, n_classes: int) -> np.ndarray:
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(y_true, dtype=np.intp), np.asarray(y_pred, dtype=np.intp)), 1)
    return cm


def metrics_from_confusion(cm: np.ndarray, class_names) -> EvalReport:
    cm = np.asarray(cm, dtype=np.int64)
    n = int(cm.sum())
    tp = np.diag(cm).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    actual = cm.sum(axis=1).astype(np.float64)
    precision = np.divide(tp, predicted, out=np.zeros_like(tp), where=predicted > 0)
    recall = np.divide(tp, actual, out=np.zeros_like(tp), where=actual > 0)
    denom = precision + recall
    f1 = np.divide(2 * precision * recall, denom, out=np.zeros_like(tp), where=denom > 0)
    names = list(class_names)
    return EvalReport(
        n_examples=n,
        accuracy=float(tp.sum() / n) if n else float("nan"),
        class_names=names,
        precision=precision.tolist(),
        recall=recall.tolist(),
        f1=f1.tolist(),
        confusion=cm.tolist(),
        no_predictions=[names[i] for i in np.flatnonzero(predicted == 0)],
        no_instances=[names[i] for i in np.flatnonzero(actual == 0)],
    )


def evaluate(model: MlpModel, x, y, class_names=None, train_duration_s: float = 0.0) -> EvalReport:
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.intp)
    if len(y) == 0:
        raise ValueError("cannot evaluate on an empty dataset")
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise DimensionMismatch(f"model expects {model.layer_dims[0]} features, got shape {x.shape}")
    n_classes = model.layer_dims[-1]
    if class_names is None:
        class_names = [str(i) for i in range(n_classes)]
    t0 = time.perf_counter()
    pred, _ = mlp_predict(model, x)
    elapsed = time.perf_counter() - t0
    report = metrics_from_confusion(confusion_matrix(y, pred, n_classes), class_names)
    report.train_duration_s = float(train_duration_s)
    report.inference_duration_s = elapsed
    return report


def report_emit(report: EvalReport, path_prefix) -> tuple[Path, Path]:
    """Write ``<prefix>.json`` and ``<prefix>_confusion.csv``."""
    prefix = Path(path_prefix)
    json_path = prefix.with_name(prefix.name + ".json")
    csv_path = prefix.with_name(prefix.name + "_confusion.csv")
    json_path.write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["true\\pred", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            writer.writerow([name, *row])
    return json_path, csv_path


def report_load(json_path) -> EvalReport:
    return EvalReport.from_dict(json.loads(Path(json_path).read_text()))


def table_row(model_name: str, train_acc: float, report: EvalReport) -> str:
    """One line in the layout of a model comparison table."""
    return (
        f"{model_name}\t{100 * train_acc:.1f}%\t{100 * report.accuracy:.1f}%\t"
        f"{report.train_duration_s:.1f} s\t{report.inference_duration_s:.3f} s"
    )
