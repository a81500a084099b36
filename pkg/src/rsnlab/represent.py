"""Classifier inputs: hierarchical labels, flat and 2.5D encodings, subject splits."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import GridMismatch, RsnError
from .ica import BrainMask, zscore_map
from .nifti_io import Volume4D

NOISE = "NOISE"
UNKNOWN = "UNKNOWN"
RESERVED = (NOISE, UNKNOWN)


class LabelError(RsnError):
    pass


class EmptyLabel(LabelError):
    pass


class EmptyToken(LabelError):
    pass


class InvalidToken(LabelError):
    pass


class MissingLabel(LabelError):
    pass


class TooFewSubjects(RsnError):
    pass


@dataclass(frozen=True)
class RsnLabel:
    raw: str
    tokens: tuple[str, ...]

    @property
    def network(self) -> str:
        """Functional name, the top of the hierarchy."""
        return self.tokens[0]


def parse_label(raw: str) -> RsnLabel:
    if raw is None or raw.strip() == "":
        raise EmptyLabel("label is empty")
    tokens = tuple(raw.strip().upper().split("-"))
    for tok in tokens:
        if tok == "":
            raise EmptyToken(f"empty token in {raw!r}")
        if not tok.isascii() or not tok.isalnum():
            raise InvalidToken(f"token {tok!r} in {raw!r} is not alphanumeric")
    return RsnLabel("-".join(tokens), tokens)


class LabelSet:
    """Ordered unique labels; NOISE and UNKNOWN are always present."""

    def __init__(self, labels):
        names = [parse_label(l).raw for l in labels]
        names += [r for r in RESERVED if r not in names]
        self.labels: list[str] = sorted(set(names))
        self.index = {name: i for i, name in enumerate(self.labels)}

    def __len__(self):
        return len(self.labels)

    def __eq__(self, other):
        return isinstance(other, LabelSet) and self.labels == other.labels

    def index_of(self, raw: str) -> int:
        return self.index[parse_label(raw).raw]

    def save(self, path) -> None:
        Path(path).write_text(json.dumps({"labels": self.labels}, indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "LabelSet":
        return cls(json.loads(Path(path).read_text())["labels"])


def read_labels_file(path) -> dict[int, str]:
    """``index<TAB>LABEL`` rows -> {component index: canonical label}."""
    out = {}
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) != 2:
            raise LabelError(f"{path}:{lineno}: expected 'index<TAB>LABEL'")
        out[int(parts[0])] = parse_label(parts[1]).raw
    return out


def write_labels_file(path, labels: dict[int, str]) -> None:
    lines = [f"{i}\t{parse_label(labels[i]).raw}" for i in sorted(labels)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


@dataclass
class Rgb2p5:
    side: int
    pixels: np.ndarray  # side x side x 3, uint8; channel order R, G, B
    scale_record: list[tuple[float, float]] = field(default_factory=list)

    @property
    def red(self):
        return self.pixels[..., 0]

    @property
    def green(self):
        return self.pixels[..., 1]

    @property
    def blue(self):
        return self.pixels[..., 2]


def _to_byte_range(img: np.ndarray) -> tuple[np.ndarray, tuple[float, float]]:
    lo, hi = float(img.min()), float(img.max())
    if hi == lo:
        return np.zeros(img.shape, dtype=np.uint8), (lo, hi)
    scaled = np.rint((img - lo) * (255.0 / (hi - lo)))
    return np.clip(scaled, 0, 255).astype(np.uint8), (lo, hi)


def _pad_center(img: np.ndarray, side: int) -> np.ndarray:
    out = np.zeros((side, side), dtype=img.dtype)
    r0 = (side - img.shape[0]) // 2
    c0 = (side - img.shape[1]) // 2
    out[r0 : r0 + img.shape[0], c0 : c0 + img.shape[1]] = img
    return out


def projections(arr3d: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Sum projections: axial (x, y), sagittal (y, z), coronal (x, z)."""
    return arr3d.sum(axis=2), arr3d.sum(axis=0), arr3d.sum(axis=1)


def project_2p5d(vol) -> Rgb2p5:
    arr = vol.data[..., 0] if isinstance(vol, Volume4D) else np.asarray(vol, dtype=np.float64)
    if arr.ndim != 3:
        raise ValueError(f"expected a 3D map, got shape {arr.shape}")
    side = max(arr.shape)
    channels, record = [], []
    for proj in projections(arr):
        img, rng = _to_byte_range(proj)
        channels.append(_pad_center(img, side))
        record.append(rng)
    return Rgb2p5(side, np.stack(channels, axis=-1), record)


def padded_offsets(shape) -> dict[str, tuple[int, int]]:
    """Row/column offsets of each projection inside the padded square."""
    nx, ny, nz = shape
    side = max(shape)
    off = lambda n: (side - n) // 2
    return {"red": (off(nx), off(ny)), "green": (off(ny), off(nz)), "blue": (off(nx), off(nz))}


def export_png(img: Rgb2p5, path) -> None:
    Image.fromarray(np.ascontiguousarray(img.pixels), mode="RGB").save(path, format="PNG")


def import_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


@dataclass(frozen=True)
class SplitSpec:
    train: float = 0.70
    val: float = 0.10
    test: float = 0.20
    seed: int = 0

    def __post_init__(self):
        ratios = (self.train, self.val, self.test)
        if any(r <= 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
            raise ValueError(f"split ratios must be positive and sum to 1, got {ratios}")


def split_subjects(subject_ids, spec: SplitSpec = SplitSpec()) -> tuple[list, list, list]:
    ids = sorted(set(subject_ids))
    n = len(ids)
    if n < 3:
        raise TooFewSubjects(f"need at least 3 subjects to split, got {n}")
    order = np.random.default_rng(spec.seed).permutation(n)
    shuffled = [ids[i] for i in order]
    n_train = int(np.floor(spec.train * n + 1e-9))
    n_val = int(np.floor(spec.val * n + 1e-9))
    return shuffled[:n_train], shuffled[n_train : n_train + n_val], shuffled[n_train + n_val :]


@dataclass
class Example:
    subject_id: str
    component_index: int
    features: object  # flat float64 vector or Rgb2p5
    class_index: int


def flat_features(arr3d: np.ndarray) -> np.ndarray:
    """Flattened (x-fastest) and per-example z-scored map."""
    return zscore_map(np.asarray(arr3d, dtype=np.float64).ravel(order="F"))


def build_dataset(subjects, mask: BrainMask, labels: dict[int, str], labelset: LabelSet, mode: str = "flat") -> list[Example]:
    """One example per (subject, component).

    ``subjects`` holds SubjectComponents (stage-2 maps over the mask) in a
    fixed order; examples follow subject order then component order.
    """
    if mode not in ("flat", "rgb"):
        raise ValueError(f"mode must be 'flat' or 'rgb', got {mode!r}")
    examples = []
    k_ref = None
    for comp in subjects:
        k = comp.maps.shape[0]
        if k_ref is None:
            k_ref = k
        if k != k_ref or not comp.grid.same_grid(mask.header) or comp.maps.shape[1] != mask.n_voxels:
            raise GridMismatch(f"{comp.subject_id} does not share K and grid with the dataset")
        vols = mask.unmask(comp.maps)
        for c in range(k):
            if c not in labels:
                raise MissingLabel(f"component {c} has no label")
            arr = vols[..., c]
            feats = flat_features(arr) if mode == "flat" else project_2p5d(arr)
            examples.append(Example(comp.subject_id, c, feats, labelset.index_of(labels[c])))
    return examples


def class_distribution(examples, n_classes: int) -> np.ndarray:
    counts = np.bincount([e.class_index for e in examples], minlength=n_classes)
    return counts / max(1, counts.sum())
