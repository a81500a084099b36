"""Synthetic multi-subject 4D data with known spatial networks and time courses.

Each subject is ``baseline * head + A_s S_s + noise`` where S_s holds
Gaussian-blob network maps (with per-subject amplitude and position jitter)
and A_s band-limited random time courses.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import RsnError
from .nifti_io import make_volume, write_nifti
from .represent import parse_label


class SynthError(RsnError):
    pass


class BlobOutOfBounds(SynthError):
    pass


@dataclass(frozen=True)
class SynthSpec:
    n_subjects: int = 12
    dims: tuple[int, int, int] = (40, 48, 40)
    n_timepoints: int = 60
    tr_s: float = 2.0
    n_networks: int = 6
    voxel_size_mm: tuple[float, float, float] = (4.0, 4.0, 4.0)
    # per network: list of (center_xyz, sigma_vox) blobs; None means auto-placed
    networks: tuple | None = None
    blob_sigma_vox: float = 2.0
    amplitude_jitter: float = 0.1
    shift_jitter_vox: float = 0.5
    noise_sigma: float = 0.05
    baseline: float = 100.0
    head_fraction: float = 0.42
    smoothing_window: int = 5
    seed: int = 0
    label_prefix: str = "SYNTH-NET"

    def __post_init__(self):
        if self.n_networks < 1:
            raise SynthError("need at least one network")
        if self.noise_sigma < 0:
            raise SynthError("noise_sigma must be >= 0")
        if self.n_subjects < 1 or self.n_timepoints < 2:
            raise SynthError("need at least one subject and two timepoints")

    @classmethod
    def from_dict(cls, d: dict) -> "SynthSpec":
        d = dict(d)
        for key in ("dims", "voxel_size_mm"):
            if key in d:
                d[key] = tuple(d[key])
        if d.get("networks") is not None:
            d["networks"] = tuple(tuple((tuple(c), float(s)) for c, s in net) for net in d["networks"])
        return cls(**d)


@dataclass
class GroundTruth:
    spec: SynthSpec
    source_maps: np.ndarray  # G x V (full grid, x-fastest)
    labels: list[str]
    blobs: list[list[tuple[tuple[float, float, float], float]]]
    head: np.ndarray  # boolean grid
    timecourses: list[np.ndarray] = field(default_factory=list)  # per subject T x G
    subject_maps: list[np.ndarray] = field(default_factory=list)  # per subject G x V
    shifts: list[np.ndarray] = field(default_factory=list)  # per subject G x 3
    amplitudes: list[np.ndarray] = field(default_factory=list)  # per subject G

    def subject_ids(self) -> list[str]:
        return subject_ids(self.spec.n_subjects)


def subject_ids(n: int) -> list[str]:
    return [f"sub-{i + 1:02d}" for i in range(n)]


def head_mask(spec: SynthSpec) -> np.ndarray:
    idx = np.indices(spec.dims, dtype=np.float64)
    center = (np.asarray(spec.dims, dtype=np.float64) - 1) / 2
    semi = spec.head_fraction * np.asarray(spec.dims, dtype=np.float64)
    r2 = sum(((idx[i] - center[i]) / semi[i]) ** 2 for i in range(3))
    return r2 <= 1.0


def _blob(dims, center, sigma) -> np.ndarray:
    axes = [np.exp(-0.5 * ((np.arange(n) - c) / sigma) ** 2) for n, c in zip(dims, center)]
    return axes[0][:, None, None] * axes[1][None, :, None] * axes[2][None, None, :]


def _network_map(dims, blobs, head, shift=(0.0, 0.0, 0.0)) -> np.ndarray:
    m = np.zeros(dims)
    for center, sigma in blobs:
        m += _blob(dims, np.asarray(center) + shift, sigma)
    return m * head


def _place_blobs(spec: SynthSpec, head: np.ndarray) -> list[list[tuple[tuple[float, float, float], float]]]:
    dims = np.asarray(spec.dims, dtype=np.float64)
    if spec.networks is not None:
        if len(spec.networks) != spec.n_networks:
            raise SynthError("networks list length must equal n_networks")
        for net in spec.networks:
            for center, _ in net:
                c = np.asarray(center, dtype=np.float64)
                if np.any(c < 0) or np.any(c > dims - 1):
                    raise BlobOutOfBounds(f"blob center {tuple(c)} outside grid {spec.dims}")
        return [[(tuple(map(float, c)), float(s)) for c, s in net] for net in spec.networks]

    rng = np.random.default_rng([spec.seed, 0])
    sigma = spec.blob_sigma_vox
    center = (dims - 1) / 2
    # keep blob cores (2 sigma) inside the head
    semi = spec.head_fraction * dims - 2.0 * sigma
    if np.any(semi <= 0):
        raise BlobOutOfBounds("grid too small for the requested blob size")
    min_dist = 4.5 * sigma
    centers: list[np.ndarray] = []
    for _ in range(20000):
        if len(centers) == spec.n_networks:
            break
        u = rng.uniform(-1, 1, 3)
        if u @ u > 1:
            continue
        c = center + u * semi
        if all(np.linalg.norm(c - o) >= min_dist for o in centers):
            centers.append(c)
    if len(centers) < spec.n_networks:
        raise BlobOutOfBounds(f"could not place {spec.n_networks} separated blobs inside the head")
    return [[(tuple(float(v) for v in np.round(c, 3)), float(sigma))] for c in centers]


def _timecourses(rng, t: int, g: int, window: int) -> np.ndarray:
    raw = rng.standard_normal((t + window - 1, g))
    kernel = np.ones(window) / window
    smooth = np.stack([np.convolve(raw[:, j], kernel, mode="valid") for j in range(g)], axis=1)
    smooth -= smooth.mean(axis=0)
    return smooth / smooth.std(axis=0)


def map_correlations(maps: np.ndarray) -> np.ndarray:
    return np.corrcoef(np.asarray(maps, dtype=np.float64))


def generate_truth(spec: SynthSpec) -> GroundTruth:
    head = head_mask(spec)
    blobs = _place_blobs(spec, head)
    maps = np.stack([_network_map(spec.dims, b, head).ravel(order="F") for b in blobs])
    corr = map_correlations(maps) if spec.n_networks > 1 else np.ones((1, 1))
    off = np.abs(corr - np.diag(np.diag(corr)))
    if off.max(initial=0.0) >= 0.3:
        raise SynthError(f"network maps overlap too much (max |corr| {off.max():.3f})")
    width = len(str(spec.n_networks))
    labels = [parse_label(f"{spec.label_prefix}-{g + 1:0{max(2, width)}d}").raw for g in range(spec.n_networks)]
    return GroundTruth(spec, maps, labels, blobs, head)


def generate_subject(spec: SynthSpec, truth: GroundTruth, index: int) -> np.ndarray:
    """Return the (nx, ny, nz, T) array for subject ``index`` and record its truth."""
    rng = np.random.default_rng([spec.seed, index + 1])
    g = spec.n_networks
    shifts = rng.standard_normal((g, 3)) * spec.shift_jitter_vox
    amps = 1.0 + spec.amplitude_jitter * rng.standard_normal(g)
    tcs = _timecourses(rng, spec.n_timepoints, g, spec.smoothing_window)
    smaps = np.stack([amps[j] * _network_map(spec.dims, truth.blobs[j], truth.head, shifts[j]).ravel(order="F") for j in range(g)])
    v = smaps.shape[1]
    data = (smaps.T @ tcs.T) + spec.baseline * truth.head.ravel(order="F")[:, None]
    if spec.noise_sigma > 0:
        data += spec.noise_sigma * rng.standard_normal((v, spec.n_timepoints))
    truth.timecourses.append(tcs)
    truth.subject_maps.append(smaps)
    truth.shifts.append(shifts)
    truth.amplitudes.append(amps)
    return data.reshape((*spec.dims, spec.n_timepoints), order="F")


def synth_generate(spec: SynthSpec, out_dir, gzip_output: bool = False) -> tuple[list[Path], GroundTruth]:
    """Write one NIfTI per subject plus ground truth; returns written paths and truth."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ext = ".nii.gz" if gzip_output else ".nii"
    truth = generate_truth(spec)
    written = []
    vox, tr = spec.voxel_size_mm, spec.tr_s
    for i, sid in enumerate(subject_ids(spec.n_subjects)):
        data = generate_subject(spec, truth, i)
        path = out / f"{sid}_bold{ext}"
        write_nifti(make_volume(data, vox, tr), path, compresslevel=1)
        written.append(path)
        tpath = out / f"{sid}_truth_timecourses.txt"
        np.savetxt(tpath, truth.timecourses[i], fmt="%.10e")
        mpath = out / f"{sid}_truth_maps{ext}"
        write_nifti(make_volume(_grid(truth.subject_maps[i], spec.dims), vox), mpath, compresslevel=1)
        written += [tpath, mpath]

    maps_path = out / f"truth_maps{ext}"
    write_nifti(make_volume(_grid(truth.source_maps, spec.dims), vox), maps_path, compresslevel=1)
    head_path = out / f"head_mask{ext}"
    write_nifti(make_volume(truth.head.astype(np.float64), vox), head_path, dtype=np.uint8, compresslevel=1)
    template_path = out / f"template{ext}"
    write_nifti(make_volume(spec.baseline * truth.head.astype(np.float64), vox), template_path, compresslevel=1)
    meta_path = out / "ground_truth.json"
    meta = {
        "spec": asdict(spec),
        "labels": truth.labels,
        "blobs": [[{"center": list(c), "sigma_vox": s} for c, s in net] for net in truth.blobs],
        "subjects": [
            {"id": sid, "shift_vox": truth.shifts[i].tolist(), "amplitude": truth.amplitudes[i].tolist()}
            for i, sid in enumerate(subject_ids(spec.n_subjects))
        ],
    }
    meta_path.write_text(json.dumps(meta, indent=2) + "\n")
    written += [maps_path, head_path, template_path, meta_path]
    return written, truth


def _grid(rows: np.ndarray, dims) -> np.ndarray:
    return np.asarray(rows).T.reshape((*dims, rows.shape[0]), order="F")


def load_truth_meta(path) -> dict:
    return json.loads(Path(path).read_text())


@dataclass
class Match:
    truth_index: int
    estimate_index: int
    correlation: float


def correlation_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pearson correlations between rows of ``a`` (G x V) and rows of ``b`` (K x V)."""
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    a = a - a.mean(axis=1, keepdims=True)
    b = b - b.mean(axis=1, keepdims=True)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    na[na == 0] = 1.0
    nb[nb == 0] = 1.0
    return (a / na[:, None]) @ (b / nb[:, None]).T


def match_components(estimated: np.ndarray, truth: np.ndarray) -> list[Match]:
    """Greedy max-|corr| one-to-one assignment; one Match per truth row, in truth order."""
    corr = correlation_matrix(truth, estimated)
    g, k = corr.shape
    if k < g:
        raise SynthError(f"need at least as many estimates ({k}) as truth rows ({g})")
    work = np.abs(corr)
    matches = {}
    for _ in range(g):
        # ties resolved by lowest (truth, estimate) index via argmax on the flattened array
        i, j = np.unravel_index(np.argmax(work), work.shape)
        matches[int(i)] = Match(int(i), int(j), float(corr[i, j]))
        work[i, :] = -1.0
        work[:, j] = -1.0
    return [matches[i] for i in range(g)]
