"""Temporal-concatenation group ICA.

The chain is: brain mask -> per-subject voxelwise variance normalisation ->
PCA whitening to model order K -> symmetric FastICA. Sources are spatial maps
(spatial ICA); the mixing matrix holds the concatenated time courses.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import GridMismatch, RsnError
from .nifti_io import NiftiHeader, Volume4D


class IcaError(RsnError):
    pass


class EmptyMask(IcaError):
    pass


class RankDeficient(IcaError):
    pass


class NotWhitened(IcaError):
    pass


class ConstantMap(IcaError):
    pass


@dataclass(frozen=True, eq=False)
class BrainMask:
    """Boolean grid; in-mask voxels are numbered in x-fastest order."""

    header: NiftiHeader
    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask, dtype=bool)
        if m.shape != self.header.shape3:
            raise GridMismatch(f"mask shape {m.shape} != grid {self.header.shape3}")
        if not m.any():
            raise EmptyMask("mask contains no voxels")
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)
        flat = np.flatnonzero(m.ravel(order="F"))
        flat.flags.writeable = False
        object.__setattr__(self, "flat_index", flat)

    @property
    def n_voxels(self) -> int:
        return int(self.flat_index.size)

    def column_of(self, voxel) -> int:
        """Column index of an in-mask voxel (x, y, z)."""
        nx, ny, _ = self.header.shape3
        x, y, z = voxel
        flat = x + nx * (y + ny * z)
        pos = int(np.searchsorted(self.flat_index, flat))
        if pos >= self.flat_index.size or self.flat_index[pos] != flat:
            raise KeyError(f"voxel {voxel} is outside the mask")
        return pos

    def extract(self, vol: Volume4D) -> np.ndarray:
        """T x V matrix of in-mask time series."""
        if not vol.header.same_grid(self.header):
            raise GridMismatch("volume grid does not match the mask grid")
        series = vol.data.reshape(-1, vol.nt, order="F")
        return np.ascontiguousarray(series[self.flat_index].T)

    def unmask(self, rows: np.ndarray) -> np.ndarray:
        """Scatter K x V rows back into a (nx, ny, nz, K) array, zero outside the mask."""
        rows = np.atleast_2d(rows)
        out = np.zeros((self.header.n_voxels, rows.shape[0]))
        out[self.flat_index] = rows.T
        return out.reshape((*self.header.shape3, rows.shape[0]), order="F")


@dataclass
class DataMatrix:
    values: np.ndarray  # (sum T_s) x V
    row_subject: list[str]


@dataclass
class IcaResult:
    model_order: int
    spatial_maps: np.ndarray  # K x V, each row z-scored
    mixing: np.ndarray  # rows x K
    seed: int
    iterations_used: int
    converged: bool
    unmixing: np.ndarray = field(repr=False, default=None)
    eigenvalues: np.ndarray = field(repr=False, default=None)

    def metadata(self) -> dict:
        return {
            "model_order": self.model_order,
            "seed": self.seed,
            "iterations_used": self.iterations_used,
            "converged": self.converged,
            "n_rows": int(self.mixing.shape[0]),
            "n_voxels": int(self.spatial_maps.shape[1]),
        }


def build_mask(vols: list[Volume4D], threshold_fraction: float = 0.5) -> BrainMask:
    if not vols:
        raise EmptyMask("no volumes given")
    hdr = vols[0].header
    total = np.zeros(hdr.shape3)
    for v in vols:
        if not v.header.same_grid(hdr):
            raise GridMismatch("all volumes must share one grid")
        total += v.data.mean(axis=3)
    mean_map = total / len(vols)
    global_mean = mean_map.mean()
    if threshold_fraction == 0:
        mask = mean_map != 0
    else:
        mask = mean_map >= threshold_fraction * global_mean
    if not mask.any():
        raise EmptyMask(f"no voxel reaches {threshold_fraction} x global mean")
    return BrainMask(hdr.with_frames(1), mask)


def normalize_series(y: np.ndarray) -> np.ndarray:
    """Demean and unit-variance each column of a T x V block; flat columns become 0."""
    y = y - y.mean(axis=0)
    sd = y.std(axis=0)
    flat = sd < 1e-12
    sd[flat] = 1.0
    y = y / sd
    y[:, flat] = 0.0
    return y


def concat_normalize(vols: list[Volume4D], mask: BrainMask, subject_ids: list[str] | None = None) -> DataMatrix:
    if subject_ids is None:
        subject_ids = [f"sub-{i:02d}" for i in range(len(vols))]
    blocks, owners = [], []
    for sid, v in zip(subject_ids, vols):
        if v.nt < 2:
            raise IcaError(f"{sid}: need at least 2 timepoints")
        blocks.append(normalize_series(mask.extract(v)))
        owners.extend([sid] * v.nt)
    return DataMatrix(np.vstack(blocks), owners)


def _fix_signs(vecs: np.ndarray) -> np.ndarray:
    """Make the largest-magnitude entry of each column positive."""
    idx = np.argmax(np.abs(vecs), axis=0)
    signs = np.sign(vecs[idx, np.arange(vecs.shape[1])])
    signs[signs == 0] = 1.0
    return vecs * signs


@dataclass
class PcaResult:
    reduced: np.ndarray  # K x V, whitened
    basis: np.ndarray  # rows x K
    eigenvalues: np.ndarray  # top K, descending
    all_eigenvalues: np.ndarray
    row_means: np.ndarray

    @property
    def explained_fraction(self) -> float:
        return float(self.eigenvalues.sum() / self.all_eigenvalues.sum())


def pca_reduce(x, k: int) -> PcaResult:
    """Whitened top-K projection of the rows of ``x`` (rows x V).

    Rows are centred across voxels. The covariance is ``X X^T / V``; when V is
    smaller than the row count the V x V Gram side is decomposed instead.
    """
    values = x.values if isinstance(x, DataMatrix) else np.asarray(x, dtype=np.float64)
    n_rows, n_vox = values.shape
    if not 1 <= k <= min(n_rows, n_vox):
        raise RankDeficient(f"model order {k} exceeds min(rows={n_rows}, voxels={n_vox})")
    row_means = values.mean(axis=1, keepdims=True)
    xc = values - row_means
    if n_rows <= n_vox:
        cov = xc @ xc.T / n_vox
        evals, evecs = np.linalg.eigh(cov)
        order = np.argsort(evals)[::-1]
        evals, evecs = evals[order], evecs[:, order]
    else:
        gram = xc.T @ xc / n_vox
        gvals, gvecs = np.linalg.eigh(gram)
        order = np.argsort(gvals)[::-1]
        gvals, gvecs = gvals[order], gvecs[:, order]
        evals = gvals
        keep = gvals > 1e-10
        evecs = np.zeros((n_rows, gvals.size))
        evecs[:, keep] = xc @ gvecs[:, keep] / np.sqrt(gvals[keep] * n_vox)
    n_ok = int((evals > 1e-10).sum())
    if n_ok < k:
        raise RankDeficient(f"only {n_ok} eigenvalues exceed 1e-10; cannot extract {k} components")
    top_vals = evals[:k]
    top_vecs = _fix_signs(evecs[:, :k])
    reduced = (top_vecs / np.sqrt(top_vals)).T @ xc
    basis = top_vecs * np.sqrt(top_vals)
    return PcaResult(reduced, basis, top_vals, np.clip(evals, 0.0, None), row_means)


def zscore_map(m) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    sd = m.std()
    if not sd > 0:
        raise ConstantMap("cannot z-score a constant map")
    return (m - m.mean()) / sd


def _sym_decorrelate(w: np.ndarray) -> np.ndarray:
    s, u = np.linalg.eigh(w @ w.T)
    return u @ np.diag(1.0 / np.sqrt(s)) @ u.T @ w


def _skew_sign(rows: np.ndarray) -> np.ndarray:
    sk = ((rows - rows.mean(axis=1, keepdims=True)) ** 3).mean(axis=1)
    s = np.sign(sk)
    s[s == 0] = 1.0
    return s


def fastica(
    whitened: np.ndarray,
    seed: int,
    tol: float = 1e-4,
    max_iter: int = 200,
    contrast: str = "tanh",
    basis: np.ndarray | None = None,
) -> IcaResult:
    """Symmetric FastICA on K x V whitened rows.

    ``basis`` (rows x K from :func:`pca_reduce`) is used to express the mixing
    matrix in the original row space; without it the mixing is K x K.
    """
    z = np.asarray(whitened, dtype=np.float64)
    k, n = z.shape
    cov = z @ z.T / n
    if not np.allclose(cov, np.eye(k), atol=1e-6, rtol=0):
        raise NotWhitened("rows must have identity covariance")
    if contrast not in ("tanh", "pow3"):
        raise ValueError(f"unknown contrast {contrast!r}")

    rng = np.random.default_rng(seed)
    q, r = np.linalg.qr(rng.standard_normal((k, k)))
    w = q * np.sign(np.diag(r))

    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        y = w @ z
        if contrast == "tanh":
            g = np.tanh(y)
            g_prime = (1.0 - g * g).mean(axis=1)
        else:
            g = y**3
            g_prime = 3.0 * (y * y).mean(axis=1)
        w_new = _sym_decorrelate(g @ z.T / n - g_prime[:, None] * w)
        lim = np.max(np.abs(1.0 - np.abs(np.einsum("ij,ij->i", w_new, w))))
        w = w_new
        if lim < tol:
            converged = True
            break

    sources = w @ z
    signs = _skew_sign(sources)
    w = w * signs[:, None]
    sources = sources * signs[:, None]
    sd = sources.std(axis=1)
    maps = np.vstack([zscore_map(s) for s in sources])
    mix_basis = np.eye(k) if basis is None else basis
    mixing = mix_basis @ w.T * sd
    # order components by the variance they explain
    order = np.argsort(-(mixing**2).sum(axis=0), kind="stable")
    return IcaResult(
        model_order=k,
        spatial_maps=maps[order],
        mixing=mixing[:, order],
        seed=seed,
        iterations_used=it,
        converged=converged,
        unmixing=w[order],
    )


def group_ica(vols: list[Volume4D], mask: BrainMask, k: int, seed: int, tol: float = 1e-4, max_iter: int = 200, subject_ids=None) -> IcaResult:
    data = concat_normalize(vols, mask, subject_ids)
    pca = pca_reduce(data, k)
    res = fastica(pca.reduced, seed, tol, max_iter, basis=pca.basis)
    res.eigenvalues = pca.eigenvalues
    return res


def save_ica(res: IcaResult, mask: BrainMask, maps_path, mixing_path, meta_path) -> None:
    from .nifti_io import make_volume, write_nifti

    arr = mask.unmask(res.spatial_maps)
    write_nifti(make_volume(arr, mask.header.voxel_size_mm, affine=mask.header.affine), maps_path)
    np.savetxt(mixing_path, res.mixing, fmt="%.10e")
    with open(meta_path, "w") as f:
        json.dump(res.metadata(), f, indent=2, sort_keys=True)
        f.write("\n")
