"""Volume preprocessing: Gaussian smoothing, temporal high-pass, rigid motion
correction, affine registration and resampling.

All spatial operations interpolate trilinearly and zero-fill outside the field
of view. Registration maximises normalised cross-correlation with a
deterministic two-level coordinate descent.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import RsnError
from .nifti_io import NiftiHeader, Volume3D, Volume4D

FWHM_TO_SIGMA = 1.0 / (2.0 * math.sqrt(2.0 * math.log(2.0)))


class PreprocessError(RsnError):
    pass


class CutoffTooLow(PreprocessError):
    pass


class OptimizerDiverged(PreprocessError):
    pass


class DegenerateInput(PreprocessError):
    pass


class SingularTransform(PreprocessError):
    pass


@dataclass(frozen=True)
class SmoothingSpec:
    fwhm_mm: float = 7.0

    def __post_init__(self):
        if not self.fwhm_mm >= 0:
            raise ValueError(f"fwhm_mm must be >= 0, got {self.fwhm_mm}")


@dataclass(frozen=True)
class HighpassSpec:
    tr_s: float
    cutoff_s: float = 100.0


@dataclass(frozen=True)
class RigidTransform:
    """Rigid sampling map from the reference frame into a moving frame.

    Rotations (radians, applied x then y then z) act about the volume centre;
    translations are in mm. A frame displaced by +d mm therefore reports +d.
    """

    rotations_rad: tuple[float, float, float] = (0.0, 0.0, 0.0)
    translations_mm: tuple[float, float, float] = (0.0, 0.0, 0.0)

    @property
    def params(self) -> np.ndarray:
        return np.array([*self.rotations_rad, *self.translations_mm])

    @classmethod
    def from_params(cls, p) -> "RigidTransform":
        p = [float(v) for v in p]
        return cls(tuple(p[:3]), tuple(p[3:6]))

    def matrix(self, center=(0.0, 0.0, 0.0)) -> np.ndarray:
        return _param_matrix(self.params, center)


@dataclass(frozen=True)
class AffineTransform:
    """World (mm) to world (mm) map from moving space into fixed space."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.allclose(m[3], [0, 0, 0, 1]):
            raise SingularTransform("affine must be 4x4 with last row (0,0,0,1)")
        m.flags.writeable = False
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def inverse(self) -> "AffineTransform":
        return AffineTransform(_safe_inv(self.matrix))

    def scales(self) -> np.ndarray:
        """Column norms of the linear block (per-axis scale for rotation+scale maps)."""
        return np.linalg.norm(self.matrix[:3, :3], axis=0)


def _safe_inv(m: np.ndarray) -> np.ndarray:
    block = m[:3, :3]
    if not np.all(np.isfinite(m)) or abs(np.linalg.det(block)) < 1e-12:
        raise SingularTransform("transform is not invertible")
    return np.linalg.inv(m)


def _rotation(rx, ry, rz) -> np.ndarray:
    cx, sx, cy, sy, cz, sz = math.cos(rx), math.sin(rx), math.cos(ry), math.sin(ry), math.cos(rz), math.sin(rz)
    rot_x = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    rot_y = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    rot_z = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return rot_x @ rot_y @ rot_z


def _param_matrix(p, center) -> np.ndarray:
    """Matrix for 6 (rigid) or 12 (affine) parameters about ``center``.

    Layout: rotations(3), translations(3), scales(3), shears(3).
    """
    p = np.asarray(p, dtype=np.float64)
    lin = _rotation(*p[:3])
    if p.size == 12:
        shear = np.array([[1, p[9], p[10]], [0, 1, p[11]], [0, 0, 1]])
        lin = lin @ np.diag(p[6:9]) @ shear
    m = np.eye(4)
    m[:3, :3] = lin
    c = np.asarray(center, dtype=np.float64)
    m[:3, 3] = c + p[3:6] - lin @ c
    return m


# --------------------------------------------------------------------------
# smoothing

def gaussian_kernel(sigma_vox: float) -> np.ndarray:
    """Sampled Gaussian truncated at 4 sigma, normalised to unit sum."""
    radius = int(math.ceil(4.0 * sigma_vox))
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    k = np.exp(-0.5 * (x / sigma_vox) ** 2)
    return k / k.sum()


def sigma_voxels(fwhm_mm: float, voxel_size_mm) -> tuple[float, ...]:
    return tuple(fwhm_mm * FWHM_TO_SIGMA / v for v in voxel_size_mm)


def _smooth3d(arr: np.ndarray, kernels) -> np.ndarray:
    out = arr
    for axis, k in enumerate(kernels):
        if k is not None:
            out = ndimage.correlate1d(out, k, axis=axis, mode="constant", cval=0.0)
    return out


def smooth_array(frames: np.ndarray, sigmas) -> np.ndarray:
    """Smooth each 3D frame of a (nx, ny, nz, nt) array with per-axis voxel sigmas.

    Kernels are renormalised at the borders (normalised convolution), so the
    field of view acts as the support.
    """
    kernels = [gaussian_kernel(s) if s > 0 else None for s in sigmas]
    if all(k is None for k in kernels):
        return frames.copy()
    norm = _smooth3d(np.ones(frames.shape[:3]), kernels)
    out = np.empty_like(frames, dtype=np.float64)
    for t in range(frames.shape[3]):
        out[..., t] = _smooth3d(frames[..., t], kernels) / norm
    return out


def gaussian_smooth(vol: Volume4D, spec: SmoothingSpec) -> Volume4D:
    if spec.fwhm_mm == 0:
        return vol
    sigmas = sigma_voxels(spec.fwhm_mm, vol.header.voxel_size_mm)
    return vol.with_data(smooth_array(vol.data, sigmas))


# --------------------------------------------------------------------------
# temporal filtering

def running_line_matrix(nt: int, sigma_frames: float) -> np.ndarray:
    """Rows hold the weights of a Gaussian-weighted local linear fit evaluated at each timepoint."""
    t = np.arange(nt, dtype=np.float64)
    hat = np.empty((nt, nt))
    for i in range(nt):
        d = t - i
        w = np.exp(-0.5 * (d / sigma_frames) ** 2)
        s0, s1, s2 = w.sum(), (w * d).sum(), (w * d * d).sum()
        det = s0 * s2 - s1 * s1
        # intercept of the weighted fit y ~ a + b*d, evaluated at d = 0
        hat[i] = w * (s2 - s1 * d) / det
    return hat


def highpass_temporal(vol: Volume4D, spec: HighpassSpec) -> Volume4D:
    tr = spec.tr_s if spec.tr_s else vol.header.tr_s
    if not tr > 0:
        raise PreprocessError("repetition time must be positive for temporal filtering")
    if spec.cutoff_s <= 2.0 * tr:
        raise CutoffTooLow(f"cutoff {spec.cutoff_s}s must exceed twice the TR ({tr}s)")
    nt = vol.nt
    if nt < 3:
        raise PreprocessError(f"need at least 3 timepoints, got {nt}")
    sigma_frames = spec.cutoff_s / 2.0 / tr
    hat = running_line_matrix(nt, sigma_frames)
    series = vol.data.reshape(-1, nt, order="F")
    mean = series.mean(axis=1, keepdims=True)
    filtered = series - series @ hat.T + mean
    return vol.with_data(filtered.reshape(vol.header.dims, order="F"))


# --------------------------------------------------------------------------
# interpolation and registration

def sample_trilinear(arr3d: np.ndarray, vox: np.ndarray) -> np.ndarray:
    """Trilinear samples of ``arr3d`` at voxel coordinates ``vox`` (3 x N); zero outside."""
    return ndimage.map_coordinates(arr3d, vox, order=1, mode="grid-constant", cval=0.0, prefilter=False)


def _grid_points(shape, stride=1) -> np.ndarray:
    axes = [np.arange(0, n, stride, dtype=np.float64) for n in shape]
    g = np.meshgrid(*axes, indexing="ij")
    return np.stack([a.ravel(order="F") for a in g])


def _center_world(header: NiftiHeader) -> np.ndarray:
    c = (np.asarray(header.shape3, dtype=np.float64) - 1.0) / 2.0
    return header.affine[:3, :3] @ c + header.affine[:3, 3]


def _ncc(a: np.ndarray, b: np.ndarray) -> float:
    a = a - a.mean()
    b = b - b.mean()
    den = math.sqrt(float(a @ a) * float(b @ b))
    if den == 0:
        return float("nan")
    return float(a @ b) / den


def ncc(a, b) -> float:
    """Normalised cross-correlation of two equally shaped arrays."""
    return _ncc(np.ravel(a).astype(np.float64), np.ravel(b).astype(np.float64))


class _Level:
    """Fixed-grid sample points and values for one pyramid level."""

    def __init__(self, fixed: np.ndarray, fixed_hdr: NiftiHeader, moving: np.ndarray, moving_hdr: NiftiHeader, smooth: float, stride: int):
        if smooth > 0:
            fixed = _smooth3d(fixed, [gaussian_kernel(smooth)] * 3)
            moving = _smooth3d(moving, [gaussian_kernel(smooth)] * 3)
        sub = fixed[::stride, ::stride, ::stride]
        # the fixed image's support plus a margin that keeps its edges in view
        support = np.abs(sub) >= 0.1 * np.abs(sub).mean()
        support = ndimage.binary_dilation(support, iterations=2)
        if support.sum() < 64:
            support[...] = True
        pts = np.stack([a.ravel(order="F") for a in np.nonzero(support)]).astype(np.float64) * stride
        vals = fixed[tuple(pts.astype(np.intp))]
        self.fixed_vals = vals
        self.world = fixed_hdr.affine[:3, :3] @ pts + fixed_hdr.affine[:3, 3:4]
        self.moving = moving
        self.moving_inv = np.linalg.inv(moving_hdr.affine)

    def score(self, m: np.ndarray) -> float:
        full = self.moving_inv @ m
        vox = full[:3, :3] @ self.world + full[:3, 3:4]
        return _ncc(self.fixed_vals, sample_trilinear(self.moving, vox))


def _coordinate_descent(objective, x0, steps, min_steps, max_sweeps=200):
    x = np.array(x0, dtype=np.float64)
    steps = np.array(steps, dtype=np.float64)
    best = objective(x)
    if not math.isfinite(best):
        raise OptimizerDiverged("objective is not finite at the starting point")
    for _ in range(max_sweeps):
        improved = False
        for i in range(x.size):
            for sign in (1.0, -1.0):
                cand = x.copy()
                cand[i] += sign * steps[i]
                val = objective(cand)
                if not math.isfinite(val):
                    continue
                if val > best:
                    x, best, improved = cand, val, True
                    break
        if not improved:
            if np.all(steps <= min_steps):
                break
            steps = np.maximum(steps / 2.0, min_steps)
    return x, best


_INITIAL_STEPS = {"rot": math.radians(2.0), "trans": 2.0, "scale": 0.05, "shear": 0.05}


def _initial_steps(n_params: int) -> np.ndarray:
    steps = [_INITIAL_STEPS["rot"]] * 3 + [_INITIAL_STEPS["trans"]] * 3
    if n_params == 12:
        steps += [_INITIAL_STEPS["scale"]] * 3 + [_INITIAL_STEPS["shear"]] * 3
    return np.array(steps)


def _optimise(fixed, fixed_hdr, moving, moving_hdr, x0, max_sweeps=200):
    """Two-level search: smoothed, strided grid first; full resolution second."""
    center = _center_world(fixed_hdr)
    steps = _initial_steps(len(x0))
    x = np.array(x0, dtype=np.float64)
    schedule = [(1.0, 2, steps, steps / 8.0), (0.0, 1, steps / 8.0, steps / 32.0)]
    for smooth, stride, first, last in schedule:
        level = _Level(fixed, fixed_hdr, moving, moving_hdr, smooth, stride)

        def objective(p, level=level):
            return level.score(_param_matrix(p, center))

        x, score = _coordinate_descent(objective, x, first, last, max_sweeps)
    if not math.isfinite(score) or score < level.score(_param_matrix(np.array(x0, dtype=np.float64), center)):
        raise OptimizerDiverged("registration finished worse than it started")
    return x, score, center


def _identity_params(n: int) -> np.ndarray:
    p = np.zeros(n)
    if n == 12:
        p[6:9] = 1.0
    return p


def _apply_sampling(arr3d, target_hdr: NiftiHeader, source_hdr: NiftiHeader, sampling: np.ndarray) -> np.ndarray:
    """Resample ``arr3d`` onto ``target_hdr``'s grid through a target-world -> source-world map."""
    pts = _grid_points(target_hdr.shape3)
    full = np.linalg.inv(source_hdr.affine) @ sampling @ target_hdr.affine
    vox = full[:3, :3] @ pts + full[:3, 3:4]
    return sample_trilinear(arr3d, vox).reshape(target_hdr.shape3, order="F")


def motion_correct(vol: Volume4D, ref_index: int = 0, threads: int = 1) -> tuple[Volume4D, list[RigidTransform]]:
    nt = vol.nt
    if not 0 <= ref_index < nt:
        raise IndexError(f"ref_index {ref_index} outside 0..{nt - 1}")
    hdr = vol.header
    ref = np.ascontiguousarray(vol.frame(ref_index))

    def align(t):
        if t == ref_index:
            return RigidTransform(), vol.frame(t)
        frame = np.ascontiguousarray(vol.frame(t))
        p, _, center = _optimise(ref, hdr, frame, hdr, np.zeros(6))
        xfm = RigidTransform.from_params(p)
        return xfm, _apply_sampling(frame, hdr, hdr, _param_matrix(p, center))

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            results = list(pool.map(align, range(nt)))
    else:
        results = [align(t) for t in range(nt)]
    data = np.stack([r[1] for r in results], axis=-1)
    return vol.with_data(data), [r[0] for r in results]


def _centroid_world(arr, hdr) -> np.ndarray:
    w = np.abs(arr)
    total = w.sum()
    idx = np.indices(arr.shape).reshape(3, -1)
    c = (idx * w.reshape(-1)).sum(axis=1) / total
    return hdr.affine[:3, :3] @ c + hdr.affine[:3, 3]


def register_affine(moving: Volume3D, fixed: Volume3D, dof: int = 12) -> AffineTransform:
    """Affine map (moving world -> fixed world) maximising NCC on the fixed grid."""
    if dof not in (6, 12):
        raise ValueError(f"dof must be 6 or 12, got {dof}")
    mov = np.ascontiguousarray(moving.data[..., 0])
    fix = np.ascontiguousarray(fixed.data[..., 0])
    if np.ptp(mov) == 0 or np.ptp(fix) == 0:
        raise DegenerateInput("cannot register a constant image")
    x0 = _identity_params(dof)
    x0[3:6] = _centroid_world(mov, moving.header) - _centroid_world(fix, fixed.header)
    p, _, center = _optimise(fix, fixed.header, mov, moving.header, x0)
    sampling = _param_matrix(p, center)
    return AffineTransform(sampling).inverse()


def registration_score(moving: Volume3D, fixed: Volume3D, xfm: AffineTransform) -> float:
    """NCC between ``fixed`` and ``moving`` resampled through ``xfm`` onto the fixed grid."""
    res = resample_to_grid(moving, xfm, fixed.header)
    return ncc(res.data, fixed.data)


def resample_to_grid(vol: Volume4D, xfm: AffineTransform, target: NiftiHeader) -> Volume4D:
    sampling = _safe_inv(xfm.matrix)
    frames = [_apply_sampling(np.ascontiguousarray(vol.frame(t)), target, vol.header, sampling) for t in range(vol.nt)]
    hdr = NiftiHeader(
        dims=(*target.shape3, vol.nt),
        voxel_size_mm=target.voxel_size_mm,
        tr_s=vol.header.tr_s,
        affine=target.affine,
        affine_source=target.affine_source,
    )
    return Volume4D(hdr, np.stack(frames, axis=-1))


def write_motion_table(path, transforms: list[RigidTransform]) -> None:
    """One row per frame: rotations (rad) x, y, z then translations (mm) x, y, z."""
    rows = np.array([t.params for t in transforms]).reshape(-1, 6)
    np.savetxt(path, rows, fmt="%.10e")


def read_motion_table(path) -> list[RigidTransform]:
    rows = np.atleast_2d(np.loadtxt(path))
    return [RigidTransform.from_params(r) for r in rows]
