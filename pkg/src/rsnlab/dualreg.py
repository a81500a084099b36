"""Two-stage dual regression of group maps onto single-subject data."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import solve_triangular

from .errors import GridMismatch, RsnError
from .ica import BrainMask, IcaResult
from .nifti_io import NiftiHeader, Volume4D, make_volume, write_nifti


class DualRegressionError(RsnError):
    pass


class RankDeficientMaps(DualRegressionError):
    pass


class RankDeficientTimecourses(DualRegressionError):
    pass


@dataclass
class SubjectComponents:
    subject_id: str
    timecourses: np.ndarray  # T x K
    maps: np.ndarray  # K x V
    grid: NiftiHeader


def lstsq_qr(design: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Least-squares coefficients for ``design @ beta ~= y`` via Householder QR."""
    q, r = np.linalg.qr(design, mode="reduced")
    return solve_triangular(r, q.T @ y, lower=False)


def stage1_spatial_regress(group_maps: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Regress each timepoint (row of T x V ``y``) onto the K maps; returns T x K."""
    maps = np.atleast_2d(np.asarray(group_maps, dtype=np.float64))
    y = np.atleast_2d(np.asarray(y, dtype=np.float64))
    if maps.shape[1] != y.shape[1]:
        raise GridMismatch(f"maps have {maps.shape[1]} voxels, data has {y.shape[1]}")
    design = (maps - maps.mean(axis=1, keepdims=True)).T
    gram = design.T @ design
    if not np.isfinite(gram).all() or np.linalg.cond(gram) >= 1e8:
        raise RankDeficientMaps("group maps are (nearly) linearly dependent")
    yc = y - y.mean(axis=1, keepdims=True)
    return lstsq_qr(design, yc.T).T


def stage2_temporal_regress(timecourses: np.ndarray, y: np.ndarray, variance_normalize: bool = True) -> np.ndarray:
    """Regress each voxel time series onto the K time courses; returns K x V."""
    tc = np.asarray(timecourses, dtype=np.float64)
    if tc.ndim == 1:
        tc = tc[:, None]
    y = np.asarray(y, dtype=np.float64)
    if tc.shape[0] != y.shape[0]:
        raise DualRegressionError(f"time courses have {tc.shape[0]} rows, data has {y.shape[0]}")
    design = tc - tc.mean(axis=0)
    sd = design.std(axis=0)
    if np.any(sd < 1e-12) or np.linalg.matrix_rank(design) < design.shape[1]:
        raise RankDeficientTimecourses("time courses are not full column rank")
    if variance_normalize:
        design = design / sd
    yc = y - y.mean(axis=0)
    return lstsq_qr(design, yc)


def dual_regress(group: IcaResult, subject: Volume4D, mask: BrainMask, subject_id: str = "sub", variance_normalize: bool = True) -> SubjectComponents:
    if not subject.header.same_grid(mask.header):
        raise GridMismatch(f"{subject_id} is not on the group grid")
    y = mask.extract(subject)
    tcs = stage1_spatial_regress(group.spatial_maps, y)
    maps = stage2_temporal_regress(tcs, y, variance_normalize)
    return SubjectComponents(subject_id, tcs, maps, mask.header)


def map_volumes(comp: SubjectComponents, mask: BrainMask) -> np.ndarray:
    """Stage-2 maps as a (nx, ny, nz, K) array on the group grid."""
    return mask.unmask(comp.maps)


def save_subject(comp: SubjectComponents, mask: BrainMask, maps_path, tc_path) -> None:
    arr = map_volumes(comp, mask)
    write_nifti(make_volume(arr, mask.header.voxel_size_mm, affine=mask.header.affine), maps_path)
    np.savetxt(tc_path, comp.timecourses, fmt="%.10e")
