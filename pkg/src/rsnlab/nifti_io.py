"""Minimal NIfTI-1 single-file reader/writer.

Only the ``n+1`` single-file flavour is handled, optionally inside a gzip
container. Volumes are held in memory as float64 arrays of shape
``(nx, ny, nz, nt)`` in Fortran order, so the underlying buffer is x-fastest
exactly like the on-disk layout.
"""
from __future__ import annotations

import gzip
import io
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import RsnError

HEADER_SIZE = 348
DATA_OFFSET = 352

header_dtd = [
    ("sizeof_hdr", "i4"),
    ("data_type", "S10"),
    ("db_name", "S18"),
    ("extents", "i4"),
    ("session_error", "i2"),
    ("regular", "S1"),
    ("dim_info", "u1"),
    ("dim", "i2", (8,)),
    ("intent_p1", "f4"),
    ("intent_p2", "f4"),
    ("intent_p3", "f4"),
    ("intent_code", "i2"),
    ("datatype", "i2"),
    ("bitpix", "i2"),
    ("slice_start", "i2"),
    ("pixdim", "f4", (8,)),
    ("vox_offset", "f4"),
    ("scl_slope", "f4"),
    ("scl_inter", "f4"),
    ("slice_end", "i2"),
    ("slice_code", "u1"),
    ("xyzt_units", "u1"),
    ("cal_max", "f4"),
    ("cal_min", "f4"),
    ("slice_duration", "f4"),
    ("toffset", "f4"),
    ("glmax", "i4"),
    ("glmin", "i4"),
    ("descrip", "S80"),
    ("aux_file", "S24"),
    ("qform_code", "i2"),
    ("sform_code", "i2"),
    ("quatern_b", "f4"),
    ("quatern_c", "f4"),
    ("quatern_d", "f4"),
    ("qoffset_x", "f4"),
    ("qoffset_y", "f4"),
    ("qoffset_z", "f4"),
    ("srow_x", "f4", (4,)),
    ("srow_y", "f4", (4,)),
    ("srow_z", "f4", (4,)),
    ("intent_name", "S16"),
    ("magic", "S4"),
]
header_dtype = np.dtype(header_dtd)
assert header_dtype.itemsize == HEADER_SIZE

# NIfTI datatype code -> numpy base type
DATATYPES = {
    2: np.dtype(np.uint8),
    4: np.dtype(np.int16),
    8: np.dtype(np.int32),
    16: np.dtype(np.float32),
    64: np.dtype(np.float64),
}
CODES = {dt: code for code, dt in DATATYPES.items()}

_SPACE_UNIT_TO_MM = {0: 1.0, 1: 1000.0, 2: 1.0, 3: 1e-3}
_TIME_UNIT_TO_S = {0: 1.0, 8: 1.0, 16: 1e-3, 24: 1e-6}


class NiftiError(RsnError):
    pass


class MalformedHeader(NiftiError):
    pass


class UnsupportedDatatype(NiftiError):
    pass


class TruncatedData(NiftiError):
    pass


class NonFiniteData(NiftiError):
    pass


class InvalidHeader(NiftiError):
    pass


def _diag_affine(voxel_size_mm):
    return np.diag([*map(float, voxel_size_mm), 1.0])


@dataclass(frozen=True)
class NiftiHeader:
    dims: tuple[int, int, int, int]
    voxel_size_mm: tuple[float, float, float]
    tr_s: float = 0.0
    datatype_code: int = 16
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    affine: np.ndarray = field(default=None, compare=False)
    affine_source: str = "pixdim"

    def __post_init__(self):
        object.__setattr__(self, "dims", tuple(int(d) for d in self.dims))
        object.__setattr__(self, "voxel_size_mm", tuple(float(v) for v in self.voxel_size_mm))
        aff = _diag_affine(self.voxel_size_mm) if self.affine is None else self.affine
        aff = np.array(aff, dtype=np.float64)
        aff.flags.writeable = False
        object.__setattr__(self, "affine", aff)
        if self.scl_slope == 0:
            object.__setattr__(self, "scl_slope", 1.0)

    @property
    def shape3(self) -> tuple[int, int, int]:
        return self.dims[:3]

    @property
    def n_voxels(self) -> int:
        nx, ny, nz = self.dims[:3]
        return nx * ny * nz

    def with_frames(self, nt: int) -> "NiftiHeader":
        return NiftiHeader(
            dims=(*self.dims[:3], nt),
            voxel_size_mm=self.voxel_size_mm,
            tr_s=self.tr_s,
            datatype_code=self.datatype_code,
            affine=self.affine,
            affine_source=self.affine_source,
        )

    def same_grid(self, other: "NiftiHeader", atol: float = 1e-4) -> bool:
        return self.dims[:3] == other.dims[:3] and np.allclose(self.affine, other.affine, atol=atol)

    def __eq__(self, other):
        if not isinstance(other, NiftiHeader):
            return NotImplemented
        return (
            self.dims == other.dims
            and self.voxel_size_mm == other.voxel_size_mm
            and self.tr_s == other.tr_s
            and self.datatype_code == other.datatype_code
            and self.scl_slope == other.scl_slope
            and self.scl_inter == other.scl_inter
            and np.array_equal(self.affine, other.affine)
        )


def validate_header(h: NiftiHeader) -> list[str]:
    """Return one message per violated invariant; each message starts with the field name."""
    problems = []
    if len(h.dims) != 4 or any(d < 1 for d in h.dims):
        problems.append(f"dims: all four dimensions must be >= 1, got {h.dims}")
    if len(h.voxel_size_mm) != 3 or not all(math.isfinite(v) and v > 0 for v in h.voxel_size_mm):
        problems.append(f"voxel_size_mm: must be three positive values, got {h.voxel_size_mm}")
    aff = np.asarray(h.affine)
    if aff.shape != (4, 4) or not np.all(np.isfinite(aff)):
        problems.append("affine: must be a finite 4x4 matrix")
    elif not np.array_equal(aff[3], [0.0, 0.0, 0.0, 1.0]):
        problems.append(f"affine: last row must be (0,0,0,1), got {tuple(aff[3])}")
    if h.datatype_code not in DATATYPES:
        problems.append(f"datatype_code: unsupported code {h.datatype_code}")
    if not (math.isfinite(h.scl_slope) and math.isfinite(h.scl_inter)):
        problems.append("scl_slope: slope and intercept must be finite")
    if not (math.isfinite(h.tr_s) and h.tr_s >= 0):
        problems.append(f"tr_s: must be finite and non-negative, got {h.tr_s}")
    return problems


@dataclass(frozen=True, eq=False)
class Volume4D:
    """Scalar field indexed (x, y, z, t); ``data`` is float64, Fortran ordered."""

    header: NiftiHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        data = np.asfortranarray(data)
        if data.shape != self.header.dims:
            raise InvalidHeader(f"data shape {data.shape} does not match header dims {self.header.dims}")
        data.flags.writeable = False
        object.__setattr__(self, "data", data)

    @property
    def nt(self) -> int:
        return self.header.dims[3]

    def frame(self, t: int) -> np.ndarray:
        return self.data[..., t]

    def with_data(self, data: np.ndarray, **header_changes) -> "Volume4D":
        data = np.asarray(data)
        if data.ndim == 3:
            data = data[..., np.newaxis]
        hdr = self.header.with_frames(data.shape[3])
        if header_changes:
            hdr = NiftiHeader(**{**_header_kwargs(hdr), **header_changes})
        return Volume4D(hdr, data)

    def __eq__(self, other):
        if not isinstance(other, Volume4D):
            return NotImplemented
        return self.header == other.header and np.array_equal(self.data, other.data)


class Volume3D(Volume4D):
    """A Volume4D whose time dimension is exactly one frame."""

    def __post_init__(self):
        super().__post_init__()
        if self.header.dims[3] != 1:
            raise InvalidHeader(f"Volume3D needs nt == 1, got {self.header.dims[3]}")

    @property
    def array(self) -> np.ndarray:
        return self.data[..., 0]


def _header_kwargs(h: NiftiHeader) -> dict:
    return dict(
        dims=h.dims,
        voxel_size_mm=h.voxel_size_mm,
        tr_s=h.tr_s,
        datatype_code=h.datatype_code,
        scl_slope=h.scl_slope,
        scl_inter=h.scl_inter,
        affine=h.affine,
        affine_source=h.affine_source,
    )


def make_volume(data, voxel_size_mm=(1.0, 1.0, 1.0), tr_s=0.0, affine=None) -> Volume4D:
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 3:
        data = data[..., np.newaxis]
    hdr = NiftiHeader(dims=data.shape, voxel_size_mm=voxel_size_mm, tr_s=tr_s, affine=affine)
    return Volume4D(hdr, data)


def as_volume3d(vol: Volume4D) -> Volume3D:
    return Volume3D(vol.header, vol.data)


# --------------------------------------------------------------------------
# reading

def _quaternion_affine(hdr, pixdim) -> np.ndarray:
    b, c, d = (float(hdr[k]) for k in ("quatern_b", "quatern_c", "quatern_d"))
    a2 = 1.0 - (b * b + c * c + d * d)
    if a2 < 1e-7:
        norm = math.sqrt(b * b + c * c + d * d)
        if not math.isfinite(norm) or norm == 0:
            raise MalformedHeader("quatern_b/c/d: not a valid rotation")
        b, c, d = b / norm, c / norm, d / norm
        a = 0.0
    else:
        a = math.sqrt(a2)
    rot = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - c * c - b * b],
        ]
    )
    qfac = -1.0 if pixdim[0] < 0 else 1.0
    aff = np.eye(4)
    aff[:3, :3] = rot @ np.diag([pixdim[1], pixdim[2], qfac * pixdim[3]])
    aff[:3, 3] = [float(hdr["qoffset_x"]), float(hdr["qoffset_y"]), float(hdr["qoffset_z"])]
    return aff


def _read_bytes(path) -> bytes:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[:2] == b"\x1f\x8b":
        try:
            raw = gzip.decompress(raw)
        except (OSError, EOFError, ValueError) as exc:
            raise TruncatedData(f"{path}: corrupt gzip stream ({exc})") from exc
    return raw


def parse_header(raw: bytes) -> tuple[NiftiHeader, np.dtype, int]:
    """Decode the 348-byte header; returns header, on-disk dtype and data offset."""
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"sizeof_hdr: file holds only {len(raw)} bytes")
    hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype.newbyteorder("<"))[0]
    order = "<"
    if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
        hdr = np.frombuffer(raw[:HEADER_SIZE], dtype=header_dtype.newbyteorder(">"))[0]
        order = ">"
        if int(hdr["sizeof_hdr"]) != HEADER_SIZE:
            raise MalformedHeader("sizeof_hdr: must be 348 in either byte order")
    if bytes(hdr["magic"]) != b"n+1":
        # numpy strips trailing NULs from S4
        raise MalformedHeader(f"magic: expected 'n+1\\0', got {bytes(hdr['magic'])!r}")

    dim = [int(v) for v in hdr["dim"]]
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"dim: dim[0] must be in 1..7, got {ndim}")
    shape = dim[1 : ndim + 1]
    if any(n < 1 for n in shape):
        raise MalformedHeader(f"dim: non-positive extent in {shape}")
    if any(n != 1 for n in shape[4:]):
        raise MalformedHeader(f"dim: more than four non-singleton dimensions {shape}")
    dims = tuple((shape + [1, 1, 1, 1])[:4])

    code = int(hdr["datatype"])
    if code not in DATATYPES:
        raise UnsupportedDatatype(f"datatype: code {code} is not supported")
    disk_dtype = DATATYPES[code].newbyteorder(order)
    if int(hdr["bitpix"]) != disk_dtype.itemsize * 8:
        raise MalformedHeader(f"bitpix: {int(hdr['bitpix'])} inconsistent with datatype {code}")

    units = int(hdr["xyzt_units"])
    space_scale = _SPACE_UNIT_TO_MM.get(units & 0x07, 1.0)
    time_scale = _TIME_UNIT_TO_S.get(units & 0x38, 1.0)

    pixdim = [float(v) for v in hdr["pixdim"]]
    if not all(math.isfinite(v) for v in pixdim[:5]):
        raise MalformedHeader("pixdim: non-finite value")
    voxel = tuple(abs(v) * space_scale for v in pixdim[1:4])
    if any(v == 0 for v in voxel):
        raise MalformedHeader(f"pixdim: zero voxel size {voxel}")
    tr = abs(pixdim[4]) * time_scale

    vox_offset = float(hdr["vox_offset"])
    if not math.isfinite(vox_offset) or vox_offset < DATA_OFFSET or vox_offset > len(raw):
        raise MalformedHeader(f"vox_offset: {vox_offset} outside the file")
    offset = int(vox_offset)

    sform_code = int(hdr["sform_code"])
    qform_code = int(hdr["qform_code"])
    if sform_code > 0:
        aff = np.eye(4)
        aff[0], aff[1], aff[2] = hdr["srow_x"], hdr["srow_y"], hdr["srow_z"]
        aff[:3] *= space_scale
        source = "sform"
    elif qform_code > 0:
        scaled = [pixdim[0], *voxel, pixdim[4]]
        aff = _quaternion_affine(hdr, scaled)
        aff[:3, 3] *= space_scale
        source = "qform"
    else:
        aff = _diag_affine(voxel)
        source = "pixdim"
    if not np.all(np.isfinite(aff)):
        raise MalformedHeader(f"affine: non-finite entries in {source}")

    slope, inter = float(hdr["scl_slope"]), float(hdr["scl_inter"])
    if not math.isfinite(slope) or slope == 0:
        slope, inter = 1.0, 0.0
    if not math.isfinite(inter):
        inter = 0.0

    header = NiftiHeader(
        dims=dims,
        voxel_size_mm=voxel,
        tr_s=tr,
        datatype_code=code,
        scl_slope=slope,
        scl_inter=inter,
        affine=aff,
        affine_source=source,
    )
    return header, disk_dtype, offset


def read_nifti(path) -> Volume4D:
    raw = _read_bytes(path)
    header, disk_dtype, offset = parse_header(raw)
    count = math.prod(header.dims)
    nbytes = count * disk_dtype.itemsize
    if len(raw) - offset < nbytes:
        raise TruncatedData(f"{path}: need {nbytes} data bytes, file has {len(raw) - offset}")
    values = np.frombuffer(raw, dtype=disk_dtype, count=count, offset=offset)
    with np.errstate(over="ignore", invalid="ignore"):
        data = values.astype(np.float64)
        if header.scl_slope != 1.0 or header.scl_inter != 0.0:
            data = data * header.scl_slope + header.scl_inter
    if not np.all(np.isfinite(data)):
        raise NonFiniteData(f"{path}: data holds NaN or Inf after rescaling")
    return Volume4D(header, data.reshape(header.dims, order="F"))


# --------------------------------------------------------------------------
# writing

def encode(vol: Volume4D, dtype=np.float32) -> bytes:
    """Serialize to single-file NIfTI-1 bytes (little-endian, slope 1, intercept 0)."""
    h = vol.header
    problems = validate_header(h)
    if problems:
        raise InvalidHeader("; ".join(problems))
    dtype = np.dtype(dtype)
    if dtype not in CODES:
        raise UnsupportedDatatype(f"cannot write dtype {dtype}")
    data = vol.data
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if np.any(data != np.round(data)) or data.min() < info.min or data.max() > info.max:
            raise ValueError(f"values are not exactly representable as {dtype}")

    hdr = np.zeros((), dtype=header_dtype.newbyteorder("<"))
    nt = h.dims[3]
    hdr["sizeof_hdr"] = HEADER_SIZE
    hdr["dim"] = [4 if nt > 1 else 3, *h.dims, 1, 1, 1]
    hdr["datatype"] = CODES[dtype]
    hdr["bitpix"] = dtype.itemsize * 8
    hdr["pixdim"] = [1.0, *h.voxel_size_mm, h.tr_s, 0.0, 0.0, 0.0]
    hdr["vox_offset"] = DATA_OFFSET
    hdr["scl_slope"] = 1.0
    hdr["scl_inter"] = 0.0
    hdr["xyzt_units"] = 2 | 8  # mm, s
    hdr["sform_code"] = 2
    hdr["srow_x"], hdr["srow_y"], hdr["srow_z"] = h.affine[0], h.affine[1], h.affine[2]
    hdr["magic"] = b"n+1\x00"

    buf = io.BytesIO()
    buf.write(hdr.tobytes())
    buf.write(b"\x00\x00\x00\x00")
    buf.write(data.astype(dtype.newbyteorder("<")).tobytes(order="F"))
    return buf.getvalue()


def write_nifti(vol: Volume4D, path, gzip_output: bool | None = None, dtype=np.float32, compresslevel: int = 6) -> None:
    """Write ``vol``; gzip defaults to on when the path ends in ``.gz``.

    The gzip member carries no file name and a zero mtime so identical volumes
    always produce identical bytes.
    """
    path = Path(path)
    if gzip_output is None:
        gzip_output = path.suffix == ".gz"
    payload = encode(vol, dtype)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        if gzip_output:
            with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0, compresslevel=compresslevel) as gz:
                gz.write(payload)
        else:
            f.write(payload)
    os.replace(tmp, path)
