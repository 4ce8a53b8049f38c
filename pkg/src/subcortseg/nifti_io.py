"""Reading and writing single-file NIfTI-1 volumes.

Only the subset of the format used by the pipeline is supported: uncompressed
``.nii`` files holding unsigned 8-bit, signed 16-bit or 32-bit float data.
Orientation fields (qform/sform) are carried through unchanged but never
interpreted; image, labels and atlas are assumed to share one voxel grid.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence, Union

import numpy as np

from .errors import (
    InvalidVolume,
    IoFailure,
    MalformedHeader,
    TruncatedData,
    UnsupportedDatatype,
    WrongChannelCount,
)

PathLike = Union[str, os.PathLike]

HEADER_SIZE = 348
DATA_OFFSET = 352
MAGIC = b"n+1\x00"

DT_UINT8 = 2
DT_INT16 = 4
DT_FLOAT32 = 16

# datatype code -> (numpy dtype without byte order, bitpix)
_DTYPES = {
    DT_UINT8: (np.dtype("u1"), 8),
    DT_INT16: (np.dtype("i2"), 16),
    DT_FLOAT32: (np.dtype("f4"), 32),
}

N_CLASSES = 15
CLASS_NAMES = (
    "Background",
    "Tha.L", "Tha.R",
    "Cau.L", "Cau.R",
    "Put.L", "Put.R",
    "Pal.L", "Pal.R",
    "Hip.L", "Hip.R",
    "Amy.L", "Amy.R",
    "Acc.L", "Acc.R",
)


@dataclass(frozen=True)
class Orientation:
    """qform/sform block, preserved verbatim."""

    qfac: float = 1.0
    xyzt_units: int = 2  # millimetres
    qform_code: int = 0
    sform_code: int = 0
    quatern: tuple = (0.0, 0.0, 0.0)
    qoffset: tuple = (0.0, 0.0, 0.0)
    srow: tuple = (0.0,) * 12


@dataclass(frozen=True)
class VolumeHeader:
    dims: tuple
    pixdim: tuple
    datatype_code: int = DT_FLOAT32
    vox_offset: float = float(DATA_OFFSET)
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    description: str = ""
    orientation: Orientation = field(default_factory=Orientation)

    def __post_init__(self):
        if not 1 <= len(self.dims) <= 7:
            raise MalformedHeader(f"dimension count {len(self.dims)} outside 1..7")
        if len(self.pixdim) != len(self.dims):
            raise MalformedHeader("pixdim and dims lengths differ")
        if any(int(d) < 1 for d in self.dims):
            raise MalformedHeader(f"non-positive extent in dims {self.dims}")
        if any(not p > 0 for p in self.pixdim[:3]):
            raise MalformedHeader(f"non-positive spatial voxel spacing {self.pixdim[:3]}")
        if self.datatype_code not in _DTYPES:
            raise UnsupportedDatatype(f"datatype code {self.datatype_code} not supported")
        if self.vox_offset < DATA_OFFSET:
            raise MalformedHeader(f"vox_offset {self.vox_offset} < {DATA_OFFSET}")
        if len(self.description.encode("latin-1", "replace")) > 80:
            raise MalformedHeader("description longer than 80 bytes")

    @classmethod
    def create(cls, shape: Sequence[int], spacing: Sequence[float] = (1.0, 1.0, 1.0),
               datatype_code: int = DT_FLOAT32, description: str = "") -> "VolumeHeader":
        shape = tuple(int(s) for s in shape)
        pixdim = tuple(float(s) for s in spacing)[:3]
        pixdim = pixdim + (1.0,) * (len(shape) - len(pixdim))
        return cls(dims=shape, pixdim=pixdim[: len(shape)],
                   datatype_code=datatype_code, description=description)

    @property
    def spacing(self) -> tuple:
        return tuple(self.pixdim[:3])


def _readonly(data: np.ndarray) -> np.ndarray:
    data.flags.writeable = False
    return data


def _grid_header(header, shape, datatype_code):
    if header is None:
        return VolumeHeader.create(shape, datatype_code=datatype_code)
    if tuple(header.dims) != tuple(shape):
        raise InvalidVolume(f"data shape {shape} does not match header dims {header.dims}")
    return header


@dataclass(frozen=True, eq=False)
class ScalarVolume:
    """3D intensity image indexed (x, y, z)."""

    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float64)
        if data.ndim != 3:
            raise InvalidVolume(f"scalar volume must be 3D, got shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidVolume("scalar volume contains non-finite values")
        object.__setattr__(self, "header", _grid_header(self.header, data.shape, DT_FLOAT32))
        object.__setattr__(self, "data", _readonly(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), header=None):
        data = np.asarray(data)
        if header is None:
            header = VolumeHeader.create(data.shape, spacing, DT_FLOAT32)
        return cls(header, data)

    @property
    def spacing(self) -> tuple:
        return self.header.spacing

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class LabelVolume:
    """3D map of class indices 0..14 (0 is background)."""

    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        raw = np.asarray(self.data)
        if raw.ndim != 3:
            raise InvalidVolume(f"label volume must be 3D, got shape {raw.shape}")
        if raw.dtype.kind == "f":
            if not np.all(np.isfinite(raw)) or np.any(raw != np.round(raw)):
                raise InvalidVolume("label volume contains non-integer values")
        if raw.size and (raw.min() < 0 or raw.max() >= N_CLASSES):
            raise InvalidVolume(f"label values must lie in 0..{N_CLASSES - 1}")
        data = raw.astype(np.uint8)
        object.__setattr__(self, "header", _grid_header(self.header, data.shape, DT_UINT8))
        object.__setattr__(self, "data", _readonly(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), header=None):
        data = np.asarray(data)
        if header is None:
            header = VolumeHeader.create(data.shape, spacing, DT_UINT8)
        return cls(header, data)

    @property
    def spacing(self) -> tuple:
        return self.header.spacing

    @property
    def shape(self) -> tuple:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class AtlasVolume:
    """Per-voxel class probabilities, shape (x, y, z, 15), channel c = class c."""

    header: VolumeHeader
    data: np.ndarray

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32)
        if data.ndim != 4 or data.shape[3] != N_CLASSES:
            raise WrongChannelCount(f"atlas data must have shape (x, y, z, 15), got {data.shape}")
        if not np.all(np.isfinite(data)):
            raise InvalidVolume("atlas contains non-finite values")
        object.__setattr__(self, "header", _grid_header(self.header, data.shape, DT_FLOAT32))
        object.__setattr__(self, "data", _readonly(data))

    @classmethod
    def from_array(cls, data, spacing=(1.0, 1.0, 1.0), header=None):
        data = np.asarray(data)
        if header is None:
            header = VolumeHeader.create(data.shape, spacing, DT_FLOAT32)
        return cls(header, data)

    @property
    def spacing(self) -> tuple:
        return self.header.spacing

    @property
    def shape(self) -> tuple:
        return self.data.shape[:3]


# ---------------------------------------------------------------------------
# header codec


def _detect_endian(raw: bytes) -> str:
    for endian in "<>":
        if struct.unpack_from(endian + "i", raw, 0)[0] == HEADER_SIZE:
            return endian
    raise MalformedHeader("sizeof_hdr is not 348 in either byte order")


def parse_header(raw: bytes) -> tuple:
    """Decode a 348-byte header. Returns ``(VolumeHeader, endian)``."""
    if len(raw) < HEADER_SIZE:
        raise MalformedHeader(f"header too short ({len(raw)} bytes)")
    e = _detect_endian(raw)
    if raw[344:348] != MAGIC:
        raise MalformedHeader(f"bad magic {raw[344:348]!r}; only single-file NIfTI-1 is supported")

    dim = struct.unpack_from(e + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise MalformedHeader(f"dim[0]={ndim} outside 1..7")
    datatype = struct.unpack_from(e + "h", raw, 70)[0]
    if datatype not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {datatype} not supported")
    pixdim = struct.unpack_from(e + "8f", raw, 76)
    vox_offset, scl_slope, scl_inter = struct.unpack_from(e + "3f", raw, 108)
    xyzt_units = raw[123]
    descrip = raw[148:228].split(b"\x00", 1)[0].decode("latin-1")
    qform_code, sform_code = struct.unpack_from(e + "2h", raw, 252)
    quatern = struct.unpack_from(e + "3f", raw, 256)
    qoffset = struct.unpack_from(e + "3f", raw, 268)
    srow = struct.unpack_from(e + "12f", raw, 280)

    orientation = Orientation(
        qfac=pixdim[0] if pixdim[0] in (-1.0, 1.0) else 1.0,
        xyzt_units=xyzt_units,
        qform_code=qform_code,
        sform_code=sform_code,
        quatern=quatern,
        qoffset=qoffset,
        srow=srow,
    )
    header = VolumeHeader(
        dims=tuple(int(d) for d in dim[1: ndim + 1]),
        pixdim=tuple(float(p) for p in pixdim[1: ndim + 1]),
        datatype_code=datatype,
        vox_offset=float(vox_offset),
        scl_slope=float(scl_slope),
        scl_inter=float(scl_inter),
        description=descrip,
        orientation=orientation,
    )
    return header, e


def encode_header(header: VolumeHeader) -> bytes:
    """Little-endian header plus the 4-byte empty extension block (352 bytes)."""
    buf = bytearray(DATA_OFFSET)
    ndim = len(header.dims)
    dim = [ndim] + list(header.dims) + [1] * (7 - ndim)
    o = header.orientation
    pixdim = [o.qfac] + list(header.pixdim) + [0.0] * (7 - ndim)
    struct.pack_into("<i", buf, 0, HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, *dim)
    struct.pack_into("<2h", buf, 70, header.datatype_code, _DTYPES[header.datatype_code][1])
    struct.pack_into("<8f", buf, 76, *pixdim)
    struct.pack_into("<3f", buf, 108, float(DATA_OFFSET), 1.0, 0.0)
    buf[123] = o.xyzt_units & 0xFF
    descrip = header.description.encode("latin-1", "replace")[:80]
    buf[148: 148 + len(descrip)] = descrip
    struct.pack_into("<2h", buf, 252, o.qform_code, o.sform_code)
    struct.pack_into("<3f", buf, 256, *o.quatern)
    struct.pack_into("<3f", buf, 268, *o.qoffset)
    struct.pack_into("<12f", buf, 280, *o.srow)
    buf[344:348] = MAGIC
    return bytes(buf)


# ---------------------------------------------------------------------------
# file level


def _read_raw(path: PathLike):
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    header, endian = parse_header(blob[:HEADER_SIZE])
    dtype, _ = _DTYPES[header.datatype_code]
    count = int(np.prod(header.dims))
    start = int(header.vox_offset)
    nbytes = count * dtype.itemsize
    if len(blob) < start + nbytes:
        raise TruncatedData(
            f"{path}: expected {nbytes} data bytes at offset {start}, found {max(len(blob) - start, 0)}"
        )
    raw = np.frombuffer(blob, dtype=dtype.newbyteorder(endian), count=count, offset=start)
    data = raw.reshape(header.dims, order="F").astype(np.float64)
    if header.scl_slope != 0 and (header.scl_slope != 1.0 or header.scl_inter != 0.0):
        data = data * header.scl_slope + header.scl_inter
    return header, data


def read_volume(path: PathLike) -> ScalarVolume:
    """Read a 3D image; intensity scaling is applied when ``scl_slope != 0``."""
    header, data = _read_raw(path)
    data = _squeeze_to(data, 3, path)
    header = replace(header, dims=data.shape, pixdim=header.pixdim[:3])
    return ScalarVolume(header, data)


def read_labels(path: PathLike) -> LabelVolume:
    """Read a 3D label map with values in 0..14."""
    header, data = _read_raw(path)
    data = _squeeze_to(data, 3, path)
    header = replace(header, dims=data.shape, pixdim=header.pixdim[:3], datatype_code=DT_UINT8)
    try:
        return LabelVolume(header, data)
    except InvalidVolume as exc:
        raise InvalidVolume(f"{path}: {exc}") from exc


def _squeeze_to(data, ndim, path):
    while data.ndim > ndim and data.shape[-1] == 1:
        data = data[..., 0]
    if data.ndim != ndim:
        raise MalformedHeader(f"{path}: expected a {ndim}D volume, got shape {data.shape}")
    return data


def normalize_priors(channels: np.ndarray) -> np.ndarray:
    """Turn 14 or 15 raw atlas channels (last axis) into normalized 15-vectors.

    With 14 channels, background is synthesized as ``max(0, 1 - sum)``.
    Negative inputs are clipped to zero; voxels whose vector sums to zero
    become pure background.
    """
    channels = np.clip(np.asarray(channels, dtype=np.float64), 0.0, None)
    n = channels.shape[-1]
    if n == N_CLASSES - 1:
        background = np.maximum(0.0, 1.0 - channels.sum(axis=-1, keepdims=True))
        channels = np.concatenate([background, channels], axis=-1)
    elif n != N_CLASSES:
        raise WrongChannelCount(f"atlas has {n} channels; expected 14 or 15")
    total = channels.sum(axis=-1, keepdims=True)
    empty = total[..., 0] <= 0
    if np.any(empty):
        channels[empty] = 0.0
        channels[empty, 0] = 1.0
        total[empty] = 1.0
    return channels / total


def read_atlas(path: PathLike) -> AtlasVolume:
    header, data = _read_raw(path)
    if data.ndim != 4:
        raise WrongChannelCount(f"{path}: atlas must be 4D, got shape {data.shape}")
    if data.shape[3] not in (N_CLASSES - 1, N_CLASSES):
        raise WrongChannelCount(f"{path}: 4th extent {data.shape[3]} not in (14, 15)")
    probs = normalize_priors(data).astype(np.float32)
    header = replace(header, dims=probs.shape, pixdim=header.pixdim[:3] + (1.0,),
                     datatype_code=DT_FLOAT32)
    return AtlasVolume(header, probs)


def write_volume(volume, path: PathLike, datatype: int = None) -> None:
    """Write a scalar, label or atlas volume as little-endian NIfTI-1.

    Labels are stored as unsigned 8-bit, scalars and atlases as 32-bit float
    unless ``datatype`` asks otherwise.  Data starts at byte 352 with
    ``scl_slope=1`` and ``scl_inter=0``.
    """
    data = np.asarray(volume.data)
    if isinstance(volume, LabelVolume):
        code = DT_UINT8 if datatype is None else datatype
    else:
        code = DT_FLOAT32 if datatype is None else datatype
    if code not in _DTYPES:
        raise UnsupportedDatatype(f"datatype code {code} not supported")
    if data.dtype.kind == "f" and not np.all(np.isfinite(data)):
        raise InvalidVolume("refusing to write non-finite values")
    dtype = _DTYPES[code][0]
    if dtype.kind in "iu":
        info = np.iinfo(dtype)
        if data.size and (np.any(data != np.round(data)) or data.min() < info.min or data.max() > info.max):
            raise InvalidVolume(f"data not representable as {dtype}")

    header = replace(volume.header, datatype_code=code, vox_offset=float(DATA_OFFSET),
                     scl_slope=1.0, scl_inter=0.0, dims=tuple(data.shape),
                     pixdim=tuple(volume.header.pixdim[:3]) + (1.0,) * (data.ndim - 3))
    payload = data.astype(dtype.newbyteorder("<")).tobytes(order="F")
    try:
        with open(path, "wb") as fh:
            fh.write(encode_header(header))
            fh.write(payload)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc
