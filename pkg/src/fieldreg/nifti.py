"""NIfTI-1 reading and writing without external imaging dependencies.

Supports single-file .nii / .nii.gz (magic "n+1") and paired .hdr/.img
(magic "ni1"), both endiannesses, datatypes uint8/int16/int32/float32/
float64, and scl_slope/scl_inter value scaling.  On read, volumes are
reoriented to a canonical closest-axis RAS layout (axis permutations and
flips derived from the sform/qform direction matrix); direction matrices
more than 5 degrees oblique are rejected.  Writing always produces
canonical single-file volumes: float32 for intensities, uint8 for masks,
gzip with a fixed timestamp so outputs are byte-reproducible.

Displacement fields are stored as three scalar volumes (``<prefix>_ux``,
``_uy``, ``_uz``) for maximal reader compatibility.
"""

from __future__ import annotations

import gzip
import math
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .grid import (
    DEFAULT_LABEL_NAMES,
    DisplacementField,
    LabelMask,
    Volume3D,
    VolumeGrid,
)
from .validation import GridMismatchError

_DTYPES = {2: np.uint8, 4: np.int16, 8: np.int32, 16: np.float32, 64: np.float64}
_BITPIX = {2: 8, 4: 16, 8: 32, 16: 32, 64: 64}
_HEADER_SIZE = 348
_VOX_OFFSET = 352  # header + 4-byte extension flag
_MAX_OBLIQUE_DEG = 5.0
_AXIS_LETTERS = {(0, 1): "R", (0, -1): "L", (1, 1): "A", (1, -1): "P", (2, 1): "S", (2, -1): "I"}


@dataclass(frozen=True)
class NiftiHeaderInfo:
    """Header facts of the file as stored (before canonicalization)."""

    dims: tuple
    spacing: tuple
    scl_slope: float
    scl_inter: float
    datatype_code: int
    orientation: str  # e.g. "RAS": world direction of each stored axis
    qform_code: int
    sform_code: int


def _read_bytes(path: Path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def _write_bytes(path: Path, payload: bytes):
    if path.name.endswith(".gz"):
        with open(path, "wb") as fh:
            # filename="" keeps the archive byte-identical for equal payloads
            # regardless of the output path; mtime=0 does the same for time.
            with gzip.GzipFile(filename="", fileobj=fh, mode="wb", mtime=0) as gz:
                gz.write(payload)
    else:
        path.write_bytes(payload)


def _corrupt(path, offset, detail):
    return ValueError(f"corrupt NIfTI header in {path}: {detail} (offset {offset})")


def _quaternion_rotation(b, c, d, qfac):
    a_sq = 1.0 - (b * b + c * c + d * d)
    a = math.sqrt(a_sq) if a_sq > 0 else 0.0
    r = np.array(
        [
            [a * a + b * b - c * c - d * d, 2 * (b * c - a * d), 2 * (b * d + a * c)],
            [2 * (b * c + a * d), a * a + c * c - b * b - d * d, 2 * (c * d - a * b)],
            [2 * (b * d - a * c), 2 * (c * d + a * b), a * a + d * d - b * b - c * c],
        ]
    )
    r[:, 2] *= qfac
    return r


def _parse_header(raw: bytes, path):
    if len(raw) < _HEADER_SIZE:
        raise _corrupt(path, 0, f"file holds {len(raw)} bytes, header needs 348")
    endian = "<"
    if struct.unpack_from("<i", raw, 0)[0] != _HEADER_SIZE:
        if struct.unpack_from(">i", raw, 0)[0] == _HEADER_SIZE:
            endian = ">"
        else:
            raise _corrupt(path, 0, "sizeof_hdr is not 348 in either byte order")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise _corrupt(path, 344, f"unrecognized magic {magic!r}")
    dim = struct.unpack_from(endian + "8h", raw, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise _corrupt(path, 40, f"dim[0] = {ndim} outside [1, 7]")
    shape = tuple(max(1, int(v)) for v in dim[1 : 1 + ndim])
    if any(v != 1 for v in shape[3:]):
        raise ValueError(f"{path}: only 3-D volumes are supported, file shape {shape}")
    shape = (shape + (1, 1, 1))[:3]
    datatype, bitpix = struct.unpack_from(endian + "2h", raw, 70)
    pixdim = struct.unpack_from(endian + "8f", raw, 76)
    vox_offset = struct.unpack_from(endian + "f", raw, 108)[0]
    scl_slope, scl_inter = struct.unpack_from(endian + "2f", raw, 112)
    qform_code, sform_code = struct.unpack_from(endian + "2h", raw, 252)
    quat = struct.unpack_from(endian + "6f", raw, 256)
    srow = np.array(struct.unpack_from(endian + "12f", raw, 280)).reshape(3, 4)
    if datatype not in _DTYPES:
        raise ValueError(f"{path}: unsupported NIfTI datatype code {datatype}")
    if bitpix != _BITPIX[datatype]:
        raise _corrupt(path, 72, f"bitpix {bitpix} inconsistent with datatype {datatype}")
    spacing = tuple(abs(float(v)) or 1.0 for v in pixdim[1:4])

    if sform_code > 0:
        affine = srow
    elif qform_code > 0:
        qfac = -1.0 if pixdim[0] < 0 else 1.0
        rot = _quaternion_rotation(quat[0], quat[1], quat[2], qfac)
        affine = np.hstack([rot * np.array(spacing), np.array(quat[3:6])[:, None]])
    else:
        affine = np.hstack([np.diag(spacing), np.zeros((3, 1))])
    return {
        "endian": endian,
        "magic": magic,
        "shape": shape,
        "datatype": datatype,
        "spacing": spacing,
        "vox_offset": int(vox_offset),
        "scl_slope": float(scl_slope),
        "scl_inter": float(scl_inter),
        "qform_code": int(qform_code),
        "sform_code": int(sform_code),
        "affine": affine,
    }


def _snap_axes(affine, path):
    """Map each stored axis to its closest world axis; reject oblique files."""
    direction = affine[:, :3]
    assignment = []
    for i in range(3):
        col = direction[:, i]
        norm = float(np.linalg.norm(col))
        if norm == 0.0:
            raise ValueError(f"{path}: degenerate direction matrix (zero column {i})")
        world = int(np.argmax(np.abs(col)))
        angle = math.degrees(math.acos(min(1.0, abs(col[world]) / norm)))
        if angle > _MAX_OBLIQUE_DEG:
            raise ValueError(
                f"{path}: axis {i} is {angle:.1f} degrees oblique "
                f"(limit {_MAX_OBLIQUE_DEG}); reorient the volume first"
            )
        sign = 1 if col[world] > 0 else -1
        assignment.append((world, sign, norm))
    if len({w for w, _, _ in assignment}) != 3:
        raise ValueError(f"{path}: direction matrix does not span three distinct axes")
    return assignment


def _canonicalize(data, affine, assignment):
    """Permute/flip to closest-axis RAS; returns (data, spacing, origin)."""
    order = [next(i for i, (w, _, _) in enumerate(assignment) if w == j) for j in range(3)]
    data = np.transpose(data, order)
    spacing = [assignment[i][2] for i in order]
    flips = [assignment[i][1] < 0 for i in order]
    # old_index = P @ new_index in homogeneous coordinates
    p = np.zeros((4, 4))
    p[3, 3] = 1.0
    for j, i in enumerate(order):
        if flips[j]:
            p[i, j] = -1.0
            p[i, 3] = data.shape[j] - 1
        else:
            p[i, j] = 1.0
    for j in range(3):
        if flips[j]:
            data = np.flip(data, axis=j)
    m = np.vstack([affine, [0.0, 0.0, 0.0, 1.0]]) @ p
    origin = tuple(float(v) for v in m[:3, 3])
    return np.ascontiguousarray(data), tuple(float(s) for s in spacing), origin


def _orientation_string(assignment) -> str:
    return "".join(_AXIS_LETTERS[(w, s)] for w, s, _ in assignment)


def _load(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    raw = _read_bytes(path)
    hdr = _parse_header(raw, path)
    nx, ny, nz = hdr["shape"]
    count = nx * ny * nz
    if hdr["magic"] == b"ni1\x00":
        stem = path.name
        for suffix in (".hdr.gz", ".hdr"):
            if stem.endswith(suffix):
                stem = stem[: -len(suffix)]
                break
        img = None
        for candidate in (path.with_name(stem + ".img"), path.with_name(stem + ".img.gz")):
            if candidate.exists():
                img = candidate
                break
        if img is None:
            raise FileNotFoundError(f"{path}: paired image file {stem}.img not found")
        payload = _read_bytes(img)
        offset = 0
    else:
        payload = raw
        offset = max(hdr["vox_offset"], _HEADER_SIZE)
    dtype = np.dtype(_DTYPES[hdr["datatype"]]).newbyteorder(hdr["endian"])
    if len(payload) < offset + count * dtype.itemsize:
        raise _corrupt(path, offset, f"data truncated: need {count} voxels")
    arr = np.frombuffer(payload, dtype=dtype, count=count, offset=offset)
    data = arr.reshape((nx, ny, nz), order="F").astype(np.float64)
    if hdr["scl_slope"] != 0.0 and (hdr["scl_slope"], hdr["scl_inter"]) != (1.0, 0.0):
        data = data * hdr["scl_slope"] + hdr["scl_inter"]
    assignment = _snap_axes(hdr["affine"], path)
    data, spacing, origin = _canonicalize(data, hdr["affine"], assignment)
    info = NiftiHeaderInfo(
        dims=(nx, ny, nz),
        spacing=hdr["spacing"],
        scl_slope=hdr["scl_slope"],
        scl_inter=hdr["scl_inter"],
        datatype_code=hdr["datatype"],
        orientation=_orientation_string(assignment),
        qform_code=hdr["qform_code"],
        sform_code=hdr["sform_code"],
    )
    grid = VolumeGrid(dims=data.shape, spacing=spacing, origin=origin)
    return data, grid, info


def read_volume(path) -> tuple:
    """Read a NIfTI-1 volume; returns (Volume3D, NiftiHeaderInfo).

    Values are rescaled by scl_slope/scl_inter when the slope is nonzero,
    and the array is reoriented to canonical closest-axis RAS order.
    """
    data, grid, info = _load(path)
    return Volume3D(grid, data), info


def read_mask(path, label_names=None) -> tuple:
    """Read a label mask; returns (LabelMask, NiftiHeaderInfo)."""
    data, grid, info = _load(path)
    rounded = np.rint(data)
    if np.max(np.abs(data - rounded)) > 1e-6:
        raise ValueError(f"{path}: mask file contains non-integer values")
    labels = rounded.astype(np.int32)
    if label_names is None:
        label_names = dict(DEFAULT_LABEL_NAMES)
        for value in np.unique(labels):
            label_names.setdefault(int(value), f"label_{int(value)}")
    return LabelMask(grid, labels, label_names=label_names), info


def _build_header(dims, spacing, origin, datatype: int, description: str = "") -> bytearray:
    buf = bytearray(_VOX_OFFSET)
    struct.pack_into("<i", buf, 0, _HEADER_SIZE)
    struct.pack_into("<8h", buf, 40, 3, dims[0], dims[1], dims[2], 1, 1, 1, 1)
    struct.pack_into("<2h", buf, 70, datatype, _BITPIX[datatype])
    struct.pack_into("<8f", buf, 76, 1.0, spacing[0], spacing[1], spacing[2], 0, 0, 0, 0)
    struct.pack_into("<f", buf, 108, float(_VOX_OFFSET))
    struct.pack_into("<2f", buf, 112, 1.0, 0.0)
    struct.pack_into("<B", buf, 123, 2)  # spatial units: millimetres
    desc = description.encode("utf-8", "replace")[:79]
    struct.pack_into(f"<{len(desc)}s", buf, 148, desc)
    struct.pack_into("<2h", buf, 252, 1, 1)
    struct.pack_into("<6f", buf, 256, 0.0, 0.0, 0.0, origin[0], origin[1], origin[2])
    struct.pack_into("<4f", buf, 280, spacing[0], 0.0, 0.0, origin[0])
    struct.pack_into("<4f", buf, 296, 0.0, spacing[1], 0.0, origin[1])
    struct.pack_into("<4f", buf, 312, 0.0, 0.0, spacing[2], origin[2])
    struct.pack_into("<4s", buf, 344, b"n+1\x00")
    return buf


def write_volume(vol: Volume3D, path, header_hints: dict | None = None):
    """Write a volume as single-file NIfTI-1 (float32, canonical axes)."""
    hints = header_hints or {}
    path = Path(path)
    header = _build_header(
        vol.grid.dims, vol.grid.spacing, vol.grid.origin, 16,
        description=str(hints.get("description", "")),
    )
    payload = bytes(header) + vol.data.astype("<f4").tobytes(order="F")
    _write_bytes(path, payload)


def write_mask(mask: LabelMask, path, header_hints: dict | None = None):
    """Write a label mask as single-file NIfTI-1 (uint8)."""
    hints = header_hints or {}
    if mask.labels.min() < 0 or mask.labels.max() > 255:
        raise ValueError("mask labels outside the uint8 range [0, 255]")
    path = Path(path)
    header = _build_header(
        mask.grid.dims, mask.grid.spacing, mask.grid.origin, 2,
        description=str(hints.get("description", "")),
    )
    payload = bytes(header) + mask.labels.astype(np.uint8).tobytes(order="F")
    _write_bytes(path, payload)


_FIELD_SUFFIXES = ("_ux", "_uy", "_uz")


def write_field(field: DisplacementField, prefix):
    """Write a field as three scalar volumes <prefix>_ux/_uy/_uz.nii.gz."""
    prefix = str(prefix)
    for c, suffix in enumerate(_FIELD_SUFFIXES):
        component = Volume3D(
            field.grid, field.vectors[..., c], intensity_unit="voxels"
        )
        write_volume(component, prefix + suffix + ".nii.gz")


def read_field(prefix) -> DisplacementField:
    """Read a field written by ``write_field`` (accepts .nii or .nii.gz)."""
    prefix = str(prefix)
    components = []
    grid = None
    for suffix in _FIELD_SUFFIXES:
        path = None
        for ext in (".nii.gz", ".nii"):
            candidate = Path(prefix + suffix + ext)
            if candidate.exists():
                path = candidate
                break
        if path is None:
            raise FileNotFoundError(f"field component {prefix + suffix}.nii[.gz] not found")
        vol, _ = read_volume(path)
        if grid is None:
            grid = vol.grid
        elif vol.grid != grid:
            raise GridMismatchError(
                f"field components disagree on the grid: {grid} vs {vol.grid}"
            )
        components.append(vol.data)
    return DisplacementField(grid, np.stack(components, axis=-1))
