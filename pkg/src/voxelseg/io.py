"""Volume I/O: uncompressed NIfTI-1 (.nii) and blob+manifest (.json/.bin).

Only the header fields the pipeline needs are honored (dim, datatype,
pixdim, vox_offset); orientation is assumed identity.  Everything is
little-endian.  The raw layer preserves dtype exactly; the typed layer
promotes image data to float32 and validates labels.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DimensionMismatch, FormatError
from .volumes import MODALITIES, LabelVolume, MultiModalVolume

NIFTI_HEADER_SIZE = 348
NIFTI_VOX_OFFSET = 352
_DTYPE_TO_NIFTI = {np.dtype(np.uint8): 2, np.dtype(np.int16): 4, np.dtype(np.float32): 16}
_NIFTI_TO_DTYPE = {code: dt for dt, code in _DTYPE_TO_NIFTI.items()}
_BITPIX = {2: 8, 4: 16, 16: 32}


@dataclass
class ScalarVolume:
    """Single scalar grid (e.g. an uncertainty map), shape (D, H, W)."""

    data: np.ndarray
    spacing: np.ndarray
    subject_id: str = ""


# ---------------------------------------------------------------------------
# raw layer: ndarray in, ndarray out, dtype preserved
# ---------------------------------------------------------------------------

def write_nifti(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0)) -> None:
    """Write a (D,H,W) or (M,D,H,W) array as single-file NIfTI-1.

    Axis mapping: W <-> nifti x (fastest), H <-> y, D <-> z, M <-> t; a
    C-order buffer of (M,D,H,W) is byte-identical to the Fortran x,y,z,t
    layout NIfTI expects, so the payload is written as-is.
    """
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_TO_NIFTI:
        raise FormatError(f"unsupported dtype {array.dtype}; use uint8, int16 or float32")
    if array.ndim == 3:
        d, h, w = array.shape
        dim = [3, w, h, d, 1, 1, 1, 1]
    elif array.ndim == 4:
        m, d, h, w = array.shape
        dim = [4, w, h, d, m, 1, 1, 1]
    else:
        raise FormatError(f"only 3-d or 4-d arrays supported, got ndim={array.ndim}")
    sd, sh, sw = (float(s) for s in spacing)
    pixdim = [1.0, sw, sh, sd, 0.0, 0.0, 0.0, 0.0]
    code = _DTYPE_TO_NIFTI[array.dtype]

    header = bytearray(NIFTI_HEADER_SIZE)
    struct.pack_into("<i", header, 0, NIFTI_HEADER_SIZE)
    struct.pack_into("<8h", header, 40, *dim)
    struct.pack_into("<h", header, 70, code)
    struct.pack_into("<h", header, 72, _BITPIX[code])
    struct.pack_into("<8f", header, 76, *pixdim)
    struct.pack_into("<f", header, 108, float(NIFTI_VOX_OFFSET))
    struct.pack_into("<f", header, 112, 1.0)  # scl_slope
    header[123] = 2  # spatial units: mm
    header[344:348] = b"n+1\x00"

    with open(path, "wb") as fh:
        fh.write(bytes(header))
        fh.write(b"\x00\x00\x00\x00")  # no extensions
        fh.write(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_nifti(path) -> tuple[np.ndarray, np.ndarray]:
    """Read a .nii written by this pipeline (or any plain little-endian
    single-file NIfTI-1).  Returns (array, spacing) with array (D,H,W) or
    (M,D,H,W) and spacing ordered (D,H,W)."""
    raw = Path(path).read_bytes()
    if len(raw) < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: file is {len(raw)} bytes, shorter than the 348-byte header (offset 0)")
    (sizeof_hdr,) = struct.unpack_from("<i", raw, 0)
    if sizeof_hdr != NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: sizeof_hdr={sizeof_hdr} at offset 0 (not little-endian NIfTI-1?)")
    magic = raw[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise FormatError(f"{path}: bad magic {magic!r} at offset 344")
    dim = struct.unpack_from("<8h", raw, 40)
    ndim = dim[0]
    if ndim not in (3, 4):
        raise FormatError(f"{path}: unsupported rank {ndim} at offset 40")
    (code,) = struct.unpack_from("<h", raw, 70)
    if code not in _NIFTI_TO_DTYPE:
        raise FormatError(f"{path}: unsupported datatype code {code} at offset 70")
    dtype = _NIFTI_TO_DTYPE[code]
    pixdim = struct.unpack_from("<8f", raw, 76)
    (vox_offset_f,) = struct.unpack_from("<f", raw, 108)
    vox_offset = int(vox_offset_f)
    if vox_offset < NIFTI_HEADER_SIZE:
        raise FormatError(f"{path}: vox_offset {vox_offset} inside header (offset 108)")

    w, h, d = dim[1], dim[2], dim[3]
    m = dim[4] if ndim == 4 else 1
    shape = (m, d, h, w) if ndim == 4 else (d, h, w)
    expected = int(np.prod(shape)) * dtype.itemsize
    actual = len(raw) - vox_offset
    if actual < expected:
        raise FormatError(
            f"{path}: truncated payload at offset {vox_offset}: expected {expected} bytes, got {actual}"
        )
    array = np.frombuffer(raw, dtype=dtype.newbyteorder("<"), count=int(np.prod(shape)), offset=vox_offset)
    array = array.reshape(shape).astype(dtype)
    spacing = np.array([pixdim[3], pixdim[2], pixdim[1]], dtype=np.float64)
    spacing[spacing <= 0] = 1.0
    return array, spacing


def write_blob(path, array: np.ndarray, spacing=(1.0, 1.0, 1.0), modalities=None, subject_id="") -> None:
    """Blob+manifest: UTF-8 JSON manifest at ``path`` (.json) plus a raw
    little-endian C-order blob next to it (.bin)."""
    path = Path(path)
    if path.suffix != ".json":
        raise FormatError(f"manifest path must end in .json, got {path}")
    array = np.ascontiguousarray(array)
    if array.dtype not in _DTYPE_TO_NIFTI:
        raise FormatError(f"unsupported dtype {array.dtype}; use uint8, int16 or float32")
    blob_name = path.with_suffix(".bin").name
    manifest = {
        "dims": list(array.shape),
        "dtype": array.dtype.name,
        "spacing": [float(s) for s in spacing],
        "modalities": list(modalities) if modalities else None,
        "subject_id": subject_id,
        "blob": blob_name,
    }
    path.write_text(json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8")
    (path.parent / blob_name).write_bytes(array.astype(array.dtype.newbyteorder("<"), copy=False).tobytes())


def read_blob(path) -> tuple[np.ndarray, np.ndarray, list | None, str]:
    path = Path(path)
    try:
        manifest = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: manifest is not valid JSON at offset {exc.pos}") from exc
    try:
        dims = tuple(int(v) for v in manifest["dims"])
        dtype = np.dtype(manifest["dtype"])
        spacing = np.asarray(manifest["spacing"], dtype=np.float64)
        blob_name = manifest["blob"]
    except (KeyError, TypeError) as exc:
        raise FormatError(f"{path}: manifest missing field {exc}") from exc
    if dtype not in _DTYPE_TO_NIFTI:
        raise FormatError(f"{path}: unsupported dtype {dtype}")
    blob_path = path.parent / blob_name
    if not blob_path.exists():
        raise FormatError(f"{path}: blob {blob_name} not found")
    raw = blob_path.read_bytes()
    expected = int(np.prod(dims)) * dtype.itemsize
    if len(raw) != expected:
        raise FormatError(f"{blob_path}: truncated payload at offset 0: expected {expected} bytes, got {len(raw)}")
    array = np.frombuffer(raw, dtype=dtype.newbyteorder("<")).reshape(dims).astype(dtype)
    return array, spacing, manifest.get("modalities"), manifest.get("subject_id", "")


# ---------------------------------------------------------------------------
# typed layer
# ---------------------------------------------------------------------------

def _format_of(path) -> str:
    suffix = Path(path).suffix
    if suffix == ".nii":
        return "nifti"
    if suffix == ".json":
        return "blob"
    raise FormatError(f"cannot infer format from {path}; use .nii or .json")


def write_volume(vol, path, format: str | None = None) -> None:
    """Write a MultiModalVolume (float32), LabelVolume (uint8) or
    ScalarVolume (float32)."""
    fmt = format or _format_of(path)
    if isinstance(vol, MultiModalVolume):
        array, spacing, mods, sid = vol.data, vol.spacing, MODALITIES, vol.subject_id
    elif isinstance(vol, LabelVolume):
        array, spacing, mods, sid = vol.labels, np.ones(3), None, vol.subject_id
    elif isinstance(vol, ScalarVolume):
        array, spacing, mods, sid = vol.data.astype(np.float32), vol.spacing, None, vol.subject_id
    else:
        raise FormatError(f"cannot write object of type {type(vol).__name__}")
    if fmt == "nifti":
        write_nifti(path, array, spacing)
    elif fmt == "blob":
        write_blob(path, array, spacing, modalities=mods, subject_id=sid)
    else:
        raise FormatError(f"unknown format {fmt!r}")


def read_volume(path, format: str | None = None, subject_id: str | None = None):
    """Read a volume, dispatching on rank and dtype:

    4-d float -> MultiModalVolume, 3-d integer -> LabelVolume,
    3-d float -> ScalarVolume.
    """
    fmt = format or _format_of(path)
    if fmt == "nifti":
        array, spacing = read_nifti(path)
        sid = subject_id or Path(path).stem
    elif fmt == "blob":
        array, spacing, _, sid = read_blob(path)
        sid = subject_id or sid or Path(path).stem
    else:
        raise FormatError(f"unknown format {fmt!r}")

    if array.ndim == 4:
        if array.shape[0] != len(MODALITIES):
            raise DimensionMismatch(f"{path}: expected {len(MODALITIES)} modalities, got {array.shape[0]}")
        return MultiModalVolume(array.astype(np.float32), spacing=spacing, subject_id=sid)
    if array.dtype.kind in "ui":
        return LabelVolume(array, subject_id=sid)
    return ScalarVolume(array.astype(np.float32), spacing=spacing, subject_id=sid)
