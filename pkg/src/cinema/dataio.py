"""Preprocessing and on-disk formats.

CMRC container layout (all integers little-endian)::

    offset 0   b"CMRC"
    offset 4   u32  format version (currently 1)
    offset 8   u64  header length in bytes
    offset 16  UTF-8 JSON header
    ...        payload: raw little-endian arrays, back to back

The header holds ``{"arrays": [...], "meta": {...}}``. Each array entry has
``name``, ``dtype``, ``shape``, ``offset`` (relative to the payload start),
``nbytes`` and ``crc32``.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
import zlib
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

MAGIC = b"CMRC"
VERSION = 1
_PREFIX = struct.Struct("<4sIQ")

DTYPES = {
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
    "u8": np.dtype("u1"),
    "i16": np.dtype("<i2"),
    "i32": np.dtype("<i4"),
    "i64": np.dtype("<i8"),
    "bool": np.dtype("?"),
}
_CODES = {dt.newbyteorder("="): code for code, dt in DTYPES.items()}


class ContainerError(ValueError):
    pass


class BadMagicError(ContainerError):
    pass


class VersionMismatchError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class OffsetOverlapError(ContainerError):
    pass


class ChecksumError(ContainerError):
    pass


@dataclass(frozen=True)
class GridSpec:
    spacing: tuple[float, ...]
    size: tuple[int, ...]

    def __post_init__(self):
        if len(self.spacing) != len(self.size):
            raise ValueError("spacing and size must have the same length")
        if min(self.spacing) <= 0:
            raise ValueError(f"grid spacing must be positive, got {self.spacing}")
        if min(self.size) <= 0:
            raise ValueError(f"grid size must be positive, got {self.size}")


SAX_GRID = GridSpec((1.0, 1.0, 10.0), (192, 192, 16))
LAX_GRID = GridSpec((1.0, 1.0), (256, 256))


# ---------------------------------------------------------------------------
# resampling / cropping / normalisation


def resampled_shape(shape, spacing_in, spacing_out) -> tuple[int, ...]:
    return tuple(max(1, int(round(n * si / so))) for n, si, so in zip(shape, spacing_in, spacing_out))


def resample(image: np.ndarray, spacing_in, spacing_out, nearest: bool = False) -> np.ndarray:
    """Resample the leading ``len(spacing_in)`` axes onto a new spacing.

    Linear interpolation (bilinear / trilinear) by default, nearest-neighbour
    for label maps. Trailing axes (e.g. time) are carried through. Samples
    are voxel centres on an edge-aligned grid, so the physical extent
    ``n * spacing`` is preserved to within one output voxel; samples beyond
    the outermost input centres take the edge value.
    """
    spacing_in = tuple(float(s) for s in spacing_in)
    spacing_out = tuple(float(s) for s in spacing_out)
    nd = len(spacing_in)
    if len(spacing_out) != nd or image.ndim < nd:
        raise ValueError("spacing dimensionality does not match the image")
    if min(spacing_in) <= 0 or min(spacing_out) <= 0:
        raise ValueError("spacings must be positive")
    if spacing_in == spacing_out:
        return image.copy()
    for axis, (n, si, so) in enumerate(zip(image.shape, spacing_in, spacing_out)):
        if n < 2 and si != so:
            raise ValueError(f"axis {axis} has a single sample and cannot be resampled")
    out_spatial = resampled_shape(image.shape[:nd], spacing_in, spacing_out)
    ratio = np.array(spacing_out) / np.array(spacing_in)
    matrix = np.diag(np.concatenate([ratio, np.ones(image.ndim - nd)]))
    offset = np.concatenate([0.5 * ratio - 0.5, np.zeros(image.ndim - nd)])
    out_shape = out_spatial + image.shape[nd:]
    src = image if nearest else image.astype(np.float64)
    out = ndimage.affine_transform(
        src, matrix, offset=offset, output_shape=out_shape, order=0 if nearest else 1, mode="nearest"
    )
    return out.astype(image.dtype)


def crop_pad_offsets(shape, target) -> list[tuple[int, int]]:
    """Per-axis ``(lo, hi)`` counts; positive pads, negative crops.

    Odd differences put the extra voxel on the high-index side.
    """
    out = []
    for n, t in zip(shape, target):
        d = t - n
        lo = d // 2 if d >= 0 else -((-d) // 2)
        out.append((lo, d - lo))
    return out


def crop_or_pad(image: np.ndarray, target, center=None) -> np.ndarray:
    """Centre-crop or zero-pad the leading axes to ``target`` sizes.

    ``target`` is a :class:`GridSpec` or a size tuple. If ``center`` (voxel
    coordinates) is given, the window is centred there instead of at the
    array centre.
    """
    size = tuple(target.size) if isinstance(target, GridSpec) else tuple(int(t) for t in target)
    if min(size) <= 0:
        raise ValueError("target sizes must be positive")
    nd = len(size)
    if center is None:
        offsets = crop_pad_offsets(image.shape[:nd], size)
        starts = [-lo for lo, _ in offsets]
    else:
        starts = [int(round(c - (t - 1) / 2)) for c, t in zip(center, size)]
    out = np.zeros(size + image.shape[nd:], dtype=image.dtype)
    src, dst = [], []
    for n, t, s in zip(image.shape[:nd], size, starts):
        lo, hi = max(s, 0), min(s + t, n)
        if hi <= lo:
            return out
        src.append(slice(lo, hi))
        dst.append(slice(lo - s, hi - s))
    out[tuple(dst)] = image[tuple(src)]
    return out


def window_start(shape, target, center=None) -> list[int]:
    """Index in the source array of output voxel 0 along each axis."""
    if center is None:
        return [-lo for lo, _ in crop_pad_offsets(shape, target)]
    return [int(round(c - (t - 1) / 2)) for c, t in zip(center, target)]


def normalize_intensity(image: np.ndarray, lower: float = 1.0, upper: float = 99.0) -> np.ndarray:
    """Clip to the [p1, p99] percentile range and map it affinely to [0, 1]."""
    lo, hi = np.percentile(image, [lower, upper])
    if not hi > lo:
        return np.zeros_like(image, dtype=np.float32)
    return ((np.clip(image, lo, hi) - lo) / (hi - lo)).astype(np.float32)


# ---------------------------------------------------------------------------
# CMRC container


class Arrays(dict):
    """Name -> array mapping that also carries the container's JSON metadata."""

    def __init__(self, *args, meta=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.meta = meta if meta is not None else {}


def _dtype_code(arr: np.ndarray) -> str:
    try:
        return _CODES[arr.dtype.newbyteorder("=")]
    except KeyError:
        raise ContainerError(f"unsupported dtype {arr.dtype}") from None


def _items(arrays) -> list[tuple[str, np.ndarray]]:
    items = list(arrays.items()) if isinstance(arrays, Mapping) else list(arrays)
    names = [n for n, _ in items]
    if len(set(names)) != len(names):
        dup = sorted({n for n in names if names.count(n) > 1})
        raise ContainerError(f"duplicate array names: {dup}")
    return items


def encode_container(arrays: Mapping[str, np.ndarray] | Iterable, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in _items(arrays):
        arr = np.asarray(arr)
        code = _dtype_code(arr)
        raw = np.ascontiguousarray(arr, dtype=DTYPES[code]).tobytes()
        entries.append(
            {
                "name": name,
                "dtype": code,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
                "crc32": zlib.crc32(raw),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    header = json.dumps({"arrays": entries, "meta": meta or {}}, sort_keys=True).encode("utf-8")
    return _PREFIX.pack(MAGIC, VERSION, len(header)) + header + b"".join(chunks)


def write_container(arrays, path, meta: dict | None = None) -> None:
    """Atomically write ``arrays`` (and optional JSON ``meta``) to ``path``."""
    data = encode_container(arrays, meta)
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def decode_container(data: bytes, verify: bool = True) -> Arrays:
    if len(data) < _PREFIX.size or data[:4] != MAGIC:
        raise BadMagicError("not a CMRC container (bad magic)")
    _, version, header_len = _PREFIX.unpack_from(data)
    if version != VERSION:
        raise VersionMismatchError(f"unsupported CMRC version {version}, expected {VERSION}")
    start = _PREFIX.size + header_len
    if start > len(data):
        raise TruncatedPayloadError("file ends inside the header")
    header = json.loads(data[_PREFIX.size : start].decode("utf-8"))
    entries = header["arrays"]
    payload_len = len(data) - start
    expected = sum(e["nbytes"] for e in entries)
    if payload_len < expected:
        raise TruncatedPayloadError(f"payload has {payload_len} bytes, header declares {expected}")
    spans = sorted((e["offset"], e["offset"] + e["nbytes"], e["name"]) for e in entries)
    for (_, end0, n0), (beg1, _, n1) in zip(spans, spans[1:]):
        if beg1 < end0:
            raise OffsetOverlapError(f"arrays {n0!r} and {n1!r} overlap")
    if spans and spans[-1][1] > payload_len:
        raise TruncatedPayloadError(f"array {spans[-1][2]!r} extends past the end of the file")
    out = Arrays(meta=header.get("meta", {}))
    for e in entries:
        dt = DTYPES[e["dtype"]]
        count = int(np.prod(e["shape"], dtype=np.int64))
        if count * dt.itemsize != e["nbytes"]:
            raise ContainerError(f"array {e['name']!r}: nbytes does not match shape and dtype")
        raw = data[start + e["offset"] : start + e["offset"] + e["nbytes"]]
        if verify and zlib.crc32(raw) != e["crc32"]:
            raise ChecksumError(f"CRC32 mismatch in array {e['name']!r}")
        out[e["name"]] = np.frombuffer(raw, dtype=dt).reshape(e["shape"]).astype(dt.newbyteorder("="))
    return out


def read_container(path, verify: bool = True) -> Arrays:
    """Read a CMRC file. Metadata is available as ``result.meta``."""
    return decode_container(Path(path).read_bytes(), verify=verify)


# ---------------------------------------------------------------------------
# minimal NIfTI-1


class NiftiError(ValueError):
    pass


_NIFTI_DTYPES = {16: "f4", 4: "i2"}


def read_nifti(path) -> tuple[np.ndarray, tuple[float, ...]]:
    """Read an uncompressed single-file NIfTI-1 image (float32 or int16).

    Returns the array in (x, y, z, ...) order and the voxel spacing. No
    orientation handling is attempted.
    """
    path = Path(path)
    if path.suffix == ".gz":
        raise NiftiError("compressed NIfTI is not supported")
    data = path.read_bytes()
    if len(data) < 352:
        raise NiftiError("file too short for a NIfTI-1 header")
    for endian in "<>":
        if struct.unpack_from(endian + "i", data, 0)[0] == 348:
            break
    else:
        raise NiftiError("sizeof_hdr is not 348; not a NIfTI-1 file")
    magic = data[344:348]
    if magic != b"n+1\x00":
        raise NiftiError(f"unsupported NIfTI magic {magic!r} (only single-file n+1)")
    dim = struct.unpack_from(endian + "8h", data, 40)
    ndim = dim[0]
    if not 1 <= ndim <= 7:
        raise NiftiError(f"invalid dim[0]={ndim}")
    datatype = struct.unpack_from(endian + "h", data, 70)[0]
    if datatype not in _NIFTI_DTYPES:
        raise NiftiError(f"unsupported NIfTI datatype code {datatype}")
    pixdim = struct.unpack_from(endian + "8f", data, 76)
    vox_offset = int(struct.unpack_from(endian + "f", data, 108)[0])
    slope, inter = struct.unpack_from(endian + "2f", data, 112)
    shape = tuple(dim[1 : ndim + 1])
    dt = np.dtype(endian + _NIFTI_DTYPES[datatype])
    count = int(np.prod(shape))
    if vox_offset + count * dt.itemsize > len(data):
        raise NiftiError("NIfTI payload truncated")
    arr = np.frombuffer(data, dtype=dt, count=count, offset=vox_offset).reshape(shape, order="F")
    arr = arr.astype(dt.newbyteorder("="))
    if slope not in (0.0, 1.0) or inter != 0.0:
        arr = arr.astype(np.float32) * (slope or 1.0) + inter
    spacing = tuple(float(p) for p in pixdim[1 : min(ndim, 3) + 1])
    if min(spacing) <= 0:
        raise NiftiError(f"non-positive voxel spacing {spacing}")
    return arr, spacing


def write_nifti(path, image: np.ndarray, spacing) -> None:
    """Write a minimal NIfTI-1 file; mirrors what :func:`read_nifti` accepts."""
    codes = {np.dtype("float32"): 16, np.dtype("int16"): 4}
    if image.dtype not in codes:
        raise NiftiError(f"cannot write dtype {image.dtype}")
    hdr = bytearray(352)
    struct.pack_into("<i", hdr, 0, 348)
    dim = [image.ndim] + list(image.shape) + [1] * (7 - image.ndim)
    struct.pack_into("<8h", hdr, 40, *dim)
    struct.pack_into("<h", hdr, 70, codes[image.dtype])
    struct.pack_into("<h", hdr, 72, image.dtype.itemsize * 8)
    pix = [1.0] + list(spacing) + [1.0] * (7 - len(spacing))
    struct.pack_into("<8f", hdr, 76, *pix)
    struct.pack_into("<f", hdr, 108, 352.0)
    struct.pack_into("<2f", hdr, 112, 1.0, 0.0)
    hdr[344:348] = b"n+1\x00"
    Path(path).write_bytes(bytes(hdr) + image.astype(image.dtype.newbyteorder("<")).tobytes(order="F"))


# ---------------------------------------------------------------------------
# studies on disk


def write_study(study, path) -> None:
    """Store a :class:`~cinema.phantom.CineStudy` as a CMRC container."""
    arrays = {view: img for view, img in study.images.items()}
    for view, m in (study.gt_masks or {}).items():
        arrays[f"gt/mask/{view}"] = m
    for view, lm in (study.gt_landmarks or {}).items():
        arrays[f"gt/landmarks/{view}"] = lm
    meta = {
        "kind": "cine_study",
        "spacing_sax": list(study.spacing_sax),
        "spacing_lax": list(study.spacing_lax),
        "gt_scalars": study.gt_scalars,
        "meta": study.meta,
    }
    write_container(arrays, path, meta=meta)


def read_study(path):
    from .phantom import VIEWS, CineStudy

    arrays = read_container(path)
    meta = arrays.meta
    if meta.get("kind") != "cine_study":
        raise ContainerError(f"{path} does not hold a cine study")
    masks = {k.split("/")[-1]: v for k, v in arrays.items() if k.startswith("gt/mask/")}
    lms = {k.split("/")[-1]: v for k, v in arrays.items() if k.startswith("gt/landmarks/")}
    return CineStudy(
        **{v: arrays[v] for v in VIEWS},
        spacing_sax=tuple(meta["spacing_sax"]),
        spacing_lax=tuple(meta["spacing_lax"]),
        gt_masks=masks or None,
        gt_landmarks=lms or None,
        gt_scalars=meta.get("gt_scalars"),
        meta=meta.get("meta", {}),
    )


def preprocess_study(study, sax_grid: GridSpec = SAX_GRID, lax_grid: GridSpec = LAX_GRID, normalize: bool = True):
    """Resample, crop/pad and normalise every view of a study.

    The SAX window is centred in-plane on ``meta["center_vox"]`` when the
    study carries it; LAX windows are centred on the image.
    """
    from .phantom import CineStudy

    images, masks, lms = {}, {}, {}
    center = study.meta.get("center_vox")
    for view, img in study.images.items():
        grid = sax_grid if view == "sax" else lax_grid
        sp_in = study.spacing(view)
        res = resample(img, sp_in, grid.spacing)
        win_center = None
        if view == "sax" and center is not None:
            scale = np.asarray(sp_in) / np.asarray(grid.spacing)
            c = (np.asarray(center) + 0.5) * scale - 0.5
            win_center = [c[0], c[1], (res.shape[2] - 1) / 2]
        start = window_start(res.shape[: len(grid.size)], grid.size, win_center)
        images[view] = crop_or_pad(res, grid.size, win_center)
        if normalize:
            images[view] = normalize_intensity(images[view])
        if study.gt_masks and view in study.gt_masks:
            m = resample(study.gt_masks[view], sp_in, grid.spacing, nearest=True)
            masks[view] = crop_or_pad(m, grid.size, win_center)
        if study.gt_landmarks and view in study.gt_landmarks:
            shift = np.asarray(start[:2], dtype=float) * np.asarray(grid.spacing[:2])
            lms[view] = study.gt_landmarks[view] - shift
    meta = dict(study.meta)
    if center is not None:
        meta["center_vox"] = [(s - 1) / 2 for s in sax_grid.size]
    return CineStudy(
        **images,
        spacing_sax=tuple(sax_grid.spacing),
        spacing_lax=tuple(lax_grid.spacing),
        gt_masks=masks or None,
        gt_landmarks=lms or None,
        gt_scalars=study.gt_scalars,
        meta=meta,
    )
