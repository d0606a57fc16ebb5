"""3D scalar volumes with physical spacing: preprocessing primitives and file I/O.

Conventions used throughout the package:
  * ``Volume.data`` is indexed ``[x, y, z]`` and serialized x-fastest.
  * the center of voxel ``i`` sits at physical coordinate ``i * spacing`` mm,
    so index 0 is the physical origin of every axis.
  * interpolation outside the sampled domain clamps to the boundary voxel.
"""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from voxelage.errors import DataError

# Tissue labels shared by the phantom generator and the volumetrics module.
LABEL_BACKGROUND = 0
LABEL_WM = 1
LABEL_CORTICAL_GM = 2
LABEL_SUBCORTICAL_GM = 3
LABEL_VENTRICLE = 4
ALL_LABELS = (LABEL_BACKGROUND, LABEL_WM, LABEL_CORTICAL_GM, LABEL_SUBCORTICAL_GM, LABEL_VENTRICLE)

_SGV1_MAGIC = b"SGV1"
_SGV1_HEADER = struct.Struct("<4sIIIfffI")  # magic, nx, ny, nz, sx, sy, sz, dtype tag
_TAG_FLOAT32 = 0
_TAG_UINT16 = 1


def _check_spacing(spacing) -> tuple[float, float, float]:
    # spacing is kept at float32 precision, matching the file-format header,
    # so write/read round trips compare equal
    spacing = tuple(float(np.float32(s)) for s in spacing)
    if len(spacing) != 3:
        raise DataError(f"spacing must have 3 components, got {len(spacing)}")
    if not all(np.isfinite(s) and s > 0 for s in spacing):
        raise DataError(f"spacing components must be finite and strictly positive, got {spacing}")
    return spacing


@dataclass
class Volume:
    """Dense 3D scalar field, float32, with voxel spacing in millimeters."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise DataError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise DataError(f"volume dims must be positive, got {self.data.shape}")
        self.spacing = _check_spacing(self.spacing)
        if not np.isfinite(self.data).all():
            raise DataError("volume contains non-finite samples")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


@dataclass
class LabelVolume:
    """Integer tissue labels on the same grid conventions as :class:`Volume`."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise DataError(f"label data must be 3D, got shape {arr.shape}")
        if arr.dtype.kind not in "iu":
            raise DataError(f"label data must be integer, got dtype {arr.dtype}")
        if arr.size and (arr.min() < min(ALL_LABELS) or arr.max() > max(ALL_LABELS)):
            raise DataError(
                f"labels outside {ALL_LABELS}: found range [{arr.min()}, {arr.max()}]"
            )
        self.data = arr.astype(np.uint16, copy=False)
        self.spacing = _check_spacing(self.spacing)

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def voxel_volume_mm3(self) -> float:
        sx, sy, sz = self.spacing
        return sx * sy * sz


def normalize_masked(vol: Volume, mask: LabelVolume, p_lo: float = 0.5, p_hi: float = 99.5) -> Volume:
    """Map the in-mask percentile window [p_lo, p_hi] onto [-1, 1], clamping tails.

    Percentiles follow the linear-interpolation order-statistic rule
    (``numpy.percentile`` default). A degenerate window (hi == lo) yields an
    all-zero volume so batch pipelines stay total on constant inputs.
    """
    if mask.dims != vol.dims:
        raise DataError(f"mask dims {mask.dims} do not match volume dims {vol.dims}")
    if not (0.0 <= p_lo < p_hi <= 100.0):
        raise DataError(f"require 0 <= p_lo < p_hi <= 100, got ({p_lo}, {p_hi})")
    inside = mask.data != 0
    if not inside.any():
        raise DataError("empty mask")
    samples = vol.data[inside].astype(np.float64)
    lo, hi = np.percentile(samples, [p_lo, p_hi])
    if hi == lo:
        return Volume(np.zeros(vol.dims, dtype=np.float32), vol.spacing)
    out = 2.0 * (vol.data.astype(np.float64) - lo) / (hi - lo) - 1.0
    np.clip(out, -1.0, 1.0, out=out)
    return Volume(out.astype(np.float32), vol.spacing)


def _catmull_rom_weights(f: np.ndarray) -> list[np.ndarray]:
    # local cubic (Catmull-Rom) kernel; weights sum to 1 for any fraction
    f2 = f * f
    f3 = f2 * f
    return [
        0.5 * (-f3 + 2.0 * f2 - f),
        0.5 * (3.0 * f3 - 5.0 * f2 + 2.0),
        0.5 * (-3.0 * f3 + 4.0 * f2 + f),
        0.5 * (f3 - f2),
    ]


def _interp_axis(arr: np.ndarray, axis: int, n_new: int, scale: float, method: str) -> np.ndarray:
    """Resample one axis at fractional source indices j*scale, clamping to the edges."""
    n_old = arr.shape[axis]
    u = np.arange(n_new, dtype=np.float64) * scale
    i0 = np.floor(u)
    f = u - i0
    i0 = i0.astype(np.int64)
    if method == "trilinear":
        taps = [(i0, 1.0 - f), (i0 + 1, f)]
    else:
        w = _catmull_rom_weights(f)
        taps = [(i0 - 1, w[0]), (i0, w[1]), (i0 + 1, w[2]), (i0 + 2, w[3])]
    wshape = [1, 1, 1]
    wshape[axis] = n_new
    out = np.zeros(arr.shape[:axis] + (n_new,) + arr.shape[axis + 1 :], dtype=np.float64)
    for idx, weight in taps:
        idx = np.clip(idx, 0, n_old - 1)
        out += np.take(arr, idx, axis=axis) * weight.reshape(wshape)
    return out


def resample(vol: Volume, new_spacing, method: str = "trilinear") -> Volume:
    """Resample onto a grid with the given spacing (mm per voxel).

    Output dims are round(dims * spacing / new_spacing) with a minimum of 1
    per axis (round halves up). ``method`` is ``"trilinear"`` or ``"cubic"``
    (Catmull-Rom). Identity spacing on an axis leaves that axis untouched, so
    a full identity resample is bit-exact.
    """
    new_spacing = _check_spacing(new_spacing)
    if method not in ("trilinear", "cubic", "cubic-spline"):
        raise DataError(f"unknown interpolation method {method!r}")
    kernel = "trilinear" if method == "trilinear" else "cubic"
    new_dims = tuple(
        max(1, int(np.floor(vol.dims[a] * vol.spacing[a] / new_spacing[a] + 0.5)))
        for a in range(3)
    )
    arr = vol.data
    touched = False
    for a in range(3):
        if new_dims[a] == vol.dims[a] and new_spacing[a] == vol.spacing[a]:
            continue
        if not touched:
            arr = arr.astype(np.float64)
            touched = True
        arr = _interp_axis(arr, a, new_dims[a], new_spacing[a] / vol.spacing[a], kernel)
    if not touched:
        return Volume(vol.data.copy(), new_spacing)
    return Volume(arr.astype(np.float32), new_spacing)


def crop_or_pad(vol, target_dims, fill=0.0):
    """Center-crop or symmetrically pad to ``target_dims``, spacing preserved.

    Odd crop/pad remainders put the extra voxel on the high-index side.
    Works on both Volume and LabelVolume (fill is cast to the data dtype).
    """
    target_dims = tuple(int(n) for n in target_dims)
    if len(target_dims) != 3 or min(target_dims) < 1:
        raise DataError(f"target dims must be 3 positive ints, got {target_dims}")
    arr = vol.data
    slices = []
    pads = []
    for a in range(3):
        n_in, n_t = arr.shape[a], target_dims[a]
        if n_in >= n_t:
            start = (n_in - n_t) // 2
            slices.append(slice(start, start + n_t))
            pads.append((0, 0))
        else:
            slices.append(slice(None))
            lo = (n_t - n_in) // 2
            pads.append((lo, n_t - n_in - lo))
    arr = arr[tuple(slices)]
    if any(p != (0, 0) for p in pads):
        arr = np.pad(arr, pads, mode="constant", constant_values=np.array(fill, dtype=arr.dtype))
    return type(vol)(arr.copy(), vol.spacing)


# ---------------------------------------------------------------------------
# Native "SGV1" format: 32-byte little-endian header, then x-fastest samples.
# Bytes 0-3 magic "SGV1"; 4-15 nx, ny, nz (u32); 16-27 sx, sy, sz (f32);
# 28-31 dtype tag (0 = float32 intensity, 1 = uint16 labels).
# ---------------------------------------------------------------------------


def write_volume(vol, path) -> None:
    """Write a Volume or LabelVolume as an SGV1 file (round trip is bit-exact)."""
    if isinstance(vol, LabelVolume):
        tag, payload = _TAG_UINT16, vol.data.astype("<u2", copy=False)
    elif isinstance(vol, Volume):
        tag, payload = _TAG_FLOAT32, vol.data.astype("<f4", copy=False)
    else:
        raise DataError(f"cannot serialize object of type {type(vol).__name__}")
    nx, ny, nz = vol.dims
    header = _SGV1_HEADER.pack(_SGV1_MAGIC, nx, ny, nz, *vol.spacing, tag)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload.flatten(order="F").tobytes())


def read_volume(path):
    """Read an SGV1 file; returns Volume (tag 0) or LabelVolume (tag 1)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _SGV1_HEADER.size:
        raise DataError(f"malformed header: file too short ({len(blob)} bytes)")
    magic, nx, ny, nz, sx, sy, sz, tag = _SGV1_HEADER.unpack(blob[: _SGV1_HEADER.size])
    if magic != _SGV1_MAGIC:
        raise DataError(f"malformed header: bad magic {magic!r}")
    if min(nx, ny, nz) < 1:
        raise DataError(f"malformed header: nonpositive dims ({nx}, {ny}, {nz})")
    if tag not in (_TAG_FLOAT32, _TAG_UINT16):
        raise DataError(f"malformed header: unknown dtype tag {tag}")
    dtype = np.dtype("<f4") if tag == _TAG_FLOAT32 else np.dtype("<u2")
    payload = blob[_SGV1_HEADER.size :]
    if len(payload) % dtype.itemsize != 0:
        raise DataError(f"truncated payload: {len(payload)} bytes is not a whole number of samples")
    n_samples = len(payload) // dtype.itemsize
    if n_samples != nx * ny * nz:
        raise DataError(f"payload size mismatch: header says {nx * ny * nz} samples, file has {n_samples}")
    data = np.frombuffer(payload, dtype=dtype).reshape((nx, ny, nz), order="F")
    if tag == _TAG_FLOAT32:
        return Volume(data.copy(), (sx, sy, sz))
    return LabelVolume(data.copy(), (sx, sy, sz))


# ---------------------------------------------------------------------------
# NIfTI-1 read-only support (scalar single-frame, optionally gzipped).
# ---------------------------------------------------------------------------

_NIFTI_DTYPES = {
    2: "u1",
    4: "i2",
    8: "i4",
    16: "f4",
    64: "f8",
    256: "i1",
    512: "u2",
    768: "u4",
}


def read_nifti(path) -> Volume:
    """Read a NIfTI-1 volume (.nii or .nii.gz) into a float32 Volume.

    dims come from dim[1..3], spacing from pixdim[1..3]; scl_slope/scl_inter
    are applied when scl_slope is nonzero. Orientation matrices are ignored:
    volumes are treated as axis-aligned.
    """
    with open(path, "rb") as fh:
        head = fh.read(2)
    opener = gzip.open if head == b"\x1f\x8b" else open
    with opener(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < 348:
        raise DataError(f"not a NIfTI-1 file: only {len(blob)} bytes")
    magic = blob[344:348]
    if magic not in (b"n+1\x00", b"ni1\x00"):
        raise DataError(f"bad magic {magic!r}: not a NIfTI-1 file")
    if magic == b"ni1\x00":
        raise DataError("two-file NIfTI-1 (.hdr/.img) is not supported")
    end = "<"
    (sizeof_hdr,) = struct.unpack_from("<i", blob, 0)
    if sizeof_hdr != 348:
        end = ">"
        (sizeof_hdr,) = struct.unpack_from(">i", blob, 0)
        if sizeof_hdr != 348:
            raise DataError(f"bad sizeof_hdr {sizeof_hdr}: not a NIfTI-1 file")
    dim = struct.unpack_from(end + "8h", blob, 40)
    datatype, bitpix = struct.unpack_from(end + "2h", blob, 70)
    pixdim = struct.unpack_from(end + "8f", blob, 76)
    (vox_offset,) = struct.unpack_from(end + "f", blob, 108)
    scl_slope, scl_inter = struct.unpack_from(end + "2f", blob, 112)

    ndim = dim[0]
    if ndim < 1 or ndim > 7:
        raise DataError(f"invalid dim[0]={ndim}")
    shape = [max(1, dim[i]) for i in range(1, ndim + 1)]
    if any(n > 1 for n in shape[3:]):
        raise DataError(f"volume has {ndim} nontrivial dimensions; only scalar 3D is supported")
    shape = (shape + [1, 1, 1])[:3]
    if datatype not in _NIFTI_DTYPES:
        raise DataError(f"unsupported NIfTI datatype code {datatype}")
    dtype = np.dtype(end + _NIFTI_DTYPES[datatype])
    if dtype.itemsize * 8 != bitpix:
        raise DataError(f"bitpix {bitpix} inconsistent with datatype {datatype}")

    offset = int(vox_offset)
    count = shape[0] * shape[1] * shape[2]
    if len(blob) < offset + count * dtype.itemsize:
        raise DataError("truncated NIfTI payload")
    raw = np.frombuffer(blob, dtype=dtype, count=count, offset=offset)
    data = raw.reshape(tuple(shape), order="F").astype(np.float32)
    if scl_slope != 0.0:
        data = data * np.float32(scl_slope) + np.float32(scl_inter)
    spacing = tuple(float(pixdim[i]) if pixdim[i] > 0 else 1.0 for i in (1, 2, 3))
    return Volume(data, spacing)
