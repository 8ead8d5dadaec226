"""NIfTI-1 header codec, volume reader/writer and 8-bit PNG slice export.

Only single-file (``n+1``) or header-only (``ni1``) NIfTI-1 headers are
handled, with voxel types uint8, int16, float32 and float64. The sform/qform
fields are decoded and written back untouched but never applied: slices are
taken in stored voxel order.
"""

from __future__ import annotations

import dataclasses
import gzip
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Tuple

import numpy as np

from .errors import OnnSegError, ValidationError

HEADER_SIZE = 348
MAGIC_SINGLE = b"n+1\x00"
MAGIC_PAIR = b"ni1\x00"

# datatype code -> (numpy dtype char, bitpix)
DATATYPES = {
    2: ("u1", 8),    # uint8
    4: ("i2", 16),   # int16
    16: ("f4", 32),  # float32
    64: ("f8", 64),  # float64
}
_CODE_BY_DTYPE = {np.dtype(v[0]): k for k, v in DATATYPES.items()}

# (field, struct code) in file order; the layout sums to 348 bytes
_LAYOUT = [
    ("sizeof_hdr", "i"), ("data_type", "10s"), ("db_name", "18s"), ("extents", "i"),
    ("session_error", "h"), ("regular", "c"), ("dim_info", "B"), ("dim", "8h"),
    ("intent_p1", "f"), ("intent_p2", "f"), ("intent_p3", "f"), ("intent_code", "h"),
    ("datatype", "h"), ("bitpix", "h"), ("slice_start", "h"), ("pixdim", "8f"),
    ("vox_offset", "f"), ("scl_slope", "f"), ("scl_inter", "f"), ("slice_end", "h"),
    ("slice_code", "B"), ("xyzt_units", "B"), ("cal_max", "f"), ("cal_min", "f"),
    ("slice_duration", "f"), ("toffset", "f"), ("glmax", "i"), ("glmin", "i"),
    ("descrip", "80s"), ("aux_file", "24s"), ("qform_code", "h"), ("sform_code", "h"),
    ("quatern_b", "f"), ("quatern_c", "f"), ("quatern_d", "f"), ("qoffset_x", "f"),
    ("qoffset_y", "f"), ("qoffset_z", "f"), ("srow_x", "4f"), ("srow_y", "4f"),
    ("srow_z", "4f"), ("intent_name", "16s"), ("magic", "4s"),
]
_FORMAT = "".join(code for _, code in _LAYOUT)
assert struct.calcsize("<" + _FORMAT) == HEADER_SIZE


class NiftiError(OnnSegError):
    pass


class NotNiftiError(NiftiError):
    pass


class NiftiFormatError(NiftiError):
    pass


class UnsupportedDatatypeError(NiftiError):
    def __init__(self, code: int):
        super().__init__(f"unsupported NIfTI datatype code {code}")
        self.code = code


class TruncatedDataError(NiftiError):
    def __init__(self, expected: int, actual: int, what: str = "data section"):
        super().__init__(f"truncated {what}: expected {expected} bytes, got {actual}")
        self.expected = expected
        self.actual = actual


@dataclass
class NiftiHeader:
    """All 348-byte NIfTI-1 header fields.

    Float fields hold values exactly representable in float32, so encoding
    and decoding round-trip field-for-field. ``endian`` records the byte
    order the header was read in and is not part of equality.
    """

    dim: Tuple[int, ...] = (3, 1, 1, 1, 1, 1, 1, 1)
    datatype: int = 16
    bitpix: int = 32
    pixdim: Tuple[float, ...] = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0)
    vox_offset: float = 352.0
    scl_slope: float = 1.0
    scl_inter: float = 0.0
    magic: bytes = MAGIC_SINGLE
    sizeof_hdr: int = HEADER_SIZE
    data_type: bytes = b"\x00" * 10
    db_name: bytes = b"\x00" * 18
    extents: int = 0
    session_error: int = 0
    regular: bytes = b"r"
    dim_info: int = 0
    intent_p1: float = 0.0
    intent_p2: float = 0.0
    intent_p3: float = 0.0
    intent_code: int = 0
    slice_start: int = 0
    slice_end: int = 0
    slice_code: int = 0
    xyzt_units: int = 2  # millimetres
    cal_max: float = 0.0
    cal_min: float = 0.0
    slice_duration: float = 0.0
    toffset: float = 0.0
    glmax: int = 0
    glmin: int = 0
    descrip: bytes = b"\x00" * 80
    aux_file: bytes = b"\x00" * 24
    qform_code: int = 0
    sform_code: int = 0
    quatern_b: float = 0.0
    quatern_c: float = 0.0
    quatern_d: float = 0.0
    qoffset_x: float = 0.0
    qoffset_y: float = 0.0
    qoffset_z: float = 0.0
    srow_x: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    srow_y: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    srow_z: Tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    intent_name: bytes = b"\x00" * 16
    endian: str = field(default="<", compare=False)

    @property
    def shape(self) -> Tuple[int, ...]:
        return tuple(self.dim[1:1 + self.dim[0]])

    @property
    def spacing(self) -> Tuple[float, ...]:
        return tuple(self.pixdim[1:1 + self.dim[0]])

    def validate(self) -> None:
        if self.sizeof_hdr != HEADER_SIZE:
            raise ValidationError(f"sizeof_hdr must be {HEADER_SIZE}, got {self.sizeof_hdr}")
        if self.magic not in (MAGIC_SINGLE, MAGIC_PAIR):
            raise ValidationError(f"bad magic {self.magic!r}")
        if len(self.dim) != 8 or not 1 <= self.dim[0] <= 7:
            raise ValidationError(f"dim[0] must be in 1..7, got dim={self.dim}")
        if any(d < 1 for d in self.dim[1:1 + self.dim[0]]):
            raise ValidationError(f"dim[1..dim[0]] must be >= 1, got dim={self.dim}")
        if self.datatype not in DATATYPES:
            raise ValidationError(f"unsupported datatype code {self.datatype}")
        if self.bitpix != DATATYPES[self.datatype][1]:
            raise ValidationError(
                f"bitpix {self.bitpix} inconsistent with datatype {self.datatype}")
        if self.magic == MAGIC_SINGLE and self.vox_offset < 352:
            raise ValidationError(f"vox_offset {self.vox_offset} < 352 for single-file NIfTI")


def _unpack(buf: bytes, endian: str) -> dict:
    values = struct.unpack(endian + _FORMAT, buf[:HEADER_SIZE])
    out, i = {}, 0
    for name, code in _LAYOUT:
        count = int(code[:-1]) if code[:-1].isdigit() and code[-1] != "s" else 1
        if count == 1:
            out[name] = values[i]
        else:
            out[name] = tuple(values[i:i + count])
        i += count
    return out


def parse_header(buf: bytes) -> NiftiHeader:
    if len(buf) < HEADER_SIZE:
        raise TruncatedDataError(HEADER_SIZE, len(buf), "header")
    for endian in ("<", ">"):
        if struct.unpack(endian + "i", buf[:4])[0] == HEADER_SIZE:
            break
    else:
        raise NotNiftiError("sizeof_hdr is not 348 in either byte order")
    fields = _unpack(buf, endian)
    if fields["magic"] not in (MAGIC_SINGLE, MAGIC_PAIR):
        raise NiftiFormatError(f"bad NIfTI-1 magic {fields['magic']!r}")
    if fields["datatype"] not in DATATYPES:
        raise UnsupportedDatatypeError(fields["datatype"])
    fields["endian"] = endian
    return NiftiHeader(**fields)


def write_header(h: NiftiHeader, endian: str = None) -> bytes:
    h.validate()
    endian = endian or h.endian
    values = []
    for name, code in _LAYOUT:
        v = getattr(h, name)
        if isinstance(v, tuple):
            values.extend(v)
        else:
            values.append(v)
    return struct.pack(endian + _FORMAT, *values)


def _f32(x: float) -> float:
    return float(np.float32(x))


@dataclass
class Volume:
    extents: Tuple[int, int, int]
    spacing_mm: Tuple[float, float, float]
    voxels: np.ndarray  # flat, x fastest

    def __post_init__(self):
        self.voxels = np.asarray(self.voxels, dtype=np.float64).reshape(-1)
        x, y, z = self.extents
        if self.voxels.size != x * y * z:
            raise ValidationError(
                f"{self.voxels.size} voxels do not fill extents {self.extents}")

    @property
    def intensity_range(self) -> Tuple[float, float]:
        return float(self.voxels.min()), float(self.voxels.max())

    def array(self) -> np.ndarray:
        """Voxels as a (Z, Y, X) array view."""
        x, y, z = self.extents
        return self.voxels.reshape(z, y, x)

    @classmethod
    def from_array(cls, arr_zyx: np.ndarray, spacing_mm=(1.0, 1.0, 1.0)) -> "Volume":
        z, y, x = arr_zyx.shape
        return cls((x, y, z), tuple(spacing_mm), np.asarray(arr_zyx).reshape(-1))


def _open(path: Path) -> bytes:
    raw = path.read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_volume(path) -> Volume:
    path = Path(path)
    raw = _open(path)
    h = parse_header(raw)
    if h.magic == MAGIC_PAIR:
        img = path.with_suffix(".img")
        data, offset = _open(img), int(h.vox_offset)
    else:
        data, offset = raw, int(h.vox_offset)
    shape = h.shape
    if len(shape) < 3:
        shape = shape + (1,) * (3 - len(shape))
    elif len(shape) > 3:
        if any(d != 1 for d in shape[3:]):
            raise NiftiFormatError(f"only 3-D volumes are supported, got dims {h.shape}")
        shape = shape[:3]
    dt_char, bitpix = DATATYPES[h.datatype]
    count = int(np.prod(shape))
    expected = count * bitpix // 8
    actual = max(len(data) - offset, 0)
    if actual < expected:
        raise TruncatedDataError(expected, actual)
    vox = np.frombuffer(data, dtype=np.dtype(h.endian + dt_char), count=count, offset=offset)
    vox = vox.astype(np.float64)
    if h.scl_slope != 0:
        vox = vox * h.scl_slope + h.scl_inter
    spacing = tuple(float(s) for s in (h.pixdim[1:4] + (1.0,) * 3)[:3])
    return Volume(tuple(int(s) for s in shape), spacing, vox)


def volume_header(vol: Volume, dtype="f4", scl_slope=1.0, scl_inter=0.0) -> NiftiHeader:
    try:
        code = _CODE_BY_DTYPE[np.dtype(dtype)]
    except KeyError:
        raise ValidationError(f"cannot store voxels as {dtype!r}") from None
    x, y, z = vol.extents
    sx, sy, sz = (_f32(s) for s in vol.spacing_mm)
    return NiftiHeader(dim=(3, x, y, z, 1, 1, 1, 1), datatype=code, bitpix=DATATYPES[code][1],
                       pixdim=(1.0, sx, sy, sz, 1.0, 1.0, 1.0, 1.0),
                       scl_slope=_f32(scl_slope), scl_inter=_f32(scl_inter))


def write_volume(path, vol: Volume, dtype="f4", header: NiftiHeader = None) -> None:
    """Write a single-file NIfTI-1 volume; ``.gz`` suffix gzips the output.

    Voxels are stored raw (no scaling applied on write).
    """
    path = Path(path)
    h = header if header is not None else volume_header(vol, dtype)
    h = dataclasses.replace(h, magic=MAGIC_SINGLE, vox_offset=max(h.vox_offset, 352.0))
    dt_char, _ = DATATYPES[h.datatype]
    payload = vol.voxels.astype(np.dtype(h.endian + dt_char)).tobytes()
    hdr = write_header(h)
    pad = b"\x00" * (int(h.vox_offset) - HEADER_SIZE)
    blob = hdr + pad + payload
    if path.suffix == ".gz":
        blob = gzip.compress(blob, mtime=0)
    path.write_bytes(blob)


def slice_axial(vol: Volume, z: int) -> np.ndarray:
    """(Y, X) image ``img[y, x] = voxels[x + X*y + X*Y*z]``."""
    nz = vol.extents[2]
    if not 0 <= z < nz:
        raise IndexError(f"slice index {z} out of range for {nz} slices")
    return vol.array()[z].copy()


def to_uint8(image: np.ndarray, lo: float, hi: float) -> np.ndarray:
    """Map [lo, hi] -> [0, 255], clamp, round half away from zero."""
    if not lo < hi:
        raise ValidationError(f"PNG range needs lo < hi, got ({lo}, {hi})")
    scaled = (np.asarray(image, dtype=np.float64) - lo) * (255.0 / (hi - lo))
    scaled = np.clip(scaled, 0.0, 255.0)
    return np.floor(scaled + 0.5).astype(np.uint8)


def write_png_gray(image: np.ndarray, path, value_range=(0.0, 1.0)) -> None:
    """8-bit grayscale, non-interlaced PNG."""
    from PIL import Image

    pixels = to_uint8(image, *value_range)
    Image.fromarray(pixels).save(Path(path), format="PNG", optimize=False)
