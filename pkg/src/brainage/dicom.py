"""Minimal DICOM pixel reader for single-file grayscale images.

Handles Part-10 files (128-byte preamble + DICM marker) in the implicit
and explicit little-endian transfer syntaxes, which covers uncompressed
MR/CT exports.  Compressed syntaxes and color images are rejected with a
clear error.  Multi-frame files come back as a (frames, rows, cols) volume.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

IMPLICIT_VR_LE = "1.2.840.10008.1.2"
EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"

# VRs whose explicit encoding uses a 2-byte reserved field + 4-byte length.
_LONG_VRS = {b"OB", b"OW", b"OF", b"OD", b"OL", b"OV", b"SQ", b"UC", b"UR",
             b"UT", b"UN", b"SV", b"UV"}

_TAG_ROWS = (0x0028, 0x0010)
_TAG_COLS = (0x0028, 0x0011)
_TAG_BITS_ALLOC = (0x0028, 0x0100)
_TAG_PIXEL_REP = (0x0028, 0x0103)
_TAG_SAMPLES = (0x0028, 0x0002)
_TAG_FRAMES = (0x0028, 0x0008)
_TAG_SLOPE = (0x0028, 0x1053)
_TAG_INTERCEPT = (0x0028, 0x1052)
_TAG_PIXEL_DATA = (0x7FE0, 0x0010)
_TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)


class DicomError(ValueError):
    pass


class _Stream:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def read(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise DicomError("truncated DICOM stream")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def u16(self) -> int:
        return struct.unpack("<H", self.read(2))[0]

    def u32(self) -> int:
        return struct.unpack("<I", self.read(4))[0]

    @property
    def exhausted(self) -> bool:
        return self.pos >= len(self.data)


def _read_element(s: _Stream, explicit: bool):
    """Return (tag, value_bytes_or_None, length). Sequences are skipped."""
    group = s.u16()
    elem = s.u16()
    tag = (group, elem)

    if group == 0xFFFE:  # item / delimiter structure inside sequences
        length = s.u32()
        return tag, None, length

    if explicit:
        vr = s.read(2)
        if vr in _LONG_VRS:
            s.read(2)
            length = s.u32()
        else:
            length = s.u16()
        is_seq = vr == b"SQ"
    else:
        length = s.u32()
        is_seq = False  # without a VR, undefined length is the only SQ signal

    if length == 0xFFFFFFFF or is_seq:
        _skip_value(s, length, explicit)
        return tag, None, length
    return tag, s.read(length), length


def _skip_value(s: _Stream, length: int, explicit: bool) -> None:
    """Skip a sequence value, recursing through undefined-length nesting."""
    if length != 0xFFFFFFFF:
        s.read(length)
        return
    while True:
        group = s.u16()
        elem = s.u16()
        ln = s.u32()
        if (group, elem) == (0xFFFE, 0xE0DD):  # sequence delimiter
            return
        if (group, elem) == (0xFFFE, 0xE000):  # item
            if ln == 0xFFFFFFFF:
                _skip_item_undefined(s)
            else:
                s.read(ln)
        else:
            raise DicomError(f"unexpected tag in sequence: {(group, elem)}")


def _skip_item_undefined(s: _Stream) -> None:
    while True:
        group = s.u16()
        elem = s.u16()
        if (group, elem) == (0xFFFE, 0xE00D):  # item delimiter
            s.u32()
            return
        s.pos -= 4
        _read_element(s, explicit=True)


def read_dicom(path: str | Path) -> np.ndarray:
    """Decode pixel data as float64, rescale slope/intercept applied.

    Returns (rows, cols) for single-frame files, (frames, rows, cols)
    otherwise.
    """
    data = Path(path).read_bytes()
    if len(data) < 132 or data[128:132] != b"DICM":
        raise DicomError(f"not a Part-10 DICOM file: {path}")
    s = _Stream(data, 132)

    # File meta group is always explicit VR little endian.
    syntax = EXPLICIT_VR_LE
    while not s.exhausted:
        mark = s.pos
        group = struct.unpack("<H", data[s.pos:s.pos + 2])[0]
        if group != 0x0002:
            s.pos = mark
            break
        tag, value, _ = _read_element(s, explicit=True)
        if tag == _TAG_TRANSFER_SYNTAX and value is not None:
            syntax = value.decode("ascii").rstrip("\x00 ")
    if syntax not in (IMPLICIT_VR_LE, EXPLICIT_VR_LE):
        raise DicomError(f"unsupported transfer syntax {syntax} in {path}")
    explicit = syntax == EXPLICIT_VR_LE

    fields: dict = {}
    pixel_data = None
    while not s.exhausted:
        tag, value, _ = _read_element(s, explicit)
        if tag == _TAG_PIXEL_DATA:
            if value is None:
                raise DicomError("encapsulated (compressed) pixel data is unsupported")
            pixel_data = value
            break
        if value is not None:
            fields[tag] = value

    if pixel_data is None:
        raise DicomError(f"no pixel data in {path}")

    def _us(tag, default=None):
        raw = fields.get(tag)
        if raw is None:
            if default is None:
                raise DicomError(f"missing required tag {tag} in {path}")
            return default
        return struct.unpack("<H", raw[:2])[0]

    def _str(tag, default=""):
        raw = fields.get(tag)
        return raw.decode("ascii").strip("\x00 ") if raw else default

    rows = _us(_TAG_ROWS)
    cols = _us(_TAG_COLS)
    bits = _us(_TAG_BITS_ALLOC, 16)
    signed = _us(_TAG_PIXEL_REP, 0) == 1
    samples = _us(_TAG_SAMPLES, 1)
    frames = int(_str(_TAG_FRAMES, "1") or "1")
    slope = float(_str(_TAG_SLOPE, "1") or "1")
    intercept = float(_str(_TAG_INTERCEPT, "0") or "0")

    if samples != 1:
        raise DicomError(f"only grayscale DICOM is supported, got {samples} samples/pixel")
    if bits == 8:
        dtype = np.int8 if signed else np.uint8
    elif bits == 16:
        dtype = np.int16 if signed else np.uint16
    else:
        raise DicomError(f"unsupported bits allocated: {bits}")

    expected = rows * cols * frames * (bits // 8)
    if len(pixel_data) < expected:
        raise DicomError(f"pixel data truncated: {len(pixel_data)} < {expected}")
    arr = np.frombuffer(pixel_data[:expected], dtype=dtype).astype(np.float64)
    arr = arr * slope + intercept
    if frames > 1:
        return arr.reshape(frames, rows, cols)
    return arr.reshape(rows, cols)
