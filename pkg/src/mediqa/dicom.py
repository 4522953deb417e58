"""Minimal DICOM Part-10 metadata reader.

Only Explicit VR Little Endian is supported, and only four tags are
extracted: Modality (0008,0060), BodyPartExamined (0018,0015), Exposure
(0018,1152), and MagneticFieldStrength (0018,0087). Parsing walks data
elements with every read bounds-checked, skips sequences, and stops at
pixel data. Pixel decoding is out of scope; DICOM is a label source here.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

from .errors import (DicomParseError, NotDicomError,
                     UnsupportedTransferSyntaxError)

PREAMBLE_LENGTH = 128
MAGIC = b"DICM"

EXPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2.1"
IMPLICIT_VR_LITTLE_ENDIAN = "1.2.840.10008.1.2"

TAG_MODALITY = (0x0008, 0x0060)
TAG_BODY_PART = (0x0018, 0x0015)
TAG_EXPOSURE = (0x0018, 0x1152)
TAG_FIELD_STRENGTH = (0x0018, 0x0087)
TAG_PIXEL_DATA = (0x7FE0, 0x0010)
TAG_TRANSFER_SYNTAX = (0x0002, 0x0010)

_ITEM = (0xFFFE, 0xE000)
_ITEM_DELIM = (0xFFFE, 0xE00D)
_SEQ_DELIM = (0xFFFE, 0xE0DD)

# VRs that use the 4-byte length form (2 reserved bytes + u32 length).
_LONG_VRS = {"OB", "OD", "OF", "OL", "OV", "OW", "SQ", "UC", "UR", "UT", "UN"}
_ALL_VRS = _LONG_VRS | {
    "AE", "AS", "AT", "CS", "DA", "DS", "DT", "FL", "FD", "IS", "LO", "LT",
    "PN", "SH", "SL", "SS", "ST", "TM", "UI", "UL", "US",
}

_UNDEFINED = 0xFFFFFFFF


@dataclass
class DicomMeta:
    """The four acquisition fields this pipeline cares about."""

    modality: Optional[str] = None
    body_part: Optional[str] = None
    exposure_mAs: Optional[float] = None
    field_strength_T: Optional[float] = None

    def has_physical_parameter(self) -> bool:
        return self.exposure_mAs is not None or self.field_strength_T is not None


class _Cursor:
    def __init__(self, data: bytes, pos: int = 0):
        self.data = data
        self.pos = pos

    def remaining(self) -> int:
        return len(self.data) - self.pos

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise DicomParseError(f"truncated while reading {what}", self.pos)
        piece = self.data[self.pos:self.pos + n]
        self.pos += n
        return piece

    def u16(self, what: str) -> int:
        return int.from_bytes(self.take(2, what), "little")

    def u32(self, what: str) -> int:
        return int.from_bytes(self.take(4, what), "little")


def _read_tag(cur: _Cursor):
    group = cur.u16("element group")
    element = cur.u16("element number")
    return group, element


def _read_element(cur: _Cursor):
    """One explicit-VR data element: returns ((group, element), vr, value)."""
    start = cur.pos
    tag = _read_tag(cur)
    if tag[0] == 0xFFFE:
        # Item and delimiter pseudo-elements carry no VR.
        length = cur.u32("item length")
        return tag, "", length  # caller interprets the length
    vr = cur.take(2, "VR").decode("ascii", errors="replace")
    if vr not in _ALL_VRS:
        raise DicomParseError(f"unknown VR {vr!r}", start + 4)
    if vr in _LONG_VRS:
        cur.take(2, "reserved bytes")
        length = cur.u32("value length")
    else:
        length = cur.u16("value length")
    if length == _UNDEFINED:
        if vr in ("SQ", "UN"):
            _skip_undefined_sequence(cur)
            return tag, vr, None
        raise DicomParseError(f"undefined length on VR {vr}", start)
    if vr == "SQ":
        cur.take(length, "sequence value")
        return tag, vr, None
    value = cur.take(length, f"value of ({tag[0]:04X},{tag[1]:04X})")
    return tag, vr, value


def _skip_undefined_sequence(cur: _Cursor) -> None:
    """Skip items until the sequence delimitation tag."""
    while True:
        tag = _read_tag(cur)
        length = cur.u32("item length")
        if tag == _SEQ_DELIM:
            return
        if tag != _ITEM:
            raise DicomParseError(
                f"expected sequence item, got ({tag[0]:04X},{tag[1]:04X})",
                cur.pos - 8)
        if length == _UNDEFINED:
            _skip_undefined_item(cur)
        else:
            cur.take(length, "sequence item")


def _skip_undefined_item(cur: _Cursor) -> None:
    """Skip nested elements until the item delimitation tag."""
    while True:
        if cur.remaining() >= 8:
            peek_group = int.from_bytes(cur.data[cur.pos:cur.pos + 2], "little")
            peek_elem = int.from_bytes(cur.data[cur.pos + 2:cur.pos + 4], "little")
            if (peek_group, peek_elem) == _ITEM_DELIM:
                cur.take(8, "item delimiter")
                return
        _read_element(cur)


def _decode_string(value: bytes) -> str:
    return value.decode("ascii", errors="replace").strip("\x00 ").strip()


def _decode_number(value: bytes, pos: int, what: str) -> float:
    text = _decode_string(value)
    try:
        return float(text)
    except ValueError:
        raise DicomParseError(f"malformed numeric string {text!r} in {what}",
                              pos) from None


def parse_dicom_meta(data: bytes) -> DicomMeta:
    """Extract acquisition metadata from a Part-10 byte stream."""
    if len(data) < PREAMBLE_LENGTH + 4 or \
            data[PREAMBLE_LENGTH:PREAMBLE_LENGTH + 4] != MAGIC:
        raise NotDicomError("missing DICM preamble magic")
    cur = _Cursor(data, PREAMBLE_LENGTH + 4)

    transfer_syntax = None
    # File meta group (0002,...) is always explicit little endian.
    while cur.remaining() >= 8:
        peek_group = int.from_bytes(cur.data[cur.pos:cur.pos + 2], "little")
        if peek_group != 0x0002:
            break
        tag, _, value = _read_element(cur)
        if tag == TAG_TRANSFER_SYNTAX and value is not None:
            transfer_syntax = _decode_string(value)

    if transfer_syntax is None:
        # No file meta; sniff the first dataset element for a valid VR.
        if cur.remaining() >= 6:
            sniff = cur.data[cur.pos + 4:cur.pos + 6].decode("ascii",
                                                             errors="replace")
            if sniff not in _ALL_VRS:
                raise UnsupportedTransferSyntaxError(
                    "no transfer syntax declared and first element is not "
                    "explicit VR (implicit VR is unsupported)")
    elif transfer_syntax == IMPLICIT_VR_LITTLE_ENDIAN:
        raise UnsupportedTransferSyntaxError(
            "implicit VR little endian is unsupported")
    elif transfer_syntax != EXPLICIT_VR_LITTLE_ENDIAN:
        raise UnsupportedTransferSyntaxError(
            f"unsupported transfer syntax {transfer_syntax!r}")

    meta = DicomMeta()
    while cur.remaining() > 0:
        element_pos = cur.pos
        tag, _, value = _read_element(cur)
        if tag == TAG_PIXEL_DATA:
            break
        if value is None:
            continue
        if tag == TAG_MODALITY:
            meta.modality = _decode_string(value)
        elif tag == TAG_BODY_PART:
            meta.body_part = _decode_string(value)
        elif tag == TAG_EXPOSURE:
            meta.exposure_mAs = _decode_number(value, element_pos, "Exposure")
        elif tag == TAG_FIELD_STRENGTH:
            meta.field_strength_T = _decode_number(value, element_pos,
                                                   "MagneticFieldStrength")
    return meta
