"""DICOM metadata extraction against hand-authored Part-10 fixtures, plus
truncation/corruption fuzzing that must only ever produce typed errors."""

import struct

import numpy as np
import pytest

from mediqa.dicom import DicomMeta, parse_dicom_meta
from mediqa.errors import (DicomParseError, MedIQAError, NotDicomError,
                           UnsupportedTransferSyntaxError)

EXPLICIT_LE = b"1.2.840.10008.1.2.1\x00"
IMPLICIT_LE = b"1.2.840.10008.1.2\x00"


def element(group, elem, vr, value: bytes) -> bytes:
    """Encode one explicit-VR little-endian data element."""
    if len(value) % 2:
        value += b"\x00" if vr in ("UI", "OB") else b" "
    head = struct.pack("<HH", group, elem) + vr.encode()
    if vr in ("OB", "OW", "OF", "SQ", "UT", "UN"):
        return head + b"\x00\x00" + struct.pack("<I", len(value)) + value
    return head + struct.pack("<H", len(value)) + value


def part10(transfer_syntax=EXPLICIT_LE, body: bytes = b"",
           include_meta: bool = True) -> bytes:
    blob = b"\x00" * 128 + b"DICM"
    if include_meta:
        blob += element(0x0002, 0x0010, "UI", transfer_syntax)
    return blob + body


def standard_body() -> bytes:
    return (element(0x0008, 0x0060, "CS", b"CT")
            + element(0x0018, 0x0015, "CS", b"CHEST ")
            + element(0x0018, 0x1152, "IS", b"200 ")
            + element(0x0018, 0x0087, "DS", b"3.0 ")
            + element(0x7FE0, 0x0010, "OW", b"\x01\x02\x03\x04"))


class TestParsing:
    def test_extracts_all_four_tags(self):
        meta = parse_dicom_meta(part10(body=standard_body()))
        assert meta.modality == "CT"
        assert meta.body_part == "CHEST"
        assert meta.exposure_mAs == 200.0
        assert meta.field_strength_T == 3.0
        assert meta.has_physical_parameter()

    def test_missing_tags_stay_none(self):
        body = element(0x0008, 0x0060, "CS", b"MR")
        meta = parse_dicom_meta(part10(body=body))
        assert meta.modality == "MR"
        assert meta.exposure_mAs is None
        assert meta.field_strength_T is None
        assert not meta.has_physical_parameter()

    def test_stops_at_pixel_data(self):
        body = (element(0x7FE0, 0x0010, "OW", b"\x00" * 8)
                + element(0x0018, 0x1152, "IS", b"999 "))
        meta = parse_dicom_meta(part10(body=body))
        assert meta.exposure_mAs is None   # tag after pixel data is unread

    def test_skips_unrelated_elements(self):
        body = (element(0x0010, 0x0010, "PN", b"ANON^YMOUS")
                + element(0x0018, 0x0087, "DS", b"1.5"))
        meta = parse_dicom_meta(part10(body=body))
        assert meta.field_strength_T == 1.5

    def test_skips_defined_length_sequence(self):
        inner = element(0x0008, 0x0060, "CS", b"XX")
        item = struct.pack("<HHI", 0xFFFE, 0xE000, len(inner)) + inner
        body = (element(0x0008, 0x1115, "SQ", item)
                + element(0x0008, 0x0060, "CS", b"CT"))
        meta = parse_dicom_meta(part10(body=body))
        assert meta.modality == "CT"   # the nested CS was not mistaken for it

    def test_skips_undefined_length_sequence(self):
        inner = element(0x0018, 0x1152, "IS", b"5 ")
        item = struct.pack("<HHI", 0xFFFE, 0xE000, len(inner)) + inner
        seq_payload = item + struct.pack("<HHI", 0xFFFE, 0xE0DD, 0)
        head = struct.pack("<HH", 0x0008, 0x1115) + b"SQ\x00\x00" + \
            struct.pack("<I", 0xFFFFFFFF)
        body = head + seq_payload + element(0x0018, 0x1152, "IS", b"42")
        meta = parse_dicom_meta(part10(body=body))
        assert meta.exposure_mAs == 42.0


class TestErrors:
    def test_missing_magic_is_not_dicom(self):
        with pytest.raises(NotDicomError):
            parse_dicom_meta(b"\x00" * 200)

    def test_too_short_is_not_dicom(self):
        with pytest.raises(NotDicomError):
            parse_dicom_meta(b"\x00" * 50)

    def test_implicit_vr_unsupported(self):
        with pytest.raises(UnsupportedTransferSyntaxError):
            parse_dicom_meta(part10(transfer_syntax=IMPLICIT_LE,
                                    body=standard_body()))

    def test_big_endian_unsupported(self):
        with pytest.raises(UnsupportedTransferSyntaxError):
            parse_dicom_meta(part10(transfer_syntax=b"1.2.840.10008.1.2.2\x00"))

    def test_no_meta_sniffs_explicit_vr(self):
        blob = part10(include_meta=False, body=standard_body())
        meta = parse_dicom_meta(blob)
        assert meta.modality == "CT"

    def test_no_meta_implicit_layout_rejected(self):
        # implicit VR layout: tag then 4-byte length, no VR letters
        body = struct.pack("<HHI", 0x0008, 0x0060, 2) + b"CT"
        with pytest.raises(UnsupportedTransferSyntaxError):
            parse_dicom_meta(part10(include_meta=False, body=body))

    def test_truncated_mid_element_cites_offset(self):
        blob = part10(body=standard_body())
        cut = blob[:len(blob) - 7]
        with pytest.raises(DicomParseError) as exc:
            parse_dicom_meta(cut)
        assert exc.value.offset <= len(cut)
        assert "offset" in str(exc.value)

    def test_malformed_numeric_string(self):
        body = element(0x0018, 0x1152, "IS", b"20x0")
        with pytest.raises(DicomParseError):
            parse_dicom_meta(part10(body=body))


class TestFuzzing:
    def test_every_truncation_is_typed(self):
        blob = part10(body=standard_body())
        for cut in range(len(blob)):
            try:
                meta = parse_dicom_meta(blob[:cut])
            except MedIQAError:
                continue
            # clean-boundary truncations may parse a valid prefix
            assert isinstance(meta, DicomMeta)
            for value in (meta.modality, meta.body_part):
                assert value in (None, "CT", "CHEST")

    def test_random_corruptions_are_typed(self):
        blob = bytearray(part10(body=standard_body()))
        rng = np.random.default_rng(123)
        for _ in range(300):
            corrupted = bytearray(blob)
            for _ in range(int(rng.integers(1, 6))):
                corrupted[int(rng.integers(132, len(blob)))] = \
                    int(rng.integers(0, 256))
            try:
                meta = parse_dicom_meta(bytes(corrupted))
                assert isinstance(meta, DicomMeta)
            except MedIQAError:
                pass

    def test_random_garbage_after_magic_is_typed(self):
        rng = np.random.default_rng(7)
        for _ in range(200):
            size = int(rng.integers(0, 120))
            garbage = rng.integers(0, 256, size=size, dtype=np.uint8).tobytes()
            try:
                parse_dicom_meta(b"\x00" * 128 + b"DICM" + garbage)
            except MedIQAError:
                pass
