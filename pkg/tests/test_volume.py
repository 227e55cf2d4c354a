import json

import numpy as np
import pytest

from hotdist.synth import SplitMix64
from hotdist.volume import (
    UNKNOWN_LABEL,
    ClassSchema,
    CropMeta,
    LabelVolume,
    SchemaError,
    Volume,
    VolumeFormatError,
    read_crop,
    read_schema,
    read_volume,
    validate_labels,
    write_crop,
    write_schema,
    write_volume,
)

from helpers import random_label_volume, random_volume


def _write_raw(tmp_path, header, payload):
    (tmp_path / "v.bin").write_bytes(payload)
    header = {"data": "v.bin", **header}
    path = tmp_path / "v.hdvol.json"
    path.write_text(json.dumps(header))
    return path


def test_read_single_zero_float(tmp_path):
    path = _write_raw(tmp_path, {"shape": [1, 1, 1], "dtype": "f32", "spacing": [1, 1, 1]}, b"\x00" * 4)
    v = read_volume(path)
    assert v.shape == (1, 1, 1)
    assert v.dtype == np.float32
    assert v.data[0, 0, 0] == 0.0


def test_byte_length_mismatch(tmp_path):
    path = _write_raw(tmp_path, {"shape": [2, 2, 2], "dtype": "u32", "spacing": [1, 1, 1]}, b"\x00" * 31)
    with pytest.raises(VolumeFormatError, match="needs 32"):
        read_volume(path)


@pytest.mark.parametrize(
    "header, message",
    [
        ({"shape": [1, 1, 1], "dtype": "i16", "spacing": [1, 1, 1]}, "unknown dtype"),
        ({"shape": [1, 1, 1], "dtype": "u8", "spacing": [1, 0, 1]}, "spacing"),
        ({"shape": [1, 1, 1], "dtype": "u8", "spacing": [1, -2, 1]}, "spacing"),
        ({"shape": [1, 0, 1], "dtype": "u8", "spacing": [1, 1, 1]}, "shape"),
    ],
)
def test_bad_headers(tmp_path, header, message):
    path = _write_raw(tmp_path, header, b"\x00")
    with pytest.raises(VolumeFormatError, match=message):
        read_volume(path)


def test_missing_files(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_volume(tmp_path / "nope.hdvol.json")
    path = _write_raw(tmp_path, {"shape": [1, 1, 1], "dtype": "u8"}, b"\x00")
    (tmp_path / "v.bin").unlink()
    with pytest.raises(FileNotFoundError):
        read_volume(path)


def test_write_zeros_payload(tmp_path):
    v = Volume(np.zeros((2, 2, 2), np.float32))
    write_volume(v, tmp_path / "z.hdvol.json")
    assert (tmp_path / "z.bin").read_bytes() == b"\x00" * 32
    header = json.loads((tmp_path / "z.hdvol.json").read_text())
    assert header == {"shape": [2, 2, 2], "spacing": [1.0, 1.0, 1.0], "dtype": "f32", "data": "z.bin"}


def test_write_is_deterministic(tmp_path):
    v = random_volume(SplitMix64(3), np.float64, (3, 4, 5))
    write_volume(v, tmp_path / "a" / "v.hdvol.json")
    write_volume(v, tmp_path / "b" / "v.hdvol.json")
    for name in ("v.hdvol.json", "v.bin"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


@pytest.mark.parametrize("dtype", [np.uint8, np.uint32, np.float32, np.float64])
def test_round_trip_random(tmp_path, dtype):
    rng = SplitMix64(17)
    for k in range(25):
        v = random_volume(rng, dtype)
        back = read_volume(write_volume(v, tmp_path / f"r{k}.hdvol.json"))
        assert back.identical(v)


def test_payload_is_little_endian(tmp_path):
    v = Volume(np.array([[[1]]], dtype=">u4"))
    write_volume(v, tmp_path / "e.hdvol.json")
    assert (tmp_path / "e.bin").read_bytes() == b"\x01\x00\x00\x00"


def test_linearization_ramp(tmp_path):
    Z, Y, X = 3, 4, 5
    ramp = np.zeros((Z, Y, X), np.uint32)
    for z in range(Z):
        for y in range(Y):
            for x in range(X):
                ramp[z, y, x] = 10000 * z + 100 * y + x
    write_volume(Volume(ramp), tmp_path / "ramp.hdvol.json")
    flat = np.frombuffer((tmp_path / "ramp.bin").read_bytes(), dtype="<u4")
    for z, y, x in [(0, 0, 0), (2, 3, 4), (1, 0, 3), (0, 2, 1)]:
        assert flat[(z * Y + y) * X + x] == 10000 * z + 100 * y + x


def test_volume_is_immutable():
    src = np.zeros((2, 2, 2), np.uint8)
    v = Volume(src)
    src[0, 0, 0] = 9
    assert v.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1


def test_volume_rejects_bad_input():
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2)))
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2, 2), np.int16))
    with pytest.raises(VolumeFormatError):
        Volume(np.zeros((2, 2, 2)), (1.0, 0.0, 1.0))


def test_schema_invariants():
    with pytest.raises(SchemaError):
        ClassSchema(((1, "a"), (1, "b")))
    with pytest.raises(SchemaError):
        ClassSchema(((1, "a"), (2, "a")))
    with pytest.raises(SchemaError):
        ClassSchema(((1, ""),))
    with pytest.raises(SchemaError):
        ClassSchema(((UNKNOWN_LABEL, "x"),))
    with pytest.raises(SchemaError):
        ClassSchema(((1, "a"), (2, "b")), (frozenset({1}),))
    with pytest.raises(SchemaError):
        ClassSchema(((1, "a"), (2, "b")), (frozenset({1, 3}),))


def test_schema_and_crop_files(tmp_path):
    schema = ClassSchema(((0, "background"), (1, "mito"), (2, "nucleus")), (frozenset({1, 2}),))
    write_schema(schema, tmp_path / "s.schema.json")
    raw = json.loads((tmp_path / "s.schema.json").read_text())
    assert raw["classes"][1] == {"id": 1, "name": "mito"}
    assert raw["exclusivity_groups"] == [[1, 2]]
    assert read_schema(tmp_path / "s.schema.json") == schema

    meta = CropMeta(frozenset({2, 1}), True)
    write_crop(meta, tmp_path / "c.crop.json")
    assert json.loads((tmp_path / "c.crop.json").read_text()) == {"annotated_classes": [1, 2], "closed_world": True}
    assert read_crop(tmp_path / "c.crop.json") == meta


def _lv(labels, schema, annotated=()):
    return LabelVolume(Volume(np.asarray(labels, np.uint32)), schema, CropMeta(frozenset(annotated)))


def test_validate_all_unknown_is_legal():
    schema = ClassSchema(((1, "a"),))
    assert validate_labels(_lv(np.full((2, 2, 2), UNKNOWN_LABEL), schema)) == []


def test_validate_undeclared_label():
    schema = ClassSchema(((1, "a"),))
    labels = np.ones((2, 2, 2))
    labels[1, 0, 1] = 7
    problems = validate_labels(_lv(labels, schema))
    assert len(problems) == 1
    assert problems[0].index == (1, 0, 1)
    assert problems[0].rule == "undeclared_label"


def test_validate_dtype_and_annotations():
    schema = ClassSchema(((1, "a"),))
    lv = LabelVolume(Volume(np.ones((1, 1, 2), np.uint8)), schema, CropMeta(frozenset({5})))
    rules = {p.rule for p in validate_labels(lv)}
    assert rules == {"dtype", "annotated_classes"}


def test_validate_matches_membership_scan():
    rng = SplitMix64(99)
    for _ in range(40):
        lv = random_label_volume(rng, shape=(1 + rng.randint(8), 1 + rng.randint(8), 1 + rng.randint(8)))
        labels = lv.labels.copy()
        # corrupt a few voxels with values that may or may not be declared
        for _ in range(rng.randint(4)):
            idx = tuple(rng.randint(n) for n in labels.shape)
            labels[idx] = rng.randint(60)
        lv = LabelVolume(Volume(labels), lv.schema, lv.meta)
        legal = set(lv.schema.ids) | {UNKNOWN_LABEL}
        expected = {
            (z, y, x)
            for z in range(labels.shape[0])
            for y in range(labels.shape[1])
            for x in range(labels.shape[2])
            if int(labels[z, y, x]) not in legal
        }
        got = {p.index for p in validate_labels(lv)}
        assert got == expected
