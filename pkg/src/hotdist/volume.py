"""Dense 3D volumes, class schemas, crop metadata and their on-disk format.

A volume on disk is a small JSON header (``<name>.hdvol.json``) next to a raw
little-endian payload in C order (z, y, x with x fastest).
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

UNKNOWN_LABEL = 4294967295

# on-disk dtype code -> little-endian numpy dtype
DTYPES = {
    "u8": np.dtype("<u1"),
    "u32": np.dtype("<u4"),
    "f32": np.dtype("<f4"),
    "f64": np.dtype("<f8"),
}
_CODES = {dt.newbyteorder("="): code for code, dt in DTYPES.items()}

HEADER_SUFFIX = ".hdvol.json"


class VolumeFormatError(ValueError):
    pass


class SchemaError(ValueError):
    pass


def dtype_code(dtype) -> str:
    dt = np.dtype(dtype).newbyteorder("=")
    try:
        return _CODES[dt]
    except KeyError:
        raise VolumeFormatError(f"unsupported dtype {dtype!r}") from None


@dataclass(frozen=True, eq=False)
class Volume:
    """An immutable 3D grid with physical voxel spacing.

    ``data`` is stored as a read-only, C-contiguous ``(z, y, x)`` array, so the
    value at ``(z, y, x)`` is ``data.ravel()[(z * Y + y) * X + x]``.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise VolumeFormatError(f"volume must be 3D, got shape {data.shape}")
        if min(data.shape) < 1:
            raise VolumeFormatError(f"shape components must be >= 1, got {data.shape}")
        dtype_code(data.dtype)
        spacing = tuple(float(s) for s in self.spacing)
        if len(spacing) != 3 or not all(np.isfinite(s) and s > 0 for s in spacing):
            raise VolumeFormatError(f"spacing must be 3 positive numbers, got {self.spacing}")
        data = np.array(data, dtype=data.dtype.newbyteorder("="), order="C", copy=True)
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", spacing)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def with_data(self, data: np.ndarray) -> "Volume":
        """New volume with the same spacing and different payload."""
        return Volume(data, self.spacing)

    def identical(self, other: "Volume") -> bool:
        """Bit-level equality of shape, spacing, dtype and payload."""
        return (
            self.shape == other.shape
            and self.spacing == other.spacing
            and self.dtype == other.dtype
            and self.data.tobytes() == other.data.tobytes()
        )


def _header_path(path) -> Path:
    path = Path(path)
    if not path.name.endswith(HEADER_SUFFIX):
        path = path.with_name(path.name + HEADER_SUFFIX)
    return path


def write_volume(v: Volume, header_path) -> Path:
    """Write ``v`` as a JSON header plus a raw payload next to it.

    The payload file is named after the header with ``.hdvol.json`` replaced by
    ``.bin``. Output bytes depend only on the volume, never on the run.
    """
    header_path = _header_path(header_path)
    stem = header_path.name[: -len(HEADER_SUFFIX)]
    payload_name = stem + ".bin"
    code = dtype_code(v.dtype)
    header = {
        "shape": [int(n) for n in v.shape],
        "spacing": list(v.spacing),
        "dtype": code,
        "data": payload_name,
    }
    header_path.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(v.data, dtype=DTYPES[code]).tobytes()
    with open(header_path.parent / payload_name, "wb") as f:
        f.write(payload)
    with open(header_path, "w", encoding="utf-8") as f:
        json.dump(header, f, indent=2)
        f.write("\n")
    return header_path


def read_volume(header_path) -> Volume:
    header_path = Path(header_path)
    with open(header_path, encoding="utf-8") as f:
        try:
            header = json.load(f)
        except json.JSONDecodeError as e:
            raise VolumeFormatError(f"{header_path}: invalid JSON header ({e})") from None

    for key in ("shape", "dtype", "data"):
        if key not in header:
            raise VolumeFormatError(f"{header_path}: header lacks {key!r}")
    code = header["dtype"]
    if code not in DTYPES:
        raise VolumeFormatError(f"{header_path}: unknown dtype {code!r}")
    shape = tuple(header["shape"])
    if len(shape) != 3 or not all(isinstance(n, int) and n >= 1 for n in shape):
        raise VolumeFormatError(f"{header_path}: bad shape {header['shape']!r}")
    spacing = tuple(header.get("spacing", (1.0, 1.0, 1.0)))
    if len(spacing) != 3 or not all(isinstance(s, (int, float)) and s > 0 for s in spacing):
        raise VolumeFormatError(f"{header_path}: spacing must be positive, got {spacing!r}")

    dt = DTYPES[code]
    payload_path = header_path.parent / header["data"]
    raw = payload_path.read_bytes()
    expected = int(np.prod(shape)) * dt.itemsize
    if len(raw) != expected:
        raise VolumeFormatError(
            f"{payload_path}: byte-length mismatch, got {len(raw)} bytes, needs {expected}"
        )
    data = np.frombuffer(raw, dtype=dt).reshape(shape)
    return Volume(data, spacing)


@dataclass(frozen=True)
class ClassSchema:
    """Class catalog and the groups of classes that cannot share a voxel."""

    classes: tuple[tuple[int, str], ...]
    exclusivity_groups: tuple[frozenset[int], ...] = ()

    def __post_init__(self):
        classes = tuple((int(cid), str(name)) for cid, name in self.classes)
        ids = [cid for cid, _ in classes]
        names = [name for _, name in classes]
        if len(set(ids)) != len(ids):
            raise SchemaError(f"duplicate class ids in {ids}")
        if len(set(names)) != len(names) or not all(names):
            raise SchemaError(f"class names must be unique and nonempty, got {names}")
        for cid in ids:
            if cid == UNKNOWN_LABEL or not 0 <= cid < UNKNOWN_LABEL:
                raise SchemaError(f"class id {cid} is not a usable uint32 class id")
        groups = tuple(frozenset(int(c) for c in g) for g in self.exclusivity_groups)
        for g in groups:
            if len(g) < 2:
                raise SchemaError(f"exclusivity group {sorted(g)} needs >= 2 members")
            missing = g - set(ids)
            if missing:
                raise SchemaError(f"exclusivity group references undeclared ids {sorted(missing)}")
        object.__setattr__(self, "classes", classes)
        object.__setattr__(self, "exclusivity_groups", groups)

    @property
    def ids(self) -> list[int]:
        return sorted(cid for cid, _ in self.classes)

    def name_of(self, cid: int) -> str:
        return dict(self.classes)[cid]

    def id_of(self, name: str) -> int | None:
        for cid, n in self.classes:
            if n == name:
                return cid
        return None

    def exclusive_with(self, cid: int) -> set[int]:
        """Classes sharing at least one exclusivity group with ``cid``."""
        out: set[int] = set()
        for g in self.exclusivity_groups:
            if cid in g:
                out |= g
        out.discard(cid)
        return out

    def to_json(self) -> dict:
        return {
            "classes": [{"id": cid, "name": name} for cid, name in self.classes],
            "exclusivity_groups": [sorted(g) for g in self.exclusivity_groups],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "ClassSchema":
        try:
            classes = [(c["id"], c["name"]) for c in obj["classes"]]
        except (KeyError, TypeError) as e:
            raise SchemaError(f"malformed schema: {e}") from None
        return cls(tuple(classes), tuple(obj.get("exclusivity_groups", ())))


@dataclass(frozen=True)
class CropMeta:
    annotated_classes: frozenset[int] = field(default_factory=frozenset)
    closed_world: bool = False

    def __post_init__(self):
        object.__setattr__(self, "annotated_classes", frozenset(int(c) for c in self.annotated_classes))
        object.__setattr__(self, "closed_world", bool(self.closed_world))

    def to_json(self) -> dict:
        return {"annotated_classes": sorted(self.annotated_classes), "closed_world": self.closed_world}

    @classmethod
    def from_json(cls, obj: dict) -> "CropMeta":
        return cls(frozenset(obj.get("annotated_classes", ())), bool(obj.get("closed_world", False)))


@dataclass(frozen=True)
class LabelVolume:
    volume: Volume
    schema: ClassSchema
    meta: CropMeta

    @property
    def labels(self) -> np.ndarray:
        return self.volume.data

    @property
    def shape(self):
        return self.volume.shape

    @property
    def spacing(self):
        return self.volume.spacing


@dataclass(frozen=True)
class Violation:
    rule: str
    index: tuple[int, int, int] | None = None
    detail: str = ""

    def __str__(self):
        where = f" at voxel {self.index}" if self.index is not None else ""
        return f"{self.rule}{where}: {self.detail}"


def validate_labels(lv: LabelVolume) -> list[Violation]:
    """Check the checkable LabelVolume invariants; returns one Violation per breach.

    Completeness of annotated classes is a declaration, not something pixels can
    refute, so it is not checked here.
    """
    out = []
    ids = set(lv.schema.ids)
    if lv.volume.dtype != np.uint32:
        out.append(Violation("dtype", None, f"labels must be uint32, got {lv.volume.dtype}"))
    extra = lv.meta.annotated_classes - ids
    if extra:
        out.append(Violation("annotated_classes", None, f"undeclared ids {sorted(extra)}"))
    labels = lv.volume.data
    legal = np.isin(labels, np.array(sorted(ids | {UNKNOWN_LABEL}), dtype=np.int64))
    for idx in zip(*np.nonzero(~legal)):
        idx = tuple(int(i) for i in idx)
        out.append(Violation("undeclared_label", idx, f"value {int(labels[idx])} is not a class id"))
    return out


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as f:
        return json.load(f)


def _write_json(obj, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2, sort_keys=False)
        f.write("\n")
    return path


def read_schema(path) -> ClassSchema:
    return ClassSchema.from_json(_read_json(path))


def write_schema(schema: ClassSchema, path) -> Path:
    return _write_json(schema.to_json(), path)


def read_crop(path) -> CropMeta:
    return CropMeta.from_json(_read_json(path))


def write_crop(meta: CropMeta, path) -> Path:
    return _write_json(meta.to_json(), path)


def read_label_volume(labels_path, schema_path, crop_path) -> LabelVolume:
    return LabelVolume(read_volume(labels_path), read_schema(schema_path), read_crop(crop_path))


def write_label_volume(lv: LabelVolume, out_dir, name: str) -> dict[str, Path]:
    out_dir = Path(out_dir)
    return {
        "labels": write_volume(lv.volume, out_dir / (name + HEADER_SUFFIX)),
        "schema": write_schema(lv.schema, out_dir / f"{name}.schema.json"),
        "crop": write_crop(lv.meta, out_dir / f"{name}.crop.json"),
    }


def stack_volumes(volumes: Sequence[Volume]) -> np.ndarray:
    return np.stack([v.data for v in volumes])


def unstack(arr: np.ndarray, spacing) -> list[Volume]:
    return [Volume(a, spacing) for a in arr]


def relpath(path, start) -> str:
    return os.path.relpath(path, start).replace(os.sep, "/")


def as_volume(x, spacing: Iterable[float] | None = None) -> Volume:
    if isinstance(x, Volume):
        return x if spacing is None else Volume(x.data, tuple(spacing))
    x = np.asarray(x)
    if x.dtype == bool:
        x = x.astype(np.uint8)
    return Volume(x, tuple(spacing) if spacing is not None else (1.0, 1.0, 1.0))
