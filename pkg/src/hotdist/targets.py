"""Hot-Distance training targets.

For every class the bundle carries two channel pairs over the same voxel grid:

* ``hot`` / ``hot_mask``: one-hot membership and where it is known. Known
  negatives come from positives of mutually exclusive classes, or from the
  class being densely annotated in the crop.
* ``dist`` / ``dist_mask``: tanh-bounded signed boundary distance. Only densely
  annotated classes get a nonzero mask; with an open-world crop, voxels whose
  distance could be shortened by something outside the crop are masked off.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ._parallel import pmap
from .edt import _signed_array
from .volume import (
    HEADER_SUFFIX,
    LabelVolume,
    SchemaError,
    Volume,
    read_volume,
    relpath,
    validate_labels,
    write_volume,
)

# largest float32 strictly below 1; finite distances never reach the +-1 sentinel
_F32_BELOW_ONE = np.nextafter(np.float32(1.0), np.float32(0.0))


@dataclass(frozen=True)
class DistanceParams:
    """tanh divisor (physical units) and whether open-world crop borders mask distances.

    ``scale=None`` means 10 voxels of the smallest spacing, resolved per volume.
    """

    scale: float | None = None
    border_masking: bool = True

    def __post_init__(self):
        if self.scale is not None and not (math.isfinite(self.scale) and self.scale > 0):
            raise ValueError(f"scale must be > 0, got {self.scale}")

    def resolve_scale(self, spacing) -> float:
        return float(self.scale) if self.scale is not None else 10.0 * min(spacing)


@dataclass(frozen=True, eq=False)
class TargetBundle:
    """Per-class target channels stacked as ``(class, z, y, x)`` arrays.

    Channel ``i`` belongs to ``class_ids[i]``; class ids are ascending.
    """

    class_ids: tuple[int, ...]
    hot: np.ndarray  # float32 {0,1}
    hot_mask: np.ndarray  # uint8 {0,1}
    dist: np.ndarray  # float32 [-1,1]
    dist_mask: np.ndarray  # uint8 {0,1}
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    scale: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        n = len(self.class_ids)
        shapes = {a.shape for a in (self.hot, self.hot_mask, self.dist, self.dist_mask)}
        if len(shapes) != 1 or next(iter(shapes))[0] != n or len(next(iter(shapes))) != 4:
            raise ValueError(f"channel arrays must share a ({n}, z, y, x) shape, got {shapes}")
        for name, dt in (("hot", np.float32), ("hot_mask", np.uint8), ("dist", np.float32), ("dist_mask", np.uint8)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dt)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)

    @property
    def shape(self):
        return self.hot.shape[1:]

    def channel(self, kind: str, class_id: int) -> Volume:
        return Volume(getattr(self, kind)[self.class_ids.index(class_id)], self.spacing)

    def replace(self, **arrays) -> "TargetBundle":
        fields = dict(
            class_ids=self.class_ids, hot=self.hot, hot_mask=self.hot_mask, dist=self.dist,
            dist_mask=self.dist_mask, spacing=self.spacing, scale=self.scale,
        )
        fields.update(arrays)
        return TargetBundle(**fields)


def _check(lv: LabelVolume):
    problems = validate_labels(lv)
    if problems:
        shown = "; ".join(str(p) for p in problems[:5])
        raise SchemaError(f"{len(problems)} label violation(s): {shown}")


def _hot_channel(lv: LabelVolume, cid: int):
    labels = lv.labels
    positive = labels == cid
    if cid in lv.meta.annotated_classes:
        known = np.ones(labels.shape, dtype=bool)
    else:
        exclusive = sorted(lv.schema.exclusive_with(cid))
        known = positive | np.isin(labels, np.array(exclusive, dtype=np.int64))
    return positive.astype(np.float32), known.astype(np.uint8)


def hot_targets(lv: LabelVolume) -> tuple[list[Volume], list[Volume]]:
    """One-hot channels and their masks, one pair per class in ascending id order."""
    _check(lv)
    hot, mask = [], []
    for cid in lv.schema.ids:
        h, m = _hot_channel(lv, cid)
        hot.append(lv.volume.with_data(h))
        mask.append(lv.volume.with_data(m))
    return hot, mask


def tanh_scale(d, params: DistanceParams) -> Volume:
    """``tanh(d / scale)`` as float32.

    Infinite distances saturate to exactly +-1. Finite distances are kept
    strictly inside (-1, 1), so +-1 always means "no opposite phase".
    """
    vol = d if isinstance(d, Volume) else Volume(np.asarray(d, dtype=np.float64))
    return vol.with_data(_tanh_array(vol.data, params.resolve_scale(vol.spacing)))


def _tanh_array(d: np.ndarray, scale: float) -> np.ndarray:
    out = np.tanh(d / scale).astype(np.float32)
    finite = np.isfinite(d)
    np.clip(out, -_F32_BELOW_ONE, _F32_BELOW_ONE, out=out, where=finite)
    return out


def border_distance(shape, spacing) -> np.ndarray:
    """Distance from each voxel center to the nearest voxel center outside the crop."""
    out = np.full(shape, np.inf)
    for axis, (n, s) in enumerate(zip(shape, spacing)):
        i = np.arange(n)
        along = np.minimum(i + 1, n - i) * float(s)
        view = [1, 1, 1]
        view[axis] = n
        out = np.minimum(out, along.reshape(view))
    return out


def _distance_channel(lv: LabelVolume, cid: int, params: DistanceParams, scale: float):
    shape = lv.shape
    if cid not in lv.meta.annotated_classes:
        return np.zeros(shape, np.float32), np.zeros(shape, np.uint8)
    fg = lv.labels == cid
    # computed in units of the tanh scale so that scaling spacing and scale
    # together leaves the channel unchanged bit for bit
    unit_spacing = tuple(s / scale for s in lv.spacing)
    dist = _tanh_array(_signed_array(fg, unit_spacing), 1.0)
    if params.border_masking and not lv.meta.closed_world:
        raw = np.abs(_signed_array(fg, lv.spacing))
        mask = (raw <= border_distance(shape, lv.spacing)).astype(np.uint8)
    else:
        mask = np.ones(shape, np.uint8)
    return dist, mask


def distance_targets(lv: LabelVolume, params: DistanceParams) -> tuple[list[Volume], list[Volume]]:
    _check(lv)
    scale = params.resolve_scale(lv.spacing)
    pairs = pmap(lambda c: _distance_channel(lv, c, params, scale), lv.schema.ids)
    return (
        [lv.volume.with_data(d) for d, _ in pairs],
        [lv.volume.with_data(m) for _, m in pairs],
    )


def build_targets(lv: LabelVolume, params: DistanceParams | None = None) -> TargetBundle:
    """Assemble the full Hot-Distance target bundle for one labeled crop."""
    params = params or DistanceParams()
    _check(lv)
    ids = lv.schema.ids
    scale = params.resolve_scale(lv.spacing)

    def one(cid):
        h, hm = _hot_channel(lv, cid)
        d, dm = _distance_channel(lv, cid, params, scale)
        # dense knowledge subsumes sparse knowledge
        hm = hm | dm
        return h, hm, d, dm

    chans = pmap(one, ids)
    return TargetBundle(
        class_ids=tuple(ids),
        hot=np.stack([c[0] for c in chans]),
        hot_mask=np.stack([c[1] for c in chans]),
        dist=np.stack([c[2] for c in chans]),
        dist_mask=np.stack([c[3] for c in chans]),
        spacing=lv.spacing,
        scale=scale,
    )


CHANNEL_KINDS = ("hot", "hot_mask", "dist", "dist_mask")


def write_bundle(bundle: TargetBundle, out_dir) -> Path:
    """Write every channel as its own volume plus ``manifest.json``; returns the manifest path."""
    out_dir = Path(out_dir)
    channels = {}
    for kind in CHANNEL_KINDS:
        arr = getattr(bundle, kind)
        paths = []
        for i, cid in enumerate(bundle.class_ids):
            p = write_volume(Volume(arr[i], bundle.spacing), out_dir / f"{kind}_c{cid}{HEADER_SUFFIX}")
            paths.append(relpath(p, out_dir))
        channels[kind] = paths
    manifest = {"class_ids": list(bundle.class_ids), "channels": channels, "scale": bundle.scale}
    path = out_dir / "manifest.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
        f.write("\n")
    return path


def read_bundle(manifest_path) -> TargetBundle:
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    base = manifest_path.parent
    arrays, spacing = {}, None
    for kind in CHANNEL_KINDS:
        vols = [read_volume(base / p) for p in manifest["channels"][kind]]
        spacing = spacing or vols[0].spacing
        arrays[kind] = np.stack([v.data for v in vols])
    return TargetBundle(
        class_ids=tuple(manifest["class_ids"]), spacing=spacing, scale=float(manifest["scale"]), **arrays
    )


def coverage(bundle: TargetBundle) -> dict[int, dict[str, float]]:
    """Fraction of voxels with each mask on, per class."""
    n = int(np.prod(bundle.shape))
    return {
        cid: {
            "hot_mask": int(bundle.hot_mask[i].sum()) / n,
            "dist_mask": int(bundle.dist_mask[i].sum()) / n,
        }
        for i, cid in enumerate(bundle.class_ids)
    }

