"""Synthetic sphere fixtures, sparse-annotation simulation and brute-force oracles.

The oracles here deliberately avoid the data structures of the code they check:
``brute_edt`` is an all-pairs double loop, ``brute_watershed`` rescans the whole
frontier on every step instead of keeping a heap, and ``brute_components`` is a
union-find over every adjacent voxel pair.
"""
from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .volume import UNKNOWN_LABEL, ClassSchema, CropMeta, LabelVolume, Volume, as_volume

MASK64 = (1 << 64) - 1


class SplitMix64:
    """SplitMix64 (Steele, Lea & Flood). Same stream on every platform for a given seed."""

    def __init__(self, seed: int):
        self.state = seed & MASK64

    def next_u64(self) -> int:
        self.state = (self.state + 0x9E3779B97F4A7C15) & MASK64
        z = self.state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
        return z ^ (z >> 31)

    def uniform(self, lo: float = 0.0, hi: float = 1.0) -> float:
        # top 53 bits -> [0, 1)
        return lo + (hi - lo) * ((self.next_u64() >> 11) * 2.0**-53)

    def randint(self, n: int) -> int:
        """Uniform integer in [0, n)."""
        return int(self.uniform() * n)

    def choice(self, seq):
        return seq[self.randint(len(seq))]


class OverlapError(ValueError):
    pass


class SizeGuardError(ValueError):
    pass


@dataclass(frozen=True)
class SphereSpec:
    center: tuple[float, float, float]
    radius: float
    class_id: int

    def __post_init__(self):
        if not self.radius > 0:
            raise ValueError(f"radius must be > 0, got {self.radius}")


@dataclass(frozen=True)
class SparsifySpec:
    """Which classes to hide from a crop.

    ``seed`` is recorded for fixture manifests; hiding itself is deterministic.
    """

    keep_classes: frozenset[int] = field(default_factory=frozenset)
    hidden_classes: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "keep_classes", frozenset(self.keep_classes))
        object.__setattr__(self, "hidden_classes", frozenset(self.hidden_classes))
        both = self.keep_classes & self.hidden_classes
        if both:
            raise ValueError(f"classes both kept and hidden: {sorted(both)}")


def _centers(shape, spacing):
    return [np.arange(n, dtype=np.float64) * s for n, s in zip(shape, spacing)]


def sphere_mask(shape, spacing, center, radius) -> np.ndarray:
    """Voxels whose center lies within ``radius`` of ``center`` (physical units)."""
    z, y, x = _centers(shape, spacing)
    cz, cy, cx = center
    d2 = ((z - cz) ** 2)[:, None, None] + ((y - cy) ** 2)[None, :, None] + ((x - cx) ** 2)[None, None, :]
    return d2 <= radius * radius


def gen_spheres(shape, spacing, specs, schema: ClassSchema) -> LabelVolume:
    """Label a crop with spheres; the first containing spec wins.

    Voxels outside every sphere get the class named ``background`` if the schema
    has one, else UNKNOWN_LABEL. The crop is closed-world and every spec class
    (plus background) is marked densely annotated.
    """
    shape = tuple(int(n) for n in shape)
    ids = set(schema.ids)
    bg = schema.id_of("background")
    labels = np.full(shape, UNKNOWN_LABEL if bg is None else bg, dtype=np.uint32)
    claimed = np.zeros(shape, dtype=np.int64) - 1
    masks = []
    for k, spec in enumerate(specs):
        if spec.class_id not in ids:
            raise ValueError(f"sphere class {spec.class_id} not in schema")
        m = sphere_mask(shape, spacing, spec.center, spec.radius)
        for j, other in enumerate(specs[:k]):
            if other.class_id != spec.class_id and spec.class_id in schema.exclusive_with(other.class_id):
                if (m & masks[j]).any():
                    raise OverlapError(
                        f"spheres {j} (class {other.class_id}) and {k} (class {spec.class_id}) "
                        "overlap but their classes are mutually exclusive"
                    )
        masks.append(m)
        fresh = m & (claimed < 0)
        labels[fresh] = spec.class_id
        claimed[fresh] = k
    annotated = {s.class_id for s in specs} | ({bg} if bg is not None else set())
    return LabelVolume(Volume(labels, spacing), schema, CropMeta(frozenset(annotated), closed_world=True))


def random_spheres(shape, spacing, class_ids, count, radius_range, seed, margin=1.0, max_tries=1000, avoid=()):
    """Place ``count`` spheres that touch neither each other, the crop border, nor ``avoid``.

    Spheres are separated by at least ``margin`` physical units of clearance
    between their surfaces. Raises RuntimeError if placement keeps failing.
    """
    rng = SplitMix64(seed)
    extent = [(n - 1) * s for n, s in zip(shape, spacing)]
    avoid = list(avoid)
    placed = []
    tries = 0
    while len(placed) < count:
        tries += 1
        if tries > max_tries:
            raise RuntimeError(f"could not place {count} spheres in {max_tries} tries")
        r = rng.uniform(*radius_range)
        if any(e < 2 * (r + margin) for e in extent):
            continue
        c = tuple(rng.uniform(r + margin, e - r - margin) for e in extent)
        if all(math.dist(c, p.center) > r + p.radius + margin for p in avoid + placed):
            placed.append(SphereSpec(c, r, rng.choice(list(class_ids))))
    return placed


def dumbbell_field(shape, centers, radius, scale, spacing=(1.0, 1.0, 1.0)) -> Volume:
    """tanh-scaled continuous signed distance to a union of equal spheres.

    Inside the union the value is ``max_i (radius - |p - c_i|)``, so two
    overlapping spheres give two peaks with a ridge across the neck.
    """
    z, y, x = np.meshgrid(*_centers(shape, spacing), indexing="ij")
    sd = np.full(tuple(shape), -np.inf)
    for cz, cy, cx in centers:
        sd = np.maximum(sd, radius - np.sqrt((z - cz) ** 2 + (y - cy) ** 2 + (x - cx) ** 2))
    return Volume(np.tanh(sd / scale).astype(np.float32), spacing)


def sparsify(lv: LabelVolume, spec: SparsifySpec) -> LabelVolume:
    """Hide the labels of ``spec.hidden_classes`` under UNKNOWN_LABEL."""
    if not spec.hidden_classes:
        return lv
    labels = lv.labels.copy()
    labels[np.isin(labels, np.array(sorted(spec.hidden_classes), dtype=np.int64))] = UNKNOWN_LABEL
    meta = CropMeta(lv.meta.annotated_classes - spec.hidden_classes, lv.meta.closed_world)
    return LabelVolume(lv.volume.with_data(labels), lv.schema, meta)


def random_binary(shape, density, rng: SplitMix64) -> np.ndarray:
    flat = [1 if rng.uniform() < density else 0 for _ in range(int(np.prod(shape)))]
    return np.array(flat, dtype=np.uint8).reshape(shape)


def brute_edt(binary, spacing=None) -> Volume:
    """All-pairs squared distance to the nearest site. Guarded to <= 1000 voxels."""
    vol = as_volume(binary, spacing)
    if vol.size > 1000:
        raise SizeGuardError(f"brute_edt is limited to 1000 voxels, got {vol.size}")
    sz, sy, sx = vol.spacing
    coords = list(itertools.product(*(range(n) for n in vol.shape)))
    sites = [c for c in coords if vol.data[c] != 0]
    out = np.empty(vol.shape)
    for c in coords:
        best = math.inf
        for s in sites:
            dz = (c[0] - s[0]) * sz
            dy = (c[1] - s[1]) * sy
            dx = (c[2] - s[2]) * sx
            d = dz * dz + dy * dy + dx * dx
            if d < best:
                best = d
        out[c] = best
    return vol.with_data(out)


def brute_signed_distance(binary, spacing=None) -> Volume:
    vol = as_volume(binary, spacing)
    fg = vol.data != 0
    inv = vol.with_data((~fg).astype(np.uint8))
    to_fg = brute_edt(vol.with_data(fg.astype(np.uint8))).data
    to_bg = brute_edt(inv).data
    return vol.with_data(np.where(fg, np.sqrt(to_bg), -np.sqrt(to_fg)))


def _neighbors(connectivity):
    out = []
    for d in itertools.product((-1, 0, 1), repeat=3):
        if d == (0, 0, 0):
            continue
        if connectivity == 6 and sum(map(abs, d)) != 1:
            continue
        out.append(d)
    return out


def brute_components(binary, connectivity=26) -> np.ndarray:
    """Union-find over all adjacent foreground pairs, labels ordered by smallest linear index."""
    data = as_volume(binary).data != 0
    shape = data.shape
    n = data.size
    parent = list(range(n))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    flat = lambda c: (c[0] * shape[1] + c[1]) * shape[2] + c[2]
    for c in itertools.product(*(range(k) for k in shape)):
        if not data[c]:
            continue
        for d in _neighbors(connectivity):
            o = (c[0] + d[0], c[1] + d[1], c[2] + d[2])
            if all(0 <= o[a] < shape[a] for a in range(3)) and data[o]:
                ra, rb = find(flat(c)), find(flat(o))
                if ra != rb:
                    parent[max(ra, rb)] = min(ra, rb)
    out = np.zeros(n, dtype=np.uint32)
    names = {}
    fl = data.ravel()
    for i in range(n):
        if fl[i]:
            r = find(i)
            if r not in names:
                names[r] = len(names) + 1
            out[i] = names[r]
    return out.reshape(shape)


def brute_watershed(dist, t_seed=0.5, t_mask=0.0, connectivity=26) -> Volume:
    """Event-by-event priority flood by exhaustive frontier rescans. Guarded to <= 512 voxels.

    At every step each unlabeled voxel above ``t_mask`` that touches a labeled
    voxel is a candidate; the candidate with the largest value wins, ties going
    to the smallest index. It takes the label of its highest labeled neighbor,
    ties going to the smallest label.
    """
    vol = as_volume(dist)
    if vol.size > 512:
        raise SizeGuardError(f"brute_watershed is limited to 512 voxels, got {vol.size}")
    d = vol.data.astype(np.float64)
    shape = d.shape
    labels = brute_components((d > t_seed).astype(np.uint8), connectivity).astype(np.int64)
    region = d > t_mask
    shifts = _neighbors(connectivity)
    big = np.iinfo(np.int64).max
    lin = np.arange(d.size).reshape(shape)

    while True:
        padded = np.pad(labels, 1)
        padded_d = np.pad(d, 1)
        best = np.full(shape, big)
        best_v = np.full(shape, -np.inf)
        for dz, dy, dx in shifts:
            win = (slice(1 + dz, 1 + dz + shape[0]), slice(1 + dy, 1 + dy + shape[1]), slice(1 + dx, 1 + dx + shape[2]))
            nb, nv = padded[win], padded_d[win]
            higher = (nb > 0) & (nv > best_v)
            same = (nb > 0) & (nv == best_v)
            best = np.where(higher, nb, np.where(same, np.minimum(best, nb), best))
            best_v = np.where(higher, nv, best_v)
        cand = region & (labels == 0) & (best < big)
        if not cand.any():
            break
        top = d[cand].max()
        pick = lin[cand & (d == top)].min()
        zyx = np.unravel_index(pick, shape)
        labels[zyx] = best[zyx]

    # contiguous renumbering by smallest linear index
    out = np.zeros(d.size, dtype=np.uint32)
    names = {}
    for i, v in enumerate(labels.ravel()):
        if v:
            names.setdefault(v, len(names) + 1)
            out[i] = names[v]
    return vol.with_data(out.reshape(shape))
