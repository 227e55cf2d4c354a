"""Fixture builders shared by the test modules."""
import numpy as np

from hotdist.synth import SparsifySpec, SphereSpec, SplitMix64, gen_spheres, random_binary, sparsify
from hotdist.volume import UNKNOWN_LABEL, ClassSchema, CropMeta, LabelVolume, Volume

MITO, NUCLEUS = 1, 2


def mito_nucleus_schema():
    return ClassSchema(((MITO, "mito"), (NUCLEUS, "nucleus")), (frozenset({MITO, NUCLEUS}),))


def non_target_crop():
    """Mito and nucleus present, nucleus labels hidden: the non-target crop for nucleus."""
    schema = mito_nucleus_schema()
    specs = [
        SphereSpec((2.0, 2.0, 2.0), 1.6, MITO),
        SphereSpec((6.0, 5.0, 5.0), 2.0, NUCLEUS),
    ]
    full = gen_spheres((9, 8, 8), (1.0, 1.0, 1.0), specs, schema)
    return full, sparsify(full, SparsifySpec(frozenset({MITO}), frozenset({NUCLEUS})))


def two_class_schema():
    return ClassSchema(((0, "background"), (1, "object")), (frozenset({0, 1}),))


def dense_two_class(shape=(8, 8, 8), spacing=(1.0, 1.0, 1.0)):
    c = tuple((n - 1) / 2 * s for n, s in zip(shape, spacing))
    return gen_spheres(shape, spacing, [SphereSpec(c, 2.5 * min(spacing), 1)], two_class_schema())


def random_label_volume(rng: SplitMix64, shape=(4, 4, 4), n_classes=3, unknown_p=0.3):
    """Random legal labels with a random schema, annotation set and world flag."""
    ids = sorted({rng.randint(50) for _ in range(n_classes * 3)})[:n_classes]
    while len(ids) < n_classes:
        ids.append(max(ids) + 1)
    schema = ClassSchema(
        tuple((c, f"c{c}") for c in ids),
        (frozenset(ids[:2]),) if n_classes >= 2 else (),
    )
    flat = [UNKNOWN_LABEL if rng.uniform() < unknown_p else rng.choice(ids) for _ in range(int(np.prod(shape)))]
    labels = np.array(flat, dtype=np.uint32).reshape(shape)
    annotated = frozenset(c for c in ids if rng.uniform() < 0.5)
    # annotated classes are declared complete as generated: UNKNOWN voxels are not theirs
    meta = CropMeta(annotated, closed_world=rng.uniform() < 0.5)
    return LabelVolume(Volume(labels), schema, meta)


def random_volume(rng: SplitMix64, dtype, shape=None):
    shape = shape or tuple(1 + rng.randint(6) for _ in range(3))
    spacing = tuple(rng.uniform(0.1, 5.0) for _ in range(3))
    n = int(np.prod(shape))
    dt = np.dtype(dtype)
    raw = bytes(rng.next_u64() & 0xFF for _ in range(n * dt.itemsize))
    data = np.frombuffer(raw, dtype=dt).reshape(shape)
    return Volume(data, spacing)


def random_binaries(seed, count, shape=(6, 6, 6), density=0.3):
    rng = SplitMix64(seed)
    out = []
    while len(out) < count:
        b = random_binary(shape, rng.uniform(0.05, 0.6) if density is None else density, rng)
        if b.any():
            out.append(b)
    return out



DUMBBELL_CENTERS = [(3.3, 3.4, 2.2), (3.6, 3.2, 6.1)]


def dumbbell():
    """Two overlapping spheres (radius 2.9) as a tanh distance field on a 7x7x9 grid."""
    from hotdist.synth import dumbbell_field

    return dumbbell_field((7, 7, 9), DUMBBELL_CENTERS, 2.9, 2.0)
