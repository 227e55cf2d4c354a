"""Masked composite Hot-Distance loss with analytic gradients.

    total = hot_term + lambda_dist * dist_term

``hot_term`` is the masked mean of per-class sigmoid cross-entropy on the hot
logits, ``dist_term`` the masked mean squared error on the tanh-distance
predictions. Each term has its own mask and count; an empty term is 0 with a
zero gradient. Sums use ``math.fsum`` so the result does not depend on
accumulation order.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.special import expit

from .targets import TargetBundle
from .volume import HEADER_SUFFIX, Volume, read_volume, relpath, write_volume


class DivergenceError(FloatingPointError):
    """Non-finite loss during descent; the step is too large."""


@dataclass(frozen=True)
class LossParams:
    lambda_dist: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lambda_dist) and self.lambda_dist >= 0):
            raise ValueError(f"lambda_dist must be >= 0, got {self.lambda_dist}")


@dataclass(frozen=True, eq=False)
class PredictionBundle:
    """Network outputs: one hot-logit and one distance channel per class, ``(class, z, y, x)``."""

    class_ids: tuple[int, ...]
    hot_logits: np.ndarray
    dist_pred: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        object.__setattr__(self, "class_ids", tuple(int(c) for c in self.class_ids))
        for name in ("hot_logits", "dist_pred"):
            arr = np.array(getattr(self, name), dtype=np.float64, order="C", copy=True)
            if arr.ndim != 4 or arr.shape[0] != len(self.class_ids):
                raise ValueError(f"{name} must be (class, z, y, x) with {len(self.class_ids)} classes, got {arr.shape}")
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.hot_logits.shape != self.dist_pred.shape:
            raise ValueError("hot_logits and dist_pred shapes differ")

    @classmethod
    def zeros_like(cls, targets: TargetBundle) -> "PredictionBundle":
        z = np.zeros(targets.hot.shape)
        return cls(targets.class_ids, z, z, targets.spacing)

    @classmethod
    def from_targets(cls, targets: TargetBundle, logit: float = 20.0) -> "PredictionBundle":
        """Predictions that reproduce the targets: hot mapped to +-logit, distances copied."""
        x = np.where(targets.hot > 0.5, logit, -logit)
        return cls(targets.class_ids, x, targets.dist.astype(np.float64), targets.spacing)


@dataclass(eq=False)
class LossReport:
    total: float
    hot_term: float
    dist_term: float
    lambda_dist: float
    counts: dict = field(default_factory=dict)  # {"hot": {cid: n}, "dist": {cid: n}}
    grad_hot_logits: np.ndarray | None = None
    grad_dist: np.ndarray | None = None

    def to_json(self) -> dict:
        return {
            "total": self.total,
            "hot_term": self.hot_term,
            "dist_term": self.dist_term,
            "lambda": self.lambda_dist,
            "counts": {term: {str(c): n for c, n in per.items()} for term, per in self.counts.items()},
        }


def bce_from_logits(x, t):
    """Binary cross-entropy of ``sigmoid(x)`` against ``t``, stable for any finite ``x``.

    Works elementwise on arrays. The derivative w.r.t. ``x`` is ``sigmoid(x) - t``.
    """
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    return np.maximum(x, 0.0) - x * t + np.log1p(np.exp(-np.abs(x)))


def bce_grad(x, t):
    return expit(np.asarray(x, dtype=np.float64)) - np.asarray(t, dtype=np.float64)


def _check_aligned(pred: PredictionBundle, targets: TargetBundle):
    if pred.class_ids != targets.class_ids:
        raise ValueError(f"class order mismatch: predictions {pred.class_ids} vs targets {targets.class_ids}")
    if pred.hot_logits.shape != targets.hot.shape:
        raise ValueError(f"shape mismatch: predictions {pred.hot_logits.shape} vs targets {targets.hot.shape}")


def _terms(pred: PredictionBundle, targets: TargetBundle):
    hm = targets.hot_mask != 0
    dm = targets.dist_mask != 0
    n_hot = int(hm.sum())
    n_dist = int(dm.sum())
    hot_sum = math.fsum(bce_from_logits(pred.hot_logits[hm], targets.hot[hm]))
    resid = pred.dist_pred[dm] - targets.dist[dm].astype(np.float64)
    dist_sum = math.fsum(resid * resid)
    return hm, dm, n_hot, n_dist, hot_sum / max(1, n_hot), dist_sum / max(1, n_dist)


def loss_total(pred: PredictionBundle, targets: TargetBundle, params: LossParams) -> float:
    _check_aligned(pred, targets)
    *_, hot_term, dist_term = _terms(pred, targets)
    return hot_term + params.lambda_dist * dist_term


def hot_distance_loss(pred: PredictionBundle, targets: TargetBundle, params: LossParams | None = None) -> LossReport:
    """Evaluate the composite loss and its gradients w.r.t. both prediction heads."""
    params = params or LossParams()
    _check_aligned(pred, targets)
    hm, dm, n_hot, n_dist, hot_term, dist_term = _terms(pred, targets)
    lam = params.lambda_dist

    # np.where keeps masked-out gradients at +0.0 whatever the inputs hold there
    grad_hot = np.where(hm, bce_grad(pred.hot_logits, targets.hot) / max(1, n_hot), 0.0)
    grad_dist = np.where(dm, 2.0 * (pred.dist_pred - targets.dist) * lam / max(1, n_dist), 0.0)

    counts = {
        "hot": {c: int(hm[i].sum()) for i, c in enumerate(targets.class_ids)},
        "dist": {c: int(dm[i].sum()) for i, c in enumerate(targets.class_ids)},
    }
    return LossReport(
        total=hot_term + lam * dist_term,
        hot_term=hot_term,
        dist_term=dist_term,
        lambda_dist=lam,
        counts=counts,
        grad_hot_logits=grad_hot,
        grad_dist=grad_dist,
    )


def numeric_gradient(pred, targets, params, head: str, index, epsilon: float) -> float:
    """Central difference of the total loss along one prediction coordinate."""
    base = getattr(pred, head)

    def at(value):
        arr = base.copy()
        arr[index] = value
        moved = PredictionBundle(pred.class_ids, **{**_heads(pred), head: arr}, spacing=pred.spacing)
        return loss_total(moved, targets, params)

    x0 = base[index]
    return (at(x0 + epsilon) - at(x0 - epsilon)) / (2.0 * epsilon)


def _heads(pred):
    return {"hot_logits": pred.hot_logits, "dist_pred": pred.dist_pred}


def check_gradients(pred, targets, params, epsilon: float = 1e-5, trials: int = 100, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Coordinates are drawn uniformly from the masked voxels of both heads. Returns
    0.0 when nothing is masked.
    """
    if epsilon <= 0 or trials < 1:
        raise ValueError("epsilon must be > 0 and trials >= 1")
    report = hot_distance_loss(pred, targets, params)
    candidates = [("hot_logits", idx) for idx in zip(*np.nonzero(targets.hot_mask))]
    candidates += [("dist_pred", idx) for idx in zip(*np.nonzero(targets.dist_mask))]
    if not candidates:
        return 0.0
    rng = np.random.default_rng(seed)
    picks = rng.integers(0, len(candidates), size=trials)
    grads = {"hot_logits": report.grad_hot_logits, "dist_pred": report.grad_dist}
    worst = 0.0
    for k in picks:
        head, idx = candidates[k]
        analytic = float(grads[head][idx])
        numeric = numeric_gradient(pred, targets, params, head, idx, epsilon)
        denom = max(abs(analytic), abs(numeric))
        if denom > 0:
            worst = max(worst, abs(analytic - numeric) / denom)
    return worst


def fit_predictions(targets, params, step: float, iters: int, init: PredictionBundle | None = None,
                    per_voxel_step: bool = True):
    """Fixed-step gradient descent directly on the prediction tensors.

    With ``per_voxel_step`` (default) each term's gradient is multiplied by its
    masked count before stepping, so ``step`` acts on per-voxel losses and does
    not shrink as crops get larger. With it off, the update is plain descent on
    the masked-mean loss.

    Returns the final predictions and the loss trace, where ``trace[k]`` is the
    total after ``k`` updates (``iters + 1`` values). Voxels masked out of both
    terms are never touched.
    """
    if step <= 0 or iters < 1:
        raise ValueError("step must be > 0 and iters >= 1")
    pred = init if init is not None else PredictionBundle.zeros_like(targets)
    _check_aligned(pred, targets)
    x = pred.hot_logits.copy()
    p = pred.dist_pred.copy()
    hm = targets.hot_mask != 0
    dm = targets.dist_mask != 0
    hot_scale = max(1, int(hm.sum())) if per_voxel_step else 1
    dist_scale = max(1, int(dm.sum())) if per_voxel_step else 1

    trace = []
    with np.errstate(over="ignore", invalid="ignore"):
        for k in range(iters + 1):
            current = PredictionBundle(pred.class_ids, x, p, pred.spacing)
            report = hot_distance_loss(current, targets, params)
            if not math.isfinite(report.total):
                raise DivergenceError(f"loss became {report.total} after {k} updates (step {step})")
            trace.append(report.total)
            if k == iters:
                break
            x = np.where(hm, x - step * hot_scale * report.grad_hot_logits, x)
            p = np.where(dm, p - step * dist_scale * report.grad_dist, p)
    return current, trace


PRED_KINDS = ("hot_logits", "dist_pred")


def write_predictions(pred: PredictionBundle, out_dir) -> Path:
    out_dir = Path(out_dir)
    channels = {}
    for kind in PRED_KINDS:
        arr = getattr(pred, kind)
        channels[kind] = [
            relpath(write_volume(Volume(arr[i], pred.spacing), out_dir / f"{kind}_c{cid}{HEADER_SUFFIX}"), out_dir)
            for i, cid in enumerate(pred.class_ids)
        ]
    path = out_dir / "predictions.json"
    with open(path, "w", encoding="utf-8") as f:
        json.dump({"class_ids": list(pred.class_ids), "channels": channels}, f, indent=2)
        f.write("\n")
    return path


def read_predictions(manifest_path) -> PredictionBundle:
    manifest_path = Path(manifest_path)
    with open(manifest_path, encoding="utf-8") as f:
        manifest = json.load(f)
    arrays, spacing = {}, None
    for kind in PRED_KINDS:
        vols = [read_volume(manifest_path.parent / p) for p in manifest["channels"][kind]]
        spacing = spacing or vols[0].spacing
        arrays[kind] = np.stack([v.data.astype(np.float64) for v in vols])
    return PredictionBundle(tuple(manifest["class_ids"]), spacing=spacing, **arrays)
