"""``hotdist`` command line: targets, loss, fit, segment, gen, metrics.

Exit codes: 0 success, 2 input or validation error, 3 verification failure,
4 numerical divergence. Any flag can also come from ``--config file.json``
(keys are the flag names with dashes as underscores); flags given on the
command line win.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np

from .loss import (
    DivergenceError,
    LossParams,
    PredictionBundle,
    check_gradients,
    fit_predictions,
    hot_distance_loss,
    read_predictions,
    write_predictions,
)
from .postprocess import WatershedParams, dice_score, threshold_semantic, watershed_instances
from .synth import OverlapError, SparsifySpec, SphereSpec, gen_spheres, random_spheres, sparsify
from .targets import DistanceParams, build_targets, coverage, read_bundle, write_bundle
from .volume import (
    HEADER_SUFFIX,
    ClassSchema,
    CropMeta,
    LabelVolume,
    read_label_volume,
    read_volume,
    validate_labels,
    write_label_volume,
    write_volume,
)

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_VERIFY = 3
EXIT_DIVERGED = 4

GRAD_TOLERANCE = 1e-4


class InputError(Exception):
    pass


def _require(args, *names):
    for name in names:
        if getattr(args, name, None) is None:
            raise InputError(f"missing required option --{name.replace('_', '-')}")


def _existing(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise InputError(f"file not found: {p}")
    return p


def _write_json(obj, path):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(obj, f, indent=2)
        f.write("\n")


def cmd_targets(args) -> int:
    _require(args, "labels", "schema", "crop", "out_dir")
    lv = read_label_volume(_existing(args.labels), _existing(args.schema), _existing(args.crop))
    problems = validate_labels(lv)
    if problems:
        for p in problems[:20]:
            print(f"invalid labels: {p}", file=sys.stderr)
        return EXIT_INPUT
    params = DistanceParams(scale=args.scale, border_masking=args.border_masking)
    bundle = build_targets(lv, params)
    manifest = write_bundle(bundle, args.out_dir)
    print(f"wrote {manifest} (scale {bundle.scale:g})")
    for cid, cov in coverage(bundle).items():
        name = lv.schema.name_of(cid)
        print(f"class {cid} ({name}): hot_mask {100 * cov['hot_mask']:.1f}%  dist_mask {100 * cov['dist_mask']:.1f}%")
    return EXIT_OK


def cmd_loss(args) -> int:
    _require(args, "pred", "targets", "out")
    pred = read_predictions(_existing(args.pred))
    targets = read_bundle(_existing(args.targets))
    params = LossParams(lambda_dist=args.lambda_dist)
    report = hot_distance_loss(pred, targets, params)
    out = report.to_json()
    status = EXIT_OK
    if args.check_grad:
        err = check_gradients(pred, targets, params, epsilon=args.epsilon, trials=args.trials, seed=args.seed)
        out["grad_check"] = {"max_rel_error": err, "epsilon": args.epsilon, "trials": args.trials}
        print(f"gradient check: max relative error {err:.3e}")
        if not err < GRAD_TOLERANCE:
            print(f"gradient check failed (>= {GRAD_TOLERANCE:g})", file=sys.stderr)
            status = EXIT_VERIFY
    _write_json(out, args.out)
    if args.grad_dir:
        grads = PredictionBundle(targets.class_ids, report.grad_hot_logits, report.grad_dist, targets.spacing)
        write_predictions(grads, args.grad_dir)
    print(f"total {report.total:.9g}  hot {report.hot_term:.9g}  dist {report.dist_term:.9g}")
    return status


def cmd_fit(args) -> int:
    _require(args, "targets", "out_dir")
    targets = read_bundle(_existing(args.targets))
    params = LossParams(lambda_dist=args.lambda_dist)
    pred, trace = fit_predictions(
        targets, params, step=args.step, iters=args.iters, per_voxel_step=args.per_voxel_step
    )
    out_dir = Path(args.out_dir)
    write_predictions(pred, out_dir)
    with open(out_dir / "trace.csv", "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["iteration", "total"])
        for k, v in enumerate(trace):
            w.writerow([k, repr(v)])
    print(f"final loss {trace[-1]:.6g} after {args.iters} iterations")
    return EXIT_OK


def cmd_segment(args) -> int:
    _require(args, "dist", "out_dir")
    try:
        params = WatershedParams(args.t_seed, args.t_mask, args.connectivity)
    except ValueError as e:
        raise InputError(str(e)) from None
    dist = read_volume(_existing(args.dist))
    semantic = threshold_semantic(dist, params.t_mask)
    instances = watershed_instances(dist, params)
    out_dir = Path(args.out_dir)
    write_volume(semantic, out_dir / f"semantic{HEADER_SUFFIX}")
    write_volume(instances, out_dir / f"instances{HEADER_SUFFIX}")
    k = int(instances.data.max())
    print(f"K={k}")
    return EXIT_OK


def _load_spec(path) -> dict:
    with open(_existing(path), encoding="utf-8") as f:
        return json.load(f)


def generate_fixture(spec: dict) -> tuple[LabelVolume, list[SphereSpec]]:
    """Build the LabelVolume described by a ``gen`` spec dict."""
    schema = ClassSchema.from_json(spec["schema"])
    shape = tuple(spec["shape"])
    spacing = tuple(spec.get("spacing", (1.0, 1.0, 1.0)))
    spheres = [SphereSpec(tuple(s["center"]), float(s["radius"]), int(s["class_id"])) for s in spec.get("spheres", [])]
    if "random_spheres" in spec:
        r = spec["random_spheres"]
        spheres += random_spheres(
            shape, spacing, r["class_ids"], int(r["count"]), tuple(r["radius"]),
            seed=int(r.get("seed", 0)), margin=float(r.get("margin", 1.0)), avoid=spheres,
        )
    lv = gen_spheres(shape, spacing, spheres, schema)
    if "sparsify" in spec:
        s = spec["sparsify"]
        lv = sparsify(lv, SparsifySpec(frozenset(s.get("keep_classes", ())), frozenset(s.get("hidden_classes", ())), int(s.get("seed", 0))))
    if "closed_world" in spec:
        lv = LabelVolume(lv.volume, lv.schema, CropMeta(lv.meta.annotated_classes, bool(spec["closed_world"])))
    return lv, spheres


def cmd_gen(args) -> int:
    _require(args, "spec", "out_dir")
    spec = _load_spec(args.spec)
    name = spec.get("name", "crop")
    try:
        lv, spheres = generate_fixture(spec)
    except OverlapError as e:
        print(f"overlap violation: {e}", file=sys.stderr)
        return EXIT_INPUT
    problems = validate_labels(lv)
    if problems:
        for p in problems[:20]:
            print(f"invalid fixture: {p}", file=sys.stderr)
        return EXIT_INPUT
    out_dir = Path(args.out_dir)
    paths = write_label_volume(lv, out_dir, name)
    _write_json(
        {
            "name": name,
            "files": {k: p.name for k, p in paths.items()},
            "spheres": [{"center": list(s.center), "radius": s.radius, "class_id": s.class_id} for s in spheres],
        },
        out_dir / f"{name}.fixture.json",
    )
    print(f"wrote {name} with {len(spheres)} sphere(s) to {out_dir}")
    return EXIT_OK


def cmd_metrics(args) -> int:
    _require(args, "pred", "truth")
    pred = read_volume(_existing(args.pred)).data
    truth = read_volume(_existing(args.truth)).data
    if pred.shape != truth.shape:
        raise InputError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if args.classes:
        classes = args.classes
    else:
        classes = sorted(int(c) for c in np.union1d(np.unique(pred), np.unique(truth)) if c != 0)
    scores = {str(c): dice_score(pred == c, truth == c) for c in classes}
    out = {"dice": scores}
    if args.out:
        _write_json(out, args.out)
    print(json.dumps(out))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hotdist", description="Hot-Distance segmentation targets toolkit")
    parser.add_argument("--config", help="JSON file supplying defaults for any flag")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("targets", help="build the Hot-Distance target bundle for a labeled crop")
    p.add_argument("--labels", help="label volume header (.hdvol.json, uint32)")
    p.add_argument("--schema", help="class schema (.schema.json)")
    p.add_argument("--crop", help="crop metadata (.crop.json)")
    p.add_argument("--scale", type=float, default=None, help="tanh scale in physical units (default 10 x min spacing)")
    p.add_argument("--border-masking", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_targets)

    p = sub.add_parser("loss", help="evaluate the masked composite loss")
    p.add_argument("--pred", help="prediction manifest (predictions.json)")
    p.add_argument("--targets", help="target manifest (manifest.json)")
    p.add_argument("--lambda", dest="lambda_dist", type=float, default=1.0)
    p.add_argument("--out", help="loss report JSON")
    p.add_argument("--check-grad", action="store_true")
    p.add_argument("--epsilon", type=float, default=1e-5)
    p.add_argument("--trials", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grad-dir", help="also write gradient volumes here")
    p.set_defaults(func=cmd_loss)

    p = sub.add_parser("fit", help="gradient descent on the prediction tensors")
    p.add_argument("--targets", help="target manifest (manifest.json)")
    p.add_argument("--lambda", dest="lambda_dist", type=float, default=1.0)
    p.add_argument("--step", type=float, default=0.5)
    p.add_argument("--iters", type=int, default=5000)
    p.add_argument("--per-voxel-step", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("segment", help="threshold and watershed a tanh distance channel")
    p.add_argument("--dist", help="distance channel volume header")
    p.add_argument("--t-seed", type=float, default=0.5)
    p.add_argument("--t-mask", type=float, default=0.0)
    p.add_argument("--connectivity", type=int, default=26)
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("gen", help="write a synthetic sphere fixture")
    p.add_argument("--spec", help="fixture spec JSON")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("metrics", help="per-class Dice between two label volumes")
    p.add_argument("--pred")
    p.add_argument("--truth")
    p.add_argument("--classes", type=int, nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)
    return parser


def parse_args(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        with open(_existing(args.config), encoding="utf-8") as f:
            config = json.load(f)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        known = {a.dest for a in sub._actions}
        unknown = set(config) - known
        if unknown:
            raise InputError(f"unknown config keys for {args.command}: {sorted(unknown)}")
        sub.set_defaults(**config)
        args = parser.parse_args(argv)
    return args


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        return args.func(args)
    except DivergenceError as e:
        print(f"diverged: {e}", file=sys.stderr)
        return EXIT_DIVERGED
    except (InputError, OSError, ValueError, KeyError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
