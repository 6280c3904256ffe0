"""Command-line entry point.

Subcommands cover the whole laboratory: annotation audits, dataset preview
generation, regional-bias training/evaluation, saliency-shift maps,
augmentation probes, gradient verification, and re-rendering persisted
results.  Every command writes only under its --out directory and exits 0
only if the operation completed with all internal validations passing.

Exit codes: 0 success; 2 usage error; 3 missing input file; 4 invalid
config or malformed input; 5 a validation or verification check failed.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import coco_audit, data, harness, netpbm, saliency, unet
from . import augment as augment_mod
from . import tensor_core as tc

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_MISSING = 3
EXIT_INVALID = 4
EXIT_FAILED = 5

LABEL_SCALE = 23  # class index 0..11 -> gray 0..253 in label PGMs


def _set_dotted(d: dict, key: str, value: str) -> None:
    parts = key.split(".")
    node = d
    for p in parts[:-1]:
        if p not in node or not isinstance(node[p], dict):
            node[p] = {}
        node = node[p]
    try:
        node[parts[-1]] = json.loads(value)
    except json.JSONDecodeError:
        node[parts[-1]] = value


def _load_config_dict(path: str | None, overrides: list[str],
                      default: dict) -> dict:
    doc = dict(default)
    if path:
        with open(path) as f:
            doc = json.load(f)
    for item in overrides or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ValueError(f"override {item!r} is not KEY=VALUE")
        _set_dotted(doc, key, value)
    return doc


def cmd_audit(args) -> int:
    payload = open(args.annotations, "rb").read()
    aset = coco_audit.parse_annotations(payload)
    os.makedirs(args.out, exist_ok=True)
    modes = ("centroid", "bbox") if args.mode == "both" else (args.mode,)
    category = int(args.category) if args.category.isdigit() else args.category
    for mode in modes:
        fn = (coco_audit.centroid_heatmap if mode == "centroid"
              else coco_audit.bbox_heatmap)
        hm = fn(aset, category, args.grid)
        stem = os.path.join(args.out, f"heatmap_{mode}_{hm.category}.pgm")
        coco_audit.write_heatmap_pgm(hm, stem)
        print(f"{mode} heatmap for {hm.category!r}: {hm.total_count} "
              f"annotations, grid {args.grid}, dropped {aset.dropped} -> {stem}")
    return EXIT_OK


def cmd_gen(args) -> int:
    doc = _load_config_dict(args.config, args.set,
                            data.DatasetConfig().to_dict())
    doc["count"] = args.count
    cfg = data.DatasetConfig.from_dict(doc)
    os.makedirs(args.out, exist_ok=True)
    for i, sample in enumerate(data.iter_samples(cfg)):
        img = np.round(sample.input[0, 0] * 255).astype(np.uint8)
        lab = (sample.target * LABEL_SCALE).astype(np.uint8)
        netpbm.write_pgm(os.path.join(args.out, f"sample_{i:03d}.pgm"), img)
        netpbm.write_pgm(os.path.join(args.out, f"label_{i:03d}.pgm"), lab)
    print(f"wrote {cfg.count} sample/label PGM pairs to {args.out}")
    return EXIT_OK


def cmd_train(args) -> int:
    doc = _load_config_dict(args.config, args.set,
                            harness.ExperimentConfig().to_dict())
    if args.out:
        doc["output_dir"] = args.out
    config = harness.ExperimentConfig.from_dict(doc)
    record = harness.run_regional_training(config, workers=args.workers)
    paths = harness.export_results(record)
    print(f"config {record.config_hash}: trained "
          f"{len(config.train_policies)} x {config.repeats} models in "
          f"{record.wall_clock['total_seconds']:.1f}s")
    for label, row in zip(record.train_labels, record.raw):
        cells = "  ".join(f"{l}={v:.5g}"
                          for l, v in zip(record.eval_labels, row))
        print(f"  {label}: {cells}")
    print(f"results -> {paths['results']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    model = unet.load_checkpoint(args.checkpoint)
    policies = [data.parse_policy(tok) for tok in args.bands.split(",")]
    template = data.DatasetConfig.from_dict(
        _load_config_dict(args.dataset_config, args.set,
                          data.DatasetConfig().to_dict()))
    row = harness.evaluate_bands(model, policies, args.count, args.seed,
                                 template)
    for policy, loss in zip(policies, row):
        print(f"{data.policy_label(policy)}: {loss:.6g}")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        path = os.path.join(args.out, "eval.csv")
        harness._write_matrix_csv(path, [os.path.basename(args.checkpoint)],
                                  [data.policy_label(p) for p in policies],
                                  np.array([row]))
        print(f"row -> {path}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    model = unet.load_checkpoint(args.checkpoint)
    glyphs = data.builtin_glyphs()
    glyph = glyphs.images[args.digit]
    background = None if args.background == "black" else data.NoisePool()
    scene = saliency.make_scene(glyph, args.digit, (args.height, args.width),
                                (args.extent_x, args.extent_y),
                                background, seed=args.seed)
    grid = saliency.ShiftGrid(args.extent_x, args.extent_y, args.stride)
    sm = saliency.saliency_shift_map(model, scene, grid)
    os.makedirs(args.out, exist_ok=True)
    saliency.export_shift_map(sm, os.path.join(args.out, "shift_map"))
    norm = "dispersion-normalized" if sm.normalized else "raw (flat matrix)"
    print(f"shift map {sm.values.shape[0]}x{sm.values.shape[1]} ({norm}); "
          f"origin raw value {sm.raw[len(grid.dys) // 2, len(grid.dxs) // 2]:g}"
          f" -> {args.out}/shift_map.csv")
    return EXIT_OK


def _load_sample_pair(image_path, label_path) -> data.Sample:
    img = netpbm.read_pnm(image_path).astype(np.float32) / 255.0
    lab = netpbm.read_pnm(label_path)
    if lab.ndim != 2 or img.shape != lab.shape:
        raise ValueError("sample and label dims disagree")
    target = (lab // LABEL_SCALE).astype(np.int64)
    classes = np.unique(target[target > 0])
    digit_class = int(classes[0]) - 1 if classes.size else 0
    meta = data.SampleMeta(digit_class, None, None,
                           data._mask_bbox(target > 0))
    H, W = img.shape
    return data.Sample(img.reshape(1, 1, H, W), target, meta)


def cmd_augment(args) -> int:
    sample = _load_sample_pair(args.input, args.label)
    rng = np.random.default_rng(args.seed)
    checks = []
    if args.transform == "random-shift":
        out = augment_mod.random_periodic_shift(sample, rng, args.max_frac)
        checks.append(("mask pixel count preserved",
                       int((out.target > 0).sum())
                       == int((sample.target > 0).sum())))
    elif args.transform == "to-boundary":
        box = sample.meta.bbox
        if box is None:
            raise ValueError("label map has no object to shift")
        img, boxes, _ = augment_mod.shift_object_to_boundary(
            sample.input, [box], [sample.meta.digit_class], rng)
        spec = harness._boundary_spec(box, sample.target.shape)
        out = augment_mod.shift_sample(sample, spec)
        H, W = sample.target.shape
        dmin = min(min(x, W - (x + w), y, H - (y + h))
                   for x, y, w, h in boxes)
        checks.append(("selected box edge distance is exactly 0", dmin == 0))
        checks.append(("image matches box transform",
                       bool(np.array_equal(img, out.input))))
    else:  # edge-drop
        spec = augment_mod.EdgeDropSpec(1.0, args.band_width)
        dropped = augment_mod.edge_block_drop(sample.input, spec, rng)
        out = data.Sample(dropped, sample.target, sample.meta)
        H, W = sample.target.shape
        b = args.band_width
        strips = {"left": (slice(None), slice(0, b)),
                  "right": (slice(None), slice(W - b, W)),
                  "top": (slice(0, b), slice(None)),
                  "bottom": (slice(H - b, H), slice(None))}
        side = next((s for s, ix in strips.items()
                     if not dropped[0, 0][ix].any()), None)
        checks.append(("one full side band zeroed", side is not None))
        if side is not None:
            kept_cells = H * W - (b * H if side in ("left", "right")
                                  else b * W)
            survivors = np.ones((H, W), dtype=bool)
            survivors[strips[side]] = False
            checks.append((
                "survivors rescaled by total/kept",
                bool(np.allclose(dropped[0, 0][survivors],
                                 sample.input[0, 0][survivors]
                                 * (H * W / kept_cells), rtol=1e-5))))
    os.makedirs(args.out, exist_ok=True)
    netpbm.write_pgm(os.path.join(args.out, "augmented.pgm"),
                     np.round(np.clip(out.input[0, 0], 0, 1) * 255)
                     .astype(np.uint8))
    netpbm.write_pgm(os.path.join(args.out, "augmented_label.pgm"),
                     (out.target * LABEL_SCALE).astype(np.uint8))
    ok = True
    for name, passed in checks:
        print(f"{'PASS' if passed else 'FAIL'}  {name}")
        ok &= passed
    return EXIT_OK if ok else EXIT_FAILED


def run_verification_suite(verbose: bool = True) -> bool:
    """Gradcheck every differentiable op plus the whole U-Net at f64."""
    rng = np.random.default_rng(0)
    checks = []

    for mode in (tc.ZERO, tc.CIRCULAR, tc.REFLECT, tc.random_pad(1.0)):
        x = rng.standard_normal((2, 3, 6, 5))
        w = rng.standard_normal((4, 3, 3, 3))
        b = rng.standard_normal(4)
        spec = tc.ConvSpec(3, 4, (3, 3), 1, 1, mode)

        def op(x_, w_, b_, spec=spec):
            frozen = np.random.default_rng(99)
            y, tape = tc.conv2d_forward(x_, w_, b_, spec, frozen)
            return y, lambda g: tc.conv2d_backward(tape, g)

        checks.append((f"conv3x3 {mode.kind} padding",
                       tc.gradcheck(op, [x, w, b], 1e-4,
                                    np.random.default_rng(1))))

    x = rng.standard_normal((2, 4, 8, 8))

    def pool_op(x_):
        rec = tc.maxpool2x2_forward(x_)
        return rec.output, lambda g: (tc.maxpool2x2_backward(rec, g),)

    checks.append(("maxpool2x2",
                   tc.gradcheck(pool_op, [x], 1e-4, np.random.default_rng(2))))

    x = rng.standard_normal((2, 3, 4, 4)) + 2.0

    def relu_op(x_):
        return tc.relu(x_), lambda g: (tc.relu_backward(x_, g),)

    checks.append(("relu",
                   tc.gradcheck(relu_op, [x], 1e-6, np.random.default_rng(3))))

    x = rng.standard_normal((1, 2, 3, 4))

    def up_op(x_):
        return (tc.upsample_nearest2x(x_),
                lambda g: (tc.upsample_nearest2x_backward(g),))

    checks.append(("upsample_nearest2x",
                   tc.gradcheck(up_op, [x], 1e-8, np.random.default_rng(4))))

    logits = rng.standard_normal((1, 5, 3, 3))
    target = rng.integers(0, 5, (1, 3, 3))

    def ce_op(l_):
        loss, grad = tc.softmax_cross_entropy_pixelwise(l_, target)
        return np.array([[[[loss]]]]), lambda g: (grad * g.item(),)

    checks.append(("softmax cross-entropy",
                   tc.gradcheck(ce_op, [logits], 1e-6,
                                np.random.default_rng(5))))

    cfg = unet.UNetConfig(depth=3, base_channels=2, precision="f64", seed=3)
    model = unet.build_unet(cfg)
    params = model.parameters()
    x = rng.standard_normal((1, 1, 8, 8))

    def model_op(x_, *ps):
        for dst, src in zip(params, ps):
            dst[...] = src
        logits, tape = unet.forward(model, x_)

        def vjp(g):
            grads, gx = unet.backward(model, tape, g)
            return (gx, *grads)
        return logits, vjp

    checks.append(("whole U-Net (depth 3)",
                   tc.gradcheck(model_op, [x] + [p.copy() for p in params],
                                1e-3, np.random.default_rng(6))))

    all_ok = True
    for name, report in checks:
        status = "PASS" if report.passed else "FAIL"
        if verbose:
            print(f"{status}  {name:28s} max_rel_error={report.max_rel_error:.3e} "
                  f"(tol {report.tolerance:g})")
        all_ok &= report.passed
    return all_ok


def cmd_gradcheck(args) -> int:
    return EXIT_OK if run_verification_suite() else EXIT_FAILED


def cmd_report(args) -> int:
    record = harness.load_results(args.results)
    paths = harness.export_results(record, args.out)
    print(f"re-rendered {record.config_hash} -> {args.out}")
    for name, path in paths.items():
        print(f"  {name}: {path}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="centerbias",
        description="Measure, reproduce, and mitigate the center-position "
                    "bias of convolutional networks.",
        epilog="Exit codes: 0 ok, 2 usage, 3 missing file, 4 invalid "
               "config/input, 5 validation failed.  CENTERBIAS_WORKERS sets "
               "the default training worker count.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("audit", help="object-position heatmaps from "
                                     "annotation JSON")
    p.add_argument("--annotations", required=True)
    p.add_argument("--category", required=True)
    p.add_argument("--grid", type=int, default=coco_audit.DEFAULT_GRID)
    p.add_argument("--mode", choices=("centroid", "bbox", "both"),
                   default="both")
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_audit)

    p = sub.add_parser("gen", help="write preview sample/label PGM pairs")
    p.add_argument("--config", help="DatasetConfig JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--count", type=int, default=3)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen)

    p = sub.add_parser("train", help="run a regional-bias experiment")
    p.add_argument("--config", help="ExperimentConfig JSON")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out", help="override config output_dir")
    p.add_argument("--workers", type=int, default=None)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="band-wise losses of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bands", default="band:0-0.1,band:0.9-1")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--dataset-config", help="DatasetConfig JSON template")
    p.add_argument("--set", action="append", metavar="KEY=VALUE")
    p.add_argument("--out")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("saliency", help="saliency-shift map of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--digit", type=int, default=5, choices=range(10))
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)
    p.add_argument("--extent-x", type=int, default=16)
    p.add_argument("--extent-y", type=int, default=16)
    p.add_argument("--stride", type=int, default=2)
    p.add_argument("--background", choices=("black", "noise"),
                   default="noise")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_saliency)

    p = sub.add_parser("augment", help="transform a sample PGM pair and "
                                       "print postcondition checks")
    p.add_argument("--input", required=True, help="sample PGM")
    p.add_argument("--label", required=True, help="label PGM")
    p.add_argument("--transform", required=True,
                   choices=("random-shift", "to-boundary", "edge-drop"))
    p.add_argument("--max-frac", type=float, default=0.25)
    p.add_argument("--band-width", type=int, default=8)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_augment)

    p = sub.add_parser("gradcheck", help="finite-difference verification of "
                                         "every backward op")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("report", help="re-render matrices/curves from "
                                      "results.json")
    p.add_argument("--results", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    try:
        return args.fn(args)
    except FileNotFoundError as e:
        print(f"error: missing file: {e.filename or e}", file=sys.stderr)
        return EXIT_MISSING
    except (ValueError, KeyError, json.JSONDecodeError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    raise SystemExit(main())
