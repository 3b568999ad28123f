"""Command-line entry point for the whole pipeline.

Subcommands cover dataset generation, pre-training, image rendering,
gradient certification, the camera-pose probe, feature visualization,
and the two ablation matrices. Every run that writes delimited output
also writes a figure next to it.

Exit codes: 0 success, 2 usage/config error, 1 runtime failure; failures
print one `error: ...` line on stderr.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys

import numpy as np

from . import config as cfgmod
from . import scenes
from .config import ConfigError

MASK_RATIO_GRID = (0.0, 0.25, 0.5, 0.75, 0.95)
LOSS_ROWS = (("no_color", dict(toggle_color=False)),
             ("no_depth", dict(toggle_depth=False)),
             ("no_semantic", dict(toggle_semantic=False)))

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_USAGE = 2


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # argparse would sys.exit(2) on its own
        raise _UsageError(message)


def build_parser():
    p = _Parser(prog="mvrender", description=__doc__.splitlines()[0])
    p.add_argument("--print-config", action="store_true",
                   help="print the resolved config with value sources")
    p.add_argument("--config", default=None,
                   help="JSON config file (with --print-config)")
    sub = p.add_subparsers(dest="cmd", parser_class=_Parser)

    sc = sub.add_parser("scenes", help="synthetic dataset commands")
    scsub = sc.add_subparsers(dest="scenes_cmd", parser_class=_Parser)
    gen = scsub.add_parser("gen", help="generate a procedural dataset")
    gen.add_argument("--n", type=int, required=True)
    gen.add_argument("--seed", type=int, required=True)
    gen.add_argument("--out", required=True)
    gen.add_argument("--views", type=int, default=8)
    gen.add_argument("--size", type=int, default=64)
    gen.add_argument("--classes", type=int, default=8)
    gen.add_argument("--semantic-dim", type=int, default=16)

    tr = sub.add_parser("pretrain", help="run masked multi-view pre-training")
    tr.add_argument("--config", default=None)
    tr.add_argument("--data", required=True)
    tr.add_argument("--out", required=True)
    tr.add_argument("--resume", default=None)

    rd = sub.add_parser("render", help="render one view through the model")
    rd.add_argument("--ckpt", required=True)
    rd.add_argument("--data", required=True)
    rd.add_argument("--scene", required=True)
    rd.add_argument("--view", type=int, required=True)
    rd.add_argument("--out", required=True)

    gc = sub.add_parser("gradcheck", help="finite-difference certification")
    gc.add_argument("--suite", action="store_true",
                    help="full run: >=10 instances per check")
    gc.add_argument("--instances", type=int, default=None,
                    help="override the instance count")
    gc.add_argument("--out", default=None,
                    help="also write gradcheck.csv + figure here")

    pr = sub.add_parser("probe", help="frozen-encoder evaluation probes")
    prsub = pr.add_subparsers(dest="probe_cmd", parser_class=_Parser)
    pose = prsub.add_parser("pose", help="relative camera-pose regression")
    pose.add_argument("--ckpt", required=True)
    pose.add_argument("--data", required=True)
    pose.add_argument("--out", required=True)
    pose.add_argument("--pairs", type=int, default=200)
    pose.add_argument("--seed", type=int, default=0)

    ft = sub.add_parser("features", help="joint PCA feature visualization")
    ft.add_argument("--ckpt", required=True)
    ft.add_argument("--data", required=True)
    ft.add_argument("--out", required=True)
    ft.add_argument("--scene", default=None,
                    help="scene id (default: first in the dataset)")

    ab = sub.add_parser("ablate", help="mask-ratio / loss-component matrix")
    ab.add_argument("--axis", required=True, choices=("mask_ratio", "loss"))
    ab.add_argument("--config", default=None)
    ab.add_argument("--out", required=True)
    ab.add_argument("--data", default=None,
                    help="dataset dir (default: 2 generated scenes)")
    return p


# ---------------------------------------------------------------------------
# subcommand handlers


def _load_cfg(path):
    if path is None:
        return cfgmod.resolve_config({})
    return cfgmod.load_config(path)


def cmd_print_config(args):
    print(cfgmod.print_config(_load_cfg(args.config)))
    return EXIT_OK


def cmd_scenes_gen(args):
    samples, teacher = scenes.generate_dataset(
        args.n, args.seed, n_views=args.views,
        height=args.size, width=args.size,
        num_classes=args.classes, c_semantic=args.semantic_dim)
    scenes.write_dataset(samples, teacher, args.out)
    print(f"wrote {len(samples)} scenes ({args.views} views, "
          f"{args.size}x{args.size}) to {args.out}")
    return EXIT_OK


def cmd_pretrain(args):
    from .plots import plot_metrics
    from .trainer import fit

    cfg = _load_cfg(args.config)
    samples, teacher = scenes.read_dataset(args.data)
    result = fit(samples, teacher, cfg, args.out, resume=args.resume)
    png = plot_metrics(result.metrics_path,
                       os.path.join(args.out, "metrics.png"))
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    print(f"figure: {png}")
    return EXIT_OK


def cmd_render(args):
    from .evalprobe import save_ppm
    from .plots import plot_image_row
    from .renderer import render_image
    from .trainer import model_from_checkpoint

    model, cfg = model_from_checkpoint(args.ckpt)
    samples, _ = scenes.read_dataset(args.data)
    sample = next((s for s in samples if s.scene_id == args.scene), None)
    if sample is None:
        raise ValueError(f"scene {args.scene!r} not found in {args.data}")
    if not 0 <= args.view < len(sample.views):
        raise ValueError(f"view index {args.view} out of range "
                         f"(scene has {len(sample.views)})")
    fields, _ = model.forward_fields(sample, [None] * len(sample.views))
    view = sample.views[args.view]
    rgb, depth, _ = render_image(fields, view.camera,
                                 cfgmod.sampler_config(cfg), seed=cfg.seed)
    os.makedirs(args.out, exist_ok=True)
    base = os.path.join(args.out, f"{args.scene}_view{args.view:02d}")
    save_ppm(base + ".ppm", rgb)
    png = plot_image_row([view.rgb, rgb, depth], base + ".png",
                         titles=["ground truth", "rendered", "depth"])
    print(f"image: {base}.ppm")
    print(f"figure: {png}")
    return EXIT_OK


def cmd_gradcheck(args):
    from .certify import full_suite

    instances = args.instances or (10 if args.suite else 2)
    reports, secs = full_suite(instances=instances)
    for rep in sorted(reports, key=lambda r: r.op_name):
        print(rep.line())
    failed = [r for r in reports if not r.passed]
    print(f"{len(reports) - len(failed)}/{len(reports)} checks passed "
          f"({instances} instances each, {secs:.1f}s)")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        csv_path = os.path.join(args.out, "gradcheck.csv")
        with open(csv_path, "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["name", "max_rel_error", "max_abs_error", "passed"])
            for r in sorted(reports, key=lambda r: r.op_name):
                w.writerow([r.op_name, f"{r.max_rel_error:.6e}",
                            f"{r.max_abs_error:.6e}", int(r.passed)])
        _plot_gradcheck(reports, os.path.join(args.out, "gradcheck.png"))
        print(f"report: {csv_path}")
    if failed:
        print(f"error: {len(failed)} gradient checks failed",
              file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def _plot_gradcheck(reports, out_png):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    reports = sorted(reports, key=lambda r: r.max_rel_error)
    names = [r.op_name for r in reports]
    vals = [max(r.max_rel_error, 1e-16) for r in reports]
    fig, ax = plt.subplots(figsize=(7, 0.22 * len(reports) + 1.5))
    colors = ["tab:green" if r.passed else "tab:red" for r in reports]
    ax.barh(np.arange(len(names)), vals, color=colors)
    ax.set_yticks(np.arange(len(names)), names, fontsize=6)
    ax.set_xscale("log")
    ax.set_xlabel("max relative gradient error")
    fig.tight_layout()
    fig.savefig(out_png, dpi=110)
    plt.close(fig)


def cmd_probe_pose(args):
    from .evalprobe import (build_pose_dataset, encoder_from_checkpoint,
                            train_probe, write_pose_errors)
    from .plots import plot_pose_errors

    encoder, _ = encoder_from_checkpoint(args.ckpt)
    samples, _ = scenes.read_dataset(args.data)
    pairs = build_pose_dataset(samples, args.pairs, args.seed)
    errors = train_probe(pairs, encoder, seed=args.seed)
    os.makedirs(args.out, exist_ok=True)
    json_path = os.path.join(args.out, "pose_errors.json")
    write_pose_errors(json_path, errors)
    png = plot_pose_errors(errors, os.path.join(args.out, "pose_errors.png"))
    print(f"held-out pairs: {errors.n} (invalid predictions: "
          f"{errors.n_invalid})")
    print(f"mean translation error: {errors.mean_trans:.5f}")
    print(f"mean rotation error: {errors.mean_rot:.5f} rad")
    print(f"report: {json_path}")
    print(f"figure: {png}")
    return EXIT_OK


def cmd_features(args):
    from .evalprobe import encoder_from_checkpoint, feature_pca_map, save_ppm
    from .plots import plot_image_row

    encoder, _ = encoder_from_checkpoint(args.ckpt)
    samples, _ = scenes.read_dataset(args.data)
    if args.scene is None:
        sample = samples[0]
    else:
        sample = next((s for s in samples if s.scene_id == args.scene), None)
        if sample is None:
            raise ValueError(f"scene {args.scene!r} not found in {args.data}")
    images = [v.rgb for v in sample.views]
    maps = feature_pca_map(encoder, images)
    os.makedirs(args.out, exist_ok=True)
    paths = []
    for i, m in enumerate(maps):
        path = os.path.join(args.out, f"{sample.scene_id}_pca{i:02d}.ppm")
        save_ppm(path, m)
        paths.append(path)
    png = plot_image_row(
        list(images) + list(maps),
        os.path.join(args.out, f"{sample.scene_id}_features.png"),
        titles=[f"view {i}" for i in range(len(images))]
        + [f"pca {i}" for i in range(len(maps))])
    print(f"wrote {len(paths)} feature maps to {args.out}")
    print(f"figure: {png}")
    return EXIT_OK


ABLATE_CSV_COLUMNS = ("axis", "value", "toggle_color", "toggle_depth",
                      "toggle_semantic", "color", "depth", "semantic",
                      "eikonal", "sdf_near", "free", "total")


def _tail_means(metrics_path, k=10):
    from .plots import read_metrics_csv

    cols = read_metrics_csv(metrics_path)
    return {name: float(np.mean(cols[name][-k:]))
            for name in ("color", "depth", "semantic", "eikonal",
                         "sdf_near", "free", "total")}


def cmd_ablate(args):
    from .plots import plot_ablation
    from .trainer import fit

    base = _load_cfg(args.config)
    if args.data is not None:
        samples, teacher = scenes.read_dataset(args.data)
    else:
        samples, teacher = scenes.generate_dataset(
            2, base.seed, n_views=base.n_views, height=base.image_size,
            width=base.image_size, num_classes=base.num_classes,
            c_semantic=base.c_semantic)
    if args.axis == "mask_ratio":
        variants = [(f"{r:.2f}", dict(mask_ratio=r)) for r in MASK_RATIO_GRID]
    else:
        variants = [(label, dict(overrides)) for label, overrides in LOSS_ROWS]

    os.makedirs(args.out, exist_ok=True)
    rows = []
    for label, overrides in variants:
        cfg = cfgmod.resolve_config({**cfgmod.config_dict(base), **overrides})
        run_dir = os.path.join(args.out, f"{args.axis}_{label}")
        result = fit(samples, teacher, cfg, run_dir)
        row = {"axis": args.axis, "value": label,
               "toggle_color": int(cfg.toggle_color),
               "toggle_depth": int(cfg.toggle_depth),
               "toggle_semantic": int(cfg.toggle_semantic)}
        row.update({k: f"{v:.10e}" for k, v in
                    _tail_means(result.metrics_path).items()})
        rows.append(row)
        print(f"{args.axis}={label}: total={float(row['total']):.5f}")

    csv_path = os.path.join(args.out, "ablation.csv")
    with open(csv_path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=ABLATE_CSV_COLUMNS)
        w.writeheader()
        w.writerows(rows)
    png = plot_ablation(rows, args.axis,
                        os.path.join(args.out, "ablation.png"))
    print(f"summary: {csv_path}")
    print(f"figure: {png}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# dispatch


def run(argv):
    """Parse argv (no program name) and execute. Returns the exit code."""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except _UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as e:  # --help
        return int(e.code or 0)

    try:
        if args.print_config:
            return cmd_print_config(args)
        if args.cmd is None:
            print("error: a subcommand is required (see --help)",
                  file=sys.stderr)
            return EXIT_USAGE
        if args.cmd == "scenes":
            if args.scenes_cmd != "gen":
                print("error: scenes requires the 'gen' subcommand",
                      file=sys.stderr)
                return EXIT_USAGE
            return cmd_scenes_gen(args)
        if args.cmd == "probe":
            if args.probe_cmd != "pose":
                print("error: probe requires the 'pose' subcommand",
                      file=sys.stderr)
                return EXIT_USAGE
            return cmd_probe_pose(args)
        handler = {"pretrain": cmd_pretrain,
                   "render": cmd_render,
                   "gradcheck": cmd_gradcheck,
                   "features": cmd_features,
                   "ablate": cmd_ablate}[args.cmd]
        return handler(args)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as e:  # noqa: BLE001  - boundary: everything -> exit 1
        print(f"error: {e}", file=sys.stderr)
        return EXIT_RUNTIME


def main():
    sys.exit(run(sys.argv[1:]))


if __name__ == "__main__":
    main()
