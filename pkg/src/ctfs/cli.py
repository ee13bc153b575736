"""Command-line entry point.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 training failure.
Set ``CTFS_RUN_ROOT`` to relocate relative run directories.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from .config import ConfigError, dump_config, load_config
from .model import CheckpointError, NonFiniteLossError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_TRAIN = 0, 2, 3, 4

log = logging.getLogger("ctfs")


def _save_gray(arr, path: Path) -> None:
    Image.fromarray(np.round(np.clip(arr, 0, 1) * 255).astype(np.uint8)).save(path)


def _save_heatmap(arr, path: Path) -> None:
    try:
        from matplotlib import cm
        rgba = cm.viridis(np.clip(arr, 0, 1))
        Image.fromarray((rgba[..., :3] * 255).astype(np.uint8)).save(path)
    except ImportError:
        _save_gray(arr, path)


# ------------------------------------------------------------- subcommands


def cmd_generate(args) -> int:
    from .synth import SceneSpec, generate_dataset, save_dataset
    spec = SceneSpec(height=args.size, width=args.size, num_classes=args.classes)
    scenes = generate_dataset(args.n, args.seed, spec, args.min_targets, args.max_targets)
    save_dataset(scenes, args.out, num_classes=args.classes, bit_depth=args.bit_depth)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return EXIT_OK


def cmd_split(args) -> int:
    from .trainer import prepare_split
    part, split = prepare_split(args.data, args.ratio, args.seed)
    print(f"train/val/test = {len(part.train)}/{len(part.val)}/{len(part.test)}; "
          f"labeled {len(split.labeled_ids)}, unlabeled {len(split.unlabeled_ids)}")
    return EXIT_OK


def cmd_train(args) -> int:
    from .trainer import run_experiment
    cfg = load_config(args.config, args.overrides)
    summary = run_experiment(cfg, resume=args.resume)
    print(f"best val mIoU {summary.best_val_miou:.4f} at epoch {summary.best_epoch}; "
          f"run dir {summary.run_dir}")
    return EXIT_OK


def evaluate_checkpoint(checkpoint, data_dir, subset="test", split_seed=0, out=None, per_image=False):
    from .metrics import evaluate_model, miou, write_report
    from .model import load_model
    from .synth import load_dataset
    from .trainer import prepare_partition
    ds = load_dataset(data_dir)
    net = load_model(checkpoint, ds.num_classes)
    if subset == "all":
        ids = sorted(ds.masks)
    else:
        ids = getattr(prepare_partition(data_dir, split_seed, ds), subset)
    result = evaluate_model(net, ds, ids, per_image=per_image)
    cm, rows = result if per_image else (result, [])
    ious, mean = miou(cm)
    if out is not None:
        write_report(out, ds.class_names, ious, mean, str(checkpoint))
        if per_image:
            with Path(out).with_suffix(".per_image.csv").open("w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["id", "miou"])
                w.writerows(rows)
    return ious, mean


def cmd_eval(args) -> int:
    ious, mean = evaluate_checkpoint(args.checkpoint, args.data, args.subset, args.split_seed,
                                     args.out, args.per_image)
    print("per-class IoU: " + ", ".join("nan" if np.isnan(v) else f"{v:.4f}" for v in ious))
    print(f"mIoU {mean:.4f}")
    return EXIT_OK


def _preview_image(args):
    if args.data:
        from .synth import load_dataset
        ds = load_dataset(args.data)
        sid = args.id or ds.ids[0]
        if sid not in ds.images:
            raise KeyError(f"no image {sid!r} in {args.data}")
        return ds.images[sid]
    from .synth import generate_scene
    return generate_scene(args.seed).intensity


def cmd_augment_preview(args) -> int:
    from .augment import (AttenuationParams, ShadowParams, apply_attenuation, apply_general_weak,
                          apply_shadow, apply_strong, shadow_region)
    img = _preview_image(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(args.seed)
    h, w = img.shape
    shadow = ShadowParams.sample(rng, h, w)
    atten = AttenuationParams.sample(rng)
    general, _, rec = apply_general_weak(img, rng=rng)
    views = {
        "original": img,
        "general_weak": general,
        "shadow": apply_shadow(img, shadow),
        "attenuation": apply_attenuation(img, atten),
        "strong": apply_strong(general, rng=rng),
    }
    for name, arr in views.items():
        _save_gray(arr, out / f"{name}.png")
    _save_gray(shadow_region(shadow, h, w).astype(float), out / "shadow_mask.png")
    (out / "params.txt").write_text(
        f"shadow = {shadow}\nattenuation = {atten}\ngeometry = {rec}\n")
    print(f"wrote previews to {out}")
    return EXIT_OK


def cmd_reliability_dump(args) -> int:
    import torch
    from .model import model_from_state
    from .mvra import MVRAConfig, assess
    from .synth import load_dataset
    from .teachers import TeacherBank
    ds = load_dataset(args.data)
    state = torch.load(args.checkpoint, map_location="cpu", weights_only=False)
    if state.get("bank"):
        bank = TeacherBank.from_state(state["bank"], ds.num_classes)
    else:
        student = model_from_state(state.get("student", state), ds.num_classes)
        bank = TeacherBank.from_student(student)
    sid = args.id or ds.ids[0]
    img = ds.images[sid]
    rel = assess(bank, img, MVRAConfig(args.grid, args.views, args.delta), seed=args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    grid = rel.grid_scores.numpy()
    np.savetxt(out / "grid_scores.txt", grid, fmt="%.6f")
    np.savetxt(out / "pixel_scores.txt", rel.pixel_scores.numpy(), fmt="%.4f")
    np.savetxt(out / "consistency.txt", rel.consistency.numpy(), fmt="%.6f")
    for tag, s in rel.stability.items():
        np.savetxt(out / f"stability_{tag}.txt", s.numpy(), fmt="%.6f")
    _save_heatmap(rel.pixel_scores.numpy(), out / "pixel_scores.png")
    _save_heatmap(np.kron(grid, np.ones((8, 8))), out / "grid_scores.png")
    _save_gray(img, out / "image.png")
    print(f"{sid}: mean reliability {grid.mean():.4f}; wrote {out}")
    return EXIT_OK


def cmd_compare(args) -> int:
    from .metrics import read_report_miou
    from .trainer import resolve_run_dir, run_experiment
    cfg = load_config(args.config, args.overrides)
    base_dir = Path(cfg.run_dir)
    runs = {
        "supervised": cfg.replace(lambda_u=0.0, run_dir=str(base_dir / "supervised")),
        "ctfs": cfg.replace(run_dir=str(base_dir / "ctfs")),
    }
    out_dir = resolve_run_dir(cfg)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "config.resolved.cfg").write_text(dump_config(cfg))
    rows, curves = [], {}
    for name, run_cfg in runs.items():
        summary = run_experiment(run_cfg, resume=args.resume)
        report = summary.run_dir / "eval_test.csv"
        evaluate_checkpoint(summary.best_checkpoint, cfg.data_dir, "test",
                                           cfg.split_seed, report)
        rows.append({"method": name, "label_ratio": cfg.ratio,
                     "best_val_miou": summary.best_val_miou,
                     "test_miou": read_report_miou(report), "eval_report": str(report)})
        curves[name] = [h["val_miou"] for h in summary.history]
    with (out_dir / "compare.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    with (out_dir / "curves.csv").open("w", newline="") as fh:
        w = csv.writer(fh)
        names = list(curves)
        w.writerow(["epoch"] + [f"{n}_val_miou" for n in names])
        for e in range(max(len(c) for c in curves.values())):
            w.writerow([e] + [curves[n][e] if e < len(curves[n]) else "" for n in names])
    try:
        import matplotlib
        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for n, c in curves.items():
            ax.plot(c, label=n)
        ax.set_xlabel("epoch")
        ax.set_ylabel("val mIoU")
        ax.legend()
        fig.tight_layout()
        fig.savefig(out_dir / "curves.png", dpi=100)
        plt.close(fig)
    except ImportError:
        pass
    print(f"{'method':<12}{'ratio':>8}{'val mIoU':>10}{'test mIoU':>11}")
    for r in rows:
        print(f"{r['method']:<12}{r['label_ratio']:>8g}{r['best_val_miou']:>10.4f}{r['test_miou']:>11.4f}")
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ctfs", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic sonar dataset")
    g.add_argument("--n", type=int, default=200)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--size", type=int, default=128)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--min-targets", type=int, default=1)
    g.add_argument("--max-targets", type=int, default=4)
    g.add_argument("--bit-depth", type=int, choices=(8, 16), default=16)
    g.set_defaults(func=cmd_generate)

    s = sub.add_parser("split", help="persist the 6:2:2 partition and a labeled split")
    s.add_argument("--data", required=True)
    s.add_argument("--ratio", type=float, default=0.05)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_split)

    for name, func, helptext in (("train", cmd_train, "train one model"),
                                 ("compare", cmd_compare, "supervised baseline vs full method")):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--config", default=None)
        t.add_argument("--resume", action="store_true")
        t.add_argument("overrides", nargs="*", metavar="key=value")
        t.set_defaults(func=func)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--subset", choices=("train", "val", "test", "all"), default="test")
    e.add_argument("--split-seed", type=int, default=0)
    e.add_argument("--out", default=None)
    e.add_argument("--per-image", action="store_true")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("augment-preview", help="dump before/after augmentation images")
    a.add_argument("--data", default=None)
    a.add_argument("--id", default=None)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_augment_preview)

    r = sub.add_parser("reliability-dump", help="dump reliability maps for one image")
    r.add_argument("--checkpoint", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--id", default=None)
    r.add_argument("--grid", type=int, default=32)
    r.add_argument("--views", type=int, default=2)
    r.add_argument("--delta", type=float, default=0.5)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_reliability_dump)
    return p


def main(argv=None) -> int:
    from .synth import DatasetError
    from .trainer import TrainingError
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DatasetError, CheckpointError, KeyError, FileExistsError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, NonFiniteLossError) as exc:
        print(f"training failed: {exc}", file=sys.stderr)
        return EXIT_TRAIN


if __name__ == "__main__":
    sys.exit(main())
