"""Command-line entry point: generate, train, eval, analyze, plot."""
from __future__ import annotations

import argparse
import csv
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .config import RunConfig
from .errors import ConfigError, DataError, IstdError

log = logging.getLogger("istdkd")


def cmd_generate(args):
    from .synthdata import build_dataset, save_dataset

    if args.size < 32:
        raise ConfigError(f"--size must be >= 32, got {args.size}")
    if args.n_train < 10:
        raise ConfigError(f"--n-train must be >= 10, got {args.n_train}")
    samples, split = build_dataset(args.n_train, args.n_test, args.size, args.seed, args.val_ratio)
    out = Path(args.out)
    try:
        save_dataset(out, samples, split)
    except OSError as exc:
        raise DataError(f"cannot write dataset to {out}: {exc}") from exc
    print(f"wrote {len(samples)} samples to {out} "
          f"(train {len(split.train)}, val {len(split.val)}, test {len(split.test)})")
    return 0


def _run_dir(cfg):
    stamp = time.strftime("%Y%m%d-%H%M%S")
    return Path(cfg.out_dir) / f"{stamp}-{cfg.hash()[:8]}"


def cmd_train(args):
    from .bilevel import train
    from .nets import load_checkpoint
    from .synthdata import load_dataset

    cfg = RunConfig.load(args.config)
    dataset = load_dataset(cfg.data_dir)
    if args.resume:
        # refuse early, before any work, if the config drifted
        load_checkpoint(args.resume, expected_hash=cfg.hash())
        run_dir = Path(args.resume).parent
    else:
        run_dir = _run_dir(cfg)
    result = train(cfg, dataset, run_dir=run_dir, resume=args.resume)
    last = result.history[-1] if result.history else None
    if last is not None:
        print(f"epoch {last['epoch']}: train IoU {last['train_IoU']:.4f}  test IoU {last['test_IoU']:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def _student_from(payload):
    from .nets import StudentNet

    cfg = payload["config"]
    student = StudentNet(tuple(cfg["channels"]))
    student.load_state_dict(payload["theta"])
    student.eval()
    return student


def cmd_eval(args):
    from .metrics import characteristic_report
    from .nets import load_checkpoint
    from .synthdata import load_dataset

    payload = load_checkpoint(args.ckpt)
    student = _student_from(payload)
    dataset = load_dataset(args.data)
    samples = dataset.subset(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    report = characteristic_report(student, samples, split=args.split)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "report.csv"
    report.to_csv(out)
    print(report.table())
    print(f"wrote {out}")
    return 0


def _save_gray(path, arr):
    from PIL import Image

    arr = np.asarray(arr, dtype=np.float64)
    lo, hi = float(arr.min()), float(arr.max())
    norm = (arr - lo) / (hi - lo) if hi > lo else np.zeros_like(arr)
    Image.fromarray(np.round(norm * 255).astype(np.uint8)).save(path)


def feature_panels(teacher, image, blocks, grid):
    """Named 2-D maps for one image: input, pre/post modulation per hook, score map, prediction."""
    x = torch.as_tensor(image, dtype=torch.float32)[None, None]
    b = torch.as_tensor(blocks, dtype=torch.float32)[None]
    with torch.no_grad():
        z, feats, aux = teacher(x, b, return_aux=True)
    panels = {"input": np.asarray(image)}
    for i, (pre, post) in enumerate(zip(aux["raw"], feats)):
        panels[f"hook{i}_pre"] = pre[0].mean(0).numpy()
        panels[f"hook{i}_post"] = post[0].mean(0).numpy()
    panels["score"] = aux["attention"][0].reshape(grid).numpy()
    panels["pred"] = torch.sigmoid(z[0]).numpy()
    return panels


def cmd_analyze(args):
    from .metrics import attention_report, write_attention_csv
    from .nets import build_teacher, load_checkpoint
    from .synthdata import load_dataset
    from .vfm import extract_tokens, make_provider

    payload = load_checkpoint(args.ckpt)
    cfg = payload["config"]
    if payload.get("phi") is None:
        raise ConfigError(f"{args.ckpt} has no teacher parameters (trained with use_vfm = false)")
    provider = make_provider(cfg["provider"], fallback=cfg["provider_fallback"], seed=cfg["provider_seed"],
                             patch=cfg["patch"], dim=cfg["dim"], n_blocks=cfg["n_blocks"])
    student = _student_from(payload)
    teacher = build_teacher(student, cfg["n_blocks"], cfg["dim"], cfg["hidden"], cfg["gate_init"])
    teacher.load_state_dict(payload["phi"])
    teacher.eval()

    dataset = load_dataset(args.data)
    samples = dataset.subset(args.split)
    if not samples:
        raise DataError(f"split {args.split!r} of {args.data} is empty")
    toks = [extract_tokens(s.image, provider) for s in samples]
    table = attention_report(teacher, np.stack([t.blocks for t in toks]), [s.tag for s in samples])
    out = Path(args.out) if args.out else Path(args.ckpt).parent / "analysis"
    out.mkdir(parents=True, exist_ok=True)
    write_attention_csv(out / "attn.csv", table)
    for s, tok in list(zip(samples, toks))[: args.n_panels]:
        d = out / s.id
        d.mkdir(exist_ok=True)
        panels = feature_panels(teacher, s.image, tok.blocks, tok.patch_grid)
        panels["gt"] = s.gt_mask.astype(np.float64)
        for name, arr in panels.items():
            _save_gray(d / f"{name}.png", arr)
    print(f"wrote {out / 'attn.csv'} and {min(args.n_panels, len(samples))} panel sets")
    return 0


def read_log(path):
    """Parse an epoch log into (epochs, train_IoU, test_IoU)."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"log not found: {path}")
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataError(f"{path} is empty")
    header = rows[0]
    try:
        cols = [header.index(c) for c in ("epoch", "train_IoU", "test_IoU")]
    except ValueError:
        raise DataError(f"{path}:1: header lacks epoch/train_IoU/test_IoU") from None
    out = [], [], []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        try:
            vals = [float(row[c]) for c in cols]
        except (IndexError, ValueError):
            raise DataError(f"{path}:{lineno}: cannot parse row {row!r}") from None
        for lst, v in zip(out, vals):
            lst.append(v)
    if not out[0]:
        raise DataError(f"{path} has no epochs")
    return out


def plot_curves(epochs, train_iou, test_iou, out):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, 2, figsize=(8, 3.2), sharey=True)
    for ax, ys, name in zip(axes, (train_iou, test_iou), ("train", "test")):
        ax.plot(epochs, ys, marker="o", ms=2, lw=1)
        ax.set_title(f"{name} IoU")
        ax.set_xlabel("epoch")
        ax.grid(alpha=0.3)
    axes[0].set_ylabel("IoU")
    fig.tight_layout()
    fig.savefig(out, dpi=100, metadata={"Software": None})
    plt.close(fig)


def cmd_plot(args):
    epochs, tr, te = read_log(args.log)
    plot_curves(epochs, tr, te, args.out)
    print(f"wrote {args.out} ({len(epochs)} epochs)")
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="istdkd", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--n-train", type=int, default=160)
    g.add_argument("--n-test", type=int, default=40)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--val-ratio", type=float, default=0.1)
    g.set_defaults(fn=cmd_generate)

    t = sub.add_parser("train", help="run bilevel training from a config file")
    t.add_argument("--config", required=True)
    t.add_argument("--resume")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="student-only evaluation of a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test", choices=("train", "val", "test"))
    e.add_argument("--out", help="report path (default: report.csv next to the checkpoint)")
    e.set_defaults(fn=cmd_eval)

    a = sub.add_parser("analyze", help="attention statistics and feature panels")
    a.add_argument("--ckpt", required=True)
    a.add_argument("--data", required=True)
    a.add_argument("--split", default="test", choices=("train", "val", "test"))
    a.add_argument("--out")
    a.add_argument("--n-panels", type=int, default=4)
    a.set_defaults(fn=cmd_analyze)

    pl = sub.add_parser("plot", help="train/test IoU curves from an epoch log")
    pl.add_argument("--log", required=True)
    pl.add_argument("--out", required=True)
    pl.set_defaults(fn=cmd_plot)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except IstdError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return DataError.exit_code


if __name__ == "__main__":
    sys.exit(main())
