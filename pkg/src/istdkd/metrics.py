"""ISTD evaluation: IoU, nIoU, P_d, F_a, per-characteristic reports, attention tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import torch

from . import TAGS
from .errors import DataError, ShapeError
from .masks import components
from .vfm import attention_stats


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return pred, gt


def iou(pred, gt):
    """Pixel IoU; two empty masks count as a perfect match."""
    pred, gt = _pair(pred, gt)
    union = int((pred | gt).sum())
    if union == 0:
        return 1.0
    return int((pred & gt).sum()) / union


def niou(preds, gts):
    if len(preds) == 0:
        raise ValueError("nIoU of an empty list")
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    return float(np.mean([iou(p, g) for p, g in zip(preds, gts)]))


def _centroids(mask):
    # exact rationals: (row_sum, col_sum, n)
    return [(int(r.sum()), int(c.sum()), int(r.size)) for r, c in components(mask)]


def match_targets(pred, gt, dist_thresh=3):
    """Greedy nearest matching of predicted to GT components by centroid distance.

    Returns ``(n_targets, n_detected, unmatched_pred_pixels)``.
    """
    pred, gt = _pair(pred, gt)
    pc, gc = _centroids(pred), _centroids(gt)
    limit = Fraction(dist_thresh) ** 2
    pairs = []
    for gi, (gr, gcc, gn) in enumerate(gc):
        for pi, (pr, pcc, pn) in enumerate(pc):
            d2 = Fraction(gr, gn) - Fraction(pr, pn)
            e2 = Fraction(gcc, gn) - Fraction(pcc, pn)
            dist2 = d2 * d2 + e2 * e2
            if dist2 <= limit:
                pairs.append((dist2, gi, pi))
    pairs.sort()
    used_g, used_p = set(), set()
    for _, gi, pi in pairs:
        if gi in used_g or pi in used_p:
            continue
        used_g.add(gi)
        used_p.add(pi)
    unmatched = sum(pc[i][2] for i in range(len(pc)) if i not in used_p)
    return len(gc), len(used_g), unmatched


def pd_fa(preds, gts, dist_thresh=3):
    """(P_d, F_a) pooled over images; F_a is a plain pixel fraction (multiply by 1e6 to report)."""
    if len(preds) != len(gts):
        raise ShapeError(f"{len(preds)} predictions for {len(gts)} ground truths")
    targets = detected = false_px = pixels = 0
    for p, g in zip(preds, gts):
        t, d, f = match_targets(p, g, dist_thresh)
        targets += t
        detected += d
        false_px += f
        pixels += np.asarray(g).size
    pd = detected / targets if targets else 1.0
    fa = false_px / pixels if pixels else 0.0
    return pd, fa


@dataclass
class Counts:
    """Pooled accumulator so subsets can be merged into an overall row."""

    inter: int = 0
    union: int = 0
    images: int = 0
    targets: int = 0
    detected: int = 0
    false_px: int = 0
    pixels: int = 0
    ious: list = field(default_factory=list)

    def add(self, pred, gt, dist_thresh=3):
        pred, gt = _pair(pred, gt)
        self.inter += int((pred & gt).sum())
        self.union += int((pred | gt).sum())
        self.ious.append(iou(pred, gt))
        self.images += 1
        t, d, f = match_targets(pred, gt, dist_thresh)
        self.targets += t
        self.detected += d
        self.false_px += f
        self.pixels += gt.size

    def merge(self, other):
        out = Counts()
        for name in ("inter", "union", "images", "targets", "detected", "false_px", "pixels"):
            setattr(out, name, getattr(self, name) + getattr(other, name))
        out.ious = self.ious + other.ious
        return out

    def row(self):
        return {
            "IoU": 100.0 * (self.inter / self.union if self.union else 1.0),
            "nIoU": 100.0 * (float(np.mean(self.ious)) if self.ious else 0.0),
            "Pd": 100.0 * (self.detected / self.targets if self.targets else 1.0),
            "Fa": 1e6 * (self.false_px / self.pixels if self.pixels else 0.0),
            "n": self.images,
        }


@dataclass
class EvalReport:
    split: str
    rows: dict  # tag -> metric dict, "Overall" first
    threshold: float = 0.5

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["split", "tag", "IoU", "nIoU", "Pd", "Fa", "n"])
            for tag, r in self.rows.items():
                wr.writerow([self.split, tag, f"{r['IoU']:.4f}", f"{r['nIoU']:.4f}",
                             f"{r['Pd']:.4f}", f"{r['Fa']:.4f}", r["n"]])

    def table(self):
        lines = [f"{'tag':<12}{'IoU':>8}{'nIoU':>8}{'Pd':>8}{'Fa(e-6)':>10}{'n':>6}"]
        for tag, r in self.rows.items():
            lines.append(f"{tag:<12}{r['IoU']:8.2f}{r['nIoU']:8.2f}{r['Pd']:8.2f}{r['Fa']:10.2f}{r['n']:6d}")
        return "\n".join(lines)


def report_from_predictions(preds, samples, split="test", threshold=0.5, dist_thresh=3):
    per_tag = {}
    for pred, s in zip(preds, samples):
        if s.tag not in TAGS:
            raise DataError(f"sample {s.id} has unknown tag {s.tag!r}")
        per_tag.setdefault(s.tag, Counts()).add(pred, s.gt_mask, dist_thresh)
    overall = Counts()
    for tag in TAGS:
        if tag in per_tag:
            overall = overall.merge(per_tag[tag])
    rows = {"Overall": overall.row()}
    rows.update({tag: per_tag[tag].row() for tag in TAGS if tag in per_tag})
    return EvalReport(split=split, rows=rows, threshold=threshold)


@torch.no_grad()
def predict_masks(student, samples, batch=32, threshold=0.5):
    """Binarise sigmoid(student logits) at ``threshold``; student only."""
    student.eval()
    dtype = next(student.parameters()).dtype
    out = []
    for i in range(0, len(samples), batch):
        x = torch.as_tensor(np.stack([s.image for s in samples[i:i + batch]]), dtype=dtype)
        z, _ = student(x)
        out.extend((torch.sigmoid(z) > threshold).numpy())
    return out


def characteristic_report(student, samples, split="test", threshold=0.5):
    preds = predict_masks(student, samples, threshold=threshold)
    return report_from_predictions(preds, samples, split=split, threshold=threshold)


def attention_table(attn_by_sample, tags):
    """Mean/std of (H_norm %, EffN, p_max %) per tag, from one attention vector per sample."""
    groups = {}
    for a, tag in zip(attn_by_sample, tags):
        h, effn, pmax = attention_stats(a)
        groups.setdefault(tag, []).append((100.0 * h, effn, 100.0 * pmax))
    out = {}
    for tag in [t for t in TAGS if t in groups] + [t for t in groups if t not in TAGS]:
        arr = np.asarray(groups[tag])
        out[tag] = {
            "H_norm_mean": arr[:, 0].mean(), "H_norm_std": arr[:, 0].std(),
            "EffN_mean": arr[:, 1].mean(), "EffN_std": arr[:, 1].std(),
            "p_max_mean": arr[:, 2].mean(), "p_max_std": arr[:, 2].std(),
            "n": len(arr),
        }
    return out


@torch.no_grad()
def attention_report(teacher, token_blocks, tags, batch=32):
    """Run the teacher's fusion + TAP head over token blocks ``(M, K, N, d)`` and tabulate."""
    mod = teacher.modulator if hasattr(teacher, "modulator") else teacher
    attn = []
    for i in range(0, len(token_blocks), batch):
        blocks = torch.as_tensor(np.asarray(token_blocks[i:i + batch]), dtype=mod.tap.w.dtype)
        _, a = mod.semantic_vector(blocks)
        attn.extend(a.numpy())
    return attention_table(attn, tags)


ATTN_COLUMNS = ("H_norm_mean", "H_norm_std", "EffN_mean", "EffN_std", "p_max_mean", "p_max_std", "n")


def write_attention_csv(path, table):
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(["tag", *ATTN_COLUMNS])
        for tag, r in table.items():
            wr.writerow([tag, *(f"{r[c]:.4f}" if c != "n" else r[c] for c in ATTN_COLUMNS)])
