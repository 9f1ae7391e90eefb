"""Synthetic infrared scenes with point annotations and hidden ground truth.

Four characteristic subsets are produced, crossing target morphology with local
contrast:

=============  ==========  =========
tag            shape       contrast
=============  ==========  =========
Salient        blob        >= 0.4
Filamentary    stroke      >= 0.4
Faint          blob        <= 0.15
Camouflaged    stroke      <= 0.15
=============  ==========  =========

Contrast is the mean target intensity minus the mean of a 5-pixel dilation
ring around the target. Every scene is a pure function of
``(tag, size, n_targets, seed)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import TAGS
from .errors import ConfigError, DataError
from .masks import bbox_aspect, components, ring

TARGET_AREA_FRACTION = 0.002
HIGH_CONTRAST = (0.45, 0.65)
LOW_CONTRAST = (0.07, 0.12)
HIGH_CONTRAST_MIN = 0.4
LOW_CONTRAST_MAX = 0.15
NOISE_SIGMA = 0.05
RING_WIDTH = 5
ELONGATED_ASPECT = 3.0
MIN_ELONGATED_PIXELS = 3
MIN_SIZE = 32
MAX_TARGETS = 5
_MARGIN = 7
_SPACING = 14
_ATTEMPTS = 400
_LEVELS = 65535


@dataclass
class InfraredSample:
    id: str
    image: np.ndarray
    points: list
    gt_mask: np.ndarray
    tag: str


@dataclass
class DatasetSplit:
    train: list
    val: list
    test: list = field(default_factory=list)
    seed: int = 0


def _elongated(tag):
    return tag in ("Filamentary", "Camouflaged")


def _high_contrast(tag):
    return tag in ("Salient", "Filamentary")


def _check_args(tag, size, n_targets):
    if tag not in TAGS:
        raise ConfigError(f"unknown tag {tag!r}; expected one of {TAGS}")
    h, w = size
    if h < MIN_SIZE or w < MIN_SIZE:
        raise ConfigError(f"scene size {size} below the {MIN_SIZE}x{MIN_SIZE} minimum")
    if not 1 <= n_targets <= MAX_TARGETS:
        raise ConfigError(f"n_targets must be in [1, {MAX_TARGETS}], got {n_targets}")


def target_budget(size, tag=None):
    """Maximum pixel count of a single target.

    Elongated targets need at least 3 pixels to reach the aspect ratio, so on
    very small scenes (32x32 gives 2) their budget is raised to 3.
    """
    budget = int(math.floor(TARGET_AREA_FRACTION * size[0] * size[1]))
    if tag is not None and _elongated(tag):
        budget = max(budget, MIN_ELONGATED_PIXELS)
    return budget


def _background(rng, h, w):
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    field_ = np.full((h, w), rng.uniform(0.12, 0.25))
    for _ in range(rng.integers(2, 5)):
        fy, fx = rng.uniform(-2.0, 2.0, size=2)
        amp = rng.uniform(0.02, 0.05)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += amp * np.cos(2 * np.pi * (fy * rows / h + fx * cols / w) + phase)
    return field_ + rng.normal(0.0, NOISE_SIGMA, size=(h, w))


def _blob(rng, h, w, center, budget):
    area = budget * rng.uniform(0.55, 0.95)
    s = math.sqrt(area / (2 * math.log(2) * math.pi))
    r = rng.uniform(1.0, 1.6)
    s1, s2 = s * math.sqrt(r), s / math.sqrt(r)
    ang = rng.uniform(0, np.pi)
    cy, cx = center[0] + rng.uniform(-0.3, 0.3), center[1] + rng.uniform(-0.3, 0.3)
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    dy, dx = rows - cy, cols - cx
    u = np.cos(ang) * dx + np.sin(ang) * dy
    v = -np.sin(ang) * dx + np.cos(ang) * dy
    profile = np.exp(-0.5 * ((u / s1) ** 2 + (v / s2) ** 2))
    return profile, profile >= 0.5


def _stroke(rng, h, w, center, budget):
    width = 1.0 if budget < 16 else float(rng.integers(1, 3))
    # a stroke covers roughly (length + 1) * width pixels
    lo = min(3.0 * width + 0.5, budget / width - 1.0)
    length = rng.uniform(lo, max(lo + 0.5, budget / width))
    ang = (np.pi / 2) * rng.integers(0, 2) + rng.uniform(-0.2, 0.2)
    d = np.array([np.sin(ang), np.cos(ang)])
    n = np.array([d[1], -d[0]])
    c = np.asarray(center, dtype=np.float64)
    p0 = c - 0.5 * length * d
    p2 = c + 0.5 * length * d
    p1 = c + rng.uniform(-0.12, 0.12) * length * n
    t = np.linspace(0.0, 1.0, 64)[:, None]
    curve = (1 - t) ** 2 * p0 + 2 * (1 - t) * t * p1 + t ** 2 * p2
    rows, cols = np.mgrid[0:h, 0:w].astype(np.float64)
    pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
    dist = np.sqrt(((pix[:, None, :] - curve[None, :, :]) ** 2).sum(-1)).min(1).reshape(h, w)
    coverage = np.clip(width / 2 + 0.5 - dist, 0.0, 1.0)
    return coverage, coverage >= 0.5


def _contrast(image, mask, ring_mask):
    return float(image[mask].mean() - image[ring_mask].mean())


def _place(rng, h, w, n):
    centers = []
    for _ in range(_ATTEMPTS):
        if len(centers) == n:
            break
        c = (int(rng.integers(_MARGIN, h - _MARGIN)), int(rng.integers(_MARGIN, w - _MARGIN)))
        if all(max(abs(c[0] - o[0]), abs(c[1] - o[1])) >= _SPACING for o in centers):
            centers.append(c)
    return centers if len(centers) == n else None


def _try_scene(rng, tag, h, w, n_targets):
    budget = target_budget((h, w), tag)
    centers = _place(rng, h, w, n_targets)
    if centers is None:
        return None
    background = _background(rng, h, w)
    shapes = []
    for c in centers:
        profile, mask = (_stroke if _elongated(tag) else _blob)(rng, h, w, c, budget)
        comps = components(mask)
        if len(comps) != 1:
            return None
        rows, cols = comps[0]
        if not 1 <= rows.size <= budget:
            return None
        aspect = bbox_aspect(rows, cols)
        if _elongated(tag) != (aspect >= ELONGATED_ASPECT):
            return None
        shapes.append((profile, mask))
    union = np.zeros((h, w), dtype=bool)
    for _, m in shapes:
        union |= m
    lo, hi = HIGH_CONTRAST if _high_contrast(tag) else LOW_CONTRAST
    image = background.copy()
    rings = []
    for profile, mask in shapes:
        rg = ring(mask, RING_WIDTH, exclude=union)
        rings.append(rg)
        slope = profile[mask].mean() - profile[rg].mean()
        base = _contrast(background, mask, rg)
        amp = (rng.uniform(lo, hi) - base) / slope
        if amp <= 0:
            return None
        image += amp * profile
    image = np.round(np.clip(image, 0.0, 1.0) * _LEVELS) / _LEVELS
    for (_, mask), rg in zip(shapes, rings):
        c = _contrast(image, mask, rg)
        if _high_contrast(tag) and c < HIGH_CONTRAST_MIN:
            return None
        if not _high_contrast(tag) and not 0 < c <= LOW_CONTRAST_MAX:
            return None
    if len(components(union)) != n_targets:
        return None
    return image, union


def generate_scene(tag, size, n_targets, seed, sample_id=None):
    """Render one scene. Same arguments give a bit-identical sample."""
    size = tuple(int(s) for s in size)
    _check_args(tag, size, n_targets)
    h, w = size
    ss = np.random.SeedSequence([int(seed), TAGS.index(tag), h, w, int(n_targets)])
    rng = np.random.default_rng(ss)
    for _ in range(_ATTEMPTS):
        out = _try_scene(rng, tag, h, w, n_targets)
        if out is not None:
            break
    else:
        raise ConfigError(f"could not render {n_targets} {tag} targets on {size}")
    image, gt = out
    points = [derive_point(gt, k, image) for k in range(n_targets)]
    if sample_id is None:
        sample_id = f"{tag.lower()}-{h}x{w}-n{n_targets}-s{seed}"
    return InfraredSample(id=sample_id, image=image, points=points, gt_mask=gt, tag=tag)


def derive_point(gt_mask, component_index, image=None):
    """Brightest pixel of a component; ties go to the first pixel in row-major order."""
    comps = components(gt_mask)
    if not 0 <= component_index < len(comps):
        raise DataError(f"component {component_index} does not exist ({len(comps)} present)")
    rows, cols = comps[component_index]
    if rows.size == 0:
        raise DataError("empty component")
    order = np.lexsort((cols, rows))
    rows, cols = rows[order], cols[order]
    if image is None:
        k = 0
    else:
        k = int(np.argmax(np.asarray(image)[rows, cols]))
    return (int(rows[k]), int(cols[k]))


def make_split(ids, val_ratio, seed, test=()):
    """Hold out ``round(val_ratio * len(ids))`` ids for validation."""
    if not 0 < val_ratio < 1:
        raise ConfigError(f"val_ratio must lie in (0, 1), got {val_ratio}")
    ids = list(ids)
    if len(ids) < 10:
        raise ConfigError(f"need at least 10 ids to split, got {len(ids)}")
    n_val = int(math.floor(val_ratio * len(ids) + 0.5))
    n_val = min(max(n_val, 1), len(ids) - 1)
    perm = np.random.default_rng(seed).permutation(len(ids))
    val = sorted(ids[i] for i in perm[:n_val])
    val_set = set(val)
    train = [i for i in ids if i not in val_set]
    return DatasetSplit(train=train, val=val, test=list(test), seed=int(seed))


def generate_corpus(n, size, seed, prefix="s", max_targets=3):
    """``n`` samples balanced over the four tags (round-robin)."""
    rng = np.random.default_rng([int(seed), 7919])
    samples = []
    for i in range(n):
        tag = TAGS[i % len(TAGS)]
        n_targets = int(rng.integers(1, max_targets + 1))
        sub_seed = int(rng.integers(0, 2**31 - 1))
        samples.append(generate_scene(tag, size, n_targets, sub_seed, sample_id=f"{prefix}{i:05d}"))
    return samples


def build_dataset(n_train, n_test, size, seed, val_ratio=0.1):
    """Train pool (split into train/val) plus an independently seeded test set."""
    size = (size, size) if np.isscalar(size) else tuple(size)
    pool = generate_corpus(n_train, size, seed, prefix="tr")
    test = generate_corpus(n_test, size, seed + 1_000_003, prefix="te") if n_test else []
    split = make_split([s.id for s in pool], val_ratio, seed, test=[s.id for s in test])
    return pool + test, split


# ---------------------------------------------------------------------------
# on-disk layout


@dataclass
class Dataset:
    samples: dict
    split: DatasetSplit
    root: Path | None = None

    def subset(self, name):
        return [self.samples[i] for i in getattr(self.split, name)]


def manifest_dict(samples, split):
    return {
        "version": 1,
        "samples": [
            {"id": s.id, "tag": s.tag, "points": [[int(r), int(c)] for r, c in s.points]}
            for s in samples
        ],
        "split": {"train": list(split.train), "val": list(split.val),
                  "test": list(split.test), "seed": int(split.seed)},
    }


def dump_manifest(manifest):
    return json.dumps(manifest, indent=1) + "\n"


def save_dataset(root, samples, split):
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "gt").mkdir(parents=True, exist_ok=True)
    for s in samples:
        img = np.round(s.image * _LEVELS).astype(np.uint16)
        Image.fromarray(img).save(root / "images" / f"{s.id}.png")
        Image.fromarray((s.gt_mask.astype(np.uint8) * 255)).save(root / "gt" / f"{s.id}.png")
    (root / "manifest.json").write_text(dump_manifest(manifest_dict(samples, split)))
    return root


def load_manifest(root):
    path = Path(root) / "manifest.json"
    if not path.exists():
        raise DataError(f"manifest not found: {path}")
    try:
        return json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"malformed manifest {path}: {exc}") from exc


def load_dataset(root):
    root = Path(root)
    man = load_manifest(root)
    samples = {}
    for entry in man["samples"]:
        sid = entry["id"]
        img_path = root / "images" / f"{sid}.png"
        gt_path = root / "gt" / f"{sid}.png"
        if not img_path.exists() or not gt_path.exists():
            raise DataError(f"missing image or gt for sample {sid} under {root}")
        image = np.asarray(Image.open(img_path), dtype=np.float64) / _LEVELS
        gt = np.asarray(Image.open(gt_path)) > 0
        if entry["tag"] not in TAGS:
            raise DataError(f"sample {sid} has unknown tag {entry['tag']!r}")
        samples[sid] = InfraredSample(id=sid, image=image, gt_mask=gt, tag=entry["tag"],
                                      points=[tuple(p) for p in entry["points"]])
    sp = man["split"]
    split = DatasetSplit(train=sp["train"], val=sp["val"], test=sp["test"], seed=sp["seed"])
    return Dataset(samples=samples, split=split, root=root)


def load_sirst(root):  # pragma: no cover
    """Loader stub for real SIRST-style folders (images/ + masks/). Untested."""
    root = Path(root)
    out = []
    for img_path in sorted((root / "images").glob("*.png")):
        image = np.asarray(Image.open(img_path).convert("L"), dtype=np.float64) / 255.0
        gt = np.asarray(Image.open(root / "masks" / img_path.name).convert("L")) > 127
        pts = [derive_point(gt, k, image) for k in range(len(components(gt)))]
        out.append(InfraredSample(id=img_path.stem, image=image, points=pts, gt_mask=gt, tag="Salient"))
    return out
