"""Bilevel teacher/student training with online pseudo-mask evolution.

Per epoch:

1. evolve pseudo-masks of the train and validation pools from the teacher's
   predictions (the student's when the VFM branch is off);
2. one pass of weighted training over the train pool -- the teacher side
   (phi) on the inner objective, the student (theta) on its weighted task loss;
3. every ``bilevel_period`` epochs, ``gn_steps`` rounds of a plain-gradient
   inner step on phi (train batch) followed by an outer step on (theta, alpha)
   (validation batch) whose alpha-gradient carries the Gauss-Newton
   alignment correction.
"""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import TAGS
from .config import RunConfig
from .errors import DataError, NumericError, ShapeError, StateError
from .losses import LossWeights, inner_loss, outer_loss, task_loss
from .masks import component_at, components, point_disk
from .metrics import iou
from .nets import StudentNet, build_teacher, load_checkpoint, save_checkpoint
from .reweight import batch_weights, build_cluster_model, dump_clusters, prior_features
from .vfm import TokenCache, extract_tokens, make_provider

log = logging.getLogger(__name__)

STEP_COLUMNS = ("step", "phase", "L_task_t", "L_kd_in", "R_gate", "L_task_s", "L_kd_out", "total_in", "total_out")
BILEVEL_COLUMNS = ("epoch", "gn_step", "rho", "total_in", "total_out", "alpha_min", "alpha_max")


# ---------------------------------------------------------------------------
# pseudo-masks


@dataclass
class PseudoMaskStore:
    masks: dict
    points: dict
    updated: dict = field(default_factory=dict)

    def copy(self):
        return PseudoMaskStore({k: v.copy() for k, v in self.masks.items()},
                               dict(self.points), dict(self.updated))


def init_pseudo_masks(points, shape):
    """Union of radius-1 disks around each annotated point."""
    masks = {}
    for sid, pts in points.items():
        m = np.zeros(shape, dtype=bool)
        for r, c in pts:
            if not (0 <= r < shape[0] and 0 <= c < shape[1]):
                raise DataError(f"point {(r, c)} of {sid} lies outside {shape}")
            m |= point_disk(shape, (r, c))
        masks[sid] = m
    return PseudoMaskStore(masks=masks, points={k: [tuple(p) for p in v] for k, v in points.items()},
                           updated={k: 0 for k in points})


def _candidate(prob, point, window, blend):
    h, w = prob.shape
    half = window // 2
    r, c = point
    r0, r1 = max(0, r - half), min(h, r + half + 1)
    c0, c1 = max(0, c - half), min(w, c + half + 1)
    win = prob[r0:r1, c0:c1]
    top, mean = float(win.max()), float(win.mean())
    out = np.zeros(prob.shape, dtype=bool)
    if top <= mean:  # flat window carries no evidence
        return out
    t = blend * top + (1 - blend) * mean
    out[r0:r1, c0:c1] = component_at(win >= t, (r - r0, c - c0))
    return out


def evolve_mask(mask, points, prob, window=33, blend=0.5, cap=0.01):
    """One evolution step for a single image."""
    prob = np.asarray(prob, dtype=np.float64)
    if prob.shape != mask.shape:
        raise ShapeError(f"prediction {prob.shape} vs mask {mask.shape}")
    cap_px = cap * mask.size
    disks = np.zeros(mask.shape, dtype=bool)
    previous, chosen = [], []
    for p in points:
        disks |= point_disk(mask.shape, p)
        prev = component_at(mask, p)
        cand = _candidate(prob, p, window, blend)
        n = int(cand.sum())
        previous.append(prev)
        chosen.append(cand if 0 < n <= cap_px else prev)
    reverted = [False] * len(points)
    while True:
        new = disks.copy()
        for m in chosen:
            new |= m
        changed = False
        # accepted regions of neighbouring points can merge past the cap
        for rows, cols in components(new):
            if rows.size <= cap_px:
                continue
            inside = set(zip(rows.tolist(), cols.tolist()))
            for k, p in enumerate(points):
                if tuple(p) in inside and not reverted[k]:
                    chosen[k], reverted[k], changed = previous[k], True, True
        if not changed:
            return new


def evolve_pseudo_masks(store, probs, epoch=0, window=33, blend=0.5, cap=0.01):
    """New store with every id in ``probs`` evolved; other ids are copied as-is."""
    out = store.copy()
    for sid, prob in probs.items():
        if sid not in store.masks:
            raise DataError(f"no pseudo-mask for {sid}")
        out.masks[sid] = evolve_mask(store.masks[sid], store.points[sid], prob, window, blend, cap)
        out.updated[sid] = epoch
    return out


# ---------------------------------------------------------------------------
# hypergradient pieces


def gn_coefficient(g_out_theta, g_in_theta, eps=1e-8):
    """Alignment of outer and inner theta-gradients: <g_out, g_in> / (|g_in|^2 + eps)."""
    a = torch.as_tensor(g_out_theta, dtype=torch.float64).flatten()
    b = torch.as_tensor(g_in_theta, dtype=torch.float64).flatten()
    if a.shape != b.shape:
        raise ShapeError(f"gradient lengths differ: {a.numel()} vs {b.numel()}")
    return float(torch.dot(a, b) / (torch.dot(b, b) + eps))


def hypergradient_alpha(g_out_alpha, g_in_alpha, eta, rho):
    return g_out_alpha + eta * rho * g_in_alpha


def _flat(grads, params):
    return torch.cat([(g if g is not None else torch.zeros_like(p)).reshape(-1) for g, p in zip(grads, params)])


# ---------------------------------------------------------------------------
# state


@dataclass
class Batch:
    ids: list
    images: torch.Tensor
    masks: torch.Tensor
    blocks: torch.Tensor | None
    clusters: torch.Tensor | None


@dataclass
class BilevelState:
    student: StudentNet
    teacher: object
    alpha: torch.nn.Parameter
    lw: LossWeights
    eta: float
    eps: float
    opt_outer: torch.optim.Optimizer
    opt_phi: torch.optim.Optimizer | None
    epoch: int = 0
    bilevel_period: int = 5
    gn_steps: int = 4
    use_reweight: bool = True
    inner_kd: bool = True
    outer_kd: bool = True
    g_in_theta: torch.Tensor | None = None
    g_in_alpha: torch.Tensor | None = None
    skipped: int = 0

    def __post_init__(self):
        if self.eta <= 0 or self.eps <= 0:
            raise StateError("eta and eps must be positive")

    def theta(self):
        return [p for _, p in sorted(self.student.named_parameters())]

    def theta_names(self):
        return [n for n, _ in sorted(self.student.named_parameters())]

    def phi(self):
        return [p for _, p in sorted(self.teacher.named_parameters())] if self.teacher is not None else []

    def weights(self, batch):
        if not self.use_reweight or batch.clusters is None:
            return torch.ones(len(batch.ids), dtype=self.alpha.dtype)
        return batch_weights(batch.clusters, self.alpha)


def make_state(cfg, student=None, teacher=None, k_c=None):
    if student is None:
        student = StudentNet(tuple(cfg.channels))
    if teacher is None and cfg.use_vfm:
        teacher = build_teacher(student, cfg.n_blocks, cfg.dim, cfg.hidden, cfg.gate_init)
    alpha = torch.nn.Parameter(torch.zeros(k_c or cfg.k_c))
    theta = [p for _, p in sorted(student.named_parameters())]
    opt_outer = torch.optim.AdamW([
        {"params": theta, "weight_decay": cfg.weight_decay},
        {"params": [alpha], "weight_decay": 0.0},
    ], lr=cfg.lr)
    opt_phi = None
    if teacher is not None:
        opt_phi = torch.optim.AdamW([p for _, p in sorted(teacher.named_parameters())],
                                    lr=cfg.lr, weight_decay=0.0)
    return BilevelState(
        student=student, teacher=teacher, alpha=alpha,
        lw=LossWeights(cfg.lambda_in, cfg.lambda_out, cfg.lambda_gate, cfg.tau),
        eta=cfg.inner_lr, eps=cfg.eps, opt_outer=opt_outer, opt_phi=opt_phi,
        bilevel_period=cfg.bilevel_period, gn_steps=cfg.gn_steps,
        use_reweight=cfg.use_reweight, inner_kd=cfg.inner_kd, outer_kd=cfg.outer_kd,
    )


def _finite(tensors):
    return all(t is None or bool(torch.isfinite(t).all()) for t in tensors)


def inner_update(total, phi, theta, alpha, eta):
    """Plain gradient step ``phi <- phi - eta * grad_phi(total)``.

    Returns the flattened ``grad_theta`` and ``grad_alpha`` of the same loss
    (taken at the pre-update phi), or ``None`` if anything was non-finite, in
    which case nothing is modified.
    """
    grads = torch.autograd.grad(total, list(phi) + list(theta) + [alpha], allow_unused=True)
    g_phi, g_theta, g_alpha = grads[:len(phi)], grads[len(phi):-1], grads[-1]
    if not math.isfinite(float(total.detach())) or not _finite(grads):
        return None
    with torch.no_grad():
        for p, g in zip(phi, g_phi):
            if g is not None:
                p.sub_(eta * g)
    g_alpha = torch.zeros_like(alpha) if g_alpha is None else g_alpha
    return _flat(g_theta, theta).detach(), g_alpha.detach()


def outer_update(total, theta, alpha, g_in_theta, g_in_alpha, eta, eps, optimizer):
    """Direct gradient for theta, alignment-corrected gradient for alpha, one optimizer step.

    Returns ``(rho, corrected_alpha_grad)``, or ``None`` (and no update) on
    non-finite gradients.
    """
    grads = torch.autograd.grad(total, list(theta) + [alpha], allow_unused=True)
    g_theta, g_alpha = grads[:-1], grads[-1]
    if not math.isfinite(float(total.detach())) or not _finite(grads):
        return None
    if g_alpha is None:
        g_alpha = torch.zeros_like(alpha)
    rho = gn_coefficient(_flat(g_theta, theta), g_in_theta, eps)
    corrected = hypergradient_alpha(g_alpha, g_in_alpha.to(g_alpha.dtype), eta, rho)
    for p, g in zip(theta, g_theta):
        p.grad = None if g is None else g.detach().clone()
    alpha.grad = corrected.detach().to(alpha.dtype).clone()
    optimizer.step()
    optimizer.zero_grad(set_to_none=True)
    return rho, corrected.detach()


def inner_step(state, batch):
    """phi <- phi - eta * grad_phi L_in. Also stores grad_theta L_in and grad_alpha L_in."""
    if state.teacher is None:
        raise StateError("inner step needs a teacher")
    with torch.no_grad():
        z_s, _ = state.student(batch.images)
    z_t, _ = state.teacher(batch.images, batch.blocks)
    w = state.weights(batch)
    total, parts = inner_loss(z_t, z_s, batch.masks, w, state.teacher.modulator.r_gate(),
                              state.lw, use_kd=state.inner_kd)
    out = inner_update(total, state.phi(), state.theta(), state.alpha, state.eta)
    if out is None:
        state.skipped += 1
        log.warning("non-finite inner gradient at epoch %d; step skipped", state.epoch)
        return {"skipped": True, **parts}
    state.g_in_theta, state.g_in_alpha = out
    return {"skipped": False, **parts}


def outer_step(state, batch):
    """theta <- AdamW(grad_theta L_out); alpha <- AdamW(grad_alpha L_out + eta * rho * grad_alpha L_in)."""
    if state.g_in_theta is None:
        raise StateError("outer step needs a preceding inner step")
    z_t = None
    if state.teacher is not None:
        with torch.no_grad():
            z_t, _ = state.teacher(batch.images, batch.blocks)
    z_s, _ = state.student(batch.images)
    w = state.weights(batch)
    total, parts = outer_loss(z_s, z_t if z_t is not None else z_s, batch.masks, w, state.lw,
                              use_kd=state.outer_kd and z_t is not None)
    out = outer_update(total, state.theta(), state.alpha, state.g_in_theta, state.g_in_alpha,
                       state.eta, state.eps, state.opt_outer)
    if out is None:
        state.skipped += 1
        log.warning("non-finite outer gradient at epoch %d; step skipped", state.epoch)
        return {"skipped": True, "rho": float("nan"), **parts}
    return {"skipped": False, "rho": out[0], **parts}


def regular_step(state, batch):
    """One ordinary weighted step: phi on the inner objective, theta on weighted student BCE."""
    z_s, _ = state.student(batch.images)
    w = state.weights(batch).detach()
    per = task_loss(torch.sigmoid(z_s), batch.masks, reduction="none")
    l_s = (w * per).mean()
    parts = {"L_task_s": per.mean().detach()}
    theta = state.theta()
    g_theta = torch.autograd.grad(l_s, theta, allow_unused=True)
    if state.teacher is not None:
        z_t, _ = state.teacher(batch.images, batch.blocks)
        total, p_in = inner_loss(z_t, z_s, batch.masks, w, state.teacher.modulator.r_gate(),
                                 state.lw, use_kd=state.inner_kd)
        parts.update(p_in)
        phi = state.phi()
        g_phi = torch.autograd.grad(total, phi, allow_unused=True)
    else:
        phi, g_phi = [], []
    if not math.isfinite(float(l_s.detach())) or not _finite(list(g_theta) + list(g_phi)):
        state.skipped += 1
        log.warning("non-finite gradient in regular step at epoch %d; skipped", state.epoch)
        return {"skipped": True, **parts}
    for p, g in zip(theta, g_theta):
        p.grad = g
    state.opt_outer.step()
    state.opt_outer.zero_grad(set_to_none=True)
    if phi:
        for p, g in zip(phi, g_phi):
            p.grad = g
        state.opt_phi.step()
        state.opt_phi.zero_grad(set_to_none=True)
    return {"skipped": False, **parts}


# ---------------------------------------------------------------------------
# data plumbing


class Corpus:
    """In-memory tensors for every sample the run touches."""

    def __init__(self, dataset, provider=None, cache=None):
        self.dataset = dataset
        self.ids = list(dataset.split.train) + list(dataset.split.val) + list(dataset.split.test)
        self.index = {sid: i for i, sid in enumerate(self.ids)}
        imgs = np.stack([dataset.samples[s].image for s in self.ids])
        self.images = torch.as_tensor(imgs, dtype=torch.float32).unsqueeze(1)
        self.shape = imgs.shape[1:]
        self.blocks = None
        if provider is not None:
            toks = []
            for sid in self.ids:
                img = dataset.samples[sid].image
                tok = cache.fetch(sid, img, provider) if cache is not None else extract_tokens(img, provider)
                toks.append(tok.blocks)
            self.blocks = torch.as_tensor(np.stack(toks), dtype=torch.float32)

    def batch(self, ids, store=None, clusters=None):
        idx = torch.tensor([self.index[s] for s in ids])
        masks = None
        if store is not None:
            masks = torch.as_tensor(np.stack([store.masks[s] for s in ids]), dtype=torch.float32)
        return Batch(
            ids=list(ids), images=self.images[idx], masks=masks,
            blocks=self.blocks[idx] if self.blocks is not None else None,
            clusters=clusters.clusters_of(ids) if clusters is not None else None,
        )


@torch.no_grad()
def predict_probs(state, corpus, ids, use_teacher=True, batch=32):
    out = {}
    for i in range(0, len(ids), batch):
        chunk = ids[i:i + batch]
        b = corpus.batch(chunk)
        if use_teacher and state.teacher is not None:
            z, _ = state.teacher(b.images, b.blocks)
        else:
            z, _ = state.student(b.images)
        for sid, p in zip(chunk, torch.sigmoid(z).numpy()):
            out[sid] = p
    return out


def pooled_iou(preds, gts):
    inter = sum(int((p & g).sum()) for p, g in zip(preds, gts))
    union = sum(int((p | g).sum()) for p, g in zip(preds, gts))
    return inter / union if union else 1.0


def mask_quality(store, dataset, ids):
    """Mean per-image IoU of pseudo-masks against hidden GT, overall and per tag."""
    per_tag = {}
    for sid in ids:
        s = dataset.samples[sid]
        per_tag.setdefault(s.tag, []).append(iou(store.masks[sid], s.gt_mask))
    allv = [v for vals in per_tag.values() for v in vals]
    out = {"mask_IoU": float(np.mean(allv)) if allv else float("nan")}
    for tag in TAGS:
        out[f"mask_IoU_{tag}"] = float(np.mean(per_tag[tag])) if tag in per_tag else float("nan")
    return out


# ---------------------------------------------------------------------------
# driver


@dataclass
class TrainResult:
    state: BilevelState
    store: PseudoMaskStore
    history: list
    bilevel_log: list
    run_dir: Path | None
    clusters: object = None
    provider_checksum: str | None = None


class _CsvLog:
    def __init__(self, path, columns):
        self.columns = columns
        self.fh = None
        if path is not None:
            new = not Path(path).exists()
            self.fh = open(path, "a", newline="")
            self.writer = csv.DictWriter(self.fh, fieldnames=columns, lineterminator="\n", extrasaction="ignore")
            if new:
                self.writer.writeheader()

    def write(self, row):
        if self.fh is None:
            return
        clean = {}
        for k in self.columns:
            v = row.get(k, "")
            if isinstance(v, torch.Tensor):
                v = float(v)
            clean[k] = f"{v:.6g}" if isinstance(v, float) else v
        self.writer.writerow(clean)
        self.fh.flush()

    def close(self):
        if self.fh is not None:
            self.fh.close()


def epoch_columns():
    return ("epoch", "train_IoU", "test_IoU", "L_in", "L_task_s", "mask_IoU",
            *(f"mask_IoU_{t}" for t in TAGS), "bilevel")


def _pack_store(store):
    return {sid: (np.packbits(m), m.shape) for sid, m in store.masks.items()}, store.points, store.updated


def _unpack_store(packed):
    masks, points, updated = packed
    out = {sid: np.unpackbits(b, count=int(np.prod(shape))).reshape(shape).astype(bool)
           for sid, (b, shape) in masks.items()}
    return PseudoMaskStore(masks=out, points=points, updated=updated)


def checkpoint_payload(cfg, state, store, clusters, provider_checksum):
    return {
        "config": cfg.to_dict(),
        "config_hash": cfg.hash(),
        "epoch": state.epoch,
        "theta": state.student.state_dict(),
        "theta_order": state.theta_names(),
        "phi": state.teacher.state_dict() if state.teacher is not None else None,
        "fusion_logits": (state.teacher.modulator.fusion.logits.detach().clone()
                          if state.teacher is not None else None),
        "alpha": state.alpha.detach().clone(),
        "clusters": clusters.to_json() if clusters is not None else None,
        "opt_outer": state.opt_outer.state_dict(),
        "opt_phi": state.opt_phi.state_dict() if state.opt_phi is not None else None,
        "pseudo_masks": _pack_store(store),
        "provider_checksum": provider_checksum,
    }


def train(cfg: RunConfig, dataset, run_dir=None, resume=None, on_evolve=None, on_epoch=None):
    """Run the full schedule. ``run_dir`` (optional) receives logs and checkpoints."""
    torch.set_num_threads(cfg.threads)
    torch.manual_seed(cfg.seed)
    run_dir = Path(run_dir) if run_dir is not None else None
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        (run_dir / "config.toml").write_text(cfg.dumps())

    split = dataset.split
    train_ids, val_ids, test_ids = list(split.train), list(split.val), list(split.test)
    if not train_ids:
        raise DataError("empty training split")
    pool_ids = train_ids + val_ids

    provider = None
    checksum = None
    if cfg.use_vfm:
        provider = make_provider(cfg.provider, fallback=cfg.provider_fallback, seed=cfg.provider_seed,
                                 patch=cfg.patch, dim=cfg.dim, n_blocks=cfg.n_blocks)
        checksum = provider.checksum()
    cache = TokenCache(cfg.token_cache) if cfg.token_cache else None
    corpus = Corpus(dataset, provider, cache)

    clusters = None
    if cfg.use_reweight:
        def feats(ids):
            return np.stack([prior_features(dataset.samples[s].image, len(dataset.samples[s].points))
                             for s in ids]) if ids else np.zeros((0, 5))
        clusters = build_cluster_model(feats(train_ids), train_ids, feats(val_ids), val_ids, cfg.k_c, cfg.seed)

    state = make_state(cfg, k_c=clusters.k if clusters is not None else cfg.k_c)
    if clusters is not None:
        clusters.alpha = state.alpha
    store = init_pseudo_masks({s: dataset.samples[s].points for s in pool_ids}, corpus.shape)
    start = 1
    if resume is not None:
        payload = load_checkpoint(resume, expected_hash=cfg.hash())
        state.student.load_state_dict(payload["theta"])
        if state.teacher is not None:
            state.teacher.load_state_dict(payload["phi"])
            state.opt_phi.load_state_dict(payload["opt_phi"])
        with torch.no_grad():
            state.alpha.copy_(payload["alpha"])
        state.opt_outer.load_state_dict(payload["opt_outer"])
        store = _unpack_store(payload["pseudo_masks"])
        state.epoch = payload["epoch"]
        start = state.epoch + 1
    if run_dir is not None and clusters is not None:
        dump_clusters(run_dir / "clusters.json", clusters)

    epoch_log = _CsvLog(run_dir / "log.csv" if run_dir else None, epoch_columns())
    step_log = _CsvLog(run_dir / "losses.csv" if run_dir else None, STEP_COLUMNS)
    bi_log = _CsvLog(run_dir / "bilevel.csv" if run_dir else None, BILEVEL_COLUMNS)
    history, bilevel_log = [], []
    step = (start - 1) * math.ceil(len(train_ids) / cfg.batch)
    bilevel_train = train_ids
    bilevel_val = val_ids if (cfg.use_val and val_ids) else train_ids

    try:
        for epoch in range(start, cfg.epochs + 1):
            state.epoch = epoch
            t0 = time.time()
            # (a) label evolution
            if epoch >= cfg.evolve_from:
                probs = predict_probs(state, corpus, pool_ids, use_teacher=True)
                store = evolve_pseudo_masks(store, probs, epoch, cfg.evolve_window, cfg.evolve_blend,
                                            cfg.evolve_cap)
                if on_evolve is not None:
                    on_evolve(epoch, store)
            # (b) ordinary weighted pass over the train pool
            rng = np.random.default_rng([cfg.seed, epoch])
            order = [train_ids[i] for i in rng.permutation(len(train_ids))]
            l_in, l_s = [], []
            for i in range(0, len(order), cfg.batch):
                b = corpus.batch(order[i:i + cfg.batch], store, clusters)
                parts = regular_step(state, b)
                step += 1
                step_log.write({"step": step, "phase": "regular", **parts})
                l_s.append(float(parts["L_task_s"]))
                if "total_in" in parts:
                    l_in.append(float(parts["total_in"]))
            # (c) bilevel rounds
            fired = state.teacher is not None and state.gn_steps > 0 and epoch % state.bilevel_period == 0
            if fired:
                brng = np.random.default_rng([cfg.seed, epoch, 1])
                for k in range(state.gn_steps):
                    tb = corpus.batch(_sample(brng, bilevel_train, cfg.batch), store, clusters)
                    p_in = inner_step(state, tb)
                    vb = corpus.batch(_sample(brng, bilevel_val, cfg.batch), store, clusters)
                    p_out = outer_step(state, vb) if not p_in["skipped"] else {"skipped": True, "rho": float("nan")}
                    row = {"epoch": epoch, "gn_step": k + 1, "rho": p_out.get("rho"),
                           "total_in": p_in.get("total_in"), "total_out": p_out.get("total_out"),
                           "alpha_min": float(state.alpha.detach().min()), "alpha_max": float(state.alpha.detach().max())}
                    bilevel_log.append({k2: (float(v) if isinstance(v, torch.Tensor) else v) for k2, v in row.items()})
                    bi_log.write(row)
                    step += 1
                    step_log.write({"step": step, "phase": "inner", **p_in})
                    step_log.write({"step": step, "phase": "outer", **p_out})
            _check_params(state)
            if state.skipped > 20:
                raise NumericError(f"{state.skipped} non-finite steps; aborting")
            row = _epoch_metrics(state, corpus, dataset, store, train_ids, test_ids, pool_ids)
            row.update(epoch=epoch, L_in=float(np.mean(l_in)) if l_in else float("nan"),
                       L_task_s=float(np.mean(l_s)), bilevel=int(fired))
            history.append(row)
            epoch_log.write(row)
            log.info("epoch %d  train IoU %.3f  test IoU %.3f  mask IoU %.3f  (%.1fs)", epoch,
                     row["train_IoU"], row["test_IoU"], row["mask_IoU"], time.time() - t0)
            if on_epoch is not None:
                on_epoch(epoch, state, store, row)
            if run_dir is not None and (epoch % cfg.bilevel_period == 0 or epoch == cfg.epochs):
                payload = checkpoint_payload(cfg, state, store, clusters, checksum)
                save_checkpoint(run_dir / f"ckpt_epoch{epoch:04d}.pt", payload)
                save_checkpoint(run_dir / "last.pt", payload)
    except NumericError:
        if run_dir is not None and history:
            log.error("numeric failure; last good state kept in %s", run_dir / "last.pt")
        raise
    finally:
        for lg in (epoch_log, step_log, bi_log):
            lg.close()

    if provider is not None and provider.checksum() != checksum:
        raise StateError("VFM provider parameters changed during training")
    return TrainResult(state=state, store=store, history=history, bilevel_log=bilevel_log,
                       run_dir=run_dir, clusters=clusters, provider_checksum=checksum)


def _sample(rng, ids, n):
    n = min(n, len(ids))
    return [ids[i] for i in sorted(rng.choice(len(ids), size=n, replace=False))]


def _check_params(state):
    params = state.theta() + state.phi() + [state.alpha]
    if not _finite(params):
        raise NumericError(f"non-finite parameters after epoch {state.epoch}")


def _epoch_metrics(state, corpus, dataset, store, train_ids, test_ids, pool_ids):
    def student_iou(ids):
        if not ids:
            return float("nan")
        probs = predict_probs(state, corpus, ids, use_teacher=False)
        return pooled_iou([probs[s] > 0.5 for s in ids], [dataset.samples[s].gt_mask for s in ids])
    row = {"train_IoU": student_iou(train_ids), "test_IoU": student_iou(test_ids)}
    row.update(mask_quality(store, dataset, pool_ids))
    return row
