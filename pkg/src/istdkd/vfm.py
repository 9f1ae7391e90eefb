"""Frozen foundation-model tokens, depth fusion, token-aware pooling, attention stats."""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .errors import NumericError, ProviderError, ShapeError


@dataclass
class TokenFeatures:
    blocks: np.ndarray  # (K, N, d)
    patch_grid: tuple
    provider_id: str

    def __post_init__(self):
        if self.blocks.ndim != 3 or self.blocks.shape[0] < 1:
            raise ShapeError(f"token blocks must be (K, N, d), got {self.blocks.shape}")
        if self.patch_grid[0] * self.patch_grid[1] != self.blocks.shape[1]:
            raise ShapeError(f"patch grid {self.patch_grid} does not cover {self.blocks.shape[1]} tokens")

    @property
    def n_blocks(self):
        return self.blocks.shape[0]


class StubProvider:
    """Fixed random patchifier standing in for a ViT.

    Each ``patch x patch`` patch is flattened and sent through ``n_blocks``
    independent projections ``tanh(x @ W_k + b_k)``. Parameters are drawn once
    from ``seed`` and marked read-only.
    """

    def __init__(self, seed=0, patch=16, dim=384, n_blocks=12):
        self.patch, self.dim, self.n_blocks = patch, dim, n_blocks
        rng = np.random.default_rng([seed, 0x5AB])
        p = patch * patch
        self.weight = rng.normal(0.0, 2.0 / math.sqrt(p), size=(n_blocks, p, dim))
        self.bias = rng.normal(0.0, 0.5, size=(n_blocks, dim))
        self.weight.flags.writeable = False
        self.bias.flags.writeable = False
        self.provider_id = f"stub-s{seed}-p{patch}-d{dim}-k{n_blocks}"

    def checksum(self):
        h = hashlib.sha256()
        h.update(self.weight.tobytes())
        h.update(self.bias.tobytes())
        return h.hexdigest()

    def __call__(self, image):
        gh, gw = image.shape[0] // self.patch, image.shape[1] // self.patch
        x = image.reshape(gh, self.patch, gw, self.patch).transpose(0, 2, 1, 3)
        x = x.reshape(gh * gw, self.patch * self.patch)
        blocks = np.tanh(np.matmul(x, self.weight) + self.bias[:, None, :])
        return blocks, (gh, gw)


class Dinov3Provider:  # pragma: no cover - needs downloaded weights
    """DINOv3 ViT-S+/16 via ``transformers``; exposes patch tokens of the last 12 blocks."""

    MODEL = "facebook/dinov3-vits16plus-pretrain-lvd1689m"

    def __init__(self, model_name=None, n_blocks=12, device="cpu"):
        try:
            from transformers import AutoModel
            self.model = AutoModel.from_pretrained(model_name or self.MODEL).to(device).eval()
        except Exception as exc:
            raise ProviderError(f"DINOv3 unavailable: {exc}") from exc
        for p in self.model.parameters():
            p.requires_grad_(False)
        cfg = self.model.config
        self.patch = cfg.patch_size
        self.dim = cfg.hidden_size
        self.n_blocks = n_blocks
        self.n_prefix = 1 + getattr(cfg, "num_register_tokens", 0)
        self.device = device
        self.provider_id = f"dinov3-{(model_name or self.MODEL).split('/')[-1]}-k{n_blocks}"

    def checksum(self):
        h = hashlib.sha256()
        for name, p in sorted(self.model.state_dict().items()):
            h.update(name.encode())
            h.update(p.detach().cpu().numpy().tobytes())
        return h.hexdigest()

    @torch.no_grad()
    def __call__(self, image):
        mean = np.array([0.485, 0.456, 0.406])[:, None, None]
        std = np.array([0.229, 0.224, 0.225])[:, None, None]
        x = (np.repeat(image[None], 3, axis=0) - mean) / std
        x = torch.as_tensor(x[None], dtype=torch.float32, device=self.device)
        out = self.model(pixel_values=x, output_hidden_states=True)
        hidden = out.hidden_states[-self.n_blocks:]
        blocks = np.stack([h[0, self.n_prefix:].cpu().numpy() for h in hidden]).astype(np.float64)
        return blocks, (image.shape[0] // self.patch, image.shape[1] // self.patch)


def make_provider(name="stub", fallback=False, **kwargs):
    if name == "stub":
        return StubProvider(**kwargs)
    if name == "dinov3":
        try:
            return Dinov3Provider(n_blocks=kwargs.get("n_blocks", 12))
        except ProviderError:
            if fallback:
                return StubProvider(**kwargs)
            raise
    raise ProviderError(f"unknown provider {name!r}")


def _pad_to(image, patch):
    h, w = image.shape
    ph, pw = (-h) % patch, (-w) % patch
    if ph or pw:
        image = np.pad(image, ((0, ph), (0, pw)), mode="reflect")
    return image


def extract_tokens(image, provider):
    image = _pad_to(np.asarray(image, dtype=np.float64), provider.patch)
    blocks, grid = provider(image)
    if not np.isfinite(blocks).all():
        raise NumericError(f"provider {provider.provider_id} returned non-finite tokens")
    return TokenFeatures(blocks=np.asarray(blocks), patch_grid=tuple(grid), provider_id=provider.provider_id)


class TokenCache:
    """On-disk token store: ``<root>/<provider_id>/<sample_id>.f32`` plus a ``.json`` shape header."""

    def __init__(self, root):
        self.root = Path(root)

    def _paths(self, provider_id, sample_id):
        base = self.root / provider_id
        return base / f"{sample_id}.f32", base / f"{sample_id}.json"

    def get(self, provider_id, sample_id):
        raw, head = self._paths(provider_id, sample_id)
        if not raw.exists() or not head.exists():
            return None
        meta = json.loads(head.read_text())
        blocks = np.fromfile(raw, dtype="<f4").reshape(meta["shape"])
        return TokenFeatures(blocks=blocks, patch_grid=tuple(meta["patch_grid"]), provider_id=provider_id)

    def put(self, sample_id, tokens):
        raw, head = self._paths(tokens.provider_id, sample_id)
        raw.parent.mkdir(parents=True, exist_ok=True)
        np.ascontiguousarray(tokens.blocks, dtype="<f4").tofile(raw)
        head.write_text(json.dumps({"shape": list(tokens.blocks.shape),
                                    "patch_grid": list(tokens.patch_grid), "dtype": "<f4"}))

    def fetch(self, sample_id, image, provider):
        hit = self.get(provider.provider_id, sample_id)
        if hit is None:
            hit = extract_tokens(image, provider)
            self.put(sample_id, hit)
            hit = self.get(provider.provider_id, sample_id)
        return hit


class FusionWeights(nn.Module):
    """Softmax-parameterised depth weights; always on the simplex."""

    def __init__(self, n_blocks=12):
        super().__init__()
        self.logits = nn.Parameter(torch.zeros(n_blocks))

    @property
    def pi(self):
        return torch.softmax(self.logits, dim=0)

    def forward(self, blocks):
        return fuse_depths(blocks, self.pi)


class TapHead(nn.Module):
    def __init__(self, dim=384):
        super().__init__()
        self.w = nn.Parameter(torch.zeros(dim))

    def forward(self, tokens):
        return tap_pool(tokens, self.w)


def fuse_depths(blocks, pi):
    """Weighted sum over the block axis (third from last) of ``(..., K, N, d)``."""
    if isinstance(pi, FusionWeights):
        pi = pi.pi
    if blocks.shape[-3] != pi.shape[0]:
        raise ShapeError(f"{pi.shape[0]} fusion weights for {blocks.shape[-3]} token blocks")
    return torch.einsum("...knd,k->...nd", blocks, pi.to(blocks.dtype))


def tap_pool(tokens, w):
    """Token-aware attention pooling of ``(..., N, d)``; returns ``(g, a)``."""
    if isinstance(w, TapHead):
        w = w.w
    if tokens.shape[-2] < 1:
        raise ShapeError("need at least one token")
    if not torch.isfinite(tokens).all():
        raise NumericError("non-finite tokens")
    a = torch.softmax(tokens @ w.to(tokens.dtype), dim=-1)
    g = (a.unsqueeze(-1) * tokens).sum(dim=-2)
    return g, a


def attention_stats(a):
    """(normalised entropy, exp-entropy token count, max weight) of one attention vector."""
    a = np.asarray(a, dtype=np.float64).ravel()
    n = a.size
    nz = a[a > 0]
    h = float(-(nz * np.log(nz)).sum())
    h_norm = min(max(h / math.log(n), 0.0), 1.0) if n > 1 else 0.0
    # clamps only absorb rounding at the extremes
    return h_norm, min(max(math.exp(h), 1.0), float(n)), float(a.max())
