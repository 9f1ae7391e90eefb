"""Student detector, VFM-embedded teacher view and checkpoint archive.

Any backbone works with the teacher if it exposes ``hook_channels`` and a
``forward(x, modulate=None)`` that calls ``modulate(index, feature)`` at each
hook and keeps going with whatever comes back.
"""
from __future__ import annotations

import io
import math

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, DataError, NumericError
from .scam import ScamModulator, modulate
from .vfm import extract_tokens


def _block(cin, cout):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(cout, cout, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class StudentNet(nn.Module):
    """Three-stage encoder-decoder with skips and a one-channel logit head."""

    def __init__(self, channels=(8, 16, 32), prior=0.01, check_finite=True):
        super().__init__()
        c1, c2, c3 = channels
        self.hook_channels = tuple(channels)
        self.enc = nn.ModuleList([_block(1, c1), _block(c1, c2), _block(c2, c3)])
        self.dec2 = _block(c3 + c2, c2)
        self.dec1 = _block(c2 + c1, c1)
        self.head = nn.Conv2d(c1, 1, 1)
        # rare-positive prior on the head bias
        nn.init.constant_(self.head.bias, -math.log((1 - prior) / prior))
        self.check_finite = check_finite

    def _check(self, t, where):
        if self.check_finite and not torch.isfinite(t).all():
            raise NumericError(f"non-finite activations at {where}")

    def forward(self, x, modulate=None):
        if x.dim() == 3:
            x = x.unsqueeze(1)
        feats = []
        h = x
        for i, stage in enumerate(self.enc):
            if i:
                h = F.max_pool2d(h, 2)
            h = stage(h)
            if modulate is not None:
                h = modulate(i, h)
            self._check(h, f"encoder stage {i}")
            feats.append(h)
        f1, f2, f3 = feats
        d2 = self.dec2(torch.cat([F.interpolate(f3, size=f2.shape[-2:], mode="nearest"), f2], 1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, size=f1.shape[-2:], mode="nearest"), f1], 1))
        z = self.head(d1)[:, 0]
        self._check(z, "logit head")
        return z, feats


class TeacherNet(nn.Module):
    """The student's weights plus a SCAM modulator.

    Only the modulator is registered as a submodule, so ``parameters()`` yields
    the teacher-side set alone; the student is held by reference.
    """

    def __init__(self, student, modulator):
        super().__init__()
        self.modulator = modulator
        self._student = [student]

    @property
    def student(self):
        return self._student[0]

    def forward(self, x, blocks, return_aux=False):
        g, attn = self.modulator.semantic_vector(blocks)
        params = self.modulator.affine(g)
        raw = []

        def hook(i, f):
            raw.append(f)
            gamma, beta = params[i]
            return modulate(f, gamma, beta)

        z, feats = self.student(x, modulate=hook)
        if return_aux:
            return z, feats, {"raw": raw, "attention": attn, "affine": params, "g": g}
        return z, feats


def build_teacher(student, n_blocks=12, dim=384, hidden=64, gate_init=0.1):
    return TeacherNet(student, ScamModulator(student.hook_channels, n_blocks, dim, hidden, gate_init))


def student_forward(image, student):
    x = torch.as_tensor(image, dtype=next(student.parameters()).dtype)
    while x.dim() < 4:
        x = x.unsqueeze(0)
    return student(x)


def teacher_forward(image, teacher, provider, return_aux=False):
    tok = extract_tokens(image, provider)
    dtype = next(teacher.student.parameters()).dtype
    blocks = torch.as_tensor(tok.blocks, dtype=dtype).unsqueeze(0)
    x = torch.as_tensor(image, dtype=dtype)[None, None]
    return teacher(x, blocks, return_aux=return_aux)


def param_snapshot(module):
    return [(name, p.detach().clone()) for name, p in sorted(module.named_parameters())]


def same_params(a, b):
    return len(a) == len(b) and all(na == nb and torch.equal(pa, pb) for (na, pa), (nb, pb) in zip(a, b))


def save_checkpoint(path, payload):
    buf = io.BytesIO()
    torch.save(payload, buf)
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path, expected_hash=None):
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except FileNotFoundError:
        raise
    except Exception as exc:
        raise DataError(f"cannot load checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or "config_hash" not in payload:
        raise DataError(f"{path} is not a training checkpoint")
    if expected_hash is not None and payload["config_hash"] != expected_hash:
        raise ConfigError(
            f"checkpoint {path} was written with config {payload['config_hash'][:12]}, "
            f"current config is {expected_hash[:12]}"
        )
    return payload
