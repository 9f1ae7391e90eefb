"""Cluster-level sample reweighting.

Images are described by five hand-crafted priors, clustered with k-means on the
training pool, and every cluster owns a logit. Within a batch the weight of a
sample is its cluster's ``exp(alpha)`` divided by the batch mean of those, so
weights always average to one.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
import torch
from sklearn.cluster import KMeans

from .errors import ConfigError, StateError

FEATURE_NAMES = ("mean", "std", "texture", "spectral_sharpness", "n_points")


def spectral_sharpness(image):
    """Share of non-DC spectral energy at radial frequency above half-Nyquist."""
    image = np.asarray(image, dtype=np.float64)
    if np.ptp(image) == 0:
        return 0.0
    power = np.abs(np.fft.fft2(image - image.mean())) ** 2
    fy = np.fft.fftfreq(image.shape[0])[:, None]
    fx = np.fft.fftfreq(image.shape[1])[None, :]
    total = power.sum()
    if total <= 0:
        return 0.0
    return float(power[np.hypot(fy, fx) > 0.25].sum() / total)


def prior_features(image, n_points):
    image = np.asarray(image, dtype=np.float64)
    gy, gx = np.gradient(image)
    flat = np.ptp(image) == 0  # keep std exactly 0 instead of rounding noise
    return np.array([
        image.mean(),
        0.0 if flat else image.std(),
        np.hypot(gy, gx).mean(),
        spectral_sharpness(image),
        float(n_points),
    ])


@dataclass
class ClusterModel:
    centers: np.ndarray
    mean: np.ndarray
    scale: np.ndarray
    alpha: torch.nn.Parameter = None
    assignments: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.alpha is None:
            self.alpha = torch.nn.Parameter(torch.zeros(len(self.centers)))

    @property
    def k(self):
        return len(self.centers)

    def normalize(self, feats):
        return (np.atleast_2d(feats) - self.mean) / self.scale

    def predict(self, feats):
        z = self.normalize(feats)
        d = ((z[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return d.argmin(1)

    def assign(self, ids, feats):
        for i, c in zip(ids, self.predict(feats)):
            self.assignments[i] = int(c)

    def clusters_of(self, ids):
        try:
            return torch.tensor([self.assignments[i] for i in ids], dtype=torch.long)
        except KeyError as exc:
            raise StateError(f"sample {exc.args[0]!r} has no cluster assignment") from exc

    def to_json(self):
        return {
            "centers": self.centers.tolist(),
            "feature_mean": self.mean.tolist(),
            "feature_scale": self.scale.tolist(),
            "features": list(FEATURE_NAMES),
            "alpha": self.alpha.detach().tolist(),
            "assignments": dict(sorted(self.assignments.items())),
        }


def fit_clusters(features, k_c, seed=0, ids=None):
    """z-score ``features`` (M x 5) and run k-means++ (one init, <= 50 iterations)."""
    features = np.asarray(features, dtype=np.float64)
    if k_c < 1:
        raise ConfigError(f"k_c must be >= 1, got {k_c}")
    if features.shape[0] < k_c:
        raise ConfigError(f"{features.shape[0]} samples cannot form {k_c} clusters")
    mean = features.mean(0)
    scale = features.std(0)
    scale[scale == 0] = 1.0
    z = (features - mean) / scale
    km = KMeans(n_clusters=k_c, init="k-means++", n_init=1, max_iter=50, random_state=seed).fit(z)
    model = ClusterModel(centers=km.cluster_centers_.copy(), mean=mean, scale=scale)
    if ids is not None:
        model.assign(ids, features)
    return model


def batch_weights(clusters, alpha):
    """``|B| * softmax(alpha[c])`` -- identical to exp(alpha_c) over its batch mean."""
    logits = alpha[clusters]
    return logits.shape[0] * torch.softmax(logits, dim=0)


def sample_weights(ids, model):
    return batch_weights(model.clusters_of(ids), model.alpha)


def build_cluster_model(train_feats, train_ids, val_feats, val_ids, k_c, seed):
    """Fit on the training pool, then attach validation samples to the nearest center."""
    model = fit_clusters(train_feats, k_c, seed, ids=train_ids)
    if len(val_ids):
        model.assign(val_ids, val_feats)
    return model


def dump_clusters(path, model):
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, indent=1)
