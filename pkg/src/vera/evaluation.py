"""Evaluation metrics: region content, mask overlap, landmarks, identity, FID.

Region metrics work on images in ``[-1, 1]`` (``(3, H, W)`` tensors or
``(H, W, 3)`` arrays) but report values on the 0-255 scale.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
import torch

from .errors import DomainError

__all__ = [
    'FaceEmbedder', 'LandmarkDetector', 'GaussianSummary', 'region_l1', 'region_psnr',
    'mask_iou', 'mean_landmark_offset', 'cosine_distance', 'deid_rate',
    'pair_consistency', 'frechet_distance', 'CentroidLandmarks', 'match_rate',
    'feature_frechet', 'write_report',
]

PSNR_CAP = 99.0


class FaceEmbedder(Protocol):
    match_threshold: float

    def embed(self, image) -> np.ndarray:
        ...


class LandmarkDetector(Protocol):
    def detect(self, image) -> np.ndarray:
        """``(n_points, 2)`` array of ``(x, y)``; ``n_points`` fixed per model."""


def _hwc_255(image) -> np.ndarray:
    if torch.is_tensor(image):
        image = image.detach().cpu().double().numpy()
        if image.ndim == 3 and image.shape[0] in (1, 3) and image.shape[-1] not in (1, 3):
            image = image.transpose(1, 2, 0)
    image = np.asarray(image, np.float64)
    return (image + 1) * 127.5


def _masked(a, b, mask):
    a, b = _hwc_255(a), _hwc_255(b)
    if a.shape != b.shape:
        raise ValueError(f'image shapes differ: {a.shape} vs {b.shape}')
    mask = np.asarray(mask, bool)
    if not mask.any():
        raise DomainError('region metric over an empty mask')
    return a[mask], b[mask]


def region_l1(a, b, mask) -> float:
    """Mean absolute difference on the 0-255 scale over masked pixels."""
    x, y = _masked(a, b, mask)
    return float(np.abs(x - y).mean())


def region_psnr(a, b, mask) -> float:
    """Masked PSNR on the 0-255 scale, capped at 99 dB."""
    x, y = _masked(a, b, mask)
    mse = float(((x - y) ** 2).mean())
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(255.0 ** 2 / mse))


def mask_iou(a, b) -> float:
    a = np.asarray(a, bool)
    b = np.asarray(b, bool)
    if a.shape != b.shape:
        raise ValueError(f'mask shapes differ: {a.shape} vs {b.shape}')
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


def mean_landmark_offset(a_pts, b_pts) -> float:
    a = np.asarray(a_pts, np.float64)
    b = np.asarray(b_pts, np.float64)
    if a.shape != b.shape:
        raise ValueError(f'landmark counts differ: {a.shape} vs {b.shape}')
    return float(np.linalg.norm(a - b, axis=-1).mean())


class CentroidLandmarks:
    """Landmark stand-in: centroid of each listed component in a label map.

    Missing components yield the image centre so the point count is fixed.
    """

    def __init__(self, components: Sequence[int]):
        self.components = list(components)

    def detect(self, labels) -> np.ndarray:
        labels = np.asarray(labels)
        H, W = labels.shape
        pts = []
        for k in self.components:
            ys, xs = np.nonzero(labels == k)
            pts.append((xs.mean(), ys.mean()) if len(xs) else ((W - 1) / 2, (H - 1) / 2))
        return np.array(pts)


def cosine_distance(u, v) -> float:
    u = np.asarray(u, np.float64).ravel()
    v = np.asarray(v, np.float64).ravel()
    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
    if nu == 0 or nv == 0:
        raise DomainError('cosine distance of a zero vector')
    return float(1 - u @ v / (nu * nv))


def match_rate(pairs, embedder: FaceEmbedder) -> float:
    hits = [cosine_distance(embedder.embed(a), embedder.embed(b)) <= embedder.match_threshold
            for a, b in pairs]
    return sum(hits) / len(hits)


def deid_rate(pairs, embedder: FaceEmbedder) -> float:
    """Fraction of (source, anonymized) pairs the recognizer fails to match."""
    if not len(pairs):
        raise ValueError('deid_rate needs at least one pair')
    return 1.0 - match_rate(pairs, embedder)


@dataclass(frozen=True)
class PairConsistency:
    reid_rate: float
    distance_delta: float
    distances: tuple
    input_distances: tuple


def pair_consistency(pairs, inputs, embedder: FaceEmbedder) -> PairConsistency:
    """Within-pair re-identification rate and mean distance change vs inputs."""
    if len(pairs) != len(inputs):
        raise ValueError('pairs and inputs must align')
    d_out = [cosine_distance(embedder.embed(a), embedder.embed(b)) for a, b in pairs]
    d_in = [cosine_distance(embedder.embed(a), embedder.embed(b)) for a, b in inputs]
    rate = sum(d <= embedder.match_threshold for d in d_out) / len(d_out)
    delta = float(np.mean(np.subtract(d_out, d_in)))
    return PairConsistency(rate, delta, tuple(d_out), tuple(d_in))


@dataclass(frozen=True)
class GaussianSummary:
    mu: np.ndarray
    sigma: np.ndarray

    @classmethod
    def fit(cls, features) -> 'GaussianSummary':
        x = np.asarray(features, np.float64)
        return cls(x.mean(0), np.atleast_2d(np.cov(x, rowvar=False)))


def _psd_sqrt(m, tol=-1e-8):
    m = (m + m.T) / 2
    evals, evecs = np.linalg.eigh(m)
    if evals.min(initial=0) < tol:
        raise DomainError(f'matrix is not positive semidefinite (min eigenvalue {evals.min():.3g})')
    evals = np.clip(evals, 0, None)
    return (evecs * np.sqrt(evals)) @ evecs.T


def frechet_distance(p: GaussianSummary, q: GaussianSummary) -> float:
    """``|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^(1/2))``.

    The cross term uses ``tr((S_p^1/2 S_q S_p^1/2)^1/2)``, which has the same
    eigenvalues as ``(S_p S_q)^1/2`` but stays symmetric.
    """
    mu_p, mu_q = np.atleast_1d(p.mu).astype(float), np.atleast_1d(q.mu).astype(float)
    s_p, s_q = np.atleast_2d(p.sigma).astype(float), np.atleast_2d(q.sigma).astype(float)
    if mu_p.shape != mu_q.shape or s_p.shape != s_q.shape or s_p.shape != (len(mu_p),) * 2:
        raise ValueError('Gaussian summaries have mismatched dimensions')
    root_p = _psd_sqrt(s_p)
    _psd_sqrt(s_q)
    cross = _psd_sqrt(root_p @ s_q @ root_p)
    diff = mu_p - mu_q
    value = diff @ diff + np.trace(s_p) + np.trace(s_q) - 2 * np.trace(cross)
    return float(max(value, 0.0))


def feature_frechet(features_a, features_b) -> float:
    """Fréchet distance between Gaussian fits of two ``(n, d)`` feature sets."""
    return frechet_distance(GaussianSummary.fit(features_a), GaussianSummary.fit(features_b))


def write_report(stem, rows: Sequence[dict], summary: dict) -> tuple[Path, Path]:
    """Writes ``<stem>.json`` (summary plus rows) and ``<stem>.csv`` (rows)."""
    stem = Path(stem)
    json_path, csv_path = stem.with_suffix('.json'), stem.with_suffix('.csv')
    json_path.write_text(json.dumps({'summary': summary, 'rows': list(rows)},
                                    indent=2, sort_keys=True) + '\n')
    columns = []
    for row in rows:
        columns += [c for c in row if c not in columns]
    with open(csv_path, 'w', newline='') as f:
        writer = csv.DictWriter(f, fieldnames=columns, lineterminator='\n')
        writer.writeheader()
        for row in rows:
            writer.writerow({k: (f'{v:.6f}' if isinstance(v, float) else v)
                             for k, v in row.items()})
    return json_path, csv_path
