"""Merging covariate shift: how far merged-model activations drift.

Each layer's inputs are summarised by a Gaussian (mean and covariance over
samples) and compared with the closed-form Frechet / squared 2-Wasserstein
distance between the unmerged and merged statistics.
"""
from __future__ import annotations

from dataclasses import dataclass
import logging

import numpy as np

from .errors import ArchitectureMismatch, InsufficientSamples, InvalidShape
from .linalg import as_matrix, sqrtm_psd
from .model import SequentialModel, forward_capture

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    sample_count: int


@dataclass(frozen=True)
class LayerShift:
    name: str
    per_task: tuple
    total: float


@dataclass(frozen=True)
class MCSReport:
    per_layer: tuple
    grand_total: float
    method_label: str
    task_names: tuple = ()

    def to_dict(self) -> dict:
        return {
            "method_label": self.method_label,
            "task_names": list(self.task_names),
            "layers": [
                {"index": i, "name": ls.name, "per_task": list(ls.per_task), "total": ls.total}
                for i, ls in enumerate(self.per_layer)
            ],
            "grand_total": self.grand_total,
        }


def gaussian_stats(x) -> GaussianStats:
    """Row means and unbiased (n - 1) covariance of a ``d x n`` sample matrix."""
    x = as_matrix(x, "X")
    n = x.shape[1]
    if n < 2:
        raise InsufficientSamples(f"need at least 2 samples for a covariance, got {n}")
    mu = x.mean(axis=1)
    centered = x - mu[:, None]
    cov = centered @ centered.T / (n - 1)
    return GaussianStats(mu, 0.5 * (cov + cov.T), n)


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """Closed-form squared 2-Wasserstein distance between two Gaussians.

    ``b`` plays the role of the merged-model statistics: its covariance square
    root sandwiches the other covariance. The result is clipped at zero.
    """
    if a.mean.shape != b.mean.shape or a.cov.shape != b.cov.shape:
        raise InvalidShape(f"dimension mismatch: {a.cov.shape} vs {b.cov.shape}")
    if np.array_equal(a.mean, b.mean) and np.array_equal(a.cov, b.cov):
        return 0.0
    raw = _closed_form(a, b)
    if raw < 0.0:
        log.debug("clipping negative Frechet distance %.3e", raw)
    return max(raw, 0.0)


def _closed_form(a: GaussianStats, b: GaussianStats) -> float:
    diff = a.mean - b.mean
    root_b = sqrtm_psd(b.cov)
    inner = root_b @ a.cov @ root_b
    cross = sqrtm_psd(0.5 * (inner + inner.T))
    return float(diff @ diff + np.trace(a.cov) + np.trace(b.cov) - 2.0 * np.trace(cross))


def mcs_report(bundles, merged: SequentialModel, method_label: str = "merged", max_samples: int | None = None) -> MCSReport:
    """Per-layer, per-task shift between own-model and merged-model inputs.

    Both passes start from the same task samples (optionally capped to the
    leading ``max_samples`` columns), so the first layer always reports zero.
    """
    if not bundles:
        raise ArchitectureMismatch("no tasks given")
    for b in bundles:
        if b.model.architecture() != merged.architecture():
            raise ArchitectureMismatch(f"merged model is incompatible with task {b.task_name!r}")
    per_task_dists = []
    for b in bundles:
        x = b.samples if max_samples is None else b.samples[:, :max_samples]
        own = forward_capture(b.model, x).per_layer_inputs
        hat = forward_capture(merged, x).per_layer_inputs
        per_task_dists.append(
            [frechet_distance(gaussian_stats(xo), gaussian_stats(xh)) for xo, xh in zip(own, hat)]
        )
    layers = []
    for l, layer in enumerate(merged.layers):
        row = tuple(d[l] for d in per_task_dists)
        layers.append(LayerShift(layer.name, row, float(sum(row))))
    grand = float(sum(ls.total for ls in layers))
    return MCSReport(tuple(layers), grand, method_label, tuple(b.task_name for b in bundles))
