"""Layer-wise closed-form model merging.

Three strategies share one per-layer solver:

* ``average`` - elementwise mean of the task weights.
* ``regmean`` - every layer solved at once from each task's own activations.
* ``com`` / ``com_weighted`` - Chain of Merges: layers solved first to last,
  each one fed the activations produced by the already merged prefix.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ArchitectureMismatch, InsufficientSamples, InvalidShape
from .linalg import (
    DEFAULT_LAMBDA_REL,
    DEFAULT_RANK_EPS,
    as_matrix,
    gram,
    offdiag_norm,
    pinv_tikhonov,
)
from .model import SequentialModel, augment, forward_capture

METHODS = ("average", "regmean", "com", "com_weighted")
_ALIASES = {"avg": "average", "mean": "average", "com-weighted": "com_weighted", "simultaneous": "regmean"}


def canonical_method(name: str) -> str:
    method = _ALIASES.get(name, name)
    if method not in METHODS:
        raise ValueError(f"unknown merge method {name!r}; choose from {', '.join(METHODS)}")
    return method


@dataclass(frozen=True)
class MergeConfig:
    method: str = "com"
    lambda_rel: float = DEFAULT_LAMBDA_REL
    rank_eps: float = DEFAULT_RANK_EPS
    normalize: bool = True
    max_samples_per_task: int = 500
    weight_floor_rel: float = 1e-6

    def __post_init__(self):
        object.__setattr__(self, "method", canonical_method(self.method))
        if self.lambda_rel < 0 or self.rank_eps < 0:
            raise ValueError("lambda_rel and rank_eps must be non-negative")
        if self.max_samples_per_task < 2:
            raise ValueError("max_samples_per_task must be at least 2")
        if not 0.0 <= self.weight_floor_rel <= 1.0:
            raise ValueError("weight_floor_rel must lie in [0, 1]")


@dataclass(frozen=True)
class TaskBundle:
    model: SequentialModel
    samples: np.ndarray
    task_name: str = "task"

    def __post_init__(self):
        x = as_matrix(self.samples, f"samples of {self.task_name!r}")
        if x.shape[0] != self.model.input_dim:
            raise InvalidShape(
                f"samples of {self.task_name!r} have {x.shape[0]} rows, model expects {self.model.input_dim}"
            )
        if x.shape[1] < 2:
            raise InsufficientSamples(f"task {self.task_name!r} needs at least 2 samples, got {x.shape[1]}")
        object.__setattr__(self, "samples", x)


@dataclass(frozen=True)
class SensitivityWeights:
    per_task: tuple

    @classmethod
    def uniform(cls, n: int) -> "SensitivityWeights":
        return cls(tuple([1.0] * n))


@dataclass
class MergeOutcome:
    merged: SequentialModel
    method: str
    per_layer_omega: list
    per_layer_weights: list = field(default_factory=list)
    stats_provenance: list = field(default_factory=list)
    # layer_inputs[l][i]: activations consumed when solving layer l for task i
    layer_inputs: list = field(default_factory=list)


def objective_omega(w_merged, ws, xs) -> float:
    """Summed squared Frobenius residual between merged and per-task outputs."""
    if len(ws) != len(xs) or not ws:
        raise InvalidShape("need equally many weights and inputs (at least one)")
    w_merged = as_matrix(w_merged, "W_M")
    total = 0.0
    for w, x in zip(ws, xs):
        w = as_matrix(w, "W_i")
        x = as_matrix(x, "X_i")
        if w.shape != w_merged.shape or x.shape[0] != w.shape[1]:
            raise InvalidShape(f"inconsistent shapes W_M {w_merged.shape}, W_i {w.shape}, X_i {x.shape}")
        r = (w_merged - w) @ x
        total += float(np.sum(r * r))
    return total


def _layer_inputs(w: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Augment ``x`` with a ones row when ``w`` carries a bias column."""
    if w.shape[1] == x.shape[0]:
        return x
    if w.shape[1] == x.shape[0] + 1:
        return augment(x, True)
    raise InvalidShape(f"weight with {w.shape[1]} columns cannot consume inputs with {x.shape[0]} rows")


def _solve(ws, grams, weights, lambda_rel, rank_eps) -> np.ndarray:
    cross = sum(om * (w @ g) for om, w, g in zip(weights, ws, grams))
    total = sum(om * g for om, g in zip(weights, grams))
    return cross @ pinv_tikhonov(total, lambda_rel, rank_eps)


def _task_grams(ws, xs, normalize):
    grams = []
    d = None
    for w, x in zip(ws, xs):
        xa = _layer_inputs(w, x)
        if d is not None and xa.shape[0] != d:
            raise InvalidShape("all tasks must feed the layer inputs of the same width")
        d = xa.shape[0]
        grams.append(gram(xa, normalize))
    return grams


def regmean_layer(ws, xs, weights: SensitivityWeights | None = None, cfg: MergeConfig | None = None) -> np.ndarray:
    """Closed-form merged weight for one linear layer.

    Parameters
    ----------
    ws : list of ndarray
        Task weights, each ``out x in`` (``in + 1`` columns with a bias).
    xs : list of ndarray
        Task inputs to this layer, each ``in x n_i`` without the bias row.
    weights : SensitivityWeights, optional
        Per-task importance; uniform when omitted.
    cfg : MergeConfig, optional
        Supplies ``lambda_rel``, ``rank_eps`` and ``normalize``.
    """
    cfg = cfg or MergeConfig()
    if len(ws) != len(xs) or not ws:
        raise InvalidShape("need equally many weights and inputs (at least one)")
    ws = [as_matrix(w, "W_i") for w in ws]
    if any(w.shape != ws[0].shape for w in ws):
        raise InvalidShape("task weights differ in shape")
    weights = weights or SensitivityWeights.uniform(len(ws))
    if len(weights.per_task) != len(ws):
        raise InvalidShape("one sensitivity weight per task is required")
    grams = _task_grams(ws, [as_matrix(x, "X_i") for x in xs], cfg.normalize)
    return _solve(ws, grams, weights.per_task, cfg.lambda_rel, cfg.rank_eps)


def sensitivity_weights(grams, floor_rel: float = 1e-6) -> SensitivityWeights:
    """Off-diagonal-norm importance weights, floored so no task is dropped."""
    if len({np.shape(g) for g in grams}) > 1:
        raise InvalidShape("Gram matrices differ in size")
    raw = [offdiag_norm(g) for g in grams]
    top = max(raw) if raw else 0.0
    if top <= 0.0:
        return SensitivityWeights.uniform(len(raw))
    floor = floor_rel * top
    return SensitivityWeights(tuple(max(om, floor) for om in raw))


def check_compatible(bundles) -> None:
    if not bundles:
        raise ArchitectureMismatch("nothing to merge")
    ref = bundles[0].model.architecture()
    for b in bundles[1:]:
        if b.model.architecture() != ref:
            raise ArchitectureMismatch(f"task {b.task_name!r} does not share the architecture of {bundles[0].task_name!r}")


def capped_samples(bundle: TaskBundle, cap: int) -> np.ndarray:
    """Leading ``cap`` columns of the bundle's samples (no resampling)."""
    return bundle.samples[:, :cap]


def merge_average(bundles) -> MergeOutcome:
    check_compatible(bundles)
    first = bundles[0].model
    merged_ws = []
    omegas = []
    traces = [forward_capture(b.model, b.samples) for b in bundles]
    for l in range(len(first.layers)):
        ws = [b.model.layers[l].weight for b in bundles]
        w_m = np.mean(np.stack(ws), axis=0)
        merged_ws.append(w_m)
        xs = [_layer_inputs(w_m, t.per_layer_inputs[l]) for t in traces]
        omegas.append(objective_omega(w_m, ws, xs))
    counts = [[b.samples.shape[1] for b in bundles] for _ in first.layers]
    return MergeOutcome(first.with_weights(merged_ws), "average", omegas, [], counts)


def merge_simultaneous(bundles, cfg: MergeConfig | None = None) -> MergeOutcome:
    """Solve every layer independently from each task's unmerged activations."""
    cfg = replace(cfg or MergeConfig(), method="regmean")
    check_compatible(bundles)
    first = bundles[0].model
    xs0 = [capped_samples(b, cfg.max_samples_per_task) for b in bundles]
    traces = [forward_capture(b.model, x) for b, x in zip(bundles, xs0)]
    merged_ws, omegas, consumed = [], [], []
    for l in range(len(first.layers)):
        ws = [b.model.layers[l].weight for b in bundles]
        xs = [t.per_layer_inputs[l] for t in traces]
        w_m = regmean_layer(ws, xs, None, cfg)
        merged_ws.append(w_m)
        omegas.append(objective_omega(w_m, ws, [_layer_inputs(w_m, x) for x in xs]))
        consumed.append(xs)
    counts = [[x.shape[1] for x in xs0] for _ in first.layers]
    return MergeOutcome(first.with_weights(merged_ws), "regmean", omegas, [], counts, consumed)


def merge_com(bundles, cfg: MergeConfig | None = None) -> MergeOutcome:
    """Chain of Merges.

    Layer 1 is solved from the raw samples. Every later layer is solved from
    the activations obtained by pushing each task's samples through the layers
    merged so far, so the statistics used for layer ``l`` are exactly the
    inputs that layer receives in the final merged model.
    """
    cfg = cfg or MergeConfig(method="com")
    if cfg.method not in ("com", "com_weighted"):
        cfg = replace(cfg, method="com")
    weighted = cfg.method == "com_weighted"
    check_compatible(bundles)
    first = bundles[0].model

    current = [capped_samples(b, cfg.max_samples_per_task) for b in bundles]
    counts = [[x.shape[1] for x in current] for _ in first.layers]
    merged_layers, omegas, all_weights, consumed = [], [], [], []
    for l, ref_layer in enumerate(first.layers):
        ws = [b.model.layers[l].weight for b in bundles]
        grams = _task_grams(ws, current, cfg.normalize)
        if weighted:
            omega_w = sensitivity_weights(grams, cfg.weight_floor_rel)
            all_weights.append(omega_w)
        else:
            omega_w = SensitivityWeights.uniform(len(bundles))
        w_m = _solve(ws, grams, omega_w.per_task, cfg.lambda_rel, cfg.rank_eps)
        omegas.append(objective_omega(w_m, ws, [_layer_inputs(w_m, x) for x in current]))
        consumed.append(current)
        layer = ref_layer.with_weight(w_m)
        merged_layers.append(layer)
        current = [layer.forward(x) for x in current]

    merged = SequentialModel(tuple(merged_layers), first.input_dim)
    return MergeOutcome(merged, cfg.method, omegas, all_weights, counts, consumed)


def merge(bundles, cfg: MergeConfig | None = None) -> MergeOutcome:
    """Dispatch on ``cfg.method``."""
    cfg = cfg or MergeConfig()
    if cfg.method == "average":
        return merge_average(bundles)
    if cfg.method == "regmean":
        return merge_simultaneous(bundles, cfg)
    return merge_com(bundles, cfg)
