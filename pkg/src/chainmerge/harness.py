"""Desk-scale merging experiments on synthetic Gaussian-blob tasks.

Pipeline: generate tasks, pretrain one base network on the pooled data,
fine-tune a copy per task, merge the fine-tuned copies with each method and
score the merged model on every task relative to that task's own network.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
import math
import os

import numpy as np
from scipy.special import erf

from .errors import InvalidShape
from .mcs import mcs_report
from .merge import MergeConfig, TaskBundle, canonical_method, merge
from .model import ActivationKind, SequentialModel, apply_activation, augment, build_mlp

_MASK64 = (1 << 64) - 1


def splitmix64(x: int) -> int:
    z = (x + 0x9E3779B97F4A7C15) & _MASK64
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & _MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & _MASK64
    return z ^ (z >> 31)


def worker_count(jobs: int) -> int:
    """Thread cap from ``CMM_THREADS`` (unset or 0 means one per job, up to CPU count)."""
    try:
        cap = int(os.environ.get("CMM_THREADS", "0"))
    except ValueError:
        cap = 0
    if cap <= 0:
        cap = os.cpu_count() or 1
    return max(1, min(cap, jobs))


@dataclass(frozen=True)
class SyntheticTask:
    name: str
    train_inputs: np.ndarray
    train_labels: np.ndarray
    test_inputs: np.ndarray
    test_labels: np.ndarray
    num_classes: int
    seed: int


@dataclass(frozen=True)
class TrainHyper:
    learning_rate: float = 0.1
    epochs: int = 20
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be at least 1")


@dataclass(frozen=True)
class EvalResult:
    task_name: str
    accuracy: float
    loss: float


def gen_tasks(master_seed: int, num_tasks: int, input_dim: int, num_classes: int, samples_per_split: int) -> list:
    if num_tasks < 1 or input_dim < 1 or num_classes < 1 or samples_per_split < 1:
        raise ValueError("task counts and dimensions must be positive")
    tasks = []
    for i in range(num_tasks):
        seed = splitmix64(master_seed + i)
        rng = np.random.default_rng(seed)
        centers = rng.uniform(-2.0, 2.0, size=(num_classes, input_dim))

        def draw(n):
            labels = rng.integers(0, num_classes, size=n)
            x = centers[labels] + 0.5 * rng.standard_normal((n, input_dim))
            return np.ascontiguousarray(x.T), labels

        x_tr, y_tr = draw(samples_per_split)
        x_te, y_te = draw(samples_per_split)
        tasks.append(SyntheticTask(f"task{i}", x_tr, y_tr, x_te, y_te, num_classes, seed))
    return tasks


def _activation_grad(kind: ActivationKind, z: np.ndarray, h: np.ndarray) -> np.ndarray:
    if kind is ActivationKind.IDENTITY:
        return np.ones_like(z)
    if kind is ActivationKind.RELU:
        return (z > 0.0).astype(np.float64)
    if kind is ActivationKind.TANH:
        return 1.0 - h * h
    cdf = 0.5 * (1.0 + erf(z / math.sqrt(2.0)))
    return cdf + z * np.exp(-0.5 * z * z) / math.sqrt(2.0 * math.pi)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    """Column-wise log-softmax of a ``classes x n`` matrix."""
    shifted = logits - logits.max(axis=0, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=0, keepdims=True))


def loss_and_grads(weights, model: SequentialModel, x: np.ndarray, y: np.ndarray):
    """Mean softmax cross-entropy and its gradient for every weight matrix.

    ``weights`` overrides the model's own weights so training can iterate on
    plain arrays without rebuilding the model each step.
    """
    n = x.shape[1]
    inputs, pre, post = [], [], []
    h = x
    for layer, w in zip(model.layers, weights):
        a = augment(h, layer.has_bias)
        z = w @ a
        inputs.append(a)
        pre.append(z)
        h = apply_activation(layer.activation, z)
        post.append(h)
    logp = log_softmax(h)
    idx = np.arange(n)
    loss = -float(logp[y, idx].mean())

    grad_h = np.exp(logp)
    grad_h[y, idx] -= 1.0
    grad_h /= n
    grads = [None] * len(weights)
    for l in range(len(weights) - 1, -1, -1):
        layer = model.layers[l]
        grad_z = grad_h * _activation_grad(layer.activation, pre[l], post[l])
        grads[l] = grad_z @ inputs[l].T
        if l:
            w = weights[l]
            grad_h = (w[:, :-1] if layer.has_bias else w).T @ grad_z
    return loss, grads


def _check_task_shape(model: SequentialModel, task: SyntheticTask) -> None:
    if model.input_dim != task.train_inputs.shape[0]:
        raise InvalidShape(f"model input width {model.input_dim} != task width {task.train_inputs.shape[0]}")
    if model.output_dim != task.num_classes:
        raise InvalidShape(f"model emits {model.output_dim} logits, task has {task.num_classes} classes")


def train_model(init: SequentialModel, task: SyntheticTask, hyper: TrainHyper) -> SequentialModel:
    """Mini-batch SGD on cross-entropy; returns a trained copy of ``init``."""
    _check_task_shape(init, task)
    weights = [w.copy() for w in init.weights]
    x, y = task.train_inputs, task.train_labels
    n = x.shape[1]
    rng = np.random.default_rng(hyper.seed)
    for _ in range(hyper.epochs):
        order = rng.permutation(n)
        for start in range(0, n, hyper.batch_size):
            batch = order[start : start + hyper.batch_size]
            _, grads = loss_and_grads(weights, init, x[:, batch], y[batch])
            for w, g in zip(weights, grads):
                w -= hyper.learning_rate * g
    return init.with_weights(weights)


def evaluate(model: SequentialModel, task: SyntheticTask, split: str = "test") -> EvalResult:
    """Accuracy and mean cross-entropy; argmax ties go to the lower class index."""
    x = task.test_inputs if split == "test" else task.train_inputs
    y = task.test_labels if split == "test" else task.train_labels
    return evaluate_arrays(model, x, y, task.name)


def evaluate_arrays(model: SequentialModel, x: np.ndarray, y: np.ndarray, name: str = "data") -> EvalResult:
    logits = model(x)
    if logits.shape[0] <= int(np.max(y, initial=0)):
        raise InvalidShape("labels exceed the number of model outputs")
    pred = np.argmax(logits, axis=0)
    logp = log_softmax(logits)
    idx = np.arange(x.shape[1])
    return EvalResult(name, float(np.mean(pred == y)), -float(logp[y, idx].mean()))


def pooled_task(tasks, name: str = "pooled") -> SyntheticTask:
    return SyntheticTask(
        name,
        np.hstack([t.train_inputs for t in tasks]),
        np.concatenate([t.train_labels for t in tasks]),
        np.hstack([t.test_inputs for t in tasks]),
        np.concatenate([t.test_labels for t in tasks]),
        tasks[0].num_classes,
        tasks[0].seed,
    )


@dataclass(frozen=True)
class ExperimentSpec:
    num_tasks: int = 4
    input_dim: int = 16
    depth: int = 3
    hidden_dim: int = 32
    num_classes: int = 4
    samples_per_split: int = 500
    seed: int = 42
    activation: str = "relu"
    pretrain: TrainHyper = TrainHyper(learning_rate=0.05, epochs=1, batch_size=32, seed=0)
    finetune: TrainHyper = TrainHyper(learning_rate=0.2, epochs=40, batch_size=32, seed=1)
    methods: tuple = ("average", "regmean", "com", "com_weighted")
    merge: MergeConfig = MergeConfig()
    samples_for_merging: int = 500
    sweep: tuple = ()
    sweep_method: str = "com"

    def __post_init__(self):
        object.__setattr__(self, "methods", tuple(canonical_method(m) for m in self.methods))
        object.__setattr__(self, "sweep_method", canonical_method(self.sweep_method))
        if self.depth < 1:
            raise ValueError("depth must be at least 1")

    def layer_sizes(self) -> list:
        return [self.input_dim] + [self.hidden_dim] * (self.depth - 1) + [self.num_classes]


@dataclass
class ExperimentResult:
    report: dict
    tasks: list
    base: SequentialModel
    fine_tuned: list
    bundles: list
    outcomes: dict = field(default_factory=dict)


def _score(model, tasks, reference) -> tuple:
    rows = []
    for task, ref in zip(tasks, reference):
        res = evaluate(model, task)
        norm = res.accuracy / ref.accuracy if ref.accuracy > 0 else float("nan")
        rows.append({"task": task.name, "accuracy": res.accuracy, "loss": res.loss, "normalized": norm})
    avg_norm = float(np.mean([r["normalized"] for r in rows]))
    avg_acc = float(np.mean([r["accuracy"] for r in rows]))
    return rows, avg_norm, avg_acc


def prepare_models(spec: ExperimentSpec):
    """Generate the tasks, pretrain the shared base and fine-tune one copy per task."""
    tasks = gen_tasks(spec.seed, spec.num_tasks, spec.input_dim, spec.num_classes, spec.samples_per_split)
    init = build_mlp(spec.layer_sizes(), spec.activation, rng=np.random.default_rng(splitmix64(spec.seed ^ 0x5EED)))
    base = train_model(init, pooled_task(tasks), spec.pretrain)
    # results come back in task order whatever the thread count
    with ThreadPoolExecutor(max_workers=worker_count(len(tasks))) as pool:
        fine_tuned = list(pool.map(lambda t: train_model(base, t, spec.finetune), tasks))
    return tasks, base, fine_tuned


def run_experiment(spec: ExperimentSpec | None = None) -> ExperimentResult:
    spec = spec or ExperimentSpec()
    tasks, base, fine_tuned = prepare_models(spec)
    reference = [evaluate(m, t) for m, t in zip(fine_tuned, tasks)]
    bundles = [TaskBundle(m, t.train_inputs, t.name) for m, t in zip(fine_tuned, tasks)]

    report = {
        "spec": _spec_dict(spec),
        "tasks": [t.name for t in tasks],
        "fine_tuned": [asdict(r) for r in reference],
        "methods": [],
        "sweep": [],
    }
    outcomes = {}
    for method in spec.methods:
        cfg = replace(spec.merge, method=method, max_samples_per_task=spec.samples_for_merging)
        outcome = merge(bundles, cfg)
        outcomes[method] = outcome
        rows, avg_norm, avg_acc = _score(outcome.merged, tasks, reference)
        shift = mcs_report(bundles, outcome.merged, method, spec.samples_for_merging)
        report["methods"].append(
            {
                "method": method,
                "per_task": rows,
                "avg_normalized": avg_norm,
                "avg_accuracy": avg_acc,
                "per_layer_omega": list(outcome.per_layer_omega),
                "mcs": shift.to_dict(),
            }
        )
    for n in spec.sweep:
        cfg = replace(spec.merge, method=spec.sweep_method, max_samples_per_task=n)
        outcome = merge(bundles, cfg)
        _, avg_norm, avg_acc = _score(outcome.merged, tasks, reference)
        report["sweep"].append(
            {"samples": n, "method": spec.sweep_method, "avg_normalized": avg_norm, "avg_accuracy": avg_acc}
        )
    return ExperimentResult(report, tasks, base, fine_tuned, bundles, outcomes)


def _spec_dict(spec: ExperimentSpec) -> dict:
    d = asdict(spec)
    d["methods"] = list(spec.methods)
    d["sweep"] = list(spec.sweep)
    return d
