"""Training and evaluation driver for the synthetic set tasks.

Three task/loss pairings are supported: scalar regression with mean squared
error (population statistics, digit sum) and per-element selection with a
set-wise softmax negative log likelihood (outlier). Mini-batches are whole
sets; the gradient of each step is averaged over the sets in the batch.
Optimization is Adam with fixed defaults, a fixed epoch budget, and no early
stopping, so a (config, dataset) pair fully determines the run.

The architecture is described by the config: regression tasks use a
per-element dense stack, a pooling reduction, and a per-set dense stack; the
outlier task scores elements with a stack of permutation-equivariant layers
followed by a softmax across each set. Setting ``pooled_baseline`` swaps the
equivariant stack for a pool-first model with identical layer shapes (hence
identical parameter count) whose score is necessarily constant within a set,
the collapse control for the selection task.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields

import numpy as np

from setnn import autodiff as ad
from setnn.autodiff import Tape, Tensor
from setnn.layers import (
    DenseLayer,
    EquivariantLayer,
    EquivariantStack,
    InvariantModel,
    SetBatch,
    dense_stack,
    glorot_uniform,
)
from setnn.tasks import LabeledSetDataset

__all__ = [
    "ConfigError",
    "TrainingDiverged",
    "TrainConfig",
    "MetricsRecord",
    "Adam",
    "build_model",
    "train",
    "evaluate",
    "metrics_to_csv",
    "METRICS_HEADER",
]

TASKS = ("population", "digit-sum", "outlier")

LOSSES = ("mse", "set-softmax-nll", "margin")

_LOSS_FOR_TASK = {"population": "mse", "digit-sum": "mse", "outlier": "set-softmax-nll"}

_EVAL_CHUNK = 256

METRICS_HEADER = "epoch,train_loss,eval_metric,wall_seconds"


class ConfigError(ValueError):
    pass


class TrainingDiverged(RuntimeError):
    """Raised when a training step produces a non-finite loss.

    Carries where the run died and the parameter norms at that point, which
    is usually enough to tell an exploding step size from bad data.
    """

    def __init__(self, epoch: int, batch_index: int, param_norms: list[float]):
        self.epoch = epoch
        self.batch_index = batch_index
        self.param_norms = param_norms
        norms = ", ".join(f"{n:.3e}" for n in param_norms)
        super().__init__(
            f"non-finite loss at epoch {epoch}, batch {batch_index}; parameter norms: [{norms}]"
        )


@dataclass
class TrainConfig:
    """Everything that determines a training run except the dataset.

    ``phi_widths``/``rho_widths``/``pool`` describe the regression model,
    ``equivariant_widths``/``equivariant_variant`` the selection model; the
    irrelevant group is ignored for a given task. An empty ``loss`` picks the
    task's canonical loss.
    """

    task: str
    loss: str = ""
    phi_widths: tuple[int, ...] = (64, 64, 64)
    rho_widths: tuple[int, ...] = (64, 32, 1)
    pool: str = "sum"
    equivariant_widths: tuple[int, ...] = (64, 64, 1)
    equivariant_variant: str = "maxpool-normalized"
    pooled_baseline: bool = False
    step_size: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 10
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if not self.loss:
            self.loss = _LOSS_FOR_TASK[self.task]
        if self.loss not in LOSSES:
            raise ConfigError(f"loss must be one of {LOSSES}, got {self.loss!r}")
        if self.loss == "margin":
            raise ConfigError(
                "the margin loss belongs to set-expansion scoring (bayes.margin_loss), not to these tasks"
            )
        if self.loss != _LOSS_FOR_TASK[self.task]:
            raise ConfigError(f"loss {self.loss!r} is incompatible with task {self.task!r}")
        self.phi_widths = tuple(int(w) for w in self.phi_widths)
        self.rho_widths = tuple(int(w) for w in self.rho_widths)
        self.equivariant_widths = tuple(int(w) for w in self.equivariant_widths)
        for name in ("phi_widths", "rho_widths", "equivariant_widths"):
            widths = getattr(self, name)
            if not widths or any(w < 1 for w in widths):
                raise ConfigError(f"{name} must be positive, got {widths}")
        if self.task != "outlier" and self.rho_widths[-1] != 1:
            raise ConfigError("regression models must end in a single output unit")
        if self.task == "outlier" and self.equivariant_widths[-1] != 1:
            raise ConfigError("selection models must end in a single score per element")
        if self.pool not in ("sum", "max", "mean"):
            raise ConfigError(f"pool must be sum/max/mean, got {self.pool!r}")
        if self.equivariant_variant not in ("full-lambda-gamma", "maxpool-normalized"):
            raise ConfigError(
                "equivariant_variant must be full-lambda-gamma or maxpool-normalized "
                "(the scalar variant has no trainable parameters)"
            )
        if self.pooled_baseline and self.task != "outlier":
            raise ConfigError("pooled_baseline applies to the outlier task only")
        for name in ("step_size", "epsilon"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        for name in ("beta1", "beta2"):
            if not 0 <= getattr(self, name) < 1:
                raise ConfigError(f"{name} must be in [0, 1)")
        if self.batch_size < 1 or self.epochs < 1:
            raise ConfigError("batch_size and epochs must be positive")

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        if "task" not in obj:
            raise ConfigError("config needs a 'task' field")
        return cls(**obj)


@dataclass
class MetricsRecord:
    epoch: int
    train_loss: float
    eval_metric: float
    wall_seconds: float


def metrics_to_csv(records, include_timing: bool = False) -> str:
    """Render records as CSV. Timing is zeroed out by default so the bytes
    depend only on (config, dataset, seed); pass ``include_timing`` for real
    wall times at the cost of run-to-run identical files."""
    lines = [METRICS_HEADER]
    for r in records:
        wall = f"{r.wall_seconds:.3f}" if include_timing else "0.000"
        lines.append(f"{r.epoch},{r.train_loss!r},{r.eval_metric!r},{wall}")
    return "\n".join(lines) + "\n"


class Adam(object):
    """Adam with step-count bias correction; state keyed by parameter order."""

    def __init__(self, params: list[Tensor], step_size: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, epsilon: float = 1e-8):
        self.params = list(params)
        self.step_size = float(step_size)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self, grads: list[np.ndarray]) -> None:
        if len(grads) != len(self.params):
            raise ConfigError(f"{len(grads)} gradients for {len(self.params)} parameters")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data -= self.step_size * (m / c1) / (np.sqrt(v / c2) + self.epsilon)


def build_model(config: TrainConfig, element_dim: int, rng: np.random.Generator):
    """Instantiate the architecture a config describes for a given element width."""
    if element_dim < 1:
        raise ConfigError(f"element_dim must be positive, got {element_dim}")
    if config.task in ("population", "digit-sum"):
        phi = dense_stack(rng, [element_dim, *config.phi_widths], "relu", final="relu")
        rho = dense_stack(rng, [config.phi_widths[-1], *config.rho_widths], "relu", final="linear")
        return InvariantModel(phi, config.pool, rho)
    if config.pooled_baseline:
        rho = dense_stack(rng, [element_dim, *config.equivariant_widths], "tanh", final="linear")
        return InvariantModel([], "max", rho)
    layers = []
    widths = [element_dim, *config.equivariant_widths]
    for i in range(len(widths) - 1):
        act = "tanh" if i < len(widths) - 2 else "linear"
        Lambda = glorot_uniform(rng, widths[i], widths[i + 1])
        kw = {"beta": np.zeros(widths[i + 1]), "nonlinearity": act, "pool": "max"}
        if config.equivariant_variant == "full-lambda-gamma":
            kw["Gamma"] = glorot_uniform(rng, widths[i], widths[i + 1])
        layers.append(EquivariantLayer(config.equivariant_variant, Lambda=Lambda, **kw))
    return EquivariantStack(layers)


def _check_dataset(config: TrainConfig, dataset: LabeledSetDataset) -> None:
    task = dataset.meta.get("task")
    if task is not None and task != config.task:
        raise ConfigError(f"config task {config.task!r} but dataset task {task!r}")
    if len(dataset) < 1:
        raise ConfigError("dataset is empty")
    index_targets = dataset.meta.get("target_kind") == "index"
    if (config.task == "outlier") != index_targets:
        raise ConfigError("target kind does not match the configured task")


def _element_scores(model, batch: SetBatch) -> Tensor:
    """Per-element selection scores as a (total, 1) tensor. A per-set scorer
    (the pooled baseline) is broadcast back to its elements."""
    if isinstance(model, EquivariantStack):
        return model.forward_batch(batch)
    per_set = model.forward(batch)
    return ad.segment_broadcast(per_set, batch.offsets)


def _batch_loss(config: TrainConfig, model, batch: SetBatch, targets: np.ndarray) -> Tensor:
    if config.loss == "mse":
        pred = model.forward(batch)
        return ad.mse_loss(pred, Tensor(targets.reshape(-1, 1)))
    scores = _element_scores(model, batch)
    return ad.set_softmax_nll(scores, batch.offsets, targets)


def train(config: TrainConfig, dataset: LabeledSetDataset,
          eval_dataset: LabeledSetDataset | None = None):
    """Run the configured training; returns (model, per-epoch MetricsRecords).

    The eval metric of each record is computed on ``eval_dataset`` when given,
    else on the training dataset. The dataset is never mutated; every batch
    is assembled from copies.
    """
    _check_dataset(config, dataset)
    if eval_dataset is not None:
        _check_dataset(config, eval_dataset)
    rng = np.random.default_rng(config.seed)
    model = build_model(config, dataset.element_dim, rng)
    params = model.params()
    opt = Adam(params, config.step_size, config.beta1, config.beta2, config.epsilon)
    n = len(dataset)
    records: list[MetricsRecord] = []
    for epoch in range(1, config.epochs + 1):
        started = time.perf_counter()
        order = rng.permutation(n)
        loss_sum = 0.0
        sets_seen = 0
        for batch_index, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            batch = dataset.to_set_batch(idx)
            targets = dataset.targets[idx]
            try:
                with Tape() as tape:
                    for p in params:
                        tape.ensure_leaf(p)
                    loss = _batch_loss(config, model, batch, targets)
                grads = ad.backprop(tape, loss)
            except ad.NonFiniteError as exc:
                norms = [float(np.linalg.norm(p.data)) for p in params]
                raise TrainingDiverged(epoch, batch_index, norms) from exc
            opt.step([grads[p.node_id].data for p in params])
            loss_sum += float(loss.data) * idx.size
            sets_seen += idx.size
        metric = evaluate(model, eval_dataset if eval_dataset is not None else dataset,
                          config.task).eval_metric
        records.append(MetricsRecord(epoch, loss_sum / sets_seen, metric,
                                     time.perf_counter() - started))
    return model, records


def _predictions(model, dataset: LabeledSetDataset) -> np.ndarray:
    preds = np.empty(len(dataset))
    for lo in range(0, len(dataset), _EVAL_CHUNK):
        idx = range(lo, min(lo + _EVAL_CHUNK, len(dataset)))
        out = model.forward(dataset.to_set_batch(idx))
        preds[lo:lo + len(idx)] = out.data.reshape(-1)
    return preds


def _selections(model, dataset: LabeledSetDataset) -> np.ndarray:
    picks = np.empty(len(dataset), dtype=np.int64)
    for lo in range(0, len(dataset), _EVAL_CHUNK):
        idx = range(lo, min(lo + _EVAL_CHUNK, len(dataset)))
        batch = dataset.to_set_batch(idx)
        scores = _element_scores(model, batch).data.reshape(-1)
        for j in range(batch.num_sets):
            seg = scores[batch.offsets[j]:batch.offsets[j + 1]]
            picks[lo + j] = int(np.argmax(seg))  # ties resolve to the lowest index
    return picks


def evaluate(model, dataset: LabeledSetDataset, task: str) -> MetricsRecord:
    """Score a model on a dataset: MSE for population, rounded-exact accuracy
    for digit-sum, selection accuracy for outlier. Runs eagerly (no tape)."""
    if task not in TASKS:
        raise ConfigError(f"task must be one of {TASKS}, got {task!r}")
    started = time.perf_counter()
    if task == "outlier":
        metric = float(np.mean(_selections(model, dataset) == dataset.targets))
    else:
        preds = _predictions(model, dataset)
        if task == "population":
            metric = float(np.mean((preds - dataset.targets) ** 2))
        else:
            metric = float(np.mean(np.round(preds) == dataset.targets))
    if not math.isfinite(metric):
        raise TrainingDiverged(0, 0, [float(np.linalg.norm(p.data)) for p in model.params()])
    return MetricsRecord(0, float("nan"), metric, time.perf_counter() - started)
