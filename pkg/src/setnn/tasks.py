"""Synthetic set-supervised tasks with exact analytic targets.

Three families:

* Gaussian population statistics: each set is an i.i.d. sample from a
  per-set Gaussian whose construction admits a closed-form target:
  ``rotation`` (entropy of the first marginal under a random rotation),
  ``correlation`` (mutual information between the two halves of a paired
  covariance), and ``rank1``/``random`` (total correlation of a structured or
  unstructured covariance).
* Digit sum: sets of one-hot encoded digits, labeled by their integer sum.
* Outlier selection: sets of Gaussian vectors sharing a per-set mean, with
  one element shifted by a fixed distance in a random direction; the label is
  the outlier's index.

Generation is deterministic and partitionable: every set derives its own
generator from (seed, set index), so datasets are reproducible byte-for-byte
and identical regardless of generation order. Serialization is JSONL (one
object per set), gzipped when the path ends in ``.gz`` with a pinned zero
mtime so repeated runs produce identical files.
"""

from __future__ import annotations

import gzip
import io
import json
from dataclasses import dataclass, field

import numpy as np

from setnn.layers import SetBatch

__all__ = [
    "TaskError",
    "GaussianTaskSpec",
    "LabeledSetDataset",
    "gen_population_task",
    "gen_digit_sum",
    "gen_outlier_sets",
    "save_jsonl",
    "load_jsonl",
    "POPULATION_KINDS",
]

POPULATION_KINDS = ("rotation", "correlation", "rank1", "random")

_DEFAULT_DIM = {"rotation": 2, "correlation": 16, "rank1": 32, "random": 32}

_MIN_EIGENVALUE = 1e-6


class TaskError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianTaskSpec:
    """Recipe for one population-statistics dataset.

    ``d`` is the base dimension; correlation sets live in 2d (two coupled
    halves). ``alpha_fixed`` pins the per-set coupling instead of drawing it,
    which is how evaluation slices at a known ground truth are produced.
    """

    kind: str
    num_sets: int
    seed: int
    d: int | None = None
    set_size_range: tuple[int, int] = (300, 500)
    alpha_fixed: float | None = None

    def __post_init__(self):
        if self.kind not in POPULATION_KINDS:
            raise TaskError(f"kind must be one of {POPULATION_KINDS}, got {self.kind!r}")
        if self.d is None:
            object.__setattr__(self, "d", _DEFAULT_DIM[self.kind])
        if self.d < 1 or (self.kind == "rotation" and self.d != 2):
            raise TaskError(f"invalid dimension {self.d} for kind {self.kind!r}")
        lo, hi = self.set_size_range
        if not 1 <= lo <= hi:
            raise TaskError(f"bad set size range {self.set_size_range}")
        if self.num_sets < 1:
            raise TaskError("num_sets must be positive")
        if self.alpha_fixed is not None and self.kind != "correlation":
            raise TaskError("alpha_fixed applies to the correlation kind only")

    @property
    def element_dim(self) -> int:
        return 2 * self.d if self.kind == "correlation" else self.d


@dataclass
class LabeledSetDataset:
    """Sets with one target each: scalars or per-set element indices."""

    sets: list[np.ndarray]
    targets: np.ndarray
    meta: dict = field(default_factory=dict)
    per_set_meta: list[dict] | None = None

    def __post_init__(self):
        if len(self.sets) != len(self.targets):
            raise TaskError(f"{len(self.sets)} sets but {len(self.targets)} targets")
        if not np.all(np.isfinite(np.asarray(self.targets, dtype=np.float64))):
            raise TaskError("targets must be finite")
        if self.per_set_meta is not None and len(self.per_set_meta) != len(self.sets):
            raise TaskError("per-set metadata length mismatch")

    def __len__(self) -> int:
        return len(self.sets)

    @property
    def element_dim(self) -> int:
        return self.sets[0].shape[1]

    def to_set_batch(self, indices=None) -> SetBatch:
        if indices is None:
            return SetBatch.from_sets(self.sets)
        return SetBatch.from_sets([self.sets[i] for i in indices])

    def subset(self, indices) -> "LabeledSetDataset":
        """New dataset holding the selected sets (copies, original untouched)."""
        idx = list(indices)
        meta = dict(self.meta)
        meta["num_sets"] = len(idx)
        per_set = None if self.per_set_meta is None else [dict(self.per_set_meta[i]) for i in idx]
        return LabeledSetDataset([self.sets[i].copy() for i in idx],
                                 self.targets[idx].copy(), meta, per_set)


def _set_rng(seed: int, index: int) -> np.random.Generator:
    # namespace 0: per-set streams; namespace 1: dataset-level draws
    return np.random.default_rng(np.random.SeedSequence([int(seed), 0, int(index)]))


def _dataset_rng(seed: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), 1]))


def _random_pd(rng: np.random.Generator, d: int) -> np.ndarray:
    a = rng.standard_normal((d, d))
    return a @ a.T / d + 1e-3 * np.eye(d)


def _require_pd(cov: np.ndarray) -> np.ndarray:
    if np.linalg.eigvalsh(cov)[0] < _MIN_EIGENVALUE:
        raise TaskError("covariance is not positive definite after construction")
    return cov


def _rotation(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]])


def _total_correlation(cov: np.ndarray) -> float:
    sign, logdet = np.linalg.slogdet(cov)
    if sign <= 0:
        raise TaskError("covariance is not positive definite after construction")
    return 0.5 * (float(np.sum(np.log(np.diag(cov)))) - logdet)


def _block_mi(cov: np.ndarray, d: int) -> float:
    top = np.linalg.slogdet(cov[:d, :d])[1]
    bottom = np.linalg.slogdet(cov[d:, d:])[1]
    sign, full = np.linalg.slogdet(cov)
    if sign <= 0:
        raise TaskError("covariance is not positive definite after construction")
    return 0.5 * (top + bottom - full)


def gen_population_task(spec: GaussianTaskSpec) -> LabeledSetDataset:
    """Sample the per-set Gaussians of one population task with their targets."""
    d = spec.d
    ds_rng = _dataset_rng(spec.seed)
    base_cov = None
    direction = None
    if spec.kind in ("rotation", "correlation"):
        base_cov = _require_pd(_random_pd(ds_rng, d))
    elif spec.kind == "rank1":
        direction = ds_rng.standard_normal(d)

    sets: list[np.ndarray] = []
    targets = np.empty(spec.num_sets)
    per_set: list[dict] = []
    lo, hi = spec.set_size_range
    for i in range(spec.num_sets):
        rng = _set_rng(spec.seed, i)
        size = int(rng.integers(lo, hi + 1))
        info: dict = {}
        if spec.kind == "rotation":
            angle = float(rng.uniform(0.0, np.pi))
            cov = _rotation(angle) @ base_cov @ _rotation(angle).T
            targets[i] = 0.5 * np.log(2.0 * np.pi * np.e * cov[0, 0])
            info["alpha"] = angle
        elif spec.kind == "correlation":
            if spec.alpha_fixed is not None:
                alpha = float(spec.alpha_fixed)
            else:
                alpha = float(rng.uniform(-1.0, 1.0))
            # keep the paired covariance comfortably positive definite
            alpha = float(np.clip(alpha, -(1.0 - 1e-3), 1.0 - 1e-3))
            cov = np.block([[base_cov, alpha * base_cov], [alpha * base_cov, base_cov]])
            targets[i] = _block_mi(cov, d)
            info["alpha"] = alpha
        elif spec.kind == "rank1":
            lam = float(rng.uniform(0.0, 1.0))
            cov = np.eye(d) + lam * np.outer(direction, direction)
            targets[i] = _total_correlation(cov)
            info["lambda"] = lam
        else:  # random
            cov = _random_pd(rng, d)
            targets[i] = _total_correlation(cov)
        _require_pd(cov)
        chol = np.linalg.cholesky(cov)
        sets.append(rng.standard_normal((size, cov.shape[0])) @ chol.T)
        per_set.append(info)

    meta = {
        "task": "population",
        "kind": spec.kind,
        "d": d,
        "element_dim": spec.element_dim,
        "num_sets": spec.num_sets,
        "seed": spec.seed,
        "set_size_range": list(spec.set_size_range),
        "target_kind": "scalar",
    }
    if spec.alpha_fixed is not None:
        meta["alpha_fixed"] = spec.alpha_fixed
    return LabeledSetDataset(sets, targets, meta, per_set)


def gen_digit_sum(num_sets: int, max_set_size: int, set_size_at_test: int | None, seed: int) -> LabeledSetDataset:
    """One-hot digit sets labeled by their sum.

    With ``set_size_at_test`` None or 0, set sizes are uniform on
    [1, max_set_size] (the training regime); otherwise every set has exactly
    that size (the evaluation regime for length generalization).
    """
    if num_sets < 1 or max_set_size < 1:
        raise TaskError("num_sets and max_set_size must be positive")
    fixed = int(set_size_at_test) if set_size_at_test else 0
    if fixed < 0:
        raise TaskError("set_size_at_test must be >= 0")
    sets = []
    targets = np.empty(num_sets)
    eye = np.eye(10)
    for i in range(num_sets):
        rng = _set_rng(seed, i)
        size = fixed if fixed else int(rng.integers(1, max_set_size + 1))
        digits = rng.integers(0, 10, size)
        sets.append(eye[digits])
        targets[i] = float(digits.sum())
    meta = {
        "task": "digit-sum",
        "max_set_size": max_set_size,
        "set_size_at_test": fixed,
        "num_sets": num_sets,
        "seed": seed,
        "target_kind": "scalar",
    }
    return LabeledSetDataset(sets, targets, meta)


def gen_outlier_sets(num_sets: int, set_size: int, d: int, shift: float, seed: int) -> LabeledSetDataset:
    """Sets of Gaussian vectors with one mean-shifted element to find.

    Every element shares a per-set random mean; the outlier's mean is offset
    by ``shift`` along a random unit direction. ``shift`` may be zero, which
    produces an indistinguishable 'outlier' (the chance-level control).
    """
    if set_size < 2:
        raise TaskError("set_size must be at least 2")
    if shift < 0:
        raise TaskError("shift must be non-negative")
    if num_sets < 1 or d < 1:
        raise TaskError("num_sets and d must be positive")
    sets = []
    targets = np.empty(num_sets, dtype=np.int64)
    for i in range(num_sets):
        rng = _set_rng(seed, i)
        mu = rng.standard_normal(d)
        u = rng.standard_normal(d)
        u /= np.linalg.norm(u)
        elements = mu + rng.standard_normal((set_size, d))
        pos = int(rng.integers(0, set_size))
        elements[pos] += shift * u
        sets.append(elements)
        targets[i] = pos
    meta = {
        "task": "outlier",
        "set_size": set_size,
        "d": d,
        "shift": shift,
        "num_sets": num_sets,
        "seed": seed,
        "target_kind": "index",
    }
    return LabeledSetDataset(sets, targets, meta)


# --- serialization ------------------------------------------------------------


def save_jsonl(dataset: LabeledSetDataset, path: str) -> None:
    """One JSON object per set; deterministic bytes (gzip mtime pinned to 0)."""
    index_targets = dataset.meta.get("target_kind") == "index"
    buf = io.StringIO()
    for i in range(len(dataset)):
        line_meta = dict(dataset.meta)
        if dataset.per_set_meta is not None:
            line_meta.update(dataset.per_set_meta[i])
        target = int(dataset.targets[i]) if index_targets else float(dataset.targets[i])
        obj = {"elements": dataset.sets[i].tolist(), "target": target, "meta": line_meta}
        buf.write(json.dumps(obj, separators=(",", ":"), sort_keys=True))
        buf.write("\n")
    payload = buf.getvalue().encode()
    if path.endswith(".gz"):
        with open(path, "wb") as f:
            with gzip.GzipFile(filename="", mode="wb", fileobj=f, mtime=0) as gz:
                gz.write(payload)
    else:
        with open(path, "wb") as f:
            f.write(payload)


_DATASET_META_KEYS = {
    "population": ("task", "kind", "d", "element_dim", "num_sets", "seed", "set_size_range", "target_kind", "alpha_fixed"),
    "digit-sum": ("task", "max_set_size", "set_size_at_test", "num_sets", "seed", "target_kind"),
    "outlier": ("task", "set_size", "d", "shift", "num_sets", "seed", "target_kind"),
}


def load_jsonl(path: str) -> LabeledSetDataset:
    opener = gzip.open if path.endswith(".gz") else open
    sets = []
    raw_targets = []
    per_set = []
    meta: dict = {}
    with opener(path, "rt") as f:
        for line in f:
            if not line.strip():
                continue
            obj = json.loads(line)
            sets.append(np.asarray(obj["elements"], dtype=np.float64))
            raw_targets.append(obj["target"])
            per_set.append(obj["meta"])
    if not sets:
        raise TaskError(f"{path} contains no sets")
    task = per_set[0].get("task")
    keys = _DATASET_META_KEYS.get(task, tuple(per_set[0]))
    meta = {k: per_set[0][k] for k in keys if k in per_set[0]}
    extras = [{k: v for k, v in m.items() if k not in keys} for m in per_set]
    if all(not e for e in extras):
        extras = None
    dtype = np.int64 if meta.get("target_kind") == "index" else np.float64
    return LabeledSetDataset(sets, np.asarray(raw_targets, dtype=dtype), meta, extras)
