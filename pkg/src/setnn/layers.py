"""Set architectures: ragged batches, invariant models, equivariant layers.

An invariant model applies a per-element dense stack, pools each set with a
commutative reduction, optionally concatenates a per-set condition vector,
then applies a second dense stack. Its output depends only on the multiset of
elements, which the test suite verifies behaviorally.

Equivariant layers act on the rows of one set and commute with row
permutations. Three weight-sharing variants are provided:

* ``scalar-lambda-gamma``: ``sigma(lam*x + gam*pool(x))`` with scalar
  coefficients; with sum pooling this is exactly the tied dense matrix
  ``Theta = lam*I + gam*ones`` materialized by :func:`build_theta`.
* ``full-lambda-gamma``: ``sigma(beta + x@Lambda - pool(x)@Gamma)`` with full
  weight matrices, pooling over the set and broadcasting back.
* ``maxpool-normalized``: ``sigma(beta + (x - maxpool(x))@Lambda)``, a single
  weight matrix applied after subtracting the per-channel max.

`commutes_with_all_permutations` and `commutant_dimension` check the algebra
directly: the tied two-parameter family is precisely the space of matrices
commuting with every permutation.
"""

from __future__ import annotations

import itertools
import json

import numpy as np

from setnn import autodiff as ad
from setnn.autodiff import ShapeError, Tensor

__all__ = [
    "SetBatch",
    "DenseLayer",
    "InvariantModel",
    "EquivariantLayer",
    "EquivariantStack",
    "invariant_forward",
    "equivariant_forward",
    "build_theta",
    "commutes_with_all_permutations",
    "commutant_dimension",
    "glorot_uniform",
    "random_invariant_model",
    "random_equivariant_stack",
    "model_to_json",
    "model_from_json",
]

NONLINEARITIES = {
    "relu": ad.relu,
    "tanh": ad.tanh,
    "sigmoid": ad.sigmoid,
    "elu": ad.elu,
    "linear": lambda t: t,
}


class SetBatch:
    """Ragged batch of sets: flat (total, D) element matrix plus offsets.

    Set ``i`` occupies rows ``offsets[i]:offsets[i+1]``. Offsets must start at
    0, end at the total row count, and be strictly increasing; empty sets are
    rejected. ``condition`` optionally carries one meta-information row per
    set.
    """

    def __init__(self, elements, offsets, condition=None):
        self.elements = np.ascontiguousarray(np.asarray(elements, dtype=np.float64))
        if self.elements.ndim != 2:
            raise ShapeError(f"elements must be (total, D), got {self.elements.shape}")
        off = np.asarray(offsets, dtype=np.int64)
        if off.ndim != 1 or off.size < 2 or off[0] != 0 or off[-1] != self.elements.shape[0]:
            raise ShapeError(f"offsets must span [0, {self.elements.shape[0]}]")
        if np.any(np.diff(off) <= 0):
            raise ShapeError("every set must be non-empty")
        self.offsets = off
        self.condition = None
        if condition is not None:
            cond = np.ascontiguousarray(np.asarray(condition, dtype=np.float64))
            if cond.ndim != 2 or cond.shape[0] != self.num_sets:
                raise ShapeError(f"condition must be (num_sets, D_z), got {cond.shape}")
            self.condition = cond

    @classmethod
    def from_sets(cls, sets, condition=None) -> "SetBatch":
        mats = [np.atleast_2d(np.asarray(s, dtype=np.float64)) for s in sets]
        offsets = np.concatenate([[0], np.cumsum([m.shape[0] for m in mats])])
        return cls(np.concatenate(mats, axis=0), offsets, condition)

    @property
    def num_sets(self) -> int:
        return self.offsets.size - 1

    @property
    def width(self) -> int:
        return self.elements.shape[1]

    def sizes(self) -> np.ndarray:
        return np.diff(self.offsets)

    def set_at(self, i: int) -> np.ndarray:
        return self.elements[self.offsets[i]:self.offsets[i + 1]]

    def permuted(self, rng: np.random.Generator) -> tuple["SetBatch", list[np.ndarray]]:
        """Independently permute the rows of every set; returns the permuted
        batch and the per-set permutations used."""
        perms = []
        parts = []
        for i in range(self.num_sets):
            block = self.set_at(i)
            p = rng.permutation(block.shape[0])
            perms.append(p)
            parts.append(block[p])
        cond = None if self.condition is None else self.condition.copy()
        return SetBatch(np.concatenate(parts, axis=0), self.offsets.copy(), cond), perms


class DenseLayer:
    def __init__(self, W, b, nonlinearity: str = "linear"):
        if nonlinearity not in NONLINEARITIES:
            raise ShapeError(f"unknown nonlinearity {nonlinearity!r}")
        self.W = W if isinstance(W, Tensor) else Tensor(W, is_param=True)
        self.b = b if isinstance(b, Tensor) else Tensor(b, is_param=True)
        if self.W.data.ndim != 2 or self.b.data.shape != (self.W.data.shape[1],):
            raise ShapeError(f"dense layer wants W (in,out) and b (out,), got {self.W.shape} / {self.b.shape}")
        self.nonlinearity = nonlinearity

    @property
    def in_width(self) -> int:
        return self.W.data.shape[0]

    @property
    def out_width(self) -> int:
        return self.W.data.shape[1]

    def forward(self, x: Tensor) -> Tensor:
        return NONLINEARITIES[self.nonlinearity](ad.add(ad.matmul(x, self.W), self.b))

    def params(self) -> list[Tensor]:
        return [self.W, self.b]


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def dense_stack(rng: np.random.Generator, widths, nonlinearity: str, final: str = "linear") -> list[DenseLayer]:
    """Dense layers through consecutive widths; the last uses ``final``."""
    layers = []
    for i in range(len(widths) - 1):
        act = nonlinearity if i < len(widths) - 2 else final
        layers.append(DenseLayer(glorot_uniform(rng, widths[i], widths[i + 1]), np.zeros(widths[i + 1]), act))
    return layers


_POOLS = {"sum": ad.segment_sum, "max": ad.segment_max, "mean": ad.segment_mean}


class InvariantModel:
    """Per-element dense stack, commutative pooling, then a per-set stack."""

    def __init__(self, phi: list[DenseLayer], pool: str, rho: list[DenseLayer], condition_mode: str = "none", condition_width: int = 0):
        if pool not in _POOLS:
            raise ShapeError(f"pool must be one of {sorted(_POOLS)}, got {pool!r}")
        if condition_mode not in ("none", "concat-after-pool"):
            raise ShapeError(f"unknown condition_mode {condition_mode!r}")
        self.phi = list(phi)
        self.pool = pool
        self.rho = list(rho)
        self.condition_mode = condition_mode
        self.condition_width = int(condition_width)
        for a, b in zip(self.phi, self.phi[1:]):
            if a.out_width != b.in_width:
                raise ShapeError(f"phi widths disagree: {a.out_width} -> {b.in_width}")
        for a, b in zip(self.rho, self.rho[1:]):
            if a.out_width != b.in_width:
                raise ShapeError(f"rho widths disagree: {a.out_width} -> {b.in_width}")
        if self.phi and self.rho:
            expected = self.phi[-1].out_width + (self.condition_width if condition_mode != "none" else 0)
            if self.rho[0].in_width != expected:
                raise ShapeError(f"rho input width {self.rho[0].in_width} != pooled width {expected}")

    def forward(self, batch: SetBatch) -> Tensor:
        if self.phi and batch.width != self.phi[0].in_width:
            raise ShapeError(f"element width {batch.width} != phi input {self.phi[0].in_width}")
        if self.condition_mode == "concat-after-pool":
            if batch.condition is None:
                raise ShapeError("model conditions on z but batch has no condition")
            if batch.condition.shape[1] != self.condition_width:
                raise ShapeError(f"condition width {batch.condition.shape[1]} != {self.condition_width}")
        elif batch.condition is not None and self.condition_width:
            raise ShapeError("batch carries a condition the model does not use")

        h = Tensor(batch.elements)
        for layer in self.phi:
            h = layer.forward(h)
        pooled = _POOLS[self.pool](h, batch.offsets)
        if self.condition_mode == "concat-after-pool":
            pooled = ad.concat([pooled, Tensor(batch.condition)], axis=1)
        out = pooled
        for layer in self.rho:
            out = layer.forward(out)
        return out

    def params(self) -> list[Tensor]:
        return [p for layer in self.phi + self.rho for p in layer.params()]

    @property
    def out_width(self) -> int:
        if self.rho:
            return self.rho[-1].out_width
        if self.phi:
            return self.phi[-1].out_width
        return 0


class EquivariantLayer:
    """One permutation-equivariant layer; see the module docstring for the
    three variants. ``pool`` selects the cross-element reduction for the two
    lambda-gamma variants (``maxpool-normalized`` always uses max)."""

    VARIANTS = ("scalar-lambda-gamma", "full-lambda-gamma", "maxpool-normalized")

    def __init__(self, variant: str, *, lam: float | None = None, gam: float | None = None,
                 Lambda=None, Gamma=None, beta=None, pool: str = "max", nonlinearity: str = "tanh"):
        if variant not in self.VARIANTS:
            raise ShapeError(f"unknown variant {variant!r}")
        if nonlinearity not in NONLINEARITIES:
            raise ShapeError(f"unknown nonlinearity {nonlinearity!r}")
        if pool not in ("sum", "max", "mean"):
            raise ShapeError(f"pool must be sum/max/mean, got {pool!r}")
        self.variant = variant
        self.pool = pool
        self.nonlinearity = nonlinearity
        self.lam = None
        self.gam = None
        self.Lambda = None
        self.Gamma = None
        self.beta = None
        if variant == "scalar-lambda-gamma":
            if lam is None or gam is None:
                raise ShapeError("scalar variant needs lam and gam")
            self.lam = float(lam)
            self.gam = float(gam)
        else:
            if Lambda is None:
                raise ShapeError(f"{variant} needs a Lambda matrix")
            self.Lambda = Lambda if isinstance(Lambda, Tensor) else Tensor(Lambda, is_param=True)
            if self.Lambda.data.ndim != 2:
                raise ShapeError("Lambda must be a (D, D') matrix")
            d_out = self.Lambda.data.shape[1]
            self.beta = beta if isinstance(beta, Tensor) else Tensor(np.zeros(d_out) if beta is None else beta, is_param=True)
            if self.beta.data.shape != (d_out,):
                raise ShapeError(f"beta must be ({d_out},)")
            if variant == "full-lambda-gamma":
                if Gamma is None:
                    raise ShapeError("full-lambda-gamma needs a Gamma matrix")
                self.Gamma = Gamma if isinstance(Gamma, Tensor) else Tensor(Gamma, is_param=True)
                if self.Gamma.data.shape != self.Lambda.data.shape:
                    raise ShapeError("Gamma must match Lambda's shape")

    @property
    def in_width(self) -> int | None:
        return None if self.Lambda is None else self.Lambda.data.shape[0]

    @property
    def out_width(self) -> int | None:
        return None if self.Lambda is None else self.Lambda.data.shape[1]

    def theta(self, M: int) -> np.ndarray:
        """Materialize the tied dense matrix for the scalar variant."""
        if self.variant != "scalar-lambda-gamma":
            raise ShapeError("theta is defined for the scalar variant only")
        return build_theta(self.lam, self.gam, M)

    def forward(self, x: Tensor, offsets) -> Tensor:
        """Apply to a flat (total, D) matrix, pooling within each segment."""
        sigma = NONLINEARITIES[self.nonlinearity]
        if self.variant == "scalar-lambda-gamma":
            pooled = _POOLS[self.pool](x, offsets)
            spread = ad.segment_broadcast(pooled, offsets)
            return sigma(ad.add(ad.scalar_scale(x, self.lam), ad.scalar_scale(spread, self.gam)))
        if self.in_width is not None and x.data.shape[1] != self.in_width:
            raise ShapeError(f"element width {x.data.shape[1]} != layer input {self.in_width}")
        if self.variant == "full-lambda-gamma":
            pooled = _POOLS[self.pool](x, offsets)
            spread = ad.segment_broadcast(pooled, offsets)
            pre = ad.add(ad.matmul(x, self.Lambda), ad.scalar_scale(ad.matmul(spread, self.Gamma), -1.0))
            return sigma(ad.add(pre, self.beta))
        # maxpool-normalized
        mx = ad.segment_broadcast(ad.segment_max(x, offsets), offsets)
        centered = ad.add(x, ad.scalar_scale(mx, -1.0))
        return sigma(ad.add(ad.matmul(centered, self.Lambda), self.beta))

    def params(self) -> list[Tensor]:
        out = []
        for t in (self.Lambda, self.Gamma, self.beta):
            if t is not None:
                out.append(t)
        return out


class EquivariantStack:
    """Composition of equivariant layers; equivariant end to end."""

    def __init__(self, layers: list[EquivariantLayer]):
        self.layers = list(layers)

    def forward(self, x: Tensor, offsets) -> Tensor:
        for layer in self.layers:
            x = layer.forward(x, offsets)
        return x

    def forward_batch(self, batch: SetBatch) -> Tensor:
        return self.forward(Tensor(batch.elements), batch.offsets)

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]


def invariant_forward(model: InvariantModel, batch: SetBatch) -> Tensor:
    return model.forward(batch)


def equivariant_forward(layer, x) -> np.ndarray:
    """Apply a layer or stack to one set given as an (M, D) matrix.

    A 1-D input is treated as a column of M scalar elements; the result is
    returned with the same rank.
    """
    arr = np.asarray(x, dtype=np.float64)
    mat = arr.reshape(-1, 1) if arr.ndim == 1 else arr
    out = layer.forward(Tensor(mat), [0, mat.shape[0]]).data
    return out.reshape(-1) if arr.ndim == 1 else out


def build_theta(lam: float, gam: float, M: int) -> np.ndarray:
    """Tied M x M matrix: lam on the diagonal (plus gam), gam elsewhere."""
    if M < 1:
        raise ShapeError(f"M must be >= 1, got {M}")
    return lam * np.eye(M) + gam * np.ones((M, M))


def commutes_with_all_permutations(theta: np.ndarray, tol: float = 1e-12) -> bool:
    """Exhaustively check theta @ P == P @ theta over all M! permutations."""
    theta = np.asarray(theta, dtype=np.float64)
    if theta.ndim != 2 or theta.shape[0] != theta.shape[1]:
        raise ShapeError(f"theta must be square, got {theta.shape}")
    M = theta.shape[0]
    if M > 8:
        raise ShapeError(f"M={M} too large for exhaustive permutation check (max 8)")
    for perm in itertools.permutations(range(M)):
        p = np.asarray(perm)
        inv = np.empty(M, dtype=np.int64)
        inv[p] = np.arange(M)
        # P @ theta permutes rows; theta @ P permutes columns by the inverse
        if np.max(np.abs(theta[p, :] - theta[:, inv])) > tol:
            return False
    return True


def commutant_dimension(M: int) -> int:
    """Dimension of {A : A P == P A for every permutation matrix P}.

    Solved as a nullspace problem over all transpositions (which generate the
    full permutation group): stack the linear constraints A P - P A = 0 and
    count near-zero singular values.
    """
    if not 2 <= M <= 6:
        raise ShapeError(f"commutant_dimension supports 2 <= M <= 6, got {M}")
    rows = []
    eye = np.eye(M)
    for i, j in itertools.combinations(range(M), 2):
        perm = np.arange(M)
        perm[[i, j]] = perm[[j, i]]
        P = eye[perm]
        # column k of the constraint block: vec(E_k P - P E_k)
        block = np.empty((M * M, M * M))
        for k in range(M * M):
            E = np.zeros((M, M))
            E.flat[k] = 1.0
            block[:, k] = (E @ P - P @ E).ravel()
        rows.append(block)
    system = np.concatenate(rows, axis=0)
    svals = np.linalg.svd(system, compute_uv=False)
    return int(np.sum(svals < 1e-10))


# --- random model factories (shared by the property battery and tests) -----


def random_invariant_model(rng: np.random.Generator, in_width: int, out_width: int = 1,
                           with_condition: bool = False, condition_width: int = 0) -> InvariantModel:
    hidden = [int(rng.integers(1, 17)) for _ in range(int(rng.integers(1, 3)))]
    phi_widths = [in_width] + hidden
    act = str(rng.choice(["relu", "tanh", "sigmoid", "elu"]))
    phi = dense_stack(rng, phi_widths, act, final=act)
    pool = str(rng.choice(["sum", "max", "mean"]))
    mode = "concat-after-pool" if with_condition else "none"
    rho_in = phi_widths[-1] + (condition_width if with_condition else 0)
    rho_widths = [rho_in] + [int(rng.integers(1, 17)) for _ in range(int(rng.integers(0, 2)))] + [out_width]
    rho = dense_stack(rng, rho_widths, act)
    # non-zero biases so the models are not accidentally odd/even functions
    for layer in phi + rho:
        layer.b.data[...] = rng.normal(scale=0.1, size=layer.b.data.shape)
    return InvariantModel(phi, pool, rho, condition_mode=mode, condition_width=condition_width if with_condition else 0)


def random_equivariant_stack(rng: np.random.Generator, in_width: int, max_depth: int = 4) -> EquivariantStack:
    depth = int(rng.integers(1, max_depth + 1))
    layers = []
    width = in_width
    for _ in range(depth):
        variant = str(rng.choice(EquivariantLayer.VARIANTS))
        act = str(rng.choice(["tanh", "relu", "sigmoid", "elu", "linear"]))
        if variant == "scalar-lambda-gamma":
            pool = str(rng.choice(["sum", "max", "mean"]))
            layers.append(EquivariantLayer(variant, lam=float(rng.normal()), gam=float(rng.normal()),
                                           pool=pool, nonlinearity=act))
        else:
            out_w = int(rng.integers(1, 9))
            Lambda = rng.normal(scale=0.5, size=(width, out_w))
            beta = rng.normal(scale=0.1, size=out_w)
            if variant == "full-lambda-gamma":
                pool = str(rng.choice(["sum", "max", "mean"]))
                Gamma = rng.normal(scale=0.5, size=(width, out_w))
                layers.append(EquivariantLayer(variant, Lambda=Lambda, Gamma=Gamma, beta=beta,
                                               pool=pool, nonlinearity=act))
            else:
                layers.append(EquivariantLayer(variant, Lambda=Lambda, beta=beta, nonlinearity=act))
            width = out_w
    return EquivariantStack(layers)


# --- JSON serialization -----------------------------------------------------
#
# One JSON document per model: an architecture descriptor plus parameter
# arrays. Floats are emitted with repr semantics, which round-trips binary64
# exactly, so save -> load -> save is byte-identical.


def _dense_to_obj(layer: DenseLayer) -> dict:
    return {"W": layer.W.data.tolist(), "b": layer.b.data.tolist(), "nonlinearity": layer.nonlinearity}


def _dense_from_obj(obj: dict) -> DenseLayer:
    return DenseLayer(np.asarray(obj["W"]), np.asarray(obj["b"]), obj["nonlinearity"])


def _equivariant_layer_to_obj(layer: EquivariantLayer) -> dict:
    obj = {"variant": layer.variant, "pool": layer.pool, "nonlinearity": layer.nonlinearity}
    if layer.variant == "scalar-lambda-gamma":
        obj["lam"] = layer.lam
        obj["gam"] = layer.gam
    else:
        obj["Lambda"] = layer.Lambda.data.tolist()
        obj["beta"] = layer.beta.data.tolist()
        if layer.Gamma is not None:
            obj["Gamma"] = layer.Gamma.data.tolist()
    return obj


def _equivariant_layer_from_obj(obj: dict) -> EquivariantLayer:
    kw = {"pool": obj["pool"], "nonlinearity": obj["nonlinearity"]}
    if obj["variant"] == "scalar-lambda-gamma":
        return EquivariantLayer(obj["variant"], lam=obj["lam"], gam=obj["gam"], **kw)
    return EquivariantLayer(
        obj["variant"],
        Lambda=np.asarray(obj["Lambda"]),
        Gamma=np.asarray(obj["Gamma"]) if "Gamma" in obj else None,
        beta=np.asarray(obj["beta"]),
        **kw,
    )


def model_to_json(model) -> str:
    if isinstance(model, InvariantModel):
        doc = {
            "type": "invariant",
            "pool": model.pool,
            "condition_mode": model.condition_mode,
            "condition_width": model.condition_width,
            "phi": [_dense_to_obj(l) for l in model.phi],
            "rho": [_dense_to_obj(l) for l in model.rho],
        }
    elif isinstance(model, EquivariantStack):
        doc = {"type": "equivariant_stack", "layers": [_equivariant_layer_to_obj(l) for l in model.layers]}
    else:
        raise ShapeError(f"cannot serialize {type(model).__name__}")
    return json.dumps(doc)


def model_from_json(text: str):
    doc = json.loads(text)
    if doc["type"] == "invariant":
        return InvariantModel(
            [_dense_from_obj(o) for o in doc["phi"]],
            doc["pool"],
            [_dense_from_obj(o) for o in doc["rho"]],
            condition_mode=doc["condition_mode"],
            condition_width=doc["condition_width"],
        )
    if doc["type"] == "equivariant_stack":
        return EquivariantStack([_equivariant_layer_from_obj(o) for o in doc["layers"]])
    raise ShapeError(f"unknown model type {doc['type']!r}")
