"""Sum-of-powers set embeddings, their inversion, and exact worked examples.

A sorted sample ``x_1 <= ... <= x_M`` in [0,1] is embedded as the vector of
power sums ``Z_q = sum_m x_m^q`` for ``q = 0..M``. The embedding is invertible:
Newton-Girard recurrences turn power sums into elementary symmetric
polynomials, i.e. the coefficients of the monic polynomial whose roots are the
sample, and a simultaneous root iteration recovers the sample itself. This
gives a constructive sum-decomposition of any continuous symmetric function of
a fixed-size set, checked here by round-trip rather than assumed.

`countable_encode` is the companion construction for finite universes: each
subset maps to a distinct base-4 fraction, exactly representable in float64
for small code values.

`closed_form_eval` evaluates a handful of symmetric functions written
explicitly in the sum-decomposed form (mean, smooth max, smooth second
largest, and two polynomial identities) so they can be compared against direct
computation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

__all__ = [
    "PowerSumError",
    "RootConvergenceError",
    "SortedSample",
    "PowerSumVector",
    "countable_encode",
    "power_sums",
    "embed",
    "newton_girard",
    "poly_roots",
    "invert",
    "closed_form_eval",
    "closed_form_reference",
    "rescale_to_unit",
    "rescale_from_unit",
    "MAX_SET_SIZE",
]

# Beyond this size the power-sum system is too ill-conditioned for float64
# round-trips, so the cap is part of the contract rather than a soft limit.
MAX_SET_SIZE = 16

# Largest code value for which sums of distinct 4**-c are exact in binary64:
# the bits live at positions 0..2c of the significand, and 2*26 == 52.
_MAX_CODE = 26
_MAX_UNIVERSE = 20

_CLIP_SLACK = 1e-9  # roots may land this far outside [0,1] from rounding


class PowerSumError(ValueError):
    pass


class RootConvergenceError(PowerSumError):
    pass


@dataclass(frozen=True)
class SortedSample:
    """Non-decreasing values in [0,1]."""

    values: np.ndarray

    def __init__(self, values):
        arr = np.asarray(values, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 1:
            raise PowerSumError(f"sample must be a non-empty vector, got shape {arr.shape}")
        if np.any(np.diff(arr) < 0):
            raise PowerSumError("sample must be sorted non-decreasing")
        if arr[0] < 0.0 or arr[-1] > 1.0:
            raise PowerSumError(f"sample must lie in [0,1], got range [{arr[0]}, {arr[-1]}]")
        object.__setattr__(self, "values", np.ascontiguousarray(arr))

    @classmethod
    def from_values(cls, values) -> "SortedSample":
        return cls(np.sort(np.asarray(values, dtype=np.float64)))

    @property
    def M(self) -> int:
        return self.values.size


@dataclass(frozen=True)
class PowerSumVector:
    """Z[q] = sum of q-th powers, q = 0..M; Z[0] is the set size exactly."""

    Z: np.ndarray

    def __init__(self, Z):
        arr = np.asarray(Z, dtype=np.float64)
        if arr.ndim != 1 or arr.size < 2:
            raise PowerSumError(f"need Z_0..Z_M with M >= 1, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise PowerSumError("power sums must be finite")
        if arr[0] != round(arr[0]) or arr[0] < 1:
            raise PowerSumError(f"Z_0 must be a positive integer set size, got {arr[0]}")
        if arr[0] != arr.size - 1:
            raise PowerSumError(f"Z_0 = {arr[0]} inconsistent with {arr.size - 1} moments")
        object.__setattr__(self, "Z", np.ascontiguousarray(arr))

    @property
    def M(self) -> int:
        return int(self.Z[0])


def countable_encode(items, code: dict) -> float:
    """Sum of 4**-code[x] over the distinct items: a subset-injective real.

    The code map must be injective with values in 0..26 over a universe of at
    most 20 elements; under those bounds every subset gets a distinct,
    exactly-representable float64 value.
    """
    if len(code) > _MAX_UNIVERSE:
        raise PowerSumError(f"universe size {len(code)} exceeds {_MAX_UNIVERSE}")
    seen = set()
    for key, c in code.items():
        if not isinstance(c, (int, np.integer)) or c < 0 or c > _MAX_CODE:
            raise PowerSumError(f"code for {key!r} must be an integer in 0..{_MAX_CODE}, got {c!r}")
        if c in seen:
            raise PowerSumError(f"code map is not injective: value {c} repeats")
        seen.add(c)
    total = 0.0
    for x in set(items):
        if x not in code:
            raise PowerSumError(f"item {x!r} is not in the universe")
        total += 4.0 ** -int(code[x])
    return total


def power_sums(values) -> PowerSumVector:
    """Power sums Z_0..Z_M of arbitrary real values (sorted first, so the
    result is exactly permutation-invariant)."""
    v = np.sort(np.asarray(values, dtype=np.float64))
    if v.ndim != 1 or v.size < 1:
        raise PowerSumError("values must be a non-empty vector")
    M = v.size
    Z = np.empty(M + 1)
    Z[0] = M
    powers = np.ones_like(v)
    for q in range(1, M + 1):
        powers = powers * v
        Z[q] = powers.sum()
    return PowerSumVector(Z)


def embed(sample) -> PowerSumVector:
    """Embed a [0,1] sample as its power-sum vector."""
    if not isinstance(sample, SortedSample):
        sample = SortedSample.from_values(sample)
    return power_sums(sample.values)


def newton_girard(Z: PowerSumVector) -> np.ndarray:
    """Elementary symmetric polynomials e_1..e_M from power sums.

    Uses the recurrence k*e_k = sum_{i=1..k} (-1)**(i-1) * e_{k-i} * p_i,
    which is O(M^2) and numerically tame for the sizes allowed here.
    """
    if not isinstance(Z, PowerSumVector):
        Z = PowerSumVector(Z)
    M = Z.M
    p = Z.Z  # p[i] = Z_i; p[0] unused by the recurrence
    e = np.zeros(M + 1)
    e[0] = 1.0
    for k in range(1, M + 1):
        acc = 0.0
        sign = 1.0
        for i in range(1, k + 1):
            acc += sign * e[k - i] * p[i]
            sign = -sign
        e[k] = acc / k
    return e[1:]


def _poly_coeffs(e: np.ndarray) -> np.ndarray:
    """Monic coefficients [1, c_1, .., c_M] of prod(x - x_m): c_k = (-1)^k e_k."""
    M = e.size
    coeffs = np.empty(M + 1)
    coeffs[0] = 1.0
    signs = np.where(np.arange(1, M + 1) % 2 == 1, -1.0, 1.0)
    coeffs[1:] = signs * e
    return coeffs


def _horner(coeffs: np.ndarray, z: complex) -> tuple[complex, complex]:
    """Evaluate p(z) and p'(z) by a joint Horner pass."""
    p = complex(coeffs[0])
    dp = 0.0 + 0.0j
    for c in coeffs[1:]:
        dp = dp * z + p
        p = p * z + c
    return p, dp


def poly_roots(e, max_iters: int = 200, tol: float = 1e-13) -> np.ndarray:
    """All real roots of the monic polynomial with elementary symmetric
    coefficients e, sorted ascending, multiplicities preserved.

    Simultaneous (Aberth-Ehrlich) iteration in complex arithmetic, started on
    a circle that encloses [0,1] and, via the Cauchy bound, every root. Stops
    when every correction is below ``tol`` or every residual sits at the
    float64 noise floor (which is where clustered roots end up). Residual
    imaginary parts above 1e-8 are an error; smaller ones are discarded.
    """
    e = np.asarray(e, dtype=np.float64)
    if e.ndim != 1 or e.size < 1:
        raise PowerSumError("need at least e_1")
    M = e.size
    if M > MAX_SET_SIZE:
        raise PowerSumError(f"degree {M} exceeds the supported maximum {MAX_SET_SIZE}")
    if not np.all(np.isfinite(e)):
        raise PowerSumError("coefficients must be finite")
    if M == 1:
        roots = np.array([e[0] + 0.0j])
    else:
        coeffs = _poly_coeffs(e)
        noise_floor = 100.0 * np.finfo(np.float64).eps * max(1.0, np.abs(coeffs).max())
        radius = max(0.75, 1.5 + np.abs(coeffs[1:]).max())
        angles = 2.0 * np.pi * (np.arange(M) + 0.25) / M
        roots = 0.5 + radius * np.exp(1j * angles)
        converged = False
        for _ in range(max_iters):
            max_step = 0.0
            max_residual = 0.0
            for i in range(M):
                p, dp = _horner(coeffs, roots[i])
                max_residual = max(max_residual, abs(p))
                if p == 0:
                    continue
                if dp == 0:
                    roots[i] += 1e-3 + 1e-3j
                    max_step = max(max_step, 1e-3)
                    continue
                newton = p / dp
                repulsion = np.sum(1.0 / (roots[i] - np.delete(roots, i)))
                w = newton / (1.0 - newton * repulsion)
                roots[i] -= w
                max_step = max(max_step, abs(w))
            if max_step < tol or max_residual <= noise_floor:
                converged = True
                break
        if not converged:
            raise RootConvergenceError(f"root iteration did not converge in {max_iters} iterations")
        # Clustered real roots stall at the evaluation noise floor with small
        # spurious imaginary parts. Projecting onto the real axis is accepted
        # whenever it does not worsen the residual; genuinely complex roots
        # fail this test and are reported below.
        for i in range(M):
            if roots[i].imag != 0.0 and abs(roots[i].imag) <= 1e-6:
                p_here, _ = _horner(coeffs, roots[i])
                p_real, _ = _horner(coeffs, complex(roots[i].real))
                if abs(p_real) <= max(abs(p_here), noise_floor):
                    roots[i] = complex(roots[i].real)
    if np.max(np.abs(roots.imag)) > 1e-8:
        raise RootConvergenceError(f"complex residual {np.max(np.abs(roots.imag)):.3e} above tolerance")
    return np.sort(roots.real)


def invert(Z: PowerSumVector) -> SortedSample:
    """Recover the sorted [0,1] sample whose power sums are Z.

    Roots may land a hair outside [0,1] from rounding; anything within a 1e-9
    slack is clipped back, anything further out is an error (Z was not the
    embedding of a valid sample).
    """
    roots = poly_roots(newton_girard(Z))
    if roots[0] < -_CLIP_SLACK or roots[-1] > 1.0 + _CLIP_SLACK:
        raise PowerSumError(f"recovered roots [{roots[0]}, {roots[-1]}] fall outside [0,1]")
    return SortedSample(np.clip(roots, 0.0, 1.0))


def rescale_to_unit(values, lo: float, hi: float) -> np.ndarray:
    """Affine map of values from [lo, hi] onto [0,1]."""
    if not hi > lo:
        raise PowerSumError(f"need hi > lo, got [{lo}, {hi}]")
    v = np.asarray(values, dtype=np.float64)
    if np.any(v < lo) or np.any(v > hi):
        raise PowerSumError(f"values exceed the declared bounds [{lo}, {hi}]")
    return (v - lo) / (hi - lo)


def rescale_from_unit(values, lo: float, hi: float) -> np.ndarray:
    if not hi > lo:
        raise PowerSumError(f"need hi > lo, got [{lo}, {hi}]")
    v = np.asarray(values, dtype=np.float64)
    return lo + v * (hi - lo)


# --- worked closed forms ------------------------------------------------------

_MAX_ALPHA = 700.0


def _smooth_sums(x: np.ndarray, alpha: float) -> tuple[float, float]:
    """Sums of e^(a x) and x e^(a x), both scaled by e^(-a max(x)).

    The scaling cancels in every ratio the closed forms take and keeps all
    intermediates in range for any alpha.
    """
    ex = np.exp(alpha * (x - x.max()))
    return float(ex.sum()), float((x * ex).sum())


def closed_form_eval(name: str, X, alpha: float | None = None) -> float:
    """Evaluate one of the explicit sum-decomposed symmetric functions.

    ``mean``                  phi = [1, x],            rho = v/u
    ``max_smooth``            phi = [e^ax, x e^ax],    rho = v/u
    ``second_largest_smooth`` phi = [e^ax, x e^ax],    rho = (v - (v/u) e^(a v/u)) / (u - e^(a v/u))
    ``poly_x1x2``   (M=2)     phi = [x, x^2, x^3],     rho = uv - w + 3(u^2 - v)/2
    ``poly_sym3``   (M=3)     phi = [x, x^2, x^3],     rho = (u^3 + 2w - 3uv)/6 + u

    The smooth variants need ``alpha``. ``max_smooth`` converges to the true
    max from below as alpha grows (error bounded by log(M)/alpha). The
    second-largest form peels off the smoothed max ``v/u`` rather than the
    exact max; the leftover fraction of the top element grows like
    alpha * gap * e^(-alpha*gap), which eventually dominates, so the
    expression approximates the second largest only at moderate alpha (best
    when the top-two gap is small) and reverts to the max as alpha -> inf.
    This is a property of the formula itself, reproduced here deliberately;
    the tests pin both behaviors.
    """
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    if x.size < 1:
        raise PowerSumError("X must be non-empty")
    if name == "mean":
        return float(x.sum() / x.size)
    if name in ("max_smooth", "second_largest_smooth"):
        if alpha is None:
            raise PowerSumError(f"{name} requires alpha")
        if not 0.0 < alpha <= _MAX_ALPHA:
            raise PowerSumError(f"alpha must lie in (0, {_MAX_ALPHA}], got {alpha}")
        u, v = _smooth_sums(x, float(alpha))
        if name == "max_smooth":
            return v / u
        if x.size < 2:
            raise PowerSumError("second_largest_smooth needs at least two elements")
        m1 = v / u  # smooth estimate of the largest element
        peel = np.exp(alpha * (m1 - float(x.max())))  # e^(a m1), same scaling as u, v
        den = u - peel
        num = v - m1 * peel
        if not np.isfinite(den) or den <= 0.0:
            raise PowerSumError(
                "alpha too large to resolve the second largest in float64 for this sample"
            )
        return num / den
    if name == "poly_x1x2":
        if x.size != 2:
            raise PowerSumError("poly_x1x2 is defined for exactly two elements")
        u, v, w = (x.sum(), (x**2).sum(), (x**3).sum())
        return float(u * v - w + 1.5 * (u * u - v))
    if name == "poly_sym3":
        if x.size != 3:
            raise PowerSumError("poly_sym3 is defined for exactly three elements")
        u, v, w = (x.sum(), (x**2).sum(), (x**3).sum())
        return float((u**3 + 2.0 * w - 3.0 * u * v) / 6.0 + u)
    raise PowerSumError(f"unknown closed form {name!r}")


def closed_form_reference(name: str, X, alpha: float | None = None) -> float:
    """The target each closed form is meant to compute, evaluated directly."""
    x = np.asarray(X, dtype=np.float64).reshape(-1)
    if name == "mean":
        return float(x.mean())
    if name == "max_smooth":
        return float(x.max())
    if name == "second_largest_smooth":
        if x.size < 2:
            raise PowerSumError("second largest needs at least two elements")
        return float(np.sort(x)[-2])
    if name == "poly_x1x2":
        x1, x2 = x
        return float(x1 * x2 * (x1 + x2 + 3.0))
    if name == "poly_sym3":
        x1, x2, x3 = x
        return float(x1 * x2 * x3 + x1 + x2 + x3)
    raise PowerSumError(f"unknown closed form {name!r}")
