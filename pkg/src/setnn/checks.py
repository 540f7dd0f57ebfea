"""Self-contained property battery behind the ``check`` CLI subcommand.

Five suites, one per structural guarantee the library makes:

* invariance: random pooled models are unchanged by element permutations;
* equivariance: random equivariant stacks commute with permutations, and
  the commutant of the permutation group is exactly two dimensional;
* gradients: every autodiff primitive and both default architectures agree
  with central finite differences;
* powersum-roundtrip: the sum-of-powers embedding inverts, the countable
  encoding is injective, and the closed-form models match direct references;
* bayes-oracle: both scoring routes of the Beta-Binomial model agree.

Each suite runs on its own deterministic generator derived from the battery
seed, returns a CheckResult rather than raising, and is independent of the
others, so callers may run any subset in any order.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from setnn import autodiff as ad
from setnn.autodiff import Tensor, grad_check
from setnn import bayes
from setnn.bayes import BetaBinomialModel
from setnn.layers import (
    SetBatch,
    commutant_dimension,
    random_equivariant_stack,
    random_invariant_model,
)
from setnn.powersum import (
    SortedSample,
    closed_form_eval,
    closed_form_reference,
    countable_encode,
    embed,
    invert,
)
from setnn.train import TrainConfig, build_model

__all__ = ["CheckResult", "run_all", "summary_table", "SUITES",
           "check_invariance", "check_equivariance", "check_gradients",
           "check_powersum", "check_bayes"]


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str
    seconds: float


def _result(name: str, started: float, failures: list[str], detail: str) -> CheckResult:
    if failures:
        detail = f"{len(failures)} failure(s); first: {failures[0]}"
    return CheckResult(name, not failures, detail, time.perf_counter() - started)


def _max_rel(a: np.ndarray, b: np.ndarray) -> float:
    scale = np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))
    return float(np.max(np.abs(a - b) / scale)) if a.size else 0.0


def check_invariance(seed: int = 0, trials: int = 100) -> CheckResult:
    """Random pooled models on random sets: permuting every set leaves the
    outputs unchanged within 1e-6 relative."""
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 10]))
    failures = []
    worst = 0.0
    for t in range(trials):
        in_width = int(rng.integers(1, 9))
        with_condition = bool(rng.integers(0, 2))
        cond_width = int(rng.integers(1, 4)) if with_condition else 0
        model = random_invariant_model(rng, in_width, out_width=int(rng.integers(1, 4)),
                                       with_condition=with_condition, condition_width=cond_width)
        sizes = rng.integers(1, 51, size=3)
        sets = [rng.normal(size=(m, in_width)) for m in sizes]
        cond = rng.normal(size=(3, cond_width)) if with_condition else None
        batch = SetBatch.from_sets(sets, condition=cond)
        shuffled, _ = batch.permuted(rng)
        err = _max_rel(model.forward(batch).data, model.forward(shuffled).data)
        worst = max(worst, err)
        if err > 1e-6:
            failures.append(f"trial {t}: relative deviation {err:.3e} > 1e-6")
    return _result("invariance", started, failures,
                   f"{trials} random models within 1e-6 (worst {worst:.2e})")


def _stack_tolerance(stack) -> float:
    loose = any(l.pool in ("sum", "mean") and l.variant != "maxpool-normalized"
                for l in stack.layers)
    return 1e-9 if loose else 1e-12


def check_equivariance(seed: int = 0, trials: int = 100) -> CheckResult:
    """Random equivariant stacks: forward of a permuted set equals the
    permuted forward; the permutation commutant has dimension 2."""
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 11]))
    failures = []
    for t in range(trials):
        in_width = int(rng.integers(1, 7))
        stack = random_equivariant_stack(rng, in_width)
        m = int(rng.integers(1, 13))
        x = rng.normal(size=(m, in_width))
        perm = rng.permutation(m)
        direct = stack.forward(Tensor(x[perm]), [0, m]).data
        routed = stack.forward(Tensor(x), [0, m]).data[perm]
        tol = _stack_tolerance(stack)
        err = float(np.max(np.abs(direct - routed))) if direct.size else 0.0
        bound = tol * max(1.0, float(np.max(np.abs(routed))) if routed.size else 1.0)
        if err > bound:
            failures.append(f"trial {t}: deviation {err:.3e} > {bound:.1e}")
    for m in range(2, 7):
        dim = commutant_dimension(m)
        if dim != 2:
            failures.append(f"commutant dimension at M={m} is {dim}, want 2")
    return _result("equivariance", started, failures,
                   f"{trials} random stacks commute; commutant dimension 2 for M in 2..6")


def _separated(rng: np.random.Generator, shape, gap: float = 0.1) -> np.ndarray:
    """Values whose pairwise column distances exceed ``gap`` so max-style
    primitives keep a stable argmax under finite-difference steps."""
    flat = np.arange(int(np.prod(shape)), dtype=np.float64)
    rng.shuffle(flat)
    return (flat * gap + rng.uniform(0, gap / 4)).reshape(shape)


def _scalarize(t: Tensor) -> Tensor:
    out = ad.tanh(ad.scalar_scale(t, 0.3))
    while out.data.ndim > 0:
        out = ad.reduce_sum(out, 0)
    return out


def _gradient_cases(rng: np.random.Generator):
    """(name, f, params, smooth) per primitive; f closes over fixed data."""
    off = (0, 2, 5, 9)
    p = lambda shape, scale=1.0: Tensor(rng.normal(scale=scale, size=shape), is_param=True)
    cases = []

    def case(name, params, fn, smooth=True):
        cases.append((name, lambda ps, fn=fn: _scalarize(fn(*ps)), list(params), smooth))

    case("matmul", (p((3, 4)), p((4, 2))), ad.matmul)
    case("add-bias", (p((3, 4)), p((4,))), ad.add)
    case("add-full", (p((3, 4)), p((3, 4))), ad.add)
    case("scalar_scale", (p((3, 4)),), lambda x: ad.scalar_scale(x, -1.7))
    case("relu", (Tensor(_separated(rng, (3, 4)) - 0.6, is_param=True),), ad.relu, smooth=False)
    case("tanh", (p((3, 4)),), ad.tanh)
    case("sigmoid", (p((3, 4)),), ad.sigmoid)
    case("elu", (Tensor(_separated(rng, (3, 4)) - 0.6, is_param=True),), ad.elu, smooth=False)
    case("reduce_sum", (p((4, 3)),), lambda x: ad.reduce_sum(x, 0))
    case("reduce_mean", (p((4, 3)),), lambda x: ad.reduce_mean(x, 1))
    case("reduce_max", (Tensor(_separated(rng, (4, 3)), is_param=True),),
         lambda x: ad.reduce_max(x, 0), smooth=False)
    case("softmax", (p((3, 5)),), lambda x: ad.softmax(x, 1))
    case("concat", (p((3, 2)), p((3, 3)), p((3, 1))), lambda *xs: ad.concat(xs, 1))
    case("mse_loss", (p((5, 1)), p((5, 1))), ad.mse_loss)
    case("hinge_margin_loss", (Tensor(np.array([0.9, 0.1, 0.7]), is_param=True),
                               Tensor(np.array([0.2, 0.5, -0.4]), is_param=True)),
         lambda a, b: ad.hinge_margin_loss(a, b, 0.25), smooth=False)
    case("set_softmax_nll", (p((9, 1)),),
         lambda x: ad.set_softmax_nll(x, off, (1, 0, 3)))
    case("segment_sum", (p((9, 3)),), lambda x: ad.segment_sum(x, off))
    case("segment_mean", (p((9, 3)),), lambda x: ad.segment_mean(x, off))
    case("segment_max", (Tensor(_separated(rng, (9, 3)), is_param=True),),
         lambda x: ad.segment_max(x, off), smooth=False)
    case("segment_broadcast", (p((3, 4)),),
         lambda x: ad.segment_broadcast(x, (0, 2, 5, 9)))
    return cases


def check_gradients(seed: int = 0) -> CheckResult:
    """Finite-difference checks of all primitives (1e-6 smooth / 1e-4 kinked)
    and of both default architectures through their losses (1e-4)."""
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 12]))
    failures = []
    for name, f, params, smooth in _gradient_cases(rng):
        tol = 1e-6 if smooth else 1e-4
        err = grad_check(f, params, seed=seed)
        if err > tol:
            failures.append(f"{name}: relative error {err:.3e} > {tol:.0e}")

    reg = build_model(TrainConfig(task="population"), 3, rng)
    sizes = [4, 2, 6, 3]
    batch = SetBatch.from_sets([rng.normal(size=(m, 3)) for m in sizes])
    targets = Tensor(rng.normal(size=(4, 1)))
    # step 1e-6: at 1e-5 the difference quotient can straddle a relu kink
    err = grad_check(lambda ps: ad.mse_loss(reg.forward(batch), targets), reg.params(),
                     step=1e-6, seed=seed)
    if err > 1e-4:
        failures.append(f"regression architecture: relative error {err:.3e} > 1e-4")

    sel = build_model(TrainConfig(task="outlier"), 5, rng)
    sbatch = SetBatch.from_sets([rng.normal(size=(m, 5)) for m in (4, 6, 5)])
    stargets = (2, 0, 4)
    err = grad_check(lambda ps: ad.set_softmax_nll(sel.forward_batch(sbatch), sbatch.offsets, stargets),
                     sel.params(), step=1e-6, seed=seed)
    if err > 1e-4:
        failures.append(f"selection architecture: relative error {err:.3e} > 1e-4")
    return _result("gradients", started, failures,
                   "all primitives and both default architectures pass finite differences")


def _gapped_sample(rng: np.random.Generator, m: int, min_gap: float = 1e-3) -> SortedSample:
    while True:
        vals = np.sort(rng.uniform(0.0, 1.0, size=m))
        if m == 1 or np.min(np.diff(vals)) >= min_gap:
            return SortedSample(vals)


def check_powersum(seed: int = 0, trials: int = 200) -> CheckResult:
    """Embedding roundtrip at 1e-6, injective countable encoding over all
    subsets of a 12-element universe, closed forms against references."""
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 13]))
    failures = []
    worst = 0.0
    for t in range(trials):
        m = int(rng.integers(2, 9))
        sample = _gapped_sample(rng, m)
        err = float(np.max(np.abs(invert(embed(sample)).values - sample.values)))
        worst = max(worst, err)
        if err > 1e-6:
            failures.append(f"roundtrip trial {t} (M={m}): error {err:.3e} > 1e-6")

    universe = {i: i for i in range(12)}
    codes = {}
    for mask in range(4096):
        items = [i for i in range(12) if mask >> i & 1]
        z = countable_encode(items, universe)
        if z in codes:
            failures.append(f"countable encoding collides: {codes[z]:#x} vs {mask:#x}")
            break
        codes[z] = mask

    for t in range(50):
        for name, m in (("mean", int(rng.integers(1, 9))), ("poly_x1x2", 2), ("poly_sym3", 3)):
            vals = _gapped_sample(rng, m).values
            got = closed_form_eval(name, vals)
            want = closed_form_reference(name, vals)
            if abs(got - want) > 1e-9 * max(1.0, abs(want)):
                failures.append(f"{name} trial {t}: {got!r} vs reference {want!r}")
        vals = _gapped_sample(rng, int(rng.integers(2, 9))).values
        errs = [abs(closed_form_eval("max_smooth", vals, alpha=a) - vals[-1])
                for a in (10.0, 50.0, 200.0)]
        if not errs[0] >= errs[1] >= errs[2]:
            failures.append(f"smooth max error not decreasing: {errs}")
    return _result("powersum-roundtrip", started, failures,
                   f"{trials} roundtrips within 1e-6 (worst {worst:.2e}); "
                   "4096 subset encodings distinct; closed forms match references")


def check_bayes(seed: int = 0, trials: int = 1000) -> CheckResult:
    """Count-form scores equal their log-Gamma forms on random triples."""
    started = time.perf_counter()
    rng = np.random.default_rng(np.random.SeedSequence([seed, 14]))
    failures = []
    for t in range(trials):
        d = int(rng.integers(1, 7))
        model = BetaBinomialModel(rng.uniform(0.1, 5.0, size=d), rng.uniform(0.1, 5.0, size=d))
        X = rng.integers(0, 2, size=(int(rng.integers(1, 7)), d)).astype(np.float64)
        x = rng.integers(0, 2, size=d).astype(np.float64)
        a = bayes.score_item(model, X, x)
        b = bayes.score_item_oracle(model, X, x)
        if abs(a - b) > 1e-9 * max(1.0, abs(b)):
            failures.append(f"score_item trial {t}: {a!r} vs {b!r}")
        s = bayes.score_set(model, X)
        st = bayes.score_set_telescoped(model, X)
        if abs(s - st) > 1e-9 * max(1.0, abs(st)):
            failures.append(f"score_set trial {t}: {s!r} vs {st!r}")
    return _result("bayes-oracle", started, failures,
                   f"{trials} random triples: both scoring routes agree within 1e-9")


SUITES = {
    "invariance": check_invariance,
    "equivariance": check_equivariance,
    "gradients": check_gradients,
    "powersum-roundtrip": check_powersum,
    "bayes-oracle": check_bayes,
}


def run_all(seed: int = 0) -> list[CheckResult]:
    return [fn(seed) for fn in SUITES.values()]


def summary_table(results: list[CheckResult]) -> str:
    width = max(len(r.name) for r in results)
    lines = []
    for r in results:
        mark = "PASS" if r.passed else "FAIL"
        lines.append(f"{mark}  {r.name:<{width}}  {r.seconds:7.2f}s  {r.detail}")
    return "\n".join(lines)
