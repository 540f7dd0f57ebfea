import json

import numpy as np
import pytest

from setnn import autodiff as ad
from setnn.autodiff import Tape, Tensor
from setnn.layers import EquivariantStack, InvariantModel, model_to_json
from setnn.tasks import GaussianTaskSpec, LabeledSetDataset, gen_digit_sum, gen_outlier_sets, gen_population_task
from setnn.train import (
    Adam,
    ConfigError,
    MetricsRecord,
    TrainConfig,
    TrainingDiverged,
    build_model,
    evaluate,
    metrics_to_csv,
    train,
)


def test_config_validation():
    with pytest.raises(ConfigError):
        TrainConfig(task="regression")
    with pytest.raises(ConfigError):
        TrainConfig(task="population", loss="set-softmax-nll")
    with pytest.raises(ConfigError):
        TrainConfig(task="outlier", loss="mse")
    with pytest.raises(ConfigError):
        TrainConfig(task="digit-sum", loss="margin")
    with pytest.raises(ConfigError):
        TrainConfig(task="population", pooled_baseline=True)
    with pytest.raises(ConfigError):
        TrainConfig(task="population", rho_widths=(64, 2))
    with pytest.raises(ConfigError):
        TrainConfig(task="outlier", equivariant_variant="scalar-lambda-gamma")
    with pytest.raises(ConfigError):
        TrainConfig(task="population", batch_size=0)


def test_config_default_loss_and_roundtrip():
    cfg = TrainConfig(task="outlier")
    assert cfg.loss == "set-softmax-nll"
    back = TrainConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
    assert back == cfg
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"task": "population", "momentum": 0.9})
    with pytest.raises(ConfigError):
        TrainConfig.from_dict({"epochs": 3})


def test_adam_first_step_matches_hand_formula():
    p = Tensor(np.array([1.0, -2.0]), is_param=True)
    opt = Adam([p], step_size=0.1)
    g = np.array([0.5, -0.25])
    opt.step([g])
    # first step: m_hat = g, v_hat = g*g, so the update is -0.1 * g/(|g|+eps)
    expected = np.array([1.0, -2.0]) - 0.1 * g / (np.abs(g) + 1e-8)
    np.testing.assert_allclose(p.data, expected, rtol=1e-9)


def test_adam_minimizes_quadratic():
    p = Tensor(np.array([[5.0]]), is_param=True)
    target = Tensor(np.array([[3.0]]))
    opt = Adam([p], step_size=0.1)
    for _ in range(400):
        with Tape() as tape:
            tape.ensure_leaf(p)
            loss = ad.mse_loss(p, target)
        grads = ad.backprop(tape, loss)
        opt.step([grads[p.node_id].data])
    assert p.data[0, 0] == pytest.approx(3.0, abs=1e-4)


def test_build_model_shapes_and_parity():
    rng = np.random.default_rng(0)
    reg = build_model(TrainConfig(task="population"), 2, rng)
    assert isinstance(reg, InvariantModel)
    assert reg.out_width == 1
    assert reg.phi[0].in_width == 2

    sel = build_model(TrainConfig(task="outlier"), 8, rng)
    assert isinstance(sel, EquivariantStack)
    assert len(sel.layers) == 3
    assert [l.nonlinearity for l in sel.layers] == ["tanh", "tanh", "linear"]

    base = build_model(TrainConfig(task="outlier", pooled_baseline=True), 8, rng)
    assert isinstance(base, InvariantModel) and not base.phi
    count = lambda m: sum(p.data.size for p in m.params())
    assert count(base) == count(sel)


def test_pooled_baseline_scores_are_constant_within_a_set():
    from setnn.train import _element_scores

    rng = np.random.default_rng(3)
    base = build_model(TrainConfig(task="outlier", pooled_baseline=True), 4, rng)
    ds = gen_outlier_sets(6, set_size=5, d=4, shift=3.0, seed=1)
    batch = ds.to_set_batch()
    scores = _element_scores(base, batch).data.reshape(-1)
    for i in range(batch.num_sets):
        seg = scores[batch.offsets[i]:batch.offsets[i + 1]]
        assert np.ptp(seg) == 0.0


def test_metrics_csv_format_and_timing():
    recs = [MetricsRecord(1, 0.5, 0.25, 1.234567), MetricsRecord(2, 0.25, 0.125, 2.0)]
    text = metrics_to_csv(recs)
    lines = text.splitlines()
    assert lines[0] == "epoch,train_loss,eval_metric,wall_seconds"
    assert lines[1] == "1,0.5,0.25,0.000"
    assert lines[2] == "2,0.25,0.125,0.000"
    timed = metrics_to_csv(recs, include_timing=True).splitlines()
    assert timed[1].endswith(",1.235")


def test_train_is_deterministic_and_does_not_mutate():
    ds = gen_digit_sum(60, 6, None, seed=4)
    before = [s.copy() for s in ds.sets]
    targets_before = ds.targets.copy()
    cfg = TrainConfig(task="digit-sum", epochs=3, batch_size=16, seed=5)
    m1, r1 = train(cfg, ds)
    m2, r2 = train(cfg, ds)
    assert model_to_json(m1) == model_to_json(m2)
    assert [(r.epoch, r.train_loss, r.eval_metric) for r in r1] == \
           [(r.epoch, r.train_loss, r.eval_metric) for r in r2]
    assert metrics_to_csv(r1) == metrics_to_csv(r2)
    assert all(np.array_equal(a, b) for a, b in zip(before, ds.sets))
    np.testing.assert_array_equal(targets_before, ds.targets)
    assert [r.epoch for r in r1] == [1, 2, 3]


def test_train_rejects_mismatched_dataset():
    ds = gen_outlier_sets(4, set_size=4, d=2, shift=1.0, seed=0)
    with pytest.raises(ConfigError):
        train(TrainConfig(task="digit-sum", epochs=1), ds)


def test_digit_sum_training_drops_loss_tenfold():
    """1000 sets, 50 epochs: final training MSE under 10% of the first epoch's."""
    ds = gen_digit_sum(1000, 10, None, seed=21)
    cfg = TrainConfig(task="digit-sum", epochs=50, batch_size=64, seed=22)
    _, recs = train(cfg, ds)
    assert recs[-1].train_loss < 0.10 * recs[0].train_loss


def test_outlier_without_signal_trains_to_chance():
    ds = gen_outlier_sets(400, set_size=8, d=4, shift=0.0, seed=23)
    cfg = TrainConfig(task="outlier", epochs=5, batch_size=32, seed=24)
    _, recs = train(cfg, ds)
    assert recs[-1].eval_metric == pytest.approx(1.0 / 8.0, abs=0.05)


class _ConstantZero:
    def forward(self, batch):
        return Tensor(np.zeros((batch.num_sets, 1)))

    def params(self):
        return []


class _ExactDigitSum:
    def forward(self, batch):
        values = Tensor(np.arange(10.0).reshape(10, 1))
        return ad.segment_sum(ad.matmul(Tensor(batch.elements), values), batch.offsets)

    def params(self):
        return []


def test_evaluate_constant_zero_population():
    ds = gen_population_task(GaussianTaskSpec(kind="rank1", num_sets=6, seed=2, d=4, set_size_range=(5, 9)))
    rec = evaluate(_ConstantZero(), ds, "population")
    assert rec.eval_metric == pytest.approx(float(np.mean(ds.targets ** 2)), rel=1e-12)


def test_evaluate_perfect_digit_sum_stub():
    ds = gen_digit_sum(40, 8, None, seed=6)
    assert evaluate(_ExactDigitSum(), ds, "digit-sum").eval_metric == 1.0


def _permuted_copy(ds, seed=0):
    rng = np.random.default_rng(seed)
    sets = []
    targets = ds.targets.copy()
    for i, s in enumerate(ds.sets):
        perm = rng.permutation(s.shape[0])
        sets.append(s[perm])
        if ds.meta.get("target_kind") == "index":
            targets[i] = int(np.where(perm == ds.targets[i])[0][0])
    return LabeledSetDataset(sets, targets, dict(ds.meta), ds.per_set_meta)


def test_evaluation_is_permutation_stable():
    rng = np.random.default_rng(9)
    pop = gen_population_task(GaussianTaskSpec(kind="rotation", num_sets=20, seed=31, set_size_range=(20, 40)))
    model = build_model(TrainConfig(task="population"), pop.element_dim, rng)
    a = evaluate(model, pop, "population").eval_metric
    b = evaluate(model, _permuted_copy(pop), "population").eval_metric
    assert abs(a - b) <= 1e-6

    dig = gen_digit_sum(30, 8, None, seed=32)
    dmodel = build_model(TrainConfig(task="digit-sum"), 10, rng)
    a = evaluate(dmodel, dig, "digit-sum").eval_metric
    b = evaluate(dmodel, _permuted_copy(dig), "digit-sum").eval_metric
    assert abs(a - b) <= 1e-6

    out = gen_outlier_sets(40, set_size=6, d=3, shift=3.0, seed=33)
    omodel = build_model(TrainConfig(task="outlier"), 3, rng)
    a = evaluate(omodel, out, "outlier").eval_metric
    b = evaluate(omodel, _permuted_copy(out), "outlier").eval_metric
    assert a == b


def test_divergence_reports_location_and_norms():
    ds = gen_digit_sum(64, 6, None, seed=41)
    cfg = TrainConfig(task="digit-sum", epochs=1, batch_size=16, seed=42, step_size=1e90)
    with np.errstate(over="ignore"), pytest.raises(TrainingDiverged) as info:
        train(cfg, ds)
    err = info.value
    assert err.epoch == 1 and err.batch_index >= 1
    assert len(err.param_norms) > 0 and all(np.isfinite(err.param_norms))
    assert "epoch 1" in str(err)


def test_evaluate_chunking_matches_single_batch():
    from setnn.train import _predictions

    ds = gen_digit_sum(300, 5, None, seed=51)
    model = build_model(TrainConfig(task="digit-sum"), 10, np.random.default_rng(1))
    chunked = _predictions(model, ds)
    whole = model.forward(ds.to_set_batch()).data.reshape(-1)
    np.testing.assert_allclose(chunked, whole, rtol=0, atol=1e-12)
