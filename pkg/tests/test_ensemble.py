import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from quantdg import data, ensemble, nn
from quantdg.quant import QuantSpec
from quantdg.tensor import ContractError
from quantdg.trainer import TrainConfig


def _const(logits):
    """Model whose output is ``logits`` for every input."""
    c = len(logits)
    return nn.Model(
        spec=nn.MlpSpec(input_dim=2, hidden_dims=(1,), num_classes=c),
        weights=[np.ones((1, 2)), np.zeros((c, 1))],
        biases=[np.zeros(1), np.asarray(logits, dtype=np.float64)],
    )


def _random_member(seed, c=4):
    return nn.init_model(nn.MlpSpec(input_dim=3, hidden_dims=(5,), num_classes=c, seed=seed))


def test_identical_members_equal_single():
    m = _random_member(0)
    x = np.random.default_rng(0).normal(size=(20, 3))
    cls1, p1 = ensemble.predict_eoq([m], x)
    cls3, p3 = ensemble.predict_eoq([m, m.copy(), m.copy()], x)
    np.testing.assert_array_equal(cls1, cls3)
    np.testing.assert_allclose(p1, p3, atol=1e-15)


def test_tie_goes_to_lowest_class():
    cls, p = ensemble.predict_eoq([_const([2.0, 0.0]), _const([0.0, 2.0])], np.zeros((1, 2)))
    assert cls[0] == 0
    np.testing.assert_allclose(p[0], [0.5, 0.5])


def test_three_members_by_hand():
    members = [_const([1.0, 0.0, -1.0]), _const([0.0, 3.0, 0.0]), _const([2.0, 0.0, 2.5])]
    # averages: [1, 1, 0.5]; tie between 0 and 1 -> 0
    cls, p = ensemble.predict_eoq(members, np.zeros((1, 2)))
    assert cls[0] == 0
    e = np.exp([1.0, 1.0, 0.5])
    np.testing.assert_allclose(p[0], e / e.sum(), rtol=1e-14)
    members[2] = _const([2.0, 0.3, 2.5])  # averages [1, 1.1, 0.5]
    assert ensemble.predict_eoq(members, np.zeros((1, 2)))[0][0] == 1


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 6), st.integers(0, 10_000))
def test_argmax_of_mean_logits_and_normalization(n_members, seed):
    members = [_random_member(seed + k) for k in range(n_members)]
    x = np.random.default_rng(seed).normal(size=(15, 3))
    cls, p = ensemble.predict_eoq(members, x)
    mean_logits = sum(nn.forward(m, x).data for m in members) / n_members
    np.testing.assert_array_equal(cls, mean_logits.argmax(axis=1))
    assert np.abs(p.sum(axis=1) - 1).max() <= 1e-12

    shift = np.random.default_rng(seed + 1).normal(size=4) * 10
    shifted = [m.copy() for m in members]
    for m in shifted:
        m.biases[-1] = m.biases[-1] + shift
    np.testing.assert_array_equal(ensemble.predict_eoq(shifted, x)[0], (mean_logits + shift).argmax(axis=1))


def test_constant_shift_keeps_class():
    members = [_random_member(k) for k in range(3)]
    x = np.random.default_rng(1).normal(size=(30, 3))
    base = ensemble.predict_eoq(members, x)[0]
    for m in members:
        m.biases[-1] = m.biases[-1] + 7.25
    np.testing.assert_array_equal(ensemble.predict_eoq(members, x)[0], base)


def test_predict_contracts():
    with pytest.raises(ContractError):
        ensemble.predict_eoq([], np.zeros((1, 3)))
    with pytest.raises(ContractError):
        ensemble.predict_eoq([_random_member(0, c=3), _random_member(1, c=4)], np.zeros((1, 3)))


def test_spec_contracts():
    cfg = TrainConfig(total_steps=100, quantize_at=50)
    with pytest.raises(ContractError):
        ensemble.EnsembleSpec(train=cfg, members=((0, 1), (0, 1)))
    with pytest.raises(ContractError):
        ensemble.EnsembleSpec(train=cfg, members=())
    with pytest.raises(ContractError):
        ensemble.EnsembleSpec(train=TrainConfig(quantize_at=None))
    assert ensemble.EnsembleSpec.of_size(cfg, 3).size == 3


def test_relative_size_arithmetic():
    assert ensemble.relative_size(5, 7) == 35 / 32
    assert round(ensemble.relative_size(5, 7), 2) == 1.09


@pytest.fixture(scope="module")
def small_bench():
    return data.default_benchmark(seed=1, n_per_domain=200)


def test_single_member_report_matches_member(small_bench):
    cfg = TrainConfig(total_steps=300, quantize_at=100, validate_every=50, quant=QuantSpec(bits=7))
    rep = ensemble.run_eoq(small_bench, small_bench.names[-1], ensemble.EnsembleSpec(train=cfg, members=((0, 0),)))
    assert rep.ensemble_acc == rep.members[0].target_acc == rep.mean_member_acc
    assert not rep.flagged


def test_five_member_report(small_bench):
    cfg = TrainConfig(total_steps=200, quantize_at=100, validate_every=50, quant=QuantSpec(bits=7))
    spec = ensemble.EnsembleSpec.of_size(cfg, 5)
    rep = ensemble.run_eoq(small_bench, small_bench.names[-1], spec)
    d = rep.to_dict()
    assert len(d["members"]) == 5 and d["survivors"] == 5
    assert d["bytes"]["total_quantized"] == sum(m["bytes"] for m in d["members"])
    assert d["bytes"]["relative_size"] == 5 * 7 / 32
    assert 0 < d["bytes"]["relative_size_measured"] < 5


def test_failed_members_are_flagged(small_bench):
    cfg = TrainConfig(
        total_steps=200, quantize_at=100, validate_every=50,
        optimizer=nn.OptimizerConfig(kind="sgd", lr=1e6),
    )
    rep = ensemble.run_eoq(small_bench, small_bench.names[-1], ensemble.EnsembleSpec(train=cfg, members=((0, 0), (1, 1))))
    assert rep.flagged
    assert all(m.status == "failed" for m in rep.members)
    assert rep.ensemble_acc is None
