import numpy as np
import pytest

from quantdg import analysis, data, nn, quant, trainer
from quantdg.quant import QuantSpec
from quantdg.tensor import ContractError


def _quadratic(lam):
    return (lambda w: 0.5 * lam * float(w @ w)), (lambda w: lam * w)


def test_flatness_quadratic_at_origin_is_exact():
    lam = 3.0
    energy, _ = _quadratic(lam)
    gammas = [0.01, 0.1, 0.5, 2.0]
    prof = analysis.flatness_profile(energy, np.zeros(50), gammas, samples=100, seed=0)
    np.testing.assert_allclose(prof.mean, [0.5 * lam * g * g for g in gammas], rtol=1e-14)
    assert max(prof.stderr) < 1e-12


def test_flatness_quadratic_off_origin_within_three_se():
    lam = 2.0
    energy, _ = _quadratic(lam)
    w = np.random.default_rng(1).normal(size=30)
    gammas = [0.05, 0.2, 1.0]
    prof = analysis.flatness_profile(energy, w, gammas, samples=100, seed=2)
    for g, m, se in zip(gammas, prof.mean, prof.stderr):
        assert abs(m - 0.5 * lam * g * g) <= 3 * se


def test_flatness_sentinel_and_contracts():
    energy, _ = _quadratic(1.0)
    prof = analysis.flatness_profile(energy, np.ones(4), [0.0, 0.1], samples=10)
    assert prof.mean[0] == 0.0 and prof.stderr[0] == 0.0
    with pytest.raises(ContractError):
        analysis.flatness_profile(energy, np.ones(4), [-0.1, 0.1])
    with pytest.raises(ContractError):
        analysis.flatness_profile(energy, np.ones(4), [0.2, 0.1])
    with pytest.raises(ContractError):
        analysis.flatness_profile(energy, np.ones(4), [0.1], samples=1)


def test_unit_directions_have_unit_norm():
    d = analysis.unit_directions(17, 200, np.random.default_rng(0))
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-15)


def test_adaptive_sampling_widens_noisy_rows():
    # linear energy: mean change is zero, so the noise criterion can never be met
    a = np.random.default_rng(0).normal(size=10)
    prof = analysis.flatness_profile(lambda w: float(a @ w), np.zeros(10), [0.1], samples=8, adaptive=True, max_samples=64)
    assert prof.samples == [64] and prof.widened == [True]


@pytest.fixture(scope="module")
def qat_model():
    ds = data.default_benchmark(seed=3, n_per_domain=200)
    plan = data.split_leave_one_out(ds, ds.names[-1], seed=3)
    rec = trainer.train(ds, plan, trainer.TrainConfig(total_steps=600, quantize_at=300, quant=QuantSpec(bits=5), seed=3))
    view, _ = data.make_views(ds, plan)
    return rec.last.model, view


def test_model_energy_uses_quantized_weights(qat_model):
    model, view = qat_model
    e = analysis.model_energy(model, view.val_x, view.val_y)
    assert e(model.flat_weights()) == pytest.approx(nn.loss_value(model, view.val_x, view.val_y, "sum"), rel=1e-13)
    fp = model.copy()
    fp.quant = None
    assert e(model.flat_weights()) != nn.loss_value(fp, view.val_x, view.val_y, "sum")


def test_model_flatness_profile(qat_model):
    model, view = qat_model
    prof = analysis.flatness(model, view.val_x, view.val_y, samples=20)
    assert prof.gammas[0] == 0.0 and prof.mean[0] == 0.0
    assert len(prof.gammas) == 7 and all(se > 0 for se in prof.stderr[1:])
    lines = prof.to_csv().splitlines()
    assert lines[0] == "gamma,mean,stderr,samples,set" and len(lines) == 8
    np.testing.assert_allclose(prof.per_sample_mean, np.array(prof.mean) / len(view.val_y))
    # the model itself is not disturbed by probing
    w0 = model.flat_weights()
    analysis.flatness(model, view.val_x, view.val_y, samples=3)
    np.testing.assert_array_equal(model.flat_weights(), w0)


def test_hvp_quadratic():
    lam = 4.5
    _, grad = _quadratic(lam)
    rng = np.random.default_rng(0)
    w, v = rng.normal(size=20), rng.normal(size=20)
    assert np.abs(analysis.hvp_fd(grad, w, v) - lam * v).max() <= 1e-6 * np.abs(lam * v).max()
    with pytest.raises(ContractError):
        analysis.hvp_fd(grad, w, np.zeros(20))
    with pytest.raises(ContractError):
        analysis.hvp_fd(grad, w, np.ones(3))


@pytest.fixture(scope="module")
def smooth_point(qat_model):
    model, view = qat_model
    fp = model.copy().with_activation("softplus")
    fp.quant = None
    return fp, view.val_x, view.val_y


def test_hvp_linearity_and_symmetry(smooth_point):
    m, x, y = smooth_point
    rng = np.random.default_rng(4)
    d = m.flat_weights().size
    for _ in range(3):
        v1, v2 = rng.normal(size=d), rng.normal(size=d)
        h1, h2, h12 = analysis.hvp(m, x, y, v1), analysis.hvp(m, x, y, v2), analysis.hvp(m, x, y, v1 + v2)
        assert np.linalg.norm(h12 - h1 - h2) <= 1e-5 * np.linalg.norm(h12)
        a, b = v1 @ h2, v2 @ h1
        assert abs(a - b) <= 1e-5 * max(abs(a), abs(b))


def test_trace_and_top_eigenvalue_on_diagonal_operator():
    diag = np.array([5.0, -1.0, 2.0, 0.5, 3.0])
    hv = lambda v: diag * v
    assert analysis.hutchinson_trace(hv, 5, probes=7) == pytest.approx(diag.sum(), abs=1e-12)
    assert analysis.power_iteration(hv, 5, iters=200) == pytest.approx(5.0, rel=1e-6)
    with pytest.raises(ContractError):
        analysis.power_iteration(hv, 5, iters=10)


def test_taylor_zero_displacement(qat_model):
    model, view = qat_model
    tab = analysis.taylor_residual(model, view.val_x, view.val_y, delta=np.zeros(model.flat_weights().size))
    assert tab.degenerate and all(r == 0 for _, r in tab.rows)


def test_taylor_exact_for_linear_objective():
    a = np.random.default_rng(0).normal(size=8)
    rows = analysis.taylor_residual_fn(
        lambda w: float(a @ w) + 1.5, lambda w: a.copy(), np.ones(8), np.linspace(-1, 1, 8), (1.0, 0.5, 0.25)
    )
    assert max(r for _, r in rows) <= 1e-8


def test_taylor_residual_scales_cubically(qat_model):
    model, view = qat_model
    smooth = model.with_activation("softplus")
    tab = analysis.taylor_residual(smooth, view.val_x, view.val_y)
    assert not tab.degenerate and len(tab.ratios) == 3
    assert all(6 <= r <= 10 for r in tab.ratios), tab.ratios


def test_taylor_scale_contract():
    f = lambda w: 0.0
    with pytest.raises(ContractError):
        analysis.taylor_residual_fn(f, lambda w: w, np.ones(2), np.ones(2), (0.5, 1.0))


def test_displacement_respects_noise_bound(qat_model):
    model, _ = qat_model
    delta = analysis.quantization_displacement(model)
    off = 0
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        block = delta[off : off + W.size].reshape(W.shape)
        if i in model.quant.steps:
            s = model.quant.steps[i][:, None]
            inside = np.abs(W / s) < model.quant.spec.q_p
            assert np.all(np.abs(block[inside]) <= s.repeat(W.shape[1], 1)[inside] / 2 + 1e-15)
        else:
            assert not block.any()
        off += W.size + b.size


def test_curvature_report_fields(qat_model):
    model, view = qat_model
    rep = analysis.curvature_report(model, view.val_x, view.val_y, probes=3, iters=20)
    d = rep.to_dict()
    assert d["probes"] == 3 and d["power_iters"] == 20 and len(d["taylor_residual"]) == 4
    assert np.isfinite(d["hutchinson_trace"]) and np.isfinite(d["top_eigenvalue"])
