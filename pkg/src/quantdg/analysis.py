"""Loss-landscape diagnostics: local flatness, Hessian-vector products, Taylor residuals.

The core routines work on flat parameter vectors and plain callables so they
can be checked against analytic objectives; the ``model_*`` helpers bind them
to an MLP and an evaluation set.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import nn
from .tensor import ContractError

DEFAULT_GAMMAS = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
PROFILE_HEADER = ("gamma", "mean", "stderr", "samples", "set")


@dataclass
class FlatnessProfile:
    gammas: list[float]
    mean: list[float]
    stderr: list[float]
    samples: list[int]
    eval_set: str = "source"
    n_eval: int = 1
    widened: list[bool] = field(default_factory=list)

    @property
    def per_sample_mean(self) -> list[float]:
        return [m / self.n_eval for m in self.mean]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(PROFILE_HEADER)
        for g, m, se, n in zip(self.gammas, self.mean, self.stderr, self.samples):
            w.writerow([repr(g), repr(m), repr(se), n, self.eval_set])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {
            "gamma": self.gammas,
            "mean": self.mean,
            "stderr": self.stderr,
            "samples": self.samples,
            "set": self.eval_set,
            "n_eval": self.n_eval,
            "per_sample_mean": self.per_sample_mean,
            "widened": self.widened,
        }


def unit_directions(dim: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` directions uniform on the unit sphere in R^dim (normalized Gaussians)."""
    g = rng.standard_normal((count, dim))
    return g / np.linalg.norm(g, axis=1, keepdims=True)


def flatness_profile(
    energy: Callable[[np.ndarray], float],
    w: np.ndarray,
    gammas,
    samples: int = 100,
    seed: int = 0,
    eval_set: str = "source",
    n_eval: int = 1,
    adaptive: bool = False,
    max_samples: int = 800,
) -> FlatnessProfile:
    """Monte-Carlo estimate of ``E[energy(w + gamma*u) - energy(w)]`` over unit ``u``.

    ``gamma == 0`` is accepted as a sentinel and reported as exactly zero. With
    ``adaptive`` the sample count doubles (up to ``max_samples``) while the
    standard error exceeds a fifth of the mean; such rows are flagged.
    Directions for a given seed are shared across gammas and across models of
    equal size, which keeps comparisons paired.
    """
    gammas = [float(g) for g in gammas]
    if any(g < 0 for g in gammas):
        raise ContractError("gamma must be positive (0 allowed only as a sentinel)")
    if any(b <= a for a, b in zip(gammas, gammas[1:])):
        raise ContractError("gammas must be strictly increasing")
    if samples < 2:
        raise ContractError("need at least 2 samples per gamma")
    w = np.asarray(w, dtype=np.float64)
    base = energy(w)
    rng = np.random.default_rng(seed)
    dirs = unit_directions(w.size, max(samples, max_samples if adaptive else samples), rng)
    prof = FlatnessProfile(gammas=[], mean=[], stderr=[], samples=[], eval_set=eval_set, n_eval=n_eval)
    for g in gammas:
        if g == 0:
            prof.gammas.append(0.0)
            prof.mean.append(0.0)
            prof.stderr.append(0.0)
            prof.samples.append(samples)
            prof.widened.append(False)
            continue
        n = samples
        diffs = [energy(w + g * dirs[i]) - base for i in range(n)]
        widened = False
        while adaptive and _too_noisy(diffs) and n < max_samples:
            more = min(n, max_samples - n)
            diffs += [energy(w + g * dirs[i]) - base for i in range(n, n + more)]
            n += more
            widened = True
        d = np.array(diffs)
        prof.gammas.append(g)
        prof.mean.append(float(d.mean()))
        prof.stderr.append(float(d.std(ddof=1) / math.sqrt(d.size)))
        prof.samples.append(int(d.size))
        prof.widened.append(widened or (adaptive and _too_noisy(diffs)))
    return prof


def _too_noisy(diffs) -> bool:
    d = np.asarray(diffs)
    return d.std(ddof=1) / math.sqrt(d.size) > abs(d.mean()) / 5


def model_energy(model: nn.Model, x, y, reduction: str = "sum") -> Callable[[np.ndarray], float]:
    """Loss of ``model`` as a function of its flattened weights and biases.

    Quantized models keep their step sizes; the quantizer is re-applied to the
    perturbed latent weights, so the value is the loss of the model as deployed.
    """
    probe = model.copy()

    def energy(vec: np.ndarray) -> float:
        probe.set_flat_weights(vec)
        return nn.loss_value(probe, x, y, reduction)

    return energy


def model_gradient(model: nn.Model, x, y, reduction: str = "mean") -> Callable[[np.ndarray], np.ndarray]:
    probe = model.copy()
    names = list(probe.param_arrays(include_steps=False))

    def grad(vec: np.ndarray) -> np.ndarray:
        probe.set_flat_weights(vec)
        _, g = nn.loss_and_grads(probe, x, y, reduction)
        return np.concatenate([g[k].ravel() for k in names])

    return grad


def scaled_gammas(model: nn.Model, base=DEFAULT_GAMMAS) -> list[float]:
    """Default radii scaled by the RMS weight magnitude ``||w|| / sqrt(D)``."""
    w = model.flat_weights()
    scale = np.linalg.norm(w) / math.sqrt(w.size)
    return [float(g * scale) for g in base]


def flatness(
    model: nn.Model,
    x,
    y,
    gammas=None,
    samples: int = 100,
    seed: int = 0,
    eval_set: str = "source",
    adaptive: bool = False,
) -> FlatnessProfile:
    """Local flatness of ``model`` on ``(x, y)`` with the summed cross-entropy as energy."""
    if len(y) == 0:
        raise ContractError("flatness: empty evaluation set")
    if gammas is None:
        gammas = [0.0, *scaled_gammas(model)]
    return flatness_profile(
        model_energy(model, x, y),
        model.flat_weights(),
        gammas,
        samples=samples,
        seed=seed,
        eval_set=eval_set,
        n_eval=len(y),
        adaptive=adaptive,
    )


# curvature -----------------------------------------------------------------


def hvp_fd(grad: Callable[[np.ndarray], np.ndarray], w: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Hessian-vector product by central differences of the gradient."""
    w = np.asarray(w, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    if v.shape != w.shape:
        raise ContractError(f"direction shape {v.shape} does not match parameters {w.shape}")
    nv = np.linalg.norm(v)
    if nv == 0:
        raise ContractError("hvp: zero direction")
    eps = 1e-4 * (1 + np.linalg.norm(w)) / nv
    return (grad(w + eps * v) - grad(w - eps * v)) / (2 * eps)


def hvp(model: nn.Model, x, y, v) -> np.ndarray:
    return hvp_fd(model_gradient(model, x, y), model.flat_weights(), v)


def hutchinson_trace(hv: Callable[[np.ndarray], np.ndarray], dim: int, probes: int = 20, seed: int = 0) -> float:
    if probes < 1:
        raise ContractError("need at least one probe")
    rng = np.random.default_rng(seed)
    est = [float(z @ hv(z)) for z in rng.choice([-1.0, 1.0], size=(probes, dim))]
    return float(np.mean(est))


def power_iteration(hv: Callable[[np.ndarray], np.ndarray], dim: int, iters: int = 20, seed: int = 0) -> float:
    """Largest-magnitude Hessian eigenvalue estimate (Rayleigh quotient after ``iters`` steps)."""
    if iters < 20:
        raise ContractError("power iteration needs at least 20 iterations")
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        hv_ = hv(v)
        lam = float(v @ hv_)
        n = np.linalg.norm(hv_)
        if n == 0:
            return 0.0
        v = hv_ / n
    return lam


def taylor_residual_fn(
    loss: Callable[[np.ndarray], float],
    grad: Callable[[np.ndarray], np.ndarray],
    w: np.ndarray,
    delta: np.ndarray,
    scales,
) -> list[tuple[float, float]]:
    """``|L(w + c*delta) - (L + c g.delta + c^2/2 delta.H.delta)|`` for each scale ``c``."""
    scales = [float(c) for c in scales]
    if any(c <= 0 for c in scales) or any(b >= a for a, b in zip(scales, scales[1:])):
        raise ContractError("scales must be positive and strictly decreasing")
    w = np.asarray(w, dtype=np.float64)
    delta = np.asarray(delta, dtype=np.float64)
    if not np.any(delta):
        return [(c, 0.0) for c in scales]
    l0 = loss(w)
    g = grad(w)
    curv = float(delta @ hvp_fd(grad, w, delta))
    lin = float(g @ delta)
    return [(c, abs(loss(w + c * delta) - (l0 + c * lin + 0.5 * c * c * curv))) for c in scales]


def quantization_displacement(model: nn.Model) -> np.ndarray:
    """``w_q - w`` over the flat weight/bias vector (zero for unquantized entries)."""
    from . import quant

    q = model.quant
    parts = []
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        if q is not None and i in q.steps:
            if q.mode == "incremental":
                parts.append((np.where(q.masks[i], q.frozen[i], W) - W).ravel())
            else:
                parts.append((quant.quantize_array(W, q.steps[i], q.spec) - W).ravel())
        else:
            parts.append(np.zeros(W.size))
        parts.append(np.zeros(b.size))
    return np.concatenate(parts)


@dataclass
class TaylorTable:
    rows: list[tuple[float, float]]
    degenerate: bool = False

    @property
    def ratios(self) -> list[float]:
        r = [res for _, res in self.rows]
        return [a / b if b > 0 else math.inf for a, b in zip(r, r[1:])]


def taylor_residual(model: nn.Model, x, y, scales=(1.0, 0.5, 0.25, 0.125), delta=None) -> TaylorTable:
    """Second-order Taylor check along the quantization displacement of ``model``.

    The displacement is taken from the model's quantizer; the expansion is done
    on the full-precision landscape (quantizer detached) so that it is smooth.
    """
    if delta is None:
        delta = quantization_displacement(model)
    fp = model.copy()
    fp.quant = None
    rows = taylor_residual_fn(
        model_energy(fp, x, y, "mean"), model_gradient(fp, x, y), fp.flat_weights(), delta, scales
    )
    return TaylorTable(rows=rows, degenerate=not np.any(delta))


@dataclass
class CurvatureReport:
    trace: float
    top_eigenvalue: float
    probes: int
    power_iters: int
    taylor: list[tuple[float, float]]

    def to_dict(self) -> dict:
        return {
            "hutchinson_trace": self.trace,
            "top_eigenvalue": self.top_eigenvalue,
            "probes": self.probes,
            "power_iters": self.power_iters,
            "taylor_residual": [{"scale": c, "residual": r} for c, r in self.taylor],
        }


def curvature_report(model: nn.Model, x, y, probes: int = 20, iters: int = 20, seed: int = 0) -> CurvatureReport:
    fp = model.copy()
    fp.quant = None
    w = fp.flat_weights()
    grad = model_gradient(fp, x, y)

    def hv(v):
        return hvp_fd(grad, w, v)

    taylor = taylor_residual(model, x, y).rows if model.quant is not None else []
    return CurvatureReport(
        trace=hutchinson_trace(hv, w.size, probes, seed),
        top_eigenvalue=power_iteration(hv, w.size, iters, seed),
        probes=probes,
        power_iters=iters,
        taylor=taylor,
    )
