"""Uniform fake quantization with per-channel learnable step sizes.

A weight ``w`` with step ``s`` maps to the integer level

    wbar = round(w / s)   if -Q_N < w / s < Q_P
         = -Q_N           if w / s <= -Q_N
         = Q_P            if w / s >= Q_P

and back to ``w_q = wbar * s``. Rounding is half-away-from-zero. Channels are
the output rows of a ``[out, in]`` weight matrix.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from .tensor import ContractError, Tensor, custom_grad

STEP_FLOOR = 1e-8
MODES = ("lsq", "ptq-rtn", "incremental")


@dataclass(frozen=True)
class QuantSpec:
    bits: int = 7
    signed: bool = True
    quantize_last_layer: bool = False

    def __post_init__(self):
        # 52 keeps every level exactly representable in a float64 mantissa
        if not isinstance(self.bits, (int, np.integer)) or not 2 <= self.bits <= 52:
            raise ContractError(f"bits must be an integer in [2, 52], got {self.bits!r}")

    @property
    def q_n(self) -> int:
        return 2 ** (self.bits - 1) if self.signed else 0

    @property
    def q_p(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.signed else 2**self.bits - 1


@dataclass
class QuantState:
    """Quantizer state attached to a model.

    ``steps`` holds one positive step per output channel for every quantized
    layer, keyed by layer index. Incremental mode additionally tracks a frozen
    mask and the frozen (on-grid) values per layer.
    """

    spec: QuantSpec
    steps: dict[int, np.ndarray]
    mode: str = "lsq"
    enabled: bool = True
    masks: dict[int, np.ndarray] = field(default_factory=dict)
    frozen: dict[int, np.ndarray] = field(default_factory=dict)
    stage: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ContractError(f"unknown quantization mode {self.mode!r}")
        for layer, s in self.steps.items():
            if np.any(~(s > 0)):
                raise ContractError(f"layer {layer}: step sizes must be positive")

    @property
    def trainable_steps(self) -> bool:
        return self.mode == "lsq"

    def copy(self) -> QuantState:
        return copy.deepcopy(self)


def round_half_away(x):
    """Round to nearest integer, ties away from zero, without float drift."""
    x = np.asarray(x, dtype=np.float64)
    a = np.abs(x)
    f = np.floor(a)
    r = f + ((a - f) >= 0.5)
    return np.copysign(r, x)


def _check_step(s) -> np.ndarray:
    s = np.asarray(s, dtype=np.float64)
    if np.any(~(s > 0)):
        raise ContractError("step size must be strictly positive")
    return s


def quantize_levels(w, s, spec: QuantSpec) -> np.ndarray:
    """Vectorized integer levels (as float64) for weights ``w`` and steps ``s``."""
    s = _check_step(s)
    v = np.asarray(w, dtype=np.float64) / s
    out = round_half_away(v)
    out = np.where(v <= -spec.q_n, -spec.q_n, out)
    out = np.where(v >= spec.q_p, spec.q_p, out)
    return out


def quantize_int(w: float, s: float, spec: QuantSpec) -> int:
    return int(quantize_levels(w, s, spec))


def dequantize(wbar, s, spec: QuantSpec | None = None):
    s = _check_step(s)
    wbar = np.asarray(wbar)
    if spec is not None and (np.any(wbar < -spec.q_n) or np.any(wbar > spec.q_p)):
        raise ContractError(f"integer level outside [-{spec.q_n}, {spec.q_p}]")
    out = wbar.astype(np.float64) * s
    return float(out) if out.ndim == 0 else out


def quantize_array(W: np.ndarray, s: np.ndarray, spec: QuantSpec) -> np.ndarray:
    """Fake-quantize a ``[out, in]`` matrix with per-row steps ``s``."""
    s = np.asarray(s, dtype=np.float64)
    if s.shape != (W.shape[0],):
        raise ContractError(f"expected {W.shape[0]} channel steps, got shape {s.shape}")
    col = s[:, None]
    return quantize_levels(W, col, spec) * col


def init_steps(W: np.ndarray, spec: QuantSpec) -> np.ndarray:
    W = np.asarray(W, dtype=np.float64)
    if W.size == 0:
        raise ContractError("init_steps: empty weight matrix")
    W = W.reshape(W.shape[0], -1)
    s = 2.0 * np.abs(W).mean(axis=1) / math.sqrt(spec.q_p)
    return np.where(s > 0, s, STEP_FLOOR)


def lsq_grads(W: np.ndarray, s: np.ndarray, upstream: np.ndarray, spec: QuantSpec):
    """Straight-through weight gradient and LSQ step-size gradient.

    Returns ``(grad_W, grad_s)``. ``grad_W`` passes the upstream gradient where
    ``-Q_N < W/s < Q_P`` and is zero elsewhere. ``grad_s`` for channel ``c`` is
    ``g_c * sum_i upstream[c, i] * r[c, i]`` with ``r`` the derivative of the
    fake-quantized value with respect to the step and ``g_c = 1/sqrt(N_c Q_P)``.
    """
    col = np.asarray(s, dtype=np.float64)[:, None]
    v = W / col
    below = v <= -spec.q_n
    above = v >= spec.q_p
    inside = ~(below | above)
    grad_W = np.where(inside, upstream, 0.0)
    r = np.where(inside, round_half_away(v) - v, 0.0)
    r = np.where(below, -float(spec.q_n), r)
    r = np.where(above, float(spec.q_p), r)
    g = 1.0 / math.sqrt(W.shape[1] * spec.q_p)
    grad_s = g * (upstream * r).sum(axis=1)
    return grad_W, grad_s


def fake_quant(W: Tensor, s: Tensor, spec: QuantSpec) -> Tensor:
    """Fake-quantized weights on the tape, with LSQ gradients to ``W`` and ``s``."""
    if s.shape != (W.shape[0],):
        raise ContractError(f"missing channel steps: need {W.shape[0]}, have shape {s.shape}")
    Wd, sd = W.data, s.data
    value = quantize_array(Wd, sd, spec)

    def rule(g):
        return lsq_grads(Wd, sd, g, spec)

    return custom_grad((W, s), value, rule, op="fake_quant")


def masked_quant(W: Tensor, mask: np.ndarray, frozen: np.ndarray) -> Tensor:
    """Incremental-mode effective weights: frozen entries fixed, the rest pass through."""
    value = np.where(mask, frozen, W.data)
    return custom_grad((W,), value, lambda g: (np.where(mask, 0.0, g),), op="masked_quant")


def quantized_layers(n_layers: int, spec: QuantSpec) -> list[int]:
    last = n_layers if spec.quantize_last_layer else n_layers - 1
    return list(range(last))


def attach(model, spec: QuantSpec, mode: str = "lsq") -> QuantState:
    """Initialize per-channel steps from the current weights and enable quantization."""
    steps = {i: init_steps(model.weights[i], spec) for i in quantized_layers(len(model.weights), spec)}
    state = QuantState(spec=spec, steps=steps, mode=mode)
    if mode == "incremental":
        state.masks = {i: np.zeros(model.weights[i].shape, dtype=bool) for i in steps}
        state.frozen = {i: np.zeros(model.weights[i].shape) for i in steps}
    model.quant = state
    return state


def ptq_round_to_nearest(model, spec: QuantSpec):
    """Post-training round-to-nearest: returns a quantized copy, no retraining."""
    if model.quant is not None:
        raise ContractError("ptq_round_to_nearest: model is already quantized")
    out = model.copy()
    steps = {}
    for i in quantized_layers(len(out.weights), spec):
        steps[i] = init_steps(out.weights[i], spec)
        out.weights[i] = quantize_array(out.weights[i], steps[i], spec)
    out.quant = QuantState(spec=spec, steps=steps, mode="ptq-rtn")
    return out


def validate_schedule(stage_fractions) -> list[float]:
    fr = [float(f) for f in stage_fractions]
    if not fr or any(b <= a for a, b in zip(fr, fr[1:])) or fr[0] <= 0 or fr[-1] != 1.0:
        raise ContractError(f"stage fractions must be strictly increasing in (0, 1] and end at 1.0: {fr}")
    return fr


def incremental_step(model, stage_fractions) -> QuantState:
    """Advance the incremental schedule by one stage.

    At stage ``k`` each quantized layer freezes its largest-magnitude free
    weights until ``round(stage_fractions[k] * N)`` are frozen. Frozen weights
    take their on-grid value and never move again.
    """
    fr = validate_schedule(stage_fractions)
    state = model.quant
    if state is None or state.mode != "incremental":
        raise ContractError("incremental_step: model has no incremental quantizer attached")
    if state.stage >= len(fr):
        raise ContractError("incremental_step: schedule already complete")
    frac = fr[state.stage]
    for i, s in state.steps.items():
        W = model.weights[i]
        mask = state.masks[i]
        target = int(round(frac * W.size))
        need = target - int(mask.sum())
        if need > 0:
            mag = np.where(mask, -np.inf, np.abs(W)).ravel()
            # stable sort keeps the choice deterministic under magnitude ties
            order = np.argsort(-mag, kind="stable")[:need]
            flat = mask.ravel().copy()
            flat[order] = True
            new_mask = flat.reshape(W.shape)
            q = quantize_array(W, s, state.spec)
            fresh = new_mask & ~mask
            state.frozen[i] = np.where(fresh, q, state.frozen[i])
            state.masks[i] = new_mask
            model.weights[i] = np.where(new_mask, state.frozen[i], W)
    state.stage += 1
    return state


def effective_weight(model, i: int, W: Tensor, s: Tensor | None) -> Tensor:
    """Weight tensor seen by the forward pass for layer ``i``."""
    q = model.quant
    if q is None or not q.enabled or i not in q.steps:
        return W
    if q.mode == "incremental":
        return masked_quant(W, q.masks[i], q.frozen[i])
    if s is None:
        s = Tensor(q.steps[i])
    return fake_quant(W, s, q.spec)


def export_quantized(model) -> dict:
    """Integer levels, steps and a header for size accounting."""
    q = model.quant
    if q is None:
        raise ContractError("export_quantized: model is not quantized")
    out = {"header": {"format_version": 1, "bits": q.spec.bits, "signed": q.spec.signed, "mode": q.mode}}
    for i, W in enumerate(model.weights):
        if i in q.steps:
            if q.mode == "incremental":
                lv = np.where(q.masks[i], quantize_levels(q.frozen[i], q.steps[i][:, None], q.spec), 0)
                out[f"free{i}"] = np.where(q.masks[i], 0.0, W)
                out[f"mask{i}"] = q.masks[i]
            else:
                lv = quantize_levels(W, q.steps[i][:, None], q.spec)
            out[f"int{i}"] = lv.astype(np.int64)
            out[f"s{i}"] = q.steps[i].copy()
        else:
            out[f"W{i}"] = W.copy()
        out[f"b{i}"] = model.biases[i].copy()
    return out


def storage_bytes(model, bits: int | None = None) -> float:
    """Storage for a model: quantized layers at ``bits`` per weight, the rest float32.

    Steps and biases count as float32. With ``bits=None`` the model's own
    quantizer decides; an unquantized model is all float32.
    """
    q = model.quant
    total = 0.0
    for i, W in enumerate(model.weights):
        quantized = q is not None and i in q.steps
        b = (bits or q.spec.bits) if quantized else 32
        total += W.size * b / 8
        if quantized:
            total += W.shape[0] * 4
        total += model.biases[i].size * 4
    return total


def compression_ratio(bits: int) -> float:
    """Size reduction of a quantized layer relative to float32."""
    return 32.0 / bits
