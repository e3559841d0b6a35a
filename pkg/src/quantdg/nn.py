"""MLP classifiers, softmax cross-entropy and SGD/Adam on top of ``tensor``."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import quant
from . import tensor as T
from .tensor import ContractError, DimensionError, Tensor

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "softplus")


@dataclass(frozen=True)
class MlpSpec:
    input_dim: int
    hidden_dims: tuple[int, ...] = (32,)
    num_classes: int = 2
    activation: str = "relu"
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "hidden_dims", tuple(int(h) for h in self.hidden_dims))
        if not self.hidden_dims:
            raise ContractError("MlpSpec needs at least one hidden layer")
        if min(self.input_dim, self.num_classes, *self.hidden_dims) < 1:
            raise ContractError("all MLP dimensions must be >= 1")
        if self.activation not in ACTIVATIONS:
            raise ContractError(f"activation must be one of {ACTIVATIONS}")

    @property
    def dims(self) -> list[int]:
        return [self.input_dim, *self.hidden_dims, self.num_classes]


@dataclass(frozen=True)
class OptimizerConfig:
    kind: str = "adam"
    lr: float = 3e-4
    momentum: float = 0.0
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.kind not in ("sgd", "adam"):
            raise ContractError(f"optimizer kind must be 'sgd' or 'adam', got {self.kind!r}")
        if not self.lr > 0:
            raise ContractError("learning rate must be positive")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise ContractError("betas must lie in (0, 1)")
        if not 0 <= self.momentum < 1:
            raise ContractError("momentum must lie in [0, 1)")


@dataclass
class Model:
    spec: MlpSpec
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    step: int = 0
    opt_state: dict = field(default_factory=dict)
    quant: quant.QuantState | None = None

    def copy(self) -> Model:
        return Model(
            spec=self.spec,
            weights=[w.copy() for w in self.weights],
            biases=[b.copy() for b in self.biases],
            step=self.step,
            opt_state=copy.deepcopy(self.opt_state),
            quant=None if self.quant is None else self.quant.copy(),
        )

    def with_activation(self, activation: str) -> Model:
        """Clone with a different hidden activation (e.g. softplus for smooth analysis)."""
        m = self.copy()
        m.spec = MlpSpec(**{**asdict(self.spec), "activation": activation})
        return m

    @property
    def n_layers(self) -> int:
        return len(self.weights)

    def param_arrays(self, include_steps: bool = True) -> dict[str, np.ndarray]:
        """Live references to every trainable array, keyed by name."""
        out: dict[str, np.ndarray] = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            out[f"W{i}"] = W
            out[f"b{i}"] = b
        if include_steps and self.quant is not None and self.quant.enabled and self.quant.trainable_steps:
            for i, s in self.quant.steps.items():
                out[f"s{i}"] = s
        return out

    def flat_weights(self) -> np.ndarray:
        """Weights and biases (not step sizes) as one vector."""
        return np.concatenate([a.ravel() for a in self.param_arrays(include_steps=False).values()])

    def set_flat_weights(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64)
        pos = 0
        for i in range(self.n_layers):
            for arrs in (self.weights, self.biases):
                n = arrs[i].size
                arrs[i] = vec[pos : pos + n].reshape(arrs[i].shape).copy()
                pos += n
        if pos != vec.size:
            raise DimensionError(f"flat vector has {vec.size} entries, model needs {pos}")

    def restore_frozen(self) -> None:
        q = self.quant
        if q is not None and q.mode == "incremental":
            for i, mask in q.masks.items():
                self.weights[i] = np.where(mask, q.frozen[i], self.weights[i])


def init_model(spec: MlpSpec) -> Model:
    """He-uniform weights, zero biases, seeded by ``spec.seed``."""
    rng = np.random.default_rng(spec.seed)
    weights, biases = [], []
    dims = spec.dims
    for fan_in, fan_out in zip(dims[:-1], dims[1:]):
        limit = math.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-limit, limit, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return Model(spec=spec, weights=weights, biases=biases)


def parameter_tensors(model: Model) -> dict[str, Tensor]:
    return {k: Tensor(v, requires_grad=True) for k, v in model.param_arrays().items()}


def _activate(h: Tensor, kind: str) -> Tensor:
    return T.relu(h) if kind == "relu" else T.softplus(h)


def forward(model: Model, x, params: dict[str, Tensor] | None = None) -> Tensor:
    """Logits ``[batch, classes]``; quantized layers use their effective weights."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.data.ndim != 2 or x.shape[1] != model.spec.input_dim:
        raise DimensionError(f"input has shape {x.shape}, model expects [batch, {model.spec.input_dim}]")
    if params is None:
        params = {k: Tensor(v) for k, v in model.param_arrays().items()}
    ones = Tensor(np.ones((x.shape[0], 1)))
    h = x
    for i in range(model.n_layers):
        W = quant.effective_weight(model, i, params[f"W{i}"], params.get(f"s{i}"))
        b = params[f"b{i}"]
        h = T.matmul(h, T.transpose(W)) + T.matmul(ones, T.reshape(b, (1, b.size)))
        if i < model.n_layers - 1:
            h = _activate(h, model.spec.activation)
    return h


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=1, keepdims=True)
    shifted = z - m
    return shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))


def loss_ce(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Softmax cross-entropy, mean (default) or sum over the batch."""
    labels = np.asarray(labels)
    n, c = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"labels shape {labels.shape} does not match batch {n}")
    if labels.size and (labels.min() < 0 or labels.max() >= c or not np.issubdtype(labels.dtype, np.integer)):
        raise ContractError(f"labels must be integers in [0, {c})")
    logp = log_softmax(logits.data)
    nll = -logp[np.arange(n), labels]
    scale = 1.0 / n if reduction == "mean" else 1.0
    value = nll.sum() * scale

    def rule(g):
        p = np.exp(logp)
        p[np.arange(n), labels] -= 1.0
        return (float(g) * scale * p,)

    return T.custom_grad((logits,), np.array(value), rule, op="cross_entropy")


def predict_proba(model: Model, x) -> np.ndarray:
    return np.exp(log_softmax(forward(model, x).data))


def accuracy(model: Model, x, y) -> float:
    if len(y) == 0:
        raise ContractError("accuracy of an empty set")
    pred = forward(model, x).data.argmax(axis=1)
    return float((pred == np.asarray(y)).mean())


def loss_value(model: Model, x, y, reduction: str = "mean") -> float:
    return loss_ce(forward(model, x), y, reduction).item()


def loss_and_grads(model: Model, x, y, reduction: str = "mean") -> tuple[float, dict[str, np.ndarray]]:
    params = parameter_tensors(model)
    loss = loss_ce(forward(model, x, params), y, reduction)
    T.backward(loss)
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    return loss.item(), grads


def optimizer_step(model: Model, grads: dict[str, np.ndarray], config: OptimizerConfig) -> Model:
    """In-place SGD/Adam update of every trainable array; increments ``model.step``.

    Moments and the Adam step count are kept per parameter, so arrays that join
    training late (step sizes) start from zero moments and unbiased corrections.
    """
    params = model.param_arrays()
    missing = [k for k in params if k not in grads]
    if missing:
        raise ContractError(f"optimizer_step: missing gradients for {missing}")
    new: dict[str, np.ndarray] = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=np.float64)
        if g.shape != p.shape:
            raise DimensionError(f"gradient for {name} has shape {g.shape}, parameter {p.shape}")
        if config.weight_decay:
            g = g + config.weight_decay * p
        st = model.opt_state.setdefault(name, {"t": 0, "m": np.zeros_like(p), "v": np.zeros_like(p)})
        st["t"] += 1
        if config.kind == "sgd":
            if config.momentum:
                st["m"] = config.momentum * st["m"] + g
                g = st["m"]
            new[name] = p - config.lr * g
        else:
            b1, b2 = config.betas
            st["m"] = b1 * st["m"] + (1 - b1) * g
            st["v"] = b2 * st["v"] + (1 - b2) * g * g
            mhat = st["m"] / (1 - b1 ** st["t"])
            vhat = st["v"] / (1 - b2 ** st["t"])
            new[name] = p - config.lr * mhat / (np.sqrt(vhat) + config.eps)
    for name, value in new.items():
        kind, idx = name[0], int(name[1:])
        if kind == "W":
            model.weights[idx] = value
        elif kind == "b":
            model.biases[idx] = value
        else:
            model.quant.steps[idx] = np.maximum(value, quant.STEP_FLOOR)
    model.restore_frozen()
    model.step += 1
    return model


# checkpoints ---------------------------------------------------------------


def _header(model: Model, extra: dict | None) -> dict:
    q = model.quant
    return {
        "format_version": CHECKPOINT_VERSION,
        "bits": None if q is None else q.spec.bits,
        "spec": asdict(model.spec),
        "step": model.step,
        "quant": None
        if q is None
        else {"spec": asdict(q.spec), "mode": q.mode, "enabled": q.enabled, "stage": q.stage},
        **(extra or {}),
    }


def save_checkpoint(path, model: Model, rng_state: dict | None = None, extra: dict | None = None) -> None:
    """Write a model to a single ``.npz``; the JSON header sits under ``header``."""
    header = _header(model, extra)
    header["rng_state"] = rng_state
    arrays: dict[str, np.ndarray] = {"header": np.array(json.dumps(header, sort_keys=True))}
    for i in range(model.n_layers):
        arrays[f"W{i}"] = model.weights[i]
        arrays[f"b{i}"] = model.biases[i]
    if model.quant is not None:
        for i, s in model.quant.steps.items():
            arrays[f"s{i}"] = s
        for i, m in model.quant.masks.items():
            arrays[f"mask{i}"] = m
            arrays[f"frozen{i}"] = model.quant.frozen[i]
    for name, st in model.opt_state.items():
        arrays[f"opt.{name}.m"] = st["m"]
        arrays[f"opt.{name}.v"] = st["v"]
        arrays[f"opt.{name}.t"] = np.array(st["t"])
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path) -> tuple[Model, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        if header.get("format_version") != CHECKPOINT_VERSION:
            raise ContractError(f"unsupported checkpoint version {header.get('format_version')}")
        spec = header["spec"]
        spec = MlpSpec(**{**spec, "hidden_dims": tuple(spec["hidden_dims"])})
        n = len(spec.dims) - 1
        model = Model(
            spec=spec,
            weights=[z[f"W{i}"].copy() for i in range(n)],
            biases=[z[f"b{i}"].copy() for i in range(n)],
            step=header["step"],
        )
        qh = header["quant"]
        if qh is not None:
            qspec = quant.QuantSpec(**qh["spec"])
            steps = {i: z[f"s{i}"].copy() for i in range(n) if f"s{i}" in z}
            model.quant = quant.QuantState(
                spec=qspec,
                steps=steps,
                mode=qh["mode"],
                enabled=qh["enabled"],
                masks={i: z[f"mask{i}"].copy() for i in steps if f"mask{i}" in z},
                frozen={i: z[f"frozen{i}"].copy() for i in steps if f"frozen{i}" in z},
                stage=qh["stage"],
            )
        for key in z.files:
            if key.startswith("opt.") and key.endswith(".m"):
                name = key[4:-2]
                model.opt_state[name] = {
                    "m": z[f"opt.{name}.m"].copy(),
                    "v": z[f"opt.{name}.v"].copy(),
                    "t": int(z[f"opt.{name}.t"]),
                }
    return model, header
