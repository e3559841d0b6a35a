"""Multi-domain datasets: synthetic generators, CSV I/O, leave-one-domain-out splits."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import ContractError


DEFAULT_SIGNAL_SEP = 2.0


class IngestionError(ValueError):
    pass


@dataclass(frozen=True)
class Domain:
    name: str
    x: np.ndarray
    y: np.ndarray


@dataclass(frozen=True)
class DomainDataset:
    domains: tuple[Domain, ...]
    num_classes: int
    metadata: dict = field(default_factory=dict)
    label_names: tuple | None = None

    def __post_init__(self):
        if not self.domains:
            raise ContractError("dataset has no domains")
        dims = {d.x.shape[1] for d in self.domains}
        if len(dims) != 1:
            raise ContractError(f"domains disagree on input_dim: {sorted(dims)}")
        names = [d.name for d in self.domains]
        if len(set(names)) != len(names):
            raise ContractError("duplicate domain names")
        for d in self.domains:
            if len(d.y) == 0:
                raise ContractError(f"domain {d.name!r} is empty")
            if len(d.y) != d.x.shape[0]:
                raise ContractError(f"domain {d.name!r}: {d.x.shape[0]} rows but {len(d.y)} labels")
            if d.y.min() < 0 or d.y.max() >= self.num_classes:
                raise ContractError(f"domain {d.name!r}: labels outside [0, {self.num_classes})")
            d.x.setflags(write=False)
            d.y.setflags(write=False)

    @property
    def input_dim(self) -> int:
        return self.domains[0].x.shape[1]

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.domains]

    def domain(self, name: str) -> Domain:
        for d in self.domains:
            if d.name == name:
                return d
        raise ContractError(f"unknown domain {name!r}; have {self.names}")


def _rotation(deg: float) -> np.ndarray:
    t = math.radians(deg)
    return np.array([[math.cos(t), -math.sin(t)], [math.sin(t), math.cos(t)]])


def gen_rotated_moons(n_per_domain: int, angles, noise_sd: float = 0.1, seed: int = 0) -> DomainDataset:
    """Two-moons per domain, each domain rotated by its angle (degrees).

    Every domain draws its points from the same seeded stream, so domains differ
    only by rotation.
    """
    angles = list(angles)
    if len(angles) < 3:
        raise ContractError("need at least 3 angles (two sources and a target)")
    if noise_sd < 0:
        raise ContractError("noise_sd must be >= 0")
    if n_per_domain < 2 or n_per_domain % 2:
        raise ContractError("n_per_domain must be an even integer >= 2")
    half = n_per_domain // 2
    rng = np.random.default_rng(seed)
    t_out = rng.uniform(0, math.pi, half)
    t_in = rng.uniform(0, math.pi, half)
    upper = np.column_stack([np.cos(t_out), np.sin(t_out)])
    lower = np.column_stack([1 - np.cos(t_in), 0.5 - np.sin(t_in)])
    base = np.vstack([upper, lower]) + rng.normal(0, noise_sd, (n_per_domain, 2))
    base -= np.array([0.5, 0.25])
    y = np.repeat([0, 1], half)
    domains = []
    for k, a in enumerate(angles):
        x = base @ _rotation(a).T
        domains.append(Domain(name=f"rot{k}_{a:g}", x=x, y=y.copy()))
    meta = {"generator": "rotated_moons", "seed": seed, "angles": angles, "noise_sd": noise_sd}
    return DomainDataset(domains=tuple(domains), num_classes=2, metadata=meta)


def gen_spurious_blobs(
    n_per_domain: int,
    corr_per_domain,
    signal_sep: float = 1.0,
    seed: int = 0,
    causal_dims: int = 8,
) -> DomainDataset:
    """Gaussian class blobs plus one binary spurious feature.

    The causal block is ``N(+-signal_sep/2 * u, I)`` along a fixed unit vector
    ``u`` spread evenly across ``causal_dims``. The spurious feature equals the
    label with probability ``(1 + corr)/2`` in each domain and ``1 - label``
    otherwise. The last entry of ``corr_per_domain`` is the intended target.
    """
    corrs = [float(c) for c in corr_per_domain]
    if len(corrs) < 3:
        raise ContractError("need at least 3 domains (two sources and a target)")
    if any(not -1 <= c <= 1 for c in corrs):
        raise ContractError(f"correlations must lie in [-1, 1]: {corrs}")
    if corrs[-1] in corrs[:-1]:
        raise ContractError("target correlation must differ from every source correlation")
    if n_per_domain < 2 or n_per_domain % 2:
        raise ContractError("n_per_domain must be an even integer >= 2")
    rng = np.random.default_rng(seed)
    u = np.full(causal_dims, 1.0 / math.sqrt(causal_dims))
    domains = []
    for k, c in enumerate(corrs):
        y = rng.permutation(np.repeat([0, 1], n_per_domain // 2))
        sign = (2 * y - 1)[:, None]
        causal = sign * (signal_sep / 2) * u + rng.normal(size=(n_per_domain, causal_dims))
        agree = rng.random(n_per_domain) < (1 + c) / 2
        spur = np.where(agree, y, 1 - y).astype(np.float64)
        x = np.column_stack([causal, spur])
        role = "target" if k == len(corrs) - 1 else "source"
        domains.append(Domain(name=f"{role}{k}_corr{c:+g}", x=x, y=y))
    meta = {
        "generator": "spurious_blobs",
        "seed": seed,
        "corr_per_domain": corrs,
        "signal_sep": signal_sep,
        "causal_dims": causal_dims,
    }
    return DomainDataset(domains=tuple(domains), num_classes=2, metadata=meta)


def default_benchmark(seed: int = 0, n_per_domain: int = 500, signal_sep: float = DEFAULT_SIGNAL_SEP) -> DomainDataset:
    """Sources correlate the spurious bit with the label at +0.9/+0.8/+0.7, target at -0.9."""
    return gen_spurious_blobs(n_per_domain, [0.9, 0.8, 0.7, -0.9], signal_sep=signal_sep, seed=seed)


# CSV ------------------------------------------------------------------------


def export_csv(ds: DomainDataset, path) -> None:
    """Write ``domain,label,f0,f1,...``; floats use ``repr`` so ingestion is lossless."""
    labels = ds.label_names or tuple(range(ds.num_classes))
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["domain", "label", *[f"f{j}" for j in range(ds.input_dim)]])
        for d in ds.domains:
            for row, lab in zip(d.x, d.y):
                w.writerow([d.name, labels[lab], *[repr(float(v)) for v in row]])


def _label_key(v: str):
    try:
        return (0, float(v), v)
    except ValueError:
        return (1, 0.0, v)


def ingest_csv(path, domain_column: str = "domain", label_column: str = "label") -> DomainDataset:
    """Group rows by domain; every other column must be numeric.

    Labels are indexed by their sorted unique values (numeric-looking labels sort
    numerically). Errors cite 1-based file line numbers, header = line 1.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise IngestionError(f"{path}: empty file, expected a header row")
        header = [h.strip() for h in header]
        for col in (domain_column, label_column):
            if col not in header:
                raise IngestionError(f"{path}: missing column {col!r} in header {header}")
        di, li = header.index(domain_column), header.index(label_column)
        feat_idx = [j for j in range(len(header)) if j not in (di, li)]
        if not feat_idx:
            raise IngestionError(f"{path}: no feature columns")
        rows: dict[str, list] = {}
        labels_raw: dict[str, list] = {}
        order: list[str] = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise IngestionError(f"{path}: row {lineno} has {len(row)} fields, expected {len(header)}")
            dom = row[di].strip()
            if not dom:
                raise IngestionError(f"{path}: row {lineno} has an empty domain value")
            try:
                feats = [float(row[j]) for j in feat_idx]
            except ValueError:
                bad = next(header[j] for j in feat_idx if not _is_float(row[j]))
                raise IngestionError(f"{path}: row {lineno}, column {bad!r}: non-numeric value") from None
            if not all(math.isfinite(v) for v in feats):
                raise IngestionError(f"{path}: row {lineno}: non-finite feature value")
            if dom not in rows:
                rows[dom], labels_raw[dom] = [], []
                order.append(dom)
            rows[dom].append(feats)
            labels_raw[dom].append(row[li].strip())
    if not order:
        raise IngestionError(f"{path}: no data rows")
    uniq = sorted({v for vs in labels_raw.values() for v in vs}, key=_label_key)
    index = {v: k for k, v in enumerate(uniq)}
    domains = tuple(
        Domain(
            name=dom,
            x=np.array(rows[dom], dtype=np.float64),
            y=np.array([index[v] for v in labels_raw[dom]], dtype=np.int64),
        )
        for dom in order
    )
    return DomainDataset(
        domains=domains,
        num_classes=len(uniq),
        metadata={"generator": "csv", "path": str(path)},
        label_names=tuple(uniq),
    )


def _is_float(s: str) -> bool:
    try:
        float(s)
        return True
    except ValueError:
        return False


# splits ---------------------------------------------------------------------


@dataclass(frozen=True)
class SplitPlan:
    target_domain: str
    train: dict[str, np.ndarray]
    val: dict[str, np.ndarray]
    seed: int
    val_fraction: float = 0.2


def split_leave_one_out(ds: DomainDataset, target_domain: str, val_fraction: float = 0.2, seed: int = 0) -> SplitPlan:
    """Hold out ``target_domain``; split every source domain train/val, stratified by label."""
    ds.domain(target_domain)
    if not 0 < val_fraction < 1:
        raise ContractError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    train, val = {}, {}
    for d in ds.domains:
        if d.name == target_domain:
            continue
        if len(d.y) < 5:
            raise ContractError(f"source domain {d.name!r} has fewer than 5 samples")
        tr, va = [], []
        for c in range(ds.num_classes):
            idx = np.flatnonzero(d.y == c)
            if idx.size == 0:
                continue
            idx = rng.permutation(idx)
            n_val = int(round(val_fraction * idx.size))
            va.append(idx[:n_val])
            tr.append(idx[n_val:])
        train[d.name] = np.sort(np.concatenate(tr))
        val[d.name] = np.sort(np.concatenate(va))
    return SplitPlan(target_domain=target_domain, train=train, val=val, seed=seed, val_fraction=val_fraction)


@dataclass(frozen=True)
class SourceView:
    """Everything the trainer may touch: source train and validation arrays."""

    train_x: tuple[np.ndarray, ...]
    train_y: tuple[np.ndarray, ...]
    val_x: np.ndarray
    val_y: np.ndarray
    num_classes: int
    domain_names: tuple[str, ...]

    @property
    def input_dim(self) -> int:
        return self.val_x.shape[1]

    @property
    def all_train(self) -> tuple[np.ndarray, np.ndarray]:
        return np.vstack(self.train_x), np.concatenate(self.train_y)


class TargetEvaluator:
    """Sealed access to the held-out domain: callers only ever get scores back."""

    __slots__ = ("_x", "_y", "name")

    def __init__(self, x: np.ndarray, y: np.ndarray, name: str):
        self._x = x
        self._y = y
        self.name = name

    def __len__(self) -> int:
        return len(self._y)

    def score(self, fn):
        """Apply ``fn(x, y)`` to the sealed data and return its scalar result."""
        out = fn(self._x, self._y)
        if not np.isscalar(out) and np.ndim(out) != 0:
            raise ContractError("target evaluator only releases scalar results")
        return float(out)

    def unseal(self) -> tuple[np.ndarray, np.ndarray]:
        """Explicit escape hatch for post-hoc analysis (flatness on the target set)."""
        return self._x, self._y


def make_views(ds: DomainDataset, plan: SplitPlan) -> tuple[SourceView, TargetEvaluator]:
    srcs = [d for d in ds.domains if d.name != plan.target_domain]
    tgt = ds.domain(plan.target_domain)
    view = SourceView(
        train_x=tuple(d.x[plan.train[d.name]] for d in srcs),
        train_y=tuple(d.y[plan.train[d.name]] for d in srcs),
        val_x=np.vstack([d.x[plan.val[d.name]] for d in srcs]),
        val_y=np.concatenate([d.y[plan.val[d.name]] for d in srcs]),
        num_classes=ds.num_classes,
        domain_names=tuple(d.name for d in srcs),
    )
    return view, TargetEvaluator(tgt.x, tgt.y, tgt.name)
