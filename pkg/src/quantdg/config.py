"""Experiment configuration: TOML in, validated dataclasses out.

Every section is checked against a fixed key set before anything runs, so a
typo fails loudly instead of silently falling back to a default.
"""

from __future__ import annotations

import sys
from dataclasses import dataclass, field, fields
from pathlib import Path

from . import data, nn, quant
from .tensor import ContractError
from .trainer import TrainConfig

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

DEFAULT_SIGNAL_SEP = data.DEFAULT_SIGNAL_SEP


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DatasetConfig:
    generator: str = "spurious_blobs"
    n_per_domain: int = 500
    seed: int = 0
    corr_per_domain: tuple[float, ...] = (0.9, 0.8, 0.7, -0.9)
    signal_sep: float = DEFAULT_SIGNAL_SEP
    causal_dims: int = 8
    angles: tuple[float, ...] = (0.0, 15.0, 30.0, 45.0)
    noise_sd: float = 0.1
    path: str = ""
    domain_column: str = "domain"
    label_column: str = "label"

    def build(self, base_dir: Path | None = None) -> data.DomainDataset:
        if self.generator == "spurious_blobs":
            return data.gen_spurious_blobs(
                self.n_per_domain, self.corr_per_domain, self.signal_sep, self.seed, self.causal_dims
            )
        if self.generator == "rotated_moons":
            return data.gen_rotated_moons(self.n_per_domain, self.angles, self.noise_sd, self.seed)
        path = Path(self.path)
        if base_dir is not None and not path.is_absolute():
            path = base_dir / path
        return data.ingest_csv(path, self.domain_column, self.label_column)


@dataclass(frozen=True)
class ProtocolConfig:
    target: str = "last"
    val_fraction: float = 0.2
    split_seed: int = 0

    def targets(self, ds: data.DomainDataset) -> list[str]:
        if self.target == "all":
            return list(ds.names)
        if self.target == "last":
            return [ds.names[-1]]
        ds.domain(self.target)
        return [self.target]


@dataclass(frozen=True)
class AnalysisConfig:
    gammas: tuple[float, ...] = (0.01, 0.02, 0.05, 0.1, 0.2, 0.5)
    scale_by_rms: bool = True
    samples: int = 100
    seed: int = 0
    probes: int = 10
    power_iters: int = 20


@dataclass(frozen=True)
class EnsembleConfig:
    size: int = 5
    members: tuple[tuple[int, int], ...] = ()


@dataclass(frozen=True)
class SweepConfig:
    bits: tuple[int, ...] = (2, 3, 4, 5, 6, 7, 8)
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    protocol: ProtocolConfig = field(default_factory=ProtocolConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    quant_mode: str = "lsq"
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)
    ensemble: EnsembleConfig = field(default_factory=EnsembleConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    out_dir: str = "runs/default"
    base_dir: str = "."

    def ensemble_members(self) -> tuple[tuple[int, int], ...]:
        if self.ensemble.members:
            return self.ensemble.members
        return tuple((self.protocol.split_seed + k, self.train.seed + k) for k in range(self.ensemble.size))


_TOP = {"out_dir", "dataset", "protocol", "train", "quant", "analysis", "ensemble", "sweep"}
_TRAIN = {"total_steps", "quantize_at", "validate_every", "batch_per_domain", "hidden_dims", "seed", "optimizer"}
_OPT = {f.name for f in fields(nn.OptimizerConfig)}
_QUANT = {"bits", "signed", "quantize_last_layer", "mode", "stage_fractions"}


def _check_keys(section: str, got: dict, allowed: set) -> None:
    unknown = sorted(set(got) - allowed)
    if unknown:
        raise ConfigError(f"[{section}] unknown keys: {', '.join(unknown)}")


def _tuplify(d: dict, keys) -> dict:
    return {k: (tuple(tuple(x) if isinstance(x, list) else x for x in v) if isinstance(v, list) else v) for k, v in d.items()}


def _section(cls, name: str, raw: dict):
    allowed = {f.name for f in fields(cls)}
    _check_keys(name, raw, allowed)
    try:
        return cls(**_tuplify(raw, allowed))
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"[{name}] {exc}") from None


def from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    _check_keys("top level", raw, _TOP)
    ds = _section(DatasetConfig, "dataset", raw.get("dataset", {}))
    if ds.generator not in ("spurious_blobs", "rotated_moons", "csv"):
        raise ConfigError(f"[dataset] unknown generator {ds.generator!r}")
    if ds.generator == "csv" and not ds.path:
        raise ConfigError("[dataset] generator 'csv' needs a path")
    proto = _section(ProtocolConfig, "protocol", raw.get("protocol", {}))
    if not 0 < proto.val_fraction < 1:
        raise ConfigError("[protocol] val_fraction must lie in (0, 1)")

    tr = dict(raw.get("train", {}))
    _check_keys("train", tr, _TRAIN)
    opt_raw = dict(tr.pop("optimizer", {}))
    _check_keys("train.optimizer", opt_raw, _OPT)
    if "betas" in opt_raw:
        opt_raw["betas"] = tuple(opt_raw["betas"])
    q_raw = dict(raw.get("quant", {}))
    _check_keys("quant", q_raw, _QUANT)
    mode = q_raw.pop("mode", "lsq")
    if mode not in quant.MODES:
        raise ConfigError(f"[quant] mode must be one of {quant.MODES}")
    stages = tuple(q_raw.pop("stage_fractions", (0.5, 0.75, 0.875, 1.0)))
    qa = tr.pop("quantize_at", TrainConfig.quantize_at)
    if isinstance(qa, str):
        if qa.lower() != "none":
            raise ConfigError("[train] quantize_at must be an integer or \"none\"")
        qa = None
    try:
        optimizer = nn.OptimizerConfig(**opt_raw)
        qspec = quant.QuantSpec(**q_raw)
        train = TrainConfig(
            **{k: (tuple(v) if isinstance(v, list) else v) for k, v in tr.items()},
            quantize_at=qa,
            optimizer=optimizer,
            quant=qspec,
            quant_mode="incremental" if mode == "incremental" else "lsq",
            stage_fractions=stages,
        )
    except (TypeError, ContractError) as exc:
        raise ConfigError(f"[train/quant] {exc}") from None

    analysis = _section(AnalysisConfig, "analysis", raw.get("analysis", {}))
    if analysis.samples < 2:
        raise ConfigError("[analysis] samples must be >= 2")
    ens = _section(EnsembleConfig, "ensemble", raw.get("ensemble", {}))
    if ens.size < 1:
        raise ConfigError("[ensemble] size must be >= 1")
    sweep = _section(SweepConfig, "sweep", raw.get("sweep", {}))
    for b in sweep.bits:
        if not 2 <= b <= 16:
            raise ConfigError(f"[sweep] bits must lie in [2, 16], got {b}")
    return ExperimentConfig(
        dataset=ds,
        protocol=proto,
        train=train,
        quant_mode=mode,
        analysis=analysis,
        ensemble=ens,
        sweep=sweep,
        out_dir=str(raw.get("out_dir", "runs/default")),
        base_dir=str(base_dir or "."),
    )


def load(path) -> ExperimentConfig:
    path = Path(path)
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return from_dict(raw, base_dir=path.parent)
