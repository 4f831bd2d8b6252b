"""
Experiment configuration: nested dataclasses loaded from and echoed to YAML.

Grammar: a YAML mapping whose top-level keys are the section names below
(``system``, ``channel``, ``sampling``, ``net``, ``adapt``, ``meta``,
``experiment``); each section maps field names to scalars or lists.
Missing keys take the defaults; unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import yaml

from . import beamformers as bf
from . import covnet as cn
from . import mbmaml as mm
from . import online
from .channels import DEFAULT_LOG_SPREAD

__all__ = ["ExperimentConfig", "load_config", "dump_config", "config_hash", "EXPERIMENT_KINDS",
           "METHODS", "ConfigError"]

EXPERIMENT_KINDS = ("snr_sweep", "gamma_sweep", "ablation_hybrid", "salr_delta", "salr_rank",
                    "num_bases", "ood", "convergence")
METHODS = ("wmmse", "swmmse", "robust_wmmse_sample", "robust_wmmse_perfect", "hybrid",
           "offline_only", "online_only")


class ConfigError(ValueError):
    pass


@dataclass
class SystemSection:
    M_t: int = 16
    K: int = 4
    P_max: float = 1.0
    snr_db: float = 20.0
    weights: list | None = None

    def params(self, snr_db=None):
        snr = self.snr_db if snr_db is None else snr_db
        return bf.SystemParams.from_snr_db(snr, self.P_max, self.weights)


@dataclass
class ChannelSection:
    rho: float = 0.5
    gamma_db: float = 0.0
    log_spread: float = DEFAULT_LOG_SPREAD
    train_gamma_db: list = field(default_factory=lambda: [0.0])
    ood_gamma_shift_db: float = -5.0
    gamma_list: list = field(default_factory=lambda: [-5.0, 0.0, 5.0, 10.0])
    snr_list: list = field(default_factory=lambda: [0.0, 10.0, 20.0, 30.0])


@dataclass
class SamplingSection:
    N: int = 2
    trials: int = 100
    master_seed: int = 0


@dataclass
class NetSection:
    head: str = "salr"
    rank: int = 8
    delta: float = 0.09
    hidden: list = field(default_factory=lambda: [128, 256, 256])
    out_scale: float = 0.01
    mask_candidates: int = 1
    mask_epochs: int = 2


@dataclass
class AdaptSection:
    alpha: float = 0.01
    N_i: int = 5
    eta: float = 0.1
    T_wmmse: int = 10
    optimizer: str = "sgd"
    norm_mode: str = "frozen"

    def build(self, **over):
        d = dataclasses.asdict(self)
        d.update(over)
        return online.AdaptConfig(**d)


@dataclass
class MetaSection:
    M: int = 8
    beta_meta: float = 0.001
    lambda_reg: float = 0.001
    gamma_steps: list | None = None
    N_i: int = 5
    B: int = 20
    alpha: float = 0.01
    epochs: int = 20
    batches_per_epoch: int = 5
    first_order: bool = True
    bn_momentum: float = 0.9
    grad_clip: float = 50.0
    norm_mode: str = "frozen"
    meta_optimizer: str = "sgd"
    val_tasks: int = 20

    def build(self, adapt: AdaptSection, **over):
        d = dataclasses.asdict(self)
        for k in ("M", "val_tasks"):
            d.pop(k)
        d.update(eta=adapt.eta, T_wmmse=adapt.T_wmmse)
        d.update(over)
        return mm.MetaConfig(**d)


@dataclass
class ExperimentSection:
    kind: str = "snr_sweep"
    methods: list = field(default_factory=lambda: ["wmmse", "swmmse", "robust_wmmse_sample",
                                                    "robust_wmmse_perfect", "hybrid"])
    delta_list: list = field(default_factory=lambda: [0.0, 0.05, 0.09, 0.2])
    rank_list: list = field(default_factory=lambda: [2, 4, 8])
    M_list: list = field(default_factory=lambda: [1, 8])
    swmmse_iters: int = 200
    wmmse_iters: int = 50
    sweep_bases: int = 1
    train_first: bool = False
    out_dir: str = "results"
    workers: int = 1


_SECTIONS = {"system": SystemSection, "channel": ChannelSection, "sampling": SamplingSection,
             "net": NetSection, "adapt": AdaptSection, "meta": MetaSection,
             "experiment": ExperimentSection}


@dataclass
class ExperimentConfig:
    """All settings of one run; every field has a default."""

    system: SystemSection = field(default_factory=SystemSection)
    channel: ChannelSection = field(default_factory=ChannelSection)
    sampling: SamplingSection = field(default_factory=SamplingSection)
    net: NetSection = field(default_factory=NetSection)
    adapt: AdaptSection = field(default_factory=AdaptSection)
    meta: MetaSection = field(default_factory=MetaSection)
    experiment: ExperimentSection = field(default_factory=ExperimentSection)

    def __post_init__(self):
        self.validate()

    def validate(self):
        e = self.experiment
        if e.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"experiment.kind must be one of {EXPERIMENT_KINDS}")
        bad = [m for m in e.methods if m not in METHODS]
        if bad:
            raise ConfigError(f"unknown method(s) {bad}; choose from {METHODS}")
        if self.sampling.trials < 1 or self.sampling.N < 1:
            raise ConfigError("sampling.trials and sampling.N must be >= 1")
        if self.system.M_t < 1 or self.system.K < 1:
            raise ConfigError("system.M_t and system.K must be >= 1")
        if self.net.head not in ("full", "salr"):
            raise ConfigError("net.head must be 'full' or 'salr'")
        if e.sweep_bases < 1 or any(int(m) < 1 for m in e.M_list):
            raise ConfigError("bank sizes must be >= 1")
        if e.workers < 1:
            raise ConfigError("experiment.workers must be >= 1")
        # constructing the sub-configs runs their own checks
        try:
            self.adapt.build()
            self.meta.build(self.adapt)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    @classmethod
    def full_scale(cls):
        """Full-size system: 32 transmit antennas."""
        cfg = cls()
        cfg.system.M_t = 32
        return cfg

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        unknown = set(d) - set(_SECTIONS)
        if unknown:
            raise ConfigError(f"unknown section(s): {sorted(unknown)}")
        kwargs = {}
        for name, sec_cls in _SECTIONS.items():
            sec = d.get(name) or {}
            if not isinstance(sec, dict):
                raise ConfigError(f"section {name!r} must be a mapping")
            names = {f.name for f in dataclasses.fields(sec_cls)}
            extra = set(sec) - names
            if extra:
                raise ConfigError(f"unknown key(s) in {name!r}: {sorted(extra)}")
            kwargs[name] = sec_cls(**sec)
        return cls(**kwargs)


# execution controls that cannot change any result value
_UNHASHED = ("out_dir", "workers", "train_first")


def config_hash(cfg: ExperimentConfig) -> str:
    d = cfg.to_dict()
    for k in _UNHASHED:
        d["experiment"].pop(k)
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def load_config(path=None, full_scale=False) -> ExperimentConfig:
    """Read a YAML config; ``None`` gives the defaults."""
    base = ExperimentConfig.full_scale().to_dict() if full_scale else ExperimentConfig().to_dict()
    if path is not None:
        with open(path) as fh:
            user = yaml.safe_load(fh) or {}
        if not isinstance(user, dict):
            raise ConfigError("config file must hold a mapping")
        for sec, vals in user.items():
            if sec not in base:
                raise ConfigError(f"unknown section(s): [{sec!r}]")
            if not isinstance(vals, dict):
                raise ConfigError(f"section {sec!r} must be a mapping")
            base[sec].update(vals)
    return ExperimentConfig.from_dict(base)


def dump_config(cfg: ExperimentConfig, path):
    with open(path, "w", newline="\n") as fh:
        yaml.safe_dump(cfg.to_dict(), fh, sort_keys=True, default_flow_style=False)
