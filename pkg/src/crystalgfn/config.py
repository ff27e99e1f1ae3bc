"""Run configuration: one YAML file, versioned, validated against every component at load time."""
from __future__ import annotations

import copy
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .policy import PolicyConfig
from .reward import RewardConfig
from .sampler import SamplerConfig
from .trainer import TrainConfig

SCHEMA_VERSION = 1

DEFAULT_CONFIG_TEXT = """\
# crystalgfn run configuration
version: 1
seed: 0
output_dir: runs              # each run writes runs/<timestamp>/

sampler:
  T: 3                        # reference atoms per trajectory (published 3-step runs; fixed length)
  min_l: 2.0                  # lattice length bounds, Angstrom (chosen; not published)
  max_l: 12.0
  min_a: 60.0                 # lattice angle bounds, degrees (chosen; not published)
  max_a: 120.0
  elements: [Li, Na, K, Be, B, C, N, O, Si, P, S, Cl]   # published battery element set
  composition: battery        # exactly one alkali species per structure; "none" disables
  graph_cutoff: 8.0           # policy graph radius, Angstrom (published encoder setting)
  max_neighbors: 12
  min_volume_factor: 0.1      # cells with V/(abc) below this are rejected and resampled
  max_resample_rounds: 50

reward:
  w_e: 0.2                    # published weights of energy, density, bond and composition terms
  w_p: 0.2
  w_b: 0.5
  w_c: 0.1
  w_bg: 0.0                   # band-gap term weight; needs oracle.gap_command
  energy_temperature: 1.0     # eV/atom (chosen; not published)
  density_a: 1.0              # density Gaussian constants (chosen; not published)
  density_b: 3.0              # g/cm^3
  density_c: 1.5              # g/cm^3
  bond_cutoff: 4.0            # Angstrom (published bond-search radius)
  bg_a: 3.0                   # published band-gap Gaussian constants
  bg_b: 0.0
  bg_c: 0.5
  bond_stats: null            # CSV path; null uses the bundled table

policy:
  encoder: megnet             # megnet | gcn
  width: 64                   # network sizes chosen; none published
  n_layers: 2
  head_hidden: 64
  n_rbf: 16
  rbf_cutoff: 8.0
  use_frac_features: true
  hierarchical: true          # false gives the flat single-level ablation
  beta_init: 3.0

train:
  batch_size: 32              # published
  lr: 0.001                   # published
  lr_logz: 0.1                # published; learning rates stay constant (published scheduler factor 1.0)
  logz_init: 0.0              # published
  epochs: 500
  max_states: null            # optional visited-state budget
  checkpoint_every: 0
  grad_clip: null

oracle:
  energy: surrogate           # surrogate | subprocess
  command: null               # energy oracle executable; defaults to $CRYSTALGFN_ORACLE
  gap_command: null           # band-gap oracle executable
  timeout: 30.0
"""


class ConfigError(ValueError):
    pass


@dataclass
class OracleConfig:
    energy: str = "surrogate"
    command: str | None = None
    gap_command: str | None = None
    timeout: float = 30.0

    def validate(self) -> None:
        if self.energy not in ("surrogate", "subprocess"):
            raise ValueError(f"oracle.energy must be 'surrogate' or 'subprocess', got {self.energy!r}")
        if self.timeout <= 0:
            raise ValueError("oracle.timeout must be positive")


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs"
    sampler: SamplerConfig = field(default_factory=SamplerConfig)
    reward: RewardConfig = field(default_factory=RewardConfig)
    bond_stats: str | None = None
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)

    def validate(self) -> None:
        for name in ("sampler", "reward", "policy", "train", "oracle"):
            try:
                getattr(self, name).validate()
            except (ValueError, KeyError) as exc:
                raise ConfigError(f"{name}: {exc}") from None
        if self.reward.w_bg > 0 and not self.oracle.gap_command:
            raise ConfigError("reward.w_bg > 0 needs oracle.gap_command")

    def to_dict(self) -> dict:
        reward = asdict(self.reward)
        reward["bond_stats"] = self.bond_stats
        sampler = asdict(self.sampler)
        sampler["elements"] = list(sampler["elements"])
        train = asdict(self.train)
        train.pop("seed")
        return {
            "version": SCHEMA_VERSION, "seed": self.seed, "output_dir": self.output_dir,
            "sampler": sampler, "reward": reward, "policy": asdict(self.policy),
            "train": train, "oracle": asdict(self.oracle),
        }

    def dump(self) -> str:
        return yaml.safe_dump(self.to_dict(), sort_keys=False)


def _section(cls, data: dict, name: str, skip=()):
    known = {f.name for f in fields(cls)} - set(skip)
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"{name}: unknown field(s) {unknown}; allowed: {sorted(known)}")
    defaults = asdict(cls())
    merged = {k: data.get(k, defaults[k]) for k in known}
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"{name}: {exc}") from None


def _check_types(cls, obj, name: str) -> None:
    ref = cls()
    for f in fields(cls):
        value, default = getattr(obj, f.name), getattr(ref, f.name)
        if default is None or value is None:
            continue
        if isinstance(default, bool) and not isinstance(value, bool):
            raise ConfigError(f"{name}.{f.name}: expected true/false, got {value!r}")
        if isinstance(default, (int, float)) and not isinstance(default, bool):
            if isinstance(value, bool) or not isinstance(value, (int, float)):
                raise ConfigError(f"{name}.{f.name}: expected a number, got {value!r}")
            if isinstance(default, int) and not isinstance(value, int):
                raise ConfigError(f"{name}.{f.name}: expected an integer, got {value!r}")
        if isinstance(default, str) and not isinstance(value, str):
            raise ConfigError(f"{name}.{f.name}: expected a string, got {value!r}")


def config_from_dict(data: dict | None) -> RunConfig:
    data = copy.deepcopy(data or {})
    if not isinstance(data, dict):
        raise ConfigError("config root must be a mapping")
    version = data.pop("version", SCHEMA_VERSION)
    if version != SCHEMA_VERSION:
        raise ConfigError(f"unsupported config version {version!r} (expected {SCHEMA_VERSION})")
    allowed = {"seed", "output_dir", "sampler", "reward", "policy", "train", "oracle"}
    unknown = sorted(set(data) - allowed)
    if unknown:
        raise ConfigError(f"unknown top-level field(s) {unknown}; allowed: {sorted(allowed)}")
    for key in ("sampler", "reward", "policy", "train", "oracle"):
        if data.get(key) is None:
            data[key] = {}
        if not isinstance(data[key], dict):
            raise ConfigError(f"{key}: expected a mapping")
    reward_data = dict(data["reward"])
    bond_stats = reward_data.pop("bond_stats", None)
    sampler_data = dict(data["sampler"])
    if "elements" in sampler_data:
        if not isinstance(sampler_data["elements"], list):
            raise ConfigError("sampler.elements: expected a list of element symbols")
        sampler_data["elements"] = tuple(sampler_data["elements"])
    seed = data.get("seed", 0)
    if not isinstance(seed, int) or isinstance(seed, bool):
        raise ConfigError(f"seed: expected an integer, got {seed!r}")
    cfg = RunConfig(
        seed=seed,
        output_dir=str(data.get("output_dir", "runs")),
        sampler=_section(SamplerConfig, sampler_data, "sampler"),
        reward=_section(RewardConfig, reward_data, "reward"),
        bond_stats=bond_stats,
        policy=_section(PolicyConfig, data["policy"], "policy"),
        train=_section(TrainConfig, data["train"], "train", skip=("seed",)),
        oracle=_section(OracleConfig, data["oracle"], "oracle"),
    )
    cfg.train.seed = seed
    for cls, obj, name in ((SamplerConfig, cfg.sampler, "sampler"), (RewardConfig, cfg.reward, "reward"),
                           (PolicyConfig, cfg.policy, "policy"), (TrainConfig, cfg.train, "train"),
                           (OracleConfig, cfg.oracle, "oracle")):
        _check_types(cls, obj, name)
    cfg.validate()
    return cfg


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigError(f"{path}: invalid YAML: {exc}") from None
    return config_from_dict(data)


def default_config() -> RunConfig:
    return config_from_dict(yaml.safe_load(DEFAULT_CONFIG_TEXT))
