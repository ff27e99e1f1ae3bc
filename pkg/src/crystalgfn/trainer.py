"""Trajectory-balance training loop with deterministic logging and resumable checkpoints."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, total_norm
from .checkpoint import load_arrays, save_arrays
from .metrics import ModeRegistry
from .policy import Policy, PolicyConfig
from .reward import BondStatsTable, RewardConfig, composite_reward
from .sampler import Sampler, SamplerConfig, TrajectoryRecord, log_reward_floor, tb_loss

log = logging.getLogger(__name__)

LOG_KEYS = ("epoch", "mean_reward", "r_energy", "r_bond", "r_density", "r_comp", "modes",
            "states_visited", "loss", "logZ", "rejected")


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 32
    lr: float = 1e-3
    lr_logz: float = 0.1
    logz_init: float = 0.0
    epochs: int = 500
    max_states: int | None = None  # stop once this many states were visited
    seed: int = 0
    checkpoint_every: int = 0  # epochs; 0 keeps only the final checkpoint
    grad_clip: float | None = None  # global-norm clip; off by default

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr <= 0 or self.lr_logz <= 0:
            raise ValueError("learning rates must be positive")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.grad_clip is not None and self.grad_clip <= 0:
            raise ValueError("grad_clip must be positive when set")


class Trainer:
    def __init__(self, policy: Policy, sampler_cfg: SamplerConfig, reward_cfg: RewardConfig,
                 train_cfg: TrainConfig, energy_oracle, bond_stats: BondStatsTable, gap_oracle=None):
        train_cfg.validate()
        reward_cfg.validate()
        self.policy = policy
        self.sampler = Sampler(policy, sampler_cfg)
        self.reward_cfg = reward_cfg
        self.cfg = train_cfg
        self.energy_oracle = energy_oracle
        self.bond_stats = bond_stats
        self.gap_oracle = gap_oracle
        self.rng = np.random.default_rng(train_cfg.seed)
        policy.params["logZ"].data = np.array(float(train_cfg.logz_init))
        self.opt = Adam(policy.params, lr=train_cfg.lr, lr_overrides={"logZ": train_cfg.lr_logz})
        self.modes = ModeRegistry()
        self.epoch = 0
        self.states_visited = 0
        self.history: list[dict] = []
        self.extra_meta: dict = {}  # stored verbatim in every checkpoint

    # -- scoring -----------------------------------------------------------------
    def score(self, records: list[TrajectoryRecord]) -> None:
        for r in records:
            br = composite_reward(r.structure, self.reward_cfg, self.energy_oracle, self.bond_stats, self.gap_oracle)
            r.breakdown = br
            r.reward = br.composite

    def sample(self, n: int, rng: np.random.Generator | None = None) -> list[TrajectoryRecord]:
        """Draw and score ``n`` trajectories without touching training counters."""
        records, _, _ = self.sampler.draw(n, rng if rng is not None else self.rng)
        self.score(records)
        return records

    # -- one optimization step -------------------------------------------------
    def step(self) -> dict:
        records, rejected, visited = self.sampler.rollout(self.cfg.batch_size, self.rng)
        self.score(records)
        self.states_visited += visited
        for r in records:
            self.modes.observe(r.structure, r.breakdown.energy)
        log_r = log_reward_floor([r.reward for r in records])
        log_z = self.policy.params["logZ"]
        try:
            log_pf, log_pb = self.sampler.replay(records)
            loss = tb_loss(log_z, log_pf, log_pb, log_r)
            if not math.isfinite(loss.item()):
                raise FloatingPointError("non-finite loss")
            leaf_grads = ad.backward(loss, accumulate=False)
        except FloatingPointError as exc:
            raise TrainingDivergedError(f"epoch {self.epoch}: {exc}") from exc
        grads = {k: leaf_grads.get(id(t), np.zeros_like(t.data)) for k, t in self.policy.params.items()}
        if self.cfg.grad_clip is not None:
            norm = total_norm(grads.values())
            if norm > self.cfg.grad_clip:
                grads = {k: g * (self.cfg.grad_clip / norm) for k, g in grads.items()}
        self.opt.step(grads)
        self.epoch += 1
        br = [r.breakdown for r in records]
        entry = {
            "epoch": self.epoch,
            "mean_reward": float(np.mean([r.reward for r in records])),
            "r_energy": float(np.mean([b.r_energy for b in br])),
            "r_bond": float(np.mean([b.r_bond for b in br])),
            "r_density": float(np.mean([b.r_density for b in br])),
            "r_comp": float(np.mean([b.r_comp for b in br])),
            "modes": self.modes.count,
            "states_visited": self.states_visited,
            "loss": float(loss.item()),
            "logZ": float(log_z.data),
            "rejected": rejected,
        }
        self.history.append(entry)
        return entry

    def train(self, epochs: int | None = None, max_states: int | None = None,
              log_path: str | Path | None = None, checkpoint_dir: str | Path | None = None) -> list[dict]:
        """Run until ``epochs`` steps or ``max_states`` visited states, whichever comes first."""
        epochs = self.cfg.epochs if epochs is None else epochs
        max_states = self.cfg.max_states if max_states is None else max_states
        fh = open(log_path, "a") if log_path is not None else None
        out: list[dict] = []
        try:
            for _ in range(epochs):
                if max_states is not None and self.states_visited >= max_states:
                    break
                try:
                    entry = self.step()
                except TrainingDivergedError:
                    if checkpoint_dir is not None:
                        self.save(Path(checkpoint_dir) / "diverged.ckpt")
                    raise
                out.append(entry)
                if fh is not None:
                    fh.write(json.dumps(entry) + "\n")
                    fh.flush()
                every = self.cfg.checkpoint_every
                if checkpoint_dir is not None and every and self.epoch % every == 0:
                    self.save(Path(checkpoint_dir) / f"epoch{self.epoch:06d}.ckpt")
        finally:
            if fh is not None:
                fh.close()
        if checkpoint_dir is not None:
            self.save(Path(checkpoint_dir) / "final.ckpt")
        return out

    # -- persistence -------------------------------------------------------------
    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        arrays = dict(self.policy.arrays())
        arrays.update(self.opt.state_arrays())
        meta = {
            "policy": asdict(self.policy.cfg),
            "n_elements": self.policy.n_elements,
            "sampler": asdict(self.sampler.cfg),
            "reward": asdict(self.reward_cfg),
            "train": asdict(self.cfg),
            "epoch": self.epoch,
            "states_visited": self.states_visited,
            "rng_state": self.rng.bit_generator.state,
            "modes": self.modes.to_list(),
            "modes_checked": self.modes.checked,
        }
        meta.update(self.extra_meta)
        save_arrays(path, arrays, meta)

    def restore(self, path: str | Path) -> dict:
        arrays, meta = load_arrays(path)
        self.policy.load(arrays)
        self.opt.load_state_arrays({k: v for k, v in arrays.items() if k.startswith("adam.")})
        self.epoch = int(meta["epoch"])
        self.states_visited = int(meta["states_visited"])
        self.rng.bit_generator.state = meta["rng_state"]
        self.modes = ModeRegistry.from_list(meta["modes"], int(meta.get("modes_checked", 0)))
        return meta


def configs_from_checkpoint(meta: dict) -> tuple[PolicyConfig, SamplerConfig, RewardConfig, TrainConfig]:
    s = dict(meta["sampler"])
    s["elements"] = tuple(s["elements"])
    return (PolicyConfig(**meta["policy"]), SamplerConfig(**s), RewardConfig(**meta["reward"]),
            TrainConfig(**meta["train"]))
