"""Enumerable two-level toy environment for checking that trajectory balance learns R/Z.

Mirrors the crystal sampler's structure at a size where everything can be
enumerated: each of T steps picks a group g in {0..G-1} (resampled every
step, like the space group) and then appends a token in {0..V-1} conditioned
on the new group. The terminal object is (last group, token sequence). The
backward policy predicts the previous group; the removed token is always the
last one. Policies are tabular logits indexed by state.
"""
from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Adam, Tensor
from .sampler import log_reward_floor, tb_loss
from .policy import sample_categorical


@dataclass
class ToyConfig:
    n_groups: int = 3
    n_tokens: int = 3
    T: int = 3
    batch_size: int = 16
    lr: float = 0.05
    lr_logz: float = 0.1
    steps: int = 1500
    seed: int = 0


class ToyEnv:
    def __init__(self, cfg: ToyConfig, rewards: np.ndarray | None = None):
        self.cfg = cfg
        G, V, T = cfg.n_groups, cfg.n_tokens, cfg.T
        # every state (t, g, tokens) gets an index; s0 is (0, 0, ())
        self.states = [(0, 0, ())]
        for t in range(1, T + 1):
            for g in range(G):
                for toks in itertools.product(range(V), repeat=t):
                    self.states.append((t, g, toks))
        self.index = {s: k for k, s in enumerate(self.states)}
        self.terminals = [s for s in self.states if s[0] == T]
        if rewards is None:
            rng = np.random.default_rng(12345)
            rewards = np.exp(2.0 * rng.random(len(self.terminals)))
        rewards = np.asarray(rewards, dtype=np.float64)
        if rewards.shape != (len(self.terminals),) or np.any(rewards <= 0):
            raise ValueError("rewards must be positive, one per terminal")
        self.rewards = rewards
        self.terminal_index = {s: k for k, s in enumerate(self.terminals)}

    @property
    def target(self) -> np.ndarray:
        return self.rewards / self.rewards.sum()

    def reward(self, state) -> float:
        return float(self.rewards[self.terminal_index[state]])


class ToyPolicy:
    def __init__(self, env: ToyEnv, seed: int = 0):
        c = env.cfg
        n = len(env.states)
        rng = np.random.default_rng(seed)
        init = lambda *shape: Tensor(0.01 * rng.standard_normal(shape), requires_grad=True)
        self.params = {
            "f_group": init(n, c.n_groups),
            "f_token": init(n * c.n_groups, c.n_tokens),  # row = state * G + new group
            "b_group": init(n, c.n_groups),
            "logZ": Tensor(0.0, requires_grad=True),
        }
        self.env = env

    def log_probs(self, trajs):
        """(log P_F, log P_B) per trajectory; a trajectory is a list of (group, token) actions."""
        env, c = self.env, self.env.cfg
        G = c.n_groups
        rows, grp, tok, traj_id = [], [], [], []
        b_rows, b_grp, b_id = [], [], []
        for i, acts in enumerate(trajs):
            state = (0, 0, ())
            for t, (g, v) in enumerate(acts):
                k = env.index[state]
                rows.append(k)
                grp.append(g)
                tok.append(v)
                traj_id.append(i)
                nxt = (t + 1, g, state[2] + (v,))
                if t >= 1:
                    b_rows.append(env.index[nxt])
                    b_grp.append(state[1])
                    b_id.append(i)
                state = nxt
        rows, grp, tok = np.array(rows), np.array(grp), np.array(tok)
        lg = ad.take_along(ad.log_softmax(ad.take_rows(self.params["f_group"], rows)), grp)
        lt = ad.take_along(ad.log_softmax(ad.take_rows(self.params["f_token"], rows * G + grp)), tok)
        log_pf = ad.segment_sum(lg + lt, np.array(traj_id), len(trajs))
        if b_rows:
            lb = ad.take_along(ad.log_softmax(ad.take_rows(self.params["b_group"], np.array(b_rows))), np.array(b_grp))
            log_pb = ad.segment_sum(lb, np.array(b_id), len(trajs))
        else:
            log_pb = Tensor(np.zeros(len(trajs)))
        return log_pf, log_pb

    def sample(self, n: int, rng: np.random.Generator):
        env, c = self.env, self.env.cfg
        G = c.n_groups
        states = [(0, 0, ())] * n
        acts = [[] for _ in range(n)]
        for t in range(c.T):
            rows = np.array([env.index[s] for s in states])
            lg = ad.log_softmax(Tensor(self.params["f_group"].data[rows])).data
            g = sample_categorical(rng, lg)
            lt = ad.log_softmax(Tensor(self.params["f_token"].data[rows * G + g])).data
            v = sample_categorical(rng, lt)
            for i in range(n):
                acts[i].append((int(g[i]), int(v[i])))
                states[i] = (t + 1, int(g[i]), states[i][2] + (int(v[i]),))
        return acts, states

    def terminal_distribution(self) -> np.ndarray:
        """Exact marginal of the forward policy over terminals, by enumerating all trajectories."""
        env, c = self.env, self.env.cfg
        G = c.n_groups
        fg = self.params["f_group"].data
        ft = self.params["f_token"].data
        lsm = lambda x: x - np.logaddexp.reduce(x)
        out = np.zeros(len(env.terminals))
        frontier = {(0, 0, ()): 1.0}
        for t in range(c.T):
            nxt: dict = {}
            for s, p in frontier.items():
                k = env.index[s]
                pg = np.exp(lsm(fg[k]))
                for g in range(G):
                    pt = np.exp(lsm(ft[k * G + g]))
                    for v in range(c.n_tokens):
                        s2 = (t + 1, g, s[2] + (v,))
                        nxt[s2] = nxt.get(s2, 0.0) + p * pg[g] * pt[v]
            frontier = nxt
        for s, p in frontier.items():
            out[env.terminal_index[s]] = p
        return out


def train_toy(cfg: ToyConfig, rewards: np.ndarray | None = None) -> tuple[ToyEnv, ToyPolicy, list[float]]:
    env = ToyEnv(cfg, rewards)
    pol = ToyPolicy(env, cfg.seed)
    opt = Adam(pol.params, lr=cfg.lr, lr_overrides={"logZ": cfg.lr_logz})
    rng = np.random.default_rng(cfg.seed)
    losses = []
    for _ in range(cfg.steps):
        acts, terms = pol.sample(cfg.batch_size, rng)
        log_pf, log_pb = pol.log_probs(acts)
        loss = tb_loss(pol.params["logZ"], log_pf, log_pb, log_reward_floor([env.reward(s) for s in terms]))
        leaf = ad.backward(loss, accumulate=False)
        opt.step({k: leaf.get(id(t), np.zeros_like(t.data)) for k, t in pol.params.items()})
        losses.append(loss.item())
    return env, pol, losses


def l1_to_target(env: ToyEnv, pol: ToyPolicy) -> float:
    return float(np.abs(pol.terminal_distribution() - env.target).sum())
