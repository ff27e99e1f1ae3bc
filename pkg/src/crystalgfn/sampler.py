"""Two-level trajectory sampling: space group, then lattice, coordinate and element per step.

Rollouts run without gradient tracking. ``replay`` recomputes the forward and
backward log-densities of stored trajectories as differentiable tensors, in
one batched pass over every visited state.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .crystal import CrystalGraph, CrystalStructure, DegenerateLatticeError, Lattice, build_graph
from .elements import element
from .policy import (N_GROUPS, N_LATTICE, GraphBatch, Policy, beta_log_prob, sample_beta,
                     sample_categorical)
from .spacegroup import LENGTHS, ANGLES, SymmetryCollisionError, expand_structure, free_parameters, project_lattice

PARAM_NAMES = LENGTHS + ANGLES
INITIAL_LATTICE = Lattice(4.0, 4.0, 4.0, 90.0, 90.0, 90.0)
INITIAL_GROUP = 1
BATTERY_ELEMENTS = ("Li", "Na", "K", "Be", "B", "C", "N", "O", "Si", "P", "S", "Cl")
ALKALI = ("Li", "Na", "K")


class ConstraintError(ValueError):
    pass


@dataclass
class SamplerConfig:
    T: int = 3
    min_l: float = 2.0  # Angstrom
    max_l: float = 12.0
    min_a: float = 60.0  # degrees
    max_a: float = 120.0
    elements: tuple[str, ...] = BATTERY_ELEMENTS
    composition: str = "battery"  # "battery" | "none"
    graph_cutoff: float = 8.0
    max_neighbors: int = 12
    min_volume_factor: float = 0.1  # reject cells flatter than V / (abc) below this
    max_resample_rounds: int = 50

    def validate(self) -> None:
        if self.T < 1:
            raise ValueError("T must be >= 1")
        if not 0 < self.min_l < self.max_l:
            raise ValueError("need 0 < min_l < max_l")
        if not 0 < self.min_a < self.max_a < 180:
            raise ValueError("need 0 < min_a < max_a < 180")
        if not self.elements:
            raise ValueError("element set must be non-empty")
        for sym in self.elements:
            element(sym)
        if len(set(self.elements)) != len(self.elements):
            raise ValueError("element set has duplicates")
        if self.composition not in ("battery", "none"):
            raise ValueError(f"unknown composition constraint {self.composition!r}")
        if self.composition == "battery" and not set(ALKALI) & set(self.elements):
            raise ValueError("battery constraint needs at least one alkali metal in the element set")
        if self.graph_cutoff <= 0 or self.max_neighbors < 1:
            raise ValueError("graph cutoff and max_neighbors must be positive")

    @property
    def lows(self) -> np.ndarray:
        return np.array([self.min_l] * 3 + [self.min_a] * 3)

    @property
    def ranges(self) -> np.ndarray:
        return np.array([self.max_l - self.min_l] * 3 + [self.max_a - self.min_a] * 3)


class CompositionConstraint:
    """Element mask given the reference atoms placed so far.

    ``battery``: at most one alkali species overall, and one must be present
    after the last step (forced on the last step when still missing).
    """

    def __init__(self, elements, kind: str = "battery"):
        self.elements = tuple(elements)
        self.kind = kind
        self.is_alkali = np.array([e in ALKALI for e in self.elements])

    def mask(self, placed: list[int], remaining: int) -> np.ndarray:
        """``placed`` are element-set indices; ``remaining`` counts this step too."""
        m = np.ones(len(self.elements), dtype=bool)
        if self.kind == "battery":
            present = [i for i in placed if self.is_alkali[i]]
            if present:
                m &= ~self.is_alkali
                m[present[0]] = True
            elif remaining <= 1:
                m &= self.is_alkali
        if not m.any():
            raise ConstraintError("composition constraint leaves no element available")
        return m

    def satisfied(self, placed: list[int]) -> bool:
        if self.kind != "battery":
            return True
        return len({i for i in placed if self.is_alkali[i]}) == 1


@dataclass
class CrystalState:
    sg: int
    lattice: Lattice
    ref_species: tuple[int, ...]  # atomic numbers of reference atoms
    ref_frac: np.ndarray  # (k, 3)
    structure: CrystalStructure
    _graph: CrystalGraph | None = field(default=None, repr=False)

    @classmethod
    def initial(cls) -> "CrystalState":
        return cls(INITIAL_GROUP, INITIAL_LATTICE, (), np.zeros((0, 3)),
                   CrystalStructure(INITIAL_LATTICE, np.zeros(0, np.int64), np.zeros((0, 3))))

    def graph(self, cutoff: float, max_k: int) -> CrystalGraph:
        if self._graph is None:
            self._graph = build_graph(self.structure, cutoff, max_k)
        return self._graph

    @property
    def n_reference(self) -> int:
        return len(self.ref_species)


@dataclass
class StepAction:
    sg: int
    lattice_u: np.ndarray  # (6,) Beta draws in (0,1); only the group's free entries are used
    coord: np.ndarray  # (3,)
    element: int  # index into the element set


@dataclass
class TrajectoryRecord:
    states: list[CrystalState]
    actions: list[StepAction]
    masks: np.ndarray  # (T, n_elements) element masks used at each step
    log_pf_steps: np.ndarray  # (T,) recorded during rollout
    log_pb_steps: np.ndarray | None = None
    reward: float | None = None
    breakdown: object = None

    @property
    def terminal(self) -> CrystalState:
        return self.states[-1]

    @property
    def structure(self) -> CrystalStructure:
        return self.states[-1].structure

    @property
    def log_pf(self) -> float:
        return float(self.log_pf_steps.sum())

    @property
    def log_pb(self) -> float:
        return float(self.log_pb_steps.sum()) if self.log_pb_steps is not None else float("nan")


@dataclass
class ForcedActions:
    """Per-step overrides; ``None`` entries (or short lists) fall back to sampling."""

    sg: list | None = None
    lattice_u: list | None = None
    coord: list | None = None
    element: list | None = None  # element symbols

    def get(self, name: str, t: int):
        seq = getattr(self, name)
        if seq is None or t >= len(seq):
            return None
        return seq[t]


def free_mask(groups) -> np.ndarray:
    """(n, 6) boolean mask of free lattice parameters per space group."""
    out = np.zeros((len(groups), N_LATTICE), dtype=bool)
    for k, g in enumerate(groups):
        free = free_parameters(int(g))
        out[k] = [p in free for p in PARAM_NAMES]
    return out


def lattice_from_unit(u: np.ndarray, group: int, cfg: SamplerConfig) -> Lattice:
    vals = cfg.lows + np.asarray(u) * cfg.ranges
    return project_lattice(Lattice(*vals), group)


class Sampler:
    def __init__(self, policy: Policy, cfg: SamplerConfig):
        cfg.validate()
        if policy.n_elements != len(cfg.elements):
            raise ValueError("policy element head size does not match the element set")
        self.policy = policy
        self.cfg = cfg
        self.z_of = np.array([element(s).z for s in cfg.elements])
        self.constraint = CompositionConstraint(cfg.elements, cfg.composition)
        self.log_ranges = np.log(cfg.ranges)

    def batch(self, states: list[CrystalState]) -> GraphBatch:
        graphs = [s.graph(self.cfg.graph_cutoff, self.cfg.max_neighbors) for s in states]
        return GraphBatch.from_graphs(graphs, [s.lattice for s in states], [s.sg for s in states])

    # -- rollout ---------------------------------------------------------------
    def rollout(self, n: int, rng: np.random.Generator, forced: ForcedActions | None = None):
        """Sample ``n`` accepted trajectories.

        Trajectories whose lattice is degenerate or whose symmetry expansion
        puts different elements on the same site are discarded and replaced.
        Returns (records, n_rejected, steps_visited), where steps_visited
        counts every sampled step including those of discarded trajectories.
        """
        records: list[TrajectoryRecord] = []
        rejected = 0
        visited = 0
        for _ in range(self.cfg.max_resample_rounds):
            need = n - len(records)
            if need <= 0:
                break
            got, rej, steps = self._rollout_round(need, rng, forced)
            records += got
            rejected += rej
            visited += steps
        if len(records) < n:
            raise RuntimeError(f"only {len(records)} of {n} trajectories accepted after resampling")
        return records, rejected, visited

    def draw(self, n: int, rng: np.random.Generator, chunk: int = 64):
        """``rollout`` in chunks of at most ``chunk`` so large draws keep a bounded batch graph."""
        records: list[TrajectoryRecord] = []
        rejected = visited = 0
        while len(records) < n:
            got, rej, steps = self.rollout(min(chunk, n - len(records)), rng)
            records += got
            rejected += rej
            visited += steps
        return records, rejected, visited

    def _rollout_round(self, n, rng, forced):
        cfg, pol = self.cfg, self.policy
        T = cfg.T
        states = [[CrystalState.initial()] for _ in range(n)]
        actions: list[list[StepAction]] = [[] for _ in range(n)]
        masks = [[] for _ in range(n)]
        logpf = [[] for _ in range(n)]
        alive = list(range(n))
        steps = 0
        with ad.no_grad():
            for t in range(T):
                if not alive:
                    break
                steps += len(alive)
                cur = [states[i][-1] for i in alive]
                h = pol.encode(self.batch(cur))
                sg_lp = ad.log_softmax(pol.sg_logits(h)).data
                sg = sample_categorical(rng, sg_lp) + 1
                fsg = forced.get("sg", t) if forced else None
                if fsg is not None:
                    sg[:] = int(fsg)
                la, lb, ca, cb, el = pol.atom_lattice(h, sg)
                lat_u = sample_beta(rng, la.data, lb.data)
                crd = sample_beta(rng, ca.data, cb.data)
                if forced and forced.get("lattice_u", t) is not None:
                    lat_u[:] = np.asarray(forced.get("lattice_u", t), dtype=np.float64)
                if forced and forced.get("coord", t) is not None:
                    crd[:] = np.asarray(forced.get("coord", t), dtype=np.float64)
                m = np.array([self.constraint.mask([a.element for a in actions[i]], T - t) for i in alive])
                el_lp = ad.log_softmax(el, m).data
                el_idx = sample_categorical(rng, el_lp)
                fel = forced.get("element", t) if forced else None
                if fel is not None:
                    k = cfg.elements.index(fel)
                    if not m[:, k].all():
                        raise ConstraintError(f"forced element {fel} is masked at step {t + 1}")
                    el_idx[:] = k
                fm = free_mask(sg)
                lp = (sg_lp[np.arange(len(alive)), sg - 1]
                      + ((beta_log_prob(lat_u, la, lb).data - self.log_ranges) * fm).sum(axis=1)
                      + beta_log_prob(crd, ca, cb).data.sum(axis=1)
                      + el_lp[np.arange(len(alive)), el_idx])
                still = []
                for k, i in enumerate(alive):
                    act = StepAction(int(sg[k]), lat_u[k].copy(), crd[k].copy(), int(el_idx[k]))
                    nxt = self._advance(states[i][-1], act)
                    if nxt is None:
                        continue
                    states[i].append(nxt)
                    actions[i].append(act)
                    masks[i].append(m[k])
                    logpf[i].append(lp[k])
                    still.append(i)
                alive = still
        records = [TrajectoryRecord(states[i], actions[i], np.array(masks[i]), np.array(logpf[i])) for i in alive]
        return records, n - len(alive), steps

    def _advance(self, state: CrystalState, act: StepAction) -> CrystalState | None:
        try:
            lattice = lattice_from_unit(act.lattice_u, act.sg, self.cfg)
        except ValueError:
            return None
        if lattice.volume_factor < self.cfg.min_volume_factor:
            return None
        species = state.ref_species + (int(self.z_of[act.element]),)
        frac = np.vstack([state.ref_frac, act.coord[None, :]])
        try:
            structure = expand_structure(list(zip(species, frac)), act.sg, lattice)
        except (SymmetryCollisionError, DegenerateLatticeError):
            return None
        return CrystalState(act.sg, lattice, species, frac, structure)

    # -- differentiable log-densities ------------------------------------------
    def replay(self, records: list[TrajectoryRecord]) -> tuple[Tensor, Tensor]:
        """(sum log P_F, sum log P_B) per trajectory, as differentiable tensors.

        P_B(s0 | s1) is 1: the predecessor of any one-atom state is the fixed
        initial state. For t >= 2 the backward policy scores the previous
        space group and that state's free lattice parameters; the removed
        reference atom is always the last one, so it carries no density.
        """
        pol = self.policy
        T = self.cfg.T
        B = len(records)
        for r in records:
            if len(r.actions) != T:
                raise ValueError("replay needs complete trajectories of length T")
        all_states = [s for r in records for s in r.states]
        h = pol.encode(self.batch(all_states))
        stride = T + 1
        rows_f = np.array([i * stride + t for i in range(B) for t in range(T)])
        acts = [a for r in records for a in r.actions]
        sg = np.array([a.sg for a in acts])
        lat_u = np.array([a.lattice_u for a in acts])
        crd = np.array([a.coord for a in acts])
        el_idx = np.array([a.element for a in acts])
        masks = np.concatenate([r.masks for r in records]).astype(bool)
        traj = np.repeat(np.arange(B), T)

        hf = ad.take_rows(h, rows_f)
        sg_lp = ad.take_along(ad.log_softmax(pol.sg_logits(hf)), sg - 1)
        la, lb, ca, cb, el = pol.atom_lattice(hf, sg)
        fm = free_mask(sg)
        lat_lp = ((beta_log_prob(lat_u, la, lb) - self.log_ranges) * fm).sum(axis=1)
        crd_lp = beta_log_prob(crd, ca, cb).sum(axis=1)
        el_lp = ad.take_along(ad.log_softmax(el, masks), el_idx)
        step_f = sg_lp + lat_lp + crd_lp + el_lp
        log_pf = ad.segment_sum(step_f, traj, B)

        if T == 1:
            log_pb = Tensor(np.zeros(B))
            step_b_data = np.zeros((B, 1))
        else:
            # state s_t (t = 2..T) predicts s_{t-1}'s group and lattice
            rows_b = np.array([i * stride + t for i in range(B) for t in range(2, T + 1)])
            prev = np.array([i * T + t - 2 for i in range(B) for t in range(2, T + 1)])
            hb = ad.take_rows(h, rows_b)
            psg = sg[prev]
            b_sg = ad.take_along(ad.log_softmax(pol.back_sg_logits(hb)), psg - 1)
            ba, bb = pol.back_lattice(hb, psg)
            b_lat = ((beta_log_prob(lat_u[prev], ba, bb) - self.log_ranges) * free_mask(psg)).sum(axis=1)
            step_b = b_sg + b_lat
            log_pb = ad.segment_sum(step_b, np.repeat(np.arange(B), T - 1), B)
            step_b_data = np.concatenate([np.zeros((B, 1)), step_b.data.reshape(B, T - 1)], axis=1)
        for i, r in enumerate(records):
            r.log_pb_steps = step_b_data[i]
        return log_pf, log_pb


def tb_loss(log_z: Tensor, log_pf: Tensor, log_pb: Tensor, log_reward) -> Tensor:
    """Mean squared trajectory-balance residual (log Z + log P_F - log R - log P_B)^2."""
    log_reward = np.asarray(log_reward, dtype=np.float64)
    if not np.all(np.isfinite(log_reward)):
        raise FloatingPointError("non-finite log-reward in trajectory-balance loss")
    resid = log_z + log_pf - Tensor(log_reward) - log_pb
    return ad.mean(resid * resid)


def log_reward_floor(r, floor: float = 1e-8) -> np.ndarray:
    return np.log(np.maximum(np.asarray(r, dtype=np.float64), floor))
