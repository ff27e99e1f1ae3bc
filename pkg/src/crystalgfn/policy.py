"""Forward/backward policy networks for the two-level (space group, atom-lattice) sampler.

All states in a batch are encoded in one pass over a block-diagonal graph.
The state embedding is ``[h_sg, h_G, h_L]``: a space-group embedding, a
mean-pooled message-passing embedding of the crystal graph, and an MLP
embedding of the lattice features ``[a, b, c, sin/cos of each angle]``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, asdict, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .checkpoint import load_arrays, save_arrays
from .crystal import CrystalGraph, Lattice

N_GROUPS = 230
N_LATTICE = 6
BETA_FLOOR = 1e-4
UNIT_CLIP = 1e-6
LENGTH_SCALE = 10.0  # Angstrom; lengths enter the lattice MLP divided by this
ENCODERS = ("megnet", "gcn")


@dataclass
class PolicyConfig:
    encoder: str = "megnet"
    width: int = 64
    n_layers: int = 2
    head_hidden: int = 64
    n_rbf: int = 16
    rbf_cutoff: float = 8.0
    use_frac_features: bool = True
    hierarchical: bool = True  # False: atom-lattice heads ignore the chosen space group
    beta_init: float = 3.0  # initial Beta concentrations (unimodal, centred)

    def validate(self) -> None:
        if self.encoder not in ENCODERS:
            raise ValueError(f"encoder must be one of {ENCODERS}, got {self.encoder!r}")
        for name in ("width", "head_hidden", "n_rbf"):
            if getattr(self, name) < 1:
                raise ValueError(f"policy {name} must be >= 1")
        if self.n_layers < 0:
            raise ValueError("policy n_layers must be >= 0")
        if self.beta_init <= BETA_FLOOR:
            raise ValueError("beta_init must exceed the concentration floor")


def lattice_features(lattice: Lattice) -> np.ndarray:
    """[a, b, c, sin a, cos a, sin b, cos b, sin g, cos g] with angles in radians."""
    a, b, c, al, be, ga = lattice.params
    ang = np.radians([al, be, ga])
    return np.array([a, b, c, math.sin(ang[0]), math.cos(ang[0]), math.sin(ang[1]),
                     math.cos(ang[1]), math.sin(ang[2]), math.cos(ang[2])])


@dataclass
class GraphBatch:
    """Block-diagonal union of per-state graphs."""

    node_z: np.ndarray
    node_frac: np.ndarray
    node_graph: np.ndarray
    src: np.ndarray
    dst: np.ndarray
    distance: np.ndarray
    lattice_feats: np.ndarray  # (n_graphs, 9)
    groups: np.ndarray  # (n_graphs,) space-group numbers
    n_graphs: int

    @property
    def n_nodes(self) -> int:
        return len(self.node_z)

    @classmethod
    def from_graphs(cls, graphs: list[CrystalGraph], lattices: list[Lattice], groups) -> "GraphBatch":
        zs, fr, gid, src, dst, dist = [], [], [], [], [], []
        offset = 0
        for k, g in enumerate(graphs):
            zs.append(g.species)
            fr.append(g.frac)
            gid.append(np.full(g.n_nodes, k, dtype=np.int64))
            src.append(g.src + offset)
            dst.append(g.dst + offset)
            dist.append(g.distance)
            offset += g.n_nodes
        cat_i = lambda xs: np.concatenate(xs).astype(np.int64) if xs else np.zeros(0, np.int64)
        return cls(
            cat_i(zs), np.concatenate(fr).reshape(-1, 3) if fr else np.zeros((0, 3)), cat_i(gid),
            cat_i(src), cat_i(dst), np.concatenate(dist) if dist else np.zeros(0),
            np.array([lattice_features(l) for l in lattices]).reshape(-1, 9),
            np.asarray(groups, dtype=np.int64), len(graphs),
        )


def _glorot(rng: np.random.Generator, n_in: int, n_out: int) -> np.ndarray:
    lim = math.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-lim, lim, size=(n_in, n_out))


def inverse_softplus(y: float) -> float:
    return y + math.log(-math.expm1(-y))


class Policy:
    """Parameters plus the forward/backward distribution heads."""

    def __init__(self, cfg: PolicyConfig, n_elements: int, seed: int = 0):
        cfg.validate()
        if n_elements < 1:
            raise ValueError("element set must be non-empty")
        self.cfg = cfg
        self.n_elements = n_elements
        self.params: dict[str, Tensor] = {}
        rng = np.random.default_rng(seed)
        w, hh = cfg.width, cfg.head_hidden
        self._linear("node_embed", 95, w, rng)  # row per atomic number, bias unused
        if cfg.use_frac_features:
            self._linear("node_frac", 3, w, rng)
        self._linear("edge_rbf", cfg.n_rbf, w, rng)
        for layer in range(cfg.n_layers):
            p = f"gnn{layer}"
            if cfg.encoder == "megnet":
                self._mlp(f"{p}.phi_e", [3 * w, w, w], rng)
                self._mlp(f"{p}.phi_v", [2 * w, w, w], rng)
            else:
                self._linear(f"{p}.gcn", w, w, rng)
        self._mlp("lattice", [9, w, w], rng)
        self._linear("sg_embed", N_GROUPS, w, rng)
        d = 3 * w
        beta_bias = inverse_softplus(cfg.beta_init - BETA_FLOOR)
        self._mlp("f_sg", [d, hh, N_GROUPS], rng, zero_last=True)
        al_in = d + w if cfg.hierarchical else d
        if cfg.hierarchical:
            self._linear("f_al_sg", N_GROUPS, w, rng)
        self._mlp("f_al", [al_in, hh, hh], rng)
        self._linear("f_lat", hh, 2 * N_LATTICE, rng, zero=True, bias=beta_bias)
        self._linear("f_coord", hh, 6, rng, zero=True, bias=beta_bias)
        self._linear("f_elem", hh, n_elements, rng, zero=True)
        self._mlp("b_sg", [d, hh, N_GROUPS], rng, zero_last=True)
        b_in = d + w if cfg.hierarchical else d
        if cfg.hierarchical:
            self._linear("b_lat_sg", N_GROUPS, w, rng)
        self._mlp("b_lat", [b_in, hh], rng)
        self._linear("b_lat_out", hh, 2 * N_LATTICE, rng, zero=True, bias=beta_bias)
        self.params["logZ"] = Tensor(0.0, requires_grad=True, name="logZ")

    # -- parameter construction ----------------------------------------------
    def _linear(self, name, n_in, n_out, rng, zero=False, bias=0.0):
        W = np.zeros((n_in, n_out)) if zero else _glorot(rng, n_in, n_out)
        self.params[f"{name}.W"] = Tensor(W, requires_grad=True, name=f"{name}.W")
        self.params[f"{name}.b"] = Tensor(np.full(n_out, float(bias)), requires_grad=True, name=f"{name}.b")

    def _mlp(self, name, sizes, rng, zero_last=False):
        for k in range(len(sizes) - 1):
            last = k == len(sizes) - 2
            self._linear(f"{name}.{k}", sizes[k], sizes[k + 1], rng, zero=zero_last and last)

    def lin(self, name, x) -> Tensor:
        return x @ self.params[f"{name}.W"] + self.params[f"{name}.b"]

    def mlp(self, name, x, n_layers, final_act=False) -> Tensor:
        for k in range(n_layers):
            x = self.lin(f"{name}.{k}", x)
            if k < n_layers - 1 or final_act:
                x = ad.silu(x)
        return x

    def embed(self, name, idx) -> Tensor:
        """Embedding lookup: row ``idx`` of the weight table plus the bias."""
        return ad.take_rows(self.params[f"{name}.W"], idx) + self.params[f"{name}.b"]

    @property
    def n_parameters(self) -> int:
        return sum(t.data.size for t in self.params.values())

    # -- encoder ---------------------------------------------------------------
    def rbf(self, d: np.ndarray) -> np.ndarray:
        centers = np.linspace(0.0, self.cfg.rbf_cutoff, self.cfg.n_rbf)
        gamma = (self.cfg.n_rbf / self.cfg.rbf_cutoff) ** 2
        return np.exp(-gamma * (d[:, None] - centers[None, :]) ** 2)

    def encode_graph(self, batch: GraphBatch) -> Tensor:
        """Mean-pooled node states per graph; graphs without nodes embed to zeros."""
        cfg = self.cfg
        v = self.embed("node_embed", batch.node_z)
        if cfg.use_frac_features:
            v = v + self.lin("node_frac", Tensor(batch.node_frac))
        n = batch.n_nodes
        if cfg.encoder == "megnet":
            e = self.lin("edge_rbf", Tensor(self.rbf(batch.distance)))
            for layer in range(cfg.n_layers):
                p = f"gnn{layer}"
                e_in = ad.concat([ad.take_rows(v, batch.src), ad.take_rows(v, batch.dst), e], axis=1)
                e = e + self.mlp(f"{p}.phi_e", e_in, 2)
                agg = ad.segment_mean(e, batch.dst, n)
                v = v + self.mlp(f"{p}.phi_v", ad.concat([agg, v], axis=1), 2)
        else:
            deg = np.bincount(batch.dst, minlength=n).astype(np.float64) + 1.0
            norm = 1.0 / np.sqrt(deg[batch.src] * deg[batch.dst])
            for layer in range(cfg.n_layers):
                msg = ad.take_rows(v, batch.src) * norm[:, None]
                agg = ad.segment_sum(msg, batch.dst, n) + v * (1.0 / deg)[:, None]
                v = v + ad.silu(self.lin(f"gnn{layer}.gcn", agg))
        # pooled node states are masked so empty graphs give exact zeros
        return ad.segment_mean(v, batch.node_graph, batch.n_graphs)

    def encode(self, batch: GraphBatch) -> Tensor:
        lat = batch.lattice_feats.copy()
        lat[:, :3] /= LENGTH_SCALE
        h_l = self.mlp("lattice", Tensor(lat), 2, final_act=True)
        h_g = self.encode_graph(batch)
        h_sg = self.embed("sg_embed", batch.groups - 1)
        return ad.concat([h_sg, h_g, h_l], axis=1)

    # -- heads -------------------------------------------------------------------
    def sg_logits(self, h: Tensor) -> Tensor:
        return self.mlp("f_sg", h, 2)

    def atom_lattice(self, h: Tensor, new_groups) -> tuple[Tensor, Tensor, Tensor, Tensor, Tensor]:
        """Beta (alpha, beta) for 6 lattice params, 3 coordinates, and element logits."""
        x = h
        if self.cfg.hierarchical:
            x = ad.concat([h, self.embed("f_al_sg", np.asarray(new_groups) - 1)], axis=1)
        t = self.mlp("f_al", x, 2, final_act=True)
        lat = ad.softplus(self.lin("f_lat", t)) + BETA_FLOOR
        crd = ad.softplus(self.lin("f_coord", t)) + BETA_FLOOR
        elem = self.lin("f_elem", t)
        return lat[:, :N_LATTICE], lat[:, N_LATTICE:], crd[:, :3], crd[:, 3:], elem

    def back_sg_logits(self, h: Tensor) -> Tensor:
        return self.mlp("b_sg", h, 2)

    def back_lattice(self, h: Tensor, prev_groups) -> tuple[Tensor, Tensor]:
        x = h
        if self.cfg.hierarchical:
            x = ad.concat([h, self.embed("b_lat_sg", np.asarray(prev_groups) - 1)], axis=1)
        t = self.mlp("b_lat", x, 1, final_act=True)
        lat = ad.softplus(self.lin("b_lat_out", t)) + BETA_FLOOR
        return lat[:, :N_LATTICE], lat[:, N_LATTICE:]

    # -- persistence -------------------------------------------------------------
    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.params.items()}

    def load(self, arrays: dict[str, np.ndarray]) -> None:
        for k, t in self.params.items():
            if k not in arrays:
                raise KeyError(f"checkpoint lacks parameter '{k}'")
            if arrays[k].shape != t.data.shape:
                raise ValueError(f"parameter '{k}' has shape {arrays[k].shape}, expected {t.data.shape}")
            t.data = np.array(arrays[k], dtype=np.float64)

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        meta = dict(meta or {})
        meta["policy"] = asdict(self.cfg)
        meta["n_elements"] = self.n_elements
        save_arrays(path, self.arrays(), meta)

    @classmethod
    def from_checkpoint(cls, path: str | Path) -> tuple["Policy", dict, dict]:
        arrays, meta = load_arrays(path)
        pol = cls(PolicyConfig(**meta["policy"]), int(meta["n_elements"]))
        pol.load(arrays)
        return pol, arrays, meta


def beta_log_prob(x, alpha: Tensor, beta: Tensor) -> Tensor:
    """Elementwise Beta log-density; ``x`` is data, clipped into the open unit interval."""
    x = np.clip(np.asarray(x, dtype=np.float64), UNIT_CLIP, 1.0 - UNIT_CLIP)
    lx, l1x = Tensor(np.log(x)), Tensor(np.log1p(-x))
    return ((alpha - 1.0) * lx + (beta - 1.0) * l1x
            + ad.lgamma(alpha + beta) - ad.lgamma(alpha) - ad.lgamma(beta))


def sample_beta(rng: np.random.Generator, alpha: np.ndarray, beta: np.ndarray) -> np.ndarray:
    return np.clip(rng.beta(alpha, beta), UNIT_CLIP, 1.0 - UNIT_CLIP)


def sample_categorical(rng: np.random.Generator, logp: np.ndarray) -> np.ndarray:
    """One draw per row from row-wise log-probabilities (-inf allowed)."""
    p = np.exp(logp - logp.max(axis=1, keepdims=True))
    p /= p.sum(axis=1, keepdims=True)
    c = np.cumsum(p, axis=1)
    u = rng.random(len(p)) * c[:, -1]
    # zero-mass entries repeat the previous cumulative value and are never chosen
    return np.array([np.searchsorted(row, x, side="right") for row, x in zip(c, u)], dtype=np.int64)
