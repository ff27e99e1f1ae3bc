"""Physics-informed reward: formation energy, bond lengths, density, charge neutrality, band gap."""
from __future__ import annotations

import csv
import io
import logging
import math
from dataclasses import dataclass, field, asdict
from importlib import resources
from pathlib import Path

import numpy as np

from .crystal import CrystalStructure, DegenerateLatticeError, density, neighbor_chunks, neighbor_list
from .elements import element
from .oracles import OracleError, PropertyOracle, clamp_energy

log = logging.getLogger(__name__)

REWARD_FLOOR = 1e-8


class BondStatsError(ValueError):
    pass


class BondStatsTable:
    """Unordered element pair -> (d_min, d_avg) in Angstrom."""

    def __init__(self, entries: dict[tuple[int, int], tuple[float, float]] | None = None):
        self._entries: dict[tuple[int, int], tuple[float, float]] = {}
        for (a, b), (dmin, davg) in (entries or {}).items():
            self.add(a, b, dmin, davg)

    @staticmethod
    def _key(a: int, b: int) -> tuple[int, int]:
        return (a, b) if a <= b else (b, a)

    def add(self, a, b, d_min: float, d_avg: float) -> None:
        a = element(a).z
        b = element(b).z
        if not (0 < d_min <= d_avg):
            raise BondStatsError(f"{element(a).symbol}-{element(b).symbol}: need 0 < d_min <= d_avg")
        key = self._key(a, b)
        if key in self._entries:
            raise BondStatsError(f"duplicate pair {element(a).symbol}-{element(b).symbol}")
        self._entries[key] = (float(d_min), float(d_avg))

    def get(self, a: int, b: int) -> tuple[float, float] | None:
        return self._entries.get(self._key(int(a), int(b)))

    def __getitem__(self, pair) -> tuple[float, float]:
        a, b = (element(x).z for x in pair)
        out = self.get(a, b)
        if out is None:
            raise KeyError(f"no bond statistics for {element(a).symbol}-{element(b).symbol}")
        return out

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, pair) -> bool:
        a, b = (element(x).z for x in pair)
        return self.get(a, b) is not None

    def items(self):
        return self._entries.items()

    @classmethod
    def from_csv_text(cls, text: str, source: str = "<text>") -> "BondStatsTable":
        table = cls()
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.lstrip().startswith("#")]
        reader = csv.DictReader(io.StringIO("\n".join(lines)))
        required = {"element_a", "element_b", "d_min", "d_avg"}
        if not reader.fieldnames or not required <= set(reader.fieldnames):
            raise BondStatsError(f"{source}: header must contain {sorted(required)}")
        for rowno, row in enumerate(reader, start=1):
            try:
                dmin, davg = float(row["d_min"]), float(row["d_avg"])
                table.add(row["element_a"].strip(), row["element_b"].strip(), dmin, davg)
            except (BondStatsError, KeyError, ValueError) as exc:
                raise BondStatsError(f"{source}: data row {rowno}: {exc}") from None
        return table

    @classmethod
    def from_csv(cls, path: str | Path) -> "BondStatsTable":
        return cls.from_csv_text(Path(path).read_text(), str(path))

    @classmethod
    def default(cls) -> "BondStatsTable":
        text = resources.files("crystalgfn.data").joinpath("bond_stats.csv").read_text()
        return cls.from_csv_text(text, "bond_stats.csv")

    def to_csv_text(self) -> str:
        out = ["element_a,element_b,d_min,d_avg"]
        for (a, b), (dmin, davg) in sorted(self._entries.items()):
            out.append(f"{element(a).symbol},{element(b).symbol},{dmin!r},{davg!r}")
        return "\n".join(out) + "\n"


@dataclass
class RewardConfig:
    w_e: float = 0.2
    w_p: float = 0.2
    w_b: float = 0.5
    w_c: float = 0.1
    w_bg: float = 0.0
    energy_temperature: float = 1.0  # eV/atom
    density_a: float = 1.0
    density_b: float = 3.0  # g/cm^3
    density_c: float = 1.5  # g/cm^3
    bond_cutoff: float = 4.0  # Angstrom
    bg_a: float = 3.0
    bg_b: float = 0.0
    bg_c: float = 0.5

    def validate(self) -> None:
        for name in ("w_e", "w_p", "w_b", "w_c", "w_bg"):
            if getattr(self, name) < 0:
                raise ValueError(f"reward weight {name} must be >= 0")
        for name in ("energy_temperature", "density_c", "bg_c", "bond_cutoff"):
            if getattr(self, name) <= 0:
                raise ValueError(f"reward parameter {name} must be > 0")


@dataclass
class RewardBreakdown:
    r_energy: float
    r_bond: float
    r_density: float
    r_comp: float
    composite: float
    n_bond: int
    energy: float
    r_bandgap: float | None = None
    flags: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def energy_term(structure: CrystalStructure, oracle: PropertyOracle, temperature: float = 1.0) -> tuple[float, float, list[str]]:
    """exp(-E/T) with E clamped to [-10, 10] eV/atom; oracle failure scores E=+10."""
    if len(structure) == 0:
        raise ValueError("energy term needs a non-empty structure")
    flags = []
    try:
        e = clamp_energy(oracle(structure))
    except (OracleError, ValueError, DegenerateLatticeError) as exc:
        flags.append(f"energy oracle failed: {exc}")
        e = 10.0
    flags.extend(getattr(oracle, "flags", []) or [])
    return math.exp(-e / temperature), e, flags


def bond_penalty(bonds, stats: BondStatsTable) -> float:
    """Raw bond score: mean |d - d_avg| plus the sum of exp(2 (d_min - d)).

    ``bonds`` is a sequence of (Z_a, Z_b, distance); each undirected bond once.
    """
    bonds = list(bonds)
    if not bonds:
        return 0.0
    n_bond = len(bonds)
    raw = 0.0
    for za, zb, d in bonds:
        entry = stats.get(za, zb)
        if entry is None:
            raise KeyError(f"no bond statistics for {element(za).symbol}-{element(zb).symbol}")
        dmin, davg = entry
        raw += abs(d - davg) / n_bond + math.exp(2.0 * (dmin - d))
    return raw


def _undirected(nl):
    # keep one direction of each (i, j, image) / (j, i, -image) pair
    img = nl.image
    first_nonzero = np.where(img[:, 0] != 0, img[:, 0], np.where(img[:, 1] != 0, img[:, 1], img[:, 2]))
    return (nl.src < nl.dst) | ((nl.src == nl.dst) & (first_nonzero > 0))


def structure_bonds(structure: CrystalStructure, cutoff: float = 4.0) -> list[tuple[int, int, float]]:
    """Undirected periodic bonds within ``cutoff``, including bonds to adjacent cells."""
    nl = neighbor_list(structure, cutoff)
    keep = _undirected(nl)
    z = structure.species
    return [(int(z[i]), int(z[j]), float(d)) for i, j, d in zip(nl.src[keep], nl.dst[keep], nl.distance[keep])]


def bond_term(structure: CrystalStructure, stats: BondStatsTable, cutoff: float = 4.0) -> tuple[float, int]:
    """(exp(-raw), n_bond); zero bonds give a score of 1.

    Same value as ``bond_penalty(structure_bonds(...))`` accumulated per
    neighbor chunk, so very dense cells do not build a Python list of bonds.
    """
    z = structure.species
    n_bond, dev, rep = 0, 0.0, 0.0
    for nl in neighbor_chunks(structure, cutoff):
        keep = _undirected(nl)
        za, zb, d = z[nl.src[keep]], z[nl.dst[keep]], nl.distance[keep]
        n_bond += len(d)
        lo, hi = np.minimum(za, zb), np.maximum(za, zb)
        for a, b in set(zip(lo.tolist(), hi.tolist())):
            entry = stats.get(a, b)
            if entry is None:
                raise KeyError(f"no bond statistics for {element(a).symbol}-{element(b).symbol}")
            sel = (lo == a) & (hi == b)
            dev += float(np.abs(d[sel] - entry[1]).sum())
            rep += float(np.exp(2.0 * (entry[0] - d[sel])).sum())
    if n_bond == 0:
        return 1.0, 0
    return math.exp(-(dev / n_bond + rep)), n_bond


def gaussian(x: float, a: float, b: float, c: float) -> float:
    return a * math.exp(-((x - b) ** 2) / (2.0 * c * c))


def density_term(structure: CrystalStructure, cfg: RewardConfig) -> float:
    return gaussian(density(structure), cfg.density_a, cfg.density_b, cfg.density_c)


def charge_neutral(composition: dict[int, int]) -> bool | None:
    """Whether one oxidation state per element can make the formula neutral.

    Dynamic programming over reachable total charges. None when an element
    has no oxidation-state data.
    """
    reachable = {0}
    for z, count in sorted(composition.items()):
        states = element(z).oxidation_states
        if not states:
            return None
        reachable = {s + count * q for s in reachable for q in states}
    return 0 in reachable


def composition_term(structure: CrystalStructure) -> tuple[int, list[str]]:
    neutral = charge_neutral(structure.reduced_composition())
    if neutral is None:
        return 0, ["element without oxidation-state data"]
    return int(neutral), []


def band_gap_term(structure: CrystalStructure, gap_oracle: PropertyOracle | None, cfg: RewardConfig) -> float | None:
    if gap_oracle is None:
        log.warning("band-gap term requested without a gap oracle; term omitted")
        return None
    gap = float(gap_oracle(structure))
    return gaussian(gap, cfg.bg_a, cfg.bg_b, cfg.bg_c)


def composite_reward(structure: CrystalStructure, cfg: RewardConfig, energy_oracle: PropertyOracle,
                     bond_stats: BondStatsTable, gap_oracle: PropertyOracle | None = None) -> RewardBreakdown:
    """Weighted sum of the enabled terms, with the per-term breakdown."""
    if len(structure) == 0:
        raise ValueError("reward is defined only for terminal structures with at least one atom")
    flags: list[str] = []
    r_e, e, f = energy_term(structure, energy_oracle, cfg.energy_temperature)
    flags += f
    try:
        r_b, n_bond = bond_term(structure, bond_stats, cfg.bond_cutoff)
    except KeyError as exc:
        flags.append(str(exc))
        r_b, n_bond = 0.0, 0
    try:
        r_p = density_term(structure, cfg)
    except (DegenerateLatticeError, ValueError) as exc:
        flags.append(f"density failed: {exc}")
        r_p = 0.0
    r_c, f = composition_term(structure)
    flags += f
    composite = cfg.w_e * r_e + cfg.w_p * r_p + cfg.w_b * r_b + cfg.w_c * r_c
    r_bg = None
    if cfg.w_bg > 0:
        try:
            r_bg = band_gap_term(structure, gap_oracle, cfg)
        except OracleError as exc:
            flags.append(f"gap oracle failed: {exc}")
        if r_bg is not None:
            composite += cfg.w_bg * r_bg
        else:
            flags.append("band-gap term omitted")
    if not math.isfinite(composite):
        flags.append("non-finite composite replaced by 0")
        composite = 0.0
    return RewardBreakdown(r_e, r_b, r_p, float(r_c), composite, n_bond, e, r_bg, flags)
