"""Evaluation metrics: validity, fingerprint diversity, family diversity, modes, structure matching."""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment
from scipy.spatial.distance import pdist

from .crystal import CrystalStructure, neighbor_list
from .elements import element
from .reward import charge_neutral
from .spacegroup import FAMILIES, crystal_family

MIN_DISTANCE = 0.5  # Angstrom, validity threshold (strict)
FP_CUTOFF = 8.0
FP_BIN = 0.5
BOND_FACTOR = 1.25  # neighbors within 1.25 x covalent-radius sum count toward coordination
COMPOSITION_PROPERTIES = ("z", "mass", "electronegativity", "covalent_radius", "row", "group")


def structure_validity(structure: CrystalStructure, threshold: float = MIN_DISTANCE) -> bool:
    """True iff every periodic interatomic distance (self-images included) exceeds ``threshold``."""
    if len(structure) == 0:
        raise ValueError("validity of an empty structure is undefined")
    return len(neighbor_list(structure, threshold)) == 0


def composition_validity(structure: CrystalStructure) -> bool:
    return bool(charge_neutral(structure.reduced_composition()))


def structure_fingerprint(structure: CrystalStructure, cutoff: float = FP_CUTOFF, bin_width: float = FP_BIN) -> np.ndarray:
    """Site-averaged [coordination, distance histogram (fractions), mean, std of distances].

    A simplified stand-in for a CrystalNN-style site fingerprint: coordination
    counts neighbors within 1.25 x the covalent-radius sum, the histogram
    covers 0..cutoff in fixed bins, and distances are those within cutoff.
    """
    if len(structure) == 0:
        raise ValueError("fingerprint of an empty structure is undefined")
    n_bins = int(round(cutoff / bin_width))
    nl = neighbor_list(structure, cutoff)
    radii = np.array([element(int(z)).covalent_radius for z in structure.species])
    n = len(structure)
    sites = np.zeros((n, n_bins + 3))
    for i in range(n):
        sel = nl.src == i
        d = nl.distance[sel]
        if len(d) == 0:
            continue
        bonded = d <= BOND_FACTOR * (radii[i] + radii[nl.dst[sel]])
        hist = np.histogram(d, bins=n_bins, range=(0.0, cutoff))[0] / len(d)
        sites[i] = np.concatenate([[bonded.sum()], hist, [d.mean(), d.std()]])
    return sites.mean(axis=0)


def _element_props(z: int) -> np.ndarray:
    e = element(z)
    return np.array([e.z, e.mass, e.electronegativity or 0.0, e.covalent_radius, e.row, e.group], dtype=np.float64)


def composition_fingerprint(structure: CrystalStructure) -> np.ndarray:
    """Stoichiometry-weighted mean, std, min, max and range of element properties."""
    comp = structure.reduced_composition()
    if not comp:
        raise ValueError("fingerprint of an empty structure is undefined")
    props = np.array([_element_props(z) for z in comp])
    w = np.array(list(comp.values()), dtype=np.float64)
    w /= w.sum()
    mean = w @ props
    std = np.sqrt(np.maximum(w @ (props - mean) ** 2, 0.0))
    lo, hi = props.min(axis=0), props.max(axis=0)
    return np.concatenate([mean, std, lo, hi, hi - lo])


def fingerprint(structure: CrystalStructure, kind: str) -> np.ndarray:
    if kind == "structure":
        return structure_fingerprint(structure)
    if kind == "composition":
        return composition_fingerprint(structure)
    raise ValueError(f"unknown fingerprint kind {kind!r}")


def diversity(items, kind: str = "structure") -> float:
    """Mean pairwise Euclidean distance between fingerprints over unordered pairs.

    ``items`` may be structures or precomputed fingerprint vectors.
    """
    items = list(items)
    if len(items) < 2:
        raise ValueError("diversity needs at least two items")
    fps = np.array([fingerprint(s, kind) if isinstance(s, CrystalStructure) else np.asarray(s, float) for s in items])
    return float(pdist(fps).mean())


def crystal_family_diversity(groups) -> float:
    """Shannon index -sum p ln p of space-group numbers binned into the six families."""
    groups = list(groups)
    if not groups:
        raise ValueError("family diversity needs at least one space group")
    counts = Counter(crystal_family(int(g)) for g in groups)
    n = len(groups)
    h = 0.0
    for fam in FAMILIES:
        c = counts.get(fam, 0)
        if c:
            p = c / n
            h -= p * math.log(p)
    return h + 0.0


def composition_key(structure: CrystalStructure) -> tuple[tuple[int, int], ...]:
    return tuple(sorted(structure.reduced_composition().items()))


@dataclass
class ModeRegistry:
    """Counts unique modes: valid distances, charge neutral, negative energy, unseen composition."""

    seen: set = field(default_factory=set)
    checked: int = 0

    def observe(self, structure: CrystalStructure, energy: float) -> bool:
        self.checked += 1
        if not energy < 0.0:
            return False
        key = composition_key(structure)
        if key in self.seen:
            return False
        if not structure_validity(structure) or not composition_validity(structure):
            return False
        self.seen.add(key)
        return True

    @property
    def count(self) -> int:
        return len(self.seen)

    def to_list(self) -> list:
        return [list(map(list, k)) for k in sorted(self.seen)]

    @classmethod
    def from_list(cls, items, checked: int = 0) -> "ModeRegistry":
        return cls({tuple(tuple(p) for p in k) for k in items}, checked)


def count_modes(structures, energy_oracle, registry: ModeRegistry | None = None) -> int:
    reg = registry if registry is not None else ModeRegistry()
    for s in structures:
        reg.observe(s, energy_oracle(s))
    return reg.count


@dataclass(frozen=True)
class MatchTolerances:
    angle_tol: float = 10.0  # degrees
    length_tol: float = 1.0  # relative, after scaling to equal volume per atom
    site_tol: float = 1.0  # in units of (volume per atom)^(1/3)

    def __post_init__(self):
        if min(self.angle_tol, self.length_tol, self.site_tol) <= 0:
            raise ValueError("match tolerances must be positive")


_NEIGHBOR_CELLS = np.array([[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)], dtype=np.float64)


def _min_image(df: np.ndarray, m: np.ndarray) -> np.ndarray:
    """Shortest Cartesian vectors for fractional differences ``df`` (..., 3)."""
    df = df - np.rint(df)
    cand = (df[..., None, :] + _NEIGHBOR_CELLS) @ m
    k = np.argmin((cand ** 2).sum(axis=-1), axis=-1)
    return np.take_along_axis(cand, k[..., None, None], axis=-2)[..., 0, :]


def match_structures(a: CrystalStructure, b: CrystalStructure, tol: MatchTolerances = MatchTolerances()) -> tuple[bool, float]:
    """Simplified structure matcher; returns (matched, rms displacement in Angstrom).

    Requires equal reduced compositions and atom counts, angles within
    ``angle_tol``, lengths (after scaling both cells to the mean volume) within
    ``length_tol`` relative, and a per-species optimal site assignment whose
    largest displacement, after removing the best common translation, is at
    most ``site_tol * (V/N)^(1/3)``. Candidate translations map the first site
    of the rarest species in ``a`` onto each same-species site of ``b``.
    The rms is ``inf`` when not matched.
    """
    if len(a) == 0 or len(b) == 0:
        raise ValueError("matching needs non-empty structures")
    if a.reduced_composition() != b.reduced_composition() or len(a) != len(b):
        return False, math.inf
    pa, pb = np.array(a.lattice.params), np.array(b.lattice.params)
    if np.any(np.abs(pa[3:] - pb[3:]) > tol.angle_tol):
        return False, math.inf
    va, vb = a.lattice.volume, b.lattice.volume
    vmean = 0.5 * (va + vb)
    la = pa[:3] * (vmean / va) ** (1 / 3)
    lb = pb[:3] * (vmean / vb) ** (1 / 3)
    if np.any(np.abs(la / lb - 1.0) > tol.length_tol):
        return False, math.inf
    m = 0.5 * (a.lattice.matrix * (vmean / va) ** (1 / 3) + b.lattice.matrix * (vmean / vb) ** (1 / 3))
    n = len(a)
    scale = (vmean / n) ** (1 / 3)
    counts = Counter(int(z) for z in a.species)
    rare = min(counts, key=lambda z: (counts[z], z))
    anchor = a.frac[np.nonzero(a.species == rare)[0][0]]
    best = math.inf
    for target in b.frac[b.species == rare]:
        shift = target - anchor
        disp = np.zeros((n, 3))
        k = 0
        for z in sorted(counts):
            ia = np.nonzero(a.species == z)[0]
            ib = np.nonzero(b.species == z)[0]
            vec = _min_image(b.frac[ib][None, :, :] - (a.frac[ia] + shift)[:, None, :], m)
            cost = (vec ** 2).sum(axis=-1)
            r, c = linear_sum_assignment(cost)
            disp[k:k + len(r)] = vec[r, c]
            k += len(r)
        disp -= disp.mean(axis=0)  # best common translation
        d = np.sqrt((disp ** 2).sum(axis=1))
        if d.max() <= tol.site_tol * scale:
            best = min(best, float(np.sqrt((d ** 2).mean())))
    return (best < math.inf), best


@dataclass
class EvaluationReport:
    structure_validity_rate: float
    composition_validity_rate: float
    diversity_structure: float | None
    diversity_composition: float | None
    family_diversity: float
    modes: int
    match_rate: float | None
    mean_rms: float | None

    KEYS = ("structure_validity_rate", "composition_validity_rate", "diversity_structure",
            "diversity_composition", "family_diversity", "modes", "match_rate", "mean_rms")

    def to_dict(self) -> dict:
        return {k: getattr(self, k) for k in self.KEYS}


def evaluate(structures, groups, energy_oracle, relaxed=None, tol: MatchTolerances = MatchTolerances()) -> EvaluationReport:
    """Metrics over generated structures; ``relaxed`` pairs each with its optimized counterpart."""
    structures = list(structures)
    if not structures:
        raise ValueError("nothing to evaluate")
    sv = float(np.mean([structure_validity(s) for s in structures]))
    cv = float(np.mean([composition_validity(s) for s in structures]))
    ds = diversity(structures, "structure") if len(structures) > 1 else None
    dc = diversity(structures, "composition") if len(structures) > 1 else None
    fam = crystal_family_diversity(groups)
    modes = count_modes(structures, energy_oracle)
    match_rate = mean_rms = None
    if relaxed is not None:
        results = [match_structures(s, r, tol) for s, r in zip(structures, relaxed)]
        match_rate = float(np.mean([ok for ok, _ in results]))
        rms = [x for ok, x in results if ok]
        mean_rms = float(np.mean(rms)) if rms else None
    return EvaluationReport(sv, cv, ds, dc, fam, modes, match_rate, mean_rms)
