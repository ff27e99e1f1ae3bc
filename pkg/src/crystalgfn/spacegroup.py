"""The 230 space groups as symmetry-operation sets, orbits and lattice constraints.

Operation sets come from a generator table (``data/spacegroups.dat``) closed
under composition modulo lattice translations. Settings: unique axis c for
monoclinic groups (free angle gamma), origin choice 2, hexagonal axes for the
rhombohedral groups.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from fractions import Fraction
from functools import lru_cache
from importlib import resources

import numpy as np

from .crystal import CrystalStructure, Lattice

# Translations are stored as integers in units of 1/DEN; every crystallographic
# denominator (1, 2, 3, 4, 6) divides 12.
DEN = 12
ORBIT_TOL = 1e-6
MERGE_TOL = 1e-3

FAMILIES = ("triclinic", "monoclinic", "orthorhombic", "tetragonal", "hexagonal", "cubic")
LENGTHS = ("a", "b", "c")
ANGLES = ("alpha", "beta", "gamma")


class SymmetryCollisionError(ValueError):
    """Two symmetry images of different elements landed on the same site."""


@dataclass(frozen=True)
class SymOp:
    rotation: tuple[tuple[int, int, int], ...]
    shift: tuple[int, int, int]  # translation * DEN, reduced mod DEN

    @classmethod
    def make(cls, rotation, shift) -> "SymOp":
        r = tuple(tuple(int(v) for v in row) for row in np.asarray(rotation))
        s = tuple(int(v) % DEN for v in shift)
        return cls(r, s)

    @classmethod
    def identity(cls) -> "SymOp":
        return cls.make(np.eye(3, dtype=int), (0, 0, 0))

    @property
    def matrix(self) -> np.ndarray:
        return np.array(self.rotation, dtype=np.int64)

    @property
    def translation(self) -> tuple[Fraction, Fraction, Fraction]:
        return tuple(Fraction(s, DEN) for s in self.shift)

    @property
    def translation_vector(self) -> np.ndarray:
        return np.array(self.shift, dtype=np.float64) / DEN

    def __matmul__(self, other: "SymOp") -> "SymOp":
        """Composition: (self @ other)(x) = self(other(x))."""
        r1, r2 = self.matrix, other.matrix
        return SymOp.make(r1 @ r2, r1 @ np.array(other.shift) + np.array(self.shift))

    def inverse(self) -> "SymOp":
        rinv = np.rint(np.linalg.inv(self.matrix)).astype(np.int64)
        return SymOp.make(rinv, -(rinv @ np.array(self.shift)))

    def apply(self, frac: np.ndarray) -> np.ndarray:
        return np.mod(np.asarray(frac) @ self.matrix.T + self.translation_vector, 1.0)

    def determinant(self) -> int:
        return int(round(np.linalg.det(self.matrix)))

    def as_xyz(self) -> str:
        parts = []
        for row, t in zip(self.rotation, self.translation):
            s = ""
            for c, var in zip(row, "xyz"):
                if c:
                    s += ("-" if c < 0 else ("+" if s else "")) + (var if abs(c) == 1 else f"{abs(c)}{var}")
            if t:
                s += f"+{t.numerator}/{t.denominator}"
            parts.append(s or "0")
        return ",".join(parts)


_TERM = re.compile(r"([+-]?)(\d+(?:/\d+)?)?\*?([xyz])?")


def parse_xyz(text: str) -> SymOp:
    """Parse an operation in 'x,y,z' triplet notation, e.g. '-y+1/2,x,z+3/4'."""
    rows = text.replace(" ", "").lower().split(",")
    if len(rows) != 3:
        raise ValueError(f"symmetry operation '{text}' must have three components")
    rot = np.zeros((3, 3), dtype=np.int64)
    shift = np.zeros(3, dtype=np.int64)
    for i, row in enumerate(rows):
        pos = 0
        if not row:
            raise ValueError(f"empty component in '{text}'")
        while pos < len(row):
            m = _TERM.match(row, pos)
            if not m or m.end() == pos:
                raise ValueError(f"cannot parse '{row}' in symmetry operation '{text}'")
            sign = -1 if m.group(1) == "-" else 1
            num, var = m.group(2), m.group(3)
            if var:
                coef = int(num) if num else 1
                rot[i, "xyz".index(var)] += sign * coef
            elif num:
                frac = Fraction(num)
                if (frac * DEN).denominator != 1:
                    raise ValueError(f"translation {num} in '{text}' is not a multiple of 1/{DEN}")
                shift[i] += sign * int(frac * DEN)
            else:
                raise ValueError(f"cannot parse '{row}' in symmetry operation '{text}'")
            pos = m.end()
    return SymOp.make(rot, shift)


@dataclass(frozen=True)
class LatticeConstraint:
    ties: tuple[tuple[str, str], ...]  # (dependent, source) e.g. ("b", "a")
    fixed_angles: tuple[tuple[str, float], ...]
    free: tuple[str, ...]


_CONSTRAINTS = {
    "triclinic": LatticeConstraint((), (), ("a", "b", "c", "alpha", "beta", "gamma")),
    "monoclinic": LatticeConstraint((), (("alpha", 90.0), ("beta", 90.0)), ("a", "b", "c", "gamma")),
    "orthorhombic": LatticeConstraint((), (("alpha", 90.0), ("beta", 90.0), ("gamma", 90.0)), ("a", "b", "c")),
    "tetragonal": LatticeConstraint((("b", "a"),), (("alpha", 90.0), ("beta", 90.0), ("gamma", 90.0)), ("a", "c")),
    "hexagonal": LatticeConstraint((("b", "a"),), (("alpha", 90.0), ("beta", 90.0), ("gamma", 120.0)), ("a", "c")),
    "cubic": LatticeConstraint((("b", "a"), ("c", "a")), (("alpha", 90.0), ("beta", 90.0), ("gamma", 90.0)), ("a",)),
}


def crystal_family(number: int) -> str:
    _check_number(number)
    for upper, fam in ((2, "triclinic"), (15, "monoclinic"), (74, "orthorhombic"),
                       (142, "tetragonal"), (194, "hexagonal"), (230, "cubic")):
        if number <= upper:
            return fam
    raise AssertionError


def _check_number(number: int) -> None:
    if not isinstance(number, (int, np.integer)) or not 1 <= number <= 230:
        raise ValueError(f"space group number must be an integer in 1..230, got {number!r}")


@dataclass(frozen=True)
class SpaceGroup:
    number: int
    symbol: str
    ops: tuple[SymOp, ...]
    generators: tuple[SymOp, ...]

    @property
    def family(self) -> str:
        return crystal_family(self.number)

    @property
    def constraint(self) -> LatticeConstraint:
        return _CONSTRAINTS[self.family]

    @property
    def order(self) -> int:
        return len(self.ops)

    @property
    def rotations(self) -> np.ndarray:
        return np.array([op.rotation for op in self.ops], dtype=np.float64)

    @property
    def translations(self) -> np.ndarray:
        return np.array([op.shift for op in self.ops], dtype=np.float64) / DEN

    def validate(self) -> None:
        """Raise if the operation set is not a group modulo lattice translations."""
        opset = set(self.ops)
        if SymOp.identity() not in opset:
            raise ValueError(f"group {self.number}: identity missing")
        for g in self.ops:
            if g.determinant() not in (1, -1):
                raise ValueError(f"group {self.number}: op {g.as_xyz()} has determinant {g.determinant()}")
            if g.inverse() not in opset:
                raise ValueError(f"group {self.number}: inverse of {g.as_xyz()} missing")
            for h in self.ops:
                if g @ h not in opset:
                    raise ValueError(f"group {self.number}: not closed ({g.as_xyz()} * {h.as_xyz()})")


def close_group(generators) -> tuple[SymOp, ...]:
    ident = SymOp.identity()
    ops = [ident]
    seen = {ident}
    frontier = [ident]
    while frontier:
        nxt = []
        for g in frontier:
            for h in generators:
                p = g @ h
                if p not in seen:
                    seen.add(p)
                    ops.append(p)
                    nxt.append(p)
        frontier = nxt
    return tuple(ops)


@lru_cache(maxsize=1)
def _raw_table() -> dict[int, tuple[str, int, tuple[str, ...]]]:
    text = resources.files("crystalgfn.data").joinpath("spacegroups.dat").read_text()
    table = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        fields = [f.strip() for f in line.split("|")]
        if len(fields) != 5:
            raise ValueError(f"spacegroups.dat line {lineno}: expected 5 fields")
        number, symbol, _hall, order, gens = fields
        table[int(number)] = (symbol, int(order), tuple(g.strip() for g in gens.split(";") if g.strip()))
    if sorted(table) != list(range(1, 231)):
        raise ValueError("spacegroups.dat must list groups 1..230 exactly once")
    return table


@lru_cache(maxsize=None)
def group_ops(number: int) -> SpaceGroup:
    """Space group ``number`` with its full conventional-cell operation set."""
    _check_number(number)
    symbol, order, gens = _raw_table()[int(number)]
    generators = tuple(parse_xyz(g) for g in gens)
    ops = close_group(generators)
    if len(ops) != order:
        raise ValueError(f"group {number}: closure gave {len(ops)} ops, table says {order}")
    return SpaceGroup(int(number), symbol, ops, generators)


def all_groups() -> list[SpaceGroup]:
    return [group_ops(n) for n in range(1, 231)]


def free_parameters(group: SpaceGroup | int) -> tuple[str, ...]:
    number = group if isinstance(group, (int, np.integer)) else group.number
    return _CONSTRAINTS[crystal_family(int(number))].free


def project_lattice(lattice: Lattice, group: SpaceGroup | int) -> Lattice:
    """Impose the family's length ties and fixed angles; free values pass through."""
    number = group if isinstance(group, (int, np.integer)) else group.number
    con = _CONSTRAINTS[crystal_family(int(number))]
    vals = dict(zip(LENGTHS + ANGLES, lattice.params))
    for dep, src in con.ties:
        vals[dep] = vals[src]
    for name, value in con.fixed_angles:
        vals[name] = value
    return Lattice(*(vals[k] for k in LENGTHS + ANGLES))


def _wrapped(diff: np.ndarray) -> np.ndarray:
    return diff - np.rint(diff)


def _dedup(points: np.ndarray, tol: float) -> np.ndarray:
    """Keep each point unless an earlier point lies within ``tol`` (per axis, mod 1)."""
    if len(points) < 2:
        return np.asarray(points).reshape(-1, 3)
    diff = np.max(np.abs(_wrapped(points[:, None, :] - points[None, :, :])), axis=2)
    dup = np.tril(diff < tol, k=-1).any(axis=1)
    return points[~dup]


@dataclass
class Orbit:
    representative: np.ndarray
    points: np.ndarray  # (k, 3)

    def __len__(self) -> int:
        return len(self.points)

    def contains(self, x, tol: float = 1e-9) -> bool:
        return bool(np.any(np.max(np.abs(_wrapped(self.points - np.asarray(x))), axis=1) <= tol))


def orbit(group: SpaceGroup | int, x, tol: float = ORBIT_TOL) -> Orbit:
    """All distinct images of ``x`` under the group, reduced mod 1."""
    if isinstance(group, (int, np.integer)):
        group = group_ops(int(group))
    x = np.mod(np.asarray(x, dtype=np.float64), 1.0)
    images = np.mod(np.einsum("kij,j->ki", group.rotations, x) + group.translations, 1.0)
    images[images >= 1.0] = 0.0
    # snap float noise near 0/1 so dedup and output are stable
    images[np.abs(images - 1.0) < 1e-12] = 0.0
    return Orbit(x, _dedup(images, tol))


def expand_structure(reference_atoms, group: SpaceGroup | int, lattice: Lattice, merge_tol: float = MERGE_TOL) -> CrystalStructure:
    """Union of orbits of ``reference_atoms`` ((Z, frac) pairs) on ``lattice``.

    Images closer than ``merge_tol`` (fractional, per axis) to an already
    placed site merge when the elements agree and raise otherwise.
    """
    if isinstance(group, (int, np.integer)):
        group = group_ops(int(group))
    species = np.zeros(0, dtype=np.int64)
    points = np.zeros((0, 3))
    for ref_idx, (z, x) in enumerate(reference_atoms):
        # images closer than merge_tol belong to one special-position site
        new = _dedup(orbit(group, x).points, merge_tol)
        if len(points):
            close = np.max(np.abs(_wrapped(new[:, None, :] - points[None, :, :])), axis=2) < merge_tol
            bad = close & (species[None, :] != int(z))
            if bad.any():
                i, k = np.argwhere(bad)[0]
                raise SymmetryCollisionError(
                    f"reference atom {ref_idx} (Z={z}) image {new[i].round(6).tolist()} collides with "
                    f"site {k} (Z={species[k]}) under group {group.number}"
                )
            new = new[~close.any(axis=1)]
        species = np.concatenate([species, np.full(len(new), int(z), dtype=np.int64)])
        points = np.vstack([points, new])
    return CrystalStructure(lattice, np.array(species, dtype=np.int64), points)
