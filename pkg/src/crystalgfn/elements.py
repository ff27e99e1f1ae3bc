"""Static per-element data for Z = 1..94 (masses, electronegativity, radii, oxidation states)."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from functools import lru_cache
from importlib import resources


@dataclass(frozen=True)
class Element:
    z: int
    symbol: str
    mass: float  # u
    electronegativity: float | None  # Pauling; None for He, Ne, Ar
    covalent_radius: float  # Angstrom
    oxidation_states: tuple[int, ...]

    @property
    def row(self) -> int:
        return periodic_position(self.z)[0]

    @property
    def group(self) -> int:
        return periodic_position(self.z)[1]


def periodic_position(z: int) -> tuple[int, int]:
    """(period, group) with lanthanides/actinides placed in group 3."""
    bounds = [2, 10, 18, 36, 54, 86, 118]
    row = next(i + 1 for i, b in enumerate(bounds) if z <= b)
    start = [0] + bounds
    k = z - start[row - 1]
    if row == 1:
        return row, 1 if k == 1 else 18
    if row in (2, 3):
        return row, k if k <= 2 else k + 10
    if row in (4, 5):
        return row, k
    # periods 6 and 7 carry the 14 f-block elements after group 2
    if k <= 2:
        return row, k
    if k <= 17:
        return row, 3
    return row, k - 14


@lru_cache(maxsize=1)
def _table() -> tuple[Element, ...]:
    text = resources.files("crystalgfn.data").joinpath("elements.csv").read_text()
    rows = [r for r in csv.reader(line for line in text.splitlines() if line and not line.startswith("#"))]
    out = []
    for z, sym, mass, en, rad, ox in rows:
        out.append(Element(
            z=int(z), symbol=sym, mass=float(mass),
            electronegativity=float(en) if en else None,
            covalent_radius=float(rad),
            oxidation_states=tuple(int(x) for x in ox.split()),
        ))
    return tuple(out)


@lru_cache(maxsize=None)
def _by_symbol() -> dict[str, Element]:
    return {e.symbol: e for e in _table()}


def element(key: int | str) -> Element:
    if isinstance(key, str):
        try:
            return _by_symbol()[key]
        except KeyError:
            raise KeyError(f"unknown element symbol '{key}'") from None
    if not 1 <= int(key) <= len(_table()):
        raise KeyError(f"atomic number {key} outside 1..{len(_table())}")
    return _table()[int(key) - 1]


def atomic_number(symbol: str) -> int:
    return element(symbol).z


def symbol(z: int) -> str:
    return element(z).symbol


def all_elements() -> tuple[Element, ...]:
    return _table()
