"""Random cells and structures shared by the test modules."""
from __future__ import annotations

import numpy as np

from crystalgfn.crystal import CrystalStructure, Lattice

BATTERY_Z = (3, 11, 19, 4, 5, 6, 7, 8, 14, 15, 16, 17)


def random_lattice(rng: np.random.Generator, lo: float = 3.0, hi: float = 8.0) -> Lattice:
    while True:
        lat = Lattice(*rng.uniform(lo, hi, 3), *rng.uniform(65.0, 115.0, 3))
        if lat.volume_factor > 0.3:
            return lat


def random_structure(rng: np.random.Generator, n_max: int = 6, species=BATTERY_Z, lattice: Lattice | None = None) -> CrystalStructure:
    n = int(rng.integers(1, n_max + 1))
    lat = lattice or random_lattice(rng)
    return CrystalStructure(lat, rng.choice(species, n), rng.random((n, 3)))
