"""Lattice geometry, periodic neighbors, crystal graphs and density.

Fractional coordinates are canonical; Cartesian positions are always derived
from them through the lattice matrix (a along x, b in the xy-plane).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from collections import Counter
from functools import reduce

import numpy as np
from scipy.spatial import cKDTree

from .elements import element

AMU_PER_A3_TO_G_PER_CM3 = 1.66054
# Distances are rounded to this resolution (Angstrom) when ordering neighbors,
# so symmetry-equivalent distances that differ by float noise tie exactly.
TIE_RESOLUTION = 1e-8


class DegenerateLatticeError(ValueError):
    pass


@dataclass(frozen=True)
class Lattice:
    a: float
    b: float
    c: float
    alpha: float
    beta: float
    gamma: float

    def __post_init__(self):
        for name in ("a", "b", "c", "alpha", "beta", "gamma"):
            object.__setattr__(self, name, float(getattr(self, name)))
        for name in ("a", "b", "c"):
            v = getattr(self, name)
            if not (v > 0 and math.isfinite(v)):
                raise ValueError(f"lattice length {name}={v} must be positive")
        for name in ("alpha", "beta", "gamma"):
            v = getattr(self, name)
            if not 0 < v < 180:
                raise ValueError(f"lattice angle {name}={v} must lie in (0, 180) degrees")

    @classmethod
    def cubic(cls, a: float) -> "Lattice":
        return cls(a, a, a, 90.0, 90.0, 90.0)

    @classmethod
    def from_params(cls, params) -> "Lattice":
        return cls(*(float(x) for x in params))

    @property
    def params(self) -> tuple[float, float, float, float, float, float]:
        return (self.a, self.b, self.c, self.alpha, self.beta, self.gamma)

    @property
    def volume_factor(self) -> float:
        """V / (abc); zero for a flat cell, one for orthogonal axes."""
        ca, cb, cg = (math.cos(math.radians(x)) for x in (self.alpha, self.beta, self.gamma))
        val = 1.0 - ca * ca - cb * cb - cg * cg + 2.0 * ca * cb * cg
        return math.sqrt(val) if val > 0 else 0.0

    @property
    def volume(self) -> float:
        return self.a * self.b * self.c * self.volume_factor

    def is_degenerate(self, min_volume_factor: float = 1e-6) -> bool:
        return self.volume_factor <= min_volume_factor

    @property
    def matrix(self) -> np.ndarray:
        """Rows are the Cartesian lattice vectors."""
        if self.is_degenerate():
            raise DegenerateLatticeError(f"lattice {self.params} has (near) zero volume")
        al, be, ga = (math.radians(x) for x in (self.alpha, self.beta, self.gamma))
        ax = np.array([self.a, 0.0, 0.0])
        bx = np.array([self.b * math.cos(ga), self.b * math.sin(ga), 0.0])
        cx = self.c * math.cos(be)
        cy = self.c * (math.cos(al) - math.cos(be) * math.cos(ga)) / math.sin(ga)
        cz = math.sqrt(max(self.c * self.c - cx * cx - cy * cy, 0.0))
        return np.array([ax, bx, [cx, cy, cz]])

    def heights(self) -> np.ndarray:
        """Perpendicular distances between opposite cell faces."""
        m = self.matrix
        vol = abs(np.linalg.det(m))
        return np.array([
            vol / np.linalg.norm(np.cross(m[1], m[2])),
            vol / np.linalg.norm(np.cross(m[2], m[0])),
            vol / np.linalg.norm(np.cross(m[0], m[1])),
        ])


@dataclass(frozen=True, eq=False)
class CrystalStructure:
    lattice: Lattice
    species: np.ndarray  # (N,) atomic numbers
    frac: np.ndarray  # (N, 3) in [0, 1)

    def __post_init__(self):
        species = np.asarray(self.species, dtype=np.int64).reshape(-1)
        frac = np.asarray(self.frac, dtype=np.float64).reshape(-1, 3)
        if len(species) != len(frac):
            raise ValueError("species and coordinate counts differ")
        if len(species) and (species.min() < 1 or species.max() > 94):
            raise ValueError("atomic numbers must lie in 1..94")
        frac = np.mod(frac, 1.0)
        frac[frac >= 1.0] = 0.0  # np.mod(-1e-17, 1) == 1.0
        object.__setattr__(self, "species", species)
        object.__setattr__(self, "frac", frac)

    @classmethod
    def from_sites(cls, lattice: Lattice, sites) -> "CrystalStructure":
        sites = list(sites)
        if not sites:
            return cls(lattice, np.zeros(0, dtype=np.int64), np.zeros((0, 3)))
        return cls(lattice, [element(s).z if isinstance(s, str) else int(s) for s, _ in sites], [f for _, f in sites])

    def __len__(self) -> int:
        return len(self.species)

    @property
    def cart(self) -> np.ndarray:
        return self.frac @ self.lattice.matrix

    def composition(self) -> Counter:
        return Counter(int(z) for z in self.species)

    def reduced_composition(self) -> dict[int, int]:
        comp = self.composition()
        if not comp:
            return {}
        g = reduce(math.gcd, comp.values())
        return {z: n // g for z, n in sorted(comp.items())}

    def formula(self) -> str:
        return "".join(f"{element(z).symbol}{n if n > 1 else ''}" for z, n in self.reduced_composition().items())

    def translated(self, shift) -> "CrystalStructure":
        return CrystalStructure(self.lattice, self.species, self.frac + np.asarray(shift, dtype=np.float64))

    def permuted(self, order) -> "CrystalStructure":
        order = np.asarray(order)
        return CrystalStructure(self.lattice, self.species[order], self.frac[order])

    def to_dict(self) -> dict:
        return {
            "lattice": dict(zip(("a", "b", "c", "alpha", "beta", "gamma"), self.lattice.params)),
            "atoms": [{"z": int(z), "frac": [float(x) for x in f]} for z, f in zip(self.species, self.frac)],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "CrystalStructure":
        lat = d["lattice"]
        lattice = Lattice(lat["a"], lat["b"], lat["c"], lat["alpha"], lat["beta"], lat["gamma"])
        atoms = d.get("atoms", [])
        return cls(lattice, [a["z"] for a in atoms], [a["frac"] for a in atoms] or np.zeros((0, 3)))


def image_range(lattice: Lattice, cutoff: float) -> np.ndarray:
    """Per-axis image bound n such that offsets in [-n, n] cover ``cutoff``.

    Uses face-to-face heights rather than edge lengths so skewed cells are
    covered; the +1 accounts for both atoms sitting anywhere in [0, 1).
    """
    return np.ceil(cutoff / lattice.heights()).astype(int) + 1


def _offsets(nmax: np.ndarray) -> np.ndarray:
    grids = np.meshgrid(*(np.arange(-n, n + 1) for n in nmax), indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=1)


def periodic_min_distance(structure: CrystalStructure, i: int, j: int, cutoff: float | None = None) -> float:
    """Minimum image distance between atoms i and j (i == j gives the self-image distance)."""
    n = len(structure)
    if not (0 <= i < n and 0 <= j < n):
        raise IndexError(f"atom indices ({i}, {j}) out of range for {n} atoms")
    lat = structure.lattice
    m = lat.matrix
    # a + b + c bounds both the covering radius and the shortest self-image distance
    reach = cutoff if cutoff is not None else lat.a + lat.b + lat.c
    offsets = _offsets(image_range(lat, reach))
    df = structure.frac[j] - structure.frac[i] + offsets
    if i == j:
        df = df[np.any(offsets != 0, axis=1)]
    return float(np.sqrt(((df @ m) ** 2).sum(axis=1)).min())


@dataclass
class NeighborList:
    src: np.ndarray  # (E,)
    dst: np.ndarray  # (E,)
    image: np.ndarray  # (E, 3) integer lattice offsets applied to dst
    distance: np.ndarray  # (E,)
    n_atoms: int = 0

    def __len__(self) -> int:
        return len(self.src)

    def of(self, i: int) -> list[tuple[int, tuple[int, int, int], float]]:
        sel = np.nonzero(self.src == i)[0]
        return [(int(self.dst[k]), tuple(int(x) for x in self.image[k]), float(self.distance[k])) for k in sel]


def _sort_edges(src, dst, image, dist):
    key_d = np.round(dist / TIE_RESOLUTION).astype(np.int64)
    order = np.lexsort((image[:, 2], image[:, 1], image[:, 0], dst, key_d, src))
    return src[order], dst[order], image[order], dist[order]


def _image_points(structure: CrystalStructure, cutoff: float):
    """Periodic images that can lie within ``cutoff`` of the home cell: (cart, atom, offset)."""
    lat = structure.lattice
    m = lat.matrix
    frac = structure.frac
    n = len(frac)
    offsets = _offsets(image_range(lat, cutoff))
    # a point within cutoff of the cell lies within cutoff/height of it along each axis
    band = cutoff / lat.heights() + 1e-9
    pts, atoms, offs = [], [], []
    step = max(1, 200_000 // n)  # bound the unfiltered block for many-atom cells
    for k in range(0, len(offsets), step):
        block = offsets[k:k + step]
        img = (frac[None, :, :] + block[:, None, :]).reshape(-1, 3)
        near = np.nonzero(np.all((img >= -band) & (img < 1.0 + band), axis=1))[0]
        pts.append(img[near] @ m)
        atoms.append(near % n)
        offs.append(block[near // n])
    return np.concatenate(pts), np.concatenate(atoms), np.concatenate(offs)


def _finish_edges(structure, src, cand, img_atom, img_off, cutoff):
    frac, m = structure.frac, structure.lattice.matrix
    dst = img_atom[cand]
    image = img_off[cand]
    keep = ~((dst == src) & np.all(image == 0, axis=1))
    src, dst, image = src[keep], dst[keep], image[keep]
    dist = np.sqrt((((frac[dst] + image - frac[src]) @ m) ** 2).sum(axis=1))
    inside = dist <= cutoff
    return _sort_edges(src[inside], dst[inside], image[inside], dist[inside])


def _empty(n: int) -> "NeighborList":
    return NeighborList(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64), np.zeros(0), n)


def neighbor_chunks(structure: CrystalStructure, cutoff: float, chunk: int = 128):
    """Yield the full neighbor list (no max_k) split by blocks of ``chunk`` source atoms.

    Dense many-atom cells can have millions of edges; consumers that only
    need sums over edges stay within bounded memory this way.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    n = len(structure)
    if n == 0:
        return
    img_cart, img_atom, img_off = _image_points(structure, cutoff)
    tree = cKDTree(img_cart)
    cart = structure.cart
    for lo in range(0, n, chunk):
        pairs = tree.query_ball_point(cart[lo:lo + chunk], r=cutoff + 1e-9)
        counts = np.array([len(p) for p in pairs])
        if counts.sum() == 0:
            continue
        src = np.repeat(np.arange(lo, lo + len(pairs)), counts)
        cand = np.concatenate([np.asarray(p, dtype=np.int64) for p in pairs])
        src, dst, image, dist = _finish_edges(structure, src, cand, img_atom, img_off, cutoff)
        yield NeighborList(src, dst, image.astype(np.int64), dist, n)


def neighbor_list(structure: CrystalStructure, cutoff: float, max_k: int | None = None) -> NeighborList:
    """All periodic neighbors within ``cutoff`` (Angstrom), optionally the ``max_k`` nearest.

    Each atom's neighbors are ordered by (distance, neighbor index, image
    vector lexicographically) and truncated after that ordering.
    """
    if cutoff <= 0:
        raise ValueError("cutoff must be positive")
    n = len(structure)
    if n == 0:
        return _empty(n)
    if max_k is None:
        parts = list(neighbor_chunks(structure, cutoff))
        if not parts:
            return _empty(n)
        return NeighborList(*(np.concatenate([getattr(p, f) for p in parts])
                              for f in ("src", "dst", "image", "distance")), n)
    img_cart, img_atom, img_off = _image_points(structure, cutoff)
    tree = cKDTree(img_cart)
    src, cand = _knn_candidates(tree, structure.cart, cutoff, max_k, len(img_cart))
    if len(src) == 0:
        return _empty(n)
    src, dst, image, dist = _finish_edges(structure, src, cand, img_atom, img_off, cutoff)
    starts = np.searchsorted(src, src, side="left")
    rank = np.arange(len(src)) - starts
    sel = rank < max_k
    return NeighborList(src[sel], dst[sel], image[sel].astype(np.int64), dist[sel], n)


def _knn_candidates(tree, cart, cutoff, max_k, n_points):
    """Candidate images for the max_k nearest, widened until ties at the cut are all included."""
    kq = min(max_k + 8, n_points)
    while True:
        d, idx = tree.query(cart, k=kq, distance_upper_bound=cutoff + 1e-9)
        d = d.reshape(len(cart), -1)
        idx = idx.reshape(len(cart), -1)
        # +1 because the atom itself is among the hits
        kth = d[:, min(max_k, kq - 1)]
        last = d[:, -1]
        if kq >= n_points or not np.any(np.isfinite(last) & (last <= kth + 2 * TIE_RESOLUTION)):
            break
        kq = min(2 * kq, n_points)
    ok = np.isfinite(d)
    src = np.nonzero(ok)[0]
    return src, idx[ok].astype(np.int64)


def brute_force_neighbors(structure: CrystalStructure, cutoff: float, max_k: int | None = None, extra: int = 1) -> NeighborList:
    """Reference enumeration over an enlarged image box; used only by tests."""
    n = len(structure)
    m = structure.lattice.matrix
    offsets = _offsets(image_range(structure.lattice, cutoff) + extra)
    src, dst, img, dist = [], [], [], []
    for i in range(n):
        for j in range(n):
            d = np.sqrt((((structure.frac[j] + offsets - structure.frac[i]) @ m) ** 2).sum(axis=1))
            for k in np.nonzero(d <= cutoff)[0]:
                if i == j and not offsets[k].any():
                    continue
                src.append(i)
                dst.append(j)
                img.append(offsets[k])
                dist.append(d[k])
    if not src:
        return NeighborList(np.zeros(0, np.int64), np.zeros(0, np.int64), np.zeros((0, 3), np.int64), np.zeros(0), n)
    s, d_, im, di = _sort_edges(np.array(src), np.array(dst), np.array(img), np.array(dist))
    if max_k is not None:
        starts = np.searchsorted(s, s, side="left")
        sel = (np.arange(len(s)) - starts) < max_k
        s, d_, im, di = s[sel], d_[sel], im[sel], di[sel]
    return NeighborList(s, d_, im, di, n)


@dataclass
class CrystalGraph:
    species: np.ndarray  # (N,)
    frac: np.ndarray  # (N, 3)
    src: np.ndarray
    dst: np.ndarray
    image: np.ndarray
    distance: np.ndarray
    lattice: Lattice | None = None
    meta: dict = field(default_factory=dict)

    @property
    def n_nodes(self) -> int:
        return len(self.species)

    @property
    def n_edges(self) -> int:
        return len(self.src)


def build_graph(structure: CrystalStructure, cutoff: float = 8.0, max_k: int = 12) -> CrystalGraph:
    """Directed k-nearest-neighbor graph; nodes carry atomic number and fractional coordinates."""
    if len(structure) == 0:
        z = np.zeros(0, dtype=np.int64)
        return CrystalGraph(z, np.zeros((0, 3)), z, z, np.zeros((0, 3), np.int64), np.zeros(0), structure.lattice)
    nl = neighbor_list(structure, cutoff, max_k)
    return CrystalGraph(structure.species.copy(), structure.frac.copy(), nl.src, nl.dst, nl.image, nl.distance, structure.lattice)


def density(structure: CrystalStructure) -> float:
    """Mass density in g/cm^3."""
    if len(structure) == 0:
        raise ValueError("density of an empty structure is undefined")
    vol = structure.lattice.volume
    if vol <= 0:
        raise DegenerateLatticeError("zero-volume cell")
    mass = sum(element(int(z)).mass for z in structure.species)
    return mass * AMU_PER_A3_TO_G_PER_CM3 / vol


def min_pair_distance(structure: CrystalStructure) -> float:
    """Smallest periodic distance between any two atoms, self-images included."""
    if len(structure) == 0:
        raise ValueError("empty structure")
    r = 1.0
    while True:
        nl = neighbor_list(structure, r, max_k=1)
        if len(nl):
            return float(nl.distance.min())
        r *= 2.0
