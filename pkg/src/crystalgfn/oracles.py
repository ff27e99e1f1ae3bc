"""Property oracles: the builtin pair-potential energy surrogate and a child-process bridge."""
from __future__ import annotations

import json
import logging
import math
import os
import selectors
import shlex
import subprocess
from typing import Protocol

import numpy as np
from scipy.optimize import minimize

from .crystal import CrystalStructure, neighbor_chunks
from .elements import element

log = logging.getLogger(__name__)

ENERGY_CLAMP = (-10.0, 10.0)
ORACLE_ENV = "CRYSTALGFN_ORACLE"


class OracleError(RuntimeError):
    pass


class PropertyOracle(Protocol):
    def __call__(self, structure: CrystalStructure) -> float: ...


def clamp_energy(e: float) -> float:
    lo, hi = ENERGY_CLAMP
    return float(min(max(e, lo), hi))


class SurrogateEnergy:
    """Morse-like pair potential standing in for a learned formation-energy model.

    Each element pair has its minimum at the table's average bond distance and
    a well depth ``depth0 + depth_en * |delta electronegativity|`` (eV). The
    potential is multiplied by a cosine taper that is 1 up to ``d_avg + 1`` and
    reaches 0 at ``d_avg + 2``, so the minimum stays exactly at ``d_avg``.
    Energies are summed over unordered pairs, divided by the atom count and
    clamped to [-10, 10] eV/atom.
    """

    def __init__(self, bond_stats, width: float = 1.5, depth0: float = 0.1, depth_en: float = 0.5,
                 taper_on: float = 1.0, taper_off: float = 2.0):
        self.stats = bond_stats
        self.width = width
        self.depth0 = depth0
        self.depth_en = depth_en
        self.taper_on = taper_on
        self.taper_off = taper_off
        self.flags: list[str] = []

    def well_depth(self, za: int, zb: int) -> float:
        ea, eb = element(za).electronegativity, element(zb).electronegativity
        den = abs((ea or 0.0) - (eb or 0.0))
        return self.depth0 + self.depth_en * den

    def pair_energy(self, za: int, zb: int, d):
        d = np.asarray(d, dtype=np.float64)
        entry = self.stats.get(za, zb)
        if entry is None:
            return np.zeros_like(d)
        d0 = entry[1]
        eps = self.well_depth(za, zb)
        morse = eps * ((1.0 - np.exp(-self.width * (d - d0))) ** 2 - 1.0)
        x = np.clip((d - d0 - self.taper_on) / (self.taper_off - self.taper_on), 0.0, 1.0)
        taper = 0.5 * (1.0 + np.cos(np.pi * x))
        return morse * taper

    def cutoff_for(self, species) -> float:
        zs = sorted(set(int(z) for z in species))
        best = 0.0
        for i, a in enumerate(zs):
            for b in zs[i:]:
                entry = self.stats.get(a, b)
                if entry is not None:
                    best = max(best, entry[1] + self.taper_off)
        return best

    def raw_energy(self, structure: CrystalStructure) -> float:
        self.flags = []
        n = len(structure)
        if n == 0:
            raise ValueError("energy of an empty structure is undefined")
        present = sorted(set(int(z) for z in structure.species))
        for i, a in enumerate(present):
            for b in present[i:]:
                if self.stats.get(a, b) is None:
                    self.flags.append(f"missing pair data {element(a).symbol}-{element(b).symbol}")
        cutoff = self.cutoff_for(structure.species)
        if cutoff <= 0:
            return 0.0
        total = 0.0
        zs = structure.species
        for nl in neighbor_chunks(structure, cutoff):
            za, zb = zs[nl.src], zs[nl.dst]
            for a, b in set(zip(za.tolist(), zb.tolist())):
                sel = (za == a) & (zb == b)
                total += float(self.pair_energy(a, b, nl.distance[sel]).sum())  # missing pairs give 0
        # directed neighbor list visits each pair twice
        return 0.5 * total / n

    def __call__(self, structure: CrystalStructure) -> float:
        return clamp_energy(self.raw_energy(structure))

    def pair_derivative(self, za: int, zb: int, d):
        """dV/dd of ``pair_energy``."""
        d = np.asarray(d, dtype=np.float64)
        entry = self.stats.get(za, zb)
        if entry is None:
            return np.zeros_like(d)
        d0 = entry[1]
        eps = self.well_depth(za, zb)
        ex = np.exp(-self.width * (d - d0))
        morse = eps * ((1.0 - ex) ** 2 - 1.0)
        dmorse = eps * 2.0 * (1.0 - ex) * self.width * ex
        span = self.taper_off - self.taper_on
        x = np.clip((d - d0 - self.taper_on) / span, 0.0, 1.0)
        taper = 0.5 * (1.0 + np.cos(np.pi * x))
        inside = (x > 0.0) & (x < 1.0)
        dtaper = np.where(inside, -0.5 * np.pi / span * np.sin(np.pi * x), 0.0)
        return dmorse * taper + morse * dtaper

    def total_energy_and_grad(self, structure: CrystalStructure) -> tuple[float, np.ndarray]:
        """Total pair energy (eV) and its gradient w.r.t. Cartesian positions (eV/Angstrom)."""
        n = len(structure)
        grad = np.zeros((n, 3))
        cutoff = self.cutoff_for(structure.species)
        if cutoff <= 0:
            return 0.0, grad
        m = structure.lattice.matrix
        zs = structure.species
        energy = 0.0
        for nl in neighbor_chunks(structure, cutoff):
            vec = (structure.frac[nl.dst] + nl.image - structure.frac[nl.src]) @ m
            za, zb = zs[nl.src], zs[nl.dst]
            dv = np.zeros(len(nl))
            for a, b in set(zip(za.tolist(), zb.tolist())):
                sel = (za == a) & (zb == b)
                energy += 0.5 * float(self.pair_energy(a, b, nl.distance[sel]).sum())
                dv[sel] = self.pair_derivative(a, b, nl.distance[sel])
            # each unordered pair appears in both directions; the src end feels -V'(d) r/d
            contrib = -(dv / np.maximum(nl.distance, 1e-12))[:, None] * vec
            np.add.at(grad, nl.src, contrib)
        return energy, grad


def relax_positions(structure: CrystalStructure, potential: SurrogateEnergy, max_iter: int = 200) -> CrystalStructure:
    """Minimize the surrogate energy over atomic positions at fixed lattice."""
    if len(structure) == 0:
        return structure
    lat = structure.lattice
    m = lat.matrix
    inv = np.linalg.inv(m)
    species = structure.species

    def fun(x):
        s = CrystalStructure(lat, species, x.reshape(-1, 3) @ inv)
        e, g = potential.total_energy_and_grad(s)
        return e, g.reshape(-1)

    res = minimize(fun, structure.cart.reshape(-1), jac=True, method="L-BFGS-B", options={"maxiter": max_iter})
    return CrystalStructure(lat, species, res.x.reshape(-1, 3) @ inv)


class SubprocessOracle:
    """Line-delimited JSON bridge to an external predictor.

    Sends ``{"structure": {...}}`` per line on the child's stdin and reads one
    JSON line back, taking ``response[key]``. Requests are serialized.
    """

    def __init__(self, command: str | list[str] | None = None, key: str = "energy_per_atom",
                 timeout: float = 30.0, clamp: bool = True):
        command = command or os.environ.get(ORACLE_ENV)
        if not command:
            raise OracleError(f"no oracle command given and ${ORACLE_ENV} is unset")
        self.command = shlex.split(command) if isinstance(command, str) else list(command)
        self.key = key
        self.timeout = timeout
        self.clamp = clamp
        self._proc: subprocess.Popen | None = None

    def _ensure(self) -> subprocess.Popen:
        if self._proc is None or self._proc.poll() is not None:
            self._proc = subprocess.Popen(
                self.command, stdin=subprocess.PIPE, stdout=subprocess.PIPE, text=True, bufsize=1
            )
        return self._proc

    def __call__(self, structure: CrystalStructure) -> float:
        proc = self._ensure()
        try:
            proc.stdin.write(json.dumps({"structure": structure.to_dict()}) + "\n")
            proc.stdin.flush()
        except (BrokenPipeError, OSError) as exc:
            self.close()
            raise OracleError(f"oracle process unavailable: {exc}") from exc
        sel = selectors.DefaultSelector()
        sel.register(proc.stdout, selectors.EVENT_READ)
        ready = sel.select(self.timeout)
        sel.close()
        if not ready:
            self.close()
            raise OracleError(f"oracle timed out after {self.timeout}s")
        line = proc.stdout.readline()
        if not line:
            self.close()
            raise OracleError("oracle closed its output")
        try:
            value = float(json.loads(line)[self.key])
        except (ValueError, KeyError, TypeError) as exc:
            raise OracleError(f"bad oracle response {line.strip()!r}") from exc
        if not math.isfinite(value):
            raise OracleError(f"oracle returned non-finite {self.key}")
        return clamp_energy(value) if self.clamp else value

    def close(self) -> None:
        if getattr(self, "_proc", None) is not None:
            try:
                self._proc.stdin.close()
            except OSError:
                pass
            self._proc.kill()
            self._proc.wait()
            self._proc = None

    def __del__(self):
        self.close()
