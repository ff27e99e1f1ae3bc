"""Minimal CIF 1.1 reader/writer for P1-expanded crystal structures."""
from __future__ import annotations

import re
import shlex

import numpy as np

from .crystal import CrystalStructure, Lattice
from .elements import element
from .spacegroup import ORBIT_TOL, _dedup, _wrapped, group_ops, parse_xyz

CELL_FIELDS = (
    "_cell_length_a", "_cell_length_b", "_cell_length_c",
    "_cell_angle_alpha", "_cell_angle_beta", "_cell_angle_gamma",
)
SOURCE_GROUP_TAG = "_crystalgfn_source_space_group"
_UNCERTAINTY = re.compile(r"\(\d+\)$")


class CifError(ValueError):
    pass


def _fmt(x: float) -> str:
    return f"{x:.12f}"


def export_cif(structure: CrystalStructure, symmetry: int | None = None, name: str = "crystal") -> str:
    """CIF text with every site written explicitly in P1.

    ``symmetry`` records the space group the structure was expanded from as a
    tag; readers ignore it and the symmetry block stays P1.
    """
    lat = structure.lattice
    lines = [f"data_{name}"]
    if symmetry is not None:
        lines.append(f"{SOURCE_GROUP_TAG} {int(symmetry)}")
    for tag, value in zip(CELL_FIELDS, lat.params):
        lines.append(f"{tag} {_fmt(value)}")
    lines += [
        f"_cell_volume {_fmt(lat.volume)}",
        "_symmetry_space_group_name_H-M 'P 1'",
        "_symmetry_Int_Tables_number 1",
        "loop_",
        "_symmetry_equiv_pos_as_xyz",
        "'x, y, z'",
        "loop_",
        "_atom_site_label",
        "_atom_site_type_symbol",
        "_atom_site_fract_x",
        "_atom_site_fract_y",
        "_atom_site_fract_z",
        "_atom_site_occupancy",
    ]
    counts: dict[str, int] = {}
    for z, f in zip(structure.species, structure.frac):
        sym = element(int(z)).symbol
        counts[sym] = counts.get(sym, 0) + 1
        lines.append(f"{sym}{counts[sym]} {sym} {_fmt(f[0])} {_fmt(f[1])} {_fmt(f[2])} 1.0")
    return "\n".join(lines) + "\n"


def _number(token: str, lineno: int, what: str) -> float:
    try:
        return float(_UNCERTAINTY.sub("", token))
    except ValueError:
        raise CifError(f"line {lineno}: malformed number {token!r} for {what}") from None


def _tokens(line: str, lineno: int) -> list[str]:
    try:
        return shlex.split(line, posix=True)
    except ValueError as exc:
        raise CifError(f"line {lineno}: {exc}") from None


def _symbol_from(token: str) -> str:
    m = re.match(r"[A-Z][a-z]?", token)
    if not m:
        raise ValueError(token)
    sym = m.group(0)
    try:
        element(sym)
    except KeyError:
        element(sym[0])
        sym = sym[0]
    return sym


def parse_cif(text: str) -> CrystalStructure:
    """Parse the first data block: cell, optional symmetry operations, atom sites.

    Symmetry operations listed in the file are applied to the sites, and
    coordinates are reduced mod 1.
    """
    lines = text.splitlines()
    scalars: dict[str, tuple[str, int]] = {}
    loops: list[tuple[list[str], list[tuple[list[str], int]]]] = []
    i = 0
    while i < len(lines):
        raw = lines[i].split("#", 1)[0].strip() if not lines[i].lstrip().startswith(";") else lines[i].strip()
        i += 1
        if not raw:
            continue
        if raw.lower() == "loop_":
            headers: list[str] = []
            while i < len(lines) and lines[i].strip().startswith("_"):
                headers.append(lines[i].strip().split()[0].lower())
                i += 1
            rows: list[tuple[list[str], int]] = []
            pending: list[str] = []
            start = i + 1
            while i < len(lines):
                s = lines[i].split("#", 1)[0].strip()
                if s.startswith("_") or s.lower() == "loop_" or s.lower().startswith("data_"):
                    break
                i += 1
                if not s:
                    continue
                if not pending:
                    start = i
                pending += _tokens(s, i)
                while len(pending) >= len(headers):
                    rows.append((pending[:len(headers)], start))
                    pending = pending[len(headers):]
            if pending:
                raise CifError(f"line {start}: loop row has {len(pending)} values, expected {len(headers)}")
            loops.append((headers, rows))
            continue
        if raw.startswith("_"):
            parts = raw.split(None, 1)
            tag = parts[0].lower()
            value = parts[1].strip() if len(parts) > 1 else ""
            if not value and i < len(lines):
                value = lines[i].strip()
                i += 1
            scalars[tag] = (value.strip("'\""), i)
    cell = []
    for tag in CELL_FIELDS:
        if tag not in scalars:
            raise CifError(f"missing required field {tag}")
        value, lineno = scalars[tag]
        cell.append(_number(value, lineno, tag))
    try:
        lattice = Lattice(*cell)
    except ValueError as exc:
        raise CifError(f"invalid cell: {exc}") from None

    site_loop = next((lp for lp in loops if "_atom_site_fract_x" in lp[0]), None)
    if site_loop is None:
        raise CifError("missing atom-site loop with _atom_site_fract_x/_y/_z")
    headers, rows = site_loop
    for tag in ("_atom_site_fract_y", "_atom_site_fract_z"):
        if tag not in headers:
            raise CifError(f"missing required field {tag}")
    col = {h: k for k, h in enumerate(headers)}
    sym_col = col.get("_atom_site_type_symbol", col.get("_atom_site_label"))
    if sym_col is None:
        raise CifError("atom-site loop needs _atom_site_type_symbol or _atom_site_label")
    species, coords = [], []
    for values, lineno in rows:
        try:
            species.append(element(_symbol_from(values[sym_col])).z)
        except (KeyError, ValueError):
            raise CifError(f"line {lineno}: unknown element {values[sym_col]!r}") from None
        coords.append([_number(values[col[f"_atom_site_fract_{ax}"]], lineno, f"_atom_site_fract_{ax}") for ax in "xyz"])

    ops = None
    for headers, rows in loops:
        key = next((h for h in headers if h in ("_symmetry_equiv_pos_as_xyz", "_space_group_symop_operation_xyz")), None)
        if key is not None:
            k = headers.index(key)
            try:
                ops = [parse_xyz(r[k]) for r, _ in rows]
            except ValueError as exc:
                raise CifError(f"line {rows[0][1] if rows else '?'}: bad symmetry operation: {exc}") from None
    structure = CrystalStructure(lattice, np.array(species, dtype=np.int64), np.array(coords).reshape(-1, 3))
    if ops and len(ops) > 1:
        structure = _apply_ops(structure, ops)
    return structure


def _apply_ops(structure: CrystalStructure, ops) -> CrystalStructure:
    species, points = [], []
    for z, x in zip(structure.species, structure.frac):
        imgs = np.mod(np.array([op.apply(x) for op in ops]), 1.0)
        imgs[imgs >= 1.0] = 0.0
        for p in _dedup(imgs, ORBIT_TOL):
            if points and np.any(np.max(np.abs(_wrapped(np.asarray(points) - p)), axis=1) < ORBIT_TOL):
                continue
            species.append(int(z))
            points.append(p)
    return CrystalStructure(structure.lattice, np.array(species, dtype=np.int64), np.array(points).reshape(-1, 3))


def source_space_group(text: str) -> int | None:
    m = re.search(rf"^{SOURCE_GROUP_TAG}\s+(\d+)", text, re.MULTILINE)
    if not m:
        return None
    number = int(m.group(1))
    group_ops(number)  # validates range
    return number
