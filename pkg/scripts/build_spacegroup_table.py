"""Regenerate ``src/crystalgfn/data/spacegroups.dat`` from spglib's Hall database.

Developer tool only; spglib is not a runtime dependency. Settings chosen:
unique axis c (cell choice 1) for monoclinic groups, origin choice 2 where two
origins exist, hexagonal axes for rhombohedral groups.
"""
from __future__ import annotations

import sys
from fractions import Fraction
from pathlib import Path

import numpy as np
import spglib

OUT = Path(__file__).resolve().parents[1] / "src" / "crystalgfn" / "data" / "spacegroups.dat"
PREFERRED_CHOICES = ("", "c", "c1", "2", "H")


def pick_hall(number: int) -> int:
    candidates = [h for h in range(1, 531) if spglib.get_spacegroup_type(h).number == number]
    for choice in PREFERRED_CHOICES:
        for h in candidates:
            if spglib.get_spacegroup_type(h).choice == choice:
                return h
    return candidates[0]


def key(rot, trans):
    t = tuple(Fraction(float(x)).limit_denominator(12) % 1 for x in trans)
    return (tuple(int(v) for v in np.asarray(rot).ravel()), t)


def compose(a, b):
    ra, ta = np.array(a[0]).reshape(3, 3), np.array([float(x) for x in a[1]])
    rb, tb = np.array(b[0]).reshape(3, 3), np.array([float(x) for x in b[1]])
    return key(ra @ rb, ra @ tb + ta)


def closure(gens):
    ident = key(np.eye(3, dtype=int), [0, 0, 0])
    group = {ident}
    frontier = [ident]
    while frontier:
        new = []
        for g in frontier:
            for h in gens:
                p = compose(g, h)
                if p not in group:
                    group.add(p)
                    new.append(p)
        frontier = new
    return group


def triplet(op) -> str:
    rot = np.array(op[0]).reshape(3, 3)
    parts = []
    for i in range(3):
        s = ""
        for j, var in enumerate("xyz"):
            c = rot[i, j]
            if c == 1:
                s += ("+" if s else "") + var
            elif c == -1:
                s += "-" + var
            elif c != 0:
                raise ValueError(rot)
        t = op[1][i]
        if t != 0:
            s += f"+{t.numerator}/{t.denominator}"
        parts.append(s)
    return ",".join(parts)


def main() -> int:
    lines = [
        "# crystalgfn space-group generator table, format version 1",
        "# number | Hermann-Mauguin symbol | Hall number | order | generators (x,y,z triplets, ';'-separated)",
        "# settings: monoclinic unique axis c; origin choice 2; rhombohedral on hexagonal axes",
    ]
    for number in range(1, 231):
        hall = pick_hall(number)
        sg = spglib.get_spacegroup_type(hall)
        sym = spglib.get_symmetry_from_database(hall)
        ops = [key(r, t) for r, t in zip(sym["rotations"], sym["translations"])]
        full = set(ops)
        gens: list = []
        current = closure(gens)
        for op in ops:
            if op not in current:
                gens.append(op)
                current = closure(gens)
        assert current == full, number
        symbol = sg.international_full.replace(" ", "")
        lines.append(f"{number} | {symbol} | {hall} | {len(full)} | " + "; ".join(triplet(g) for g in gens))
    OUT.write_text("\n".join(lines) + "\n")
    print(f"wrote {OUT}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
