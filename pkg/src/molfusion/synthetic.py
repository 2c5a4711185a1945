"""Seeded generators for small drug-like SMILES corpora and toy tasks."""
from __future__ import annotations

import numpy as np

from .chem import parse

# Fragments that keep every atom within standard valence when chained.
_CHAIN = ["C", "CC", "C(C)", "C(C)C", "N", "C(N)", "S", "C(F)", "C(Cl)", "CN(C)", "C=C"]
_RINGS = ["c1ccccc1", "C1CCCCC1", "c1ccncc1", "C1CC1", "c1ccsc1", "C1CCNC1", "c1cc2ccccc2cc1"]
_CAPS = ["F", "Cl", "Br", "C#N", "C", "N"]
_OXY_CHAIN = ["O", "C(=O)", "C(O)", "OC", "C(=O)N"]
_OXY_RINGS = ["c1ccoc1", "C1CCOC1", "C1COCCN1"]
_OXY_CAPS = ["O", "C(=O)O", "OC"]


def random_smiles(rng: np.random.Generator, with_oxygen: bool, max_pieces: int = 5) -> str:
    n = int(rng.integers(1, max_pieces + 1))
    pieces = []
    for _ in range(n):
        pool = _RINGS if rng.random() < 0.35 else _CHAIN
        pieces.append(pool[int(rng.integers(len(pool)))])
    if rng.random() < 0.5:
        pieces.append(_CAPS[int(rng.integers(len(_CAPS)))])
    if with_oxygen:
        pool = [_OXY_CHAIN, _OXY_RINGS, _OXY_CAPS][int(rng.integers(3))]
        frag = pool[int(rng.integers(len(pool)))]
        if pool is _OXY_CAPS:
            pieces.append(frag)
        else:
            pieces.insert(int(rng.integers(len(pieces) + 1)), frag)
    # ring labels must be unique only while open; each fragment closes its own
    return "".join(pieces)


def generate_corpus(n: int, seed: int = 0, oxygen_fraction: float = 0.5) -> list[str]:
    """``n`` distinct parseable SMILES; about ``oxygen_fraction`` contain oxygen."""
    rng = np.random.default_rng(seed)
    out: list[str] = []
    seen: set[str] = set()
    attempts = 0
    while len(out) < n:
        attempts += 1
        if attempts > 200 * n:
            raise RuntimeError("could not generate enough distinct molecules")
        s = random_smiles(rng, rng.random() < oxygen_fraction)
        if s in seen:
            continue
        try:
            parse(s)
        except ValueError:
            continue
        seen.add(s)
        out.append(s)
    return out


def contains_oxygen(smiles: str) -> int:
    mol, _ = parse(smiles)
    return int(any(a.element == "O" for a in mol.atoms))
