"""Morgan (ECFP-style) fingerprints and Tanimoto similarity."""
from __future__ import annotations

import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .chem import BOND_ORDERS, Molecule
from .utils import worker_count

DEFAULT_RADIUS = 2
DEFAULT_BITS = 2048

_FNV_OFFSET = 0xCBF29CE484222325
_FNV_PRIME = 0x100000001B3
_HASH_SEED = 0x6D6F6C667573696F  # pinned; changing it changes every fingerprint
_MASK64 = (1 << 64) - 1


class LengthMismatch(ValueError):
    pass


def hash64(values) -> int:
    """FNV-1a over the little-endian bytes of a sequence of 64-bit integers."""
    h = _FNV_OFFSET ^ _HASH_SEED
    for byte in struct.pack(f"<{len(values)}Q", *(v & _MASK64 for v in values)):
        h = ((h ^ byte) * _FNV_PRIME) & _MASK64
    return h


def _element_code(symbol: str) -> int:
    return int.from_bytes(symbol.encode("ascii").ljust(8, b"\0"), "little")


@dataclass(frozen=True)
class Fingerprint:
    identifiers: frozenset[int]
    bits: np.ndarray

    @property
    def n_bits(self) -> int:
        return len(self.bits)

    @property
    def on_bits(self) -> list[int]:
        return np.flatnonzero(self.bits).tolist()

    def __eq__(self, other) -> bool:
        if not isinstance(other, Fingerprint):
            return NotImplemented
        return self.identifiers == other.identifiers and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.identifiers)


def fold(identifiers, n_bits: int) -> np.ndarray:
    bits = np.zeros(n_bits, dtype=bool)
    for ident in identifiers:
        bits[ident % n_bits] = True
    return bits


def morgan(mol: Molecule, radius: int = DEFAULT_RADIUS, n_bits: int = DEFAULT_BITS) -> Fingerprint:
    """Circular fingerprint.

    Per-atom identifiers start from a hash of (element, degree, charge,
    hydrogen count, ring flag) and are refined ``radius`` times from the
    sorted (bond order, neighbour id) list. Identifiers are pooled over all
    iterations; an environment whose bond set was already seen is a
    structural duplicate and contributes nothing (ties within one iteration
    keep the smallest identifier, so the result is atom-order invariant).
    """
    if radius < 0 or n_bits < 1:
        raise ValueError("radius must be >= 0 and n_bits >= 1")
    ring = mol.ring_atoms()
    ids = [
        hash64((_element_code(a.element), mol.degree(a.index), a.formal_charge,
                a.total_h, int(ring[a.index])))
        for a in mol.atoms
    ]
    identifiers = set(ids)
    envs = [frozenset() for _ in mol.atoms]
    seen_envs: set[frozenset[int]] = set(envs)
    for r in range(1, radius + 1):
        new_ids = []
        new_envs = []
        for a in mol.atoms:
            nbrs = sorted((BOND_ORDERS.index(mol.bonds[k].order), ids[j])
                          for j, k in mol.neighbors(a.index))
            flat = [r, ids[a.index]]
            for order, nid in nbrs:
                flat += [order, nid]
            new_ids.append(hash64(flat))
            env = set(envs[a.index])
            for j, k in mol.neighbors(a.index):
                env.add(k)
                env |= envs[j]
            new_envs.append(frozenset(env))
        for env, ident in sorted(zip(new_envs, new_ids), key=lambda p: p[1]):
            if env in seen_envs:
                continue
            seen_envs.add(env)
            identifiers.add(ident)
        ids, envs = new_ids, new_envs
    return Fingerprint(frozenset(identifiers), fold(identifiers, n_bits))


def tanimoto(a: Fingerprint, b: Fingerprint) -> float:
    if a.n_bits != b.n_bits:
        raise LengthMismatch(f"{a.n_bits} != {b.n_bits}")
    union = np.count_nonzero(a.bits | b.bits)
    if union == 0:
        return 0.0
    return np.count_nonzero(a.bits & b.bits) / union


def set_tanimoto(a, b) -> float:
    a, b = set(a), set(b)
    union = len(a | b)
    return len(a & b) / union if union else 0.0


def similarity_matrix(mols: list[Molecule], radius: int = DEFAULT_RADIUS,
                      n_bits: int = DEFAULT_BITS) -> np.ndarray:
    """Pairwise Tanimoto matrix of Morgan fingerprints."""
    if not mols:
        raise ValueError("need at least one molecule")
    with ThreadPoolExecutor(worker_count()) as pool:
        fps = list(pool.map(lambda m: morgan(m, radius, n_bits), mols))
    bits = np.stack([fp.bits for fp in fps]).astype(np.int64)
    inter = bits @ bits.T
    counts = bits.sum(axis=1)
    union = counts[:, None] + counts[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        sim = np.where(union > 0, inter / np.maximum(union, 1), 0.0)
    return sim
