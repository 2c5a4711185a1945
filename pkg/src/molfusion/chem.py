"""SMILES tokenization, parsing and graph featurization.

Atoms are indexed in the order they first appear in the SMILES string. Both
encoders rely on that ordering to line up per-atom rows, so nothing in this
module ever renumbers atoms.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field

import numpy as np

ORGANIC = ("Cl", "Br", "B", "C", "N", "O", "P", "S", "F", "I")
AROMATIC_ORGANIC = ("b", "c", "n", "o", "p", "s")
ELEMENTS = ("B", "C", "N", "O", "P", "S", "F", "Cl", "Br", "I", "H")
OTHER = "OTHER"

SINGLE, DOUBLE, TRIPLE, AROMATIC = "single", "double", "triple", "aromatic"
BOND_ORDERS = (SINGLE, DOUBLE, TRIPLE, AROMATIC)
_BOND_SYMBOLS = {"-": SINGLE, "=": DOUBLE, "#": TRIPLE, ":": AROMATIC, "/": None, "\\": None}

# Allowed valences for implicit-hydrogen assignment, lowest first.
VALENCES = {
    "B": (3,), "C": (4,), "N": (3,), "O": (2,), "P": (3, 5), "S": (2, 4, 6),
    "F": (1,), "Cl": (1,), "Br": (1,), "I": (1,),
}

ATOM, BOND, BRANCH_OPEN, BRANCH_CLOSE, RING, DOT = (
    "atom", "bond", "branch_open", "branch_close", "ring", "dot")

_TOKEN_RE = re.compile(
    r"(?P<bracket>\[)"
    r"|(?P<atom>Cl|Br|B|C|N|O|P|S|F|I|b|c|n|o|p|s)"
    r"|(?P<bond>[-=#:/\\])"
    r"|(?P<open>\()"
    r"|(?P<close>\))"
    r"|(?P<ring>%\d\d|\d)"
    r"|(?P<dot>\.)"
)
_BRACKET_RE = re.compile(
    r"^(?P<isotope>\d+)?"
    r"(?P<symbol>se|as|[a-z]|[A-Z][a-z]?|\*)"
    r"(?P<chiral>@+(?:TH\d|AL\d|SP\d|TB\d{1,2}|OH\d{1,2})?)?"
    r"(?P<hcount>H\d?)?"
    r"(?P<charge>[+-]{1,4}\d?)?"
    r"(?::(?P<klass>\d+))?$"
)


class SmilesError(ValueError):
    """Base class for everything the tokenizer and parser reject."""


class UnknownCharacter(SmilesError):
    def __init__(self, position: int, char: str = ""):
        super().__init__(f"unknown character {char!r} at position {position}")
        self.position = position


class UnterminatedBracket(SmilesError):
    def __init__(self, position: int):
        super().__init__(f"unterminated bracket atom starting at position {position}")
        self.position = position


class UnmatchedRingClosure(SmilesError):
    def __init__(self, digit: str):
        super().__init__(f"ring closure {digit} is never closed")
        self.digit = digit


class UnclosedBranch(SmilesError):
    pass


class MultiFragmentInput(SmilesError):
    pass


class ValenceOverflow(SmilesError):
    def __init__(self, atom_index: int):
        super().__init__(f"valence exceeded on atom {atom_index}")
        self.atom_index = atom_index


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int


@dataclass
class Atom:
    element: str
    index: int
    formal_charge: int = 0
    aromatic: bool = False
    explicit_h: int = 0
    implicit_h: int = 0
    bracket: bool = False

    @property
    def total_h(self) -> int:
        return self.explicit_h + self.implicit_h

    @property
    def element_class(self) -> str:
        return self.element if self.element in ELEMENTS else OTHER


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: str

    @property
    def endpoints(self) -> tuple[int, int]:
        return (self.begin, self.end)


@dataclass
class Molecule:
    atoms: list[Atom]
    bonds: list[Bond]
    smiles: str = ""
    _neighbors: list[list[tuple[int, int]]] | None = field(default=None, repr=False, compare=False)
    _ring_bonds: frozenset[int] | None = field(default=None, repr=False, compare=False)

    @property
    def n_atoms(self) -> int:
        return len(self.atoms)

    def neighbors(self, i: int) -> list[tuple[int, int]]:
        """(neighbor atom, bond index) pairs for atom ``i``."""
        if self._neighbors is None:
            nbrs: list[list[tuple[int, int]]] = [[] for _ in self.atoms]
            for k, b in enumerate(self.bonds):
                nbrs[b.begin].append((b.end, k))
                nbrs[b.end].append((b.begin, k))
            self._neighbors = nbrs
        return self._neighbors[i]

    def degree(self, i: int) -> int:
        return len(self.neighbors(i))

    def ring_bonds(self) -> frozenset[int]:
        """Indices of bonds lying on at least one cycle (every non-bridge bond)."""
        if self._ring_bonds is None:
            bridges = _bridges(self)
            self._ring_bonds = frozenset(k for k in range(len(self.bonds)) if k not in bridges)
        return self._ring_bonds

    def ring_atoms(self) -> list[bool]:
        flags = [False] * self.n_atoms
        for k in self.ring_bonds():
            flags[self.bonds[k].begin] = flags[self.bonds[k].end] = True
        return flags


@dataclass
class TokenizedSmiles:
    tokens: list[Token]
    atom_map: dict[int, int]

    @property
    def atom_positions(self) -> list[int]:
        """Token positions of atom tokens, ordered by the atom index they denote."""
        return sorted(self.atom_map, key=self.atom_map.__getitem__)

    @property
    def texts(self) -> list[str]:
        return [t.text for t in self.tokens]

    def detokenize(self) -> str:
        return "".join(t.text for t in self.tokens)


def tokenize(smiles: str) -> TokenizedSmiles:
    if not smiles:
        raise SmilesError("empty SMILES")
    tokens: list[Token] = []
    atom_map: dict[int, int] = {}
    pos = 0
    while pos < len(smiles):
        m = _TOKEN_RE.match(smiles, pos)
        if m is None:
            raise UnknownCharacter(pos, smiles[pos])
        if m.lastgroup == "bracket":
            end = smiles.find("]", pos)
            if end < 0:
                raise UnterminatedBracket(pos)
            text = smiles[pos:end + 1]
            if _BRACKET_RE.match(text[1:-1]) is None:
                raise UnknownCharacter(pos + 1, text)
            kind = ATOM
        else:
            text = m.group()
            kind = {"atom": ATOM, "bond": BOND, "open": BRANCH_OPEN,
                    "close": BRANCH_CLOSE, "ring": RING, "dot": DOT}[m.lastgroup]
        if kind == ATOM:
            atom_map[len(tokens)] = len(atom_map)
        tokens.append(Token(kind, text, pos))
        pos += len(text)
    return TokenizedSmiles(tokens, atom_map)


def _bracket_atom(text: str, index: int) -> Atom:
    m = _BRACKET_RE.match(text[1:-1])
    symbol = m.group("symbol")
    aromatic = symbol[0].islower()
    element = symbol.capitalize() if aromatic else symbol
    h = m.group("hcount")
    explicit_h = 0 if h is None else (int(h[1:]) if len(h) > 1 else 1)
    charge = 0
    c = m.group("charge")
    if c:
        sign = 1 if c[0] == "+" else -1
        if c[-1].isdigit():
            charge = sign * int(c[-1])
        else:
            charge = sign * len(c)
    if abs(charge) > 4:
        raise SmilesError(f"formal charge {charge} out of range in {text}")
    return Atom(element, index, charge, aromatic, explicit_h, bracket=True)


def parse(smiles: str) -> tuple[Molecule, TokenizedSmiles]:
    tok = tokenize(smiles)
    atoms: list[Atom] = []
    bonds: list[Bond] = []
    implicit_bond: list[bool] = []
    seen_pairs: set[frozenset[int]] = set()
    # ring label -> (atom index, bond order or None)
    open_rings: dict[str, tuple[int, str | None]] = {}
    stack: list[int] = []
    prev: int | None = None
    pending: str | None = None
    pending_set = False

    def add_bond(a: int, b: int, order: str | None) -> None:
        if a == b:
            raise SmilesError(f"self-loop on atom {a}")
        pair = frozenset((a, b))
        if pair in seen_pairs:
            raise SmilesError(f"duplicate bond between atoms {a} and {b}")
        seen_pairs.add(pair)
        implicit = order is None
        if implicit:
            order = AROMATIC if atoms[a].aromatic and atoms[b].aromatic else SINGLE
        bonds.append(Bond(a, b, order))
        implicit_bond.append(implicit)

    for t in tok.tokens:
        if t.kind == ATOM:
            idx = len(atoms)
            if t.text.startswith("["):
                atom = _bracket_atom(t.text, idx)
            else:
                aromatic = t.text.islower()
                atom = Atom(t.text.capitalize() if aromatic else t.text, idx, aromatic=aromatic)
            atoms.append(atom)
            if prev is not None:
                add_bond(prev, idx, pending)
            elif pending_set:
                raise SmilesError(f"bond symbol without a preceding atom at position {t.position}")
            prev, pending, pending_set = idx, None, False
        elif t.kind == BOND:
            if prev is None:
                raise SmilesError(f"bond symbol without a preceding atom at position {t.position}")
            pending, pending_set = _BOND_SYMBOLS[t.text], True
        elif t.kind == BRANCH_OPEN:
            if prev is None:
                raise SmilesError(f"branch without a preceding atom at position {t.position}")
            stack.append(prev)
        elif t.kind == BRANCH_CLOSE:
            if not stack:
                raise UnclosedBranch(f"unmatched ')' at position {t.position}")
            prev, pending, pending_set = stack.pop(), None, False
        elif t.kind == RING:
            if prev is None:
                raise SmilesError(f"ring closure without a preceding atom at position {t.position}")
            label = t.text.lstrip("%")
            if label in open_rings:
                other, order = open_rings.pop(label)
                if order is not None and pending is not None and order != pending:
                    raise SmilesError(f"conflicting bond orders on ring closure {label}")
                add_bond(other, prev, pending if pending is not None else order)
            else:
                open_rings[label] = (prev, pending)
            pending, pending_set = None, False
        else:
            raise MultiFragmentInput(f"'.' at position {t.position}: multi-fragment input")
    if stack:
        raise UnclosedBranch(f"{len(stack)} branch(es) left open")
    if open_rings:
        raise UnmatchedRingClosure(next(iter(open_rings)))
    if pending_set:
        raise SmilesError("dangling bond symbol at end of SMILES")

    mol = Molecule(atoms, bonds, smiles)
    # An unspecified bond between two aromatic atoms outside any ring is a
    # plain single bond (biphenyl-style links).
    ring_bonds = mol.ring_bonds()
    for k, b in enumerate(bonds):
        if implicit_bond[k] and b.order == AROMATIC and k not in ring_bonds:
            bonds[k] = Bond(b.begin, b.end, SINGLE)
    _assign_implicit_h(mol)
    return mol, tok


def _assign_implicit_h(mol: Molecule) -> None:
    for atom in mol.atoms:
        if atom.bracket:
            continue
        orders = [mol.bonds[k].order for _, k in mol.neighbors(atom.index)]
        valences = VALENCES[atom.element]
        if atom.aromatic:
            # aromatic bonds count 1, plus one for the delocalized pi contribution
            used = sum({SINGLE: 1, AROMATIC: 1, DOUBLE: 2, TRIPLE: 3}[o] for o in orders) + 1
            if used - 1 > valences[-1]:
                raise ValenceOverflow(atom.index)
            atom.implicit_h = max(0, valences[0] - used)
            continue
        used = sum({SINGLE: 1.0, AROMATIC: 1.5, DOUBLE: 2.0, TRIPLE: 3.0}[o] for o in orders)
        used = int(np.ceil(used))
        for v in valences:
            if v >= used:
                atom.implicit_h = v - used
                break
        else:
            raise ValenceOverflow(atom.index)


def _bridges(mol: Molecule) -> set[int]:
    """Bond indices whose removal disconnects the graph (iterative Tarjan)."""
    n = mol.n_atoms
    disc = [-1] * n
    low = [0] * n
    bridges: set[int] = set()
    timer = 0
    for root in range(n):
        if disc[root] >= 0:
            continue
        disc[root] = low[root] = timer
        timer += 1
        stack = [(root, -1, iter(mol.neighbors(root)))]
        while stack:
            v, via, it = stack[-1]
            advanced = False
            for w, k in it:
                if k == via:
                    continue
                if disc[w] < 0:
                    disc[w] = low[w] = timer
                    timer += 1
                    stack.append((w, k, iter(mol.neighbors(w))))
                    advanced = True
                    break
                low[v] = min(low[v], disc[w])
            if not advanced:
                stack.pop()
                if stack:
                    parent = stack[-1][0]
                    low[parent] = min(low[parent], low[v])
                    if low[v] > disc[parent]:
                        bridges.add(via)
    return bridges


# --- featurization ---------------------------------------------------------

ELEMENT_CLASSES = ELEMENTS + (OTHER,)
MAX_DEGREE = 6
MAX_H = 4
ATOM_FEATURE_DIM = len(ELEMENT_CLASSES) + (MAX_DEGREE + 1) + 1 + 1 + (MAX_H + 1) + 1
BOND_FEATURE_DIM = len(BOND_ORDERS)


@dataclass
class AtomFeatures:
    atoms: np.ndarray  # (n_atoms, ATOM_FEATURE_DIM)
    bonds: np.ndarray  # (n_bonds, BOND_FEATURE_DIM)


def featurize(mol: Molecule) -> AtomFeatures:
    in_ring = mol.ring_atoms()
    x = np.zeros((mol.n_atoms, ATOM_FEATURE_DIM))
    off_deg = len(ELEMENT_CLASSES)
    off_charge = off_deg + MAX_DEGREE + 1
    off_h = off_charge + 2
    for a in mol.atoms:
        row = x[a.index]
        row[ELEMENT_CLASSES.index(a.element_class)] = 1.0
        row[off_deg + min(mol.degree(a.index), MAX_DEGREE)] = 1.0
        row[off_charge] = a.formal_charge
        row[off_charge + 1] = float(a.aromatic)
        row[off_h + min(a.total_h, MAX_H)] = 1.0
        row[-1] = float(in_ring[a.index])
    e = np.zeros((len(mol.bonds), BOND_FEATURE_DIM))
    for k, b in enumerate(mol.bonds):
        e[k, BOND_ORDERS.index(b.order)] = 1.0
    return AtomFeatures(x, e)


def describe(mol: Molecule) -> str:
    """Human-readable atom and bond listing."""
    ring = mol.ring_atoms()
    lines = [f"atoms {mol.n_atoms}"]
    for a in mol.atoms:
        lines.append(
            f"  {a.index:3d} {a.element:<3s} charge={a.formal_charge:+d} "
            f"aromatic={int(a.aromatic)} h={a.total_h} ring={int(ring[a.index])}")
    lines.append(f"bonds {len(mol.bonds)}")
    for b in mol.bonds:
        lines.append(f"  {b.begin:3d} {b.end:3d} {b.order}")
    return "\n".join(lines)
