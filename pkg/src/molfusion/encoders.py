"""Desk-scale SMILES and graph encoders sharing one atom ordering.

Both encoders return per-atom rows ordered molecule by molecule and, within a
molecule, by SMILES atom index, so row ``i`` of one encoder's output and row
``i`` of the other's describe the same atom.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .chem import (ATOM, ATOM_FEATURE_DIM, BOND_FEATURE_DIM, AtomFeatures, Molecule,
                   TokenizedSmiles, featurize, parse)

PAD, MASK, UNK = "<pad>", "<mask>", "<unk>"
OTHER_ATOM = "<other>"
PROJ_INIT_STD = 0.02


class VocabOverflow(ValueError):
    pass


class Vocabulary:
    """Token texts to ids; ids 0-2 are reserved for PAD, MASK and UNK.

    Atom-type classes (the targets of masked-atom prediction) are the distinct
    atom-token texts plus a catch-all ``<other>`` class.
    """

    def __init__(self, tokens, atom_types):
        self.tokens = [PAD, MASK, UNK] + [t for t in tokens if t not in (PAD, MASK, UNK)]
        self.index = {t: i for i, t in enumerate(self.tokens)}
        self.atom_types = [a for a in atom_types if a != OTHER_ATOM] + [OTHER_ATOM]
        self.atom_index = {a: i for i, a in enumerate(self.atom_types)}

    @classmethod
    def build(cls, tokenized: list[TokenizedSmiles]) -> "Vocabulary":
        texts, atoms = set(), set()
        for tok in tokenized:
            for t in tok.tokens:
                texts.add(t.text)
                if t.kind == ATOM:
                    atoms.add(t.text)
        return cls(sorted(texts), sorted(atoms))

    def __len__(self):
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def mask_id(self) -> int:
        return 1

    @property
    def n_atom_types(self) -> int:
        return len(self.atom_types)

    def encode(self, tok: TokenizedSmiles) -> np.ndarray:
        unk = self.index[UNK]
        return np.array([self.index.get(t.text, unk) for t in tok.tokens], dtype=np.int64)

    def atom_labels(self, tok: TokenizedSmiles) -> np.ndarray:
        other = self.atom_index[OTHER_ATOM]
        return np.array([self.atom_index.get(tok.tokens[p].text, other)
                         for p in tok.atom_positions], dtype=np.int64)

    def to_dict(self) -> dict:
        return {"tokens": self.tokens[3:], "atom_types": self.atom_types}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocabulary":
        return cls(d["tokens"], d["atom_types"])


@dataclass
class EncoderConfig:
    vocab_size: int
    d_model: int = 64
    d_shared: int = 64
    n_layers: int = 2
    n_heads: int = 4
    mp_rounds: int = 3
    graph_d_model: int | None = None

    def __post_init__(self):
        if self.graph_d_model is None:
            self.graph_d_model = self.d_model
        for name in ("vocab_size", "d_model", "d_shared", "n_layers", "n_heads",
                     "mp_rounds", "graph_d_model"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")


@dataclass
class MolRecord:
    """A parsed molecule with everything both encoders need."""
    smiles: str
    mol: Molecule
    tok: TokenizedSmiles
    feats: AtomFeatures

    @classmethod
    def from_smiles(cls, smiles: str) -> "MolRecord":
        mol, tok = parse(smiles)
        return cls(smiles, mol, tok, featurize(mol))

    @property
    def n_atoms(self) -> int:
        return self.mol.n_atoms


@dataclass
class MaskingOutcome:
    masked_token_ids: np.ndarray
    mask_indicator: np.ndarray  # per atom, 0/1
    atom_type_labels: np.ndarray  # per atom

    @property
    def masked_atoms(self) -> np.ndarray:
        return np.flatnonzero(self.mask_indicator)


def n_to_mask(n_atoms: int, mask_rate: float) -> int:
    if mask_rate <= 0 or n_atoms == 0:
        return 0
    return min(n_atoms, max(1, int(math.floor(mask_rate * n_atoms + 0.5))))


def mask_atoms(tok: TokenizedSmiles, vocab: Vocabulary, mask_rate: float,
               rng: np.random.Generator) -> MaskingOutcome:
    """Replace a uniformly chosen subset of atom tokens with MASK."""
    if not 0.0 <= mask_rate <= 1.0:
        raise ValueError("mask_rate must lie in [0, 1]")
    positions = tok.atom_positions
    n = len(positions)
    k = n_to_mask(n, mask_rate)
    chosen = np.sort(rng.choice(n, size=k, replace=False)) if k else np.zeros(0, np.int64)
    ids = vocab.encode(tok)
    indicator = np.zeros(n, dtype=np.int64)
    indicator[chosen] = 1
    for atom in chosen:
        ids[positions[atom]] = vocab.mask_id
    return MaskingOutcome(ids, indicator, vocab.atom_labels(tok))


@dataclass
class Batch:
    """Collated inputs for N molecules."""
    records: list[MolRecord]
    token_ids: np.ndarray  # (N, L)
    key_padding: np.ndarray  # (N, L) True at padding
    atom_token_rows: np.ndarray  # (n_atoms_total,) rows into the flattened (N*L) sequence
    atom_segment: np.ndarray  # (n_atoms_total,) molecule of each atom
    atom_x: np.ndarray
    edge_src: np.ndarray
    edge_dst: np.ndarray
    edge_x: np.ndarray
    masked_token_ids: np.ndarray | None = None
    mask_indicator: np.ndarray | None = None
    atom_type_labels: np.ndarray | None = None

    @property
    def n_mols(self) -> int:
        return len(self.records)

    @property
    def n_atoms(self) -> int:
        return len(self.atom_segment)


def collate(records: list[MolRecord], vocab: Vocabulary,
            maskings: list[MaskingOutcome] | None = None) -> Batch:
    n = len(records)
    length = max(len(r.tok.tokens) for r in records)
    ids = np.full((n, length), vocab.pad_id, dtype=np.int64)
    pad = np.ones((n, length), dtype=bool)
    rows, seg, xs, src, dst, ex = [], [], [], [], [], []
    offset = 0
    for b, r in enumerate(records):
        t = vocab.encode(r.tok)
        ids[b, :len(t)] = t
        pad[b, :len(t)] = False
        rows.extend(b * length + p for p in r.tok.atom_positions)
        seg.extend([b] * r.n_atoms)
        xs.append(r.feats.atoms)
        for k, bond in enumerate(r.mol.bonds):
            src += [bond.begin + offset, bond.end + offset]
            dst += [bond.end + offset, bond.begin + offset]
            ex += [r.feats.bonds[k], r.feats.bonds[k]]
        offset += r.n_atoms
    batch = Batch(
        records, ids, pad, np.array(rows, np.int64), np.array(seg, np.int64),
        np.concatenate(xs), np.array(src, np.int64), np.array(dst, np.int64),
        np.array(ex).reshape(-1, BOND_FEATURE_DIM))
    if maskings is not None:
        masked = np.full((n, length), vocab.pad_id, dtype=np.int64)
        for b, m in enumerate(maskings):
            masked[b, :len(m.masked_token_ids)] = m.masked_token_ids
        batch.masked_token_ids = masked
        batch.mask_indicator = np.concatenate([m.mask_indicator for m in maskings])
        batch.atom_type_labels = np.concatenate([m.atom_type_labels for m in maskings])
    return batch


@dataclass
class AtomEmbeddingSequence:
    per_atom: Tensor  # (n_atoms_total, d)
    pooled: Tensor  # (N, d)
    atom_segment: np.ndarray


def sinusoidal_positions(length: int, d: int) -> np.ndarray:
    pos = np.arange(length)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    return np.where(i % 2 == 0, np.sin(angle), np.cos(angle))


def mean_pool(per_atom: Tensor, segment: np.ndarray, n: int) -> Tensor:
    counts = np.bincount(segment, minlength=n).astype(np.float64)
    return ag.mul(ag.segment_sum(per_atom, segment, n), 1.0 / np.maximum(counts, 1.0)[:, None])


def linear(x, w: Tensor, b: Tensor | None = None) -> Tensor:
    out = ag.matmul(x, w)
    return ag.add(out, b) if b is not None else out


class MolFusionModel:
    """Parameters of both encoders, their projections and the prediction heads."""

    def __init__(self, cfg: EncoderConfig, n_atom_types: int, rng: np.random.Generator,
                 unmask_head: str = "folded"):
        if unmask_head not in ("folded", "binary"):
            raise ValueError("unmask_head must be 'folded' or 'binary'")
        self.cfg = cfg
        self.n_atom_types = n_atom_types
        self.unmask_head = unmask_head
        self.params: dict[str, Tensor] = {}
        d, dg = cfg.d_model, cfg.graph_d_model

        def weight(name, fan_in, fan_out):
            self.params[name] = ag.Parameter(rng.normal(0.0, 1.0 / math.sqrt(fan_in),
                                                        (fan_in, fan_out)), name)

        def const(name, shape, value):
            self.params[name] = ag.Parameter(np.full(shape, float(value)), name)

        self.params["smiles.embed"] = ag.Parameter(
            rng.normal(0.0, 1.0, (cfg.vocab_size, d)), "smiles.embed")
        for layer in range(cfg.n_layers):
            p = f"smiles.layer{layer}."
            for w in ("q", "k", "v", "o"):
                weight(p + "w" + w, d, d)
                const(p + "b" + w, (d,), 0.0)
            const(p + "ln1.gain", (d,), 1.0)
            const(p + "ln1.bias", (d,), 0.0)
            weight(p + "ff1.w", d, 2 * d)
            const(p + "ff1.b", (2 * d,), 0.0)
            weight(p + "ff2.w", 2 * d, d)
            const(p + "ff2.b", (d,), 0.0)
            const(p + "ln2.gain", (d,), 1.0)
            const(p + "ln2.bias", (d,), 0.0)

        weight("graph.input.w", ATOM_FEATURE_DIM, dg)
        const("graph.input.b", (dg,), 0.0)
        for r in range(cfg.mp_rounds):
            p = f"graph.round{r}."
            weight(p + "msg.w", dg + BOND_FEATURE_DIM, dg)
            const(p + "msg.b", (dg,), 0.0)
            weight(p + "upd.w", 2 * dg, dg)
            const(p + "upd.b", (dg,), 0.0)

        # small projections keep S @ G.T / tau near the [0, 1] similarity range at init
        for name, fan_in in (("smiles", d), ("graph", dg)):
            self.params[f"proj.{name}.w"] = ag.Parameter(
                rng.normal(0.0, PROJ_INIT_STD, (fan_in, cfg.d_shared)), f"proj.{name}.w")
            const(f"proj.{name}.b", (cfg.d_shared,), 0.0)

        extra = 1 if unmask_head == "folded" else 2
        weight("head.atomalign.w", d, n_atom_types + extra)
        const("head.atomalign.b", (n_atom_types + extra,), 0.0)
        weight("head.unimodal.w", d, n_atom_types)
        const("head.unimodal.b", (n_atom_types,), 0.0)

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def state(self) -> dict[str, np.ndarray]:
        return {k: p.data for k, p in self.params.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        missing = set(self.params) ^ set(state)
        if missing:
            raise KeyError(f"parameter sets differ: {sorted(missing)}")
        for k, p in self.params.items():
            if p.data.shape != state[k].shape:
                raise ValueError(f"{k}: shape {state[k].shape} != {p.data.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    # -- encoders ------------------------------------------------------------

    def encode_smiles(self, batch: Batch, masked: bool = False) -> AtomEmbeddingSequence:
        ids = batch.masked_token_ids if masked else batch.token_ids
        if ids is None:
            raise ValueError("batch carries no masked token ids")
        cfg = self.cfg
        if ids.size and ids.max() >= cfg.vocab_size:
            raise VocabOverflow(f"token id {ids.max()} >= vocab_size {cfg.vocab_size}")
        n, length = ids.shape
        d, h = cfg.d_model, cfg.n_heads
        dh = d // h
        x = ag.reshape(ag.gather_rows(self["smiles.embed"], ids.ravel()), (n, length, d))
        x = ag.add(x, sinusoidal_positions(length, d))
        bias = np.where(batch.key_padding, -1e9, 0.0)[:, None, None, :]
        for layer in range(cfg.n_layers):
            p = f"smiles.layer{layer}."

            def heads(t):
                return ag.transpose(ag.reshape(t, (n, length, h, dh)), (0, 2, 1, 3))
            q = heads(linear(x, self[p + "wq"], self[p + "bq"]))
            k = heads(linear(x, self[p + "wk"], self[p + "bk"]))
            v = heads(linear(x, self[p + "wv"], self[p + "bv"]))
            scores = ag.add(ag.scale(ag.matmul(q, ag.transpose(k)), 1.0 / math.sqrt(dh)), bias)
            ctx = ag.matmul(ag.softmax(scores), v)
            ctx = ag.reshape(ag.transpose(ctx, (0, 2, 1, 3)), (n, length, d))
            attn = linear(ctx, self[p + "wo"], self[p + "bo"])
            x = ag.layer_norm(ag.add(x, attn), self[p + "ln1.gain"], self[p + "ln1.bias"])
            ff = linear(ag.relu(linear(x, self[p + "ff1.w"], self[p + "ff1.b"])),
                        self[p + "ff2.w"], self[p + "ff2.b"])
            x = ag.layer_norm(ag.add(x, ff), self[p + "ln2.gain"], self[p + "ln2.bias"])
        per_atom = ag.gather_rows(ag.reshape(x, (n * length, d)), batch.atom_token_rows)
        return AtomEmbeddingSequence(per_atom, mean_pool(per_atom, batch.atom_segment, n),
                                     batch.atom_segment)

    def encode_graph(self, batch: Batch) -> AtomEmbeddingSequence:
        cfg = self.cfg
        state = linear(batch.atom_x, self["graph.input.w"], self["graph.input.b"])
        for r in range(cfg.mp_rounds):
            p = f"graph.round{r}."
            msg_in = ag.concat([ag.gather_rows(state, batch.edge_src), batch.edge_x], axis=-1)
            msg = linear(msg_in, self[p + "msg.w"], self[p + "msg.b"])
            agg = ag.segment_sum(msg, batch.edge_dst, batch.n_atoms)
            state = ag.tanh(linear(ag.concat([state, agg], axis=-1),
                                   self[p + "upd.w"], self[p + "upd.b"]))
        return AtomEmbeddingSequence(state, mean_pool(state, batch.atom_segment, batch.n_mols),
                                     batch.atom_segment)

    def project(self, pooled: Tensor, modality: str) -> Tensor:
        return linear(pooled, self[f"proj.{modality}.w"], self[f"proj.{modality}.b"])


def encode_smiles(model: MolFusionModel, batch: Batch, masked: bool = False) -> AtomEmbeddingSequence:
    return model.encode_smiles(batch, masked)


def encode_graph(model: MolFusionModel, batch: Batch) -> AtomEmbeddingSequence:
    return model.encode_graph(batch)


def project(pooled, w: Tensor, b: Tensor | None = None) -> Tensor:
    """Single linear map into the shared space."""
    return linear(pooled, w, b)
