"""Training objectives and the joint trainer.

Molecular level: the scaled cross-modal similarity ``S @ G.T / tau`` is
regressed onto the Tanimoto matrix of the batch. Atomic level: the graph
per-atom embeddings minus the masked-SMILES per-atom embeddings go through
one linear head that names each masked atom's type and flags every other
atom as not masked. Both are optimised in the same step.
"""
from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import autograd as ag
from .autograd import ShapeMismatch, Tensor
from .checkpoint import Checkpoint, CheckpointError
from .chem import SmilesError
from .encoders import (AtomEmbeddingSequence, Batch, EncoderConfig, MolFusionModel, MolRecord,
                       Vocabulary, collate, mask_atoms)
from .fingerprint import similarity_matrix
from .utils import rng_stream

log = logging.getLogger(__name__)

MOLECULAR_OBJECTIVES = ("molsim", "contrastive", "none")
ATOMIC_OBJECTIVES = ("atomalign", "unimodal", "none")


class EmptyCorpus(ValueError):
    pass


class EmptyMolecule(ValueError):
    pass


@dataclass
class FusionConfig:
    tau: float = 0.1
    alpha: float = 0.8
    beta: float = 1.0
    mask_rate: float = 0.15
    batch_size: int = 32
    epochs: int = 100
    lr: float = 1e-3
    seed: int = 0
    patience: int = 5
    molecular: str = "molsim"
    atomic: str = "atomalign"
    unmask_head: str = "folded"
    molsim_weight: float = 1.0
    fp_radius: int = 2
    fp_bits: int = 2048
    val_fraction: float = 0.1

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be > 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        if self.beta < 0:
            raise ValueError("beta must be >= 0")
        if not 0.0 <= self.mask_rate <= 1.0:
            raise ValueError("mask_rate must lie in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.patience < 0:
            raise ValueError("batch_size >= 1, epochs >= 0, patience >= 0 required")
        if self.molecular not in MOLECULAR_OBJECTIVES:
            raise ValueError(f"molecular must be one of {MOLECULAR_OBJECTIVES}")
        if self.atomic not in ATOMIC_OBJECTIVES:
            raise ValueError(f"atomic must be one of {ATOMIC_OBJECTIVES}")
        if self.unmask_head not in ("folded", "binary"):
            raise ValueError("unmask_head must be folded or binary")


@dataclass
class AtomAlignHead:
    """One linear layer over the difference vectors.

    ``folded``: V atom-type logits plus one NOT_MASKED logit in a single softmax.
    ``binary``: V atom-type logits plus a separate masked/not-masked pair.
    """
    weight: Tensor
    bias: Tensor
    n_atom_types: int
    layout: str = "folded"

    def __call__(self, x) -> Tensor:
        return ag.add(ag.matmul(x, self.weight), self.bias)

    @property
    def not_masked_class(self) -> int:
        return self.n_atom_types


# --- losses -----------------------------------------------------------------

def similarity_logits(S, G, tau: float) -> Tensor:
    S, G = ag.as_tensor(S), ag.as_tensor(G)
    if S.data.ndim != 2 or G.data.ndim != 2 or S.shape != G.shape:
        raise ShapeMismatch(f"S {S.shape} and G {G.shape} must be equal-shape matrices")
    return ag.scale(ag.matmul(S, ag.transpose(G)), 1.0 / tau)


def molsim_loss(S, G, target, tau: float) -> Tensor:
    Q = similarity_logits(S, G, tau)
    target = np.asarray(target, dtype=np.float64)
    if target.shape != Q.shape:
        raise ShapeMismatch(f"target {target.shape} vs similarity {Q.shape}")
    return ag.mse(Q, target)


def _per_atom(x) -> Tensor:
    return x.per_atom if isinstance(x, AtomEmbeddingSequence) else ag.as_tensor(x)


def _weighted(terms: list[tuple[float, Tensor | None]]) -> Tensor:
    present = [(w, t) for w, t in terms if t is not None]
    if len(present) == 1:
        return present[0][1]
    total = None
    for w, t in present:
        part = ag.scale(t, w)
        total = part if total is None else ag.add(total, part)
    return total


def atomalign_parts(graph_emb, masked_smiles_emb, masking, head: AtomAlignHead):
    """(L_mask, L_unmask) with ``None`` for a term whose position set is empty."""
    T, E = _per_atom(graph_emb), _per_atom(masked_smiles_emb)
    if T.shape != E.shape:
        raise ShapeMismatch(f"graph per-atom {T.shape} vs masked SMILES per-atom {E.shape}")
    if T.shape[0] == 0:
        raise EmptyMolecule("no atoms to align")
    indicator = np.asarray(masking.mask_indicator).astype(bool)
    labels = np.asarray(masking.atom_type_labels)
    logits = head(ag.sub(T, E))
    masked, unmasked = np.flatnonzero(indicator), np.flatnonzero(~indicator)
    v = head.n_atom_types
    l_mask = l_unmask = None
    if head.layout == "folded":
        if masked.size:
            l_mask = ag.cross_entropy(ag.gather_rows(logits, masked), labels[masked])
        if unmasked.size:
            l_unmask = ag.cross_entropy(ag.gather_rows(logits, unmasked),
                                        np.full(unmasked.size, head.not_masked_class))
    else:
        if masked.size:
            l_mask = ag.cross_entropy(ag.gather_rows(logits, masked)[:, :v], labels[masked])
        if unmasked.size:
            l_unmask = ag.cross_entropy(ag.gather_rows(logits, unmasked)[:, v:],
                                        np.zeros(unmasked.size, np.int64))
    return l_mask, l_unmask


def atomalign_loss(graph_emb, masked_smiles_emb, masking, head: AtomAlignHead,
                   alpha: float) -> Tensor:
    l_mask, l_unmask = atomalign_parts(graph_emb, masked_smiles_emb, masking, head)
    return _weighted([(alpha, l_mask), (1.0 - alpha, l_unmask)])


def unimodal_mask_loss(masked_smiles_emb, masking, head) -> Tensor:
    """Masked-atom type prediction straight from the masked SMILES rows."""
    E = _per_atom(masked_smiles_emb)
    masked = np.flatnonzero(np.asarray(masking.mask_indicator))
    if masked.size == 0:
        raise EmptyMolecule("no masked atoms")
    labels = np.asarray(masking.atom_type_labels)[masked]
    return ag.cross_entropy(head(ag.gather_rows(E, masked)), labels)


def contrastive_baseline_loss(S, G, tau: float) -> Tensor:
    """Symmetric InfoNCE with same-molecule pairs on the diagonal."""
    logits = similarity_logits(S, G, tau)
    diag = np.arange(logits.shape[0])
    return ag.scale(ag.add(ag.cross_entropy(logits, diag),
                           ag.cross_entropy(ag.transpose(logits), diag)), 0.5)


class _Linear:
    def __init__(self, w, b):
        self.w, self.b = w, b

    def __call__(self, x):
        return ag.add(ag.matmul(x, self.w), self.b)


def heads(model: MolFusionModel) -> tuple[AtomAlignHead, _Linear]:
    return (AtomAlignHead(model["head.atomalign.w"], model["head.atomalign.b"],
                          model.n_atom_types, model.unmask_head),
            _Linear(model["head.unimodal.w"], model["head.unimodal.b"]))


def molfusion_loss(model: MolFusionModel, batch: Batch, target: np.ndarray,
                   cfg: FusionConfig) -> tuple[Tensor, dict[str, float]]:
    """Joint objective ``w * L_molecular + beta * L_atomic`` for one batch.

    Returns the loss tensor and its scalar components for logging.
    """
    parts: dict[str, float] = {}
    align_head, uni_head = heads(model)
    mol_term = atom_term = None
    need_molecular = cfg.molecular != "none" and cfg.molsim_weight != 0
    need_atomic = cfg.atomic != "none" and cfg.beta != 0
    graph = model.encode_graph(batch) if (need_molecular or cfg.atomic == "atomalign") else None
    if need_molecular:
        smiles = model.encode_smiles(batch)
        S = model.project(smiles.pooled, "smiles")
        G = model.project(graph.pooled, "graph")
        if cfg.molecular == "molsim":
            mol_term = molsim_loss(S, G, target, cfg.tau)
        else:
            mol_term = contrastive_baseline_loss(S, G, cfg.tau)
        parts[cfg.molecular] = mol_term.item()
    if need_atomic:
        masked = model.encode_smiles(batch, masked=True)
        if cfg.atomic == "atomalign":
            l_mask, l_unmask = atomalign_parts(graph, masked, batch, align_head)
            atom_term = _weighted([(cfg.alpha, l_mask), (1.0 - cfg.alpha, l_unmask)])
            if l_mask is not None:
                parts["mask"] = l_mask.item()
            if l_unmask is not None:
                parts["unmask"] = l_unmask.item()
        else:
            atom_term = unimodal_mask_loss(masked, batch, uni_head)
            parts["mask"] = atom_term.item()
    if mol_term is None and atom_term is None:
        raise ValueError("configuration leaves no objective to optimise")
    if atom_term is None:
        total = mol_term if cfg.molsim_weight == 1.0 else ag.scale(mol_term, cfg.molsim_weight)
    elif mol_term is None:
        total = ag.scale(atom_term, cfg.beta)
    else:
        if cfg.molsim_weight != 1.0:
            mol_term = ag.scale(mol_term, cfg.molsim_weight)
        total = ag.add(mol_term, ag.scale(atom_term, cfg.beta))
    parts["total"] = total.item()
    return total, parts


# --- training ---------------------------------------------------------------

def prepare_corpus(smiles: list[str]) -> list[MolRecord]:
    """Parse a corpus, skipping (and logging) entries the parser rejects."""
    if not smiles:
        raise EmptyCorpus("corpus is empty")
    records = []
    for line, s in enumerate(smiles, 1):
        try:
            records.append(MolRecord.from_smiles(s))
        except SmilesError as exc:
            log.warning("skipping entry %d (%r): %s", line, s, exc)
    if not records:
        raise EmptyCorpus("no entry of the corpus could be parsed")
    return records


def split_indices(n: int, val_fraction: float, rng: np.random.Generator):
    order = rng.permutation(n)
    n_val = int(math.floor(val_fraction * n + 0.5)) if n > 1 else 0
    n_val = min(max(n_val, 1 if n > 1 and val_fraction > 0 else 0), n - 1)
    return np.sort(order[n_val:]), np.sort(order[:n_val])


def encoder_config_dict(enc: EncoderConfig) -> dict:
    return dataclasses.asdict(enc)


@dataclass
class Trainer:
    """Holds everything a run needs; ``fit`` returns the best checkpoint."""
    records: list[MolRecord]
    cfg: FusionConfig
    enc_overrides: dict = field(default_factory=dict)

    def __post_init__(self):
        self.vocab = Vocabulary.build([r.tok for r in self.records])
        self.enc = EncoderConfig(vocab_size=len(self.vocab), **self.enc_overrides)
        self.model = MolFusionModel(self.enc, self.vocab.n_atom_types,
                                    rng_stream(self.cfg.seed, "init"), self.cfg.unmask_head)
        self.target = similarity_matrix([r.mol for r in self.records],
                                        self.cfg.fp_radius, self.cfg.fp_bits)
        self.train_idx, self.val_idx = split_indices(
            len(self.records), self.cfg.val_fraction, rng_stream(self.cfg.seed, "split"))

    def batch(self, idx: np.ndarray, rng: np.random.Generator) -> tuple[Batch, np.ndarray]:
        recs = [self.records[i] for i in idx]
        masks = [mask_atoms(r.tok, self.vocab, self.cfg.mask_rate, rng) for r in recs]
        return collate(recs, self.vocab, masks), self.target[np.ix_(idx, idx)]

    def evaluate(self, idx: np.ndarray, stream: str) -> dict[str, float]:
        """Mean loss and components over ``idx`` with masks from a fixed stream."""
        rng = rng_stream(self.cfg.seed, stream)
        sums: dict[str, float] = {}
        for start in range(0, len(idx), self.cfg.batch_size):
            chunk = idx[start:start + self.cfg.batch_size]
            batch, target = self.batch(chunk, rng)
            _, parts = molfusion_loss(self.model, batch, target, self.cfg)
            for k, v in parts.items():
                sums[k] = sums.get(k, 0.0) + v * len(chunk)
        return {k: v / len(idx) for k, v in sums.items()}

    def checkpoint(self, params: dict[str, np.ndarray], history: list[dict]) -> Checkpoint:
        config = {"fusion": dataclasses.asdict(self.cfg), "encoder": encoder_config_dict(self.enc)}
        return Checkpoint(config, self.vocab.to_dict(), params, history)

    def fit(self) -> Checkpoint:
        cfg = self.cfg
        params = self.model.params
        opt = ag.Adam(params, lr=cfg.lr)
        shuffle, masking = rng_stream(cfg.seed, "shuffle"), rng_stream(cfg.seed, "mask")
        has_val = len(self.val_idx) > 0
        with ag.no_grad():
            initial = self.evaluate(self.train_idx, "train_eval_mask")
        history = [{"epoch": 0, "steps": 0, "train_loss": initial["total"]}]
        steps = 0
        best_state = {k: p.data.copy() for k, p in params.items()}
        with ag.no_grad():
            best = (self.evaluate(self.val_idx, "val_mask")["total"] if has_val
                    else initial["total"])
        history[0]["val_loss"] = best
        stale = 0
        for epoch in range(1, cfg.epochs + 1):
            order = self.train_idx[shuffle.permutation(len(self.train_idx))]
            sums: dict[str, float] = {}
            for start in range(0, len(order), cfg.batch_size):
                chunk = order[start:start + cfg.batch_size]
                batch, target = self.batch(chunk, masking)
                opt.zero_grad()
                loss, parts = molfusion_loss(self.model, batch, target, cfg)
                ag.backward(loss)
                opt.step()
                steps += 1
                for k, v in parts.items():
                    sums[k] = sums.get(k, 0.0) + v * len(chunk)
            row = {"epoch": epoch, "steps": steps, "train_loss": sums.pop("total") / len(order)}
            row.update({k: v / len(order) for k, v in sums.items()})
            # without a validation split, monitor the training set under fixed masks
            with ag.no_grad():
                monitored = (self.evaluate(self.val_idx, "val_mask")["total"] if has_val
                             else self.evaluate(self.train_idx, "train_eval_mask")["total"])
            row["val_loss"] = monitored
            history.append(row)
            log.info(" ".join(f"{k}={v:.6g}" if isinstance(v, float) else f"{k}={v}"
                              for k, v in row.items()))
            if monitored < best:
                best, stale = monitored, 0
                best_state = {k: p.data.copy() for k, p in params.items()}
            else:
                stale += 1
                if stale > cfg.patience:
                    log.info("early stop at epoch=%d best_val_loss=%.6g", epoch, best)
                    break
        return self.checkpoint(best_state, history)


def train(corpus: list[str], cfg: FusionConfig, **encoder_overrides) -> Checkpoint:
    """Parse ``corpus``, optimise the configured objective, return the best checkpoint."""
    return Trainer(prepare_corpus(corpus), cfg, encoder_overrides).fit()


def model_from_checkpoint(ckpt: Checkpoint) -> tuple[MolFusionModel, Vocabulary, FusionConfig]:
    """Rebuild the model; any disagreement between config and parameters is a CheckpointError."""
    try:
        vocab = Vocabulary.from_dict(ckpt.vocab)
        cfg = FusionConfig(**ckpt.config["fusion"])
        enc = EncoderConfig(**ckpt.config["encoder"])
        model = MolFusionModel(enc, vocab.n_atom_types, rng_stream(0, "init"), cfg.unmask_head)
        model.load_state(ckpt.params)
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"checkpoint does not match its config: {exc}") from None
    return model, vocab, cfg


def masked_atom_accuracy(model: MolFusionModel, vocab: Vocabulary, records: list[MolRecord],
                         mask_rate: float, seed: int, repeats: int = 1) -> float:
    """Top-1 accuracy of the alignment head at masked positions (argmax over all classes)."""
    rng = rng_stream(seed, "accuracy_mask")
    head, _ = heads(model)
    hits = total = 0
    for _ in range(repeats):
        masks = [mask_atoms(r.tok, vocab, mask_rate, rng) for r in records]
        batch = collate(records, vocab, masks)
        with ag.no_grad():
            graph = model.encode_graph(batch)
            masked = model.encode_smiles(batch, masked=True)
            logits = head(ag.sub(graph.per_atom, masked.per_atom)).data
        if head.layout == "binary":
            logits = logits[:, :head.n_atom_types]
        sel = np.flatnonzero(batch.mask_indicator)
        hits += int((logits[sel].argmax(axis=1) == batch.atom_type_labels[sel]).sum())
        total += sel.size
    return hits / total
