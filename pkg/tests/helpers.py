"""Shared test utilities: tiny models, batches and a finite-difference checker."""
import json
from pathlib import Path

import numpy as np

from molfusion import autograd as ag
from molfusion.encoders import EncoderConfig, MolFusionModel, MolRecord, Vocabulary, collate, mask_atoms
from molfusion.fingerprint import similarity_matrix

DATA = Path(__file__).parent / "data"

POOL = [
    "CCO", "CC(=O)O", "c1ccccc1", "CC(=O)Nc1ccc(O)cc1", "C1CCCCC1", "c1ccncc1", "O=C([O-])CC[NH3+]",
    "CC#N", "OC(=O)C(N)Cc1ccccc1", "FC(F)(F)c1ccccc1", "CS(=O)(=O)N", "C1CC2CCC1CC2", "ClCCl",
    "c1ccc2[nH]ccc2c1", "CN1CCCC1", "C=CC=C", "OCC1OC(O)C(O)C(O)C1O", "Brc1ccsc1", "C", "N#CC(C)Cl",
]

TINY = dict(d_model=8, d_shared=6, n_layers=1, n_heads=2, mp_rounds=2)


def load_json(name):
    return json.loads((DATA / name).read_text())


def records(smiles):
    return [MolRecord.from_smiles(s) for s in smiles]


def vocab_for(recs):
    return Vocabulary.build([r.tok for r in recs])


def tiny_model(recs, seed=0, unmask_head="folded", **overrides):
    vocab = vocab_for(recs)
    cfg = EncoderConfig(vocab_size=len(vocab), **{**TINY, **overrides})
    model = MolFusionModel(cfg, vocab.n_atom_types, np.random.default_rng(seed), unmask_head)
    return model, vocab


def masked_batch(recs, vocab, rng, mask_rate=0.3):
    masks = [mask_atoms(r.tok, vocab, mask_rate, rng) for r in recs]
    batch = collate(recs, vocab, masks)
    target = similarity_matrix([r.mol for r in recs])
    return batch, target


def directional_check(loss_fn, params: dict, rng, h=1e-5):
    """Relative error between analytic and central-difference directional derivatives.

    ``loss_fn()`` must rebuild the graph from the current parameter values.
    """
    for p in params.values():
        p.grad = None
    loss = loss_fn()
    ag.backward(loss)
    direction = {k: rng.normal(size=p.data.shape) for k, p in params.items()}
    analytic = sum(float(np.sum((p.grad if p.grad is not None else 0.0) * direction[k]))
                   for k, p in params.items())
    base = {k: p.data.copy() for k, p in params.items()}

    def shifted(sign):
        for k, p in params.items():
            p.data = base[k] + sign * h * direction[k]
        with ag.no_grad():
            return loss_fn().item()

    numeric = (shifted(1.0) - shifted(-1.0)) / (2 * h)
    for k, p in params.items():
        p.data = base[k]
    return abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8)


def composite_losses(model, batch, target, cfg):
    """The four objectives as closures that run both encoders from scratch."""
    from molfusion import fusion

    head, _ = fusion.heads(model)

    def projected():
        s = model.project(model.encode_smiles(batch).pooled, "smiles")
        g = model.project(model.encode_graph(batch).pooled, "graph")
        return s, g

    def molsim():
        return fusion.molsim_loss(*projected(), target, cfg.tau)

    def contrastive():
        return fusion.contrastive_baseline_loss(*projected(), cfg.tau)

    def atomalign():
        return fusion.atomalign_loss(model.encode_graph(batch), model.encode_smiles(batch, masked=True),
                                     batch, head, cfg.alpha)

    def joint():
        return fusion.molfusion_loss(model, batch, target, cfg)[0]

    return {"molsim": molsim, "atomalign": atomalign, "molfusion": joint, "contrastive": contrastive}
