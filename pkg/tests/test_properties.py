import itertools

import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from molfusion import autograd as ag
from molfusion import downstream as d
from molfusion.checkpoint import Checkpoint
from molfusion.chem import parse
from molfusion.fingerprint import Fingerprint, fold, morgan, tanimoto
from molfusion.synthetic import generate_corpus

floats = st.floats(-1e3, 1e3, allow_nan=False)


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_generated_smiles_round_trip(seed):
    s = generate_corpus(1, seed=seed)[0]
    mol, tok = parse(s)
    assert tok.detokenize() == s
    assert [tok.atom_map[p] for p in tok.atom_positions] == list(range(mol.n_atoms))
    f = morgan(mol)
    assert f.bits.any() and tanimoto(f, f) == 1.0


@given(st.sets(st.integers(0, 63)), st.sets(st.integers(0, 63)))
def test_tanimoto_symmetric_and_bounded(a, b):
    fa = Fingerprint(frozenset(a), fold(a, 64))
    fb = Fingerprint(frozenset(b), fold(b, 64))
    t = tanimoto(fa, fb)
    assert t == tanimoto(fb, fa) and 0.0 <= t <= 1.0
    if a or b:
        assert (t == 1.0) == (a == b)


@given(st.lists(st.tuples(st.integers(-5, 5), st.integers(0, 1)), min_size=2, max_size=40))
def test_roc_auc_brute_force(pairs):
    scores = np.array([p[0] for p in pairs], dtype=float)
    labels = np.array([p[1] for p in pairs])
    if labels.min() == labels.max():
        return
    pos, neg = scores[labels == 1], scores[labels == 0]
    brute = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    assert d.roc_auc(scores, labels) == brute / (len(pos) * len(neg))
    assert d.roc_auc(scores ** 3 + 7, labels) == d.roc_auc(scores, labels)


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=floats),
       hnp.arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 4)), elements=floats))
def test_cco_slices_back(s, g):
    n = min(len(s), len(g))
    out = d.aggregate(s[:n], g[:n], d.CCO)
    assert np.array_equal(out[:, :s.shape[1]], s[:n]) and np.array_equal(out[:, s.shape[1]:], g[:n])


@given(hnp.arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)), elements=floats))
def test_softmax_rows_sum_to_one(x):
    s = ag.softmax(ag.Tensor(x)).data
    np.testing.assert_allclose(s.sum(axis=-1), 1.0, atol=1e-12)


@given(st.dictionaries(st.text("abcdefgh.", min_size=1, max_size=12),
                       hnp.arrays(np.float64, hnp.array_shapes(min_dims=0, max_dims=3, max_side=4),
                                  elements=st.floats(allow_nan=True, allow_infinity=True)),
                       max_size=5))
def test_checkpoint_round_trip(params):
    ckpt = Checkpoint({"k": 1}, {}, params, [])
    back = Checkpoint.from_bytes(ckpt.to_bytes())
    assert set(back.params) == set(params)
    for k, v in params.items():
        assert back.params[k].shape == v.shape and back.params[k].tobytes() == v.tobytes()
