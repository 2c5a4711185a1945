import itertools
import math

import numpy as np
import pytest

from molfusion import downstream as d
from molfusion.chem import parse
from molfusion.fusion import FusionConfig, train
from molfusion.synthetic import contains_oxygen, generate_corpus

TINY_RUN = dict(d_model=8, d_shared=8, n_layers=1, n_heads=2, mp_rounds=2)


def brute_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return total / (len(pos) * len(neg))


# --- aggregation --------------------------------------------------------------

def test_aggregate_examples():
    assert d.aggregate([1, 2], [3, 4], d.EWA).tolist() == [4, 6]
    assert d.aggregate([1, 2], [3, 4], d.CCO).tolist() == [1, 2, 3, 4]
    assert d.aggregate([1, 2], [3, 4], d.MG_ONLY).tolist() == [3, 4]
    assert d.aggregate([1, 2], [3, 4], d.SMILES_ONLY).tolist() == [1, 2]
    with pytest.raises(d.WidthMismatch):
        d.aggregate([1, 2], [3, 4, 5], d.EWA)
    with pytest.raises(ValueError):
        d.aggregate([1], [2], "SUM")


def test_cco_preserves_inputs():
    rng = np.random.default_rng(0)
    s, g = rng.normal(size=(5, 3)), rng.normal(size=(5, 4))
    out = d.aggregate(s, g, d.CCO)
    assert np.array_equal(out[:, :3], s) and np.array_equal(out[:, 3:], g)


# --- scaffolds ------------------------------------------------------------------

def key(s):
    return d.scaffold_key(parse(s)[0])


def test_scaffold_keys():
    assert key("CCO") == key("CCCCN") == ""
    assert key("c1ccccc1C") == key("Cc1ccccc1CC") == key("c1ccccc1")
    assert key("c1ccccc1") != key("C1CCCCC1")
    assert key("c1ccccc1") != key("c1ccncc1")
    # the linker between two rings is kept, side chains are not
    linked = parse("c1ccccc1CCc1ccccc1")[0]
    assert len(d.scaffold_atoms(linked)) == 14
    branched = parse("c1ccccc1C(C)Cc1ccccc1")[0]
    assert len(d.scaffold_atoms(branched)) == 14
    assert key("c1ccccc1CCc1ccccc1") != key("c1ccccc1Cc1ccccc1")


def test_split_examples():
    s = d.split_from_groups([("", list(range(10)))], 10)
    assert (len(s.train), len(s.valid), len(s.test)) == (10, 0, 0)
    s = d.split_from_groups([("a", list(range(8))), ("b", [8]), ("c", [9])], 10)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)
    s = d.split_from_groups([("a", list(range(8))), ("b", [8, 9])], 10)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 2, 0)


def test_scaffold_split_on_molecules():
    smiles = ["c1ccccc1" + tail for tail in ("", "C", "CC", "O", "N", "CO", "CN", "Cl")]
    smiles += ["C1CCCCC1C", "c1ccncc1C"]
    ds = d.make_dataset("toy", smiles, [0, 1] * 5)
    s = d.scaffold_split(ds)
    assert (len(s.train), len(s.valid), len(s.test)) == (8, 1, 1)
    assert set(s.train) == set(range(8))


def test_split_properties_on_corpus():
    smiles = generate_corpus(200, seed=4)
    ds = d.make_dataset("corpus", smiles, [contains_oxygen(x) for x in smiles])
    a, b = d.scaffold_split(ds), d.scaffold_split(ds)
    parts = [set(a.train), set(a.valid), set(a.test)]
    assert all(not (x & y) for x, y in itertools.combinations(parts, 2))
    assert set.union(*parts) == set(range(len(ds)))
    for x, y in zip((a.train, a.valid, a.test), (b.train, b.valid, b.test)):
        assert np.array_equal(x, y)
    keys = [{key(smiles[i]) for i in p} for p in parts]
    assert all(not (x & y) for x, y in itertools.combinations(keys, 2))
    assert len(a.train) >= 0.8 * len(ds)


# --- metrics --------------------------------------------------------------------

def test_roc_auc_examples():
    assert d.roc_auc([0.9, 0.1], [1, 0]) == 1.0
    assert d.roc_auc([0.3, 0.3, 0.3], [1, 0, 1]) == 0.5
    assert d.roc_auc([0.8, 0.6, 0.4], [1, 0, 1]) == 0.5
    with pytest.raises(d.SingleClass):
        d.roc_auc([0.1, 0.2], [1, 1])
    with pytest.raises(d.LengthMismatch):
        d.roc_auc([0.1, 0.2], [1])


def test_roc_auc_matches_brute_force_and_monotone_invariance():
    rng = np.random.default_rng(0)
    for _ in range(100):
        n = int(rng.integers(2, 51))
        labels = rng.integers(0, 2, n)
        labels[:2] = [0, 1]
        scores = rng.integers(0, 6, n).astype(float)
        assert d.roc_auc(scores, labels) == brute_auc(scores, labels)
        assert d.roc_auc(np.exp(scores) * 3 - 1, labels) == d.roc_auc(scores, labels)


def test_rmse_examples():
    assert d.rmse([1, 2], [1, 2]) == 0.0
    assert d.rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5), abs=1e-12)
    assert d.rmse([2.5], [-1.0]) == 3.5
    with pytest.raises(d.LengthMismatch):
        d.rmse([1], [1, 2])
    with pytest.raises(d.LengthMismatch):
        d.rmse([], [])


# --- probes ---------------------------------------------------------------------

def test_logistic_probe_separable():
    rng = np.random.default_rng(0)
    x = rng.normal(size=(60, 2))
    y = (x[:, 0] + 0.5 * x[:, 1] > 0).astype(float)
    model = d.probe_fit(x, y, d.CLASSIFICATION, 1e-3)
    pred = model.predict(x)[:, 0] > 0.5
    assert np.mean(pred == y.astype(bool)) == 1.0
    assert model.weight.shape == (2, 1) and model.bias.shape == (1,)


def test_ridge_exact_system():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.3
    model = d.probe_fit(x, y, d.REGRESSION, 0.0)
    np.testing.assert_allclose(model.predict(x)[:, 0], y, atol=1e-10)


def test_missing_and_degenerate_tasks():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    labels = np.full((10, 3), np.nan)
    labels[:, 0] = [0, 1] * 5
    labels[:, 2] = 1.0
    labels[3, 0] = np.nan
    model = d.probe_fit(x, labels, d.CLASSIFICATION, 0.1)
    assert model.absent == [1, 2]
    assert d.test_metric(model, x, labels)[1] == 1


def test_probe_shape_mismatch():
    with pytest.raises(d.LengthMismatch):
        d.probe_fit(np.zeros((3, 2)), np.zeros(4), d.REGRESSION, 0.1)


def test_load_dataset(tmp_path):
    path = tmp_path / "tox.csv"
    path.write_text("smiles,a,b\nCCO,1,\nc1ccccc1,0,1\nC1CC,1,0\nCCN,,0\n")
    ds = d.load_dataset(path)
    assert ds.name == "tox" and ds.task_type == d.CLASSIFICATION and len(ds) == 3
    assert ds.task_names == ["a", "b"]
    assert np.isnan(ds.labels[0, 1]) and np.isnan(ds.labels[2, 0])
    reg = tmp_path / "reg.csv"
    reg.write_text("smiles,y\nCCO,1.5\nCC,-0.25\n")
    assert d.load_dataset(reg).task_type == d.REGRESSION
    bad = tmp_path / "bad.csv"
    bad.write_text("smiles,y\nCCO,1\nCC,2\n")
    with pytest.raises(ValueError):
        d.load_dataset(bad, task_type=d.CLASSIFICATION)


# --- end to end -----------------------------------------------------------------

@pytest.fixture(scope="module")
def trained():
    corpus = generate_corpus(60, seed=2)
    return corpus, train(corpus, FusionConfig(epochs=2), **TINY_RUN)


def test_evaluate_deterministic_and_read_only(trained):
    corpus, ckpt = trained
    ds = d.make_dataset("oxygen", corpus, [contains_oxygen(s) for s in corpus])
    before = {k: v.copy() for k, v in ckpt.params.items()}
    a = d.evaluate(ckpt, ds, d.CCO, seeds=(1, 2, 3))
    b = d.evaluate(ckpt, ds, d.CCO, seeds=(1, 2, 3))
    assert a == b
    assert a.seeds == [1, 2, 3] and len(a.values) == 3
    assert a.std == pytest.approx(float(np.std(a.values)))
    assert a.metric_name == "roc_auc" and 0 <= a.mean <= 1
    assert all(np.array_equal(before[k], ckpt.params[k]) for k in before)
    assert set(a.to_dict()) >= {"dataset", "method", "aggregation", "metric_name", "mean", "std",
                                "seeds", "n_tasks_evaluated"}


def test_atom_count_regression_beats_mean(trained):
    corpus, ckpt = trained
    smiles = generate_corpus(150, seed=9)
    counts = [parse(s)[0].n_atoms for s in smiles]
    ds = d.make_dataset("atoms", smiles, counts, task_type=d.REGRESSION)
    split = d.scaffold_split(ds)
    report = d.evaluate(ckpt, ds, d.CCO, seeds=(0,), split=split)
    y = ds.labels[:, 0]
    baseline = d.rmse(np.full(len(split.test), y[split.train].mean()), y[split.test])
    assert report.metric_name == "rmse"
    assert report.mean < baseline


def test_ablation_grid_structure():
    corpus = generate_corpus(40, seed=5)
    ds = d.make_dataset("oxygen", corpus, [contains_oxygen(s) for s in corpus])
    cfg = FusionConfig(epochs=1, batch_size=8)
    grid = d.ablation_grid(corpus, [ds], cfg, seeds=(0,), **TINY_RUN)
    rows = grid["rows"]
    assert len(rows) == 7 * 4
    assert {(r["method"], r["aggregation"]) for r in rows} == set(itertools.product(d.METHODS, d.AGGREGATIONS))
    assert grid["optimizer_steps"]["no-train"] == [0]
    assert all(s[0] > 0 for m, s in grid["optimizer_steps"].items() if m != "no-train")
    assert len(grid["best"]) == 7
    full = train(corpus, d.method_config("molfusion", cfg, 0), **TINY_RUN)
    alone = d.evaluate(full, ds, d.CCO, seeds=(0,), method="molfusion")
    row = next(r for r in rows if r["method"] == "molfusion" and r["aggregation"] == d.CCO)
    assert not math.isnan(alone.mean)
    assert row["mean"] == alone.mean
