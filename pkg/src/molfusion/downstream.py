"""Frozen-encoder evaluation: aggregation, scaffold split, linear probes, metrics."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from collections import Counter, defaultdict, deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autograd as ag
from .checkpoint import Checkpoint
from .chem import Molecule, SmilesError
from .encoders import MolFusionModel, MolRecord, Vocabulary, collate
from .fusion import FusionConfig, Trainer, model_from_checkpoint, prepare_corpus
from .utils import rng_stream

log = logging.getLogger(__name__)

SMILES_ONLY, MG_ONLY, EWA, CCO = "SMILES_ONLY", "MG_ONLY", "EWA", "CCO"
AGGREGATIONS = (SMILES_ONLY, MG_ONLY, EWA, CCO)
REG_GRID = (1e-3, 1e-2, 1e-1, 1.0)
CLASSIFICATION, REGRESSION = "classification", "regression"

# method name -> (molecular objective, atomic objective); None means no training
METHODS = {
    "no-train": None,
    "contrastive": ("contrastive", "none"),
    "molsim": ("molsim", "none"),
    "atomalign": ("none", "atomalign"),
    "contrastive+atomalign": ("contrastive", "atomalign"),
    "molsim+unimodal-mask": ("molsim", "unimodal"),
    "molfusion": ("molsim", "atomalign"),
}


class WidthMismatch(ValueError):
    pass


class SingleClass(ValueError):
    pass


class DegenerateLabels(ValueError):
    pass


class LengthMismatch(ValueError):
    pass


# --- datasets ---------------------------------------------------------------

@dataclass
class TaskDataset:
    name: str
    smiles: list[str]
    records: list[MolRecord]
    labels: np.ndarray  # (N, K), NaN marks a missing label
    task_names: list[str]
    task_type: str

    @property
    def molecules(self) -> list[Molecule]:
        return [r.mol for r in self.records]

    def __len__(self):
        return len(self.records)


def make_dataset(name: str, smiles: list[str], labels, task_names=None,
                 task_type: str | None = None) -> TaskDataset:
    """Parse ``smiles``; rows the parser rejects are dropped with a warning."""
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = labels[:, None]
    keep, records = [], []
    for i, s in enumerate(smiles):
        try:
            records.append(MolRecord.from_smiles(s))
            keep.append(i)
        except SmilesError as exc:
            log.warning("%s: dropping row %d (%r): %s", name, i + 1, s, exc)
    labels = labels[keep]
    observed = labels[~np.isnan(labels)]
    if task_type is None:
        task_type = CLASSIFICATION if np.isin(observed, (0.0, 1.0)).all() else REGRESSION
    if task_type == CLASSIFICATION and not np.isin(observed, (0.0, 1.0)).all():
        raise ValueError(f"{name}: classification labels must be 0, 1 or empty")
    if task_type == REGRESSION and not np.isfinite(observed).all():
        raise ValueError(f"{name}: regression labels must be finite")
    names = list(task_names) if task_names else [f"task{k}" for k in range(labels.shape[1])]
    return TaskDataset(name, [smiles[i] for i in keep], records, labels, names, task_type)


def load_dataset(path, task_type: str | None = None) -> TaskDataset:
    """CSV with a ``smiles`` column; every other column is a task, empty = missing."""
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or "smiles" not in reader.fieldnames:
            raise ValueError(f"{path}: header must contain a 'smiles' column")
        tasks = [c for c in reader.fieldnames if c != "smiles"]
        smiles, rows = [], []
        for line, row in enumerate(reader, 2):
            smiles.append(row["smiles"])
            try:
                rows.append([float(row[t]) if row[t].strip() else math.nan for t in tasks])
            except ValueError as exc:
                raise ValueError(f"{path}:{line}: {exc}") from None
    if not tasks:
        raise ValueError(f"{path}: no task columns")
    return make_dataset(path.stem, smiles, np.array(rows).reshape(len(rows), len(tasks)),
                        tasks, task_type)


# --- aggregation ------------------------------------------------------------

def aggregate(s_emb, g_emb, mode: str) -> np.ndarray:
    """Combine SMILES and graph embeddings along the last axis."""
    s_emb, g_emb = np.asarray(s_emb), np.asarray(g_emb)
    if mode == SMILES_ONLY:
        return s_emb
    if mode == MG_ONLY:
        return g_emb
    if mode == EWA:
        if s_emb.shape != g_emb.shape:
            raise WidthMismatch(f"EWA needs equal widths, got {s_emb.shape[-1]} and {g_emb.shape[-1]}")
        return s_emb + g_emb
    if mode == CCO:
        return np.concatenate([s_emb, g_emb], axis=-1)
    raise ValueError(f"unknown aggregation {mode!r}; expected one of {AGGREGATIONS}")


def embed(model: MolFusionModel, vocab: Vocabulary, records: list[MolRecord],
          batch_size: int = 64, projected: bool = False) -> tuple[np.ndarray, np.ndarray]:
    """Pooled SMILES and graph embeddings, one row per molecule."""
    s_rows, g_rows = [], []
    with ag.no_grad():
        for start in range(0, len(records), batch_size):
            batch = collate(records[start:start + batch_size], vocab)
            s = model.encode_smiles(batch).pooled
            g = model.encode_graph(batch).pooled
            if projected:
                s, g = model.project(s, "smiles"), model.project(g, "graph")
            s_rows.append(s.data)
            g_rows.append(g.data)
    return np.concatenate(s_rows), np.concatenate(g_rows)


# --- scaffold split -----------------------------------------------------------

def _bfs(mol: Molecule, sources) -> list[float]:
    dist = [math.inf] * mol.n_atoms
    queue = deque()
    for s in sources:
        dist[s] = 0
        queue.append(s)
    while queue:
        v = queue.popleft()
        for w, _ in mol.neighbors(v):
            if dist[w] == math.inf:
                dist[w] = dist[v] + 1
                queue.append(w)
    return dist


def scaffold_atoms(mol: Molecule) -> set[int]:
    """Ring atoms plus every atom on a shortest path between two ring systems."""
    ring_bonds = mol.ring_bonds()
    ring = mol.ring_atoms()
    # ring systems: components of ring atoms joined by ring bonds
    system = [-1] * mol.n_atoms
    systems: list[list[int]] = []
    for start in range(mol.n_atoms):
        if not ring[start] or system[start] >= 0:
            continue
        members, stack = [], [start]
        system[start] = len(systems)
        while stack:
            v = stack.pop()
            members.append(v)
            for w, k in mol.neighbors(v):
                if k in ring_bonds and system[w] < 0:
                    system[w] = len(systems)
                    stack.append(w)
        systems.append(members)
    keep = {i for i in range(mol.n_atoms) if ring[i]}
    dists = [_bfs(mol, members) for members in systems]
    for a in range(len(systems)):
        for b in range(a + 1, len(systems)):
            gap = min(dists[a][v] for v in systems[b])
            keep.update(v for v in range(mol.n_atoms) if dists[a][v] + dists[b][v] == gap)
    return keep


def scaffold_key(mol: Molecule) -> str:
    """Cheap graph hash of the scaffold; the empty string for acyclic molecules."""
    atoms = scaffold_atoms(mol)
    if not atoms:
        return ""
    degree = Counter()
    edges = []
    for b in mol.bonds:
        if b.begin in atoms and b.end in atoms:
            degree[b.begin] += 1
            degree[b.end] += 1
            edges.append(b)
    inv = {i: (mol.atoms[i].element + ("ar" if mol.atoms[i].aromatic else ""), degree[i])
           for i in atoms}
    node_part = sorted(inv.values())
    edge_part = sorted((b.order,) + tuple(sorted([inv[b.begin], inv[b.end]])) for b in edges)
    return json.dumps([node_part, edge_part], separators=(",", ":"))


@dataclass
class Split:
    train: np.ndarray
    valid: np.ndarray
    test: np.ndarray


def split_from_groups(groups: list[tuple[str, list[int]]], n: int,
                      fractions=(0.8, 0.1, 0.1)) -> Split:
    """Greedy assignment of whole groups.

    Groups go (largest first, ties by key) to train while train is below its
    capacity. Afterwards a group goes to valid if it fits, else to test if it
    fits, else to whichever of valid/test has more room left (valid on ties).
    """
    caps = [f * n for f in fractions]
    parts: list[list[int]] = [[], [], []]
    for _, members in sorted(groups, key=lambda g: (-len(g[1]), g[0])):
        if len(parts[0]) < caps[0]:
            dest = 0
        else:
            room = [caps[k] - len(parts[k]) for k in (1, 2)]
            if len(members) <= room[0]:
                dest = 1
            elif len(members) <= room[1]:
                dest = 2
            else:
                dest = 1 if room[0] >= room[1] else 2
        parts[dest].extend(members)
    return Split(*(np.array(sorted(p), dtype=np.int64) for p in parts))


def scaffold_split(ds, fractions=(0.8, 0.1, 0.1)) -> Split:
    mols = ds.molecules if isinstance(ds, TaskDataset) else list(ds)
    groups: dict[str, list[int]] = defaultdict(list)
    for i, m in enumerate(mols):
        groups[scaffold_key(m)].append(i)
    return split_from_groups(list(groups.items()), len(mols), fractions)


# --- metrics ------------------------------------------------------------------

def roc_auc(scores, labels) -> float:
    """Mann-Whitney estimate: (wins + ties / 2) / (n_pos * n_neg)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{scores.shape} scores vs {labels.shape} labels")
    pos, neg = np.sort(scores[labels == 1]), np.sort(scores[labels == 0])
    if len(pos) == 0 or len(neg) == 0:
        raise SingleClass("ROC-AUC needs at least one positive and one negative")
    below = np.searchsorted(neg, pos, side="left")
    not_above = np.searchsorted(neg, pos, side="right")
    wins = int(below.sum())
    ties = int((not_above - below).sum())
    return (wins + 0.5 * ties) / (len(pos) * len(neg))


def rmse(pred, target) -> float:
    pred, target = np.asarray(pred, dtype=np.float64), np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape or pred.size == 0:
        raise LengthMismatch(f"rmse needs equal non-empty shapes, got {pred.shape} and {target.shape}")
    return float(np.sqrt(np.mean((pred - target) ** 2)))


# --- linear probe -------------------------------------------------------------

@dataclass
class ProbeModel:
    weight: np.ndarray  # (p, K)
    bias: np.ndarray  # (K,)
    mean: np.ndarray
    scale: np.ndarray
    task_type: str
    absent: list[int] = field(default_factory=list)

    def predict(self, x) -> np.ndarray:
        """Probabilities for classification, values for regression."""
        z = ((np.asarray(x) - self.mean) / self.scale) @ self.weight + self.bias
        return 1.0 / (1.0 + np.exp(-z)) if self.task_type == CLASSIFICATION else z


def _fit_logistic(x: np.ndarray, y: np.ndarray, lam: float, rng: np.random.Generator,
                  tol: float = 1e-6, max_iter: int = 5000) -> tuple[np.ndarray, float]:
    if len(np.unique(y)) < 2:
        raise DegenerateLabels("only one class present")
    n, p = x.shape
    w = rng.normal(0.0, 0.01, p)
    b = 0.0
    # penalty is on the summed loss, matching the ridge normal equations
    reg = lam / n
    lipschitz = 0.25 * (np.linalg.norm(x, 2) ** 2 / n + 1.0) + reg
    step = 1.0 / lipschitz
    for _ in range(max_iter):
        prob = 1.0 / (1.0 + np.exp(-(x @ w + b)))
        r = prob - y
        gw = x.T @ r / n + reg * w
        gb = r.mean()
        if math.sqrt(gw @ gw + gb * gb) < tol:
            break
        w -= step * gw
        b -= step * gb
    return w, b


def _fit_ridge(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    xm, ym = x.mean(axis=0), y.mean()
    xc, yc = x - xm, y - ym
    gram = xc.T @ xc + lam * np.eye(x.shape[1])
    try:
        w = np.linalg.solve(gram, xc.T @ yc)
    except np.linalg.LinAlgError:
        w = np.linalg.lstsq(gram, xc.T @ yc, rcond=None)[0]
    return w, ym - xm @ w


def probe_fit(features, labels, task_type: str, reg_strength: float, seed: int = 0) -> ProbeModel:
    """One linear output per task; missing labels are excluded task by task."""
    x = np.asarray(features, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if labels.ndim == 1:
        labels = labels[:, None]
    if labels.shape[0] != x.shape[0]:
        raise LengthMismatch(f"{x.shape[0]} feature rows vs {labels.shape[0]} label rows")
    mean = x.mean(axis=0) if len(x) else np.zeros(x.shape[1])
    scale = x.std(axis=0) if len(x) else np.ones(x.shape[1])
    scale = np.where(scale > 1e-12, scale, 1.0)
    xs = (x - mean) / scale
    k = labels.shape[1]
    weight, bias, absent = np.zeros((x.shape[1], k)), np.zeros(k), []
    rng = rng_stream(seed, "probe_init")
    for t in range(k):
        rows = ~np.isnan(labels[:, t])
        try:
            if not rows.any():
                raise DegenerateLabels("no labelled rows")
            if task_type == CLASSIFICATION:
                weight[:, t], bias[t] = _fit_logistic(xs[rows], labels[rows, t], reg_strength, rng)
            else:
                weight[:, t], bias[t] = _fit_ridge(xs[rows], labels[rows, t], reg_strength)
        except DegenerateLabels:
            absent.append(t)
    return ProbeModel(weight, bias, mean, scale, task_type, absent)


def _valid_loss(model: ProbeModel, x, labels) -> float:
    pred = model.predict(x)
    losses = []
    for t in range(labels.shape[1]):
        rows = ~np.isnan(labels[:, t])
        if t in model.absent or not rows.any():
            continue
        if model.task_type == CLASSIFICATION:
            p = np.clip(pred[rows, t], 1e-12, 1 - 1e-12)
            y = labels[rows, t]
            losses.append(-np.mean(y * np.log(p) + (1 - y) * np.log(1 - p)))
        else:
            losses.append(rmse(pred[rows, t], labels[rows, t]))
    return float(np.mean(losses)) if losses else math.inf


def test_metric(model: ProbeModel, x, labels) -> tuple[float, int]:
    """Mean ROC-AUC (or RMSE) over the tasks that can be scored; also the task count."""
    pred = model.predict(x)
    scores = []
    for t in range(labels.shape[1]):
        rows = ~np.isnan(labels[:, t])
        if t in model.absent or not rows.any():
            continue
        if model.task_type == CLASSIFICATION:
            try:
                scores.append(roc_auc(pred[rows, t], labels[rows, t]))
            except SingleClass:
                continue
        else:
            scores.append(rmse(pred[rows, t], labels[rows, t]))
    return (float(np.mean(scores)) if scores else math.nan), len(scores)


def probe_run(features: np.ndarray, ds: TaskDataset, split: Split, seed: int) -> tuple[float, int]:
    """Grid-search the L2 strength on valid, score the chosen probe on test."""
    y = ds.labels
    best, best_loss = None, math.inf
    for lam in REG_GRID:
        model = probe_fit(features[split.train], y[split.train], ds.task_type, lam, seed)
        loss = (_valid_loss(model, features[split.valid], y[split.valid])
                if len(split.valid) else 0.0)
        if best is None or loss < best_loss:
            best, best_loss = model, loss
    return test_metric(best, features[split.test], y[split.test])


# --- reports --------------------------------------------------------------------

@dataclass
class MetricReport:
    dataset: str
    method: str
    aggregation: str
    metric_name: str
    mean: float
    std: float
    seeds: list[int]
    n_tasks_evaluated: int
    values: list[float] = field(default_factory=list)

    def to_dict(self) -> dict:
        """Plain dict; NaN (no scorable task) becomes None so the JSON stays standard."""
        def clean(v):
            return None if isinstance(v, float) and math.isnan(v) else v
        out = dataclasses.asdict(self)
        out["mean"], out["std"] = clean(out["mean"]), clean(out["std"])
        out["values"] = [clean(v) for v in out["values"]]
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)


def metric_name(task_type: str) -> str:
    return "roc_auc" if task_type == CLASSIFICATION else "rmse"


def make_report(ds: TaskDataset, method: str, agg: str, seeds, values, n_tasks) -> MetricReport:
    vals = np.array(values, dtype=np.float64)
    return MetricReport(ds.name, method, agg, metric_name(ds.task_type), float(vals.mean()),
                        float(vals.std()), [int(s) for s in seeds], int(min(n_tasks)),
                        [float(v) for v in vals])


def dataset_features(ckpt: Checkpoint, ds: TaskDataset) -> tuple[np.ndarray, np.ndarray]:
    model, vocab, _ = model_from_checkpoint(ckpt)
    return embed(model, vocab, ds.records)


def evaluate(ckpt: Checkpoint, ds: TaskDataset, agg_mode: str = CCO, seeds=(0,),
             method: str = "molfusion", split: Split | None = None) -> MetricReport:
    """Frozen encoders + linear probe on a scaffold split; mean and std over seeds."""
    if not seeds:
        raise ValueError("need at least one seed")
    s_emb, g_emb = dataset_features(ckpt, ds)
    x = aggregate(s_emb, g_emb, agg_mode)
    split = split if split is not None else scaffold_split(ds)
    values, counts = [], []
    for seed in seeds:
        v, n = probe_run(x, ds, split, seed)
        values.append(v)
        counts.append(n)
    return make_report(ds, method, agg_mode, seeds, values, counts)


def best_aggregation(reports: list[MetricReport]) -> MetricReport:
    """Highest ROC-AUC or lowest RMSE among aggregation variants (unscorable ones last)."""
    scored = [r for r in reports if not math.isnan(r.mean)] or reports[:1]
    if scored[0].metric_name == "rmse":
        return min(scored, key=lambda r: r.mean)
    return max(scored, key=lambda r: r.mean)


def method_config(method: str, base: FusionConfig, seed: int) -> FusionConfig:
    objectives = METHODS[method]
    if objectives is None:
        return dataclasses.replace(base, seed=seed, epochs=0)
    molecular, atomic = objectives
    return dataclasses.replace(base, seed=seed, molecular=molecular, atomic=atomic)


def ablation_grid(corpus: list[str], datasets: list[TaskDataset], cfg: FusionConfig,
                  seeds=(0,), methods=tuple(METHODS), aggregations=AGGREGATIONS,
                  **encoder_overrides) -> dict:
    """Train each method once per seed, evaluate every aggregation on every dataset."""
    records = prepare_corpus(corpus)
    splits = {ds.name: scaffold_split(ds) for ds in datasets}
    rows: list[MetricReport] = []
    steps: dict[str, list[int]] = {}
    for method in methods:
        per: dict[tuple[str, str], list[tuple[float, int]]] = defaultdict(list)
        steps[method] = []
        for seed in seeds:
            ckpt = Trainer(records, method_config(method, cfg, seed), encoder_overrides).fit()
            steps[method].append(ckpt.history[-1]["steps"])
            for ds in datasets:
                s_emb, g_emb = dataset_features(ckpt, ds)
                for agg in aggregations:
                    x = aggregate(s_emb, g_emb, agg)
                    per[(ds.name, agg)].append(probe_run(x, ds, splits[ds.name], seed))
        for ds in datasets:
            for agg in aggregations:
                got = per[(ds.name, agg)]
                rows.append(make_report(ds, method, agg, seeds, [v for v, _ in got],
                                        [n for _, n in got]))
    best = []
    for ds in datasets:
        for method in methods:
            cands = [r for r in rows if r.dataset == ds.name and r.method == method]
            b = best_aggregation(cands)
            b = b.to_dict()
            best.append({k: b[k] for k in ("dataset", "method", "aggregation", "metric_name",
                                           "mean", "std")})
    return {"rows": [r.to_dict() for r in rows], "best": best, "optimizer_steps": steps}
