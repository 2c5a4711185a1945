"""Command-line entry point: ``molfusion <subcommand> ...``.

Exit codes: 0 ok, 2 config error, 3 input data error, 4 checkpoint mismatch.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import io
import json
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import checkpoint as ckpt_io
from . import downstream as ds_mod
from .checkpoint import CheckpointError
from .chem import SmilesError, describe, parse
from .encoders import EncoderConfig, MolRecord
from .fingerprint import morgan, similarity_matrix
from .fusion import EmptyCorpus, FusionConfig, model_from_checkpoint, train
from .utils import atomic_write

log = logging.getLogger("molfusion")

EXIT_OK, EXIT_CONFIG, EXIT_INPUT, EXIT_CHECKPOINT = 0, 2, 3, 4
CHECKPOINT_NAME = "model.ckpt"
TRAIN_LOG_NAME = "train.log"


class ConfigError(ValueError):
    pass


class InputError(ValueError):
    pass


# --- configuration ------------------------------------------------------------

_ENCODER_KEYS = [f.name for f in dataclasses.fields(EncoderConfig) if f.name != "vocab_size"]
_FUSION_KEYS = [f.name for f in dataclasses.fields(FusionConfig)]


@dataclass
class RunConfig:
    fusion: FusionConfig = field(default_factory=FusionConfig)
    encoder: dict = field(default_factory=dict)
    corpus_path: Path | None = None
    dataset_paths: list[Path] = field(default_factory=list)
    output_dir: Path = Path(".")
    seeds: list[int] = field(default_factory=lambda: [0])
    aggregations: list[str] = field(default_factory=lambda: list(ds_mod.AGGREGATIONS))
    ablation: bool = True

    def methods(self) -> tuple[str, ...]:
        """All seven methods, or only full MolFusion when ablation is switched off."""
        return tuple(ds_mod.METHODS) if self.ablation else ("molfusion",)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


def _coerce(kind, text: str):
    if kind is int:
        return int(text)
    if kind is float:
        return float(text)
    if kind is bool:
        return _parse_bool(text)
    return text


def _field_kinds(cls) -> dict:
    hints = typing.get_type_hints(cls)
    out = {}
    for name, hint in hints.items():
        args = [a for a in typing.get_args(hint) if a is not type(None)]
        out[name] = args[0] if args else hint
    return out


def load_config(path) -> RunConfig:
    """Flat ``key = value`` file; ``#`` starts a comment. Unknown keys are rejected.

    Relative paths are resolved against the config file's directory.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: cannot read config: {exc.strerror}") from None
    base = path.parent
    fusion_kinds, enc_kinds = _field_kinds(FusionConfig), _field_kinds(EncoderConfig)
    fusion_kw, enc_kw, run = {}, {}, RunConfig()
    seen: dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{path}:{lineno}"
        if "=" not in line:
            raise ConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key in seen:
            raise ConfigError(f"{where}: key {key!r} already set on line {seen[key]}")
        seen[key] = lineno
        try:
            if key in _FUSION_KEYS:
                fusion_kw[key] = _coerce(fusion_kinds[key], value)
            elif key in _ENCODER_KEYS:
                enc_kw[key] = None if value.lower() == "none" else _coerce(enc_kinds[key], value)
            elif key == "corpus_path":
                run.corpus_path = base / value
            elif key == "dataset_paths":
                run.dataset_paths = [base / p for p in _list(value)]
            elif key == "output_dir":
                run.output_dir = base / value
            elif key == "seeds":
                run.seeds = [int(s) for s in _list(value)]
            elif key == "aggregations":
                run.aggregations = _list(value)
            elif key == "ablation":
                run.ablation = _parse_bool(value)
            else:
                raise ConfigError(f"{where}: unknown key {key!r}")
        except ValueError as exc:
            if isinstance(exc, ConfigError):
                raise
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
    if not run.seeds:
        raise ConfigError(f"{path}: seeds must not be empty")
    bad = [a for a in run.aggregations if a not in ds_mod.AGGREGATIONS]
    if bad or not run.aggregations:
        raise ConfigError(f"{path}: aggregations must be drawn from {ds_mod.AGGREGATIONS}, got {bad}")
    try:
        run.fusion = FusionConfig(**fusion_kw)
        enc = EncoderConfig(vocab_size=1, **enc_kw)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    if run.fusion.atomic != "none" and enc.graph_d_model != enc.d_model:
        raise ConfigError(f"{path}: atomic objective {run.fusion.atomic!r} needs "
                          f"graph_d_model == d_model; set atomic = none for unequal widths")
    run.encoder = enc_kw
    return run


def check_paths(run: RunConfig, corpus: bool = False, datasets: bool = False) -> None:
    """Referenced inputs must exist; a missing one is an input error."""
    if corpus:
        if run.corpus_path is None:
            raise ConfigError("config does not set corpus_path")
        if not run.corpus_path.is_file():
            raise InputError(f"corpus not found: {run.corpus_path}")
    if datasets:
        if not run.dataset_paths:
            raise ConfigError("config does not set dataset_paths")
        for p in run.dataset_paths:
            if not p.is_file():
                raise InputError(f"dataset not found: {p}")


# --- inputs -------------------------------------------------------------------

def read_smiles_column(path) -> list[tuple[int, str]]:
    """(line number, SMILES) pairs from a CSV whose header has a ``smiles`` column."""
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or "smiles" not in [h.strip() for h in header]:
            raise InputError(f"{path}:1: header must contain a 'smiles' column")
        col = [h.strip() for h in header].index("smiles")
        rows = []
        for row in reader:
            if not row:
                continue
            if len(row) <= col:
                raise InputError(f"{path}:{reader.line_num}: missing smiles field")
            rows.append((reader.line_num, row[col].strip()))
    if not rows:
        raise InputError(f"{path}: no molecules")
    return rows


def read_corpus(path) -> list[str]:
    """Every entry must parse; the first bad one is reported with its line."""
    rows = read_smiles_column(path)
    for line, smi in rows:
        try:
            parse(smi)
        except SmilesError as exc:
            raise InputError(f"{path}:{line}: cannot parse {smi!r}: {exc}") from None
    return [s for _, s in rows]


def read_dataset(path) -> ds_mod.TaskDataset:
    try:
        return ds_mod.load_dataset(path)
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from None
    except ValueError as exc:
        raise InputError(str(exc)) from None


def load_checkpoint(path) -> ckpt_io.Checkpoint:
    try:
        ckpt = ckpt_io.load(path)
    except OSError as exc:
        raise InputError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    model_from_checkpoint(ckpt)  # fail early on config/parameter mismatch
    return ckpt


def method_of(ckpt: ckpt_io.Checkpoint) -> str:
    fusion = ckpt.config["fusion"]
    if fusion["epochs"] == 0:
        return "no-train"
    pair = (fusion["molecular"], fusion["atomic"])
    for name, objectives in ds_mod.METHODS.items():
        if objectives == pair:
            return name
    return f"{pair[0]}+{pair[1]}"


def _fmt(v) -> str:
    return repr(v) if isinstance(v, float) else str(v)


def _kv(row: dict) -> str:
    return " ".join(f"{k}={_fmt(v)}" for k, v in row.items())


def _json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


# --- commands -------------------------------------------------------------------

def _run_config(args) -> RunConfig:
    run = load_config(args.config) if args.config else RunConfig()
    if args.seed is not None:
        run.fusion = dataclasses.replace(run.fusion, seed=args.seed)
        run.seeds = [args.seed]
    if args.out is not None:
        run.output_dir = Path(args.out)
    return run


def cmd_pretrain(args) -> int:
    if not args.config:
        raise ConfigError("pretrain needs --config")
    run = _run_config(args)
    check_paths(run, corpus=True)
    corpus = read_corpus(run.corpus_path)
    ckpt = train(corpus, run.fusion, **run.encoder)
    out = run.output_dir
    ckpt_io.save(ckpt, out / CHECKPOINT_NAME)
    atomic_write(out / TRAIN_LOG_NAME, "".join(_kv(r) + "\n" for r in ckpt.history))
    print(f"checkpoint={out / CHECKPOINT_NAME} epochs={len(ckpt.history) - 1}")
    return EXIT_OK


def _seeds(args, run: RunConfig) -> list[int]:
    if args.seeds:
        try:
            seeds = [int(s) for s in _list(args.seeds)]
        except ValueError:
            raise ConfigError(f"--seeds must be a comma-separated integer list, got {args.seeds!r}")
        if not seeds:
            raise ConfigError("--seeds must not be empty")
        return seeds
    return run.seeds


def cmd_probe(args) -> int:
    run = _run_config(args)
    seeds = _seeds(args, run)
    if args.agg not in ds_mod.AGGREGATIONS:
        raise ConfigError(f"--agg must be one of {ds_mod.AGGREGATIONS}")
    ckpt = load_checkpoint(args.checkpoint)
    ds = read_dataset(args.dataset)
    report = ds_mod.evaluate(ckpt, ds, args.agg, seeds, method_of(ckpt))
    path = run.output_dir / f"{ds.name}.{args.agg}.report.json"
    atomic_write(path, report.to_json() + "\n")
    print(f"report={path} {report.metric_name}={report.mean!r} std={report.std!r}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    if not args.config:
        raise ConfigError("ablate needs --config")
    run = _run_config(args)
    check_paths(run, corpus=True, datasets=True)
    corpus = read_corpus(run.corpus_path)
    datasets = [read_dataset(p) for p in run.dataset_paths]
    grid = ds_mod.ablation_grid(corpus, datasets, run.fusion, run.seeds, run.methods(),
                                tuple(run.aggregations), **run.encoder)
    path = run.output_dir / "ablation.json"
    atomic_write(path, _json(grid))
    print(f"report={path} rows={len(grid['rows'])}")
    return EXIT_OK


def pca2(x: np.ndarray) -> np.ndarray:
    """Top two principal coordinates with a deterministic sign per axis."""
    centered = x - x.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    axes = vt[:2]
    if axes.shape[0] < 2:
        axes = np.vstack([axes, np.zeros((2 - axes.shape[0], x.shape[1]))])
    signs = np.sign(axes[np.arange(2), np.abs(axes).argmax(axis=1)])
    axes = axes * np.where(signs == 0, 1.0, signs)[:, None]
    return centered @ axes.T


def cmd_export_embeddings(args) -> int:
    run = _run_config(args)
    ckpt = load_checkpoint(args.checkpoint)
    model, vocab, _ = model_from_checkpoint(ckpt)
    records = []
    for line, smi in read_smiles_column(args.corpus):
        try:
            records.append(MolRecord.from_smiles(smi))
        except SmilesError as exc:
            log.warning("%s:%d: skipping %r: %s", args.corpus, line, smi, exc)
    if not records:
        raise InputError(f"{args.corpus}: no parseable molecules")
    s_emb, g_emb = ds_mod.embed(model, vocab, records, projected=True)
    modalities = ["smiles", "graph"] if args.modality == "both" else [args.modality]
    blocks = {"smiles": s_emb, "graph": g_emb}
    rows = [(i, m) for i in range(len(records)) for m in modalities]
    values = np.stack([blocks[m][i] for i, m in rows])
    if args.pca2:
        values = pca2(values)
        cols = ["pc1", "pc2"]
    else:
        cols = [f"e{k}" for k in range(values.shape[1])]
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["index", "smiles", "modality"] + cols)
    for (i, m), vec in zip(rows, values):
        writer.writerow([i, records[i].smiles, m] + [repr(float(v)) for v in vec])
    path = run.output_dir / "embeddings.csv"
    atomic_write(path, buf.getvalue())
    print(f"embeddings={path} rows={len(rows)}")
    return EXIT_OK


def _parse_or_input_error(smiles: str):
    try:
        return parse(smiles)[0]
    except SmilesError as exc:
        raise InputError(f"cannot parse {smiles!r}: {exc}") from None


def cmd_parse(args) -> int:
    print(describe(_parse_or_input_error(args.smiles)))
    return EXIT_OK


def cmd_fingerprint(args) -> int:
    if args.radius < 0 or args.bits < 1:
        raise ConfigError("--radius must be >= 0 and --bits >= 1")
    fp = morgan(_parse_or_input_error(args.smiles), args.radius, args.bits)
    bits = fp.on_bits
    print(f"set_bits={len(bits)}")
    print(" ".join(str(b) for b in bits))
    return EXIT_OK


def cmd_simmatrix(args) -> int:
    run = _run_config(args)
    mols = []
    for line, smi in read_smiles_column(args.csv):
        try:
            mols.append(parse(smi)[0])
        except SmilesError as exc:
            raise InputError(f"{args.csv}:{line}: cannot parse {smi!r}: {exc}") from None
    sim = similarity_matrix(mols, args.radius, args.bits)
    text = "".join(",".join(repr(float(v)) for v in row) + "\n" for row in sim)
    path = run.output_dir / "simmatrix.csv"
    atomic_write(path, text)
    print(f"simmatrix={path} n={len(mols)}")
    return EXIT_OK


# --- argument parsing -----------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help="key = value run config")
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help="override every seed")
    common.add_argument("--out", default=argparse.SUPPRESS, help="output directory")

    parser = argparse.ArgumentParser(prog="molfusion", parents=[common],
                                     description="SMILES/graph fusion pretraining and probing.")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[common], help="train encoders on a corpus")
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("probe", parents=[common], help="linear probe on a frozen checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("dataset")
    p.add_argument("--agg", default=ds_mod.CCO, choices=ds_mod.AGGREGATIONS)
    p.add_argument("--seeds", default=None, help="comma-separated, e.g. 1,2,3")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("ablate", parents=[common], help="method x aggregation grid")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export-embeddings", parents=[common], help="projected embeddings as CSV")
    p.add_argument("checkpoint")
    p.add_argument("corpus")
    p.add_argument("--modality", default="both", choices=("both", "smiles", "graph"))
    p.add_argument("--pca2", action="store_true", help="reduce to two principal coordinates")
    p.set_defaults(func=cmd_export_embeddings)

    p = sub.add_parser("parse", parents=[common], help="print atoms and bonds")
    p.add_argument("smiles")
    p.set_defaults(func=cmd_parse)

    p = sub.add_parser("fingerprint", parents=[common], help="print set Morgan bits")
    p.add_argument("smiles")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--bits", type=int, default=2048)
    p.set_defaults(func=cmd_fingerprint)

    p = sub.add_parser("simmatrix", parents=[common], help="pairwise Tanimoto matrix as CSV")
    p.add_argument("csv")
    p.add_argument("--radius", type=int, default=2)
    p.add_argument("--bits", type=int, default=2048)
    p.set_defaults(func=cmd_simmatrix)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    for name in ("config", "seed", "out"):
        if not hasattr(args, name):
            setattr(args, name, None)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (InputError, EmptyCorpus) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (CheckpointError, ds_mod.WidthMismatch) as exc:
        print(f"checkpoint mismatch: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT


if __name__ == "__main__":
    sys.exit(main())
