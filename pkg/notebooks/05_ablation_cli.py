# %% [markdown]
# # The ablation grid through the command line
#
# Writes a config, runs pretraining, a probe and the seven-method ablation,
# then reads the JSON back.

# %%
import json
import tempfile
from pathlib import Path

from molfusion import cli
from molfusion.synthetic import contains_oxygen, generate_corpus

root = Path(tempfile.mkdtemp())
corpus = generate_corpus(120, seed=5)
(root / "corpus.csv").write_text("smiles\n" + "\n".join(corpus) + "\n")
(root / "oxygen.csv").write_text("smiles,oxygen\n" + "".join(f"{s},{contains_oxygen(s)}\n" for s in corpus))
(root / "run.cfg").write_text("""\
corpus_path = corpus.csv
dataset_paths = oxygen.csv
epochs = 3
seeds = 0
d_model = 16
d_shared = 16
n_layers = 1
n_heads = 2
""")

# %%
cli.main(["pretrain", "--config", str(root / "run.cfg"), "--out", str(root / "out")])
cli.main(["probe", str(root / "out" / "model.ckpt"), str(root / "oxygen.csv"), "--out", str(root / "out")])
print((root / "out" / "oxygen.CCO.report.json").read_text())

# %%
cli.main(["ablate", "--config", str(root / "run.cfg"), "--out", str(root / "out")])
grid = json.loads((root / "out" / "ablation.json").read_text())
for row in grid["rows"]:
    print(f"{row['method']:24s} {row['aggregation']:12s} {row['mean']:.3f}")
print(grid["optimizer_steps"]["no-train"])
