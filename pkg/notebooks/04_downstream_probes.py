# %% [markdown]
# # Frozen encoders, linear probes, scaffold splits
#
# Label generated molecules by whether they contain oxygen, split them by ring
# scaffold, and fit linear probes on each aggregation of the two embeddings.

# %%
import numpy as np

from molfusion import downstream as d
from molfusion.fusion import FusionConfig, train
from molfusion.synthetic import contains_oxygen, generate_corpus

corpus = generate_corpus(300, seed=7)
ds = d.make_dataset("oxygen", corpus, [contains_oxygen(s) for s in corpus])
split = d.scaffold_split(ds)
print(len(split.train), len(split.valid), len(split.test))

# %%
for idx in (split.train[:3], split.test[:3]):
    print([(ds.smiles[i], d.scaffold_key(ds.records[i].mol)[:40]) for i in idx])

# %%
ckpt = train(corpus, FusionConfig(epochs=10, seed=0))
for agg in d.AGGREGATIONS:
    report = d.evaluate(ckpt, ds, agg, seeds=(0, 1, 2), split=split)
    print(f"{agg:12s} {report.metric_name} {report.mean:.3f} +/- {report.std:.3f}")

# %% [markdown]
# Rank-based AUC with ties counted as half.

# %%
print(d.roc_auc(np.array([0.9, 0.4, 0.4, 0.1]), np.array([1, 1, 0, 0])))
