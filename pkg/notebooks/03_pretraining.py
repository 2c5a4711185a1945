# %% [markdown]
# # Pretraining the two encoders
#
# A SMILES transformer and a message-passing graph encoder are trained together.
# The molecule-level term regresses the cross-modal similarity matrix onto
# Tanimoto similarities. The atom-level term predicts masked atoms from the
# difference between graph and masked-SMILES atom embeddings.

# %%
from molfusion.fusion import FusionConfig, masked_atom_accuracy, model_from_checkpoint, prepare_corpus, train
from molfusion.synthetic import generate_corpus

corpus = generate_corpus(20, seed=1)
print(corpus[:5])

# %%
cfg = FusionConfig(epochs=60, val_fraction=0.0)
ckpt = train(corpus, cfg)
print("initial loss", round(ckpt.history[0]["train_loss"], 4))
for row in ckpt.history[1::10]:
    print(row["epoch"], round(row["train_loss"], 4), round(row["molsim"], 4), round(row["mask"], 4),
          round(row["unmask"], 4))

# %% [markdown]
# How often the alignment head recovers a masked atom type on this corpus.

# %%
model, vocab, _ = model_from_checkpoint(ckpt)
acc = masked_atom_accuracy(model, vocab, prepare_corpus(corpus), cfg.mask_rate, seed=0, repeats=5)
print(f"masked accuracy {acc:.3f}, chance {1 / (vocab.n_atom_types + 1):.3f}")
