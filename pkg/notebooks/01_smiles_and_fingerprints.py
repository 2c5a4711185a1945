# %% [markdown]
# # From SMILES strings to graphs and fingerprints
#
# Parse a few molecules, look at the atom table, then compare them with
# folded circular fingerprints and the Tanimoto coefficient.

# %%
import numpy as np

from molfusion.chem import describe, parse
from molfusion.fingerprint import morgan, similarity_matrix, tanimoto

# %%
mol, tok = parse("CC(=O)Nc1ccc(O)cc1")
print(describe(mol))
print(tok.texts)

# %% [markdown]
# Atom order follows the string, so the tokenizer can point back at graph atoms.

# %%
print([tok.atom_map[p] for p in tok.atom_positions])

# %% [markdown]
# Two spellings of the same molecule give the same fingerprint.

# %%
a = morgan(parse("OCC(=O)c1ccccc1")[0])
b = morgan(parse("c1ccc(cc1)C(=O)CO")[0])
print(a == b, len(a.on_bits), "bits set")

# %%
names = ["CCO", "CCCO", "c1ccccc1", "c1ccccc1O", "CC(=O)O"]
sim = similarity_matrix([parse(s)[0] for s in names])
np.set_printoptions(precision=2, suppress=True)
print(sim)
print(tanimoto(morgan(parse("CCO")[0]), morgan(parse("CCCO")[0])))
