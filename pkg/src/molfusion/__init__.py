"""Multi-granularity SMILES/graph fusion at desk scale."""
