"""
Which prototypes help?
======================

Four cells: no prototype terms, group prototypes only, class prototypes
only, and both. "none" still applies a random transform, so it isolates
the effect of the energy gradient itself.
"""

# %%
import warnings

from protoexpand import RunConfig, experiment

warnings.simplefilter("ignore")
base = RunConfig().with_overrides({"data.n_per_class": 167, "expansion.factor": 1})
result = experiment.run_ablation("prototypes", base, seeds=(0, 1))

# %%
for label, row in result.summary().items():
    print(f"{label:>5}: FD {row['frechet']:.4f}  MMD^2 {row['mmd2']:.5f}")
print(result.flags)

# %%
# The flat CSV is what `protoexpand ablate` writes.
print(result.csv_text().splitlines()[0])
