"""
Splitting predictive entropy into two parts
===========================================

A classifier prompted with L different demonstration sets gives L answer
distributions. Their pooled entropy splits exactly into the mean entropy
inside each set and the disagreement between sets.
"""

import numpy as np

from icluq.uq_core import ProbabilityMatrix, decompose_entropy, decompose_variance

# Two demo sets, two labels. Columns are demo sets.
m = ProbabilityMatrix(np.array([[0.8, 0.6],
                                [0.2, 0.4]]))
r = decompose_entropy(m)
print(f"total {r.total:.6f} = EU {r.epistemic:.6f} + AU {r.aleatoric:.6f}")

# When every demo set agrees, all uncertainty sits inside the columns.
same = decompose_entropy(ProbabilityMatrix(np.array([[0.5, 0.5], [0.5, 0.5]])))
print("identical columns:", same.epistemic, same.aleatoric)

# Confident but contradictory demo sets: nothing inside, ln 2 between.
flip = decompose_entropy(ProbabilityMatrix(np.eye(2)))
print("one-hot columns:", flip.epistemic, flip.aleatoric, np.log(2))

# The uniform pooling used above matches mutual information. Summing raw
# columns instead can push the between-set term below zero.
raw = decompose_entropy(ProbabilityMatrix(np.array([[10.0, 0.5], [0.0, 0.5]])), pooling="raw_sum")
print("raw_sum pooling AU:", raw.aleatoric)

# For scalar answers the same split is the law of total variance.
rng = np.random.default_rng(0)
grid = rng.normal(size=(10, 4)) + rng.normal(size=4)  # rows: configs, columns: demo sets
v = decompose_variance(grid)
print(f"variance {grid.var():.6f} = {v.epistemic:.6f} + {v.aleatoric:.6f}")
