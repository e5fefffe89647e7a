"""Confusion matrices and weighted metrics.

Shows why weighted recall always equals accuracy, and rebuilds a test-set
matrix (103 images per class) that matches the best reported cell.
"""
# %%
import numpy as np

from leafbg.evaluator import ConfusionMatrix, confusion, metrics

# %% from label lists
true = ["healthy", "rust", "scab", "scab", "rust", "healthy"]
pred = ["healthy", "rust", "healthy", "scab", "rust", "rust"]
cm = confusion(true, pred)
print(cm.to_text())
m = metrics(cm)
print("accuracy", m.accuracy, "weighted recall", m.weighted_recall)

# %% the identity: sum_k (n_k / N) * TP_k / n_k = sum_k TP_k / N
rng = np.random.default_rng(0)
for _ in range(5):
    r = metrics(ConfusionMatrix(rng.integers(0, 50, (3, 3))))
    print(f"accuracy {r.accuracy:.6f}  weighted recall {r.weighted_recall:.6f}  equal: {r.accuracy == r.weighted_recall}")

# %% 103 per class, two scab leaves called healthy, two more errors elsewhere
best = ConfusionMatrix(np.array([[102, 1, 0],
                                 [1, 102, 0],
                                 [2, 0, 101]]))
r = metrics(best)
print(best.to_text())
for name in ("accuracy", "weighted_precision", "weighted_recall", "weighted_f1"):
    print(f"{name:20s} {100 * getattr(r, name):.2f}%")
print("per-class recall", {k: round(v, 4) for k, v in r.recall.items()})
