"""From encoder tokens to a trained cell classifier.

Two synthetic cell populations lay down distinguishable token patterns; the
demo pools tokens into per-cell embeddings, trains the one-hidden-layer
classifier with AdamW and AUROC early stopping, then runs a short random
hyperparameter search to show the embedding cache doing its job.
"""

import numpy as np

from cellkit import clsmod
from cellkit.postproc import InstanceMap
from cellkit.tokens import TokenGrid, extract_embeddings, reshape_tokens

rng = np.random.default_rng(23)
P, D = 16, 32
GRID = 16  # 16 x 16 tokens -> 256 px tiles

print("--- token pooling ---")
flat = rng.standard_normal((GRID * GRID + 1, D)).astype(np.float32)  # 1 CLS token
grid = reshape_tokens(flat, patch_size=P, height=GRID * P, width=GRID * P, k_extra=1)
print(f"flat {flat.shape} -> grid {grid.grid.shape} (CLS removed)")

labels = np.zeros((GRID * P, GRID * P), dtype=np.uint32)
labels[40:60, 40:70] = 1   # spans several token footprints
labels[100:110, 200:208] = 2
embeddings = extract_embeddings(InstanceMap(labels), grid)
for e in embeddings:
    print(f"cell {e.cell_id}: pooled over {e.n_tokens} tokens, ||v|| = {np.linalg.norm(e.vector):.3f}")

print()
print("--- classifier training ---")
n_per_class, n_classes = 500, 4
centers = rng.standard_normal((n_classes, D)) * 5
x = np.concatenate([c + rng.standard_normal((n_per_class, D)) for c in centers])
y = np.repeat(np.arange(n_classes), n_per_class)
order = rng.permutation(len(y))
x, y = x[order].astype(np.float32), y[order]
splits = np.array(["val"] * 500 + ["train"] * 1500)
data = clsmod.LabeledCellSet(
    embeddings=x, labels=y, splits=splits,
    class_names=[f"type{i}" for i in range(n_classes)],
)

config = clsmod.TrainConfig(lr=1e-3, schedule="exponential", seed=1)
result = clsmod.train(data, config, hidden=64)
print(f"stopped after {len(result.history)} epochs, best epoch {result.best_epoch}, "
      f"val AUROC {result.best_auroc:.4f}")

val = data.split_indices("val")
_, preds = clsmod.predict(result.params, data.embeddings[val])
print(f"val macro F1: {clsmod.macro_f1(preds, data.labels[val], n_classes):.4f}")

print()
print("--- random search with cached embeddings ---")
loads = {"n": 0}

def loader():
    loads["n"] += 1
    return data

tune_result = clsmod.tune(
    clsmod.EmbeddingCache(loader), n_runs=10, seed=0,
    base_config=clsmod.TrainConfig(max_epochs=8),
)
print(f"10 runs, embedding extractions: {tune_result.extractions} (loader calls {loads['n']})")
best = tune_result.best
print(f"best: hidden={best.hidden} lr={best.config.lr:.2e} "
      f"wd={best.config.weight_decay:.2e} schedule={best.config.schedule} "
      f"AUROC={best.val_auroc:.4f}")
