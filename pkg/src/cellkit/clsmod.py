"""Lightweight cell-type classifier trained on frozen embeddings.

One hidden layer with ReLU and dropout, softmax cross-entropy, AdamW with
decoupled weight decay (beta1=0.85, beta2=0.9), batches of 256 over up to
50 epochs, and early stopping on validation macro AUROC with patience 10.
The learning rate either decays exponentially (gamma=0.95 per epoch) or is
halved at the midpoint of training. Everything runs in float32 on a single
thread, so a fixed seed reproduces final weights bit for bit.

Random hyperparameter search draws independent configs per run; embeddings
are pulled through an EmbeddingCache so the extraction work happens exactly
once per dataset no matter how many runs follow.
"""

from __future__ import annotations

import csv
import json
import struct
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Iterable, Optional

import numpy as np
from scipy.stats import rankdata

from .errors import CellKitError
from .tensorio import read_tensor, read_tensor_stream, write_tensor, write_tensor_stream


class DimMismatch(CellKitError):
    pass


class EmptySplit(CellKitError):
    pass


class SingleClassVal(CellKitError):
    """Validation split holds one class; AUROC is undefined."""


class NoComputableClass(CellKitError):
    """No class has both positives and negatives."""


class EmptySearchSpace(CellKitError):
    pass


class FractionOutOfRange(CellKitError):
    pass


@dataclass
class LabeledCellSet:
    """Embeddings with labels, split tags, and provenance ids."""

    embeddings: np.ndarray          # N x D float32
    labels: np.ndarray              # N ints in [0, C)
    splits: np.ndarray              # N strings, "train" or "val"
    class_names: list[str]
    cell_ids: list[str] = field(default_factory=list)
    slide_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.embeddings = np.asarray(self.embeddings, dtype=np.float32)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.splits = np.asarray(self.splits)
        n = self.embeddings.shape[0]
        if not (len(self.labels) == len(self.splits) == n):
            raise DimMismatch("embeddings, labels, and splits must align")
        if len(self.class_names) and self.labels.size and self.labels.max() >= len(self.class_names):
            raise ValueError("label outside class universe")
        if not self.cell_ids:
            self.cell_ids = [str(i) for i in range(n)]

    def subset(self, index: np.ndarray) -> "LabeledCellSet":
        index = np.asarray(index)
        return LabeledCellSet(
            embeddings=self.embeddings[index],
            labels=self.labels[index],
            splits=self.splits[index],
            class_names=list(self.class_names),
            cell_ids=[self.cell_ids[i] for i in index],
            slide_ids=[self.slide_ids[i] for i in index] if self.slide_ids else [],
        )

    def split_indices(self, tag: str) -> np.ndarray:
        return np.flatnonzero(self.splits == tag)


def save_labeled_set(stem: str | Path, data: LabeledCellSet) -> None:
    """Persist as {stem}.lcset.json + {stem}.features.cvtt + {stem}.records.jsonl."""
    stem = Path(stem)
    write_tensor(stem.with_suffix(".features.cvtt"), data.embeddings)
    with open(stem.with_suffix(".records.jsonl"), "w", encoding="utf-8") as f:
        for i in range(len(data.labels)):
            rec = {
                "row": i,
                "cell_id": data.cell_ids[i],
                "label": int(data.labels[i]),
                "split": str(data.splits[i]),
            }
            if data.slide_ids:
                rec["slide_id"] = data.slide_ids[i]
            f.write(json.dumps(rec, separators=(",", ":")) + "\n")
    manifest = {
        "class_names": data.class_names,
        "features": stem.with_suffix(".features.cvtt").name,
        "records": stem.with_suffix(".records.jsonl").name,
        "n": int(len(data.labels)),
    }
    stem.with_suffix(".lcset.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def load_labeled_set(stem: str | Path) -> LabeledCellSet:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".lcset.json").read_text())
    base = stem.parent
    feats = read_tensor(base / manifest["features"])
    labels, splits, ids, slides = [], [], [], []
    with open(base / manifest["records"], "r", encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            rec = json.loads(line)
            labels.append(rec["label"])
            splits.append(rec["split"])
            ids.append(rec["cell_id"])
            slides.append(rec.get("slide_id", ""))
    return LabeledCellSet(
        embeddings=feats,
        labels=np.array(labels),
        splits=np.array(splits),
        class_names=manifest["class_names"],
        cell_ids=ids,
        slide_ids=slides if any(slides) else [],
    )


@dataclass
class ClassifierParams:
    w1: np.ndarray  # hidden x D
    b1: np.ndarray  # hidden
    w2: np.ndarray  # C x hidden
    b2: np.ndarray  # C
    dropout_rate: float = 0.1

    @property
    def dim(self) -> int:
        return self.w1.shape[1]

    @property
    def hidden(self) -> int:
        return self.w1.shape[0]

    @property
    def n_classes(self) -> int:
        return self.w2.shape[0]

    def copy(self) -> "ClassifierParams":
        return ClassifierParams(
            self.w1.copy(), self.b1.copy(), self.w2.copy(), self.b2.copy(), self.dropout_rate
        )

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def init_params(
    dim: int, hidden: int, n_classes: int, rng: np.random.Generator, dropout_rate: float = 0.1
) -> ClassifierParams:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, float32."""
    if hidden < 1 or n_classes < 2:
        raise DimMismatch(f"hidden={hidden}, classes={n_classes}")
    s1 = 1.0 / np.sqrt(dim)
    s2 = 1.0 / np.sqrt(hidden)
    return ClassifierParams(
        w1=rng.uniform(-s1, s1, size=(hidden, dim)).astype(np.float32),
        b1=rng.uniform(-s1, s1, size=hidden).astype(np.float32),
        w2=rng.uniform(-s2, s2, size=(n_classes, hidden)).astype(np.float32),
        b2=rng.uniform(-s2, s2, size=n_classes).astype(np.float32),
        dropout_rate=dropout_rate,
    )


@dataclass
class TrainConfig:
    lr: float = 1e-3
    weight_decay: float = 0.0
    beta1: float = 0.85
    beta2: float = 0.9
    eps: float = 1e-8
    batch_size: int = 256
    max_epochs: int = 50
    patience: int = 10
    schedule: str = "exponential"  # or "halve"
    gamma: float = 0.95
    seed: int = 0

    def __post_init__(self):
        if self.lr < 0:
            raise ValueError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.gamma < 1:
            raise ValueError(f"gamma must be in (0, 1), got {self.gamma}")
        if self.schedule not in ("exponential", "halve"):
            raise ValueError(f"unknown schedule {self.schedule!r}")

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 0-based epoch index."""
        if self.schedule == "exponential":
            return self.lr * self.gamma**epoch
        return self.lr if epoch < self.max_epochs // 2 else self.lr / 2.0


def forward(
    params: ClassifierParams,
    x: np.ndarray,
    train_mode: bool = False,
    rng: Optional[np.random.Generator] = None,
) -> tuple[np.ndarray, Optional[dict]]:
    """Logits = W2 . dropout(relu(W1 x + b1)) + b2.

    Dropout uses inverted scaling and fires only in train mode; eval mode
    ignores the rng entirely. Returns (logits, cache), cache only in train
    mode.
    """
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != params.dim:
        raise DimMismatch(f"input {x.shape} vs weights expecting D={params.dim}")
    pre = x @ params.w1.T + params.b1
    h = np.maximum(pre, 0)
    if train_mode:
        rate = params.dropout_rate
        if rate > 0:
            if rng is None:
                raise ValueError("train-mode forward with dropout needs an rng")
            keep = (rng.random(h.shape) >= rate).astype(h.dtype)
            scale = keep / (1.0 - rate)
        else:
            scale = np.ones_like(h)
        h_dropped = h * scale
        logits = h_dropped @ params.w2.T + params.b2
        cache = {"x": x, "pre": pre, "h_dropped": h_dropped, "scale": scale}
        return logits, cache
    logits = h @ params.w2.T + params.b2
    return logits, None


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def cross_entropy(logits: np.ndarray, labels: np.ndarray) -> float:
    z = logits - logits.max(axis=1, keepdims=True)
    log_probs = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    return float(-log_probs[np.arange(len(labels)), labels].mean())


@dataclass
class Gradients:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray

    def tensors(self) -> dict[str, np.ndarray]:
        return {"w1": self.w1, "b1": self.b1, "w2": self.w2, "b2": self.b2}


def backward(params: ClassifierParams, cache: dict, labels: np.ndarray) -> Gradients:
    """Gradients of mean softmax cross-entropy w.r.t. all parameters."""
    x = cache["x"]
    logits = cache["h_dropped"] @ params.w2.T + params.b2
    probs = softmax(logits)
    B = x.shape[0]
    dlogits = probs.copy()
    dlogits[np.arange(B), labels] -= 1.0
    dlogits /= B
    dw2 = dlogits.T @ cache["h_dropped"]
    db2 = dlogits.sum(axis=0)
    dh = (dlogits @ params.w2) * cache["scale"]
    dpre = dh * (cache["pre"] > 0)
    dw1 = dpre.T @ x
    db1 = dpre.sum(axis=0)
    return Gradients(
        w1=dw1.astype(params.w1.dtype),
        b1=db1.astype(params.b1.dtype),
        w2=dw2.astype(params.w2.dtype),
        b2=db2.astype(params.b2.dtype),
    )


@dataclass
class AdamWState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]

    @classmethod
    def zeros_like(cls, params: ClassifierParams) -> "AdamWState":
        return cls(
            m={k: np.zeros_like(t) for k, t in params.tensors().items()},
            v={k: np.zeros_like(t) for k, t in params.tensors().items()},
        )


def adamw_step(
    params: ClassifierParams,
    grads: Gradients,
    state: AdamWState,
    config: TrainConfig,
    t: int,
    lr: Optional[float] = None,
) -> tuple[ClassifierParams, AdamWState]:
    """One decoupled-weight-decay Adam update at step t >= 1 (in place).

    theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + weight_decay * theta)
    """
    if t < 1:
        raise ValueError("step index starts at 1")
    lr = config.lr if lr is None else lr
    b1, b2 = config.beta1, config.beta2
    tensors = params.tensors()
    gts = grads.tensors()
    for key, theta in tensors.items():
        g = gts[key]
        state.m[key] = b1 * state.m[key] + (1 - b1) * g
        state.v[key] = b2 * state.v[key] + (1 - b2) * g * g
        m_hat = state.m[key] / (1 - b1**t)
        v_hat = state.v[key] / (1 - b2**t)
        theta -= (lr * (m_hat / (np.sqrt(v_hat) + config.eps) + config.weight_decay * theta)).astype(theta.dtype)
    return params, state


def auroc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Macro one-vs-rest AUROC with average ranks for ties.

    Classes lacking positives or negatives are skipped; raises when no
    class is computable.
    """
    scores = np.asarray(scores)
    labels = np.asarray(labels)
    if scores.ndim != 2:
        raise DimMismatch(f"scores must be N x C, got {scores.shape}")
    values = []
    for c in range(scores.shape[1]):
        pos = labels == c
        n_pos = int(pos.sum())
        n_neg = len(labels) - n_pos
        if n_pos == 0 or n_neg == 0:
            continue
        ranks = rankdata(scores[:, c])
        u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
        values.append(u / (n_pos * n_neg))
    if not values:
        raise NoComputableClass("every class lacks positives or negatives")
    return float(np.mean(values))


def macro_f1(pred_labels: np.ndarray, true_labels: np.ndarray, n_classes: int) -> float:
    """Classification macro F1 over classes present in the ground truth."""
    scores = []
    for c in range(n_classes):
        tp = int(np.sum((pred_labels == c) & (true_labels == c)))
        fp = int(np.sum((pred_labels == c) & (true_labels != c)))
        fn = int(np.sum((pred_labels != c) & (true_labels == c)))
        if tp + fn == 0:
            continue
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores)) if scores else 0.0


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    val_auroc: float
    lr: float


@dataclass
class TrainResult:
    params: ClassifierParams
    history: list[EpochStats]
    best_epoch: int
    best_auroc: float


def train(data: LabeledCellSet, config: TrainConfig, hidden: int) -> TrainResult:
    """Run the full recipe and return the best-AUROC epoch's weights.

    Deterministic for a fixed config.seed: the same generator drives init,
    shuffling, and dropout in a fixed order.
    """
    train_idx = data.split_indices("train")
    val_idx = data.split_indices("val")
    if len(train_idx) == 0 or len(val_idx) == 0:
        raise EmptySplit(f"train={len(train_idx)}, val={len(val_idx)}")
    val_labels = data.labels[val_idx]
    if len(np.unique(val_labels)) < 2:
        raise SingleClassVal("validation split holds a single class")

    n_classes = len(data.class_names) or int(data.labels.max()) + 1
    rng = np.random.default_rng(config.seed)
    params = init_params(data.embeddings.shape[1], hidden, n_classes, rng)
    state = AdamWState.zeros_like(params)

    x_train = data.embeddings[train_idx]
    y_train = data.labels[train_idx]
    x_val = data.embeddings[val_idx]

    best = TrainResult(params.copy(), [], best_epoch=-1, best_auroc=-np.inf)
    history: list[EpochStats] = []
    stale = 0
    t = 0
    for epoch in range(config.max_epochs):
        lr = config.lr_at(epoch)
        order = rng.permutation(len(train_idx))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = order[start:start + config.batch_size]
            logits, cache = forward(params, x_train[batch], train_mode=True, rng=rng)
            losses.append(cross_entropy(logits, y_train[batch]))
            grads = backward(params, cache, y_train[batch])
            t += 1
            adamw_step(params, grads, state, config, t, lr=lr)
        val_logits, _ = forward(params, x_val, train_mode=False)
        val_auroc = auroc(softmax(val_logits), val_labels)
        history.append(EpochStats(epoch, float(np.mean(losses)), val_auroc, lr))
        if val_auroc > best.best_auroc:
            best = TrainResult(params.copy(), [], best_epoch=epoch, best_auroc=val_auroc)
            stale = 0
        else:
            # an AUROC tie is no improvement for patience purposes, but the
            # later (longer-trained) weights are the better tie-break
            if val_auroc == best.best_auroc:
                best = TrainResult(params.copy(), [], best_epoch=epoch, best_auroc=val_auroc)
            stale += 1
            if stale >= config.patience:
                break
    best.history = history
    return best


def predict(params: ClassifierParams, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eval-mode class probabilities and argmax labels."""
    logits, _ = forward(params, x, train_mode=False)
    probs = softmax(logits)
    return probs, probs.argmax(axis=1)


class EmbeddingCache:
    """Memoizes a labeled-set loader; `extractions` counts real loads."""

    def __init__(self, loader: Callable[[], LabeledCellSet]):
        self._loader = loader
        self._data: Optional[LabeledCellSet] = None
        self.extractions = 0

    def get(self) -> LabeledCellSet:
        if self._data is None:
            self._data = self._loader()
            self.extractions += 1
        return self._data


@dataclass
class SearchSpace:
    """Random-search domain; lr and weight decay are sampled log-uniformly."""

    hidden_dims: tuple[int, ...] = (32, 64, 128, 256, 512, 1024)
    lr_range: tuple[float, float] = (1e-5, 1e-2)
    weight_decay_range: tuple[float, float] = (1e-6, 1e-2)
    schedules: tuple[str, ...] = ("exponential", "halve")

    def validate(self) -> None:
        if not self.hidden_dims or not self.schedules:
            raise EmptySearchSpace("hidden_dims and schedules must be non-empty")
        if self.lr_range[0] <= 0 or self.weight_decay_range[0] <= 0:
            raise EmptySearchSpace("log-uniform ranges need positive bounds")


@dataclass
class TrialResult:
    run: int
    hidden: int
    config: TrainConfig
    val_auroc: float


@dataclass
class TuneResult:
    best: TrialResult
    leaderboard: list[TrialResult]
    extractions: int


def tune(
    source: EmbeddingCache | LabeledCellSet | Callable[[], LabeledCellSet],
    space: SearchSpace | None = None,
    n_runs: int = 100,
    seed: int = 0,
    base_config: TrainConfig | None = None,
) -> TuneResult:
    """Random hyperparameter search over hidden dim, lr, weight decay, and
    schedule. The leaderboard is sorted by val AUROC, ties going to the
    smaller hidden dim; identical seeds reproduce it exactly.
    """
    space = space or SearchSpace()
    space.validate()
    if isinstance(source, LabeledCellSet):
        cache = EmbeddingCache(lambda: source)
    elif isinstance(source, EmbeddingCache):
        cache = source
    else:
        cache = EmbeddingCache(source)
    base = base_config or TrainConfig()

    root = np.random.default_rng(seed)
    run_seeds = root.integers(0, 2**63 - 1, size=n_runs)
    trials: list[TrialResult] = []
    for run in range(n_runs):
        rng = np.random.default_rng(run_seeds[run])
        hidden = int(rng.choice(np.asarray(space.hidden_dims)))
        lr = float(np.exp(rng.uniform(np.log(space.lr_range[0]), np.log(space.lr_range[1]))))
        wd = float(
            np.exp(rng.uniform(np.log(space.weight_decay_range[0]), np.log(space.weight_decay_range[1])))
        )
        schedule = str(rng.choice(np.asarray(space.schedules)))
        config = replace(base, lr=lr, weight_decay=wd, schedule=schedule, seed=int(run_seeds[run]) % 2**32)
        data = cache.get()
        result = train(data, config, hidden)
        trials.append(TrialResult(run=run, hidden=hidden, config=config, val_auroc=result.best_auroc))

    leaderboard = sorted(trials, key=lambda tr: (-tr.val_auroc, tr.hidden, tr.run))
    return TuneResult(best=leaderboard[0], leaderboard=leaderboard, extractions=cache.extractions)


def ratio_sample(
    data: LabeledCellSet, positive_class: int, ratio: int, seed: int
) -> LabeledCellSet:
    """All positives plus ratio * |positives| sampled negatives.

    When fewer negatives exist, every negative is taken and a warning is
    issued. Sampling is without replacement; output keeps input row order.
    """
    pos_idx = np.flatnonzero(data.labels == positive_class)
    neg_idx = np.flatnonzero(data.labels != positive_class)
    want = ratio * len(pos_idx)
    if want > len(neg_idx):
        warnings.warn(
            f"requested {want} negatives but only {len(neg_idx)} available; taking all",
            stacklevel=2,
        )
        chosen = neg_idx
    else:
        rng = np.random.default_rng(seed)
        chosen = rng.choice(neg_idx, size=want, replace=False)
    keep = np.sort(np.concatenate([pos_idx, chosen]))
    return data.subset(keep)


def stratified_fraction(data: LabeledCellSet, fraction: float, seed: int) -> LabeledCellSet:
    """Per-class sample of round(fraction * n_c) rows, without replacement."""
    if not 0 < fraction <= 1:
        raise FractionOutOfRange(f"fraction must be in (0, 1], got {fraction}")
    rng = np.random.default_rng(seed)
    keep_parts = []
    for c in np.unique(data.labels):
        idx = np.flatnonzero(data.labels == c)
        take = int(np.floor(fraction * len(idx) + 0.5))
        if take > 0:
            keep_parts.append(rng.choice(idx, size=take, replace=False))
    keep = np.sort(np.concatenate(keep_parts)) if keep_parts else np.array([], dtype=np.int64)
    return data.subset(keep)


_CHECKPOINT_ORDER = ("w1", "b1", "w2", "b2")


def save_checkpoint(path: str | Path, params: ClassifierParams, meta: dict) -> None:
    """Single-file checkpoint: u32 header length, JSON header, weight blobs."""
    header = dict(meta)
    header.update(
        {
            "dim": params.dim,
            "hidden": params.hidden,
            "n_classes": params.n_classes,
            "dropout_rate": params.dropout_rate,
            "tensors": list(_CHECKPOINT_ORDER),
        }
    )
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for key in _CHECKPOINT_ORDER:
            write_tensor_stream(f, params.tensors()[key])


def load_checkpoint(path: str | Path) -> tuple[ClassifierParams, dict]:
    with open(path, "rb") as f:
        (n,) = struct.unpack("<I", f.read(4))
        header = json.loads(f.read(n).decode("utf-8"))
        tensors = {key: read_tensor_stream(f) for key in header["tensors"]}
    params = ClassifierParams(
        w1=tensors["w1"],
        b1=tensors["b1"],
        w2=tensors["w2"],
        b2=tensors["b2"],
        dropout_rate=header.get("dropout_rate", 0.1),
    )
    return params, header


def write_history(path: str | Path, history: Iterable[EpochStats]) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["epoch", "train_loss", "val_auroc", "lr"])
        for row in history:
            writer.writerow([row.epoch, repr(row.train_loss), repr(row.val_auroc), repr(row.lr)])
