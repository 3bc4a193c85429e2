"""Linear softmax head over hashed features, trained with mini-batch Adam.

``RouterModel.featurize`` and ``RouterModel.predict_topk`` are the encoder
contract the pipeline relies on; a transformer encoder can replace this class
as long as it provides the same two methods and ``class_list``.
"""
from __future__ import annotations

import base64
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import sparse

from .features import FeatureConfig, FeatureVector, featurize

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class TrainingError(Exception):
    pass


class ModelFormatError(Exception):
    pass


@dataclass(frozen=True)
class TrainConfig:
    # the 1e-5 used for transformer fine-tuning crawls on a linear head
    learning_rate: float = 1e-3
    batch_size: int = 8
    epochs: int = 50
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    patience: int = 5

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")


@dataclass
class RouterModel:
    weights: np.ndarray
    bias: np.ndarray
    class_list: list[str]
    feature_config: FeatureConfig
    entity_vocabulary: list = field(default_factory=list)
    loss_trace: list[float] = field(default_factory=list)
    val_accuracy_trace: list[float] = field(default_factory=list)

    def __post_init__(self):
        if self.weights.shape[0] != len(self.class_list) or self.bias.shape != (len(self.class_list),):
            raise ValueError("weight/bias rows must match class_list")
        if not (np.all(np.isfinite(self.weights)) and np.all(np.isfinite(self.bias))):
            raise ValueError("non-finite model parameters")

    @property
    def dim(self) -> int:
        return self.weights.shape[1]

    def featurize(self, q_augmented: str, assignment) -> FeatureVector:
        return featurize(q_augmented, assignment, self.feature_config, self.entity_vocabulary)

    def logits(self, fv: FeatureVector | np.ndarray) -> np.ndarray:
        x = fv.dense() if isinstance(fv, FeatureVector) else np.asarray(fv, dtype=np.float64)
        return self.weights @ x + self.bias

    def predict_proba(self, fv) -> np.ndarray:
        return softmax(self.logits(fv))

    def predict_topk(self, fv, k: int = 1) -> list[tuple[str, float]]:
        return predict_topk(self, fv, k)

    # persistence -------------------------------------------------------

    def to_json(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "class_list": list(self.class_list),
            "feature_config": self.feature_config.to_json(),
            "entity_vocabulary": [list(e) if isinstance(e, (tuple, list)) else e for e in self.entity_vocabulary],
            "shape": list(self.weights.shape),
            "weights": _b64(self.weights),
            "bias": _b64(self.bias),
            "loss_trace": [float(x) for x in self.loss_trace],
            "val_accuracy_trace": [float(x) for x in self.val_accuracy_trace],
        }

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=1, sort_keys=True) + "\n", encoding="utf-8")

    @classmethod
    def from_json(cls, d: dict) -> "RouterModel":
        if d.get("format_version") != FORMAT_VERSION:
            raise ModelFormatError(f"model format {d.get('format_version')!r}, expected {FORMAT_VERSION}")
        rows, cols = d["shape"]
        vocab = [tuple(e) if isinstance(e, list) else e for e in d["entity_vocabulary"]]
        return cls(
            weights=_unb64(d["weights"]).reshape(rows, cols),
            bias=_unb64(d["bias"]),
            class_list=list(d["class_list"]),
            feature_config=FeatureConfig(**d["feature_config"]),
            entity_vocabulary=vocab,
            loss_trace=list(d.get("loss_trace", [])),
            val_accuracy_trace=list(d.get("val_accuracy_trace", [])),
        )

    @classmethod
    def load(cls, path: str | Path) -> "RouterModel":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f8").tobytes()).decode("ascii")


def _unb64(s: str) -> np.ndarray:
    return np.frombuffer(base64.b64decode(s), dtype="<f8").astype(np.float64)


def softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def log_softmax(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    m = z.max(axis=-1, keepdims=True)
    return z - m - np.log(np.exp(z - m).sum(axis=-1, keepdims=True))


def predict_topk(model: RouterModel, fv, k: int = 1) -> list[tuple[str, float]]:
    """Classes by descending probability, ties in ``class_list`` order."""
    if k < 1:
        raise ValueError("k must be >= 1")
    p = model.predict_proba(fv)
    order = np.argsort(-p, kind="stable")[: min(k, len(p))]
    return [(model.class_list[i], float(p[i])) for i in order]


# ---------------------------------------------------------------------------
# loss and gradient


def cross_entropy(weights, bias, X, y) -> float:
    """Mean cross-entropy of a batch; ``X`` dense or CSR, ``y`` class indices."""
    z = np.asarray(X @ weights.T) + bias
    return float(-log_softmax(z)[np.arange(len(y)), y].mean())


def cross_entropy_grad(weights, bias, X, y):
    z = np.asarray(X @ weights.T) + bias
    p = softmax(z)
    p[np.arange(len(y)), y] -= 1.0
    p /= len(y)
    gw = np.asarray(X.T @ p).T if sparse.issparse(X) else p.T @ X
    return gw, p.sum(axis=0)


def _stack(vectors: Sequence[FeatureVector]) -> sparse.csr_matrix:
    d = vectors[0].dim
    rows, cols, vals = [], [], []
    for r, fv in enumerate(vectors):
        if fv.dim != d:
            raise ValueError(f"feature dimension mismatch: {fv.dim} vs {d}")
        nz = np.flatnonzero(fv.entity_bits)
        c = np.concatenate([fv.text_index, fv.d_t + nz])
        v = np.concatenate([fv.text_counts, fv.entity_bits[nz]])
        rows.append(np.full(len(c), r))
        cols.append(c)
        vals.append(v)
    return sparse.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(len(vectors), d)
    )


def _as_matrix(samples) -> sparse.csr_matrix | np.ndarray:
    if isinstance(samples[0], FeatureVector):
        return _stack(samples)
    return np.asarray(samples, dtype=np.float64)


def train(
    training_pairs: Sequence[tuple[FeatureVector | np.ndarray, str]],
    config: TrainConfig = TrainConfig(),
    feature_config: FeatureConfig | None = None,
    entity_vocabulary: Sequence = (),
    validation_pairs: Sequence[tuple] = (),
    class_list: Sequence[str] | None = None,
) -> RouterModel:
    """Mini-batch Adam on mean cross-entropy, zero-initialised, seeded shuffles.

    ``loss_trace`` holds the full training-set loss after each epoch. With
    validation pairs, training stops after ``patience`` epochs without a
    validation-accuracy gain and the best weights are kept.
    """
    if not training_pairs:
        raise TrainingError("no training data")
    labels = [c for _, c in training_pairs]
    classes = sorted(set(class_list or labels))
    if len(classes) < 2:
        raise TrainingError(f"need at least two classes, got {classes}")
    absent = set(classes) - set(labels)
    if absent:
        raise TrainingError(f"classes without training examples: {sorted(absent)}")
    cix = {c: i for i, c in enumerate(classes)}
    X = _as_matrix([x for x, _ in training_pairs])
    y = np.array([cix[c] for c in labels])
    Xv = yv = None
    if validation_pairs:
        keep = [(x, c) for x, c in validation_pairs if c in cix]
        if keep:
            Xv = _as_matrix([x for x, _ in keep])
            yv = np.array([cix[c] for _, c in keep])
    if feature_config is None:
        first = training_pairs[0][0]
        feature_config = FeatureConfig(d_t=first.d_t) if isinstance(first, FeatureVector) else FeatureConfig(d_t=X.shape[1])

    n, d = X.shape
    W = np.zeros((len(classes), d))
    b = np.zeros(len(classes))
    mW, vW = np.zeros_like(W), np.zeros_like(W)
    mb, vb = np.zeros_like(b), np.zeros_like(b)
    b1, b2, eps, lr = config.beta1, config.beta2, config.eps, config.learning_rate
    rng = np.random.default_rng(config.seed)
    t = 0
    trace, val_trace = [], []
    best = (-1.0, W.copy(), b.copy())
    stale = 0
    for epoch in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = perm[start:start + config.batch_size]
            Xb = X[idx]
            gW, gb = cross_entropy_grad(W, b, Xb, y[idx])
            t += 1
            mW = b1 * mW + (1 - b1) * gW
            vW = b2 * vW + (1 - b2) * gW * gW
            mb = b1 * mb + (1 - b1) * gb
            vb = b2 * vb + (1 - b2) * gb * gb
            c1, c2 = 1 - b1**t, 1 - b2**t
            W -= lr * (mW / c1) / (np.sqrt(vW / c2) + eps)
            b -= lr * (mb / c1) / (np.sqrt(vb / c2) + eps)
        loss = cross_entropy(W, b, X, y)
        if not math.isfinite(loss):
            raise TrainingError(
                f"non-finite loss at epoch {epoch} (step {t}); max|W|={np.abs(W).max():.3g}, lr={lr}"
            )
        trace.append(loss)
        if Xv is not None:
            acc = float((np.argmax(np.asarray(Xv @ W.T) + b, axis=1) == yv).mean())
            val_trace.append(acc)
            if acc > best[0]:
                best, stale = (acc, W.copy(), b.copy()), 0
            else:
                stale += 1
                if config.patience and stale >= config.patience:
                    log.info("early stop after epoch %d (best val acc %.4f)", epoch, best[0])
                    break
    if Xv is not None:
        W, b = best[1], best[2]
    return RouterModel(W, b, classes, feature_config, list(entity_vocabulary), trace, val_trace)


def gradient_check(model: RouterModel, sample: tuple, epsilon: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Walks every weight and bias coordinate, so keep the model small.
    """
    if not 1e-7 <= epsilon <= 1e-3:
        raise ValueError("epsilon must lie in [1e-7, 1e-3]")
    x, label = sample
    x = x.dense() if isinstance(x, FeatureVector) else np.asarray(x, dtype=np.float64)
    X = x[None, :]
    y = np.array([model.class_list.index(label) if isinstance(label, str) else int(label)])
    W, b = model.weights.copy(), model.bias.copy()
    gW, gb = cross_entropy_grad(W, b, X, y)
    worst = 0.0

    def rel(a, n):
        scale = max(abs(a), abs(n))
        return abs(a - n) / scale if scale > 1e-10 else abs(a - n)

    for param, grad in ((W, gW), (b, gb)):
        flat, gflat = param.reshape(-1), grad.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + epsilon
            up = cross_entropy(W, b, X, y)
            flat[i] = orig - epsilon
            down = cross_entropy(W, b, X, y)
            flat[i] = orig
            worst = max(worst, rel(gflat[i], (up - down) / (2 * epsilon)))
    return worst
