"""
Adaptive confidence weighting for score-level fusion of per-modality
embeddings.

Each modality owns a small head mapping a unit-normalised embedding to a
confidence c in (0, 1):

    c = sigmoid(w2 . relu(W1 x + b1) + b2)

Training interpolates the cosine logits of a frozen prototype classifier
towards the one-hot label by (1 - c), scores the result with a tempered
cross-entropy and adds lambda * -log(c). At inference the per-modality
cosine similarities are weighted by their confidences and summed.
"""

import logging
import os
import struct
from dataclasses import dataclass, field
from typing import Dict, List, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.special import expit, logsumexp

from .embedding_service import Embedding, EmbeddingSet, unit_rows
from .errors import EmbeddingFormatError, ModalityMissingError

ACW1_MAGIC = b"ACW1"
_ACW1_HEADER = struct.Struct("<4sII")

# keeps c strictly inside (0, 1) once the sigmoid saturates in float64
_C_EPS = 1e-12

# confidence-loss budget used when the budget is switched on without a value
DEFAULT_BUDGET = 0.3


class AcwTrainConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True, extra="forbid")

    lam: float = Field(0.1, ge=0, alias="lambda")
    lr: float = Field(0.006, ge=0)
    batch: int = Field(384, gt=0)
    epochs: int = Field(20, ge=0)
    tau: float = Field(8.0, gt=0)
    budget: Optional[float] = Field(None, gt=0)
    hidden: int = Field(64, gt=0)
    train_prototypes: bool = False

    @field_validator("budget", mode="before")
    @classmethod
    def _budget_switch(cls, value):
        # "budget": true in a config file means the default budget
        if value is True:
            return DEFAULT_BUDGET
        if value is False:
            return None
        return value


@dataclass(eq=False)
class ConfidenceHead:
    W1: np.ndarray  # (H, D)
    b1: np.ndarray  # (H,)
    w2: np.ndarray  # (H,)
    b2: float

    @property
    def dim(self) -> int:
        return self.W1.shape[1]

    @property
    def hidden(self) -> int:
        return self.W1.shape[0]

    @classmethod
    def zeros(cls, dim: int, hidden: int = 64) -> "ConfidenceHead":
        return cls(np.zeros((hidden, dim)), np.zeros(hidden), np.zeros(hidden), 0.0)

    @classmethod
    def initialize(cls, dim: int, hidden: int, rng: np.random.Generator) -> "ConfidenceHead":
        """Uniform weights scaled by 1/sqrt(fan-in) and zero biases, so confidences start near 0.5."""
        W1 = rng.uniform(-1.0, 1.0, size=(hidden, dim)) / np.sqrt(dim)
        w2 = rng.uniform(-1.0, 1.0, size=hidden) / np.sqrt(hidden)
        return cls(W1, np.zeros(hidden), w2, 0.0)

    def copy(self) -> "ConfidenceHead":
        return ConfidenceHead(self.W1.copy(), self.b1.copy(), self.w2.copy(), float(self.b2))

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    @classmethod
    def from_flat(cls, values: np.ndarray, dim: int, hidden: int) -> "ConfidenceHead":
        values = np.asarray(values, dtype=np.float64)
        n_w1 = hidden * dim
        return cls(
            values[:n_w1].reshape(hidden, dim).copy(),
            values[n_w1:n_w1 + hidden].copy(),
            values[n_w1 + hidden:n_w1 + 2 * hidden].copy(),
            float(values[n_w1 + 2 * hidden]),
        )


@dataclass(frozen=True, eq=False)
class ClassPrototypes:
    """Cosine classifier rows; row i belongs to identity labels[i]."""

    matrix: np.ndarray  # (C, D), unit rows
    labels: np.ndarray  # (C,)
    frozen: bool = True  # marks rows that train() may have moved

    def __post_init__(self):
        matrix = unit_rows(self.matrix)
        labels = np.asarray(self.labels, dtype=np.int64)
        if matrix.ndim != 2 or labels.shape != (matrix.shape[0],):
            raise ValueError(f"prototype matrix {matrix.shape} and labels {labels.shape} disagree")
        if len(np.unique(labels)) != len(labels):
            raise ValueError("prototype labels must be unique")
        object.__setattr__(self, "matrix", matrix)
        object.__setattr__(self, "labels", labels)

    @property
    def n_classes(self) -> int:
        return self.matrix.shape[0]

    @property
    def dim(self) -> int:
        return self.matrix.shape[1]

    @classmethod
    def from_neutral(cls, gallery: EmbeddingSet, frozen: bool = True) -> "ClassPrototypes":
        """One row per identity from its first (neutral) sample, rows sorted by label."""
        labels, first = np.unique(gallery.labels, return_index=True)
        return cls(gallery.vectors[first], labels, frozen)

    def rows_for(self, labels: np.ndarray) -> np.ndarray:
        labels = np.asarray(labels, dtype=np.int64)
        order = np.argsort(self.labels)
        pos = np.searchsorted(self.labels, labels, sorter=order)
        pos = np.clip(pos, 0, len(order) - 1)
        rows = order[pos]
        missing = self.labels[rows] != labels
        if np.any(missing):
            raise ValueError(f"labels without a prototype: {sorted(set(labels[missing].tolist()))[:10]}")
        return rows


class LossTerm(NamedTuple):
    z: np.ndarray  # cosine logits over classes
    y: int  # target row
    c: float  # confidence


@dataclass(eq=False)
class AcwBatch:
    embeddings: np.ndarray  # (N, D)
    logits: np.ndarray  # (N, C)
    targets: np.ndarray  # (N,) prototype rows


@dataclass(eq=False)
class HeadGradients:
    W1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: float
    prototypes: Optional[np.ndarray] = None

    def flat(self) -> np.ndarray:
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])


class EpochStats(BaseModel):
    epoch: int
    loss: float
    lam: float
    mean_confidence: Dict[str, float]


class TrainingHistory(BaseModel):
    epochs: List[EpochStats] = Field(default_factory=list)

    def __len__(self) -> int:
        return len(self.epochs)

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self) -> str:
        modalities = list(self.epochs[0].mean_confidence) if self.epochs else []
        lines = [",".join(["epoch", "loss", "lambda"] + [f"confidence_{m}" for m in modalities])]
        for e in self.epochs:
            values = [str(e.epoch), repr(e.loss), repr(e.lam)] + [repr(e.mean_confidence[m]) for m in modalities]
            lines.append(",".join(values))
        return "\n".join(lines) + "\n"


@dataclass(eq=False)
class AcwTrainResult:
    heads: Dict[str, ConfidenceHead]
    prototypes: Dict[str, ClassPrototypes]
    history: TrainingHistory = field(default_factory=TrainingHistory)


@dataclass(eq=False)
class FusionResult:
    similarities: Dict[str, np.ndarray]
    confidences: Dict[str, float]
    fused: np.ndarray
    prediction: int  # row in the gallery
    label: int  # identity label of that row


def _vector(embedding) -> np.ndarray:
    return embedding.vector if isinstance(embedding, Embedding) else np.asarray(embedding, dtype=np.float64)


def _forward(head: ConfidenceHead, X: np.ndarray):
    x_hat = unit_rows(X)
    pre = x_hat @ head.W1.T + head.b1
    h = np.maximum(pre, 0.0)
    a = h @ head.w2 + head.b2
    c = np.clip(expit(a), _C_EPS, 1.0 - _C_EPS)
    return c, x_hat, pre, h


def confidence_batch(head: ConfidenceHead, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != head.dim:
        raise ValueError(f"embedding dimension {X.shape[1]} does not match head dimension {head.dim}")
    return _forward(head, X)[0]


def confidence(head: ConfidenceHead, embedding) -> float:
    return float(confidence_batch(head, _vector(embedding)[None, :])[0])


def cosine_logits_batch(prototypes: ClassPrototypes, X: np.ndarray) -> np.ndarray:
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if X.shape[1] != prototypes.dim:
        raise ValueError(f"embedding dimension {X.shape[1]} does not match prototype dimension {prototypes.dim}")
    return unit_rows(X) @ prototypes.matrix.T


def cosine_logits(prototypes: ClassPrototypes, embedding) -> np.ndarray:
    return cosine_logits_batch(prototypes, _vector(embedding)[None, :])[0]


def interpolate_logits(z: np.ndarray, y: int, c: float) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    if not 0.0 <= c <= 1.0:
        raise ValueError(f"confidence must lie in [0, 1], got {c}")
    one_hot = np.zeros_like(z)
    one_hot[y] = 1.0
    return c * z + (1.0 - c) * one_hot


def task_loss(z_prime: np.ndarray, y: int, tau: float) -> float:
    if not tau > 0:
        raise ValueError(f"tau must be > 0, got {tau}")
    scaled = tau * np.asarray(z_prime, dtype=np.float64)
    return float(logsumexp(scaled) - scaled[y])


def confidence_loss(c: float) -> float:
    if not 0.0 < c <= 1.0:
        raise ValueError(f"confidence must lie in (0, 1], got {c}")
    return float(-np.log(c))


def total_loss(terms: Sequence[LossTerm], lam: float, tau: float) -> float:
    if not terms:
        raise ValueError("total_loss needs at least one modality")
    return sum(
        task_loss(interpolate_logits(t.z, t.y, t.c), t.y, tau) + lam * confidence_loss(t.c) for t in terms
    )


def loss_and_gradients(
    head: ConfidenceHead, batch: AcwBatch, lam: float, tau: float, prototypes: Optional[ClassPrototypes] = None
) -> tuple[float, float, np.ndarray, HeadGradients]:
    """Mean total loss over the batch, mean confidence loss, confidences and exact gradients.

    Pass `prototypes` to also get the gradient w.r.t. the classifier rows.
    """
    n = batch.embeddings.shape[0]
    c, x_hat, pre, h = _forward(head, batch.embeddings)
    rows = np.arange(n)
    one_hot = np.zeros_like(batch.logits)
    one_hot[rows, batch.targets] = 1.0

    z_prime = c[:, None] * batch.logits + (1.0 - c)[:, None] * one_hot
    scaled = tau * z_prime
    log_p = scaled - logsumexp(scaled, axis=1, keepdims=True)
    task = -log_p[rows, batch.targets]
    conf = -np.log(c)
    loss = float(np.mean(task + lam * conf))

    residual = np.exp(log_p) - one_hot
    d_c = tau * np.sum(residual * (batch.logits - one_hot), axis=1)
    # d(-log c)/da = c - 1
    d_a = (c * (1.0 - c) * d_c - lam * (1.0 - c)) / n

    d_h = d_a[:, None] * head.w2[None, :]
    d_pre = d_h * (pre > 0)
    grads = HeadGradients(
        W1=d_pre.T @ x_hat,
        b1=d_pre.sum(axis=0),
        w2=h.T @ d_a,
        b2=float(d_a.sum()),
    )
    if prototypes is not None:
        d_z = (c * tau)[:, None] * residual / n
        grads.prototypes = d_z.T @ x_hat
    return loss, float(np.mean(conf)), c, grads


def backward(head: ConfidenceHead, batch: AcwBatch, lam: float, tau: float) -> HeadGradients:
    return loss_and_gradients(head, batch, lam, tau)[3]


def batch_loss(head: ConfidenceHead, batch: AcwBatch, lam: float, tau: float) -> float:
    return loss_and_gradients(head, batch, lam, tau)[0]


def train(
    train_sets: Mapping[str, EmbeddingSet],
    prototypes: Mapping[str, ClassPrototypes],
    config: AcwTrainConfig,
    seed: int,
) -> AcwTrainResult:
    modalities = list(train_sets)
    if not modalities:
        raise ValueError("train needs at least one modality")
    first = train_sets[modalities[0]]
    if len(first) == 0:
        raise ValueError("empty training set")
    for modality in modalities:
        if modality not in prototypes:
            raise ModalityMissingError(modality, "no prototypes")
        current = train_sets[modality]
        if len(current) != len(first) or not np.array_equal(current.labels, first.labels):
            raise ValueError(f"modality '{modality}' is not sample-aligned with '{modalities[0]}'")
        if current.dim != prototypes[modality].dim:
            raise ValueError(f"modality '{modality}': embeddings and prototypes differ in dimension")

    rng = np.random.default_rng(seed)
    heads = {m: ConfidenceHead.initialize(train_sets[m].dim, config.hidden, rng) for m in modalities}
    protos = dict(prototypes)
    targets = {m: protos[m].rows_for(first.labels) for m in modalities}
    logits = {m: cosine_logits_batch(protos[m], train_sets[m].vectors) for m in modalities}

    trainable = config.train_prototypes
    n = len(first)
    lam = config.lam
    history = TrainingHistory()
    logging.info(f"Training ACW on {n} samples, modalities {modalities}, {config.epochs} epochs")
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        epoch_loss = 0.0
        conf_sum = {m: 0.0 for m in modalities}
        for start in range(0, n, config.batch):
            idx = order[start:start + config.batch]
            batch_total = 0.0
            batch_conf_loss = 0.0
            for m in modalities:
                batch = AcwBatch(
                    embeddings=train_sets[m].vectors[idx],
                    logits=cosine_logits_batch(protos[m], train_sets[m].vectors[idx]) if trainable else logits[m][idx],
                    targets=targets[m][idx],
                )
                loss, conf_loss, c, grads = loss_and_gradients(
                    heads[m], batch, lam, config.tau, protos[m] if trainable else None
                )
                batch_total += loss
                batch_conf_loss += conf_loss
                conf_sum[m] += float(c.sum())

                head = heads[m]
                head.W1 -= config.lr * grads.W1
                head.b1 -= config.lr * grads.b1
                head.w2 -= config.lr * grads.w2
                head.b2 -= config.lr * grads.b2
                if trainable and config.lr > 0:
                    # projected step: rows stay unit-norm
                    protos[m] = ClassPrototypes(
                        protos[m].matrix - config.lr * grads.prototypes, protos[m].labels, frozen=False
                    )
            epoch_loss += batch_total * len(idx)
            if config.budget is not None:
                if batch_conf_loss / len(modalities) > config.budget:
                    lam *= 1.01
                else:
                    lam /= 1.01

        stats = EpochStats(
            epoch=epoch,
            loss=epoch_loss / n,
            lam=lam,
            mean_confidence={m: conf_sum[m] / n for m in modalities},
        )
        history.epochs.append(stats)
        confidences = ", ".join(f"{m}={v:.3f}" for m, v in stats.mean_confidence.items())
        logging.info(f"Epoch {epoch}: loss={stats.loss:.4f} lambda={lam:.4f} confidence {confidences}")
    return AcwTrainResult(heads=heads, prototypes=protos, history=history)


def fuse(similarities: Sequence[np.ndarray], confidences: Sequence[float]) -> np.ndarray:
    if len(similarities) == 0:
        raise ValueError("fuse needs at least one modality")
    if len(similarities) != len(confidences):
        raise ValueError(f"{len(similarities)} similarity vectors but {len(confidences)} confidences")
    n_classes = np.shape(similarities[0])[-1]
    fused = np.zeros(np.shape(similarities[0]))
    for s, c in zip(similarities, confidences):
        s = np.asarray(s, dtype=np.float64)
        if s.shape[-1] != n_classes:
            raise ValueError(f"class count mismatch: {s.shape[-1]} vs {n_classes}")
        c = np.asarray(c, dtype=np.float64)
        if c.ndim:
            c = c[..., None]
        fused = fused + c * s
    return fused


def identify(
    probe: Mapping[str, object],
    gallery: Mapping[str, ClassPrototypes],
    heads: Mapping[str, ConfidenceHead],
) -> FusionResult:
    """Fuses whichever modalities the probe carries; absent ones simply drop out."""
    if not probe:
        raise ValueError("probe carries no modality")
    labels = None
    similarities: dict[str, np.ndarray] = {}
    confidences: dict[str, float] = {}
    for modality, embedding in probe.items():
        if modality not in gallery:
            raise ModalityMissingError(modality, "no gallery")
        if modality not in heads:
            raise ModalityMissingError(modality, "no confidence head")
        if labels is None:
            labels = gallery[modality].labels
        elif not np.array_equal(labels, gallery[modality].labels):
            raise ValueError("gallery modalities must list the same identities in the same order")
        similarities[modality] = cosine_logits(gallery[modality], embedding)
        confidences[modality] = confidence(heads[modality], embedding)

    fused = fuse(list(similarities.values()), list(confidences.values()))
    prediction = int(np.argmax(fused))  # first maximum: lowest index wins ties
    return FusionResult(similarities, confidences, fused, prediction, int(labels[prediction]))


def save_head(head: ConfidenceHead, path: str | os.PathLike) -> None:
    with open(path, "wb") as f:
        f.write(_ACW1_HEADER.pack(ACW1_MAGIC, head.dim, head.hidden))
        f.write(head.flat().astype("<f8").tobytes())
    logging.info(f"Saved confidence head {path} (D={head.dim}, H={head.hidden})")


def load_head(path: str | os.PathLike) -> ConfidenceHead:
    with open(path, "rb") as f:
        data = f.read()
    if len(data) < _ACW1_HEADER.size:
        raise EmbeddingFormatError(f"{path}: too short for an ACW1 header")
    magic, dim, hidden = _ACW1_HEADER.unpack_from(data, 0)
    if magic != ACW1_MAGIC:
        raise EmbeddingFormatError(f"{path}: bad magic {magic!r}")
    n_params = hidden * dim + 2 * hidden + 1
    if len(data) != _ACW1_HEADER.size + 8 * n_params:
        raise EmbeddingFormatError(f"{path}: payload does not hold {n_params} parameters")
    values = np.frombuffer(data, dtype="<f8", offset=_ACW1_HEADER.size)
    if not np.all(np.isfinite(values)):
        raise EmbeddingFormatError(f"{path}: non-finite parameters")
    return ConfidenceHead.from_flat(values, dim, hidden)
