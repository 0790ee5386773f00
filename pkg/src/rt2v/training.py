"""Multi-positive contrastive training of the projection heads.

Each mined example ties one sub-query text to the components of its
ground-truth video (positives) and sampled components of other videos
(negatives). The loss is the negative log of the positive share of the
softmax mass at a fixed temperature, summed over examples; heads are
optimized by plain gradient descent with analytic gradients that include
the normalization Jacobian.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np
from scipy.special import logsumexp
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from .embedding import EmbeddingProvider, ProjectionHead
from .errors import TrainingDivergedError
from .index import ComponentDescriptor

__all__ = [
    "ComponentRef",
    "TrainingExample",
    "TrainingDataset",
    "TrainConfig",
    "TrainResult",
    "nce_loss",
    "batch_loss_and_gradients",
    "train_heads",
    "mine_examples",
    "ContrastiveHeadTrainer",
]

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class ComponentRef:
    video_id: str
    kind: str
    key: str


@dataclass(frozen=True)
class TrainingExample:
    subquery_text: str
    positives: tuple[ComponentRef, ...]
    negatives: tuple[ComponentRef, ...]


@dataclass(frozen=True)
class TrainingDataset:
    """Examples plus the catalog resolving component refs to rendered text."""

    examples: tuple[TrainingExample, ...]
    texts: Mapping[ComponentRef, str]

    def __post_init__(self):
        for i, ex in enumerate(self.examples):
            if not ex.positives:
                raise ValueError(f"example {i} has no positives")
            overlap = set(ex.positives) & set(ex.negatives)
            if overlap:
                raise ValueError(f"example {i} reuses refs as both signs: {overlap}")
            for ref in (*ex.positives, *ex.negatives):
                if ref not in self.texts:
                    raise ValueError(f"example {i} references unknown component {ref}")


@dataclass(frozen=True)
class TrainConfig:
    temperature: float = 0.07
    learning_rate: float = 0.01
    epochs: int = 10
    batch_size: int = 8
    seed: int = 0
    init_noise_scale: float = 1e-3

    def __post_init__(self):
        if self.temperature <= 0:
            raise ValueError(f"temperature={self.temperature} must be positive")
        if self.learning_rate <= 0:
            raise ValueError("learning_rate must be positive")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch_size >= 1")

    def to_dict(self) -> dict:
        return {
            "temperature": self.temperature,
            "learning_rate": self.learning_rate,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "seed": self.seed,
            "init_noise_scale": self.init_noise_scale,
        }


@dataclass(frozen=True)
class TrainResult:
    query_head: ProjectionHead
    twin_head: ProjectionHead
    loss_trace: tuple[float, ...]  # mean per-example loss, one entry per epoch
    config: TrainConfig


def nce_loss(query_vec: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
             temperature: float = 0.07) -> float:
    """Multi-positive InfoNCE on projected unit vectors.

    -log of the positive similarity mass over the total mass:
    log(sum_all exp(s/t)) - log(sum_pos exp(s/t)). Non-negative, and zero
    only when there are no negatives.
    """
    if temperature <= 0:
        raise ValueError(f"temperature={temperature} must be positive")
    q = np.asarray(query_vec, dtype=np.float64)
    pos = np.atleast_2d(np.asarray(positives, dtype=np.float64))
    neg = np.asarray(negatives, dtype=np.float64).reshape(-1, q.shape[0]) \
        if np.asarray(negatives).size else np.zeros((0, q.shape[0]))
    if pos.size == 0:
        raise ValueError("at least one positive is required")
    pos_logits = pos @ q / temperature
    neg_logits = neg @ q / temperature
    all_logits = np.concatenate([pos_logits, neg_logits])
    if not np.all(np.isfinite(all_logits)):
        raise ValueError("non-finite similarity in loss input")
    return float(logsumexp(all_logits) - logsumexp(pos_logits))


@dataclass(frozen=True)
class ResolvedExample:
    """Raw (pre-projection) unit vectors for one training example."""

    query_vec: np.ndarray       # (d,)
    positive_vecs: np.ndarray   # (P, d)
    negative_vecs: np.ndarray   # (N, d)


def _normalize_backprop(grad_out: np.ndarray, unit: np.ndarray, norm: float) -> np.ndarray:
    # d/dz of z/||z|| applied to grad_out, with unit = z/||z||.
    return (grad_out - float(unit @ grad_out) * unit) / norm


def batch_loss_and_gradients(batch: Sequence[ResolvedExample],
                             query_head: ProjectionHead,
                             twin_head: ProjectionHead,
                             temperature: float = 0.07,
                             ) -> tuple[float, np.ndarray, np.ndarray]:
    """Summed batch loss and its gradients w.r.t. both head matrices."""
    if temperature <= 0:
        raise ValueError(f"temperature={temperature} must be positive")
    d_wq = np.zeros_like(query_head.weights)
    d_wt = np.zeros_like(twin_head.weights)
    total = 0.0
    for ex in batch:
        u = np.asarray(ex.query_vec, dtype=np.float64)
        v_pos = np.atleast_2d(np.asarray(ex.positive_vecs, dtype=np.float64))
        v_neg = np.asarray(ex.negative_vecs, dtype=np.float64)
        if v_neg.size == 0:
            v_neg = np.zeros((0, u.shape[0]))
        v_neg = np.atleast_2d(v_neg)
        if v_pos.shape[0] == 0:
            raise ValueError("at least one positive is required")

        z_q = query_head.weights @ u
        nq = float(np.linalg.norm(z_q))
        z_p = v_pos @ twin_head.weights.T
        z_n = v_neg @ twin_head.weights.T
        np_norms = np.linalg.norm(z_p, axis=1)
        nn_norms = np.linalg.norm(z_n, axis=1) if len(z_n) else np.zeros(0)
        if nq == 0.0 or np.any(np_norms == 0.0) or (len(z_n) and np.any(nn_norms == 0.0)):
            raise ValueError("projection collapsed a vector to zero")
        q = z_q / nq
        p = z_p / np_norms[:, None]
        n = z_n / nn_norms[:, None] if len(z_n) else z_n

        pos_logits = p @ q / temperature
        neg_logits = n @ q / temperature if len(n) else np.zeros(0)
        all_logits = np.concatenate([pos_logits, neg_logits])
        if not np.all(np.isfinite(all_logits)):
            raise ValueError("non-finite similarity in loss input")
        log_all = logsumexp(all_logits)
        log_pos = logsumexp(pos_logits)
        total += float(log_all - log_pos)

        # dL/d logit: softmax over all minus (for positives) softmax over positives.
        g_pos = np.exp(pos_logits - log_all) - np.exp(pos_logits - log_pos)
        g_neg = np.exp(neg_logits - log_all) if len(n) else np.zeros(0)

        grad_q = (g_pos @ p + (g_neg @ n if len(n) else 0.0)) / temperature
        d_wq += np.outer(_normalize_backprop(grad_q, q, nq), u)

        for i in range(p.shape[0]):
            grad_p = (g_pos[i] / temperature) * q
            d_wt += np.outer(_normalize_backprop(grad_p, p[i], float(np_norms[i])), v_pos[i])
        for i in range(n.shape[0]):
            grad_n = (g_neg[i] / temperature) * q
            d_wt += np.outer(_normalize_backprop(grad_n, n[i], float(nn_norms[i])), v_neg[i])
    return total, d_wq, d_wt


class _TextVectors:
    """Embeds unique texts once and serves them by text."""

    def __init__(self, provider: EmbeddingProvider, batch_size: int = 64):
        self._provider = provider
        self._batch_size = batch_size
        self._cache: dict[str, np.ndarray] = {}

    def warm(self, texts: Sequence[str]) -> None:
        fresh = []
        seen = set()
        for text in texts:
            if text not in self._cache and text not in seen:
                seen.add(text)
                fresh.append(text)
        for start in range(0, len(fresh), self._batch_size):
            chunk = fresh[start:start + self._batch_size]
            rows = self._provider.embed_texts(chunk)
            for text, row in zip(chunk, rows):
                self._cache[text] = row

    def __getitem__(self, text: str) -> np.ndarray:
        return self._cache[text]


def _resolve(dataset: TrainingDataset, vectors: _TextVectors,
             example: TrainingExample) -> ResolvedExample:
    return ResolvedExample(
        query_vec=vectors[example.subquery_text],
        positive_vecs=np.stack([vectors[dataset.texts[r]] for r in example.positives]),
        negative_vecs=(np.stack([vectors[dataset.texts[r]] for r in example.negatives])
                       if example.negatives else np.zeros((0, vectors[example.subquery_text].shape[0]))),
    )


def train_heads(dataset: TrainingDataset, provider: EmbeddingProvider,
                config: TrainConfig | None = None) -> TrainResult:
    """Gradient-descend both heads from identity plus seeded noise.

    Deterministic for a fixed (dataset, provider, config): the same seed
    yields byte-identical serialized heads. Zero epochs returns the
    initialization untouched. Non-finite loss aborts with the step index.
    """
    cfg = config or TrainConfig()
    if not dataset.examples:
        raise ValueError("training dataset is empty")
    dim = provider.dim
    rng = np.random.default_rng(cfg.seed)
    w_q = np.eye(dim) + cfg.init_noise_scale * rng.standard_normal((dim, dim))
    w_t = np.eye(dim) + cfg.init_noise_scale * rng.standard_normal((dim, dim))

    vectors = _TextVectors(provider)
    vectors.warm([ex.subquery_text for ex in dataset.examples])
    vectors.warm([dataset.texts[r] for ex in dataset.examples
                  for r in (*ex.positives, *ex.negatives)])

    trace: list[float] = []
    step = 0
    n = len(dataset.examples)
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        epoch_loss = 0.0
        for start in range(0, n, cfg.batch_size):
            batch_idx = order[start:start + cfg.batch_size]
            batch = [_resolve(dataset, vectors, dataset.examples[i]) for i in batch_idx]
            try:
                loss, d_wq, d_wt = batch_loss_and_gradients(
                    batch, ProjectionHead(w_q), ProjectionHead(w_t), cfg.temperature)
            except ValueError as exc:
                # Collapsed or non-finite activations mid-run are divergence,
                # not a caller mistake.
                raise TrainingDivergedError(step) from exc
            if not np.isfinite(loss):
                raise TrainingDivergedError(step)
            scale = cfg.learning_rate / len(batch)
            w_q = w_q - scale * d_wq
            w_t = w_t - scale * d_wt
            if not (np.all(np.isfinite(w_q)) and np.all(np.isfinite(w_t))):
                raise TrainingDivergedError(step)
            epoch_loss += loss
            step += 1
        trace.append(epoch_loss / n)
    return TrainResult(ProjectionHead(w_q), ProjectionHead(w_t), tuple(trace), cfg)


def mine_examples(subqueries_by_query: Mapping[str, Sequence[str]],
                  gt_video_by_query: Mapping[str, str],
                  descriptors: Sequence[ComponentDescriptor],
                  negatives_per_positive: int = 8,
                  seed: int = 0) -> TrainingDataset:
    """Mine sub-query/component pairs from benchmark ground truth.

    Every component of the ground-truth video is a positive for each of
    the query's sub-queries; negatives are sampled uniformly without
    replacement from the other videos' components.
    """
    texts: dict[ComponentRef, str] = {}
    by_video: dict[str, list[ComponentRef]] = {}
    for desc in descriptors:
        ref = ComponentRef(desc.video_id, desc.kind, desc.key)
        texts[ref] = desc.rendered_text
        by_video.setdefault(desc.video_id, []).append(ref)

    rng = np.random.default_rng(seed)
    examples: list[TrainingExample] = []
    for query_id in sorted(subqueries_by_query):
        gt = gt_video_by_query[query_id]
        positives = tuple(by_video.get(gt, ()))
        if not positives:
            raise ValueError(f"query {query_id!r}: ground-truth video {gt!r} has no components")
        pool = [ref for vid in sorted(by_video) if vid != gt for ref in by_video[vid]]
        for text in subqueries_by_query[query_id]:
            want = min(len(pool), negatives_per_positive * len(positives))
            picked = rng.choice(len(pool), size=want, replace=False) if want else []
            negatives = tuple(pool[i] for i in sorted(int(i) for i in picked))
            examples.append(TrainingExample(text, positives, negatives))
    return TrainingDataset(tuple(examples), texts)


class ContrastiveHeadTrainer(BaseEstimator):
    """Estimator facade over train_heads.

    fit(dataset) learns query_head_ and twin_head_ and records
    loss_trace_; the provider defaults to the hermetic hashing provider
    at the configured dim.
    """

    def __init__(self, temperature: float = 0.07, learning_rate: float = 0.01,
                 epochs: int = 10, batch_size: int = 8, seed: int = 0,
                 provider: EmbeddingProvider | None = None, dim: int = 256):
        self.temperature = temperature
        self.learning_rate = learning_rate
        self.epochs = epochs
        self.batch_size = batch_size
        self.seed = seed
        self.provider = provider
        self.dim = dim

    def fit(self, dataset: TrainingDataset, y=None) -> "ContrastiveHeadTrainer":
        from .embedding import HashingProvider

        provider = self.provider or HashingProvider(self.dim)
        config = TrainConfig(temperature=self.temperature,
                             learning_rate=self.learning_rate,
                             epochs=self.epochs, batch_size=self.batch_size,
                             seed=self.seed)
        result = train_heads(dataset, provider, config)
        self.query_head_ = result.query_head
        self.twin_head_ = result.twin_head
        self.loss_trace_ = result.loss_trace
        return self

    def heads(self) -> tuple[ProjectionHead, ProjectionHead]:
        if not hasattr(self, "query_head_"):
            raise NotFittedError("ContrastiveHeadTrainer is not fitted yet")
        return self.query_head_, self.twin_head_
