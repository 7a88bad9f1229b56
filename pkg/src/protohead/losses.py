"""Training objective components with analytic gradients.

Cross-entropy drives classification; two prototype regularizers keep the
prototype set usable for case-based explanations (clustering pulls prototypes
toward data so projection is faithful, separation pushes them apart so they
stay distinguishable); the incongruity loss trains sentiment prototypes to
expose the gap between a text's explicit and implicit sentiment, which is the
signal that flags sarcasm in two-view mode.

Gradient conventions: ties in argmin/argmax resolve to the lowest index,
hinge kinks and the absolute value at zero take subgradient 0, and a
coincident prototype pair contributes no separation gradient.  All of these
are measure-zero events under the seeded random inputs used by the gradient
checker.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from protohead import numerics
from protohead.errors import ConfigError

PROB_FLOOR = 1e-12


@dataclass(frozen=True)
class LossWeights:
    """Coefficients and margins of the total training objective.

    Defaults keep cross-entropy dominant; all values are overridable through
    the training config.
    """

    lambda_cluster: float = 0.1
    lambda_separation: float = 0.1
    lambda_incongruity: float = 0.5
    d_min: float = 1.0
    tau: float = 0.5
    tau_prime: float = 0.1

    def validate(self) -> None:
        for name in ("lambda_cluster", "lambda_separation", "lambda_incongruity",
                     "tau", "tau_prime"):
            value = getattr(self, name)
            if not (np.isfinite(value) and value >= 0.0):
                raise ConfigError(f"{name} must be finite and >= 0, got {value}")
        if not self.d_min > 0.0:
            raise ConfigError(f"d_min must be > 0, got {self.d_min}")
        if self.tau < self.tau_prime:
            raise ConfigError(
                f"tau must be >= tau_prime, got tau={self.tau}, tau_prime={self.tau_prime}")


def cross_entropy(probs: np.ndarray, label: int) -> float:
    """Negative log probability of the true class, floored at 1e-12."""
    probs = np.asarray(probs, dtype=np.float64)
    if not 0 <= label < probs.shape[0]:
        raise ValueError(f"label {label} out of range for {probs.shape[0]} classes")
    if abs(float(np.sum(probs)) - 1.0) > 1e-9:
        raise ValueError("cross_entropy expects a probability vector summing to 1")
    return -math.log(max(float(probs[label]), PROB_FLOOR))


def softmax_ce_grad_logits(probs: np.ndarray, label: int) -> np.ndarray:
    """Gradient of softmax-composed cross-entropy w.r.t. the logits."""
    grad = np.array(probs, dtype=np.float64)
    grad[label] -= 1.0
    return grad


def clustering_loss(embeddings: np.ndarray, prototypes: np.ndarray) -> float:
    """Mean over the batch of the squared distance to the nearest prototype."""
    return clustering_loss_grad(embeddings, prototypes)[0]


def clustering_loss_grad(embeddings: np.ndarray, prototypes: np.ndarray
                         ) -> tuple[float, np.ndarray]:
    """Clustering loss and its gradient w.r.t. the prototype matrix."""
    embeddings = np.asarray(embeddings, dtype=np.float64)
    prototypes = np.asarray(prototypes, dtype=np.float64)
    if embeddings.ndim != 2 or embeddings.shape[0] < 1:
        raise ValueError("clustering_loss needs a non-empty (B, D) batch")
    batch = embeddings.shape[0]
    diffs = embeddings[:, None, :] - prototypes[None, :, :]  # (B, K, D)
    sq_dists = np.sum(diffs * diffs, axis=2)
    nearest = np.argmin(sq_dists, axis=1)  # ties -> lowest index
    value = float(np.mean(sq_dists[np.arange(batch), nearest]))
    grad = np.zeros_like(prototypes)
    for i, k in enumerate(nearest):
        grad[k] += (2.0 / batch) * (prototypes[k] - embeddings[i])
    return value, grad


def separation_loss(prototypes: np.ndarray, d_min: float) -> float:
    """Sum over prototype pairs of the squared margin shortfall."""
    return separation_loss_grad(prototypes, d_min)[0]


def separation_loss_grad(prototypes: np.ndarray, d_min: float) -> tuple[float, np.ndarray]:
    """Separation loss and its gradient w.r.t. the prototype matrix."""
    prototypes = np.asarray(prototypes, dtype=np.float64)
    count = prototypes.shape[0]
    if count < 2:
        raise ValueError("separation_loss needs at least 2 prototypes")
    value = 0.0
    grad = np.zeros_like(prototypes)
    for j in range(count):
        for k in range(j + 1, count):
            delta = prototypes[j] - prototypes[k]
            dist = float(np.linalg.norm(delta))
            shortfall = d_min - dist
            if shortfall <= 0.0:
                continue
            value += shortfall * shortfall
            if dist > 0.0:
                pull = -2.0 * shortfall / dist * delta
                grad[j] += pull
                grad[k] -= pull
    return value, grad


def _split_polarity(sentiment_prototypes) -> tuple[np.ndarray, np.ndarray]:
    tags = sentiment_prototypes.polarity
    if tags is None:
        raise ValueError("sentiment prototypes carry no polarity tags")
    positive = np.array([i for i, t in enumerate(tags) if t == "positive"], dtype=np.int64)
    negative = np.array([i for i, t in enumerate(tags) if t == "negative"], dtype=np.int64)
    if positive.size == 0 or negative.size == 0:
        raise ValueError("polarity score needs at least one positive and one negative "
                         "sentiment prototype")
    return positive, negative


def polarity_score(vector: np.ndarray, sentiment_prototypes) -> float:
    """Best cosine to a positive sentiment prototype minus best to a negative."""
    score, _, _ = _polarity_parts(vector, sentiment_prototypes)
    return score


def _polarity_parts(vector, sentiment_prototypes):
    positive, negative = _split_polarity(sentiment_prototypes)
    sims = numerics.cosine_to_rows(vector, sentiment_prototypes.vectors)
    best_pos = positive[int(np.argmax(sims[positive]))]  # ties -> lowest index
    best_neg = negative[int(np.argmax(sims[negative]))]
    score = float(sims[best_pos] - sims[best_neg])
    return score, int(best_pos), int(best_neg)


def _cosine_grad_wrt_row(vector: np.ndarray, row: np.ndarray) -> np.ndarray:
    """d cos(v, q) / d q for nonzero norms; zero rows get a zero gradient."""
    nv = np.linalg.norm(vector)
    nq = np.linalg.norm(row)
    if nv == 0.0 or nq == 0.0:
        return np.zeros_like(row)
    cos = float(np.dot(vector, row) / (nv * nq))
    return vector / (nv * nq) - cos * row / (nq * nq)


@dataclass
class IncongruityCache:
    """Per-record intermediates for the incongruity feature backward pass."""

    semantic: np.ndarray
    sentiment: np.ndarray
    pi_explicit: float
    pi_implicit: float
    gap: float
    explicit_pos: int
    explicit_neg: int
    implicit_pos: int
    implicit_neg: int


def incongruity_features(semantic: np.ndarray, sentiment: np.ndarray,
                         sentiment_prototypes) -> tuple[np.ndarray, IncongruityCache]:
    """The three classifier features of two-view mode.

    ``(pi_explicit, pi_implicit, gap)``: polarity of the sentiment-encoder
    view, polarity of the semantic view, and the absolute gap between them.
    A large gap means the text says one thing and connotes another.
    """
    pi_explicit, epos, eneg = _polarity_parts(sentiment, sentiment_prototypes)
    pi_implicit, ipos, ineg = _polarity_parts(semantic, sentiment_prototypes)
    gap = abs(pi_explicit - pi_implicit)
    cache = IncongruityCache(
        semantic=np.asarray(semantic, dtype=np.float64),
        sentiment=np.asarray(sentiment, dtype=np.float64),
        pi_explicit=pi_explicit, pi_implicit=pi_implicit, gap=gap,
        explicit_pos=epos, explicit_neg=eneg, implicit_pos=ipos, implicit_neg=ineg)
    return np.array([pi_explicit, pi_implicit, gap]), cache


def incongruity_feature_grad(cache: IncongruityCache, dfeatures: np.ndarray,
                             sentiment_prototypes) -> np.ndarray:
    """Chain feature gradients back to the sentiment prototype matrix.

    ``dfeatures`` is the loss gradient w.r.t. ``(pi_explicit, pi_implicit,
    gap)``; gradient flows only into the argmax prototype of each polarity
    group, and the top-choice itself is treated as constant.
    """
    vectors = sentiment_prototypes.vectors
    grad = np.zeros_like(vectors)
    sign = float(np.sign(cache.pi_explicit - cache.pi_implicit))
    d_explicit = float(dfeatures[0]) + float(dfeatures[2]) * sign
    d_implicit = float(dfeatures[1]) - float(dfeatures[2]) * sign
    if d_explicit != 0.0:
        grad[cache.explicit_pos] += d_explicit * _cosine_grad_wrt_row(
            cache.sentiment, vectors[cache.explicit_pos])
        grad[cache.explicit_neg] -= d_explicit * _cosine_grad_wrt_row(
            cache.sentiment, vectors[cache.explicit_neg])
    if d_implicit != 0.0:
        grad[cache.implicit_pos] += d_implicit * _cosine_grad_wrt_row(
            cache.semantic, vectors[cache.implicit_pos])
        grad[cache.implicit_neg] -= d_implicit * _cosine_grad_wrt_row(
            cache.semantic, vectors[cache.implicit_neg])
    return grad


def incongruity_hinge(gap: float, label: int, tau: float, tau_prime: float
                      ) -> tuple[float, float]:
    """Per-record incongruity penalty and its derivative w.r.t. the gap.

    Label 1 wants the gap above ``tau``; label 0 wants it below ``tau_prime``.
    """
    if label not in (0, 1):
        raise ValueError(f"incongruity loss is defined for binary labels, got {label}")
    if label == 1:
        shortfall = tau - gap
        return (shortfall, -1.0) if shortfall > 0.0 else (0.0, 0.0)
    excess = gap - tau_prime
    return (excess, 1.0) if excess > 0.0 else (0.0, 0.0)


def incongruity_loss(semantic: np.ndarray, sentiment: np.ndarray, labels: np.ndarray,
                     sentiment_prototypes, tau: float, tau_prime: float) -> float:
    """Mean margin penalty on the explicit-vs-implicit polarity gap."""
    return incongruity_loss_grad(semantic, sentiment, labels, sentiment_prototypes,
                                 tau, tau_prime)[0]


def incongruity_loss_grad(semantic: np.ndarray, sentiment: np.ndarray, labels: np.ndarray,
                          sentiment_prototypes, tau: float, tau_prime: float
                          ) -> tuple[float, np.ndarray]:
    """Incongruity loss and its gradient w.r.t. the sentiment prototypes."""
    semantic = np.atleast_2d(np.asarray(semantic, dtype=np.float64))
    sentiment = np.atleast_2d(np.asarray(sentiment, dtype=np.float64))
    labels = np.atleast_1d(np.asarray(labels, dtype=np.int64))
    batch = semantic.shape[0]
    if batch < 1 or sentiment.shape[0] != batch or labels.shape[0] != batch:
        raise ValueError("incongruity loss needs matching non-empty views and labels")
    total = 0.0
    grad = np.zeros_like(sentiment_prototypes.vectors)
    for i in range(batch):
        _, cache = incongruity_features(semantic[i], sentiment[i], sentiment_prototypes)
        penalty, d_gap = incongruity_hinge(cache.gap, int(labels[i]), tau, tau_prime)
        total += penalty
        if d_gap != 0.0:
            grad += incongruity_feature_grad(
                cache, np.array([0.0, 0.0, d_gap / batch]), sentiment_prototypes)
    return total / batch, grad


def total_loss(ce: float, clustering: float, separation: float, incongruity: float,
               weights: LossWeights) -> float:
    """Weighted sum of the loss components."""
    for name, value in (("ce", ce), ("clustering", clustering),
                        ("separation", separation), ("incongruity", incongruity)):
        if not np.isfinite(value):
            raise ValueError(f"non-finite loss component {name}")
    return (ce + weights.lambda_cluster * clustering
            + weights.lambda_separation * separation
            + weights.lambda_incongruity * incongruity)
