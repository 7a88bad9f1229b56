"""Prototype classification heads.

Two heads share a trainable prototype set.  The graph-attention head builds a
star graph per input (the input node plus its top-n prototypes by cosine
similarity), scores each edge with a per-head attention vector, normalizes
with a masked softmax, and classifies *from the edge weights alone* via a
linear readout; explanations are therefore exactly the classifier's input.
The cosine head is the heuristic baseline: a linear readout of the raw
cosine similarities to all prototypes.

Backward passes are analytic.  The discrete neighbor choice is treated as a
constant (no gradient through the top-n selection), and caches carry a model
version stamp so a backward pass against a since-updated model fails loudly
instead of silently using stale intermediates.

Reductions indexed by prototype use ``math.fsum`` (exactly rounded, hence
order-independent), which makes class probabilities bit-identical under any
relabeling of prototypes, not just equal to within rounding.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from protohead import numerics
from protohead.config import TrainConfig
from protohead.embedding_io import EmbeddingDataset
from protohead.errors import DataValidationError, StaleCacheError

_INIT_TAG = 0x696E6974

CHECKPOINT_FORMAT = "prototype-head-checkpoint"
CHECKPOINT_VERSION = 1

POSITIVE = "positive"
NEGATIVE = "negative"


@dataclass
class PrototypeSet:
    """K trainable vectors plus per-prototype metadata.

    ``exemplar_ids[k]`` is the training record id the prototype was projected
    onto (None before projection).  ``polarity`` tags exist only on sentiment
    prototype sets and are declared at initialization, then frozen.
    """

    vectors: np.ndarray  # (K, D) float64
    exemplar_ids: list = field(default_factory=list)
    polarity: list | None = None

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if self.vectors.ndim != 2 or self.vectors.shape[0] < 2:
            raise ValueError(f"prototype matrix must be (K>=2, D), got {self.vectors.shape}")
        numerics.require_finite("prototype vectors", self.vectors)
        if not self.exemplar_ids:
            self.exemplar_ids = [None] * self.vectors.shape[0]
        if len(self.exemplar_ids) != self.vectors.shape[0]:
            raise ValueError("one exemplar id slot per prototype required")
        if self.polarity is not None:
            if len(self.polarity) != self.vectors.shape[0]:
                raise ValueError("one polarity tag per prototype required")
            for tag in self.polarity:
                if tag not in (POSITIVE, NEGATIVE):
                    raise ValueError(f"polarity tag must be positive/negative, got {tag!r}")

    @property
    def count(self) -> int:
        return self.vectors.shape[0]

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @property
    def projected(self) -> bool:
        return all(e is not None for e in self.exemplar_ids)

    def copy(self) -> "PrototypeSet":
        return PrototypeSet(vectors=self.vectors.copy(),
                            exemplar_ids=list(self.exemplar_ids),
                            polarity=list(self.polarity) if self.polarity else None)


@dataclass
class GAHeadModel:
    """Multi-head graph-attention prototype head.

    Per head h: a projection ``attn_proj[h]`` (D_h x D) and an attention
    vector ``attn_vec[h]`` (length 2*D_h).  The classifier consumes the
    concatenated per-head edge-weight vectors (H*K entries, zeros off the
    selected neighborhood) plus ``feature_count`` appended incongruity
    features (0 in single-view mode, 3 in two-view mode).
    """

    prototypes: PrototypeSet
    attn_proj: np.ndarray  # (H, D_h, D)
    attn_vec: np.ndarray  # (H, 2*D_h)
    classifier_weight: np.ndarray  # (C, H*K + F)
    classifier_bias: np.ndarray  # (C,)
    neighbor_count: int
    seed: int = 0
    sentiment_prototypes: PrototypeSet | None = None
    version: int = 0  # bumped on every in-place parameter update

    kind = "ga"

    @property
    def num_heads(self) -> int:
        return self.attn_proj.shape[0]

    @property
    def attention_dim(self) -> int:
        return self.attn_proj.shape[1]

    @property
    def dim(self) -> int:
        return self.attn_proj.shape[2]

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.count

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]

    @property
    def feature_count(self) -> int:
        return self.classifier_weight.shape[1] - self.num_heads * self.num_prototypes

    def trainable_params(self) -> dict:
        params = {
            "prototypes": self.prototypes.vectors,
            "attn_proj": self.attn_proj,
            "attn_vec": self.attn_vec,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }
        if self.sentiment_prototypes is not None:
            params["sentiment_prototypes"] = self.sentiment_prototypes.vectors
        return params

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "GAHeadModel":
        return GAHeadModel(
            prototypes=self.prototypes.copy(),
            attn_proj=self.attn_proj.copy(),
            attn_vec=self.attn_vec.copy(),
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
            neighbor_count=self.neighbor_count,
            seed=self.seed,
            sentiment_prototypes=(self.sentiment_prototypes.copy()
                                  if self.sentiment_prototypes else None),
            version=self.version,
        )


@dataclass
class CosineHeadModel:
    """Baseline head: linear readout of cosine similarities to all prototypes."""

    prototypes: PrototypeSet
    classifier_weight: np.ndarray  # (C, K)
    classifier_bias: np.ndarray  # (C,)
    seed: int = 0
    sentiment_prototypes: PrototypeSet | None = None
    version: int = 0

    kind = "cosine"

    @property
    def dim(self) -> int:
        return self.prototypes.dim

    @property
    def num_prototypes(self) -> int:
        return self.prototypes.count

    @property
    def num_classes(self) -> int:
        return self.classifier_weight.shape[0]

    def trainable_params(self) -> dict:
        params = {
            "prototypes": self.prototypes.vectors,
            "classifier_weight": self.classifier_weight,
            "classifier_bias": self.classifier_bias,
        }
        if self.sentiment_prototypes is not None:
            params["sentiment_prototypes"] = self.sentiment_prototypes.vectors
        return params

    def bump_version(self) -> None:
        self.version += 1

    def copy(self) -> "CosineHeadModel":
        return CosineHeadModel(
            prototypes=self.prototypes.copy(),
            classifier_weight=self.classifier_weight.copy(),
            classifier_bias=self.classifier_bias.copy(),
            seed=self.seed,
            sentiment_prototypes=(self.sentiment_prototypes.copy()
                                  if self.sentiment_prototypes else None),
            version=self.version,
        )


@dataclass
class EdgeWeights:
    """Per-head attention weights over prototypes; the decision features.

    ``weights[h, k]`` is exactly 0 for unselected prototypes and the selected
    entries of each head sum to 1.
    """

    weights: np.ndarray  # (H, K)
    neighbor_indices: np.ndarray  # ascending


@dataclass
class GAForwardCache:
    x: np.ndarray
    features: np.ndarray | None
    neighbors: np.ndarray  # (n,) ascending
    proj_x: np.ndarray  # (H, D_h)
    proj_neighbors: np.ndarray  # (H, n, D_h)
    pre_activation: np.ndarray  # (H, n)
    neighbor_weights: np.ndarray  # (H, n)
    probs: np.ndarray
    model_version: int


@dataclass
class CosineForwardCache:
    x: np.ndarray
    sims: np.ndarray
    probs: np.ndarray
    model_version: int


def _stratified_record_choice(rng, labels: np.ndarray, num_classes: int, count: int
                              ) -> np.ndarray:
    """Round-robin over classes, sampling positions without replacement."""
    pools = []
    for c in range(num_classes):
        positions = np.flatnonzero(labels == c)
        pools.append(list(rng.permutation(positions)))
    chosen = []
    c = 0
    while len(chosen) < count:
        scanned = 0
        while not pools[c % num_classes] and scanned < num_classes:
            c += 1
            scanned += 1
        if scanned == num_classes and not pools[c % num_classes]:
            raise DataValidationError("not enough training records to initialize prototypes")
        chosen.append(pools[c % num_classes].pop(0))
        c += 1
    return np.asarray(chosen, dtype=np.int64)


def _init_sentiment_prototypes(rng, config: TrainConfig, train: EmbeddingDataset,
                               polarity_hints: np.ndarray | None) -> PrototypeSet:
    m = config.num_sentiment_prototypes
    half = m // 2
    if polarity_hints is not None:
        positive_pool = rng.permutation(np.flatnonzero(np.asarray(polarity_hints) > 0))
        negative_pool = rng.permutation(np.flatnonzero(np.asarray(polarity_hints) < 0))
        if positive_pool.size < half or negative_pool.size < half:
            raise DataValidationError(
                f"need {half} records of each polarity to initialize sentiment prototypes, "
                f"got {positive_pool.size} positive / {negative_pool.size} negative")
        positions = np.concatenate([positive_pool[:half], negative_pool[:half]])
    else:
        positions = rng.permutation(len(train))[:m]
        if positions.size < m:
            raise DataValidationError(
                f"need {m} training records to initialize sentiment prototypes")
    vectors = train.view(1)[positions].copy()
    vectors += config.init_jitter * rng.standard_normal(vectors.shape)
    return PrototypeSet(vectors=vectors, polarity=[POSITIVE] * half + [NEGATIVE] * half)


def init_head(config: TrainConfig, train: EmbeddingDataset, seed: int | None = None,
              polarity_hints: np.ndarray | None = None):
    """Build a seeded model of the configured head kind.

    Prototypes start at class-stratified training embeddings (round-robin over
    classes, sampled without replacement) plus Gaussian jitter; weight blocks
    are uniform with 1/sqrt(fan-in) scale; biases start at zero.  The draw
    order is fixed (prototypes, sentiment prototypes, attention blocks,
    classifier) so identical seeds give byte-identical models.
    """
    config.validate()
    seed = config.seed if seed is None else seed
    k = config.num_prototypes
    if k > len(train):
        raise DataValidationError(
            f"num_prototypes={k} exceeds the {len(train)} training records")
    if config.two_view and train.num_views != 2:
        raise DataValidationError("config requests two-view mode but the dataset has one view; "
                                  "drop two_view or supply a two-view dataset")
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _INIT_TAG))))

    positions = _stratified_record_choice(rng, train.labels, train.num_classes, k)
    vectors = train.view(0)[positions].copy()
    vectors += config.init_jitter * rng.standard_normal(vectors.shape)
    prototypes = PrototypeSet(vectors=vectors)

    sentiment = None
    if config.two_view:
        sentiment = _init_sentiment_prototypes(rng, config, train, polarity_hints)

    dim = train.dim
    num_classes = train.num_classes
    if config.head == "ga":
        heads, attn_dim = config.num_heads, config.attention_dim
        feature_count = 3 if config.two_view else 0
        bound = 1.0 / math.sqrt(dim)
        attn_proj = rng.uniform(-bound, bound, (heads, attn_dim, dim))
        bound = 1.0 / math.sqrt(2 * attn_dim)
        attn_vec = rng.uniform(-bound, bound, (heads, 2 * attn_dim))
        readout = heads * k + feature_count
        bound = 1.0 / math.sqrt(readout)
        classifier_weight = rng.uniform(-bound, bound, (num_classes, readout))
        return GAHeadModel(
            prototypes=prototypes,
            attn_proj=attn_proj,
            attn_vec=attn_vec,
            classifier_weight=classifier_weight,
            classifier_bias=np.zeros(num_classes),
            neighbor_count=config.resolved_neighbor_count(),
            seed=seed,
            sentiment_prototypes=sentiment,
        )
    bound = 1.0 / math.sqrt(k)
    classifier_weight = rng.uniform(-bound, bound, (num_classes, k))
    return CosineHeadModel(
        prototypes=prototypes,
        classifier_weight=classifier_weight,
        classifier_bias=np.zeros(num_classes),
        seed=seed,
        sentiment_prototypes=sentiment,
    )


def select_neighbors(x: np.ndarray, prototypes: PrototypeSet, count: int) -> np.ndarray:
    """Indices of the ``count`` most cosine-similar prototypes, ascending.

    Ties break toward the lower index, which makes top-n selections nested as
    ``count`` grows.
    """
    k = prototypes.count
    if not 1 <= count <= k:
        raise ValueError(f"neighbor count must lie in [1, {k}], got {count}")
    sims = numerics.cosine_to_rows(x, prototypes.vectors)
    order = np.argsort(-sims, kind="stable")  # stable: equal sims keep index order
    return np.sort(order[:count])


def _fsum_rows(terms_per_row) -> np.ndarray:
    return np.array([math.fsum(terms) for terms in terms_per_row])


def ga_forward(model: GAHeadModel, x: np.ndarray,
               extra_features: np.ndarray | None = None
               ) -> tuple[np.ndarray, EdgeWeights, GAForwardCache]:
    """Forward pass of the graph-attention head for one embedding.

    Returns class probabilities, the edge weights (the model's entire
    decision evidence), and the cache consumed by :func:`ga_backward`.
    ``extra_features`` must be the 3 incongruity features in two-view mode
    and None otherwise.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"input shape {x.shape} does not match model dim ({model.dim},)")
    feature_count = model.feature_count
    if feature_count == 3:
        if extra_features is None:
            raise ValueError("this model expects 3 incongruity features per input")
        extra_features = np.asarray(extra_features, dtype=np.float64)
        if extra_features.shape != (3,):
            raise ValueError(f"expected 3 incongruity features, got shape {extra_features.shape}")
    elif extra_features is not None:
        raise ValueError("this model takes no incongruity features")

    k = model.num_prototypes
    heads = model.num_heads
    attn_dim = model.attention_dim
    neighbors = select_neighbors(x, model.prototypes, model.neighbor_count)
    n = neighbors.size
    chosen = model.prototypes.vectors[neighbors]

    proj_x = np.empty((heads, attn_dim))
    proj_neighbors = np.empty((heads, n, attn_dim))
    pre_activation = np.empty((heads, n))
    neighbor_weights = np.empty((heads, n))
    weights = np.zeros((heads, k))
    for h in range(heads):
        proj = model.attn_proj[h]
        a_input, a_proto = model.attn_vec[h, :attn_dim], model.attn_vec[h, attn_dim:]
        zx = proj @ x
        zn = chosen @ proj.T
        t = numerics.leaky_relu(float(np.dot(a_input, zx)) + zn @ a_proto)
        shifted = np.exp(t - np.max(t))
        alpha = shifted / math.fsum(shifted)
        proj_x[h] = zx
        proj_neighbors[h] = zn
        pre_activation[h] = t
        neighbor_weights[h] = alpha
        weights[h, neighbors] = alpha

    logits = _fsum_rows(
        [model.classifier_weight[c, h * k + neighbors[i]] * neighbor_weights[h, i]
         for h in range(heads) for i in range(n)]
        + ([model.classifier_weight[c, heads * k + f] * extra_features[f] for f in range(3)]
           if feature_count == 3 else [])
        + [model.classifier_bias[c]]
        for c in range(model.num_classes)
    )
    probs = numerics.stable_softmax(logits)
    cache = GAForwardCache(
        x=x, features=extra_features, neighbors=neighbors, proj_x=proj_x,
        proj_neighbors=proj_neighbors, pre_activation=pre_activation,
        neighbor_weights=neighbor_weights, probs=probs, model_version=model.version)
    return probs, EdgeWeights(weights=weights, neighbor_indices=neighbors), cache


def ga_backward(model: GAHeadModel, cache: GAForwardCache, dlogits: np.ndarray
                ) -> tuple[dict, np.ndarray | None]:
    """Analytic gradients of a scalar loss through the graph-attention head.

    ``dlogits`` is the loss gradient w.r.t. the pre-softmax class scores.
    Returns gradients for every trainable block plus the gradient w.r.t. the
    appended incongruity features (None in single-view mode); the caller
    chains that into the sentiment prototypes.  The neighbor selection is a
    constant of the backward pass.
    """
    if cache.model_version != model.version:
        raise StaleCacheError("forward cache is stale: the model was updated after ga_forward")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    k = model.num_prototypes
    heads = model.num_heads
    attn_dim = model.attention_dim
    neighbors = cache.neighbors
    chosen = model.prototypes.vectors[neighbors]

    grads = {
        "prototypes": np.zeros_like(model.prototypes.vectors),
        "attn_proj": np.zeros_like(model.attn_proj),
        "attn_vec": np.zeros_like(model.attn_vec),
        "classifier_weight": np.zeros_like(model.classifier_weight),
        "classifier_bias": dlogits.copy(),
    }
    if model.sentiment_prototypes is not None:
        grads["sentiment_prototypes"] = np.zeros_like(model.sentiment_prototypes.vectors)

    dfeatures = None
    if model.feature_count == 3:
        feature_cols = heads * k + np.arange(3)
        grads["classifier_weight"][:, feature_cols] = np.outer(dlogits, cache.features)
        dfeatures = model.classifier_weight[:, feature_cols].T @ dlogits

    for h in range(heads):
        cols = h * k + neighbors
        alpha = cache.neighbor_weights[h]
        grads["classifier_weight"][:, cols] += np.outer(dlogits, alpha)
        dalpha = model.classifier_weight[:, cols].T @ dlogits
        # softmax backward over the selected star neighborhood
        dpre = alpha * (dalpha - float(np.dot(dalpha, alpha)))
        dpre *= numerics.leaky_relu_grad(cache.pre_activation[h])
        a_input = model.attn_vec[h, :attn_dim]
        a_proto = model.attn_vec[h, attn_dim:]
        dsum = float(np.sum(dpre))
        grads["attn_vec"][h, :attn_dim] = dsum * cache.proj_x[h]
        grads["attn_vec"][h, attn_dim:] = cache.proj_neighbors[h].T @ dpre
        dzx = dsum * a_input
        dzn = np.outer(dpre, a_proto)  # (n, D_h)
        grads["attn_proj"][h] = np.outer(dzx, cache.x) + dzn.T @ chosen
        grads["prototypes"][neighbors] += dzn @ model.attn_proj[h]
    return grads, dfeatures


def cosine_forward(model: CosineHeadModel, x: np.ndarray
                   ) -> tuple[np.ndarray, np.ndarray, CosineForwardCache]:
    """Forward pass of the cosine baseline head for one embedding."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.dim,):
        raise ValueError(f"input shape {x.shape} does not match model dim ({model.dim},)")
    sims = numerics.cosine_to_rows(x, model.prototypes.vectors)
    logits = _fsum_rows(
        [model.classifier_weight[c, j] * sims[j] for j in range(model.num_prototypes)]
        + [model.classifier_bias[c]]
        for c in range(model.num_classes)
    )
    probs = numerics.stable_softmax(logits)
    cache = CosineForwardCache(x=x, sims=sims, probs=probs, model_version=model.version)
    return probs, sims, cache


def cosine_backward(model: CosineHeadModel, cache: CosineForwardCache,
                    dlogits: np.ndarray) -> dict:
    """Analytic gradients of a scalar loss through the cosine head."""
    if cache.model_version != model.version:
        raise StaleCacheError(
            "forward cache is stale: the model was updated after cosine_forward")
    dlogits = np.asarray(dlogits, dtype=np.float64)
    prototypes = model.prototypes.vectors
    dsims = model.classifier_weight.T @ dlogits
    norm_x = np.linalg.norm(cache.x)
    norms = np.linalg.norm(prototypes, axis=1)
    dprototypes = np.zeros_like(prototypes)
    ok = (norms > 0.0) & (norm_x > 0.0)
    # d cos / d p = x / (|x||p|) - cos * p / |p|^2, zero for degenerate norms
    dprototypes[ok] = dsims[ok, None] * (
        cache.x[None, :] / (norm_x * norms[ok, None])
        - cache.sims[ok, None] * prototypes[ok] / (norms[ok, None] ** 2))
    grads = {
        "prototypes": dprototypes,
        "classifier_weight": np.outer(dlogits, cache.sims),
        "classifier_bias": dlogits.copy(),
    }
    if model.sentiment_prototypes is not None:
        grads["sentiment_prototypes"] = np.zeros_like(model.sentiment_prototypes.vectors)
    return grads


def _prototype_meta(prototypes: PrototypeSet | None) -> dict | None:
    if prototypes is None:
        return None
    return {
        "exemplar_ids": [None if e is None else int(e) for e in prototypes.exemplar_ids],
        "polarity": list(prototypes.polarity) if prototypes.polarity else None,
    }


def to_checkpoint_dict(model, config: TrainConfig | None = None) -> dict:
    """Checkpoint document with a fixed key order.

    Key order (top level): format, version, head, seed, config, dims, params,
    prototype_meta, sentiment_prototype_meta.  Parameter blocks appear in the
    order of ``trainable_params`` with explicit shapes and flat float64 data,
    so identical states serialize to identical bytes.
    """
    if model.kind == "ga":
        dims = {
            "dim": model.dim,
            "num_classes": model.num_classes,
            "num_prototypes": model.num_prototypes,
            "num_heads": model.num_heads,
            "attention_dim": model.attention_dim,
            "neighbor_count": model.neighbor_count,
            "feature_count": model.feature_count,
        }
    else:
        dims = {
            "dim": model.dim,
            "num_classes": model.num_classes,
            "num_prototypes": model.num_prototypes,
        }
    params = {}
    for name, value in model.trainable_params().items():
        params[name] = {"shape": list(value.shape),
                        "data": [float(v) for v in value.ravel()]}
    return {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "head": model.kind,
        "seed": int(model.seed),
        "config": config.to_dict() if config is not None else None,
        "dims": dims,
        "params": params,
        "prototype_meta": _prototype_meta(model.prototypes),
        "sentiment_prototype_meta": _prototype_meta(model.sentiment_prototypes),
    }


def save_checkpoint(model, path, config: TrainConfig | None = None) -> None:
    """Serialize a model (and optionally its config echo) as JSON."""
    document = to_checkpoint_dict(model, config)
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")


def _param(doc: dict, name: str) -> np.ndarray:
    entry = doc["params"][name]
    return np.asarray(entry["data"], dtype=np.float64).reshape(entry["shape"])


def _prototype_set_from(doc_meta: dict | None, vectors: np.ndarray) -> PrototypeSet:
    meta = doc_meta or {}
    return PrototypeSet(vectors=vectors,
                        exemplar_ids=list(meta.get("exemplar_ids") or []),
                        polarity=meta.get("polarity"))


def load_checkpoint(path) -> tuple[object, dict | None]:
    """Load a checkpoint; returns ``(model, config_echo_dict)``."""
    with open(Path(path), "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise DataValidationError(f"{path}: not a prototype-head checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise DataValidationError(f"{path}: unsupported checkpoint version {doc.get('version')}")
    prototypes = _prototype_set_from(doc["prototype_meta"], _param(doc, "prototypes"))
    sentiment = None
    if "sentiment_prototypes" in doc["params"]:
        sentiment = _prototype_set_from(doc["sentiment_prototype_meta"],
                                        _param(doc, "sentiment_prototypes"))
    if doc["head"] == "ga":
        model = GAHeadModel(
            prototypes=prototypes,
            attn_proj=_param(doc, "attn_proj"),
            attn_vec=_param(doc, "attn_vec"),
            classifier_weight=_param(doc, "classifier_weight"),
            classifier_bias=_param(doc, "classifier_bias"),
            neighbor_count=int(doc["dims"]["neighbor_count"]),
            seed=int(doc["seed"]),
            sentiment_prototypes=sentiment,
        )
    elif doc["head"] == "cosine":
        model = CosineHeadModel(
            prototypes=prototypes,
            classifier_weight=_param(doc, "classifier_weight"),
            classifier_bias=_param(doc, "classifier_bias"),
            seed=int(doc["seed"]),
            sentiment_prototypes=sentiment,
        )
    else:
        raise DataValidationError(f"{path}: unknown head kind {doc['head']!r}")
    return model, doc.get("config")
