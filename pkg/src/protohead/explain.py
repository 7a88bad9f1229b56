"""Instance explanations and interpretability instrumentation.

An explanation is not a post-hoc rationalization here: the listed
(prototype, edge weight, exemplar) triples *are* the classifier's input, so
reading the explanation is reading the decision.  The module also quantifies
how representative the prototype set is: the distinguished-prototype
percentage (no two prototypes citing the same exemplar), pairwise spread
statistics, and a deterministic 2-D PCA export for plotting prototypes inside
the training data cloud.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from protohead import numerics, proto_head
from protohead.embedding_io import EmbeddingDataset, EmbeddingRecord

_VIZ_TAG = 0x76697A


@dataclass
class ExplanationEdge:
    prototype_index: int
    weight: float
    exemplar_id: int
    exemplar_text: str | None


@dataclass
class Explanation:
    """Per-instance record of the decision evidence.

    ``heads[h]`` lists that head's strongest edges, weight-descending; every
    cited prototype carries the exemplar it was projected onto.
    """

    instance_id: int
    predicted_class: int
    probability: float
    heads: list
    incongruity: dict | None = None

    def to_dict(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "predicted_class": self.predicted_class,
            "probability": self.probability,
            "heads": [
                [
                    {
                        "prototype": edge.prototype_index,
                        "weight": edge.weight,
                        "exemplar_id": edge.exemplar_id,
                        "exemplar_text": edge.exemplar_text,
                    }
                    for edge in head
                ]
                for head in self.heads
            ],
            "incongruity": self.incongruity,
        }


@dataclass
class SpreadStats:
    mean_cosine_distance: float
    min_cosine_distance: float
    nn_ratio: float  # min nearest-neighbor distance / mean nearest-neighbor distance


def _require_projected(model) -> None:
    if not model.prototypes.projected:
        raise ValueError("model is not projected; run project_prototypes (or the "
                         "`project` subcommand) first")


def explain_instance(model: proto_head.GAHeadModel, record: EmbeddingRecord,
                     top_k: int, dataset: EmbeddingDataset | None = None) -> Explanation:
    """Explain one prediction of a projected graph-attention model.

    Lists each head's ``top_k`` strongest edges (ties break toward the lower
    prototype index) and attaches exemplar texts when ``dataset`` provides
    them.
    """
    if model.kind != "ga":
        raise ValueError("explanations require the graph-attention head")
    _require_projected(model)
    if top_k < 1:
        raise ValueError(f"top_k must be >= 1, got {top_k}")
    features = None
    incongruity = None
    if model.feature_count == 3:
        from protohead import losses

        if record.views.shape[0] != 2:
            raise ValueError("this model expects two-view records")
        features, _ = losses.incongruity_features(
            record.views[0], record.views[1], model.sentiment_prototypes)
        incongruity = {
            "explicit_polarity": float(features[0]),
            "implicit_polarity": float(features[1]),
            "gap": float(features[2]),
        }
    probs, edge_weights, _ = proto_head.ga_forward(model, record.views[0], features)
    predicted = int(np.argmax(probs))
    heads = []
    for h in range(model.num_heads):
        ranked = sorted(edge_weights.neighbor_indices,
                        key=lambda k: (-edge_weights.weights[h, k], k))
        edges = []
        for k in ranked[:top_k]:
            exemplar_id = model.prototypes.exemplar_ids[k]
            text = None
            if dataset is not None:
                position = dataset.position_of(int(exemplar_id))
                if position >= 0:
                    text = dataset.texts[position]
            edges.append(ExplanationEdge(
                prototype_index=int(k),
                weight=float(edge_weights.weights[h, k]),
                exemplar_id=int(exemplar_id),
                exemplar_text=text,
            ))
        heads.append(edges)
    return Explanation(
        instance_id=record.id,
        predicted_class=predicted,
        probability=float(probs[predicted]),
        heads=heads,
        incongruity=incongruity,
    )


def distinguished_percentage(model) -> float:
    """Fraction of prototypes whose projected exemplar is theirs alone."""
    _require_projected(model)
    ids = model.prototypes.exemplar_ids
    singles = sum(1 for e in ids if ids.count(e) == 1)
    return singles / len(ids)


def spread_stats(model) -> SpreadStats:
    """Pairwise cosine-distance statistics of the prototype set."""
    vectors = model.prototypes.vectors
    k = vectors.shape[0]
    if k < 2:
        raise ValueError("spread statistics need at least 2 prototypes")
    distances = np.zeros((k, k))
    pair_values = []
    for i in range(k):
        for j in range(i + 1, k):
            d = 1.0 - numerics.cosine_similarity(vectors[i], vectors[j])
            distances[i, j] = distances[j, i] = d
            pair_values.append(d)
    nn = [min(distances[i, j] for j in range(k) if j != i) for i in range(k)]
    mean_nn = float(np.mean(nn))
    return SpreadStats(
        mean_cosine_distance=float(np.mean(pair_values)),
        min_cosine_distance=float(np.min(pair_values)),
        nn_ratio=float(np.min(nn)) / mean_nn if mean_nn > 0.0 else 0.0,
    )


def export_viz(model, dataset: EmbeddingDataset, sample_size: int, path,
               seed: int | None = None) -> dict:
    """Write plot-ready 2-D PCA coordinates of data points and prototypes.

    The PCA basis is fit on the union of a seeded training sample and the
    prototype vectors, so a projected prototype lands exactly on its exemplar
    when both appear in the export.  Returns the written document.
    """
    if sample_size < 3:
        raise ValueError(f"sample_size must be >= 3, got {sample_size}")
    if sample_size > len(dataset):
        raise ValueError(
            f"sample_size {sample_size} exceeds the {len(dataset)} dataset records")
    seed = model.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((seed, _VIZ_TAG))))
    positions = np.sort(rng.choice(len(dataset), size=sample_size, replace=False))
    sample = dataset.view(0)[positions]
    stacked = np.vstack([sample, model.prototypes.vectors])
    coords, explained = numerics.pca_2d(stacked)
    points = []
    for row, position in enumerate(positions):
        points.append({
            "kind": "data",
            "id": int(dataset.ids[position]),
            "label": int(dataset.labels[position]),
            "x": float(coords[row, 0]),
            "y": float(coords[row, 1]),
        })
    for k in range(model.prototypes.count):
        exemplar = model.prototypes.exemplar_ids[k]
        points.append({
            "kind": "prototype",
            "index": k,
            "exemplar_id": None if exemplar is None else int(exemplar),
            "x": float(coords[sample_size + k, 0]),
            "y": float(coords[sample_size + k, 1]),
        })
    document = {
        "explained_variance": [float(explained[0]), float(explained[1])],
        "seed": seed,
        "points": points,
    }
    with open(Path(path), "w", encoding="utf-8") as fh:
        json.dump(document, fh, indent=2)
        fh.write("\n")
    return document


def interpretability_report(model, dataset: EmbeddingDataset, sample_size: int,
                            seed: int | None = None) -> dict:
    """Bundle the interpretability metrics for a projected model."""
    stats = spread_stats(model)
    rng_seed = model.seed if seed is None else seed
    rng = np.random.Generator(np.random.PCG64(np.random.SeedSequence((rng_seed, _VIZ_TAG))))
    positions = np.sort(rng.choice(len(dataset), size=min(sample_size, len(dataset)),
                                   replace=False))
    stacked = np.vstack([dataset.view(0)[positions], model.prototypes.vectors])
    coords, explained = numerics.pca_2d(stacked)
    return {
        "distinguished_percentage": distinguished_percentage(model),
        "mean_cosine_distance": stats.mean_cosine_distance,
        "min_cosine_distance": stats.min_cosine_distance,
        "nn_ratio": stats.nn_ratio,
        "num_prototypes": model.prototypes.count,
        "seed": int(rng_seed),
        "explained_variance": [float(explained[0]), float(explained[1])],
        "prototype_coords": coords[len(positions):].tolist(),
    }
