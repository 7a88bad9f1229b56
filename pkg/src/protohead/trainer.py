"""Deterministic mini-batch training with periodic prototype projection.

Training is manual backpropagation end to end: per-item head gradients from
``proto_head``, batch-level regularizer gradients from ``losses``, and a plain
Adam update from ``numerics``.  Everything is a pure function of (config,
seed, dataset bytes): batch order comes from a counter-based generator keyed
by (seed, epoch) and decoupled from initialization randomness, snapshots are
deep copies, and the optional parallel mode evaluates batch items concurrently
but reduces gradients in fixed index order so its results are bit-identical
to serial mode.

Prototype projection replaces each prototype by its most cosine-similar
training embedding, recording the exemplar id that explanations cite.  A
final projection always runs before the returned checkpoint.
"""

from __future__ import annotations

import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from protohead import losses, numerics, proto_head
from protohead.config import TrainConfig
from protohead.embedding_io import EmbeddingDataset, SplitSpec, SyntheticConfig, gen_synthetic
from protohead.errors import DataValidationError, DivergenceError

_SHUFFLE_KEY_SALT = 0x5348  # keeps batch order decoupled from init randomness

GRADCHECK_TOLERANCE = 1e-4


def _epoch_rng(seed: int, epoch: int) -> np.random.Generator:
    """Counter-based per-epoch generator.

    Philox is keyed by the run seed and positioned at ``epoch << 64``, giving
    every epoch its own 2^64-draw block: changing unrelated config (e.g. the
    prototype count) cannot perturb batch order, and epochs cannot overlap.
    """
    key = (seed ^ _SHUFFLE_KEY_SALT) & (2 ** 64 - 1)
    return np.random.Generator(np.random.Philox(key=key, counter=epoch << 64))


@dataclass
class EpochStats:
    epoch: int
    train_loss: float
    train_accuracy: float
    val_loss: float
    val_accuracy: float
    projected: bool


@dataclass
class TrainReport:
    """Per-epoch metrics plus the run outcome.

    ``wall_clock_seconds`` is kept on the object for interactive use but is
    deliberately excluded from :meth:`to_json_dict` so that identical runs
    emit byte-identical report files.
    """

    seed: int
    epochs: list = field(default_factory=list)
    projection_events: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_accuracy: float = 0.0
    final_test_accuracy: float = 0.0
    final_test_loss: float = 0.0
    stopped_early: bool = False
    wall_clock_seconds: float = 0.0

    def to_json_dict(self) -> dict:
        return {
            "seed": self.seed,
            "best_epoch": self.best_epoch,
            "best_val_accuracy": self.best_val_accuracy,
            "final_test_accuracy": self.final_test_accuracy,
            "final_test_loss": self.final_test_loss,
            "stopped_early": self.stopped_early,
            "projection_events": self.projection_events,
            "epochs": [
                {
                    "epoch": e.epoch,
                    "train_loss": e.train_loss,
                    "train_accuracy": e.train_accuracy,
                    "val_loss": e.val_loss,
                    "val_accuracy": e.val_accuracy,
                    "projected": e.projected,
                }
                for e in self.epochs
            ],
        }


@dataclass
class EvalResult:
    accuracy: float
    mean_loss: float
    confusion: np.ndarray  # (C, C), rows = true class


@dataclass
class GradCheckReport:
    head: str
    two_view: bool
    seed: int
    tolerance: float
    block_errors: dict
    passed: bool


@dataclass
class _ItemResult:
    ce: float
    hinge: float
    prediction: int
    grads: dict
    sentiment_grad: np.ndarray | None


def _item_pass(model, views_row: np.ndarray, label: int, batch_size: int,
               weights: losses.LossWeights) -> _ItemResult:
    """Forward + backward for one record; pure, so batch items can run in
    any order (or concurrently) without changing results."""
    semantic = views_row[0]
    hinge = 0.0
    sentiment_grad = None
    if model.kind == "ga":
        features = None
        feature_cache = None
        if model.feature_count == 3:
            features, feature_cache = losses.incongruity_features(
                semantic, views_row[1], model.sentiment_prototypes)
        probs, _, cache = proto_head.ga_forward(model, semantic, features)
        dlogits = losses.softmax_ce_grad_logits(probs, label) / batch_size
        grads, dfeatures = proto_head.ga_backward(model, cache, dlogits)
        if feature_cache is not None:
            hinge, dgap = losses.incongruity_hinge(
                feature_cache.gap, label, weights.tau, weights.tau_prime)
            dfeatures = dfeatures + np.array(
                [0.0, 0.0, weights.lambda_incongruity * dgap / batch_size])
            sentiment_grad = losses.incongruity_feature_grad(
                feature_cache, dfeatures, model.sentiment_prototypes)
    else:
        probs, _, cache = proto_head.cosine_forward(model, semantic)
        dlogits = losses.softmax_ce_grad_logits(probs, label) / batch_size
        grads = proto_head.cosine_backward(model, cache, dlogits)
    return _ItemResult(
        ce=losses.cross_entropy(probs, label),
        hinge=hinge,
        prediction=int(np.argmax(probs)),
        grads=grads,
        sentiment_grad=sentiment_grad,
    )


def batch_loss_and_grads(model, views: np.ndarray, labels: np.ndarray,
                         weights: losses.LossWeights, parallel: bool = False):
    """Total loss and gradients for one mini-batch.

    Returns ``(loss, grads, aux)`` where ``aux`` carries the mean
    cross-entropy and per-item predictions for metric bookkeeping.  Gradients
    are reduced in batch index order regardless of ``parallel``.
    """
    batch_size = views.shape[0]
    items = list(range(batch_size))
    run = lambda i: _item_pass(model, views[i], int(labels[i]), batch_size, weights)
    if parallel and batch_size > 1:
        with ThreadPoolExecutor(max_workers=min(4, batch_size)) as pool:
            results = list(pool.map(run, items))
    else:
        results = [run(i) for i in items]

    grads = {name: np.zeros_like(value) for name, value in model.trainable_params().items()}
    ce_sum = 0.0
    hinge_sum = 0.0
    predictions = []
    for result in results:  # fixed index order: serial == parallel, bit for bit
        ce_sum += result.ce
        hinge_sum += result.hinge
        predictions.append(result.prediction)
        for name, grad in result.grads.items():
            grads[name] += grad
        if result.sentiment_grad is not None:
            grads["sentiment_prototypes"] += result.sentiment_grad

    prototypes = model.prototypes.vectors
    cluster_value, cluster_grad = losses.clustering_loss_grad(views[:, 0, :], prototypes)
    separation_value, separation_grad = losses.separation_loss_grad(prototypes, weights.d_min)
    grads["prototypes"] += weights.lambda_cluster * cluster_grad
    grads["prototypes"] += weights.lambda_separation * separation_grad

    if model.kind == "ga" or model.sentiment_prototypes is None:
        incongruity_value = hinge_sum / batch_size
    else:
        # cosine head: sentiment prototypes train through the loss term only
        incongruity_value, incongruity_grad = losses.incongruity_loss_grad(
            views[:, 0, :], views[:, 1, :], labels, model.sentiment_prototypes,
            weights.tau, weights.tau_prime)
        grads["sentiment_prototypes"] += weights.lambda_incongruity * incongruity_grad

    ce_mean = ce_sum / batch_size
    total = losses.total_loss(ce_mean, cluster_value, separation_value,
                              incongruity_value, weights)
    return total, grads, {"ce": ce_mean, "predictions": predictions}


def project_prototypes(model, train: EmbeddingDataset,
                       polarity_hints: np.ndarray | None = None):
    """Replace every prototype by its most cosine-similar training embedding.

    Ties resolve to the lower record id.  Sentiment prototypes project onto
    view-2 embeddings, restricted to records of matching polarity when hints
    are available.  Idempotent; returns ``(model, projection_map)``.
    """
    semantic = train.view(0)
    main_ids = _project_set(model.prototypes, semantic, train.ids)
    projection_map = {"prototypes": main_ids, "sentiment_prototypes": None}
    if model.sentiment_prototypes is not None:
        if train.num_views != 2:
            raise DataValidationError(
                "sentiment prototypes need a two-view dataset for projection")
        sentiment_view = train.view(1)
        pools = None
        if polarity_hints is not None:
            hints = np.asarray(polarity_hints)
            pools = {
                proto_head.POSITIVE: np.flatnonzero(hints > 0),
                proto_head.NEGATIVE: np.flatnonzero(hints < 0),
            }
        projection_map["sentiment_prototypes"] = _project_set(
            model.sentiment_prototypes, sentiment_view, train.ids, pools)
    model.bump_version()
    return model, projection_map


def _project_set(prototypes: proto_head.PrototypeSet, embeddings: np.ndarray,
                 ids: np.ndarray, polarity_pools: dict | None = None) -> list:
    norms = np.linalg.norm(embeddings, axis=1)
    safe = np.where(norms > 0.0, norms, 1.0)
    unit = embeddings / safe[:, None]
    chosen_ids = []
    for k in range(prototypes.count):
        positions = np.arange(embeddings.shape[0])
        if polarity_pools is not None and prototypes.polarity is not None:
            pool = polarity_pools[prototypes.polarity[k]]
            if pool.size > 0:  # fall back to all records for an empty pool
                positions = pool
        vec = prototypes.vectors[k]
        norm = np.linalg.norm(vec)
        sims = unit[positions] @ (vec / norm) if norm > 0.0 else np.zeros(positions.size)
        best = positions[int(np.argmax(sims))]  # argmax picks the lowest position on ties
        prototypes.vectors[k] = embeddings[best]
        chosen_ids.append(int(ids[best]))
    prototypes.exemplar_ids = chosen_ids.copy()
    return chosen_ids


def _features_for(model, views_row: np.ndarray):
    if model.kind == "ga" and model.feature_count == 3:
        features, _ = losses.incongruity_features(
            views_row[0], views_row[1], model.sentiment_prototypes)
        return features
    return None


def evaluate(model, dataset: EmbeddingDataset) -> EvalResult:
    """Accuracy, mean cross-entropy, and the confusion matrix (rows = truth)."""
    if dataset.dim != model.dim:
        raise DataValidationError(
            f"dataset dim {dataset.dim} does not match model dim {model.dim}")
    if model.kind == "ga" and model.feature_count == 3 and dataset.num_views != 2:
        raise DataValidationError("a two-view model needs a two-view dataset to evaluate")
    num_classes = model.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    loss_sum = 0.0
    correct = 0
    for i in range(len(dataset)):
        views_row = dataset.views[i]
        if model.kind == "ga":
            probs, _, _ = proto_head.ga_forward(model, views_row[0],
                                                _features_for(model, views_row))
        else:
            probs, _, _ = proto_head.cosine_forward(model, views_row[0])
        label = int(dataset.labels[i])
        if label >= num_classes:
            raise DataValidationError(
                f"dataset label {label} out of range for a {num_classes}-class model")
        prediction = int(np.argmax(probs))  # ties -> lower class index
        confusion[label, prediction] += 1
        loss_sum += losses.cross_entropy(probs, label)
        correct += int(prediction == label)
    n = len(dataset)
    return EvalResult(accuracy=correct / n, mean_loss=loss_sum / n, confusion=confusion)


def _projection_scheduled(epoch: int, config: TrainConfig) -> bool:
    return (epoch >= config.projection_start
            and (epoch - config.projection_start) % config.projection_period == 0)


def train(config: TrainConfig, train_ds: EmbeddingDataset, val_ds: EmbeddingDataset,
          test_ds: EmbeddingDataset, polarity_hints: np.ndarray | None = None):
    """Train a head; returns ``(model, TrainReport)``.

    The retained model is the best-validation-accuracy snapshot (ties favor
    the earlier epoch), with a mandatory final projection so every prototype
    cites a training exemplar.
    """
    config.validate()
    started = time.perf_counter()
    for name, ds in (("val", val_ds), ("test", test_ds)):
        if (ds.dim, ds.num_classes, ds.num_views) != (
                train_ds.dim, train_ds.num_classes, train_ds.num_views):
            raise DataValidationError(
                f"{name} dataset shape (dim={ds.dim}, classes={ds.num_classes}, "
                f"views={ds.num_views}) does not match the training set")
    if config.two_view:
        if train_ds.num_views != 2:
            raise DataValidationError(
                "two_view config needs a two-view dataset; use single-view mode instead")
        if train_ds.num_classes != 2:
            raise DataValidationError("two-view (incongruity) mode is binary-only")
    weights = config.loss_weights()
    model = proto_head.init_head(config, train_ds, polarity_hints=polarity_hints)
    state = numerics.AdamState.for_params(
        model.trainable_params(), learning_rate=config.learning_rate,
        beta1=config.beta1, beta2=config.beta2, epsilon=config.epsilon)

    report = TrainReport(seed=config.seed)
    best_model = None
    best_accuracy = -1.0
    epochs_since_best = 0
    n = len(train_ds)
    for epoch in range(1, config.epochs + 1):
        order = _epoch_rng(config.seed, epoch).permutation(n)
        loss_weighted_sum = 0.0
        correct = 0
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            views = train_ds.views[batch]
            labels = train_ds.labels[batch]
            loss, grads, aux = batch_loss_and_grads(model, views, labels, weights,
                                                    parallel=config.parallel)
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"non-finite loss at epoch {epoch}, batch {start // config.batch_size}")
            numerics.adam_step(model.trainable_params(), grads, state)
            model.bump_version()
            loss_weighted_sum += loss * batch.size
            correct += sum(int(p == y) for p, y in zip(aux["predictions"], labels))
        projected = _projection_scheduled(epoch, config)
        if projected:
            project_prototypes(model, train_ds, polarity_hints)
            report.projection_events.append({"epoch": epoch, "stage": "scheduled"})
        val = evaluate(model, val_ds)
        report.epochs.append(EpochStats(
            epoch=epoch,
            train_loss=loss_weighted_sum / n,
            train_accuracy=correct / n,
            val_loss=val.mean_loss,
            val_accuracy=val.accuracy,
            projected=projected,
        ))
        if val.accuracy > best_accuracy:
            best_accuracy = val.accuracy
            best_model = model.copy()
            report.best_epoch = epoch
            epochs_since_best = 0
        else:
            epochs_since_best += 1
            if epochs_since_best >= config.patience:
                report.stopped_early = True
                break

    model = best_model
    report.best_val_accuracy = best_accuracy
    project_prototypes(model, train_ds, polarity_hints)
    report.projection_events.append({"epoch": report.best_epoch, "stage": "final"})
    test = evaluate(model, test_ds)
    report.final_test_accuracy = test.accuracy
    report.final_test_loss = test.mean_loss
    report.wall_clock_seconds = time.perf_counter() - started
    return model, report


def _gradcheck_setup(head: str, two_view: bool, seed: int):
    """Tiny seeded instance exercising every gradient path."""
    data_config = SyntheticConfig(
        num_classes=2, dim=4, per_class=6, separation=2.0, noise=0.6,
        views=2 if two_view else 1, incongruity_rate=0.5, seed=seed)
    dataset = gen_synthetic(data_config)
    config = TrainConfig(
        head=head, num_prototypes=3, num_heads=2, attention_dim=2, neighbor_count=2,
        batch_size=5, seed=seed, two_view=two_view, num_sentiment_prototypes=4,
        # d_min above the typical prototype spacing so the separation hinge
        # is active and its gradient path is actually exercised
        d_min=3.0)
    model = proto_head.init_head(config, dataset)
    positions = np.arange(0, len(dataset), 2)[:5]  # both labels represented
    views = dataset.views[positions]
    labels = dataset.labels[positions]
    return model, config, views, labels


def gradcheck(head: str = "ga", two_view: bool = False, seed: int = 0,
              tolerance: float = GRADCHECK_TOLERANCE) -> GradCheckReport:
    """Compare analytic gradients against central differences, block by block.

    Relative error per coordinate is ``|a - b| / max(1e-8, |a| + |b|)``; a
    block fails when its max exceeds ``tolerance``.  The report always comes
    back so callers can display every block before acting on ``passed``.
    """
    if head not in ("ga", "cosine"):
        raise ValueError(f"head must be 'ga' or 'cosine', got {head!r}")
    model, config, views, labels = _gradcheck_setup(head, two_view, seed)
    weights = config.loss_weights()
    _, analytic, _ = batch_loss_and_grads(model, views, labels, weights)

    def loss_value(_):
        return batch_loss_and_grads(model, views, labels, weights)[0]

    block_errors = {}
    for name, param in model.trainable_params().items():
        # finite_diff_grad perturbs the live parameter array in place and
        # restores it exactly, so the model needs no copying here
        numeric = numerics.finite_diff_grad(loss_value, param)
        a = analytic[name].ravel()
        b = numeric.ravel()
        denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
        block_errors[name] = float(np.max(np.abs(a - b) / denom))
    passed = all(err <= tolerance for err in block_errors.values())
    return GradCheckReport(head=head, two_view=two_view, seed=seed,
                           tolerance=tolerance, block_errors=block_errors, passed=passed)
