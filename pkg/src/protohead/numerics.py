"""Dense numeric kernels with pinned semantics.

Everything here runs in 64-bit floats.  The kernels are deliberately small and
exactly specified (max-subtracted softmax, masked softmax with hard zeros,
Adam with bias correction, central-difference gradients, deterministic 2-D
PCA) because the rest of the package builds its correctness story on them:
analytic gradients are checked against ``finite_diff_grad`` and vectorized
forwards against scalar-loop oracles in the test suite.

``math.fsum`` is used for reductions indexed by prototype so that relabeling
prototypes cannot perturb rounding; this is what makes the head's permutation
equivariance exact at the bit level rather than merely approximate.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np

LEAKY_RELU_SLOPE = 0.2  # standard graph-attention choice


class ZeroNormWarning(UserWarning):
    """Raised (as a warning) when a cosine similarity sees a zero vector."""


def require_finite(name: str, arr: np.ndarray) -> None:
    """Raise ``ValueError`` naming ``name`` if ``arr`` has NaN or Inf entries."""
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"non-finite values in {name}")


def stable_softmax(logits: np.ndarray) -> np.ndarray:
    """Softmax computed with max-subtraction.

    Invariant under adding a constant to all logits; the output sums to 1
    within 1e-12.  Entries are non-negative and positive whenever the logit
    gap stays below the exp underflow threshold (~745).
    """
    logits = np.asarray(logits, dtype=np.float64)
    if logits.size == 0:
        raise ValueError("softmax of empty logits")
    require_finite("softmax logits", logits)
    shifted = logits - np.max(logits)
    exps = np.exp(shifted)
    # fsum is exactly rounded, hence independent of summand order.
    return exps / math.fsum(exps)


def masked_softmax(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the ``mask``-selected entries; exact zeros elsewhere."""
    logits = np.asarray(logits, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if logits.shape != mask.shape:
        raise ValueError(f"logits shape {logits.shape} != mask shape {mask.shape}")
    if not mask.any():
        raise ValueError("masked_softmax requires at least one selected entry")
    out = np.zeros_like(logits)
    out[mask] = stable_softmax(logits[mask])
    return out


def leaky_relu(x, slope: float = LEAKY_RELU_SLOPE):
    """x for x >= 0, slope*x otherwise.  Works on scalars and arrays."""
    if not 0.0 < slope < 1.0:
        raise ValueError(f"leaky_relu slope must lie in (0, 1), got {slope}")
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, x, slope * x)
    return float(out) if out.ndim == 0 else out


def leaky_relu_grad(x, slope: float = LEAKY_RELU_SLOPE):
    """Derivative of :func:`leaky_relu`; the kink at 0 takes the value 1."""
    x = np.asarray(x, dtype=np.float64)
    out = np.where(x >= 0.0, 1.0, slope)
    return float(out) if out.ndim == 0 else out


def cosine_similarity(u: np.ndarray, v: np.ndarray) -> float:
    """Cosine of the angle between ``u`` and ``v``, clamped to [-1, 1].

    A zero-norm input is degenerate rather than fatal: the result is defined
    as 0.0 and a :class:`ZeroNormWarning` is emitted, so projection-time
    pathologies cannot abort training.
    """
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    nu = np.linalg.norm(u)
    nv = np.linalg.norm(v)
    if nu == 0.0 or nv == 0.0:
        warnings.warn("cosine_similarity of a zero vector is defined as 0", ZeroNormWarning)
        return 0.0
    return float(np.clip(np.dot(u, v) / (nu * nv), -1.0, 1.0))


def cosine_to_rows(x: np.ndarray, rows: np.ndarray) -> np.ndarray:
    """Cosine similarity of ``x`` against every row of ``rows``.

    Vectorized companion of :func:`cosine_similarity` with the same
    degenerate-input policy (zero-norm rows or a zero-norm ``x`` yield 0.0).
    """
    x = np.asarray(x, dtype=np.float64)
    rows = np.asarray(rows, dtype=np.float64)
    nx = np.linalg.norm(x)
    row_norms = np.linalg.norm(rows, axis=1)
    if nx == 0.0 or np.any(row_norms == 0.0):
        warnings.warn("cosine similarity of a zero vector is defined as 0", ZeroNormWarning)
        if nx == 0.0:
            return np.zeros(rows.shape[0])
    sims = np.zeros(rows.shape[0])
    ok = row_norms > 0.0
    sims[ok] = (rows[ok] @ x) / (row_norms[ok] * nx)
    return np.clip(sims, -1.0, 1.0)


@dataclass
class AdamState:
    """Adam accumulators for a named set of parameter blocks.

    Single-owner mutable: :func:`adam_step` updates the moments and the step
    counter in place.  Accumulators are zero at step 0 and the counter
    increments by exactly one per step.
    """

    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: dict = field(default_factory=dict)
    second_moment: dict = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: dict, learning_rate: float, beta1: float = 0.9,
                   beta2: float = 0.999, epsilon: float = 1e-8) -> "AdamState":
        state = cls(learning_rate=learning_rate, beta1=beta1, beta2=beta2, epsilon=epsilon)
        for name, value in params.items():
            state.first_moment[name] = np.zeros_like(value)
            state.second_moment[name] = np.zeros_like(value)
        return state


def adam_step(params: dict, grads: dict, state: AdamState) -> tuple[dict, AdamState]:
    """One Adam update with bias correction, applied in place.

    ``params`` and ``grads`` map block names to same-shape float64 arrays.
    Blocks are visited in the insertion order of ``params``, so repeated runs
    with identical inputs produce identical states bit for bit.
    """
    state.step_count += 1
    t = state.step_count
    bias1 = 1.0 - state.beta1 ** t
    bias2 = 1.0 - state.beta2 ** t
    for name, value in params.items():
        grad = grads[name]
        if grad.shape != value.shape:
            raise ValueError(f"gradient shape {grad.shape} != parameter shape "
                             f"{value.shape} for block {name!r}")
        if not np.all(np.isfinite(grad)):
            raise ValueError(f"non-finite gradient for parameter block {name!r}")
        m = state.first_moment[name]
        v = state.second_moment[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad * grad
        m_hat = m / bias1
        v_hat = v / bias2
        value -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
    return params, state


def finite_diff_grad(f, theta: np.ndarray, step: float | None = None) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function.

    Per coordinate: ``(f(theta + h e_i) - f(theta - h e_i)) / (2 h)`` with
    ``h = step`` when given, otherwise ``1e-5 * max(1, |theta_i|)`` which
    balances truncation against rounding error.
    """
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    flat = theta.ravel()
    out = grad.ravel()
    for i in range(flat.size):
        h = step if step is not None else 1e-5 * max(1.0, abs(flat[i]))
        if h <= 0.0:
            raise ValueError("finite difference step must be positive")
        orig = flat[i]
        flat[i] = orig + h
        f_plus = f(theta)
        flat[i] = orig - h
        f_minus = f(theta)
        flat[i] = orig
        if not (np.isfinite(f_plus) and np.isfinite(f_minus)):
            raise ValueError(f"non-finite function value at coordinate {i}")
        out[i] = (f_plus - f_minus) / (2.0 * h)
    return grad


def pca_2d(points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean-centered projection onto the top-2 principal components.

    Returns ``(coords, explained)`` where ``coords`` is N x 2 and
    ``explained`` holds the two leading eigenvalues of the sample covariance
    (``1/(N-1)`` convention), in descending order.  Sign convention: the
    largest-magnitude loading of each component is positive, which makes the
    layout deterministic.
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise ValueError(f"expected an N x D matrix, got shape {points.shape}")
    n = points.shape[0]
    if n < 3:
        raise ValueError(f"pca_2d needs at least 3 points, got {n}")
    require_finite("pca input", points)
    centered = points - points.mean(axis=0)
    _, singular, vt = np.linalg.svd(centered, full_matrices=False)
    if singular.size == 0 or singular[0] == 0.0:
        raise ValueError("pca_2d of rank-0 data (all points identical)")
    variances = singular ** 2 / (n - 1)
    coords = np.zeros((n, 2))
    explained = np.zeros(2)
    for comp in range(min(2, vt.shape[0])):
        direction = vt[comp]
        pivot = int(np.argmax(np.abs(direction)))
        if direction[pivot] < 0.0:
            direction = -direction
        coords[:, comp] = centered @ direction
        explained[comp] = variances[comp]
    return coords, explained
