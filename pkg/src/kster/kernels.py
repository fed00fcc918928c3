"""Kernel weighting of retrieved neighbors and distribution mixing.

All kernel math stays in log space; weights are a max-shifted softmax over
the log kernel values.
"""
from enum import Enum

import numpy as np


class KernelKind(str, Enum):
    GAUSSIAN = "gaussian"
    LAPLACIAN = "laplacian"


def kernel_exponent_base(distances, kind):
    """The distance term that the bandwidth divides: d^2 or d."""
    d = np.asarray(distances, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    return d * d if KernelKind(kind) is KernelKind.GAUSSIAN else d


def kernel_log_weights(distances, sigma, kind=KernelKind.GAUSSIAN):
    """Unnormalized log kernel values: -d^2/sigma (Gaussian), -d/sigma (Laplacian)."""
    if not sigma > 0:
        raise ValueError(f"bandwidth must be positive, got {sigma}")
    return -kernel_exponent_base(distances, kind) / sigma


def normalize_weights(log_weights, axis=-1):
    lw = np.asarray(log_weights, dtype=np.float64)
    if lw.size == 0 or lw.shape[axis] == 0:
        raise ValueError("cannot normalize an empty weight vector")
    z = np.exp(lw - lw.max(axis=axis, keepdims=True))
    return z / z.sum(axis=axis, keepdims=True)


def example_distribution(neighbors, weights):
    """Aggregate neighbor weights by value token -> ``{token: probability}``.

    ``neighbors`` may be :class:`~kster.vecstore.Neighbor` objects or plain
    token ids.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if len(neighbors) != weights.shape[0]:
        raise ValueError(
            f"{len(neighbors)} neighbors but {weights.shape[0]} weights")
    dist = {}
    for nb, w in zip(neighbors, weights):
        token = int(getattr(nb, "value", nb))
        dist[token] = dist.get(token, 0.0) + float(w)
    return dist


def densify(sparse, vocab_size):
    out = np.zeros(vocab_size)
    for token, prob in sparse.items():
        if token >= vocab_size:
            raise ValueError(f"token {token} outside vocabulary of {vocab_size}")
        out[token] += prob
    return out


def mix(p_model, p_example, lam):
    """``lam * p_example + (1 - lam) * p_model`` as a dense vector.

    ``p_example`` is sparse (a dict); an empty dict contributes nothing and
    the result is ``p_model``.
    """
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"mixing weight must lie in [0, 1], got {lam}")
    p_model = np.asarray(p_model, dtype=np.float64)
    if abs(p_model.sum() - 1.0) > 1e-6:
        raise ValueError("model distribution does not sum to 1")
    if not p_example:
        return p_model.copy()
    return lam * densify(p_example, p_model.shape[0]) + (1.0 - lam) * p_model


def knnmt_distribution(p_model, neighbors, temperature, lam):
    """Fixed Gaussian kernel with bandwidth ``temperature`` and fixed mixing weight."""
    if len(neighbors) == 0:
        return mix(p_model, {}, lam)
    distances = [nb.distance for nb in neighbors]
    weights = normalize_weights(
        kernel_log_weights(distances, temperature, KernelKind.GAUSSIAN))
    return mix(p_model, example_distribution(neighbors, weights), lam)
