"""Small input checks shared by the estimators."""
import numpy as np


def check_vector(x, dim=None, name="vector", dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {x.shape}")
    if dim is not None and x.shape[0] != dim:
        raise ValueError(f"{name} has dim {x.shape[0]}, expected {dim}")
    return x


def check_matrix(x, dim=None, name="matrix", dtype=np.float64):
    x = np.asarray(x, dtype=dtype)
    if x.ndim == 1 and x.size == 0:
        x = x.reshape(0, dim or 0)
    if x.ndim != 2:
        raise ValueError(f"{name} must be 2-D, got shape {x.shape}")
    if dim is not None and x.shape[1] != dim:
        raise ValueError(f"{name} has dim {x.shape[1]}, expected {dim}")
    return x


def check_distribution(p, name="distribution", atol=1e-6):
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError(f"{name} must be 1-D")
    if np.any(p < 0) or abs(p.sum() - 1.0) > atol:
        raise ValueError(f"{name} is not a probability distribution")
    return p


def check_positive_int(value, name, minimum=1):
    if int(value) != value or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_pairs(sources, targets):
    if len(sources) != len(targets):
        raise ValueError(
            f"got {len(sources)} sources but {len(targets)} targets")
    for i, (s, t) in enumerate(zip(sources, targets)):
        if len(s) == 0 or len(t) == 0:
            raise ValueError(f"sentence {i} is empty")
