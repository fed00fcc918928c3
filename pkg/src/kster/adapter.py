"""Trainable smoothing head: bandwidth network, mixing-weight MLP, gradients, Adam.

Shapes: ``d`` is the query/key dimension and ``h`` the mixing MLP width.
The bandwidth is one scalar per decoding step::

    sigma  = exp(w1 . [q; mean(keys)] + b1)
    w      = softmax(-dist**2 / sigma)           (Gaussian; -dist / sigma for Laplacian)
    lam    = sigmoid(w3 . relu(W2 [q; w @ keys] + b2) + b3)
    p      = lam * p_example + (1 - lam) * p_model

The base model is frozen, so gradients are taken with respect to the head's
parameters only. Everything runs in float64.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from kster.kernels import KernelKind, kernel_exponent_base

PROB_FLOOR = 1e-12
Z_LIMIT = 700.0
CKPT_MAGIC = b"KADP"
CKPT_VERSION = 1
_KIND_CODES = {KernelKind.GAUSSIAN: 0, KernelKind.LAPLACIAN: 1}

KERNEL_GROUP = ("w1", "b1")
WEIGHT_GROUP = ("W2", "b2", "w3", "b3")
PARAM_ORDER = KERNEL_GROUP + WEIGHT_GROUP


@dataclass
class AdapterParams:
    w1: np.ndarray
    b1: float
    W2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: float
    kind: KernelKind = KernelKind.GAUSSIAN

    @property
    def d(self):
        return self.w1.shape[0] // 2

    @property
    def h(self):
        return self.W2.shape[0]

    @staticmethod
    def count_for(d, h):
        return (2 * d + 1) + (h * 2 * d + h) + (h + 1)

    def parameter_count(self):
        return self.count_for(self.d, self.h)

    def to_vector(self):
        return np.concatenate([np.ravel(getattr(self, n)).astype(np.float64)
                               for n in PARAM_ORDER])

    def with_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.parameter_count(),):
            raise ValueError("parameter vector has the wrong length")
        out, pos = {}, 0
        for n in PARAM_ORDER:
            ref = np.asarray(getattr(self, n))
            size = ref.size
            chunk = vec[pos:pos + size]
            out[n] = float(chunk[0]) if ref.ndim == 0 else chunk.reshape(ref.shape).copy()
            pos += size
        return replace(self, **out)

    def zeros_like(self):
        return self.with_vector(np.zeros(self.parameter_count()))

    def copy(self):
        return self.with_vector(self.to_vector())

    def group_mask(self, learn_kernel=True, learn_weight=True):
        """Boolean mask over ``to_vector()`` selecting the trainable groups."""
        mask = []
        for n in PARAM_ORDER:
            on = learn_kernel if n in KERNEL_GROUP else learn_weight
            mask.append(np.full(np.asarray(getattr(self, n)).size, on))
        return np.concatenate(mask)


def _xavier(rng, fan_out, fan_in, shape):
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def adapter_init(d, h=None, kind=KernelKind.GAUSSIAN, seed=0, calibration_distances=None):
    """Xavier-uniform weights, zero MLP biases, bandwidth bias from calibration.

    With calibration distances the initial bandwidth is the mean of d^2
    (Gaussian) or d (Laplacian), so initial kernel exponents are O(1).
    """
    h = d if h is None else h
    if d < 1 or h < 1:
        raise ValueError("d and h must be >= 1")
    kind = KernelKind(kind)
    rng = np.random.default_rng(seed)
    w1 = _xavier(rng, 1, 2 * d, 2 * d)
    W2 = _xavier(rng, h, 2 * d, (h, 2 * d))
    w3 = _xavier(rng, 1, h, h)
    b1 = 0.0
    if calibration_distances is not None and len(calibration_distances):
        scale = float(np.mean(kernel_exponent_base(calibration_distances, kind)))
        if scale > 0:
            b1 = math.log(scale)
    return AdapterParams(w1, b1, W2, np.zeros(h), w3, 0.0, kind)


def logit(p):
    if p <= 0.0:
        return -math.inf
    if p >= 1.0:
        return math.inf
    return math.log(p) - math.log1p(-p)


def fix_bandwidth(params, sigma):
    """Force a constant bandwidth: zero the affine weights, set the bias."""
    return replace(params, w1=np.zeros_like(params.w1), b1=math.log(sigma))


def fix_mixing_weight(params, lam):
    """Force a constant mixing weight through the output bias alone."""
    return replace(params, W2=np.zeros_like(params.W2), b2=np.zeros_like(params.b2),
                   w3=np.zeros_like(params.w3), b3=logit(lam))


def sigmoid(z):
    z = np.asarray(z, dtype=np.float64)
    ez = np.exp(-np.abs(z))
    return np.where(z >= 0, 1.0 / (1.0 + ez), ez / (1.0 + ez))


# batched core ---------------------------------------------------------------

def forward_batch(params, queries, keys, distances):
    """Bandwidth, kernel weights and mixing weight for a batch of steps.

    ``queries`` (B, d), ``keys`` (B, k, d), ``distances`` (B, k), k >= 1.
    Returns a cache dict consumed by :func:`backward_batch`.
    """
    Q = np.asarray(queries, dtype=np.float64)
    K = np.asarray(keys, dtype=np.float64)
    D = np.asarray(distances, dtype=np.float64)
    d = params.d
    x1 = np.concatenate([Q, K.mean(axis=1)], axis=1)
    # keeps sigma and 1/sigma finite; beyond this range the kernel is already saturated
    z1 = np.clip(x1 @ params.w1 + params.b1, -Z_LIMIT, Z_LIMIT)
    logits = -kernel_exponent_base(D, params.kind) * np.exp(-z1)[:, None]
    shifted = np.exp(logits - logits.max(axis=1, keepdims=True))
    w = shifted / shifted.sum(axis=1, keepdims=True)
    k_tilde = np.einsum("bk,bkd->bd", w, K)
    x2 = np.concatenate([Q, k_tilde], axis=1)
    a = x2 @ params.W2.T + params.b2
    hidden = np.maximum(a, 0.0)
    z3 = hidden @ params.w3 + params.b3
    lam = sigmoid(z3)
    assert x1.shape[1] == 2 * d
    return dict(K=K, x1=x1, z1=z1, sigma=np.exp(z1), logits=logits, w=w,
                k_tilde=k_tilde, x2=x2, a=a, hidden=hidden, z3=z3, lam=lam)


def gold_probabilities(cache, values, gold, p_model_gold):
    """Per-step p_e(y), p(y) for gold tokens given the forward cache."""
    hit = np.asarray(values) == np.asarray(gold)[:, None]
    pe_y = np.sum(cache["w"] * hit, axis=1)
    lam = cache["lam"]
    p_y = lam * pe_y + (1.0 - lam) * np.asarray(p_model_gold, dtype=np.float64)
    return pe_y, p_y, hit


def batch_loss(p_y):
    return -np.log(np.maximum(p_y, PROB_FLOOR))


def backward_batch(params, cache, values, gold, p_model_gold):
    """Gradient of the summed cross-entropy over the batch -> AdapterParams.

    The normalized kernel weights feed both the example distribution and
    the weighted key sum, so their gradient collects both contributions.
    """
    pm_y = np.asarray(p_model_gold, dtype=np.float64)
    pe_y, p_y, hit = gold_probabilities(cache, values, gold, pm_y)
    lam, w = cache["lam"], cache["w"]
    g_p = np.where(p_y < PROB_FLOOR, 0.0, -1.0 / np.maximum(p_y, PROB_FLOOR))

    g_z3 = g_p * (pe_y - pm_y) * lam * (1.0 - lam)
    g_w3 = cache["hidden"].T @ g_z3
    g_a = np.outer(g_z3, params.w3) * (cache["a"] > 0)
    g_W2 = g_a.T @ cache["x2"]
    g_b2 = g_a.sum(axis=0)
    g_ktilde = g_a @ params.W2[:, params.d:]

    g_w = np.einsum("bd,bkd->bk", g_ktilde, cache["K"]) + (g_p * lam)[:, None] * hit
    g_logits = w * (g_w - np.sum(w * g_w, axis=1, keepdims=True))
    # logits = -base * exp(-z1)  =>  d logits / d z1 = -logits
    g_z1 = -np.sum(g_logits * cache["logits"], axis=1)
    g_z1 = np.where(np.abs(cache["z1"]) >= Z_LIMIT, 0.0, g_z1)
    return AdapterParams(
        w1=cache["x1"].T @ g_z1, b1=float(g_z1.sum()),
        W2=g_W2, b2=g_b2, w3=g_w3, b3=float(g_z3.sum()), kind=params.kind)


# single step ----------------------------------------------------------------

@dataclass
class StepTape:
    params: AdapterParams
    q: np.ndarray
    keys: np.ndarray
    values: np.ndarray
    distances: np.ndarray
    p_model: np.ndarray
    degenerate: bool
    cache: dict = field(default_factory=dict)
    p_example: dict = field(default_factory=dict)
    p: np.ndarray | None = None

    @property
    def sigma(self):
        return None if self.degenerate else float(self.cache["sigma"][0])

    @property
    def lam(self):
        return 0.0 if self.degenerate else float(self.cache["lam"][0])

    @property
    def weights(self):
        return None if self.degenerate else self.cache["w"][0]

    @property
    def k_bar(self):
        return None if self.degenerate else self.cache["x1"][0, self.params.d:]

    @property
    def k_tilde(self):
        return None if self.degenerate else self.cache["k_tilde"][0]


def bandwidth_forward(params, q, keys):
    """sigma and the mean-pooled key for one step."""
    keys = np.asarray(keys, dtype=np.float64)
    if keys.shape[0] == 0:
        raise ValueError("bandwidth needs at least one neighbor")
    k_bar = keys.mean(axis=0)
    z1 = float(np.dot(params.w1, np.concatenate([np.asarray(q, dtype=np.float64), k_bar])) + params.b1)
    return math.exp(min(max(z1, -Z_LIMIT), Z_LIMIT)), k_bar


def mixing_forward(params, q, keys, weights):
    """Mixing weight and the kernel-weighted key sum for one step."""
    keys = np.asarray(keys, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    if keys.shape[0] != weights.shape[0]:
        raise ValueError("keys and weights differ in length")
    k_tilde = weights @ keys
    x2 = np.concatenate([np.asarray(q, dtype=np.float64), k_tilde])
    hidden = np.maximum(params.W2 @ x2 + params.b2, 0.0)
    return float(sigmoid(hidden @ params.w3 + params.b3)), k_tilde


def forward_step(params, q, keys, values, distances, p_model):
    """Smoothed next-token distribution for one step -> (p, tape).

    With no neighbors the result is ``p_model`` and the tape is degenerate.
    """
    q = np.asarray(q, dtype=np.float64)
    keys = np.asarray(keys, dtype=np.float64).reshape(-1, q.shape[0])
    values = np.asarray(values, dtype=np.int64)
    distances = np.asarray(distances, dtype=np.float64)
    p_model = np.asarray(p_model, dtype=np.float64)
    if q.shape[0] != params.d:
        raise ValueError(f"query dim {q.shape[0]} does not match adapter dim {params.d}")
    if not keys.shape[0] == values.shape[0] == distances.shape[0]:
        raise ValueError("keys, values and distances differ in length")
    tape = StepTape(params, q, keys, values, distances, p_model, keys.shape[0] == 0)
    tape.p = replay(tape)
    return tape.p, tape


def replay(tape):
    """Recompute the mixture from the inputs recorded on ``tape``."""
    if tape.degenerate:
        tape.cache, tape.p_example = {}, {}
        return tape.p_model.copy()
    cache = forward_batch(tape.params, tape.q[None], tape.keys[None], tape.distances[None])
    w = cache["w"][0]
    lam = cache["lam"][0]
    p_example = np.zeros_like(tape.p_model)
    np.add.at(p_example, tape.values, w)
    tape.cache = cache
    tape.p_example = {int(t): float(p_example[t]) for t in np.unique(tape.values)}
    return lam * p_example + (1.0 - lam) * tape.p_model


def step_loss(p, y):
    p = np.asarray(p)
    if not 0 <= y < p.shape[0]:
        raise ValueError(f"gold token {y} outside vocabulary of {p.shape[0]}")
    return float(-math.log(max(float(p[y]), PROB_FLOOR)))


def backward_step(tape, y):
    if not 0 <= y < tape.p_model.shape[0]:
        raise ValueError(f"gold token {y} outside vocabulary")
    if tape.degenerate:
        return tape.params.zeros_like()
    return backward_batch(tape.params, tape.cache, tape.values[None], np.array([y]),
                          tape.p_model[[y]])


# optimizer ------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_params(cls, params, lr=2e-4):
        n = params.parameter_count()
        return cls(np.zeros(n), np.zeros(n), 0, lr)


def adam_update(params, grads, state, mask=None):
    """One bias-corrected Adam step; entries outside ``mask`` stay fixed."""
    g = grads.to_vector() if isinstance(grads, AdapterParams) else np.asarray(grads, dtype=np.float64)
    if mask is not None:
        g = np.where(mask, g, 0.0)
    state.t += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * g
    state.v = state.beta2 * state.v + (1 - state.beta2) * g * g
    m_hat = state.m / (1 - state.beta1 ** state.t)
    v_hat = state.v / (1 - state.beta2 ** state.t)
    step = state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
    if mask is not None:
        step = np.where(mask, step, 0.0)
    return params.with_vector(params.to_vector() - step), state


# checkpoints ----------------------------------------------------------------

def ckpt_save(params, path, state=None):
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<IBII", CKPT_VERSION, _KIND_CODES[KernelKind(params.kind)],
                             params.d, params.h))
        fh.write(params.to_vector().astype("<f4").tobytes())
        if state is not None:
            fh.write(struct.pack("<Q", state.t))
            fh.write(state.m.astype("<f4").tobytes())
            fh.write(state.v.astype("<f4").tobytes())


def ckpt_load(path, lr=2e-4):
    """-> (params, AdamState or None). Values come back as float32-exact float64."""
    data = Path(path).read_bytes()
    head = 4 + struct.calcsize("<IBII")
    if data[:4] != CKPT_MAGIC:
        raise ValueError("bad magic, not an adapter checkpoint")
    if len(data) < head:
        raise ValueError("truncated checkpoint")
    version, kind_code, d, h = struct.unpack("<IBII", data[4:head])
    if version != CKPT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    kind = {v: k for k, v in _KIND_CODES.items()}[kind_code]
    n = AdapterParams.count_for(d, h)
    body = data[head:]
    if len(body) < 4 * n:
        raise ValueError("truncated checkpoint")
    template = AdapterParams(np.zeros(2 * d), 0.0, np.zeros((h, 2 * d)), np.zeros(h),
                             np.zeros(h), 0.0, kind)
    params = template.with_vector(np.frombuffer(body[:4 * n], dtype="<f4").astype(np.float64))
    rest = body[4 * n:]
    if not rest:
        return params, None
    if len(rest) != 8 + 8 * n:
        raise ValueError("truncated optimizer state in checkpoint")
    (t,) = struct.unpack("<Q", rest[:8])
    moments = np.frombuffer(rest[8:], dtype="<f4").astype(np.float64)
    return params, AdamState(moments[:n].copy(), moments[n:].copy(), int(t), lr)


def finite_difference_gradient(loss_fn, params, eps=1e-4, mask=None):
    """Central differences of ``loss_fn(params)`` over every (masked) entry."""
    base = params.to_vector()
    grad = np.zeros_like(base)
    for i in range(base.shape[0]):
        if mask is not None and not mask[i]:
            continue
        plus, minus = base.copy(), base.copy()
        plus[i] += eps
        minus[i] -= eps
        grad[i] = (loss_fn(params.with_vector(plus)) - loss_fn(params.with_vector(minus))) / (2 * eps)
    return grad

