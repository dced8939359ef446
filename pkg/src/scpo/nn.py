"""Dense tanh networks with hand-written reverse mode, policy heads and Adam.

Parameters are plain ``dict[str, ndarray]`` so the optimizer and checkpoint
code treat every network (and the Gaussian ``log_std``) uniformly.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_VERSION = 1
LOG_2PI = float(np.log(2 * np.pi))


class NonFiniteError(FloatingPointError):
    """Raised when a gradient or loss stops being finite."""


# --------------------------------------------------------------------------
# MLP
# --------------------------------------------------------------------------

@dataclass
class MlpParams:
    """Weights ``W{i}`` of shape (fan_in, fan_out) and biases ``b{i}``."""

    tensors: dict[str, np.ndarray]

    @property
    def n_layers(self) -> int:
        return len(self.tensors) // 2

    @property
    def sizes(self) -> list[int]:
        return [self.tensors["W0"].shape[0]] + [self.tensors[f"W{i}"].shape[1] for i in range(self.n_layers)]

    def copy(self) -> "MlpParams":
        return MlpParams({k: v.copy() for k, v in self.tensors.items()})


def _orthogonal(rng, fan_in, fan_out, gain):
    a = rng.standard_normal((max(fan_in, fan_out), min(fan_in, fan_out)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if fan_in < fan_out:
        q = q.T
    return gain * q[:fan_in, :fan_out]


def init_mlp(sizes, rng: np.random.Generator, hidden_gain: float = 1.0, out_gain: float = 1.0) -> MlpParams:
    """Orthogonal weights, zero biases; ``sizes = [in, hidden..., out]``."""
    tensors = {}
    n = len(sizes) - 1
    for i in range(n):
        gain = out_gain if i == n - 1 else hidden_gain
        tensors[f"W{i}"] = _orthogonal(rng, sizes[i], sizes[i + 1], gain)
        tensors[f"b{i}"] = np.zeros(sizes[i + 1])
    return MlpParams(tensors)


def forward(params: MlpParams, x) -> tuple[np.ndarray, list]:
    """Return the linear output layer and a cache for :func:`backward`."""
    h = np.asarray(x, dtype=float)
    single = h.ndim == 1
    h = np.atleast_2d(h)
    if h.shape[1] != params.tensors["W0"].shape[0]:
        raise ValueError(f"input dimension {h.shape[1]} != {params.tensors['W0'].shape[0]}")
    cache = [h]
    n = params.n_layers
    for i in range(n):
        z = h @ params.tensors[f"W{i}"] + params.tensors[f"b{i}"]
        h = np.tanh(z) if i < n - 1 else z
        cache.append(h)
    out = h[0] if single else h
    return out, cache


def backward(params: MlpParams, cache: list, grad_out) -> dict[str, np.ndarray]:
    """Gradients of ``sum(grad_out * output)`` with respect to every tensor."""
    g = np.atleast_2d(np.asarray(grad_out, dtype=float))
    grads = {}
    n = params.n_layers
    for i in range(n - 1, -1, -1):
        h_in = cache[i]
        grads[f"W{i}"] = h_in.T @ g
        grads[f"b{i}"] = g.sum(axis=0)
        if i > 0:
            g = (g @ params.tensors[f"W{i}"].T) * (1.0 - cache[i] ** 2)
    return grads


# --------------------------------------------------------------------------
# Heads
# --------------------------------------------------------------------------

def safety_head(x):
    """``max(tanh(x), 0)``: squashes the raw critic output into [0, 1]."""
    return np.maximum(np.tanh(x), 0.0)


def safety_head_grad(x):
    t = np.tanh(x)
    return np.where(t > 0, 1.0 - t ** 2, 0.0)


def gaussian_log_prob(mean, log_std, action):
    """Diagonal Gaussian log density summed over the last axis."""
    z = (action - mean) * np.exp(-log_std)
    return -0.5 * np.sum(z ** 2, axis=-1) - np.sum(log_std) - 0.5 * LOG_2PI * mean.shape[-1]


def gaussian_log_prob_grads(mean, log_std, action):
    """Gradients of the log density w.r.t. mean (per row) and log_std (per row)."""
    inv_var = np.exp(-2 * log_std)
    d = action - mean
    return d * inv_var, d ** 2 * inv_var - 1.0


def gaussian_entropy(log_std) -> float:
    return float(np.sum(log_std) + 0.5 * len(log_std) * (1.0 + LOG_2PI))


def log_softmax(logits):
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def categorical_log_prob(logits, action):
    lp = log_softmax(np.atleast_2d(logits))
    out = lp[np.arange(len(lp)), np.atleast_1d(action)]
    return out[0] if np.ndim(logits) == 1 else out


def categorical_entropy(logits):
    lp = log_softmax(logits)
    return -np.sum(np.exp(lp) * lp, axis=-1)


@dataclass
class GaussianPolicyHead:
    mean: np.ndarray
    log_std: np.ndarray

    @property
    def std(self):
        return np.exp(self.log_std)

    def log_prob(self, action):
        return gaussian_log_prob(self.mean, self.log_std, action)

    def entropy(self) -> float:
        return gaussian_entropy(self.log_std)

    def sample(self, rng):
        return self.mean + self.std * rng.standard_normal(np.shape(self.mean))


@dataclass
class CategoricalPolicyHead:
    logits: np.ndarray

    @property
    def probs(self):
        return np.exp(log_softmax(self.logits))

    def log_prob(self, action):
        return categorical_log_prob(self.logits, action)

    def entropy(self):
        return categorical_entropy(self.logits)

    def sample(self, rng):
        p = np.atleast_2d(self.probs)
        u = rng.random((len(p), 1))
        a = np.minimum((p.cumsum(axis=1) < u).sum(axis=1), p.shape[1] - 1)
        return a[0] if np.ndim(self.logits) == 1 else a


def log_prob_and_entropy(head, action):
    return head.log_prob(action), head.entropy()


# --------------------------------------------------------------------------
# Adam
# --------------------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(p) for k, p in params.items()},
                   {k: np.zeros_like(p) for k, p in params.items()}, 0)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float = 2e-4,
              betas=(0.9, 0.999), eps: float = 1e-8) -> tuple[dict, AdamState]:
    """One bias-corrected Adam update; returns new dicts and leaves inputs intact."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            bad = int(np.size(g) - np.isfinite(g).sum())
            raise NonFiniteError(f"non-finite gradient for {k!r}: {bad} bad entries at step {state.step}")
    b1, b2 = betas
    t = state.step + 1
    new_p, m, v = dict(params), {}, {}
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            m[k], v[k] = state.m[k], state.v[k]
            continue
        m[k] = b1 * state.m[k] + (1 - b1) * g
        v[k] = b2 * state.v[k] + (1 - b2) * g * g
        mhat = m[k] / (1 - b1 ** t)
        vhat = v[k] / (1 - b2 ** t)
        new_p[k] = p - lr * mhat / (np.sqrt(vhat) + eps)
    return new_p, AdamState(m, v, t)


# --------------------------------------------------------------------------
# Checkpoints
# --------------------------------------------------------------------------

def save_checkpoint(path, tensors: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write tensors plus JSON metadata into one ``.npz`` file."""
    payload = {"__version__": np.array(CHECKPOINT_VERSION),
               "__meta__": np.array(json.dumps(meta or {}, sort_keys=True))}
    for k, v in tensors.items():
        if k.startswith("__"):
            raise ValueError(f"reserved tensor name {k!r}")
        payload[k] = np.asarray(v)
    with open(path, "wb") as fh:
        np.savez(fh, **payload)


def load_checkpoint(path) -> tuple[dict[str, np.ndarray], dict]:
    with np.load(path, allow_pickle=False) as z:
        version = int(z["__version__"])
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        meta = json.loads(str(z["__meta__"]))
        tensors = {k: z[k].copy() for k in z.files if not k.startswith("__")}
    return tensors, meta
