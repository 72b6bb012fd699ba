"""Per-snippet MLP and the causal temporal convolution that emits scores."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core_math as cm
from .lanet import glorot


class EmptyDynamicsError(ValueError):
    pass


@dataclass
class ScoreTrack:
    scores: np.ndarray
    dynamics: np.ndarray

    @classmethod
    def from_scores(cls, scores) -> "ScoreTrack":
        scores = np.asarray(scores, dtype=np.float64)
        return cls(scores, score_dynamics(scores))


def dropout(x, rate: float, rng: np.random.Generator | None):
    """Inverted dropout: kept units are scaled by ``1 / (1 - rate)``."""
    if rng is None or rate == 0.0:
        return x
    keep = rng.random(cm._value(x).shape) >= rate
    return cm.mul(x, keep / (1.0 - rate))


def mlp_forward(x_tilde, params: dict, rate: float = 0.1, training: bool = False, rng=None):
    """linear -> GELU -> dropout -> linear -> GELU -> dropout, per snippet.

    ``rng`` supplies the dropout masks and is only consulted when training.
    """
    if training and rng is None:
        raise ValueError("training mode needs an rng for dropout masks")
    drop_rng = rng if training else None
    h = cm.gelu(cm.add(cm.matmul(x_tilde, params["mlp.w1"]), params["mlp.b1"]))
    h = dropout(h, rate, drop_rng)
    h = cm.gelu(cm.add(cm.matmul(h, params["mlp.w2"]), params["mlp.b2"]))
    return dropout(h, rate, drop_rng)


def causal_conv_score(xf, kernel, bias):
    """``s_t = sigmoid(b + sum_tau kernel[tau] . xf[t - tau])``, zero left padding.

    ``kernel`` is K x C; ``bias`` has a single element. Returns a length-T vector.
    """
    xv = cm._value(xf)
    kv = cm._value(kernel)
    t_len, channels = xv.shape
    taps = kv.shape[0]
    if kv.shape[1] != channels:
        raise cm.ShapeError(f"kernel {kv.shape} does not match features {xv.shape}")
    padded = xf if taps == 1 else cm.concat([np.zeros((taps - 1, channels)), xf], axis=0)
    # column block tau holds xf shifted down by tau rows
    windows = cm.concat([padded[taps - 1 - tau: taps - 1 - tau + t_len] for tau in range(taps)], axis=1)
    logits = cm.add(cm.matmul(windows, cm.reshape(kernel, (taps * channels, 1))), cm.reshape(bias, (1, 1)))
    return cm.sigmoid(cm.reshape(logits, (t_len,)))


def score_dynamics(s):
    """``|s_t - s_{t+1}|`` for consecutive snippets."""
    n = cm._value(s).shape[0]
    if n < 2:
        raise EmptyDynamicsError(f"score dynamics need at least 2 snippets, got {n}")
    return cm.absolute(cm.sub(s[:-1], s[1:]))


def init_scorer(rng: np.random.Generator, dim: int, mlp_dims, kernel_size: int) -> dict[str, np.ndarray]:
    h1, h2 = mlp_dims
    return {
        "mlp.w1": glorot(rng, dim, h1),
        "mlp.b1": np.zeros((1, h1)),
        "mlp.w2": glorot(rng, h1, h2),
        "mlp.b2": np.zeros((1, h2)),
        "conv.kernel": glorot(rng, kernel_size * h2, 1, shape=(kernel_size, h2)),
        "conv.bias": np.zeros((1, 1)),
    }
