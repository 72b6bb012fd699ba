"""Locality-aware attention: multi-head global attention plus a Gaussian
position prior, residual connection and layer normalization."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import core_math as cm
from .config import ConfigError


@dataclass(frozen=True)
class LocalityPrior:
    sigma: float
    matrix: np.ndarray

    @property
    def size(self) -> int:
        return self.matrix.shape[0]


def locality_prior(t_len: int, sigma: float) -> LocalityPrior:
    """``G[i, j] = exp(-(i - j)**2 / (2 * sigma))`` over 0-based positions."""
    if sigma <= 0:
        raise ConfigError(f"sigma must be positive, got {sigma}")
    if t_len < 1:
        raise ConfigError(f"t_len must be >= 1, got {t_len}")
    pos = np.arange(t_len, dtype=np.float64)
    dist2 = (pos[:, None] - pos[None, :]) ** 2
    matrix = np.exp(-dist2 / (2.0 * sigma))
    matrix.setflags(write=False)
    return LocalityPrior(float(sigma), matrix)


def zero_prior(t_len: int) -> LocalityPrior:
    """Prior-free variant, used for the no-prior ablation."""
    matrix = np.zeros((t_len, t_len))
    matrix.setflags(write=False)
    return LocalityPrior(0.0, matrix)


def attention_head(x, phi, psi, value, prior: LocalityPrior, return_maps=False):
    """One head: ``(softmax(x phi (x psi)^T) + G) (x value)``.

    The prior is added after the softmax and rows are not renormalized.
    With ``return_maps`` the pre-prior map ``A`` and ``A + G`` are returned as
    well (as arrays).
    """
    t_len = cm._value(x).shape[0]
    if prior.size != t_len:
        raise cm.ShapeError(f"prior is {prior.matrix.shape}, input has {t_len} snippets")
    q = cm.matmul(x, phi)
    k = cm.matmul(x, psi)
    attn = cm.softmax_rows(cm.matmul(q, cm.transpose(k)))
    recal = cm.add(attn, prior.matrix)
    out = cm.matmul(recal, cm.matmul(x, value))
    if return_maps:
        return out, cm._value(attn), cm._value(recal)
    return out


def lanet_forward(x, params: dict, prior: LocalityPrior, heads: int):
    """``layer_norm(concat_h(head_h(x)) @ W_out + x)``; output is T x D."""
    xv = cm._value(x)
    if xv.ndim != 2:
        raise cm.ShapeError(f"expected a T x D matrix, got shape {xv.shape}")
    dim = cm._value(params["lanet.out"]).shape[1]
    if xv.shape[1] != dim:
        raise cm.ShapeError(f"input has {xv.shape[1]} features, parameters expect {dim}")
    outs = [
        attention_head(x, params[f"lanet.phi.{h}"], params[f"lanet.psi.{h}"], params[f"lanet.value.{h}"], prior)
        for h in range(heads)
    ]
    stacked = cm.concat(outs, axis=1)
    mixed = cm.add(cm.matmul(stacked, params["lanet.out"]), x)
    return cm.layer_norm(mixed, params["lanet.ln_gain"], params["lanet.ln_bias"])


def init_lanet(rng: np.random.Generator, dim: int, hidden_dim: int, heads: int) -> dict[str, np.ndarray]:
    head_dim = hidden_dim // heads
    params = {}
    for h in range(heads):
        for kind in ("phi", "psi", "value"):
            params[f"lanet.{kind}.{h}"] = glorot(rng, dim, head_dim)
    params["lanet.out"] = glorot(rng, hidden_dim, dim)
    params["lanet.ln_gain"] = np.ones((1, dim))
    params["lanet.ln_bias"] = np.zeros((1, dim))
    return params


def glorot(rng: np.random.Generator, fan_in: int, fan_out: int, shape=None) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape or (fan_in, fan_out))
