"""The full network: LA-Net -> MLP -> causal conv scorer."""
from __future__ import annotations

from functools import lru_cache

import numpy as np

from .config import HyperParams
from .lanet import init_lanet, lanet_forward, locality_prior, zero_prior
from .scorer import causal_conv_score, init_scorer, mlp_forward


def init_params(hp: HyperParams, dim: int, seed: int) -> dict[str, np.ndarray]:
    """Fresh parameters for a model over ``dim``-dimensional snippet features."""
    hp.validate()
    rng = np.random.default_rng(seed)
    params = init_lanet(rng, dim, hp.hidden_dim, hp.heads)
    params.update(init_scorer(rng, dim, hp.mlp_dims, hp.kernel_size))
    return params


def param_dim(params) -> int:
    return np.shape(getattr(params["lanet.out"], "value", params["lanet.out"]))[1]


@lru_cache(maxsize=64)
def _prior(t_len: int, sigma: float, use_prior: bool):
    return locality_prior(t_len, sigma) if use_prior else zero_prior(t_len)


def forward(x, params: dict, hp: HyperParams, training: bool = False, rng=None):
    """Score one bag. Returns ``(scores, xf)``: length-T scores and the
    T x C robust features fed to the scorer."""
    t_len = np.shape(x)[0]
    prior = _prior(t_len, float(hp.sigma), bool(hp.use_prior))
    x_tilde = lanet_forward(x, params, prior, hp.heads)
    xf = mlp_forward(x_tilde, params, hp.dropout, training=training, rng=rng)
    scores = causal_conv_score(xf, params["conv.kernel"], params["conv.bias"])
    return scores, xf


def predict(x, params: dict, hp: HyperParams) -> np.ndarray:
    """Inference scores (dropout off) as a plain array."""
    scores, _ = forward(np.asarray(x, dtype=np.float64), params, hp)
    return scores
