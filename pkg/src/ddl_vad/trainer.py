"""Adam with cosine decay, the training loop, checkpoints and the
finite-difference gradient audit."""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import core_math as cm
from .config import ConfigError, HyperParams, TrainConfig, hyperparams_from_dict
from .data_io import FeatureBag, uniform_sample
from .losses import BagBatch, BagOutput, LossWeights, total_loss
from .model import forward


class NonFiniteGradientError(FloatingPointError):
    def __init__(self, name):
        super().__init__(f"non-finite gradient for parameter {name!r}; step rejected")
        self.param = name


class CheckpointError(ValueError):
    pass


@dataclass
class OptimState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    base_lr: float = 5e-4
    total_epochs: int = 50

    @classmethod
    def for_params(cls, params, **kw) -> "OptimState":
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()}, **kw)


def cosine_lr(epoch: int, total_epochs: int, base_lr: float) -> float:
    if total_epochs <= 0:
        return base_lr
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f"epoch {epoch} outside [0, {total_epochs}]")
    return base_lr * 0.5 * (1.0 + math.cos(math.pi * epoch / total_epochs))


def adam_step(params: dict, grads: dict, state: OptimState, lr: float):
    """One bias-corrected Adam update. Returns ``(params, state)``; inputs are
    not modified. Any non-finite gradient rejects the whole step."""
    for name in params:
        if not np.all(np.isfinite(grads[name])):
            raise NonFiniteGradientError(name)
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_params, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = grads[name]
        m = b1 * state.m[name] + (1.0 - b1) * g
        v = b2 * state.v[name] + (1.0 - b2) * g * g
        m_hat = m / (1.0 - b1**step)
        v_hat = v / (1.0 - b2**step)
        new_params[name] = p - lr * m_hat / (np.sqrt(v_hat) + state.adam_eps)
        new_m[name], new_v[name] = m, v
    new_state = OptimState(
        new_m, new_v, step, state.beta1, state.beta2, state.adam_eps, state.base_lr, state.total_epochs
    )
    return new_params, new_state


def weights_of(hp: HyperParams) -> LossWeights:
    return LossWeights(hp.lambda1, hp.lambda2, hp.zeta, hp.epsilon)


def batch_objective(param_nodes, pos_bags, neg_bags, hp: HyperParams, rngs=None, training=False):
    """Forward every bag and assemble the weighted objective."""
    batch = BagBatch()
    for i, bag in enumerate(list(pos_bags) + list(neg_bags)):
        rng = rngs[i] if rngs is not None else None
        scores, xf = forward(bag.features, param_nodes, hp, training=training, rng=rng)
        out = BagOutput(scores, xf, bag.label)
        (batch.positives if bag.label else batch.negatives).append(out)
    return total_loss(batch, weights_of(hp), literal_mil=hp.literal_mil)


def loss_and_grads(params, pos_bags, neg_bags, hp, rngs=None, training=False, objective=None):
    tape = cm.Tape()
    nodes = tape.params_from(params)
    if objective is None:
        loss, parts = batch_objective(nodes, pos_bags, neg_bags, hp, rngs, training)
    else:
        loss = objective(nodes, pos_bags, neg_bags, hp)
        parts = {}
    if not isinstance(loss, cm.Node):
        # nothing depends on the parameters
        return float(loss), parts, {k: np.zeros_like(v) for k, v in params.items()}
    grads = tape.backward(loss)
    return float(loss.value), parts, grads


@dataclass
class EpochMetrics:
    epoch: int
    lr: float
    total: float
    mil: float
    dr: float
    da: float


@dataclass
class TrainState:
    params: dict
    optim: OptimState
    epoch: int = 0
    history: list[EpochMetrics] = field(default_factory=list)


def _split(data: list[FeatureBag]):
    pos = [b for b in data if b.label == 1]
    neg = [b for b in data if b.label == 0]
    if not pos or not neg:
        raise ConfigError("training data needs both abnormal (label 1) and normal (label 0) bags")
    return pos, neg


def train_epoch(state: TrainState, data: list[FeatureBag], hp: HyperParams, cfg: TrainConfig) -> EpochMetrics:
    """One pass: each step takes batch/2 abnormal and batch/2 normal bags
    (cycling the smaller class), subsampled to ``t_max``."""
    pos, neg = _split(data)
    half = cfg.batch_size // 2
    epoch = state.epoch
    rng = np.random.default_rng([cfg.seed, epoch])
    pos_order, neg_order = rng.permutation(len(pos)), rng.permutation(len(neg))
    n_steps = math.ceil(max(len(pos), len(neg)) / half)
    lr = cosine_lr(epoch, cfg.epochs, cfg.lr)

    sums = {"total": 0.0, "mil": 0.0, "dr": 0.0, "da": 0.0}
    for step in range(n_steps):
        sel = range(step * half, (step + 1) * half)
        pos_b = [uniform_sample(pos[pos_order[i % len(pos)]], cfg.t_max) for i in sel]
        neg_b = [uniform_sample(neg[neg_order[i % len(neg)]], cfg.t_max) for i in sel]
        bag_seeds = np.random.SeedSequence([cfg.seed, epoch, step]).spawn(2 * half)
        rngs = [np.random.default_rng(s) for s in bag_seeds]
        loss, parts, grads = loss_and_grads(state.params, pos_b, neg_b, hp, rngs, training=True)
        state.params, state.optim = adam_step(state.params, grads, state.optim, lr)
        sums["total"] += loss
        for k in ("mil", "dr", "da"):
            sums[k] += parts[k]
    state.epoch += 1
    metrics = EpochMetrics(epoch, lr, **{k: v / n_steps for k, v in sums.items()})
    state.history.append(metrics)
    return metrics


def new_train_state(params, cfg: TrainConfig) -> TrainState:
    optim = OptimState.for_params(
        params, beta1=cfg.beta1, beta2=cfg.beta2, adam_eps=cfg.adam_eps, base_lr=cfg.lr, total_epochs=cfg.epochs
    )
    return TrainState({k: np.array(v, dtype=np.float64) for k, v in params.items()}, optim)


def train(params, data, hp: HyperParams, cfg: TrainConfig, on_epoch: Callable | None = None) -> TrainState:
    hp.validate()
    cfg.validate()
    _split(data)
    state = new_train_state(params, cfg)
    while state.epoch < cfg.epochs:
        metrics = train_epoch(state, data, hp, cfg)
        if on_epoch is not None:
            on_epoch(state, metrics)
    return state


# checkpoints

CKPT_MAGIC = b"DDLC"
CKPT_VERSION = 1


def _pack_tensor(name: str, arr: np.ndarray) -> bytes:
    arr = np.asarray(arr, dtype=np.float64)
    rows, cols = arr.reshape(arr.shape[0], -1).shape if arr.ndim else (1, 1)
    raw = name.encode()
    return struct.pack("<I", len(raw)) + raw + struct.pack("<II", rows, cols) + arr.astype("<f8").tobytes()


class _Reader:
    def __init__(self, blob):
        self.blob, self.pos = blob, 0

    def take(self, n):
        if self.pos + n > len(self.blob):
            raise CheckpointError("truncated checkpoint")
        out = self.blob[self.pos: self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size))

    def tensor(self):
        (n,) = self.unpack("<I")
        name = self.take(n).decode()
        rows, cols = self.unpack("<II")
        data = np.frombuffer(self.take(rows * cols * 8), dtype="<f8").astype(np.float64)
        return name, data.reshape(rows, cols)


def save_checkpoint(path, state: TrainState, hp: HyperParams, dim: int) -> None:
    """``DDLC`` | version | hyperparameter JSON block | named params |
    first and second moments | step counter."""
    block = json.dumps({"model": _hp_dict(hp), "dim": dim, "epoch": state.epoch}, sort_keys=True).encode()
    parts = [CKPT_MAGIC, struct.pack("<I", CKPT_VERSION), struct.pack("<I", len(block)), block]
    for section in (state.params, state.optim.m, state.optim.v):
        parts.append(struct.pack("<I", len(section)))
        parts += [_pack_tensor(k, v) for k, v in section.items()]
    o = state.optim
    parts.append(struct.pack("<ddddQ", o.beta1, o.beta2, o.adam_eps, o.base_lr, o.total_epochs))
    parts.append(struct.pack("<Q", o.step))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path):
    """Returns ``(state, hp, dim)``."""
    with open(path, "rb") as fh:
        r = _Reader(fh.read())
    if r.take(4) != CKPT_MAGIC:
        raise CheckpointError(f"{path}: bad magic")
    (version,) = r.unpack("<I")
    if version != CKPT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    (n,) = r.unpack("<I")
    meta = json.loads(r.take(n))
    sections = []
    for _ in range(3):
        (count,) = r.unpack("<I")
        sections.append(dict(r.tensor() for _ in range(count)))
    params, m, v = sections
    b1, b2, eps, base_lr, total_epochs = r.unpack("<ddddQ")
    (step,) = r.unpack("<Q")
    if r.pos != len(r.blob):
        raise CheckpointError(f"{path}: trailing bytes")
    optim = OptimState(m, v, step, b1, b2, eps, base_lr, total_epochs)
    hp = hyperparams_from_dict(meta["model"])
    return TrainState(params, optim, epoch=meta["epoch"]), hp, int(meta["dim"])


def _hp_dict(hp: HyperParams) -> dict:
    from dataclasses import asdict

    d = asdict(hp)
    d["mlp_dims"] = list(hp.mlp_dims)
    return d


# gradient audit

@dataclass
class AuditReport:
    max_rel_error: float
    worst_param: str
    per_param: dict[str, float]
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def lines(self):
        verdict = "PASS" if self.passed else "FAIL"
        yield f"gradient audit {verdict}: max rel. error {self.max_rel_error:.3e} ({self.worst_param}), tolerance {self.tolerance:.1e}"
        for name, err in self.per_param.items():
            yield f"  {name:<18} {err:.3e}"


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """``|a - n| / max(|a|, |n|)`` in the Euclidean norm; 0 when both vanish."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_grads(f: Callable[[dict], float], params: dict, step: float = 1e-5) -> dict[str, np.ndarray]:
    """Central differences of ``f`` for every parameter entry."""
    grads = {}
    for name, p in params.items():
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = f(params)
            flat[i] = orig - step
            lo = f(params)
            flat[i] = orig
            gflat[i] = (hi - lo) / (2.0 * step)
        grads[name] = g
    return grads


def grad_audit(params, pos_bags, neg_bags, hp: HyperParams, tolerance: float = 1e-4, step: float = 1e-5,
               objective=None) -> AuditReport:
    """Compare tape gradients of the objective with central differences.

    Dropout is off. ``objective(nodes, pos, neg, hp)`` replaces the default
    weighted loss when given.
    """
    params = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    _, _, analytic = loss_and_grads(params, pos_bags, neg_bags, hp, objective=objective)

    def f(p):
        if objective is not None:
            return float(cm._value(objective(p, pos_bags, neg_bags, hp)))
        loss, _ = batch_objective(p, pos_bags, neg_bags, hp)
        return float(cm._value(loss))

    numeric = numeric_grads(f, params, step)
    per_param = {name: relative_error(analytic[name], numeric[name]) for name in params}
    worst = max(per_param, key=per_param.get)
    return AuditReport(per_param[worst], worst, per_param, tolerance)


def toy_problem(seed: int = 0, t_len: int = 12, dim: int = 8, heads: int = 2, hidden_dim: int = 8,
                kernel_size: int = 3, **hp_overrides):
    """Small model plus one abnormal and one normal bag for gradient audits."""
    from .model import init_params

    hp = HyperParams(heads=heads, hidden_dim=hidden_dim, kernel_size=kernel_size, mlp_dims=(16, 8),
                     sigma=6.0, **hp_overrides)
    rng = np.random.default_rng(seed)
    params = init_params(hp, dim, seed)
    # nonzero biases so every gradient path is exercised
    for name in params:
        if name.endswith(("b1", "b2", "bias")):
            params[name] = rng.normal(0.0, 0.1, params[name].shape)
    pos = FeatureBag("toy_pos", rng.normal(size=(t_len, dim)), 1)
    neg = FeatureBag("toy_neg", rng.normal(size=(t_len, dim)), 0)
    return params, [pos], [neg], hp
