"""pGNN and MLP node classifiers with an Adam training loop.

pGNN:  F0 = ReLU(dropout(X) Theta1),  K propagation steps reset towards F0,
       Z = log_softmax(dropout(F_K) Theta2).
MLP:   the same two layers with propagation removed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Rng
from .errors import ConfigError, ShapeError
from .graph import SparseGraph
from .solver import PlapConfig, frozen_weights, propagate

MODEL_KINDS = ("pgnn", "mlp")


@dataclass
class PgnnParams:
    theta1: np.ndarray
    theta2: np.ndarray

    def arrays(self) -> list[np.ndarray]:
        return [self.theta1, self.theta2]

    def copy(self) -> "PgnnParams":
        return PgnnParams(self.theta1.copy(), self.theta2.copy())


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.01
    weight_decay: float = 5e-4
    dropout: float = 0.5
    max_epochs: int = 1000
    patience: int = 200
    hidden: int = 16
    seed: int = 0
    plap: PlapConfig = field(default_factory=PlapConfig)
    dropout_hidden: bool = True

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be >= 0")
        if not 0 <= self.dropout < 1:
            raise ConfigError(f"dropout must lie in [0, 1), got {self.dropout}")
        if self.max_epochs < 1 or self.hidden < 1:
            raise ConfigError("max_epochs and hidden must be positive")
        if not 0 <= self.patience <= self.max_epochs:
            raise ConfigError("patience must lie in [0, max_epochs]")


@dataclass
class Metrics:
    train_acc: float
    val_acc: float
    test_acc: float
    best_epoch: int
    epochs_run: int
    loss_curve: list[float] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {
            "train_acc": self.train_acc,
            "val_acc": self.val_acc,
            "test_acc": self.test_acc,
            "best_epoch": self.best_epoch,
            "epochs_run": self.epochs_run,
        }


def init_params(c: int, h: int, L: int, rng: Rng) -> PgnnParams:
    """Glorot-uniform weights, bound sqrt(6 / (fan_in + fan_out))."""
    if min(c, h, L) < 1:
        raise ValueError("layer sizes must be positive")

    def glorot(fan_in, fan_out):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-bound, bound, (fan_in, fan_out))

    return PgnnParams(glorot(c, h), glorot(h, L))


def _check_shapes(X: np.ndarray, params: PgnnParams) -> None:
    if X.shape[1] != params.theta1.shape[0]:
        raise ShapeError(f"features have {X.shape[1]} columns, theta1 expects {params.theta1.shape[0]}")
    if params.theta1.shape[1] != params.theta2.shape[0]:
        raise ShapeError("theta1 and theta2 hidden sizes differ")


def _layers(X, theta1, theta2, rng, training, rate, dropout_hidden, middle=None):
    tape = theta1.tape
    x = tape.constant(X)
    x = ad.dropout(x, rate, rng, training)
    F = ad.relu(x @ theta1)
    if middle is not None:
        F = middle(F)
    if dropout_hidden:
        F = ad.dropout(F, rate, rng, training)
    return ad.log_softmax_rows(F @ theta2)


def pgnn_forward_vars(g, X, theta1, theta2, cfg: TrainConfig, rng, training, frozen=None) -> ad.Var:
    X = np.asarray(X, dtype=np.float64)
    if X.shape[0] != g.n:
        raise ShapeError(f"features have {X.shape[0]} rows, graph has {g.n} nodes")
    return _layers(
        X, theta1, theta2, rng, training, cfg.dropout, cfg.dropout_hidden,
        middle=lambda F0: propagate(g, F0, cfg.plap, frozen),
    )


def frozen_weights_at(g: SparseGraph, X, theta1: np.ndarray, cfg: TrainConfig):
    """Propagation weights at ``theta1`` without dropout, for checking detached gradients."""
    F0 = np.maximum(np.asarray(X, dtype=np.float64) @ theta1, 0.0)
    return frozen_weights(g, F0, cfg.plap)


def mlp_forward_vars(X, theta1, theta2, cfg: TrainConfig, rng, training) -> ad.Var:
    return _layers(np.asarray(X, dtype=np.float64), theta1, theta2, rng, training,
                   cfg.dropout, cfg.dropout_hidden)


def pgnn_forward(g: SparseGraph, X, params: PgnnParams, cfg: TrainConfig,
                 rng: Rng | None = None, training: bool = False) -> np.ndarray:
    """Log-probabilities (n x L) of the pGNN; no gradients are recorded."""
    X = np.asarray(X, dtype=np.float64)
    _check_shapes(X, params)
    tape = ad.Tape()
    t1, t2 = tape.constant(params.theta1), tape.constant(params.theta2)
    return pgnn_forward_vars(g, X, t1, t2, cfg, rng, training).value


def mlp_forward(X, params: PgnnParams, cfg: TrainConfig,
                rng: Rng | None = None, training: bool = False) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    _check_shapes(X, params)
    tape = ad.Tape()
    t1, t2 = tape.constant(params.theta1), tape.constant(params.theta2)
    return mlp_forward_vars(X, t1, t2, cfg, rng, training).value


def training_loss(kind: str, g, X, labels, mask, theta1, theta2, cfg, rng, training=True,
                  frozen=None) -> ad.Var:
    """Masked NLL. ``frozen`` fixes the propagation weights (see ``solver.frozen_weights``)."""
    if kind == "pgnn":
        logp = pgnn_forward_vars(g, X, theta1, theta2, cfg, rng, training, frozen)
    elif kind == "mlp":
        logp = mlp_forward_vars(X, theta1, theta2, cfg, rng, training)
    else:
        raise ConfigError(f"unknown model kind {kind!r}")
    return ad.masked_nll(logp, labels, mask)


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, arrays) -> "AdamState":
        return cls([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays])


def adam_step(params: list[np.ndarray], grads: list[np.ndarray], state: AdamState,
              lr: float, weight_decay: float = 0.0, betas=(0.9, 0.999), eps: float = 1e-8):
    """One bias-corrected Adam update; L2 decay is added to the gradient.

    Returns new parameter arrays; ``state`` is advanced in place.
    """
    b1, b2 = betas
    state.t += 1
    t = state.t
    out = []
    for k, (p, g) in enumerate(zip(params, grads)):
        if weight_decay:
            g = g + weight_decay * p
        state.m[k] = b1 * state.m[k] + (1 - b1) * g
        state.v[k] = b2 * state.v[k] + (1 - b2) * g * g
        m_hat = state.m[k] / (1 - b1**t)
        v_hat = state.v[k] / (1 - b2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out


def evaluate(logp, labels, mask) -> float:
    """Accuracy of argmax predictions (lowest class index wins ties) on ``mask``."""
    mask = np.asarray(mask, dtype=np.int64).ravel()
    if mask.size == 0:
        raise ValueError("evaluate: empty mask")
    pred = np.argmax(np.asarray(logp), axis=1)
    return float(np.mean(pred[mask] == np.asarray(labels)[mask]))


def _nll(logp, labels, mask) -> float:
    mask = np.asarray(mask, dtype=np.int64)
    return float(-logp[mask, np.asarray(labels)[mask]].mean())


def train(g: SparseGraph | None, X, labels, split, kind: str, cfg: TrainConfig,
          num_classes: int | None = None) -> tuple[PgnnParams, Metrics]:
    """Fit on ``split.train``; keep the parameters with the best validation score.

    Validation score is accuracy, ties broken by lower validation loss.
    Training stops after ``cfg.patience`` epochs without a better score.
    """
    if kind not in MODEL_KINDS:
        raise ConfigError(f"unknown model kind {kind!r}")
    X = np.asarray(X, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    train_idx = np.asarray(split.train, dtype=np.int64)
    val_idx = np.asarray(split.val, dtype=np.int64)
    test_idx = np.asarray(split.test, dtype=np.int64)
    if train_idx.size == 0 or val_idx.size == 0:
        raise ValueError("train and validation masks must be nonempty")
    if kind == "pgnn" and g is None:
        raise ConfigError("pgnn needs a graph")
    L = int(num_classes if num_classes is not None else labels.max() + 1)

    rng = Rng(cfg.seed)
    params = init_params(X.shape[1], cfg.hidden, L, rng.child(1))
    drop_rng = rng.child(2)
    adam = AdamState.zeros_like(params.arrays())

    def predict(p: PgnnParams) -> np.ndarray:
        if kind == "pgnn":
            return pgnn_forward(g, X, p, cfg)
        return mlp_forward(X, p, cfg)

    best = None
    best_key = (-1.0, -math.inf)
    best_epoch = 0
    curve: list[float] = []
    epoch = 0
    for epoch in range(cfg.max_epochs):
        tape = ad.Tape()
        t1, t2 = tape.leaf(params.theta1), tape.leaf(params.theta2)
        loss = training_loss(kind, g, X, labels, train_idx, t1, t2, cfg, drop_rng)
        grads = ad.backward(loss)
        curve.append(float(loss.value[0, 0]))
        new = adam_step(params.arrays(), [grads[t1], grads[t2]], adam, cfg.lr, cfg.weight_decay)
        params = PgnnParams(*new)

        logp = predict(params)
        key = (evaluate(logp, labels, val_idx), -_nll(logp, labels, val_idx))
        if key > best_key:
            best_key, best, best_epoch = key, params.copy(), epoch
        elif epoch - best_epoch >= cfg.patience:
            break

    logp = predict(best)
    metrics = Metrics(
        train_acc=evaluate(logp, labels, train_idx),
        val_acc=evaluate(logp, labels, val_idx),
        test_acc=evaluate(logp, labels, test_idx) if test_idx.size else float("nan"),
        best_epoch=best_epoch,
        epochs_run=epoch + 1,
        loss_curve=curve,
    )
    return best, metrics
