"""Local optimization: MSE loss, Adam with decoupled weight decay,
global-norm gradient clipping, seeded mini-batch training, and metrics.

Optimizers operate on the model's canonical flat parameter vector; a
trainer owns its parameters and optimizer state exclusively, so
independent clients can train concurrently without shared mutation.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .graphs import PatientSample
from .model import ForwardTape, ModelParameters, PredictionContext, unflatten

LEARNING_RATE = 0.003
WEIGHT_DECAY = 0.01
CLIP_THRESHOLD = 10.0
BATCH_SIZE = 2


class TrainingError(ValueError):
    pass


@dataclass
class OptimizerState:
    """Adam accumulators over the flat parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def fresh(cls, n_params: int, lr: float = LEARNING_RATE, weight_decay: float = WEIGHT_DECAY) -> "OptimizerState":
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), lr=lr, weight_decay=weight_decay)


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = BATCH_SIZE
    clip_threshold: float = CLIP_THRESHOLD
    local_epochs: int = 1
    seed: int = 0
    lr: float = LEARNING_RATE
    weight_decay: float = WEIGHT_DECAY
    optimizer: str = "adam"  # adam | sgd
    dropout: float = 0.1

    def __post_init__(self):
        if self.batch_size < 1:
            raise TrainingError(f"batch size must be >= 1, got {self.batch_size}")
        if self.clip_threshold <= 0:
            raise TrainingError(f"clip threshold must be positive, got {self.clip_threshold}")
        if self.optimizer not in ("adam", "sgd"):
            raise TrainingError(f"unknown optimizer {self.optimizer!r}")


@dataclass(frozen=True)
class Metrics:
    mae: float
    mse: float
    n: int

    def json_line(self, round_index: int, client: str, split: str) -> dict:
        return {
            "round": round_index,
            "client": client,
            "split": split,
            "mae": self.mae,
            "mse": self.mse,
            "n": self.n,
        }


def mse_loss(preds, labels) -> float:
    """Mean of squared residuals."""
    p = np.asarray(preds, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.shape != t.shape or p.size == 0:
        raise TrainingError(f"mse_loss: need equal non-empty arrays, got {p.shape} vs {t.shape}")
    return float(np.mean((p - t) ** 2))


def clip_gradients(grads: np.ndarray, threshold: float = CLIP_THRESHOLD) -> np.ndarray:
    """Global L2-norm clipping over the whole flat gradient."""
    g = np.asarray(grads, dtype=np.float64)
    if not np.all(np.isfinite(g)):
        raise TrainingError("clip_gradients: non-finite gradient")
    norm = float(np.linalg.norm(g))
    if norm > threshold:
        return g * (threshold / norm)
    return g


def adam_step(params: np.ndarray, grads: np.ndarray, state: OptimizerState) -> np.ndarray:
    """One Adam step with bias correction and decoupled weight decay.

    Weight decay multiplies parameters by (1 - lr * wd) before the moment
    update, so zero gradients with zero decay leave parameters unchanged.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape or p.shape != state.m.shape:
        raise TrainingError(
            f"adam_step: shape mismatch params {p.shape}, grads {g.shape}, moments {state.m.shape}"
        )
    state.step += 1
    p = p * (1.0 - state.lr * state.weight_decay)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** state.step)
    v_hat = state.v / (1.0 - state.beta2 ** state.step)
    return p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)


def _tape_loss_and_gradient(
    tape: ForwardTape,
    batch: list[PatientSample],
    ctx: PredictionContext,
    rng: np.random.Generator | None,
) -> tuple[float, np.ndarray]:
    if not batch:
        raise TrainingError("empty batch")
    preds = tape.predict_batch(batch, ctx, rng)
    labels = np.array([float(s.label) for s in batch])
    loss = ad.sq_error(preds, labels)
    return float(loss.value), tape.flat_gradient(loss)


def batch_loss_and_gradient(
    params: ModelParameters,
    batch: list[PatientSample],
    ctx: PredictionContext,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """MSE loss over a batch and its gradient in canonical flat order.

    The batch runs as one disjoint-union graph: a single forward pass
    with per-graph mean pooling.
    """
    return _tape_loss_and_gradient(ForwardTape(params), batch, ctx, rng)


def flat_loss_and_gradient(
    flat: np.ndarray,
    config,
    batch: list[PatientSample],
    ctx: PredictionContext,
    rng: np.random.Generator | None = None,
) -> tuple[float, np.ndarray]:
    """batch_loss_and_gradient without structured-parameter round-trips."""
    return _tape_loss_and_gradient(ForwardTape.from_flat(flat, config), batch, ctx, rng)


def _batches(order: np.ndarray, batch_size: int) -> list[np.ndarray]:
    # last partial batch is kept
    return [order[i : i + batch_size] for i in range(0, len(order), batch_size)]


def train_local(
    dataset: list[PatientSample],
    params: ModelParameters,
    config: TrainConfig,
    optimizer_state: OptimizerState | None = None,
) -> tuple[ModelParameters, list[float]]:
    """Run the configured epochs of seeded shuffled mini-batches.

    Returns updated parameters and the per-epoch mean training loss.
    Fixed seed + fixed data give a bitwise-identical result.
    """
    if len(dataset) < 1:
        raise TrainingError("train_local: dataset must contain at least one sample")
    flat = params.flatten()
    state = optimizer_state
    if state is None and config.optimizer == "adam":
        state = OptimizerState.fresh(flat.size, lr=config.lr, weight_decay=config.weight_decay)
    rng = np.random.default_rng(config.seed)
    train_ctx = PredictionContext(mode="train", dropout=config.dropout, seed=None)
    epoch_losses: list[float] = []
    for _ in range(config.local_epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        for batch_idx in _batches(order, config.batch_size):
            batch = [dataset[i] for i in batch_idx]
            loss, grad = flat_loss_and_gradient(flat, params.config, batch, train_ctx, rng)
            grad = clip_gradients(grad, config.clip_threshold)
            if config.optimizer == "adam":
                flat = adam_step(flat, grad, state)
            else:
                flat = flat - config.lr * grad
            total += loss * len(batch)
            count += len(batch)
        epoch_losses.append(total / count)
    return unflatten(flat, params.config), epoch_losses


def evaluate(dataset: list[PatientSample], params: ModelParameters) -> Metrics:
    """MAE and MSE over raw (unclamped) eval-mode predictions.

    Per-sample terms are combined with exact summation, so the result is
    independent of dataset ordering.
    """
    if not dataset:
        raise TrainingError("evaluate: empty dataset")
    tape = ForwardTape(params)
    eval_ctx = PredictionContext(mode="eval")
    abs_errs: list[float] = []
    sq_errs: list[float] = []
    for start in range(0, len(dataset), 4):
        chunk = dataset[start : start + 4]
        preds = tape.predict_batch(chunk, eval_ctx).value
        preds = np.atleast_1d(preds)
        for pred, sample in zip(preds, chunk):
            diff = float(pred) - float(sample.label)
            abs_errs.append(abs(diff))
            sq_errs.append(diff * diff)
    n = len(dataset)
    return Metrics(mae=math.fsum(abs_errs) / n, mse=math.fsum(sq_errs) / n, n=n)
