"""Binary cross-entropy training: loss, adaptive-moment updates,
gradient accumulation, early stopping.

The epoch loop scales every micro-batch loss by 1/accumulation_steps and
lets gradients accumulate; the optimizer steps once per window. A trailing
partial window at epoch end is flushed with proportional rescaling so no
sample is dropped and trajectories stay reproducible.
"""

from __future__ import annotations

from typing import Iterable

import numpy as np

from . import tensor as T
from .layers import Module
from .tensor import Tensor


class NumericError(RuntimeError):
    """Training produced a non-finite loss."""


def bce_with_logits(logits: Tensor, targets: Tensor) -> Tensor:
    """Mean binary cross entropy on raw logits, in the overflow-free form

        max(z, 0) - z*t + log(1 + exp(-|z|))

    Targets must be exactly 0 or 1.
    """
    if logits.shape != targets.shape:
        raise T.ShapeError(f"logits {logits.shape} and targets {targets.shape} disagree")
    t = targets.data
    if not np.all((t == 0.0) | (t == 1.0)):
        raise ValueError("targets must be binary (0 or 1)")
    z = logits.data
    per = np.maximum(z, 0) - z * t + np.log1p(np.exp(-np.abs(z)))
    out = per.mean().reshape(1)
    n = z.size

    def vjp(g):
        # d loss / d z = (sigmoid(z) - t) / n
        return ((T._sigmoid_stable(z) - t) * (g.reshape(()) / n), None)

    return T.apply_op(out, (logits, targets), vjp)


class Adam:
    """Adaptive-moment update with bias correction, applied in place."""

    def __init__(self, params: Module | Iterable[tuple[str, Tensor]], lr: float = 8e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if isinstance(params, Module):
            named = list(params.named_parameters())
        else:
            named = list(params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        for name, p in zip(self.names, self.params):
            if p.grad is None:
                raise ValueError(f"parameter '{name}' has no gradient; run backward first")
        self.step_count += 1
        c1 = 1.0 - self.beta1 ** self.step_count
        c2 = 1.0 - self.beta2 ** self.step_count
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * (g * g)
            m_hat = self.m[i] / c1
            v_hat = self.v[i] / c2
            p.data -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def scale_grads(self, factor: float) -> None:
        for p in self.params:
            if p.grad is not None:
                p.grad *= factor

    def state_dict(self) -> dict:
        return {
            "step_count": self.step_count,
            "lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
            "m": {n: m.copy() for n, m in zip(self.names, self.m)},
            "v": {n: v.copy() for n, v in zip(self.names, self.v)},
        }


class EarlyStopping:
    """Stop after ``patience`` epochs without strict validation-loss improvement.

    Keeps a snapshot of the best parameters; evaluation always uses it.
    """

    def __init__(self, patience: int):
        if patience < 1:
            raise ValueError(f"patience must be positive, got {patience}")
        self.patience = patience
        self.best_loss = float("inf")
        self.epochs_since_improvement = 0
        self.best_state: dict[str, np.ndarray] | None = None

    def update(self, val_loss: float, model: Module) -> bool:
        if val_loss < self.best_loss:
            self.best_loss = val_loss
            self.epochs_since_improvement = 0
            self.best_state = model.state_dict()
            return False
        self.epochs_since_improvement += 1
        return self.epochs_since_improvement >= self.patience

    def restore(self, model: Module) -> None:
        if self.best_state is not None:
            model.load_state_dict(self.best_state)


def train_epoch(model: Module, batches: Iterable[tuple[np.ndarray, np.ndarray]],
                optimizer: Adam, *, accumulation_steps: int,
                rng: np.random.Generator) -> float:
    """One pass over the micro-batches; returns the mean per-sample loss.

    Every micro-batch contributes loss/accumulation_steps to the gradient;
    the optimizer steps each time a window fills. A short trailing window is
    rescaled by accumulation_steps/len(window) and stepped.
    """
    if accumulation_steps < 1:
        raise ValueError(f"accumulation_steps must be positive, got {accumulation_steps}")
    model.train()
    total_loss = 0.0
    total_n = 0
    pending = 0
    for xb, yb in batches:
        logits = model(Tensor(xb), rng=rng)
        loss = bce_with_logits(logits, Tensor(yb))
        value = loss.item()
        if not np.isfinite(value):
            raise NumericError(f"non-finite training loss {value}")
        (loss * (1.0 / accumulation_steps)).backward(free_graph=True)
        total_loss += value * len(xb)
        total_n += len(xb)
        pending += 1
        if pending == accumulation_steps:
            optimizer.step()
            optimizer.zero_grad()
            pending = 0
    if total_n == 0:
        raise ValueError("train_epoch received no batches")
    if pending:
        optimizer.scale_grads(accumulation_steps / pending)
        optimizer.step()
        optimizer.zero_grad()
    return total_loss / total_n


def predict_logits(model: Module, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode logits for a stack of images [N,3,H,W], computed off-graph."""
    model.eval()
    outputs = []
    with T.no_grad():
        for start in range(0, len(images), batch_size):
            chunk = Tensor(images[start: start + batch_size])
            outputs.append(model(chunk).data)
    return np.concatenate(outputs, axis=0)


def mean_bce(logits: np.ndarray, targets: np.ndarray) -> float:
    """Loss value matching ``bce_with_logits`` on plain arrays."""
    per = np.maximum(logits, 0) - logits * targets + np.log1p(np.exp(-np.abs(logits)))
    return float(per.mean())
