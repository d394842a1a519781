"""AdamW + cosine schedule fine-tuning loop over an :class:`AdaptedModel`."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from .adapters import AdaptedModel
from .data import Dataset
from .tensor import Graph, Param, Tensor, backward, no_graph
from .weights import save_weights


@dataclass(frozen=True)
class TrainConfig:
    lr_max: float = 1e-3
    lr_min: float = 0.0
    weight_decay: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 100
    batch_size: int = 32
    seed: int = 0
    warmup_steps: int = 0

    def validate(self) -> None:
        problems = []
        if self.lr_min > self.lr_max:
            problems.append(f"lr_min ({self.lr_min}) > lr_max ({self.lr_max})")
        if self.lr_min < 0:
            problems.append("lr_min must be >= 0")
        if self.epochs < 1:
            problems.append("epochs must be >= 1")
        if self.batch_size < 1:
            problems.append("batch_size must be >= 1")
        if self.warmup_steps < 0:
            problems.append("warmup_steps must be >= 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            problems.append("betas must lie in [0, 1)")
        if self.eps <= 0:
            problems.append("eps must be > 0")
        if problems:
            raise ValueError("; ".join(problems))


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_params(cls, params: Mapping[str, Param]) -> AdamState:
        state = cls()
        for name, p in params.items():
            if p.trainable:
                state.m[name] = np.zeros(p.shape, dtype=p.dtype)
                state.v[name] = np.zeros(p.shape, dtype=p.dtype)
        return state


def adamw_step(
    params: Mapping[str, Param], grads: Mapping[str, np.ndarray], state: AdamState, lr: float, cfg: TrainConfig
) -> AdamState:
    """One AdamW update with decoupled decay, in place on the trainable params.

    Params without a gradient (not reached by the loss) only get the decay.
    """
    bad = [n for n, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise FloatingPointError(f"non-finite gradient for {bad[0]}")
    state.step += 1
    t = state.step
    c1 = 1.0 - cfg.beta1**t
    c2 = 1.0 - cfg.beta2**t
    for name, p in params.items():
        if not p.trainable:
            continue
        if name not in state.m:
            raise KeyError(f"optimizer state has no slot for {name}")
        w = p.numpy()
        g = grads.get(name)
        m, v = state.m[name], state.v[name]
        if g is not None:
            if g.shape != w.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != param shape {w.shape}")
            m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
            v = cfg.beta2 * v + (1.0 - cfg.beta2) * (g * g)
        else:
            m = cfg.beta1 * m
            v = cfg.beta2 * v
        state.m[name], state.v[name] = m.astype(p.dtype), v.astype(p.dtype)
        update = (m / c1) / (np.sqrt(v / c2) + cfg.eps)
        p.assign(w - lr * cfg.weight_decay * w - lr * update)
    return state


def cosine_lr(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Linear warmup to ``lr_max`` then cosine decay to ``lr_min`` at ``total_steps``."""
    if step < cfg.warmup_steps:
        return cfg.lr_max * step / cfg.warmup_steps
    if step >= total_steps:
        return cfg.lr_min
    span = total_steps - cfg.warmup_steps
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + math.cos(math.pi * frac))


@dataclass
class History:
    train_loss: list[float] = field(default_factory=list)
    test_acc: list[float] = field(default_factory=list)
    lr: list[float] = field(default_factory=list)
    best_epoch: int = -1
    best_acc: float = -1.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "test_acc", "lr"])
        for e, (loss, acc, lr) in enumerate(zip(self.train_loss, self.test_acc, self.lr), start=1):
            w.writerow([e, repr(loss), repr(acc), repr(lr)])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return asdict(self)


def evaluate(model: AdaptedModel, x: np.ndarray, y: np.ndarray, batch_size: int = 64) -> float:
    """Top-1 accuracy; runs in inference mode so nothing is recorded or retained."""
    if len(x) == 0:
        return float("nan")
    correct = 0
    with no_graph():
        for s in range(0, len(x), batch_size):
            logits = model.forward(Tensor(x[s : s + batch_size])).numpy()
            correct += int(np.sum(np.argmax(logits, axis=1) == y[s : s + batch_size]))
    return correct / len(x)


def trainable_state(model: AdaptedModel) -> dict[str, np.ndarray]:
    return {n: p.numpy().copy() for n, p in model.trainable_params().items()}


def train(
    model: AdaptedModel,
    data: Dataset,
    cfg: TrainConfig,
    checkpoint: str | Path | None = None,
    inject_nan_at: int | None = None,
    log=None,
) -> History:
    """Fine-tune the trainable params of ``model``; deterministic given ``cfg.seed``.

    ``checkpoint`` (a manifest path) receives the trainable weights of the
    best test-accuracy epoch.  ``inject_nan_at`` poisons the input of that
    global step, for exercising the numeric-abort path.
    """
    cfg.validate()
    n = len(data.train_x)
    if n == 0:
        raise ValueError("training split is empty")
    if data.n_classes != model.n_classes:
        raise ValueError(f"dataset has {data.n_classes} classes, head has {model.n_classes}")
    params = model.params()
    state = AdamState.for_params(params)
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.epochs * steps_per_epoch
    hist = History()
    step = 0
    for epoch in range(cfg.epochs):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(n)
        hist.lr.append(cosine_lr(step, total, cfg))
        loss_sum = 0.0
        for s in range(0, n, cfg.batch_size):
            idx = order[s : s + cfg.batch_size]
            xb = data.train_x[idx]
            if inject_nan_at is not None and step == inject_nan_at:
                xb = np.full_like(xb, np.nan)
            with Graph():
                loss = model.loss(Tensor(xb), data.train_y[idx])
                value = float(loss.numpy())
                if not math.isfinite(value):
                    raise FloatingPointError(f"non-finite loss at epoch {epoch + 1}, step {step}")
                grads = backward(loss)
            adamw_step(params, grads, state, cosine_lr(step, total, cfg), cfg)
            loss_sum += value * len(idx)
            step += 1
        acc = evaluate(model, data.test_x, data.test_y)
        hist.train_loss.append(loss_sum / n)
        hist.test_acc.append(acc)
        if acc > hist.best_acc:
            hist.best_acc, hist.best_epoch = acc, epoch + 1
            if checkpoint is not None:
                save_weights(trainable_state(model), checkpoint)
        if log is not None:
            log(f"epoch {epoch + 1}/{cfg.epochs} loss {loss_sum / n:.4f} acc {acc:.4f}")
    return hist
