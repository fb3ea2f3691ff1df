"""Cross-entropy training with momentum SGD and polynomial LR decay."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, NanLossError, TapeError
from .tensor import Param, Tape, Tensor, no_grad, _active_tape, _accumulate


@dataclass
class TrainConfig:
    batch_size: int = 256
    lr_init: float = 0.1
    lr_final: float = 0.01
    decay_power: float = 0.5
    epochs: int = 70
    weight_decay: float = 1e-4
    momentum: float = 0.9
    seed: int = 0

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if not 0.0 < self.lr_final <= self.lr_init:
            raise ConfigError(
                f"need 0 < lr_final <= lr_init, got lr_final={self.lr_final} lr_init={self.lr_init}"
            )
        if self.decay_power <= 0:
            raise ConfigError(f"decay_power must be positive, got {self.decay_power}")
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise ConfigError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.momentum < 1.0:
            raise ConfigError(f"momentum must be in [0, 1), got {self.momentum}")


@dataclass
class StepRecord:
    epoch: int
    step: int
    lr: float
    loss: float
    train_acc: float | None = None  # filled on the last step of each epoch
    eval_acc: float | None = None


@dataclass
class TrainLog:
    steps: list[StepRecord] = field(default_factory=list)

    def losses(self) -> list[float]:
        return [s.loss for s in self.steps]

    def to_csv(self, path) -> None:
        """Schema: epoch,step,lr,loss,train_acc,eval_acc (acc cells empty mid-epoch)."""
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["epoch", "step", "lr", "loss", "train_acc", "eval_acc"])
            for s in self.steps:
                writer.writerow([
                    s.epoch,
                    s.step,
                    repr(s.lr),
                    repr(s.loss),
                    "" if s.train_acc is None else repr(s.train_acc),
                    "" if s.eval_acc is None else repr(s.eval_acc),
                ])


def derived_rng(seed: int, stream: int) -> np.random.Generator:
    """Independent deterministic generator for (seed, stream)."""
    return np.random.default_rng(np.random.SeedSequence([seed, stream]))


def softmax(z: np.ndarray) -> np.ndarray:
    """Row-wise softmax with max shift; rows sum to 1."""
    shifted = z - z.max(axis=1, keepdims=True)
    ex = np.exp(shifted)
    return ex / ex.sum(axis=1, keepdims=True)


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Mean negative log softmax probability of the true class.

    Computed with the log-sum-exp shift, so saturated logits stay finite.
    The recorded gradient is (softmax - one_hot) / batch.
    """
    if logits.data.ndim != 2:
        raise ValueError(f"cross_entropy expects (n, classes) logits, got {logits.shape}")
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        bad = labels[(labels < 0) | (labels >= k)][0]
        raise ValueError(f"label {bad} out of range for {k} classes")

    z = logits.data
    m = z.max(axis=1, keepdims=True)
    ex = np.exp(z - m)
    sumex = ex.sum(axis=1, keepdims=True)
    log_norm = m[:, 0] + np.log(sumex[:, 0])
    picked = z[np.arange(n), labels]
    out = Tensor(np.asarray((log_norm - picked).mean()))

    tape = _active_tape()
    if tape is not None:
        probs = ex / sumex

        def rule() -> None:
            if out.grad is None:
                return
            g = probs.copy()
            g[np.arange(n), labels] -= 1.0
            _accumulate(logits, g * (out.grad / n))

        tape.record(rule)
    return out


def schedule(step: int, total_steps: int, cfg: TrainConfig) -> float:
    """Polynomial decay from lr_init to lr_final over total_steps.

    lr = (lr_init - lr_final) * (1 - step/total_steps)**decay_power + lr_final,
    with steps past the end clamped to lr_final.
    """
    if step < 0:
        raise ValueError(f"negative step {step}")
    if total_steps < 1:
        raise ValueError(f"total_steps must be >= 1, got {total_steps}")
    if step == 0:
        return cfg.lr_init
    if step >= total_steps:
        return cfg.lr_final
    remaining = 1.0 - step / total_steps
    return (cfg.lr_init - cfg.lr_final) * remaining ** cfg.decay_power + cfg.lr_final


def zero_grads(params: list[Param]) -> None:
    for p in params:
        if p.grad is None:
            p.grad = np.zeros_like(p.data)
        else:
            p.grad[...] = 0.0


def sgd_momentum_step(params: list[Param], lr: float, cfg: TrainConfig) -> None:
    """buf <- momentum*buf + (grad + wd*value); value <- value - lr*buf.

    Weight decay is applied to rank >= 2 params only. Gradients are zeroed
    after the update.
    """
    for p in params:
        if p.grad is None:
            raise TapeError("optimizer step before any backward pass populated gradients")
    for p in params:
        g = p.grad
        if cfg.weight_decay and p.data.ndim > 1:
            g = g + cfg.weight_decay * p.data
        p.momentum_buf *= cfg.momentum
        p.momentum_buf += g
        p.data -= lr * p.momentum_buf
        p.grad[...] = 0.0


def evaluate(model, x: np.ndarray, y: np.ndarray, batch_size: int = 256) -> float:
    """Argmax accuracy with dropout disabled; ties pick the lowest class index."""
    if len(x) == 0:
        raise ValueError("evaluate called with an empty dataset")
    correct = 0
    with no_grad():
        for start in range(0, len(x), batch_size):
            logits = model.forward(Tensor(x[start:start + batch_size]), training=False)
            correct += int((np.argmax(logits.data, axis=1) == y[start:start + batch_size]).sum())
    return correct / len(x)


def train(model, data, cfg: TrainConfig) -> TrainLog:
    """Run the full loop: shuffle, forward, loss, backward, momentum step.

    ``data`` provides train_x/train_y and (possibly empty) test_x/test_y
    arrays. Accuracy on both splits is logged on the last step of every
    epoch. A non-finite loss restores the last all-finite parameter state
    and raises NanLossError carrying the partial log.
    """
    cfg.validate()
    n = len(data.train_x)
    if n == 0:
        raise ValueError("train called with an empty training split")
    params = model.params()
    steps_per_epoch = math.ceil(n / cfg.batch_size)
    total_steps = cfg.epochs * steps_per_epoch
    shuffle_rng = derived_rng(cfg.seed, 1)
    dropout_rng = derived_rng(cfg.seed, 2)

    log = TrainLog()
    last_good = [p.data.copy() for p in params]
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            batch = Tensor(data.train_x[idx])
            labels = data.train_y[idx]
            zero_grads(params)
            with Tape() as tape:
                logits = model.forward(batch, training=True, rng=dropout_rng)
                loss = cross_entropy(logits, labels)
            loss_val = float(loss.data)
            if not math.isfinite(loss_val):
                for p, saved in zip(params, last_good):
                    p.data[...] = saved
                raise NanLossError(f"non-finite loss {loss_val} at step {step}", log=log)
            lr = schedule(step, total_steps, cfg)
            tape.backward(loss)
            sgd_momentum_step(params, lr, cfg)
            log.steps.append(StepRecord(epoch, step, lr, loss_val))
            if all(np.isfinite(p.data).all() for p in params):
                for saved, p in zip(last_good, params):
                    saved[...] = p.data
            step += 1
        record = log.steps[-1]
        record.train_acc = evaluate(model, data.train_x, data.train_y, cfg.batch_size)
        if len(data.test_x):
            record.eval_acc = evaluate(model, data.test_x, data.test_y, cfg.batch_size)
    return log
