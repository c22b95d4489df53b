"""Mini-batch training: cross-entropy, Adam with L2, triangular2 cyclical LR.

Weights whose validation accuracy strictly improves on the best so far are
kept (and optionally checkpointed), so the returned weights are the best
validation snapshot rather than the last step.
"""
import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import weights_io
from .netdef import NetworkDef, backward, forward, forward_train, param_specs
from .preprocess import NO_AUGMENT, AugmentPolicy, augment

BATCH_SIZES = {"s": 256, "w": 128, "p": 512}


@dataclass(frozen=True)
class TrainConfig:
    base_lr: float = 0.001
    max_lr: float = 0.006
    clr_step: int = 40
    clr_mode: str = "triangular2"
    l2_lambda: float = 0.001
    batch_size: int = 256
    max_epochs: int = 10_000
    max_steps: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    adam_epsilon: float = 1e-8
    seed: int = 0
    augment: AugmentPolicy = NO_AUGMENT

    def __post_init__(self):
        if not 0 < self.base_lr <= self.max_lr:
            raise ValueError("need 0 < base_lr <= max_lr")
        if self.clr_step < 1:
            raise ValueError("clr_step must be >= 1")
        if self.l2_lambda < 0:
            raise ValueError("l2_lambda must be >= 0")
        if self.clr_mode not in ("triangular", "triangular2"):
            raise ValueError(f"unknown clr_mode {self.clr_mode!r}")


@dataclass
class AdamState:
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def cross_entropy(probs, true_class) -> float:
    """``-log p[true]`` with the probability clamped at 1e-12."""
    probs = np.asarray(probs)
    if probs.ndim == 1:
        if not 0 <= true_class < probs.shape[0]:
            raise IndexError(f"class {true_class} out of range for {probs.shape[0]} classes")
        return float(-np.log(max(float(probs[true_class]), 1e-12)))
    labels = np.asarray(true_class)
    if labels.min() < 0 or labels.max() >= probs.shape[1]:
        raise IndexError("class label out of range")
    picked = probs[np.arange(len(labels)), labels]
    return float(-np.log(np.maximum(picked, 1e-12)).mean())


def cross_entropy_grad(probs, labels):
    """dLoss/dProbs for the batch-mean loss."""
    n = probs.shape[0]
    g = np.zeros_like(probs)
    rows = np.arange(n)
    g[rows, labels] = -1 / (np.maximum(probs[rows, labels], probs.dtype.type(1e-12)) * n)
    return g


def clr(iteration: int, base_lr: float = 0.001, max_lr: float = 0.006, step: int = 40,
        mode: str = "triangular2") -> float:
    """Cyclical learning rate; ``triangular2`` halves the amplitude every cycle."""
    if iteration < 0:
        raise ValueError("iteration must be >= 0")
    cycle = math.floor(1 + iteration / (2 * step))
    x = abs(iteration / step - 2 * cycle + 1)
    scale = 1.0 if mode == "triangular" else 2.0 ** (1 - cycle)
    return base_lr + (max_lr - base_lr) * max(0.0, 1 - x) * scale


def xavier_init(net: NetworkDef, seed: int = 0, dtype=np.float32) -> dict:
    """Glorot-uniform kernels, zero biases, identity batchnorm."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape, _ in param_specs(net):
        param = name.rsplit(".", 1)[1]
        if param == "kernel":
            if len(shape) == 4:
                rf = shape[2] * shape[3]
                fan_in, fan_out = shape[1] * rf, shape[0] * rf
            else:
                fan_in, fan_out = shape
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            weights[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif param in ("gamma", "moving_var"):
            weights[name] = np.ones(shape, dtype=dtype)
        else:
            weights[name] = np.zeros(shape, dtype=dtype)
    return weights


def l2_names(net: NetworkDef) -> set:
    """Parameters that receive L2: conv and dense kernels only."""
    return {name for name, _, trainable in param_specs(net) if trainable and name.endswith(".kernel")}


def l2_penalty(weights: dict, names, l2_lambda: float) -> float:
    return 0.5 * l2_lambda * sum(float(np.sum(weights[n].astype(np.float64) ** 2)) for n in names)


def adam_state_tensors(state: AdamState) -> dict:
    """Flatten ``state`` into float32 tensors for :mod:`weights_io`.

    Names are ``adam.step``, ``adam.m.<param>`` and ``adam.v.<param>``.
    """
    if state.step >= 2 ** 24:
        raise ValueError("step count too large to store exactly as float32")
    out = {"adam.step": np.array([state.step], np.float32)}
    for name in state.m:
        out[f"adam.m.{name}"] = np.asarray(state.m[name], np.float32)
        out[f"adam.v.{name}"] = np.asarray(state.v[name], np.float32)
    return out


def adam_state_from_tensors(tensors: dict) -> AdamState:
    if "adam.step" not in tensors:
        raise KeyError("adam.step")
    m = {k[len("adam.m."):]: v for k, v in tensors.items() if k.startswith("adam.m.")}
    v = {k[len("adam.v."):]: t for k, t in tensors.items() if k.startswith("adam.v.")}
    if set(m) != set(v):
        raise ValueError("first and second moment entries do not match")
    return AdamState(int(tensors["adam.step"][0]), m, v)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float, l2_lambda: float = 0.0,
              decay: Optional[set] = None, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update over the entries of ``grads``.

    ``l2_lambda * w`` is added to the gradient of every name in ``decay``.
    Returns ``(new_params, new_state)``; inputs are not modified.
    """
    t = state.step + 1
    new_params = dict(params)
    m_all, v_all = dict(state.m), dict(state.v)
    c1 = 1 - beta1 ** t
    c2 = 1 - beta2 ** t
    for name, g in grads.items():
        w = params[name]
        if g.shape != w.shape:
            raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {w.shape}")
        dt = w.dtype
        if decay and name in decay and l2_lambda:
            g = g + dt.type(l2_lambda) * w
        m = m_all.get(name)
        v = v_all.get(name)
        if m is None:
            m = np.zeros_like(w)
            v = np.zeros_like(w)
        m = (dt.type(beta1) * m + dt.type(1 - beta1) * g).astype(dt)
        v = (dt.type(beta2) * v + dt.type(1 - beta2) * g * g).astype(dt)
        mhat = m / dt.type(c1)
        vhat = v / dt.type(c2)
        new_params[name] = (w - dt.type(lr) * mhat / (np.sqrt(vhat) + dt.type(eps))).astype(dt)
        m_all[name], v_all[name] = m, v
    return new_params, AdamState(t, m_all, v_all)


def accuracy(net: NetworkDef, weights: dict, x, y, batch_size: int = 256) -> float:
    if len(y) == 0:
        return float("nan")
    hits = 0
    for i in range(0, len(y), batch_size):
        probs = forward(net, weights, x[i:i + batch_size])
        hits += int((probs.argmax(axis=1) == y[i:i + batch_size]).sum())
    return hits / len(y)


@dataclass
class TrainResult:
    best_weights: dict
    best_val_acc: float
    best_epoch: int
    final_weights: dict
    steps: list  # per optimizer step: (step, epoch, lr, loss)
    epochs: list  # per epoch: dict(epoch, step, lr, train_loss, train_acc, val_acc)


def _augment_batch(xb, seeds, policy):
    out = np.empty_like(xb)
    for i, (img, s) in enumerate(zip(xb, seeds)):
        out[i], _ = augment(img, None, int(s), policy)
    return out


def train(net: NetworkDef, train_x, train_y, val_x, val_y, cfg: TrainConfig,
          weights: Optional[dict] = None, checkpoint: Optional[str] = None,
          history_csv: Optional[str] = None, log=None) -> TrainResult:
    """Train ``net`` on preprocessed arrays ``(N, C, H, W)`` with integer labels."""
    train_x = np.ascontiguousarray(train_x, dtype=np.float32)
    val_x = np.ascontiguousarray(val_x, dtype=np.float32)
    train_y = np.asarray(train_y, dtype=np.int64)
    val_y = np.asarray(val_y, dtype=np.int64)
    if len(train_y) == 0 or len(val_y) == 0:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(cfg.seed)
    if weights is None:
        weights = xavier_init(net, seed=cfg.seed)
    trainable = [n for n, _, t in param_specs(net) if t]
    decay = l2_names(net)
    state = AdamState()
    steps, epochs = [], []
    best = (-1.0, -1, weights)
    augmenting = cfg.augment != NO_AUGMENT
    step = 0
    writer = None
    fh = None
    if history_csv:
        fh = open(history_csv, "w", newline="")
        writer = csv.writer(fh)
        writer.writerow(["epoch", "step", "lr", "train_loss", "train_acc", "val_acc"])
    try:
        for epoch in range(cfg.max_epochs):
            order = rng.permutation(len(train_y))
            losses, hits, seen = [], 0, 0
            for i in range(0, len(order), cfg.batch_size):
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
                idx = order[i:i + cfg.batch_size]
                xb, yb = train_x[idx], train_y[idx]
                if augmenting:
                    xb = _augment_batch(xb, rng.integers(0, 2**31, size=len(idx)), cfg.augment)
                lr = clr(step, cfg.base_lr, cfg.max_lr, cfg.clr_step, cfg.clr_mode)
                tape = forward_train(net, weights, xb, rng)
                loss = cross_entropy(tape.probs, yb) + l2_penalty(weights, decay, cfg.l2_lambda)
                grads = backward(tape, cross_entropy_grad(tape.probs, yb))
                weights, state = adam_step(weights, {n: grads[n] for n in trainable}, state, lr,
                                           cfg.l2_lambda, decay, cfg.beta1, cfg.beta2, cfg.adam_epsilon)
                weights.update(tape.bn_updates)
                losses.append(loss)
                hits += int((tape.probs.argmax(axis=1) == yb).sum())
                seen += len(idx)
                steps.append((step, epoch, lr, loss))
                step += 1
            if not losses:
                break
            val_acc = accuracy(net, weights, val_x, val_y)
            row = {"epoch": epoch, "step": step, "lr": steps[-1][2], "train_loss": float(np.mean(losses)),
                   "train_acc": hits / seen, "val_acc": val_acc}
            epochs.append(row)
            if writer:
                writer.writerow([row[k] for k in ("epoch", "step", "lr", "train_loss", "train_acc", "val_acc")])
            if val_acc > best[0]:
                best = (val_acc, epoch, dict(weights))
                if checkpoint:
                    weights_io.save(best[2], checkpoint, net)
            if log:
                log(f"epoch {epoch} step {step} loss {row['train_loss']:.4f} "
                    f"train_acc {row['train_acc']:.3f} val_acc {val_acc:.3f}")
    finally:
        if fh:
            fh.close()
    return TrainResult(best[2], best[0], best[1], weights, steps, epochs)


# -- synthetic data -------------------------------------------------------

SHAPES = ("disk", "square", "triangle", "cross")


def draw_shape(kind: str, size: int, rng) -> np.ndarray:
    """Binary ``(size, size)`` silhouette of ``kind`` with random scale and position."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    r = rng.uniform(0.22, 0.34) * size
    cy = rng.uniform(r + 1, size - r - 1)
    cx = rng.uniform(r + 1, size - r - 1)
    dy, dx = yy - cy, xx - cx
    if kind == "disk":
        m = dy ** 2 + dx ** 2 <= r ** 2
    elif kind == "square":
        m = (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    elif kind == "triangle":
        m = (dy <= r * 0.8) & (dy >= -r) & (np.abs(dx) <= (dy + r) * 0.6)
    elif kind == "cross":
        arm = r * 0.3
        m = ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    else:
        raise ValueError(kind)
    return m.astype(np.float32)


def toy_shapes(n: int, size: int = 32, seed: int = 0):
    """``n`` single-channel silhouettes, classes cycling through :data:`SHAPES`."""
    rng = np.random.default_rng(seed)
    y = np.arange(n) % len(SHAPES)
    x = np.stack([draw_shape(SHAPES[c], size, rng)[None] for c in y])
    return x, y


def save_history_csv(result: TrainResult, path) -> None:
    with open(Path(path), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["epoch", "step", "lr", "train_loss", "train_acc", "val_acc"])
        for row in result.epochs:
            w.writerow([row[k] for k in ("epoch", "step", "lr", "train_loss", "train_acc", "val_acc")])
