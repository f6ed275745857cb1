"""Cross-entropy training with AdamW and validation-loss early stopping."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .metrics import auroc
from .model import ModelConfig, TcnMambaModel, checkpoint_bytes, copy_state, load_state
from .tensor import Tensor, as_tensor, no_grad


@dataclass
class OptimConfig:
    batch_size: int = 16
    lr: float = 1e-4
    weight_decay: float = 1e-4
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    max_epochs: int = 1000
    patience: int = 10
    min_delta: float = 1e-6
    seed: int = 0

    def validate(self) -> None:
        for k in ("batch_size", "lr", "eps", "max_epochs", "patience"):
            if getattr(self, k) <= 0:
                raise ValueError(f"OptimConfig.{k} must be positive, got {getattr(self, k)}")
        if self.weight_decay < 0:
            raise ValueError(f"OptimConfig.weight_decay must be >= 0, got {self.weight_decay}")


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean of -log softmax(logits)[target] over the batch (log-sum-exp form)."""
    logits = as_tensor(logits)
    if logits.ndim == 1:
        logits = logits.reshape(1, -1)
    t = np.atleast_1d(np.asarray(targets, dtype=np.int64))
    onehot = np.zeros(logits.shape, dtype=logits.dtype)
    onehot[np.arange(t.size), t] = 1.0
    return (logits.log_softmax(axis=-1) * onehot).sum() * (-1.0 / t.size)


def adamw_step(theta: np.ndarray, grad: np.ndarray, m: np.ndarray, v: np.ndarray, t: int, lr: float,
               betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 0.0, name: str = "param"):
    """One decoupled-weight-decay Adam update; returns ``(theta, m, v)``.

    Decay is applied to the pre-step value: ``theta - lr*mhat/(sqrt(vhat)+eps) - lr*wd*theta``.
    """
    if not np.all(np.isfinite(grad)):
        raise FloatingPointError(f"non-finite gradient for {name}")
    b1, b2 = betas
    m = b1 * m + (1 - b1) * grad
    v = b2 * v + (1 - b2) * grad * grad
    mhat = m / (1 - b1**t)
    vhat = v / (1 - b2**t)
    theta = theta - lr * mhat / (np.sqrt(vhat) + eps) - lr * weight_decay * theta
    return theta, m, v


class AdamW:
    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], cfg: OptimConfig):
        self.params = list(named_params)
        self.cfg = cfg
        self.t = 0
        self.m = [np.zeros_like(p.data) for _, p in self.params]
        self.v = [np.zeros_like(p.data) for _, p in self.params]

    def step(self) -> None:
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for _, p in self.params]
        for (name, _), g in zip(self.params, grads):
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient for {name}")
        self.t += 1
        c = self.cfg
        for i, ((name, p), g) in enumerate(zip(self.params, grads)):
            p.data, self.m[i], self.v[i] = adamw_step(p.data, g, self.m[i], self.v[i], self.t, c.lr, c.betas, c.eps,
                                                      c.weight_decay, name)

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None


class EarlyStopping:
    """Tracks the best validation loss; ``update`` returns True once patience is exhausted."""

    def __init__(self, patience: int = 10, min_delta: float = 1e-6):
        self.patience, self.min_delta = patience, min_delta
        self.best = math.inf
        self.best_epoch = 0
        self.bad_epochs = 0

    def update(self, epoch: int, val_loss: float) -> bool:
        if val_loss < self.best - self.min_delta:
            self.best, self.best_epoch, self.bad_epochs = val_loss, epoch, 0
            return False
        self.bad_epochs += 1
        return self.bad_epochs >= self.patience

    @property
    def improved_last(self) -> bool:
        return self.bad_epochs == 0


@dataclass
class TrainHistory:
    train_loss: List[float] = field(default_factory=list)
    val_loss: List[float] = field(default_factory=list)
    val_auroc: List[float] = field(default_factory=list)
    best_epoch: int = 0
    stop_reason: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class ModelCheckpoint:
    config: ModelConfig
    state: Dict[str, np.ndarray]
    metadata: dict

    def to_model(self) -> TcnMambaModel:
        model = TcnMambaModel(self.config)
        load_state(model, self.state)
        model.eval()
        return model

    def save(self, path) -> None:
        Path(path).write_bytes(checkpoint_bytes(self.to_model(), self.metadata))


def make_batches(n: int, batch_size: int, rng: np.random.Generator) -> List[np.ndarray]:
    """Shuffled index batches; a trailing batch of one is folded into its predecessor."""
    order = rng.permutation(n)
    batches = [order[i:i + batch_size] for i in range(0, n, batch_size)]
    if len(batches) > 1 and len(batches[-1]) == 1:
        tail = batches.pop()
        batches[-1] = np.concatenate([batches[-1], tail])
    return batches


def evaluate_loss(model: TcnMambaModel, X: np.ndarray, y: np.ndarray, batch_size: int = 64):
    """Eval-mode mean cross-entropy and AF probabilities."""
    model.eval()
    total, probs = 0.0, []
    with no_grad():
        for i in range(0, len(X), batch_size):
            logits = model.logits(X[i:i + batch_size])
            total += cross_entropy(logits, y[i:i + batch_size]).item() * len(logits)
            probs.append(logits.softmax(-1).data[:, 1])
    return total / len(X), np.concatenate(probs)


def train(model: TcnMambaModel, train_set: Tuple[np.ndarray, np.ndarray], val_set: Tuple[np.ndarray, np.ndarray],
          cfg: OptimConfig, log_path: Optional[Path] = None, progress=None,
          evaluate=evaluate_loss) -> Tuple[ModelCheckpoint, TrainHistory]:
    """Train until validation loss stalls for ``patience`` epochs or ``max_epochs``.

    Returns the checkpoint of the best validation epoch (not the last) and the history.
    ``progress(epoch, train_loss, val_loss)`` is called after each epoch if given;
    ``evaluate(model, X, y) -> (loss, af_probs)`` computes the validation loss.
    """
    cfg.validate()
    X, y = np.asarray(train_set[0]), np.asarray(train_set[1])
    Xv, yv = np.asarray(val_set[0]), np.asarray(val_set[1])
    if len(X) == 0 or len(Xv) == 0:
        raise ValueError("train and validation sets must be non-empty")
    dtype = np.dtype(model.config.dtype)
    X, Xv = X.astype(dtype), Xv.astype(dtype)
    opt = AdamW(model.named_parameters(), cfg)
    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    hist = TrainHistory()
    best = ModelCheckpoint(model.config, copy_state(model), {"epoch": 0, "best_val_loss": None})
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            model.train()
            rng = np.random.default_rng([cfg.seed, epoch])
            total, diverged = 0.0, False
            for b, idx in enumerate(make_batches(len(X), cfg.batch_size, rng)):
                model.set_rng_context(epoch, b)
                opt.zero_grad()
                loss = cross_entropy(model.logits(X[idx]), y[idx])
                if not math.isfinite(loss.item()):
                    diverged = True
                    break
                loss.backward()
                try:
                    opt.step()
                except FloatingPointError:
                    diverged = True
                    break
                total += loss.item() * len(idx)
            if diverged:
                hist.stop_reason = "diverged"
                break
            train_loss = total / len(X)
            val_loss, val_prob = evaluate(model, Xv, yv)
            hist.train_loss.append(train_loss)
            hist.val_loss.append(val_loss)
            hist.val_auroc.append(auroc(val_prob, yv))
            stop = stopper.update(epoch, val_loss)
            if stopper.improved_last:
                best = ModelCheckpoint(model.config, copy_state(model),
                                       {"epoch": epoch, "best_val_loss": val_loss, "optim_step": opt.t})
            if log_fh:
                log_fh.write(json.dumps({"epoch": epoch, "train_loss": train_loss, "val_loss": val_loss,
                                         "lr": cfg.lr, "timestamp": time.time()}) + "\n")
                log_fh.flush()
            if progress:
                progress(epoch, train_loss, val_loss)
            if stop:
                hist.stop_reason = "early_stopping"
                break
        else:
            hist.stop_reason = "max_epochs"
    finally:
        if log_fh:
            log_fh.close()
    hist.best_epoch = stopper.best_epoch
    load_state(model, best.state)
    model.eval()
    return best, hist
