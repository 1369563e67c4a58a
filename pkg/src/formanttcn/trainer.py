"""Adam training loop with padded utterance batches and best-validation selection."""
from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import model as M
from .nn import combined_loss
from .rng import derive_rng

log = logging.getLogger(__name__)


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr_initial: float = 0.001
    lr_after_epoch50: float = 0.0005
    lr_drop_epoch: int = 50
    max_epochs: int = 100
    batch_utterances: int = 4
    max_frames: int = 710
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0
    loss_weights: tuple = (1 / 3, 1 / 3, 1 / 3)
    clip_norm: float = 0.0

    def __post_init__(self):
        if self.batch_utterances < 1 or self.max_frames < 1 or self.max_epochs < 1:
            raise ValueError("batch size, max_frames and max_epochs must be positive")
        if min(self.lr_initial, self.lr_after_epoch50, self.adam_eps) <= 0:
            raise ValueError("learning rates and adam_eps must be positive")
        if len(self.loss_weights) != 3 or min(self.loss_weights) < 0:
            raise ValueError("need three non-negative loss weights")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    lr: float
    seconds: float


@dataclass
class Batch:
    x: np.ndarray
    targets: np.ndarray
    mask: np.ndarray
    names: list


def lr_schedule(epoch, cfg: TrainConfig = TrainConfig()):
    """Step schedule: lr_initial up to epoch 50, then lr_after_epoch50 (epochs are 1-based)."""
    if epoch < 1:
        raise ValueError("epochs are counted from 1")
    return cfg.lr_initial if epoch <= cfg.lr_drop_epoch else cfg.lr_after_epoch50


def adam_step(params, grads, state: AdamState, lr, beta1=0.9, beta2=0.999, eps=1e-7):
    """One in-place Adam update of every array in ``grads``."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericalError(f"non-finite gradient for {name}")
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, g in grads.items():
        if name not in state.m:
            state.m[name] = np.zeros_like(g)
            state.v[name] = np.zeros_like(g)
        m, v = state.m[name], state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        params[name] -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)
    return params, state


def make_batches(utterances, batch=4, max_frames=710, seed=0, epoch=1, shuffle=True):
    """Pad utterances to ``max_frames`` and group them ``batch`` at a time.

    The order is a seeded permutation per epoch. Padding and the silent
    ends of each utterance have mask False.
    """
    if not utterances:
        raise ValueError("empty dataset")
    for u in utterances:
        if len(u) > max_frames:
            raise ValueError(f"utterance {u.name!r} has {len(u)} frames, more than {max_frames}")
    order = np.arange(len(utterances))
    if shuffle:
        order = derive_rng(seed, f"shuffle/{epoch}").permutation(len(utterances))
    dim = utterances[0].features.values.shape[1]
    out = []
    for start in range(0, len(order), batch):
        group = [utterances[i] for i in order[start:start + batch]]
        x = np.zeros((len(group), max_frames, dim))
        targets = np.zeros((3, len(group), max_frames))
        mask = np.zeros((len(group), max_frames), dtype=bool)
        for b, u in enumerate(group):
            n = len(u)
            x[b, :n] = u.features.values
            targets[:, b, :n] = u.targets.T
            mask[b, :n] = u.loss_mask()
        out.append(Batch(x, targets, mask, [u.name for u in group]))
    return out


def _scaled(targets, weights):
    return targets / weights.config.target_scale


def evaluate_loss(weights, utterances, cfg: TrainConfig = TrainConfig()):
    """Frame-weighted combined loss in inference mode (running BN stats, no dropout)."""
    total, count = 0.0, 0
    for b in make_batches(utterances, cfg.batch_utterances, cfg.max_frames, shuffle=False):
        n = int(b.mask.sum())
        if n == 0:
            continue
        preds, _ = M.forward(weights, b.x, b.mask, train=False)
        loss, _, _ = combined_loss(preds, _scaled(b.targets, weights), b.mask, cfg.loss_weights)
        total += loss * n
        count += n
    if count == 0:
        raise ValueError("no valid frames to evaluate")
    return total / count


def _clip(grads, max_norm):
    norm = np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        for g in grads.values():
            g *= max_norm / norm
    return grads


def train(model_cfg: M.ModelConfig, train_cfg: TrainConfig, train_set, val_set,
          on_epoch=None, checkpoint=None):
    """Train and return (weights with lowest validation loss, list of EpochRecord).

    Utterances must already be normalized with statistics fitted on the
    training set. ``on_epoch(record)`` is called after each epoch;
    ``checkpoint`` is a path rewritten whenever validation improves.
    """
    if not train_set or not val_set:
        raise ValueError("training and validation sets must be non-empty")
    weights = M.build(model_cfg, train_cfg.seed)
    state = AdamState()
    dropout_rng = derive_rng(train_cfg.seed, "dropout")
    best, best_loss = weights.copy(), np.inf
    records = []
    for epoch in range(1, train_cfg.max_epochs + 1):
        t0 = time.perf_counter()
        lr = lr_schedule(epoch, train_cfg)
        total, count = 0.0, 0
        batches = make_batches(train_set, train_cfg.batch_utterances, train_cfg.max_frames,
                               train_cfg.seed, epoch)
        for bi, b in enumerate(batches):
            n = int(b.mask.sum())
            if n < 2:
                continue
            preds, cache = M.forward(weights, b.x, b.mask, train=True, rng=dropout_rng)
            loss, dpreds, _ = combined_loss(preds, _scaled(b.targets, weights), b.mask,
                                            train_cfg.loss_weights)
            if not np.isfinite(loss):
                raise NumericalError(f"non-finite loss at epoch {epoch}, batch {bi}")
            grads, _ = M.backward(weights, cache, dpreds, input_grad=False)
            if train_cfg.clip_norm > 0:
                grads = _clip(grads, train_cfg.clip_norm)
            try:
                adam_step(weights.params, grads, state, lr, train_cfg.adam_beta1,
                          train_cfg.adam_beta2, train_cfg.adam_eps)
            except NumericalError as exc:
                raise NumericalError(f"epoch {epoch}, batch {bi}: {exc}") from None
            M.apply_bn_stats(weights, cache["bn_stats"])
            total += loss * n
            count += n
        val_loss = evaluate_loss(weights, val_set, train_cfg)
        if not np.isfinite(val_loss):
            raise NumericalError(f"non-finite validation loss at epoch {epoch}")
        rec = EpochRecord(epoch, total / max(count, 1), val_loss, lr, time.perf_counter() - t0)
        records.append(rec)
        log.info("epoch %d train %.5f val %.5f lr %g (%.1fs)", epoch, rec.train_loss,
                 rec.val_loss, lr, rec.seconds)
        if val_loss < best_loss:
            best, best_loss = weights.copy(), val_loss
            if checkpoint is not None:
                M.save(best, checkpoint)
        if on_epoch is not None:
            on_epoch(rec)
    return best, records


def write_record_csv(path, records):
    with open(path, "w") as fh:
        fh.write("epoch,train_loss,val_loss,lr,seconds\n")
        for r in records:
            fh.write(f"{r.epoch},{r.train_loss!r},{r.val_loss!r},{r.lr!r},{r.seconds:.3f}\n")
