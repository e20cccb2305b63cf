"""Weighted cross-entropy, per-batch class weights, momentum SGD and the epoch loop."""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import save_checkpoint
from .data import DatasetManifest, load_split, stack_batch
from .metrics import evaluate
from .model import ModelConfig, build_model
from .tensor import ShapeError, Tensor, make_result, rng_stream

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-12


class TrainingError(RuntimeError):
    pass


@dataclass
class LossWeights:
    w0: float
    w1: float
    n_changed: int = 0
    n_unchanged: int = 0


@dataclass
class TrainConfig:
    batch_size: int = 8
    lr: float = 1e-2
    momentum: float = 0.95
    weight_decay: float = 1.25e-4
    epochs: int = 200
    seed: int = 0
    checkpoint_every: int = 0
    eval_every: int = 1
    target_f1: float | None = None
    prob_floor: float = PROB_FLOOR

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.lr <= 0 or not 0 <= self.momentum < 1 or self.weight_decay < 0:
            raise ValueError("need lr > 0, 0 <= momentum < 1 and weight_decay >= 0")


def class_weights(labels) -> LossWeights:
    """Each class is weighted by the other class's pixel frequency in the batch."""
    labels = np.asarray(labels)
    total = labels.size
    if total == 0:
        raise ValueError("class_weights needs at least one pixel")
    n_c = int(np.count_nonzero(labels))
    n_u = total - n_c
    w1 = n_u / total
    return LossWeights(w0=1.0 - w1, w1=w1, n_changed=n_c, n_unchanged=n_u)


def weighted_ce_loss(logits: Tensor, labels, weights: LossWeights,
                     prob_floor: float = PROB_FLOOR) -> Tensor:
    """Mean over pixels of -w[y] * log softmax(logits)[y]."""
    z = logits.data
    labels = np.asarray(labels).astype(np.int64)
    if z.ndim != 4 or z.shape[1] != 2 or labels.shape != (z.shape[0],) + z.shape[2:]:
        raise ShapeError(f"logits {z.shape} incompatible with labels {labels.shape}")
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    denom = ez.sum(axis=1, keepdims=True)
    prob = ez / denom
    logp = (z - zmax) - np.log(denom)
    lab = labels[:, None]
    logp_y = np.take_along_axis(logp, lab, axis=1)[:, 0]
    floored = logp_y < np.log(prob_floor)
    logp_y = np.where(floored, np.log(prob_floor), logp_y)
    w = np.where(labels == 1, weights.w1, weights.w0)
    npx = labels.size
    loss = -(w * logp_y).sum() / npx

    def backward(g):
        onehot = np.zeros_like(prob)
        np.put_along_axis(onehot, lab, 1.0, axis=1)
        coef = np.where(floored, 0.0, w)[:, None] / npx
        return ((g * coef * (prob - onehot)).astype(z.dtype),)

    return make_result(np.asarray(loss, dtype=z.dtype), (logits,), backward, "weighted_ce")


def sgd_step(params: dict[str, Tensor], velocity: dict[str, np.ndarray], lr: float,
             momentum: float, weight_decay: float) -> None:
    """v <- momentum * v + grad + wd * p;  p <- p - lr * v  (in place)."""
    for name, p in params.items():
        if p.grad is None:
            raise TrainingError(f"missing gradient for parameter {name}")
        step = p.grad + weight_decay * p.data if weight_decay else p.grad
        v = velocity.get(name)
        v = step.astype(p.dtype) if v is None else momentum * v + step
        velocity[name] = v
        p.data = (p.data - lr * v).astype(p.dtype)


class SGD:
    def __init__(self, named_params, lr=1e-2, momentum=0.95, weight_decay=1.25e-4):
        self.params = dict(named_params)
        self.lr, self.momentum, self.weight_decay = lr, momentum, weight_decay
        self.velocity: dict[str, np.ndarray] = {}

    def step(self) -> None:
        sgd_step(self.params, self.velocity, self.lr, self.momentum, self.weight_decay)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None


@dataclass
class TrainResult:
    model: object
    history: list[dict] = field(default_factory=list)
    steps: int = 0
    checkpoints: list[str] = field(default_factory=list)


def train(config: TrainConfig, model_config: ModelConfig, dataset, out_dir=None,
          echo=None) -> TrainResult:
    """Run the epoch loop.

    ``dataset`` is a :class:`DatasetManifest` (train split is used for
    fitting, val split, or train if there is none, for per-epoch scores) or
    a ``(train_pairs, val_pairs)`` tuple. Per-epoch records go to
    ``out_dir/train_log.jsonl`` and checkpoints to ``out_dir``.
    """
    if isinstance(dataset, DatasetManifest):
        train_pairs = load_split(dataset, "train")
        val_pairs = load_split(dataset, "val")
    else:
        train_pairs, val_pairs = dataset
    if not train_pairs:
        raise TrainingError("training split is empty")
    eval_pairs = val_pairs or train_pairs
    eval_name = "val" if val_pairs else "train"

    model = build_model(model_config)
    opt = SGD(model.named_parameters(), config.lr, config.momentum, config.weight_decay)
    dt = model_config.np_dtype
    result = TrainResult(model)
    out_dir = Path(out_dir) if out_dir is not None else None
    log_fh = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")

    def checkpoint(name):
        if out_dir is None:
            return
        path = out_dir / name
        try:
            save_checkpoint(path, model)
        except OSError as exc:
            if log_fh:
                log_fh.flush()
            raise TrainingError(f"could not write checkpoint {path}: {exc}") from exc
        result.checkpoints.append(str(path))

    try:
        n = len(train_pairs)
        for epoch in range(1, config.epochs + 1):
            t_start = time.perf_counter()
            order = rng_stream(config.seed, f"shuffle/{epoch}").permutation(n)
            losses = []
            for start in range(0, n, config.batch_size):
                batch = [train_pairs[i] for i in order[start:start + config.batch_size]]
                t0, t1, labels = stack_batch(batch, dt)
                opt.zero_grad()
                logits = model(Tensor(t0), Tensor(t1), "train")
                loss = weighted_ce_loss(logits, labels, class_weights(labels), config.prob_floor)
                loss.backward()
                opt.step()
                losses.append(float(loss.data))
                result.steps += 1
            record = {"epoch": epoch, "loss": float(np.mean(losses)), "steps": len(losses)}
            if config.eval_every and (epoch % config.eval_every == 0 or epoch == config.epochs):
                rep = evaluate(model, eval_pairs, config.batch_size)
                record.update(eval_split=eval_name, precision=rep.precision,
                              recall=rep.recall, f_score=rep.f_score)
            record["seconds"] = round(time.perf_counter() - t_start, 3)
            result.history.append(record)
            if log_fh:
                log_fh.write(json.dumps(record) + "\n")
                log_fh.flush()
            if echo:
                echo(record)
            logger.info("epoch %d loss %.5f", epoch, record["loss"])
            if config.checkpoint_every and epoch % config.checkpoint_every == 0:
                checkpoint(f"epoch{epoch:04d}.ckpt")
            if config.target_f1 is not None and record.get("f_score", -1.0) >= config.target_f1:
                break
        checkpoint("final.ckpt")
    finally:
        if log_fh:
            log_fh.close()
    return result


def train_config_dict(cfg: TrainConfig) -> dict:
    return asdict(cfg)
