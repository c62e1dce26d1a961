"""AdamW with a per-epoch cosine schedule, and the training loop."""

from __future__ import annotations

import math
import os
import time
from dataclasses import dataclass, field
from typing import Callable, TextIO

import numpy as np

from .losses import ConfusionCounts, LossConfig, bce_loss, confusion, overall_loss
from .network import NetworkConfig, NetworkParams, forward, init_params
from .synthetic import TileDataset, holdout_split
from .tensor import DTYPES, NonFiniteError, Tape, Tensor


class NonFiniteLossError(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 80
    batch_size: int = 8
    lr0: float = 1e-3
    lr_min: float = 1e-5
    weight_decay: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    seed: int = 0
    gamma: float = 1.0
    precision: str = "double"
    val_fraction: float = 0.2

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not 0 < self.lr_min <= self.lr0:
            raise ValueError(f"need 0 < lr_min <= lr0, got {self.lr_min}, {self.lr0}")
        if self.precision not in DTYPES:
            raise ValueError(f"precision must be one of {sorted(DTYPES)}")


def cosine_lr(epoch: int, config: TrainConfig) -> float:
    """``lr_min + (lr0 - lr_min) (1 + cos(pi epoch / epochs)) / 2`` for ``0 <= epoch <= epochs``."""
    if not 0 <= epoch <= config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs}]")
    if epoch == config.epochs:
        return config.lr_min        # cos(pi) = -1 exactly; avoid rounding in the sum
    return config.lr_min + 0.5 * (config.lr0 - config.lr_min) * (1.0 + math.cos(math.pi * epoch / config.epochs))


def decays(name: str) -> bool:
    """Decoupled weight decay is applied to ``*.weight`` tensors only."""
    return name.endswith(".weight")


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params) -> "AdamState":
        return cls({k: np.zeros_like(t.data) for k, t in params.items()},
                   {k: np.zeros_like(t.data) for k, t in params.items()})

    def records(self) -> dict[str, np.ndarray]:
        out = {f"opt.m.{k}": a for k, a in self.m.items()}
        out.update({f"opt.v.{k}": a for k, a in self.v.items()})
        out["opt.step"] = np.asarray([float(self.step)])
        return out

    @classmethod
    def from_records(cls, records: dict[str, np.ndarray]) -> "AdamState":
        m = {k[len("opt.m."):]: a for k, a in records.items() if k.startswith("opt.m.")}
        v = {k[len("opt.v."):]: a for k, a in records.items() if k.startswith("opt.v.")}
        return cls(m, v, int(records["opt.step"][0]))


def adamw_step(params, grads: dict[str, np.ndarray], state: AdamState, lr: float,
               config: TrainConfig) -> tuple[object, AdamState]:
    """One decoupled-decay Adam update, applied in place to the parameter tensors."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    c1, c2 = 1.0 - b1 ** t, 1.0 - b2 ** t
    for name, p in params.items():
        g = grads[name]
        if g.shape != p.shape or state.m[name].shape != p.shape:
            raise ValueError(f"{name}: parameter {p.shape}, gradient {g.shape}, state {state.m[name].shape}")
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        data = p.data
        if config.weight_decay and decays(name):
            data -= lr * config.weight_decay * data
        data -= lr * (m / c1) / (np.sqrt(v / c2) + config.adam_eps)
    return params, state


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    val: dict[str, float]

    def line(self) -> str:
        return (f"epoch={self.epoch} lr={self.lr:.17g} loss={self.loss:.17g} "
                f"val_miou={self.val['miou']:.17g} val_f1={self.val['f1']:.17g} val_acc={self.val['acc']:.17g}")


@dataclass
class TrainResult:
    params: NetworkParams
    history: list[EpochRecord]
    initial_bce: float
    train_index: np.ndarray
    val_index: np.ndarray
    state: AdamState
    seconds: float = 0.0
    log_lines: list[str] = field(default_factory=list)


def predict(params: NetworkParams, images: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """Probability maps for ``[N, 4, H, W]`` images, evaluated without a tape."""
    outs = []
    for s in range(0, images.shape[0], batch_size):
        x = Tensor(images[s:s + batch_size].astype(params.dtype))
        outs.append(forward(x, params).data)
    return np.concatenate(outs, axis=0)


def evaluate(params: NetworkParams, data: TileDataset, batch_size: int = 8) -> ConfusionCounts:
    """Confusion counts pooled over every pixel of ``data``."""
    return confusion(predict(params, data.images, batch_size), data.masks)


def initial_bce(params: NetworkParams, data: TileDataset, batch_size: int = 8) -> float:
    probs = predict(params, data.images, batch_size)
    return float(bce_loss(Tensor(probs), data.masks).data)


def train(net_config: NetworkConfig, config: TrainConfig, dataset: TileDataset,
          out_dir: str | None = None, log: TextIO | None = None,
          on_epoch: Callable[[EpochRecord], None] | None = None) -> TrainResult:
    """Train on a seeded split of ``dataset``, validating every epoch on the held-out part."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    start = time.perf_counter()
    train_idx, val_idx = holdout_split(len(dataset), config.val_fraction, config.seed)
    train_set, val_set = dataset.subset(train_idx), dataset.subset(val_idx)
    dtype = DTYPES[config.precision]
    params = init_params(net_config, config.seed, config.precision)
    names = list(params.tensors)
    leaves = [params[n] for n in names]
    state = AdamState.zeros_like(params)
    loss_cfg = LossConfig(gamma=config.gamma)
    images = train_set.images.astype(dtype)
    masks = train_set.masks.astype(dtype)
    bce0 = initial_bce(params, train_set, config.batch_size)

    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        log_path = os.path.join(out_dir, "train.log")
        open(log_path, "w").close()

    history, lines = [], []
    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        order = np.random.default_rng([config.seed, epoch]).permutation(len(train_set))
        total, batches = 0.0, 0
        for bi, s in enumerate(range(0, len(order), config.batch_size)):
            idx = order[s:s + config.batch_size]
            where = f"epoch {epoch}, batch {bi} (tiles {train_idx[idx].tolist()})"
            try:
                with Tape() as tape:
                    loss = overall_loss(forward(Tensor(images[idx]), params), masks[idx], loss_cfg)
            except NonFiniteError as exc:
                raise NonFiniteLossError(f"{exc} at {where}") from exc
            value = float(loss.data)
            if not math.isfinite(value):
                raise NonFiniteLossError(f"non-finite loss {value} at {where}")
            grads = tape.gradient(loss, leaves)
            adamw_step(params.tensors, dict(zip(names, grads)), state, lr, config)
            total += value
            batches += 1
        record = EpochRecord(epoch, lr, total / batches, evaluate(params, val_set, config.batch_size).as_dict())
        history.append(record)
        line = record.line()
        lines.append(line)
        if log is not None:
            print(line, file=log, flush=True)
        if out_dir:
            with open(log_path, "a") as fh:
                fh.write(line + "\n")
            params.save(os.path.join(out_dir, "checkpoint.cdmw"), extra=state.records())
        if on_epoch is not None:
            on_epoch(record)

    if out_dir:
        params.save(os.path.join(out_dir, "weights.cdmw"))
    return TrainResult(params, history, bce0, train_idx, val_idx, state,
                       time.perf_counter() - start, lines)
