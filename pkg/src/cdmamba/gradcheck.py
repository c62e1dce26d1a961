"""Central-difference verification of recorded adjoints.

Two harnesses: :func:`check_primitives` runs every tensor-core op (plus the
fused scan and the losses) on small random inputs; :func:`check_gradients`
compares the full network's loss gradient against finite differences on a
seeded sample of scalar parameters.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .losses import LossConfig, bce_loss, dice_loss, overall_loss
from .network import NetworkConfig, forward, init_params, param_count
from .ssm import selective_scan
from .tensor import Tape, Tensor

PRIMITIVE_TOL = 1e-5
NETWORK_TOL = 1e-3
MICRO_CONFIG = NetworkConfig(stage_widths=(4, 4, 4, 4, 4, 4), groups=2)


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Norm-wise ``|a - n| / max(|a|, |n|)`` (0 when both vanish)."""
    scale = max(np.linalg.norm(analytic), np.linalg.norm(numeric))
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def numeric_gradient(f: Callable[[], float], arr: np.ndarray, step: float = 1e-6,
                     index: Sequence[tuple] | None = None) -> np.ndarray:
    """Central differences of scalar ``f`` w.r.t. entries of ``arr`` (perturbed in place)."""
    out = np.zeros_like(arr)
    for idx in (index if index is not None else np.ndindex(arr.shape)):
        orig = arr[idx]
        h = step * max(1.0, abs(orig))
        arr[idx] = orig + h
        fp = f()
        arr[idx] = orig - h
        fm = f()
        arr[idx] = orig
        out[idx] = (fp - fm) / (2.0 * h)
    return out


def check_op(fn: Callable[..., Tensor], inputs: Sequence[np.ndarray], seed: int = 0,
             step: float = 1e-6) -> float:
    """Max over inputs of the relative error of ``<fn(*inputs), r>``'s gradient."""
    arrays = [np.array(a, dtype=np.float64) for a in inputs]
    probe = fn(*[Tensor(a) for a in arrays])
    r = np.random.default_rng(seed).standard_normal(probe.shape)

    def scalar() -> float:
        return float(np.sum(fn(*[Tensor(a) for a in arrays]).data * r))

    leaves = [Tensor(a) for a in arrays]
    with Tape() as tape:
        out = fn(*leaves)
    grads = tape.gradient(out, leaves, seed=r)
    return max(rel_error(g, numeric_gradient(scalar, a, step)) for g, a in zip(grads, arrays))


def _positive(rng, shape):
    return rng.uniform(0.5, 2.0, shape)


def primitive_cases(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[np.ndarray]]]:
    rng = np.random.default_rng(seed)
    n = rng.standard_normal
    gamma, beta = n(4), n(4)
    tie_free = n((2, 3, 4, 4))
    return {
        "add": (T.add, [n((3, 4)), n((4,))]),
        "sub": (T.sub, [n((3, 4)), n((3, 1))]),
        "mul": (T.mul, [n((3, 4)), n((1, 4))]),
        "div": (T.div, [n((3, 4)), _positive(rng, (3, 4))]),
        "neg": (T.neg, [n((3, 4))]),
        "sum": (lambda x: T.tsum(x, axis=1), [n((3, 4, 2))]),
        "mean": (lambda x: T.mean(x, axis=(0, 2), keepdims=True), [n((3, 4, 2))]),
        "exp": (T.exp, [n((3, 4))]),
        "log": (T.log, [_positive(rng, (3, 4))]),
        "sigmoid": (T.sigmoid, [n((3, 4))]),
        "silu": (T.silu, [n((3, 4))]),
        "gelu": (T.gelu, [n((3, 4))]),
        "softplus": (T.softplus, [n((3, 4))]),
        "softmax": (lambda x: T.softmax(x, axis=-1), [n((3, 5))]),
        "matmul": (T.matmul, [n((2, 3, 4)), n((2, 4, 5))]),
        "channel_linear": (T.channel_linear, [n((2, 5, 3)), n((4, 3)), n(4)]),
        "reshape": (lambda x: T.reshape(x, (4, 3)), [n((3, 4))]),
        "transpose": (lambda x: T.transpose(x, (2, 0, 1)), [n((2, 3, 4))]),
        "flip": (lambda x: T.flip(x, 1), [n((2, 5))]),
        "take": (lambda x: T.take(x, np.array([3, 0, 0, 2]), axis=1), [n((2, 4, 3))]),
        "split": (lambda x: T.split(x, 1, [1, 3])[1], [n((2, 4))]),
        "concat": (lambda a, b: T.concat([a, b], axis=1), [n((2, 3)), n((2, 2))]),
        "channel_max": (T.channel_max, [tie_free]),
        "conv2d": (lambda x, w, b: T.conv2d(x, w, b, stride=1, pad=1), [n((2, 3, 5, 5)), n((2, 3, 3, 3)), n(2)]),
        "conv2d_dilated": (lambda x, w: T.conv2d(x, w, None, pad=2, dilation=2), [n((1, 2, 6, 6)), n((1, 2, 3, 3))]),
        "conv2d_strided": (lambda x, w: T.conv2d(x, w, None, stride=2, pad=1), [n((1, 2, 6, 6)), n((2, 2, 3, 3))]),
        "maxpool2": (T.maxpool2, [tie_free]),
        "bilinear_upsample2": (T.bilinear_upsample2, [n((2, 3, 3, 4))]),
        "group_norm": (lambda x, g, b: T.group_norm(x, 2, g, b), [n((2, 4, 3, 3)), gamma, beta]),
        "layer_norm": (T.layer_norm, [n((2, 5, 4)), gamma, beta]),
        "selective_scan": (selective_scan, [n((2, 6, 3)), rng.uniform(0.01, 0.5, (2, 6, 3)),
                                            -rng.uniform(0.5, 2.0, (3, 4)), n((2, 6, 4)), n((2, 6, 4))]),
        "bce_loss": (lambda y: bce_loss(y, (np.arange(12).reshape(3, 4) % 3 == 0).astype(float)),
                     [rng.uniform(0.1, 0.9, (3, 4))]),
        "dice_loss": (lambda y: dice_loss(y, (np.arange(24).reshape(2, 3, 4) % 2).astype(float)),
                      [rng.uniform(0.1, 0.9, (2, 3, 4))]),
    }


def check_primitives(seed: int = 0) -> dict[str, float]:
    return {name: check_op(fn, inputs, seed) for name, (fn, inputs) in primitive_cases(seed).items()}


def corrupted_sigmoid(x: Tensor) -> Tensor:
    """Sigmoid whose recorded adjoint is off by a factor of two (negative control)."""
    s = 1.0 / (1.0 + np.exp(-x.data))
    return T.record_op("corrupted_sigmoid", s, (x,), lambda g: (2.0 * g * s * (1.0 - s),))


def negative_control(seed: int = 0) -> float:
    """Relative error the harness reports for :func:`corrupted_sigmoid`; should be large."""
    x = np.random.default_rng(seed).standard_normal((3, 4))
    return check_op(corrupted_sigmoid, [x], seed)


@dataclass
class GradReport:
    entries: list[tuple[str, tuple, float, float, float]] = field(default_factory=list)
    tol: float = NETWORK_TOL

    @property
    def max_rel(self) -> float:
        return max((e[4] for e in self.entries), default=0.0)

    @property
    def mean_rel(self) -> float:
        return float(np.mean([e[4] for e in self.entries])) if self.entries else 0.0

    @property
    def passed(self) -> bool:
        return self.max_rel <= self.tol

    def summary(self) -> str:
        return (f"checked={len(self.entries)} max_rel_err={self.max_rel:.3e} "
                f"mean_rel_err={self.mean_rel:.3e} tol={self.tol:g} {'PASS' if self.passed else 'FAIL'}")


def check_gradients(config: NetworkConfig = MICRO_CONFIG, seed: int = 0, sample_fraction: float = 0.01,
                    size: int = 32, step: float = 1e-5, floor: float = 1e-7) -> GradReport:
    """FD check of the overall loss on a random tile for a seeded parameter sample.

    Per entry the error is ``|a - n| / max(|a|, |n|, floor)``; the floor keeps
    entries whose true gradient sits below the difference quotient's resolution
    (about eps * |loss| / step) from reporting round-off as error.
    """
    if param_count(config) > 50_000:
        raise ValueError("gradient check is meant for micro configurations (<= 50k parameters)")
    rng = np.random.default_rng(seed)
    params = init_params(config, seed)
    x = rng.uniform(0.0, 1.0, (1, config.in_bands, size, size))
    t = (rng.uniform(size=(1, size, size)) > 0.5).astype(np.float64)
    cfg = LossConfig()

    def loss_value() -> float:
        return float(overall_loss(forward(Tensor(x), params), t, cfg).data)

    names = list(params.tensors)
    with Tape() as tape:
        loss = overall_loss(forward(Tensor(x), params), t, cfg)
    grads = dict(zip(names, tape.gradient(loss, [params[n] for n in names])))

    flat = [(n, idx) for n in names for idx in np.ndindex(params[n].shape)]
    k = max(1, int(round(sample_fraction * len(flat))))
    pick = rng.choice(len(flat), size=k, replace=False)
    report = GradReport()
    for j in sorted(pick):
        name, idx = flat[j]
        arr = params[name].data
        num = numeric_gradient(loss_value, arr, step, [idx])[idx]
        ana = grads[name][idx]
        err = abs(ana - num) / max(abs(ana), abs(num), floor)
        report.entries.append((name, idx, float(ana), float(num), float(err)))
    return report
