"""Dual-attention skip blocks.

Two variants share the residual composition ``F_pam = PAM(x) + x`` and
``F_skip = CAM(F_pam) + F_pam + x``:

* heavy (deep, low-resolution stages): scaled dot-product attention over
  positions (PAM) and over channels (CAM);
* light (shallow, high-resolution stages): a sigmoid spatial mask from a
  dilated 7x7 convolution of channel statistics (PAM), and per-channel gates
  from a bridge that pools every light stage jointly (CAM).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import (Tensor, add, channel_linear, channel_max, concat, conv2d,
                     matmul, mean, mul, reshape, sigmoid, softmax, split,
                     transpose)

PAM_KERNEL, PAM_DILATION = 7, 3
PAM_PAD = PAM_DILATION * (PAM_KERNEL - 1) // 2
BRIDGE_KERNEL = 3


@dataclass(eq=False)
class Affine:
    weight: Tensor
    bias: Tensor | None = None

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out

    @classmethod
    def from_store(cls, store, prefix: str) -> "Affine":
        return cls(store[f"{prefix}.weight"], store.get(f"{prefix}.bias"))

    @classmethod
    def init(cls, shape, fan_in: int, rng, bias: bool = True, dtype=np.float64) -> "Affine":
        bound = np.sqrt(1.0 / fan_in)
        w = Tensor(rng.uniform(-bound, bound, shape).astype(dtype))
        b = Tensor(rng.uniform(-bound, bound, shape[0]).astype(dtype)) if bias else None
        return cls(w, b)


def reduced_width(c: int) -> int:
    """Query/key width of the spatial attention: c/8, at least 1."""
    return max(1, c // 8)


@dataclass(eq=False)
class DaBlockParams:
    variant: str                     # "heavy" or "light"
    pam_q: Affine | None = None
    pam_k: Affine | None = None
    pam_v: Affine | None = None
    cam_q: Affine | None = None
    cam_k: Affine | None = None
    cam_v: Affine | None = None
    pam_conv: Affine | None = None   # light: shared across the light stages

    _HEAVY = ("pam_q", "pam_k", "pam_v", "cam_q", "cam_k", "cam_v")

    def named(self, prefix: str) -> dict[str, Tensor]:
        out: dict[str, Tensor] = {}
        if self.variant == "heavy":
            for key in self._HEAVY:
                out.update(getattr(self, key).named(f"{prefix}.{key}"))
        return out

    @classmethod
    def from_store(cls, store, prefix: str, variant: str, pam_conv: Affine | None = None) -> "DaBlockParams":
        if variant == "light":
            return cls("light", pam_conv=pam_conv)
        return cls("heavy", **{k: Affine.from_store(store, f"{prefix}.{k}") for k in cls._HEAVY})

    @classmethod
    def init_heavy(cls, c: int, rng, dtype=np.float64) -> "DaBlockParams":
        dk = reduced_width(c)
        return cls(
            "heavy",
            pam_q=Affine.init((dk, c), c, rng, dtype=dtype),
            pam_k=Affine.init((dk, c), c, rng, dtype=dtype),
            pam_v=Affine.init((c, c), c, rng, dtype=dtype),
            cam_q=Affine.init((c, c), c, rng, dtype=dtype),
            cam_k=Affine.init((c, c), c, rng, dtype=dtype),
            cam_v=Affine.init((c, c), c, rng, dtype=dtype),
        )


@dataclass(eq=False)
class ChannelBridge:
    conv: Affine        # weight [1, 1, 1, 3]: 1-D conv over the pooled channel vector
    fc: Affine          # [C, C] with C = sum(widths)
    widths: tuple[int, ...]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {**self.conv.named(f"{prefix}.bridge_conv"), **self.fc.named(f"{prefix}.bridge_fc")}

    @classmethod
    def from_store(cls, store, prefix: str, widths) -> "ChannelBridge":
        return cls(Affine.from_store(store, f"{prefix}.bridge_conv"),
                   Affine.from_store(store, f"{prefix}.bridge_fc"), tuple(widths))

    @classmethod
    def init(cls, widths, rng, dtype=np.float64) -> "ChannelBridge":
        total = int(sum(widths))
        return cls(Affine.init((1, 1, 1, BRIDGE_KERNEL), BRIDGE_KERNEL, rng, dtype=dtype),
                   Affine.init((total, total), total, rng, dtype=dtype), tuple(widths))


def init_pam_conv(rng, dtype=np.float64) -> Affine:
    return Affine.init((1, 2, PAM_KERNEL, PAM_KERNEL), 2 * PAM_KERNEL * PAM_KERNEL, rng, dtype=dtype)


def _as_sequence(x: Tensor) -> Tensor:
    b, c, h, w = x.shape
    return transpose(reshape(x, (b, c, h * w)), (0, 2, 1))      # [b, hw, c]


def _as_map(seq: Tensor, h: int, w: int) -> Tensor:
    b, _, c = seq.shape
    return reshape(transpose(seq, (0, 2, 1)), (b, c, h, w))


def _require(params: DaBlockParams, variant: str) -> None:
    if params.variant != variant:
        raise ValueError(f"expected {variant} attention parameters, got {params.variant}")


def pam_heavy(x: Tensor, params: DaBlockParams, return_attention: bool = False):
    """Position attention: softmax(Q K^T / sqrt(d_k)) over the hw x hw positions."""
    _require(params, "heavy")
    _, _, h, w = x.shape
    seq = _as_sequence(x)
    q = channel_linear(seq, params.pam_q.weight, params.pam_q.bias)
    k = channel_linear(seq, params.pam_k.weight, params.pam_k.bias)
    v = channel_linear(seq, params.pam_v.weight, params.pam_v.bias)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(q.shape[-1]))
    attn = softmax(scores, axis=-1)
    out = _as_map(matmul(attn, v), h, w)
    return (out, attn) if return_attention else out


def cam_heavy(x: Tensor, params: DaBlockParams, return_attention: bool = False):
    """Channel attention: softmax(Q K^T / sqrt(hw)) over the c x c channel pairs."""
    _require(params, "heavy")
    _, _, h, w = x.shape
    seq = _as_sequence(x)
    chan = lambda a: transpose(channel_linear(seq, a.weight, a.bias), (0, 2, 1))   # [b, c, hw]
    q, k, v = chan(params.cam_q), chan(params.cam_k), chan(params.cam_v)
    scores = mul(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(h * w))
    attn = softmax(scores, axis=-1)
    b, c, _ = v.shape
    out = reshape(matmul(attn, v), (b, c, h, w))
    return (out, attn) if return_attention else out


def pam_light(x: Tensor, params: DaBlockParams, return_mask: bool = False):
    """Spatial mask sigmoid(conv([mean_c x, max_c x])) applied to every channel."""
    _require(params, "light")
    stats = concat([mean(x, axis=1, keepdims=True), channel_max(x, axis=1)], axis=1)
    mask = sigmoid(conv2d(stats, params.pam_conv.weight, params.pam_conv.bias,
                          pad=PAM_PAD, dilation=PAM_DILATION))
    out = mul(mask, x)
    return (out, mask) if return_mask else out


def cam_light_bridge(stage_features: list[Tensor], bridge: ChannelBridge) -> list[Tensor]:
    """Per-stage channel weights ``[b, c_i]`` in (0, 1) from jointly pooled descriptors."""
    widths = tuple(f.shape[1] for f in stage_features)
    if widths != bridge.widths:
        raise ValueError(f"bridge built for stage widths {bridge.widths}, got {widths}")
    pooled = concat([mean(f, axis=(2, 3)) for f in stage_features], axis=1)     # [b, C]
    b, total = pooled.shape
    conv = conv2d(reshape(pooled, (b, 1, 1, total)), bridge.conv.weight, bridge.conv.bias,
                  pad=(0, BRIDGE_KERNEL // 2))
    weights = sigmoid(channel_linear(reshape(conv, (b, total)), bridge.fc.weight, bridge.fc.bias))
    return split(weights, 1, list(widths))


def apply_channel_weights(weights: Tensor, fmap: Tensor) -> Tensor:
    b, c = weights.shape
    return mul(reshape(weights, (b, c, 1, 1)), fmap)


def da_block(x: Tensor, params: DaBlockParams, channel_weights: Tensor | None = None) -> Tensor:
    """Residual dual attention.  Light blocks take their CAM gates from the bridge.

    For a light block used on its own, ``channel_weights`` (``[b, c]``) must be
    supplied; :func:`light_skips` wires the bridge across stages.
    """
    if params.variant == "heavy":
        f_pam = add(pam_heavy(x, params), x)
        return add(add(cam_heavy(f_pam, params), f_pam), x)
    if params.variant != "light":
        raise ValueError(f"unknown DA-Block variant {params.variant!r}")
    if channel_weights is None:
        raise ValueError("light DA-Block needs channel weights from the bridge")
    f_pam = add(pam_light(x, params), x)
    return add(add(apply_channel_weights(channel_weights, f_pam), f_pam), x)


def light_skips(features: list[Tensor], params: list[DaBlockParams], bridge: ChannelBridge) -> list[Tensor]:
    """Light DA-Blocks for several stages, synchronised once through the bridge."""
    f_pams = []
    for x, p in zip(features, params):
        _require(p, "light")
        f_pams.append(add(pam_light(x, p), x))
    weights = cam_light_bridge(f_pams, bridge)
    return [add(add(apply_channel_weights(wt, fp), fp), x)
            for wt, fp, x in zip(weights, f_pams, features)]
