"""Cloud-SMB: channel-split, four-direction, parameter-shared spatial Mamba block.

Inputs are sequences ``[batch, length, channels]`` obtained by row-major
flattening of a feature map.  The four channel chunks share one pair of SSM
parameter sets: ``ssm_f`` scans the natural order, ``ssm_r`` scans the
backward, for-backward and back-forward orders.  Because of that sharing, the
chunks (and the three reversed directions) are stacked along the batch axis
and scanned in a single call.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .ssm import SsmParams, gated_ssm
from .tensor import (Tensor, add, channel_linear, concat, layer_norm, silu,
                     split, take)

DIRECTIONS = ("f", "b", "fb", "bf")
REVERSE_FAMILY = ("b", "fb", "bf")


def direction_permutations(length: int) -> dict[str, np.ndarray]:
    """Scan orders as index arrays: ``perm[k]`` is the natural position scanned k-th.

    The halves are ``[0, length // 2)`` and ``[length // 2, length)``; for odd
    lengths the second half holds the extra position.
    """
    idx = np.arange(length)
    plus, minus = np.split(idx, [length // 2])
    return {
        "f": idx,
        "b": np.flip(idx).copy(),
        "fb": np.concatenate([plus, np.flip(minus)]),
        "bf": np.concatenate([np.flip(plus), minus]),
    }


def inverse_permutation(perm: np.ndarray) -> np.ndarray:
    inv = np.empty_like(perm)
    inv[perm] = np.arange(len(perm))
    return inv


@dataclass
class DirectionBundle:
    f: Tensor
    b: Tensor
    fb: Tensor
    bf: Tensor
    perms: dict[str, np.ndarray]

    def sequence(self, direction: str) -> Tensor:
        return getattr(self, direction)

    def restore(self, direction: str, seq: Tensor) -> Tensor:
        """Put a sequence produced in ``direction`` order back into natural order."""
        if direction == "f":
            return seq
        return take(seq, inverse_permutation(self.perms[direction]), axis=1)


def build_directions(chunk: Tensor) -> DirectionBundle:
    perms = direction_permutations(chunk.shape[1])
    seqs = {o: chunk if o == "f" else take(chunk, perms[o], axis=1) for o in DIRECTIONS}
    return DirectionBundle(perms=perms, **seqs)


@dataclass(eq=False)
class CloudSmbParams:
    norm_in_gamma: Tensor
    norm_in_beta: Tensor
    ssm_f: SsmParams
    ssm_r: SsmParams | None
    agg_proj: Tensor | None      # [c/4, c/2], bias-free
    norm_out_gamma: Tensor
    norm_out_beta: Tensor
    out_proj: Tensor             # [c_out, 2c] (plain block: [c_out, c])
    out_bias: Tensor

    @property
    def plain(self) -> bool:
        """True for the single-direction ablation block."""
        return self.ssm_r is None

    @property
    def c_in(self) -> int:
        return self.norm_in_gamma.shape[0]

    @property
    def c_out(self) -> int:
        return self.out_proj.shape[0]

    def direction_params(self, direction: str) -> SsmParams:
        if direction not in DIRECTIONS:
            raise ValueError(f"unknown direction {direction!r}")
        return self.ssm_f if direction == "f" else self.ssm_r

    def named(self, prefix: str) -> dict[str, Tensor]:
        out = {f"{prefix}.norm_in.gamma": self.norm_in_gamma,
               f"{prefix}.norm_in.beta": self.norm_in_beta}
        out.update(self.ssm_f.named(f"{prefix}.ssm_f"))
        if not self.plain:
            out.update(self.ssm_r.named(f"{prefix}.ssm_r"))
            out[f"{prefix}.agg_proj.weight"] = self.agg_proj
        out.update({f"{prefix}.norm_out.gamma": self.norm_out_gamma,
                    f"{prefix}.norm_out.beta": self.norm_out_beta,
                    f"{prefix}.out_proj.weight": self.out_proj,
                    f"{prefix}.out_proj.bias": self.out_bias})
        return out

    @classmethod
    def from_store(cls, store, prefix: str) -> "CloudSmbParams":
        plain = f"{prefix}.ssm_r.A" not in store
        return cls(
            store[f"{prefix}.norm_in.gamma"], store[f"{prefix}.norm_in.beta"],
            SsmParams.from_store(store, f"{prefix}.ssm_f"),
            None if plain else SsmParams.from_store(store, f"{prefix}.ssm_r"),
            None if plain else store[f"{prefix}.agg_proj.weight"],
            store[f"{prefix}.norm_out.gamma"], store[f"{prefix}.norm_out.beta"],
            store[f"{prefix}.out_proj.weight"], store[f"{prefix}.out_proj.bias"],
        )

    @classmethod
    def init(cls, c_in: int, c_out: int, state_dim: int, rng: np.random.Generator,
             plain: bool = False, dtype=np.float64) -> "CloudSmbParams":
        if c_in % 4:
            raise ValueError(f"Cloud-SMB needs c_in divisible by 4, got {c_in}")
        mk = lambda a: Tensor(np.asarray(a, dtype=dtype))
        uniform = lambda fan_in, shape: mk(rng.uniform(-np.sqrt(1.0 / fan_in), np.sqrt(1.0 / fan_in), shape))
        q = c_in // 4
        lanes = c_in if plain else 2 * c_in
        return cls(
            norm_in_gamma=mk(np.ones(c_in)), norm_in_beta=mk(np.zeros(c_in)),
            ssm_f=SsmParams.init(c_in if plain else q, state_dim, rng, dtype),
            ssm_r=None if plain else SsmParams.init(q, state_dim, rng, dtype),
            agg_proj=None if plain else uniform(2 * q, (q, 2 * q)),
            norm_out_gamma=mk(np.ones(lanes)), norm_out_beta=mk(np.zeros(lanes)),
            out_proj=uniform(lanes, (c_out, lanes)), out_bias=uniform(lanes, (c_out,)),
        )


def direction_outputs(chunk: Tensor, gate: Tensor, params: CloudSmbParams) -> dict[str, Tensor]:
    """Gated scan of each direction, re-aligned to natural position order."""
    if chunk.shape != gate.shape:
        raise ValueError(f"smm: chunk{chunk.shape} and gate{gate.shape} differ")
    xs = build_directions(chunk)
    gs = build_directions(gate)
    out = {"f": gated_ssm(xs.f, gs.f, params.ssm_f)}
    # the reversed family shares parameters: one scan over the stacked directions
    stacked = gated_ssm(concat([xs.sequence(o) for o in REVERSE_FAMILY], axis=0),
                        concat([gs.sequence(o) for o in REVERSE_FAMILY], axis=0),
                        params.ssm_r)
    for o, part in zip(REVERSE_FAMILY, split(stacked, 0, len(REVERSE_FAMILY))):
        out[o] = xs.restore(o, part)
    return out


def smm_forward(chunk: Tensor, gate: Tensor, params: CloudSmbParams) -> Tensor:
    """One SMM: four directional gated scans, summed, projected, plus residual."""
    dirs = direction_outputs(chunk, gate, params)
    total = add(add(dirs["f"], dirs["b"]), add(dirs["fb"], dirs["bf"]))
    agg = channel_linear(concat([total, gate], axis=-1), params.agg_proj)
    return add(agg, chunk)


def _plain_block(x: Tensor, params: CloudSmbParams) -> Tensor:
    F = layer_norm(x, params.norm_in_gamma, params.norm_in_beta)
    F = add(gated_ssm(F, F, params.ssm_f), F)
    F = layer_norm(F, params.norm_out_gamma, params.norm_out_beta)
    return channel_linear(F, params.out_proj, params.out_bias)


def cloud_smb(x: Tensor, params: CloudSmbParams) -> Tensor:
    """``[b, l, c_in] -> [b, l, c_out]``.

    Each chunk's residual output (c/4 lanes) is joined with its SiLU gate path
    (c/4 lanes); the concatenation over chunks is laid out as all residual
    lanes first, then all gate lanes, 2*c_in in total.
    """
    if params.plain:
        return _plain_block(x, params)
    bsz, _, c = x.shape
    if c % 4:
        raise ValueError(f"Cloud-SMB needs channels divisible by 4, got {c}")
    if c != params.c_in:
        raise ValueError(f"Cloud-SMB built for {params.c_in} channels, got {c}")
    F = layer_norm(x, params.norm_in_gamma, params.norm_in_beta)
    stacked = concat(split(F, 2, 4), axis=0)            # [4b, l, c/4], chunk-major
    out = smm_forward(stacked, stacked, params)
    lanes = split(out, 0, 4) + split(silu(stacked), 0, 4)
    F = concat(lanes, axis=2)
    F = layer_norm(F, params.norm_out_gamma, params.norm_out_beta)
    return channel_linear(F, params.out_proj, params.out_bias)
