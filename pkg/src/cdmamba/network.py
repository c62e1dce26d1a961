"""Six-stage U-shaped encoder/decoder with Cloud-SMB stages and DA-Block skips.

Encoder: stage 1 is a 3x3 convolution; stages 2-6 apply group norm, 2x2 max
pooling and GELU to the previous map, then a Cloud-SMB over the row-major
flattened sequence.  Every encoder map passes through a DA-Block skip.
Decoder: stage 6 takes the stage-6 skip; stages 5..2 take the running decoder
map plus their skip; each runs a Cloud-SMB, group norm, bilinear 2x upsampling
and GELU.  Stage 1 adds the stage-1 skip, then a 3x3 convolution and sigmoid.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from functools import cached_property

import numpy as np

from . import container
from .attention import (Affine, ChannelBridge, DaBlockParams, da_block,
                        init_pam_conv, light_skips, reduced_width)
from .smb import CloudSmbParams, cloud_smb
from .tensor import (DTYPES, Tensor, add, bilinear_upsample2, conv2d, gelu,
                     group_norm, maxpool2, mul, reshape, sigmoid, transpose)

N_STAGES = 6
LIGHT_STAGES = (1, 2, 3)
HEAVY_STAGES = (4, 5, 6)
DOWNSAMPLE = 2 ** (N_STAGES - 1)
GN_EPS = 1e-5


@dataclass(frozen=True)
class NetworkConfig:
    stage_widths: tuple[int, ...] = (8, 16, 24, 32, 48, 64)
    in_bands: int = 4
    ssm_state_dim: int = 8
    groups: int = 4
    use_da_block: bool = True
    use_cloud_smb: bool = True

    def __post_init__(self):
        object.__setattr__(self, "stage_widths", tuple(int(c) for c in self.stage_widths))
        self.validate()

    def validate(self) -> None:
        w = self.stage_widths
        if len(w) != N_STAGES:
            raise ValueError(f"need {N_STAGES} stage widths, got {len(w)}")
        if any(c <= 0 or c % 4 for c in w):
            raise ValueError(f"stage widths must be positive multiples of 4: {w}")
        if self.groups <= 0 or w[0] < self.groups or any(c % self.groups for c in w):
            raise ValueError(f"group count {self.groups} incompatible with widths {w}")
        if self.in_bands <= 0 or self.ssm_state_dim <= 0:
            raise ValueError("in_bands and ssm_state_dim must be positive")

    def width(self, stage: int) -> int:
        return self.stage_widths[stage - 1]


def _smb_prefix(part: str, stage: int) -> str:
    return f"{part}.stage{stage}.smb"


class NetworkParams:
    """Named parameter store plus structured views of it.

    ``tensors`` maps canonical names (``enc.stage3.smb.out_proj.weight``) to
    leaf tensors; every view below references those same objects, so gradients
    taken with respect to the store line up with the names.
    """

    def __init__(self, config: NetworkConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = dict(tensors)
        for name, t in self.tensors.items():
            t.name = name

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def __iter__(self):
        return iter(self.tensors)

    def __len__(self) -> int:
        return len(self.tensors)

    def get(self, name, default=None):
        return self.tensors.get(name, default)

    def items(self):
        return self.tensors.items()

    def count(self) -> int:
        return sum(t.size for t in self.tensors.values())

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def arrays(self) -> dict[str, np.ndarray]:
        return {k: t.data for k, t in self.tensors.items()}

    # structured views -----------------------------------------------------

    @cached_property
    def stem(self) -> Affine:
        return Affine.from_store(self.tensors, "enc.stage1.conv")

    @cached_property
    def head(self) -> Affine:
        return Affine.from_store(self.tensors, "dec.stage1.conv")

    @cached_property
    def enc_gn(self) -> dict[int, tuple[Tensor, Tensor]]:
        return {i: (self[f"enc.stage{i}.gn.gamma"], self[f"enc.stage{i}.gn.beta"])
                for i in range(2, N_STAGES + 1)}

    @cached_property
    def dec_gn(self) -> dict[int, tuple[Tensor, Tensor]]:
        return {i: (self[f"dec.stage{i}.gn.gamma"], self[f"dec.stage{i}.gn.beta"])
                for i in range(2, N_STAGES + 1)}

    @cached_property
    def enc_smb(self) -> dict[int, CloudSmbParams]:
        return {i: CloudSmbParams.from_store(self.tensors, _smb_prefix("enc", i))
                for i in range(2, N_STAGES + 1)}

    @cached_property
    def dec_smb(self) -> dict[int, CloudSmbParams]:
        return {i: CloudSmbParams.from_store(self.tensors, _smb_prefix("dec", i))
                for i in range(2, N_STAGES + 1)}

    @cached_property
    def skips(self) -> dict[int, DaBlockParams]:
        if not self.config.use_da_block:
            return {}
        shared = Affine.from_store(self.tensors, "skip.light.pam_conv")
        out = {i: DaBlockParams("light", pam_conv=shared) for i in LIGHT_STAGES}
        out.update({i: DaBlockParams.from_store(self.tensors, f"skip.stage{i}", "heavy")
                    for i in HEAVY_STAGES})
        return out

    @cached_property
    def bridge(self) -> ChannelBridge | None:
        if not self.config.use_da_block:
            return None
        return ChannelBridge.from_store(self.tensors, "skip.light",
                                        [self.config.width(i) for i in LIGHT_STAGES])

    # persistence ----------------------------------------------------------

    def meta(self) -> dict[str, np.ndarray]:
        c = self.config
        return {
            "meta.stage_widths": np.asarray(c.stage_widths, dtype=np.float64),
            "meta.in_bands": np.asarray([c.in_bands], dtype=np.float64),
            "meta.ssm_state_dim": np.asarray([c.ssm_state_dim], dtype=np.float64),
            "meta.groups": np.asarray([c.groups], dtype=np.float64),
            "meta.use_da_block": np.asarray([float(c.use_da_block)]),
            "meta.use_cloud_smb": np.asarray([float(c.use_cloud_smb)]),
        }

    def save(self, path, extra: dict[str, np.ndarray] | None = None) -> None:
        records = {**self.meta(), **self.arrays()}
        if extra:
            records.update(extra)
        container.save_store(path, records)

    @classmethod
    def load(cls, path) -> tuple["NetworkParams", dict[str, np.ndarray]]:
        """Return the parameters and any extra (non-parameter) records."""
        records = container.load_store(path)
        try:
            config = NetworkConfig(
                stage_widths=tuple(int(v) for v in records["meta.stage_widths"]),
                in_bands=int(records["meta.in_bands"][0]),
                ssm_state_dim=int(records["meta.ssm_state_dim"][0]),
                groups=int(records["meta.groups"][0]),
                use_da_block=bool(records["meta.use_da_block"][0]),
                use_cloud_smb=bool(records["meta.use_cloud_smb"][0]),
            )
        except KeyError as exc:
            raise container.ContainerError(f"weight store lacks {exc.args[0]}") from None
        expected = init_params(config, seed=0)
        tensors, extra = {}, {}
        for name, arr in records.items():
            if name.startswith("meta."):
                continue
            if name in expected:
                if arr.shape != expected[name].shape:
                    raise container.ContainerError(f"{name}: shape {arr.shape} != {expected[name].shape}")
                tensors[name] = Tensor(arr)
            else:
                extra[name] = arr
        missing = set(expected) - set(tensors)
        if missing:
            raise container.ContainerError(f"weight store missing {sorted(missing)[:3]}...")
        ordered = {name: tensors[name] for name in expected}
        return cls(config, ordered), extra

    def astype(self, dtype) -> "NetworkParams":
        return NetworkParams(self.config, {k: Tensor(t.data.astype(dtype)) for k, t in self.tensors.items()})


def init_params(config: NetworkConfig, seed: int, precision: str = "double") -> NetworkParams:
    """Uniform(+-sqrt(1/fan_in)) weights, unit/zero norm affines, S4D-style SSM init."""
    dtype = DTYPES[precision]
    rng = np.random.default_rng(seed)
    c = config.stage_widths
    n = config.ssm_state_dim
    plain = not config.use_cloud_smb
    t: dict[str, Tensor] = {}
    ones = lambda k: Tensor(np.ones(k, dtype=dtype))
    zeros = lambda k: Tensor(np.zeros(k, dtype=dtype))

    t.update(Affine.init((c[0], config.in_bands, 3, 3), config.in_bands * 9, rng, dtype=dtype).named("enc.stage1.conv"))
    for i in range(2, N_STAGES + 1):
        t[f"enc.stage{i}.gn.gamma"] = ones(c[i - 2])
        t[f"enc.stage{i}.gn.beta"] = zeros(c[i - 2])
        t.update(CloudSmbParams.init(c[i - 2], c[i - 1], n, rng, plain, dtype).named(_smb_prefix("enc", i)))
    if config.use_da_block:
        t.update(init_pam_conv(rng, dtype).named("skip.light.pam_conv"))
        t.update(ChannelBridge.init([c[i - 1] for i in LIGHT_STAGES], rng, dtype).named("skip.light"))
        for i in HEAVY_STAGES:
            t.update(DaBlockParams.init_heavy(c[i - 1], rng, dtype).named(f"skip.stage{i}"))
    for i in range(N_STAGES, 1, -1):
        t.update(CloudSmbParams.init(c[i - 1], c[i - 2], n, rng, plain, dtype).named(_smb_prefix("dec", i)))
        t[f"dec.stage{i}.gn.gamma"] = ones(c[i - 2])
        t[f"dec.stage{i}.gn.beta"] = zeros(c[i - 2])
    t.update(Affine.init((1, c[0], 3, 3), c[0] * 9, rng, dtype=dtype).named("dec.stage1.conv"))
    return NetworkParams(config, t)


def _ssm_count(width: int, n: int) -> int:
    return width * n + 2 * n * width + width * width + width


def _smb_count(c_in: int, c_out: int, n: int, plain: bool) -> int:
    if plain:
        return 2 * c_in + _ssm_count(c_in, n) + 2 * c_in + c_out * c_in + c_out
    q = c_in // 4
    return 2 * c_in + 2 * _ssm_count(q, n) + 2 * q * q + 4 * c_in + 2 * c_in * c_out + c_out


def param_count(config: NetworkConfig) -> int:
    """Closed-form scalar count of :func:`init_params` for ``config``."""
    c = config.stage_widths
    n = config.ssm_state_dim
    plain = not config.use_cloud_smb
    total = c[0] * config.in_bands * 9 + c[0] + c[0] * 9 + 1
    for i in range(2, N_STAGES + 1):
        total += 4 * c[i - 2]                                  # encoder + decoder group norms
        total += _smb_count(c[i - 2], c[i - 1], n, plain)
        total += _smb_count(c[i - 1], c[i - 2], n, plain)
    if config.use_da_block:
        total += 2 * 49 + 1                                    # shared light PAM conv
        light = sum(c[i - 1] for i in LIGHT_STAGES)
        total += 3 + 1 + light * light + light                 # bridge conv + fc
        for i in HEAVY_STAGES:
            w = c[i - 1]
            dk = reduced_width(w)
            total += 2 * (dk * w + dk) + 4 * (w * w + w)
    return total


def _to_sequence(fmap: Tensor) -> Tensor:
    b, c, h, w = fmap.shape
    return transpose(reshape(fmap, (b, c, h * w)), (0, 2, 1))


def _to_map(seq: Tensor, h: int, w: int) -> Tensor:
    b, _, c = seq.shape
    return reshape(transpose(seq, (0, 2, 1)), (b, c, h, w))


def _block_on_map(fmap: Tensor, params: CloudSmbParams) -> Tensor:
    _, _, h, w = fmap.shape
    return _to_map(cloud_smb(_to_sequence(fmap), params), h, w)


def forward(x: Tensor, params: NetworkParams, return_features: bool = False,
            drop_skip: int | None = None):
    """Cloud probability map ``[b, H, W]`` for a ``[b, bands, H, W]`` batch.

    ``drop_skip`` replaces one stage's skip feature with zeros (probe for dead
    paths).  With ``return_features`` a dict of per-stage maps is returned too.
    """
    config = params.config
    b, bands, H, W = x.shape
    if bands != config.in_bands:
        raise ValueError(f"input has {bands} bands, network expects {config.in_bands}")
    if H % DOWNSAMPLE or W % DOWNSAMPLE:
        raise ValueError(f"spatial extents {(H, W)} must be divisible by {DOWNSAMPLE}")
    if x.dtype != params.dtype:
        x = Tensor(x.data.astype(params.dtype))
    g = config.groups

    enc = [conv2d(x, params.stem.weight, params.stem.bias, pad=1)]
    for i in range(2, N_STAGES + 1):
        gamma, beta = params.enc_gn[i]
        fmap = gelu(maxpool2(group_norm(enc[-1], g, gamma, beta, GN_EPS)))
        enc.append(_block_on_map(fmap, params.enc_smb[i]))

    if config.use_da_block:
        skips = light_skips(enc[:3], [params.skips[i] for i in LIGHT_STAGES], params.bridge)
        skips += [da_block(enc[i - 1], params.skips[i]) for i in HEAVY_STAGES]
    else:
        skips = list(enc)
    if drop_skip is not None:
        skips[drop_skip - 1] = mul(skips[drop_skip - 1], 0.0)

    dec = []
    d = skips[-1]
    for i in range(N_STAGES, 1, -1):
        if i < N_STAGES:
            d = add(d, skips[i - 1])
        gamma, beta = params.dec_gn[i]
        d = _block_on_map(d, params.dec_smb[i])
        d = gelu(bilinear_upsample2(group_norm(d, g, gamma, beta, GN_EPS)))
        dec.append(d)
    logits = conv2d(add(d, skips[0]), params.head.weight, params.head.bias, pad=1)
    y = reshape(sigmoid(logits), (b, H, W))
    if return_features:
        return y, {"enc": enc, "skip": skips, "dec": dec}
    return y


def config_dict(config: NetworkConfig) -> dict:
    return asdict(config)
