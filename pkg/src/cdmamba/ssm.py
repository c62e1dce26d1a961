"""Zero-order-hold discretisation and the selective state-space scan.

Shapes follow the ``[batch, length, channels]`` sequence layout.  The state
matrix is diagonal: ``A[c, n]`` holds one continuous-time rate per channel and
state slot, so the matrix exponential reduces to elementwise ``exp``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, channel_linear, mul, record_op, silu, softplus

TAU = 1e-4  # below |delta*a| < TAU the input gain uses its Taylor series

DELTA_MIN, DELTA_MAX = 1e-3, 1e-1


def zoh_b(a, b, delta, branch: str = "auto"):
    """Discrete input gain ``(exp(delta*a) - 1) / a * b``.

    ``branch`` forces ``"closed"`` or ``"series"`` evaluation; ``"auto"``
    switches to the series ``delta*b*(1 + z/2 + z**2/6)`` when ``|z| < TAU``.
    """
    a = np.asarray(a, dtype=np.float64)
    z = delta * a
    series = delta * b * (1.0 + z / 2.0 + z * z / 6.0)
    if branch == "series":
        return series
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = np.expm1(z) / a * b
    if branch == "closed":
        return closed
    if branch != "auto":
        raise ValueError(f"unknown branch {branch!r}")
    return np.where(np.abs(z) < TAU, series, closed)


def discretize_zoh(a, b, delta):
    """Return ``(a_bar, b_bar)`` for a diagonal/scalar system held over ``delta``."""
    if np.any(np.asarray(delta) <= 0):
        raise ValueError("delta must be positive")
    a_bar = np.exp(np.asarray(delta) * np.asarray(a, dtype=np.float64))
    b_bar = zoh_b(a, b, delta)
    if np.ndim(a_bar) == 0:
        return float(a_bar), float(b_bar)
    return a_bar, b_bar


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with its series near zero."""
    small = np.abs(z) < TAU
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = np.expm1(z) / z
    return np.where(small, 1.0 + z / 2.0 + z * z / 6.0, closed)


def _dphi(z: np.ndarray, ez: np.ndarray) -> np.ndarray:
    small = np.abs(z) < TAU
    with np.errstate(divide="ignore", invalid="ignore"):
        closed = (z * ez - np.expm1(z)) / (z * z)
    return np.where(small, 0.5 + z / 3.0 + z * z / 8.0, closed)


def _scan_numpy(x, dt, A, B, C):
    """Vectorised-over-slices scan; returns (y, ctx) with ctx reused by the adjoint."""
    length = x.shape[1]
    # time-major copies keep each step's slice contiguous
    xt = np.ascontiguousarray(x.transpose(1, 0, 2))
    dtt = np.ascontiguousarray(dt.transpose(1, 0, 2))
    Bt = np.ascontiguousarray(B.transpose(1, 0, 2))
    Ct = np.ascontiguousarray(C.transpose(1, 0, 2))
    z = dtt[..., None] * A                      # [l, b, c, n]
    dA = np.exp(z)
    psi = dtt[..., None] * _phi(z)              # (exp(z) - 1) / A
    u = psi * Bt[:, :, None, :] * xt[..., None]
    hs = np.empty_like(u)
    hs[0] = u[0]
    for i in range(1, length):
        np.multiply(dA[i], hs[i - 1], out=hs[i])
        hs[i] += u[i]
    y = np.einsum("lbcn,lbn->lbc", hs, Ct).transpose(1, 0, 2)
    return np.ascontiguousarray(y), (xt, dtt, Bt, Ct, z, dA, psi, hs)


def _scan_numpy_vjp(g, A, ctx):
    xt, dtt, Bt, Ct, z, dA, psi, hs = ctx
    length = xt.shape[0]
    gt = np.ascontiguousarray(g.transpose(1, 0, 2))
    q = gt[..., None] * Ct[:, :, None, :]
    lam = np.empty_like(q)
    lam[-1] = q[-1]
    for i in range(length - 2, -1, -1):
        np.multiply(dA[i + 1], lam[i + 1], out=lam[i])
        lam[i] += q[i]
    gC = np.einsum("lbc,lbcn->lbn", gt, hs)
    h_prev = np.empty_like(hs)
    h_prev[0] = 0.0
    h_prev[1:] = hs[:-1]
    g_z = lam * h_prev * dA
    lam_psi = lam * psi
    gx = np.einsum("lbcn,lbn->lbc", lam_psi, Bt)
    gB = np.einsum("lbcn,lbc->lbn", lam_psi, xt)
    g_psi = lam * Bt[:, :, None, :] * xt[..., None]
    gdelta = (g_z * A).sum(-1) + (g_psi * dA).sum(-1)
    gA = (g_z * dtt[..., None]).sum((0, 1)) + \
        (g_psi * (dtt * dtt)[..., None] * _dphi(z, dA)).sum((0, 1))
    back = lambda arr: np.ascontiguousarray(arr.transpose(1, 0, 2))
    return back(gx), back(gdelta), gA, back(gB), back(gC)


try:
    import numba
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None

if numba is not None:
    @numba.njit(cache=True, fastmath=False)
    def _scan_fwd_kernel(x, dt, A, B, C, y, hs, em1_out):
        bsz, length, ch = x.shape
        n = A.shape[1]
        for b in range(bsz):
            for i in range(length):
                for c in range(ch):
                    d = dt[b, i, c]
                    xv = x[b, i, c]
                    acc = 0.0
                    for k in range(n):
                        z = d * A[c, k]
                        em1 = np.expm1(z)
                        ez = em1 + 1.0
                        ph = 1.0 + z / 2.0 + z * z / 6.0 if abs(z) < TAU else em1 / z
                        h = d * ph * B[b, i, k] * xv
                        if i > 0:
                            h += ez * hs[b, i - 1, c, k]
                        hs[b, i, c, k] = h
                        em1_out[b, i, c, k] = em1
                        acc += C[b, i, k] * h
                    y[b, i, c] = acc

    @numba.njit(cache=True, fastmath=False)
    def _scan_bwd_kernel(g, x, dt, A, B, C, hs, em1_in, gx, gdt, gA, gB, gC):
        bsz, length, ch = x.shape
        n = A.shape[1]
        carry = np.zeros((ch, n))
        for b in range(bsz):
            carry[:, :] = 0.0
            for i in range(length - 1, -1, -1):
                for c in range(ch):
                    d = dt[b, i, c]
                    xv = x[b, i, c]
                    gy = g[b, i, c]
                    acc_x = 0.0
                    acc_dt = 0.0
                    for k in range(n):
                        a = A[c, k]
                        z = d * a
                        em1 = em1_in[b, i, c, k]
                        ez = em1 + 1.0
                        small = abs(z) < TAU
                        ph = 1.0 + z / 2.0 + z * z / 6.0 if small else em1 / z
                        psi = d * ph
                        lam = gy * C[b, i, k] + carry[c, k]
                        gC[b, i, k] += gy * hs[b, i, c, k]
                        h_prev = hs[b, i - 1, c, k] if i > 0 else 0.0
                        g_z = lam * h_prev * ez
                        bk = B[b, i, k]
                        acc_x += lam * psi * bk
                        gB[b, i, k] += lam * psi * xv
                        g_psi = lam * bk * xv
                        acc_dt += g_z * a + g_psi * ez
                        # phi'(z) = (exp(z) - phi(z)) / z, series near zero
                        if small:
                            dph = 0.5 + z / 3.0 + z * z / 8.0
                        else:
                            dph = (ez - ph) / z
                        gA[c, k] += g_z * d + g_psi * d * d * dph
                        carry[c, k] = ez * lam
                    gx[b, i, c] = acc_x
                    gdt[b, i, c] = acc_dt


def _scan_fused(x, dt, A, B, C):
    y = np.empty_like(x)
    shape = x.shape + (A.shape[1],)
    hs, em1 = np.empty(shape, dtype=x.dtype), np.empty(shape, dtype=x.dtype)
    _scan_fwd_kernel(x, dt, A, B, C, y, hs, em1)
    return y, (hs, em1)


def _scan_fused_vjp(g, x, dt, A, B, C, saved):
    gx, gdt = np.empty_like(x), np.empty_like(x)
    gA = np.zeros_like(A)
    gB, gC = np.zeros_like(B), np.zeros_like(C)
    _scan_bwd_kernel(np.ascontiguousarray(g), x, dt, A, B, C, *saved, gx, gdt, gA, gB, gC)
    return gx, gdt, gA, gB, gC


KERNELS = ("fused", "numpy") if numba is not None else ("numpy",)


def selective_scan(x: Tensor, delta: Tensor, A: Tensor, B: Tensor, C: Tensor,
                   kernel: str | None = None) -> Tensor:
    """Sequential scan ``h_i = exp(d_i A) h_{i-1} + zoh_b(A, B_i, d_i) x_i``, ``y_i = C_i . h_i``.

    x, delta: [b, l, c]; A: [c, n]; B, C: [b, l, n].  ``h_0 = 0``.
    The adjoint runs the transposed recurrence backwards in time.  ``kernel``
    picks the compiled loop (``"fused"``, default when numba is present) or the
    numpy implementation vectorised over independent slices.
    """
    bsz, length, ch = x.shape
    n = A.shape[1]
    if delta.shape != x.shape or A.shape[0] != ch or B.shape != (bsz, length, n) or C.shape != B.shape:
        raise ValueError(f"selective_scan: inconsistent shapes x{x.shape} delta{delta.shape} "
                         f"A{A.shape} B{B.shape} C{C.shape}")
    kernel = kernel or KERNELS[0]
    if kernel not in KERNELS:
        raise ValueError(f"unknown scan kernel {kernel!r}; available {KERNELS}")
    args = [np.ascontiguousarray(t.data) for t in (x, delta, A, B, C)]
    if kernel == "fused":
        out, saved = _scan_fused(*args)
        vjp = lambda g: _scan_fused_vjp(g, *args, saved)
    else:
        out, ctx = _scan_numpy(*args)
        vjp = lambda g: _scan_numpy_vjp(g, args[2], ctx)
    return record_op("selective_scan", out, (x, delta, A, B, C), vjp)


def scan_reference(x, delta, A, B, C) -> np.ndarray:
    """Direct kernel-sum evaluation of the scan, O(l^2); numpy in, numpy out.

    ``y_t = sum_{j<=t} C_t . (prod_{m=j+1..t} a_bar_m) * b_bar_j * x_j`` with
    each transition product formed by explicit multiplication.
    """
    x, delta, A, B, C = (np.asarray(getattr(v, "data", v), dtype=np.float64) for v in (x, delta, A, B, C))
    bsz, length, ch = x.shape
    a_bar, b_bar = discretize_zoh(A[None, None], B[:, :, None, :], delta[..., None])
    drive = b_bar * x[..., None]                # [b, l, c, n]
    y = np.empty_like(x)
    for t in range(length):
        weights = np.ones((bsz, t + 1, ch, A.shape[1]))
        if t:
            seg = a_bar[:, 1:t + 1][:, ::-1]
            weights[:, :t] = np.cumprod(seg, axis=1)[:, ::-1]
        state = (weights * drive[:, :t + 1]).sum(axis=1)
        y[:, t] = np.einsum("bcn,bn->bc", state, C[:, t])
    return y


@dataclass(eq=False)
class SsmParams:
    """Selective SSM parameters for feature width ``c`` and state size ``n``."""

    A: Tensor          # [c, n], negative rates
    B_proj: Tensor     # [n, c]
    C_proj: Tensor     # [n, c]
    dt_proj: Tensor    # [c, c]
    dt_bias: Tensor    # [c]

    @property
    def width(self) -> int:
        return self.A.shape[0]

    @property
    def state_dim(self) -> int:
        return self.A.shape[1]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {
            f"{prefix}.A": self.A,
            f"{prefix}.B_proj.weight": self.B_proj,
            f"{prefix}.C_proj.weight": self.C_proj,
            f"{prefix}.dt_proj.weight": self.dt_proj,
            f"{prefix}.dt_proj.bias": self.dt_bias,
        }

    @classmethod
    def from_store(cls, store, prefix: str) -> "SsmParams":
        return cls(store[f"{prefix}.A"], store[f"{prefix}.B_proj.weight"],
                   store[f"{prefix}.C_proj.weight"], store[f"{prefix}.dt_proj.weight"],
                   store[f"{prefix}.dt_proj.bias"])

    @classmethod
    def init(cls, width: int, state_dim: int, rng: np.random.Generator, dtype=np.float64) -> "SsmParams":
        bound = np.sqrt(1.0 / width)
        A = -np.tile(np.arange(1, state_dim + 1, dtype=np.float64), (width, 1))
        target = np.exp(rng.uniform(np.log(DELTA_MIN), np.log(DELTA_MAX), size=width))
        dt_bias = target + np.log(-np.expm1(-target))   # inverse softplus
        mk = lambda a: Tensor(np.asarray(a, dtype=dtype))
        return cls(
            A=mk(A),
            B_proj=mk(rng.uniform(-bound, bound, (state_dim, width))),
            C_proj=mk(rng.uniform(-bound, bound, (state_dim, width))),
            dt_proj=mk(rng.uniform(-bound, bound, (width, width))),
            dt_bias=mk(dt_bias),
        )


def _project(x: Tensor, params: SsmParams):
    if x.shape[-1] != params.width:
        raise ValueError(f"ssm: input width {x.shape[-1]} != parameter width {params.width}")
    delta = softplus(channel_linear(x, params.dt_proj, params.dt_bias))
    return delta, channel_linear(x, params.B_proj), channel_linear(x, params.C_proj)


def ssm_scan(x: Tensor, params: SsmParams) -> Tensor:
    """Selective SSM: step size, B and C are projections of the input at each position."""
    delta, B, C = _project(x, params)
    return selective_scan(x, delta, params.A, B, C)


def ssm_unrolled_oracle(x, params: SsmParams) -> np.ndarray:
    """Independent O(l^2) evaluation of :func:`ssm_scan` for verification."""
    xd = np.asarray(getattr(x, "data", x), dtype=np.float64)
    delta = np.logaddexp(0.0, xd @ params.dt_proj.data.T + params.dt_bias.data)
    B = xd @ params.B_proj.data.T
    C = xd @ params.C_proj.data.T
    return scan_reference(xd, delta, params.A.data, B, C)


def gated_ssm(x: Tensor, gate: Tensor, params: SsmParams) -> Tensor:
    if x.shape != gate.shape:
        raise ValueError(f"gated_ssm: x{x.shape} and gate{gate.shape} differ")
    return mul(ssm_scan(x, params), silu(gate))
