"""Temporal-adapter transformer block.

One block maps (B, H, W, C) -> (B, H, W, C):

    x_out = x + DropPath(adapter(MHA(LN(x))))     spatial attention per frame
    y     = x_out + MLP(LN(x_out))                residual MLP

where the adapter is a bottleneck with a depth-axis 3D convolution:

    adapter(t) = t + W_up(act(Conv3D(W_down * LN(t))))

The convolution mixes only the B (volumetric/temporal) axis by default
(kernel kd x 1 x 1); spatial mixing is the attention's job.  The backward
pass is written by hand through every kernel and is verified against
central finite differences by ``grad_check``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .kernels import (
    ACTIVATIONS,
    AttentionParams,
    ShapeError,
    attention_params,
    conv3d,
    conv3d_vjp,
    layer_norm,
    layer_norm_vjp,
    linear_vjp,
    multi_head_attention,
    multi_head_attention_vjp,
)


@dataclass
class AdapterParams:
    """Bottleneck weights: LN affine, down-projection (C, r), temporal conv
    kernel (kd, kh, kw, r, r) with odd extents, up-projection (r, C)."""

    ln_gamma: np.ndarray
    ln_beta: np.ndarray
    w_down: np.ndarray
    conv_kernel: np.ndarray
    w_up: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        c, r = self.w_down.shape
        if r >= c:
            raise ValueError(f"bottleneck r={r} must be smaller than channels C={c}")
        if self.w_up.shape != (r, c):
            raise ShapeError(
                f"w_up shape {tuple(self.w_up.shape)} != ({r}, {c})"
            )
        if self.ln_gamma.shape != (c,) or self.ln_beta.shape != (c,):
            raise ShapeError("adapter LN affine must have length C")
        k = self.conv_kernel
        if k.ndim != 5 or k.shape[3:] != (r, r):
            raise ShapeError(
                f"conv_kernel shape {tuple(k.shape)} incompatible with bottleneck {r}"
            )
        if any(e % 2 == 0 for e in k.shape[:3]):
            raise ShapeError(f"conv kernel extents must be odd, got {k.shape[:3]}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def channels(self) -> int:
        return self.w_down.shape[0]

    @property
    def bottleneck(self) -> int:
        return self.w_down.shape[1]


@dataclass
class MlpParams:
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    activation: str = "gelu"

    def __post_init__(self):
        c, hidden = self.w1.shape
        if self.w2.shape != (hidden, c):
            raise ShapeError(
                f"mlp w2 shape {tuple(self.w2.shape)} != ({hidden}, {c})"
            )
        if self.b1.shape != (hidden,) or self.b2.shape != (c,):
            raise ShapeError("mlp bias shapes inconsistent")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")


@dataclass
class BlockParams:
    """All weights of one block; channel count must be consistent across the
    two LN affines, the attention, the adapter, and the MLP."""

    ln1_gamma: np.ndarray
    ln1_beta: np.ndarray
    attn: AttentionParams
    adapter: AdapterParams
    ln2_gamma: np.ndarray
    ln2_beta: np.ndarray
    mlp: MlpParams
    drop_path_rate: float = 0.0

    def __post_init__(self):
        c = self.attn.model_dim
        if self.adapter.channels != c or self.mlp.w1.shape[0] != c:
            raise ShapeError(
                f"channel mismatch: attn {c}, adapter {self.adapter.channels},"
                f" mlp {self.mlp.w1.shape[0]}"
            )
        for name in ("ln1_gamma", "ln1_beta", "ln2_gamma", "ln2_beta"):
            if getattr(self, name).shape != (c,):
                raise ShapeError(f"{name} must have length {c}")
        if not 0.0 <= self.drop_path_rate < 1.0:
            raise ValueError(
                f"drop_path_rate must be in [0, 1), got {self.drop_path_rate}"
            )

    @property
    def channels(self) -> int:
        return self.attn.model_dim


def adapter_params(
    rng: np.random.Generator,
    channels: int,
    bottleneck: int | None = None,
    kd: int = 3,
    activation: str = "gelu",
    scale: float = 0.5,
) -> AdapterParams:
    """Seeded-random adapter weights; bottleneck defaults to C // 4."""
    r = max(1, channels // 4) if bottleneck is None else bottleneck
    return AdapterParams(
        ln_gamma=np.ones(channels),
        ln_beta=np.zeros(channels),
        w_down=rng.normal(0.0, scale / np.sqrt(channels), (channels, r)),
        conv_kernel=rng.normal(0.0, scale / np.sqrt(r * kd), (kd, 1, 1, r, r)),
        w_up=rng.normal(0.0, scale / np.sqrt(r), (r, channels)),
        activation=activation,
    )


def mlp_params(
    rng: np.random.Generator,
    channels: int,
    hidden: int | None = None,
    activation: str = "gelu",
    scale: float = 0.5,
) -> MlpParams:
    """Seeded-random MLP weights; hidden defaults to 4C."""
    hidden = 4 * channels if hidden is None else hidden
    return MlpParams(
        w1=rng.normal(0.0, scale / np.sqrt(channels), (channels, hidden)),
        b1=np.zeros(hidden),
        w2=rng.normal(0.0, scale / np.sqrt(hidden), (hidden, channels)),
        b2=np.zeros(channels),
        activation=activation,
    )


def block_params(
    rng: np.random.Generator,
    channels: int,
    bottleneck: int | None = None,
    num_heads: int = 2,
    kd: int = 3,
    mlp_hidden: int | None = None,
    drop_path_rate: float = 0.0,
    activation: str = "gelu",
    scale: float = 0.5,
) -> BlockParams:
    """Seeded-random block weights for tests and the pipeline encoder."""
    return BlockParams(
        ln1_gamma=np.ones(channels),
        ln1_beta=np.zeros(channels),
        attn=attention_params(rng, channels, num_heads, scale / np.sqrt(channels)),
        adapter=adapter_params(rng, channels, bottleneck, kd, activation, scale),
        ln2_gamma=np.ones(channels),
        ln2_beta=np.zeros(channels),
        mlp=mlp_params(rng, channels, mlp_hidden, activation, scale),
        drop_path_rate=drop_path_rate,
    )


# ---------------------------------------------------------------------------
# forward


def _check_input(x: np.ndarray, channels: int) -> None:
    if x.ndim != 4 or x.shape[-1] != channels:
        raise ShapeError(
            f"expected input (B, H, W, C={channels}), got {tuple(x.shape)}"
        )


def adapter_forward(x_attn, p: AdapterParams) -> np.ndarray:
    """Bottleneck branch with residual: x + W_up(act(Conv3D(W_down LN(x))))."""
    x_attn = np.asarray(x_attn, dtype=np.float64)
    _check_input(x_attn, p.channels)
    act, _ = ACTIVATIONS[p.activation]
    h = layer_norm(x_attn, p.ln_gamma, p.ln_beta)
    down = h @ p.w_down
    conv = conv3d(down, p.conv_kernel)
    return x_attn + act(conv) @ p.w_up


def _frame_attention(h: np.ndarray, attn: AttentionParams) -> np.ndarray:
    # spatial attention over the H*W token grid, independently per frame b
    b, hh, ww, c = h.shape
    tokens = h.reshape(b, hh * ww, c)
    out = multi_head_attention(tokens, tokens, tokens, attn)
    return out.reshape(b, hh, ww, c)


def block_forward(
    x, p: BlockParams, mode: str = "eval", rng_seed: int | None = None
) -> np.ndarray:
    """Run one block.  In "train" mode DropPath zeroes the adapter branch
    with probability drop_path_rate and rescales survivors by 1/(1-rate),
    driven by the explicit rng_seed; "eval" mode is deterministic."""
    x = np.asarray(x, dtype=np.float64)
    _check_input(x, p.channels)
    if mode not in ("eval", "train"):
        raise ValueError(f"mode must be 'eval' or 'train', got {mode!r}")
    if mode == "train" and rng_seed is None:
        raise ValueError("train mode requires an explicit rng_seed")

    branch = adapter_forward(
        _frame_attention(layer_norm(x, p.ln1_gamma, p.ln1_beta), p.attn), p.adapter
    )
    if mode == "train" and p.drop_path_rate > 0.0:
        u = np.random.default_rng(rng_seed).uniform()
        if u < p.drop_path_rate:
            branch = np.zeros_like(branch)
        else:
            branch = branch / (1.0 - p.drop_path_rate)
    x_out = x + branch

    act, _ = ACTIVATIONS[p.mlp.activation]
    h2 = layer_norm(x_out, p.ln2_gamma, p.ln2_beta)
    return x_out + act(h2 @ p.mlp.w1 + p.mlp.b1) @ p.mlp.w2 + p.mlp.b2


# ---------------------------------------------------------------------------
# backward


def block_param_arrays(p: BlockParams) -> dict[str, np.ndarray]:
    """Name -> array views of every learnable tensor in the block."""
    return {
        "ln1.gamma": p.ln1_gamma,
        "ln1.beta": p.ln1_beta,
        "attn.w_q": p.attn.w_q,
        "attn.w_k": p.attn.w_k,
        "attn.w_v": p.attn.w_v,
        "attn.w_o": p.attn.w_o,
        "adapter.ln.gamma": p.adapter.ln_gamma,
        "adapter.ln.beta": p.adapter.ln_beta,
        "adapter.w_down": p.adapter.w_down,
        "adapter.conv_kernel": p.adapter.conv_kernel,
        "adapter.w_up": p.adapter.w_up,
        "ln2.gamma": p.ln2_gamma,
        "ln2.beta": p.ln2_beta,
        "mlp.w1": p.mlp.w1,
        "mlp.b1": p.mlp.b1,
        "mlp.w2": p.mlp.w2,
        "mlp.b2": p.mlp.b2,
    }


def block_backward(x, p: BlockParams, upstream_grad) -> dict[str, np.ndarray]:
    """Analytic gradients of the eval-mode block w.r.t. the input ("x") and
    every parameter (keys of block_param_arrays), by chain rule."""
    x = np.asarray(x, dtype=np.float64)
    g = np.asarray(upstream_grad, dtype=np.float64)
    _check_input(x, p.channels)
    if g.shape != x.shape:
        raise ShapeError(
            f"upstream gradient shape {tuple(g.shape)} != input {tuple(x.shape)}"
        )
    b, hh, ww, c = x.shape
    act_a, act_a_grad = ACTIVATIONS[p.adapter.activation]
    act_m, act_m_grad = ACTIVATIONS[p.mlp.activation]

    # forward, caching every intermediate the chain rule needs
    h1 = layer_norm(x, p.ln1_gamma, p.ln1_beta)
    tokens = h1.reshape(b, hh * ww, c)
    x_attn = multi_head_attention(tokens, tokens, tokens, p.attn).reshape(x.shape)
    ha = layer_norm(x_attn, p.adapter.ln_gamma, p.adapter.ln_beta)
    down = ha @ p.adapter.w_down
    conv = conv3d(down, p.adapter.conv_kernel)
    s = act_a(conv)
    x_out = x + x_attn + s @ p.adapter.w_up
    h2 = layer_norm(x_out, p.ln2_gamma, p.ln2_beta)
    m1 = h2 @ p.mlp.w1 + p.mlp.b1
    z = act_m(m1)

    # MLP branch
    dz, dw2, db2 = linear_vjp(g, z, p.mlp.w2)
    dm1 = dz * act_m_grad(m1)
    dh2, dw1, db1 = linear_vjp(dm1, h2, p.mlp.w1)
    dx_out_ln, dg2, db2_ln = layer_norm_vjp(dh2, x_out, p.ln2_gamma, p.ln2_beta)
    dx_out = g + dx_out_ln

    # adapter branch (DropPath is identity in eval mode)
    ds, dw_up, _ = linear_vjp(dx_out, s, p.adapter.w_up)
    dconv = ds * act_a_grad(conv)
    ddown, dkernel = conv3d_vjp(dconv, down, p.adapter.conv_kernel)
    dha, dw_down, _ = linear_vjp(ddown, ha, p.adapter.w_down)
    dx_attn_ln, dga, dba = layer_norm_vjp(
        dha, x_attn, p.adapter.ln_gamma, p.adapter.ln_beta
    )
    dx_attn = dx_out + dx_attn_ln

    # spatial attention (self-attention: query, key and value grads sum)
    dq, dk, dv, dwq, dwk, dwv, dwo = multi_head_attention_vjp(
        dx_attn.reshape(b, hh * ww, c), tokens, tokens, tokens, p.attn
    )
    dh1 = (dq + dk + dv).reshape(x.shape)
    dx_ln, dg1, db1_ln = layer_norm_vjp(dh1, x, p.ln1_gamma, p.ln1_beta)

    return {
        "x": dx_out + dx_ln,
        "ln1.gamma": dg1,
        "ln1.beta": db1_ln,
        "attn.w_q": dwq,
        "attn.w_k": dwk,
        "attn.w_v": dwv,
        "attn.w_o": dwo,
        "adapter.ln.gamma": dga,
        "adapter.ln.beta": dba,
        "adapter.w_down": dw_down,
        "adapter.conv_kernel": dkernel,
        "adapter.w_up": dw_up,
        "ln2.gamma": dg2,
        "ln2.beta": db2_ln,
        "mlp.w1": dw1,
        "mlp.b1": db1,
        "mlp.w2": dw2,
        "mlp.b2": db2,
    }


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckRow:
    name: str
    max_rel_err: float
    passed: bool


@dataclass
class GradCheckReport:
    passed: bool
    max_rel_err: float
    rows: list[GradCheckRow]

    def failing(self) -> list[str]:
        return [r.name for r in self.rows if not r.passed]


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.maximum(1e-8, np.abs(a) + np.abs(b))
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def _softmax_ld(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _layer_norm_ld(x, gamma, beta, eps) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    return xc / np.sqrt(var + eps) * gamma + beta


def _act_ld(name: str, x: np.ndarray) -> np.ndarray:
    if name == "gelu":
        c = np.longdouble(math.sqrt(2.0 / math.pi))
        return 0.5 * x * (1.0 + np.tanh(c * (x + np.longdouble(0.044715) * x**3)))
    return 1.0 / (1.0 + np.exp(-x))


def _forward_reference(x, p: BlockParams) -> np.ndarray:
    """Independent straight-line eval-mode forward in extended precision.

    Serves as the finite-difference reference: the float64 production path
    leaves ~1e-9 of rounding noise in a (f(x+h)-f(x-h))/2h quotient at
    h=1e-6, which swamps the 1e-5 relative tolerance on components whose
    true gradient is below ~1e-4.  Running the reference in longdouble
    pushes that noise floor three orders of magnitude down.
    """
    L = np.longdouble
    x = np.asarray(x, dtype=L)
    b, hh, ww, c = x.shape
    attn = p.attn
    nh, hd = attn.num_heads, attn.head_dim

    h1 = _layer_norm_ld(x, p.ln1_gamma.astype(L), p.ln1_beta.astype(L), 1e-6)
    tokens = h1.reshape(b, hh * ww, c)
    q = tokens @ attn.w_q.astype(L)
    k = tokens @ attn.w_k.astype(L)
    v = tokens @ attn.w_v.astype(L)
    qh = q.reshape(b, -1, nh, hd).transpose(0, 2, 1, 3)
    kh = k.reshape(b, -1, nh, hd).transpose(0, 2, 1, 3)
    vh = v.reshape(b, -1, nh, hd).transpose(0, 2, 1, 3)
    a = _softmax_ld(qh @ kh.transpose(0, 1, 3, 2) / np.longdouble(math.sqrt(hd)))
    merged = (a @ vh).transpose(0, 2, 1, 3).reshape(b, hh * ww, c)
    x_attn = (merged @ attn.w_o.astype(L)).reshape(x.shape)

    ad = p.adapter
    ha = _layer_norm_ld(x_attn, ad.ln_gamma.astype(L), ad.ln_beta.astype(L), 1e-6)
    down = ha @ ad.w_down.astype(L)
    kd, kh_, kw_ = ad.conv_kernel.shape[:3]
    pd, ph, pw = (kd - 1) // 2, (kh_ - 1) // 2, (kw_ - 1) // 2
    padded = np.pad(down, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    conv = np.zeros(down.shape[:3] + (ad.conv_kernel.shape[4],), dtype=L)
    for i in range(kd):
        for j in range(kh_):
            for l in range(kw_):
                conv += (
                    padded[i : i + b, j : j + hh, l : l + ww, :]
                    @ ad.conv_kernel[i, j, l].astype(L)
                )
    x_out = x + x_attn + _act_ld(ad.activation, conv) @ ad.w_up.astype(L)

    h2 = _layer_norm_ld(x_out, p.ln2_gamma.astype(L), p.ln2_beta.astype(L), 1e-6)
    m1 = h2 @ p.mlp.w1.astype(L) + p.mlp.b1.astype(L)
    return x_out + _act_ld(p.mlp.activation, m1) @ p.mlp.w2.astype(L) + p.mlp.b2.astype(L)


def _fd_grad(forward, arr: np.ndarray, g: np.ndarray, h: float) -> np.ndarray:
    """Central-difference gradient of sum(forward() * g) w.r.t. arr.

    The output difference is taken elementwise before reduction, and the
    quotient uses the actually realized parameter step, so the estimate is
    limited by the reference precision rather than by cancellation.
    """
    if not arr.flags["C_CONTIGUOUS"]:
        # ravel() of a non-contiguous array copies, losing the perturbation
        raise ValueError("grad_check requires C-contiguous parameter arrays")
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    gl = np.asarray(g, dtype=np.longdouble)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        theta_p = flat[i]
        yp = forward()
        flat[i] = orig - h
        theta_m = flat[i]
        ym = forward()
        flat[i] = orig
        step = np.longdouble(theta_p) - np.longdouble(theta_m)
        gflat[i] = float(((yp - ym) * gl).sum() / step)
    return grad


def grad_check(
    p: BlockParams,
    x,
    h: float = 1e-6,
    tol: float = 1e-5,
    mutate: str | None = None,
) -> GradCheckReport:
    """Compare block_backward against central finite differences of the
    summed eval-mode output, elementwise, for the input and every parameter.

    ``mutate`` names a gradient to scale by 1.1 before comparison, as a
    sentinel that the check actually detects wrong gradients.
    """
    if h <= 0 or tol <= 0:
        raise ValueError("h and tol must be positive")
    x = np.array(x, dtype=np.float64)
    g = np.ones_like(x)
    analytic = block_backward(x, p, g)
    if mutate is not None:
        if mutate not in analytic:
            raise ValueError(f"unknown gradient name {mutate!r}")
        analytic[mutate] = analytic[mutate] * 1.1

    targets: dict[str, np.ndarray] = {"x": x}
    targets.update(block_param_arrays(p))

    def forward():
        return _forward_reference(x, p)

    rows = []
    for name, arr in targets.items():
        fd = _fd_grad(forward, arr, g, h)
        err = _rel_err(analytic[name], fd)
        rows.append(GradCheckRow(name=name, max_rel_err=err, passed=err <= tol))
    worst = max(r.max_rel_err for r in rows)
    return GradCheckReport(passed=all(r.passed for r in rows), max_rel_err=worst, rows=rows)
