"""Dense float64 numeric kernels: normalization, projections, 3D convolution,
attention, activations, cosine similarity, and a finite-difference harness.

All tensors are C-contiguous ``numpy.float64`` arrays with explicit shapes.
Every exported operation is a pure function and is deterministic: identical
inputs produce bit-identical outputs.  Each differentiable kernel has a
companion ``*_vjp`` (vector-Jacobian product) used by the hand-written
block backward pass.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """Raised when tensor shapes do not conform to an operation's contract."""


def _arr(x, name: str) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(a)):
        raise ValueError(f"{name} contains non-finite values")
    return a


@dataclass(frozen=True)
class AttentionParams:
    """Weights of one multi-head attention: four square model_dim projections
    split evenly across ``num_heads``."""

    num_heads: int
    w_q: np.ndarray
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray

    def __post_init__(self):
        if self.num_heads < 1:
            raise ValueError(f"num_heads must be positive, got {self.num_heads}")
        d = self.w_q.shape[0] if self.w_q.ndim == 2 else -1
        for name in ("w_q", "w_k", "w_v", "w_o"):
            w = getattr(self, name)
            if w.ndim != 2 or w.shape != (d, d):
                raise ShapeError(
                    f"{name} must be square ({d}, {d}), got {tuple(w.shape)}"
                )
        if d % self.num_heads != 0:
            raise ShapeError(
                f"model_dim {d} not divisible by num_heads {self.num_heads}"
            )

    @property
    def model_dim(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def attention_params(
    rng: np.random.Generator, model_dim: int, num_heads: int, scale: float | None = None
) -> AttentionParams:
    """Seeded-random attention weights; scale defaults to 1/sqrt(model_dim)."""
    if scale is None:
        scale = 1.0 / math.sqrt(model_dim)
    mats = [rng.normal(0.0, scale, (model_dim, model_dim)) for _ in range(4)]
    return AttentionParams(num_heads, *mats)


# ---------------------------------------------------------------------------
# normalization


def layer_norm(x, gamma, beta, eps: float = 1e-6) -> np.ndarray:
    """Normalize over the last axis to zero mean / unit variance, then apply
    the affine (gamma, beta)."""
    x, gamma, beta = _arr(x, "x"), _arr(gamma, "gamma"), _arr(beta, "beta")
    if eps <= 0:
        raise ValueError(f"eps must be > 0, got {eps}")
    d = x.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise ShapeError(
            f"gamma/beta shapes {tuple(gamma.shape)}/{tuple(beta.shape)} do not"
            f" match last axis of x {tuple(x.shape)}"
        )
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    xhat = xc / np.sqrt(var + eps)
    return xhat * gamma + beta


def layer_norm_vjp(g, x, gamma, beta, eps: float = 1e-6):
    """Gradients of layer_norm w.r.t. (x, gamma, beta) given upstream g."""
    x, gamma = np.asarray(x, dtype=np.float64), np.asarray(gamma, dtype=np.float64)
    g = np.asarray(g, dtype=np.float64)
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    lead = tuple(range(x.ndim - 1))
    dgamma = (g * xhat).sum(axis=lead)
    dbeta = g.sum(axis=lead)
    dxhat = g * gamma
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * np.mean(dxhat * xhat, axis=-1, keepdims=True)
    )
    return dx, dgamma, dbeta


# ---------------------------------------------------------------------------
# linear / conv


def linear(x, w, b=None) -> np.ndarray:
    """y = x @ w + b over the last axis of x."""
    x, w = _arr(x, "x"), _arr(w, "w")
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(
            f"inner dimensions disagree: x {tuple(x.shape)} vs w {tuple(w.shape)}"
        )
    y = x @ w
    if b is not None:
        b = _arr(b, "b")
        if b.shape != (w.shape[1],):
            raise ShapeError(
                f"bias shape {tuple(b.shape)} does not match output dim {w.shape[1]}"
            )
        y = y + b
    return y


def linear_vjp(g, x, w):
    """Gradients of linear w.r.t. (x, w, b)."""
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    dx = g @ w.T
    gf = g.reshape(-1, g.shape[-1])
    xf = x.reshape(-1, x.shape[-1])
    dw = xf.T @ gf
    db = gf.sum(axis=0)
    return dx, dw, db


def conv3d(x, kernel) -> np.ndarray:
    """3D convolution with symmetric zero "same" padding and stride 1.

    Args:
        x: input volume, shape (D, H, W, Cin).
        kernel: filter bank, shape (kd, kh, kw, Cin, Cout); extents must be odd.

    Returns:
        Output volume of shape (D, H, W, Cout).
    """
    x, kernel = _arr(x, "x"), _arr(kernel, "kernel")
    if x.ndim != 4 or kernel.ndim != 5:
        raise ShapeError(
            f"expected x (D,H,W,Cin) and kernel (kd,kh,kw,Cin,Cout), got"
            f" {tuple(x.shape)} and {tuple(kernel.shape)}"
        )
    kd, kh, kw, cin, cout = kernel.shape
    if kd % 2 == 0 or kh % 2 == 0 or kw % 2 == 0:
        raise ShapeError(f"kernel extents must be odd, got ({kd}, {kh}, {kw})")
    if x.shape[3] != cin:
        raise ShapeError(
            f"channel mismatch: x has Cin={x.shape[3]}, kernel expects {cin}"
        )
    d, h, w = x.shape[:3]
    pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    out = np.zeros((d, h, w, cout))
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                out += xp[i : i + d, j : j + h, l : l + w, :] @ kernel[i, j, l]
    return out


def conv3d_vjp(g, x, kernel):
    """Gradients of conv3d w.r.t. (x, kernel)."""
    g = np.asarray(g, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    kd, kh, kw = kernel.shape[:3]
    d, h, w = x.shape[:3]
    pd, ph, pw = (kd - 1) // 2, (kh - 1) // 2, (kw - 1) // 2
    xp = np.pad(x, ((pd, pd), (ph, ph), (pw, pw), (0, 0)))
    dxp = np.zeros_like(xp)
    dkernel = np.zeros_like(kernel)
    for i in range(kd):
        for j in range(kh):
            for l in range(kw):
                dxp[i : i + d, j : j + h, l : l + w, :] += g @ kernel[i, j, l].T
                dkernel[i, j, l] = np.tensordot(
                    xp[i : i + d, j : j + h, l : l + w, :], g, axes=([0, 1, 2], [0, 1, 2])
                )
    dx = dxp[pd : pd + d, ph : ph + h, pw : pw + w, :]
    return dx, dkernel


# ---------------------------------------------------------------------------
# activations / softmax


def softmax(x, axis: int = -1) -> np.ndarray:
    """Numerically stable softmax (max-subtracted) along ``axis``."""
    x = _arr(x, "x")
    if not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"axis {axis} invalid for shape {tuple(x.shape)}")
    m = x.max(axis=axis, keepdims=True)
    e = np.exp(x - m)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_vjp(g, y, axis: int = -1) -> np.ndarray:
    """Gradient of softmax given its output y and upstream g."""
    g = np.asarray(g, dtype=np.float64)
    return y * (g - (g * y).sum(axis=axis, keepdims=True))


def sigmoid(x) -> np.ndarray:
    """Exact logistic sigmoid, overflow-safe on both tails."""
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_grad(x) -> np.ndarray:
    s = sigmoid(x)
    return s * (1.0 - s)


_GELU_C = math.sqrt(2.0 / math.pi)


def gelu(x) -> np.ndarray:
    """GELU with the tanh approximation."""
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    return 0.5 * x * (1.0 + np.tanh(inner))


def gelu_grad(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    inner = _GELU_C * (x + 0.044715 * x**3)
    t = np.tanh(inner)
    dinner = _GELU_C * (1.0 + 3.0 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * dinner


ACTIVATIONS = {"gelu": (gelu, gelu_grad), "sigmoid": (sigmoid, sigmoid_grad)}


# ---------------------------------------------------------------------------
# attention


def _split_heads(x, num_heads: int):
    b, t, d = x.shape
    return x.reshape(b, t, num_heads, d // num_heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, nh, t, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, nh * hd)


def _attn_check(q, k, v, params: AttentionParams):
    d = params.model_dim
    if q.ndim < 2 or k.ndim < 2 or v.ndim < 2:
        raise ShapeError("q, k, v must have at least (seq, model_dim) axes")
    if q.shape[-1] != d or k.shape[-1] != d or v.shape[-1] != d:
        raise ShapeError(
            f"last axis must equal model_dim {d}: q {tuple(q.shape)},"
            f" k {tuple(k.shape)}, v {tuple(v.shape)}"
        )
    if k.shape[:-1] != v.shape[:-1]:
        raise ShapeError(
            f"k and v sequences disagree: {tuple(k.shape)} vs {tuple(v.shape)}"
        )
    if q.shape[:-2] != k.shape[:-2]:
        raise ShapeError(
            f"leading dims disagree: q {tuple(q.shape)} vs k {tuple(k.shape)}"
        )


def multi_head_attention(q, k, v, params: AttentionParams) -> np.ndarray:
    """Scaled dot-product attention; output has the shape of q.

    Accepts arbitrary leading batch axes as long as they match between q and
    k/v; the last two axes are (sequence, model_dim).
    """
    q, k, v = _arr(q, "q"), _arr(k, "k"), _arr(v, "v")
    _attn_check(q, k, v, params)
    lead, (tq, d) = q.shape[:-2], q.shape[-2:]
    tk = k.shape[-2]
    qf, kf, vf = (a.reshape(-1, a.shape[-2], d) for a in (q, k, v))
    qh = _split_heads(qf @ params.w_q, params.num_heads)
    kh = _split_heads(kf @ params.w_k, params.num_heads)
    vh = _split_heads(vf @ params.w_v, params.num_heads)
    scores = qh @ kh.transpose(0, 1, 3, 2) / math.sqrt(params.head_dim)
    attn = softmax(scores, axis=-1)
    out = _merge_heads(attn @ vh) @ params.w_o
    return out.reshape(lead + (tq, d))


def multi_head_attention_vjp(g, q, k, v, params: AttentionParams):
    """Gradients of multi_head_attention w.r.t. (q, k, v, w_q, w_k, w_v, w_o)."""
    g = np.asarray(g, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    k = np.asarray(k, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = params.model_dim
    qf, kf, vf = (a.reshape(-1, a.shape[-2], d) for a in (q, k, v))
    gf = g.reshape(-1, g.shape[-2], d)
    scale = 1.0 / math.sqrt(params.head_dim)

    qp, kp, vp = qf @ params.w_q, kf @ params.w_k, vf @ params.w_v
    qh, kh, vh = (_split_heads(a, params.num_heads) for a in (qp, kp, vp))
    attn = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale, axis=-1)
    merged = _merge_heads(attn @ vh)

    d_merged = gf @ params.w_o.T
    dw_o = np.einsum("btd,bte->de", merged, gf)
    d_oh = _split_heads(d_merged, params.num_heads)
    d_attn = d_oh @ vh.transpose(0, 1, 3, 2)
    d_vh = attn.transpose(0, 1, 3, 2) @ d_oh
    d_scores = softmax_vjp(d_attn, attn, axis=-1) * scale
    d_qh = d_scores @ kh
    d_kh = d_scores.transpose(0, 1, 3, 2) @ qh

    d_qp, d_kp, d_vp = _merge_heads(d_qh), _merge_heads(d_kh), _merge_heads(d_vh)
    dq = (d_qp @ params.w_q.T).reshape(q.shape)
    dk = (d_kp @ params.w_k.T).reshape(k.shape)
    dv = (d_vp @ params.w_v.T).reshape(v.shape)
    dw_q = np.einsum("btd,bte->de", qf, d_qp)
    dw_k = np.einsum("btd,bte->de", kf, d_kp)
    dw_v = np.einsum("btd,bte->de", vf, d_vp)
    return dq, dk, dv, dw_q, dw_k, dw_v, dw_o


# ---------------------------------------------------------------------------
# similarity / finite differences

ZERO_NORM_EPS = 1e-12


def cosine_similarity(a, b) -> float:
    """Cosine of two same-shape tensors, flattened.  A vector whose norm is
    below 1e-12 carries no direction and scores 0 instead of raising."""
    a, b = _arr(a, "a"), _arr(b, "b")
    if a.shape != b.shape:
        raise ShapeError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")
    af, bf = a.ravel(), b.ravel()
    na, nb = np.linalg.norm(af), np.linalg.norm(bf)
    if na < ZERO_NORM_EPS or nb < ZERO_NORM_EPS:
        return 0.0
    return float(np.clip(af @ bf / (na * nb), -1.0, 1.0))


def finite_diff_grad(f, x, h: float = 1e-6) -> np.ndarray:
    """Central-difference gradient estimate of scalar-valued f at x."""
    if h <= 0:
        raise ValueError(f"h must be > 0, got {h}")
    # own a contiguous copy so the in-place perturbation is visible to f
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        grad.ravel()[i] = (fp - fm) / (2.0 * h)
    return grad
