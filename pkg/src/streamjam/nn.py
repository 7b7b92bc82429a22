"""Numpy layer primitives with hand-written backward passes.

Every *_fwd returns (output, cache); the matching *_bwd consumes the upstream
gradient and the cache and returns gradients in the same order as the fwd
inputs. Shapes use trailing feature dims so the same code runs on (B, L, d)
and (B, H, L, hd) tensors. All primitives are checked against central
finite differences in float64 (see tests).
"""

from __future__ import annotations

import numpy as np


# ---------------------------------------------------------------------------
# norms
# ---------------------------------------------------------------------------

def rmsnorm_fwd(x, gain, eps=1e-6):
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + eps)
    y = x * r * gain
    return y, (x, gain, r)


def rmsnorm_bwd(dy, cache):
    x, gain, r = cache
    d = x.shape[-1]
    dxhat = dy * gain
    s = np.sum(dxhat * x, axis=-1, keepdims=True)
    dx = dxhat * r - x * (s * r**3 / d)
    dgain = np.sum(dy * x * r, axis=tuple(range(x.ndim - 1)))
    return dx, dgain


def l2norm_fwd(x, eps=1e-6):
    """Normalize the trailing dim to (near) unit length."""
    n = np.sqrt(np.sum(x * x, axis=-1, keepdims=True) + eps)
    return x / n, (x, n)


def l2norm_bwd(dy, cache):
    x, n = cache
    s = np.sum(dy * x, axis=-1, keepdims=True)
    return dy / n - x * (s / n**3)


# ---------------------------------------------------------------------------
# linear / embedding
# ---------------------------------------------------------------------------

def linear_fwd(x, w):
    return x @ w, (x, w)


def linear_bwd(dy, cache):
    x, w = cache
    dx = dy @ w.T
    dw = x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    return dx, dw


def scatter_rows(n_rows, idx, vals):
    """Sum rows of vals into an (n_rows, d) table by index (embedding grad)."""
    idx = idx.reshape(-1)
    vals = vals.reshape(idx.shape[0], -1)
    out = np.empty((n_rows, vals.shape[1]), dtype=vals.dtype)
    for j in range(vals.shape[1]):  # bincount is much faster than add.at here
        out[:, j] = np.bincount(idx, weights=vals[:, j], minlength=n_rows)
    return out


# ---------------------------------------------------------------------------
# rotary position embedding (half-split convention)
# ---------------------------------------------------------------------------

def rope_angles(positions, head_dim, base=10000.0):
    inv = base ** (-np.arange(0, head_dim, 2, dtype=np.float64) / head_dim)
    ang = np.asarray(positions, dtype=np.float64)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)  # each (L, head_dim/2)


def rope_fwd(x, cos, sin):
    """x (..., L, hd); cos/sin (L, hd/2) broadcast over leading dims."""
    h = x.shape[-1] // 2
    x1, x2 = x[..., :h], x[..., h:]
    c = cos.astype(x.dtype)
    s = sin.astype(x.dtype)
    out = np.concatenate([x1 * c - x2 * s, x1 * s + x2 * c], axis=-1)
    return out, (c, s)


def rope_bwd(dy, cache):
    c, s = cache
    h = dy.shape[-1] // 2
    d1, d2 = dy[..., :h], dy[..., h:]
    return np.concatenate([d1 * c + d2 * s, -d1 * s + d2 * c], axis=-1)


# ---------------------------------------------------------------------------
# attention (GQA, additive mask, per-head similarity scale)
# ---------------------------------------------------------------------------

def softmax_fwd(scores):
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    return p, p


def softmax_bwd(dp, p):
    s = np.sum(dp * p, axis=-1, keepdims=True)
    return p * (dp - s)


def attention_fwd(q, k, v, scale, mask):
    """q (B, H, Lq, hd); k, v (B, KVH, Lk, hd); scale (H,); mask (Lq, Lk) additive.

    KV heads are shared across groups of H // KVH query heads.
    """
    b, h, lq, hd = q.shape
    kvh = k.shape[1]
    g = h // kvh
    k_rep = np.repeat(k, g, axis=1)
    v_rep = np.repeat(v, g, axis=1)
    raw = q @ k_rep.transpose(0, 1, 3, 2)
    scores = raw * scale[None, :, None, None] + mask[None, None]
    p, _ = softmax_fwd(scores)
    out = p @ v_rep
    return out, (q, k_rep, v_rep, p, raw, scale, g, kvh)


def attention_bwd(dout, cache):
    q, k_rep, v_rep, p, raw, scale, g, kvh = cache
    b, h, lq, hd = q.shape
    dp = dout @ v_rep.transpose(0, 1, 3, 2)
    dv_rep = p.transpose(0, 1, 3, 2) @ dout
    dscores = softmax_bwd(dp, p)
    dscale = np.einsum("bhqk,bhqk->h", dscores, raw)
    dscores = dscores * scale[None, :, None, None]
    dq = dscores @ k_rep
    dk_rep = dscores.transpose(0, 1, 3, 2) @ q
    dk = dk_rep.reshape(b, kvh, g, -1, hd).sum(axis=2)
    dv = dv_rep.reshape(b, kvh, g, -1, hd).sum(axis=2)
    return dq, dk, dv, dscale


def causal_mask(lq, lk, offset=0, dtype=np.float32):
    """Additive mask: block row i may attend keys up to offset + i."""
    q_idx = np.arange(lq)[:, None] + offset
    k_idx = np.arange(lk)[None, :]
    return np.where(k_idx <= q_idx, 0.0, -np.inf).astype(dtype)


def full_mask(lq, lk, dtype=np.float32):
    return np.zeros((lq, lk), dtype=dtype)


# ---------------------------------------------------------------------------
# SwiGLU
# ---------------------------------------------------------------------------

def silu_fwd(x):
    sig = 1.0 / (1.0 + np.exp(-x))
    return x * sig, (x, sig)


def silu_bwd(dy, cache):
    x, sig = cache
    return dy * sig * (1.0 + x * (1.0 - sig))


def swiglu_fwd(x, w_gate, w_up, w_down):
    g = x @ w_gate
    u = x @ w_up
    a, sc = silu_fwd(g)
    h = a * u
    y = h @ w_down
    return y, (x, w_gate, w_up, w_down, u, a, sc, h)


def swiglu_bwd(dy, cache):
    x, w_gate, w_up, w_down, u, a, sc, h = cache
    dh = dy @ w_down.T
    dw_down = h.reshape(-1, h.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    da = dh * u
    du = dh * a
    dg = silu_bwd(da, sc)
    xm = x.reshape(-1, x.shape[-1])
    dw_gate = xm.T @ dg.reshape(-1, dg.shape[-1])
    dw_up = xm.T @ du.reshape(-1, du.shape[-1])
    dx = dg @ w_gate.T + du @ w_up.T
    return dx, dw_gate, dw_up, dw_down


# ---------------------------------------------------------------------------
# cross entropy over selected rows
# ---------------------------------------------------------------------------

def cross_entropy_sum(logits, targets):
    """Summed CE over rows; dlogits carries no normalization.

    logits (M, V) float, targets (M,) int. M == 0 gives loss 0 and no grads.
    """
    m = logits.shape[0]
    if m == 0:
        return 0.0, np.zeros_like(logits)
    mx = logits.max(axis=-1, keepdims=True)
    z = logits - mx
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - lse
    rows = np.arange(m)
    loss = float(-logp[rows, targets].sum())
    dlogits = np.exp(logp)
    dlogits[rows, targets] -= 1.0
    return loss, dlogits.astype(logits.dtype)


def cross_entropy(logits, targets):
    """Mean CE over rows; returns (loss, dlogits) with the 1/M applied."""
    m = logits.shape[0]
    loss, dlogits = cross_entropy_sum(logits, targets)
    if m:
        loss /= m
        dlogits /= m
    return loss, dlogits


def global_norm(arrays) -> float:
    total = 0.0
    for a in arrays:
        total += float(np.sum(np.asarray(a, dtype=np.float64) ** 2))
    return float(np.sqrt(total))
