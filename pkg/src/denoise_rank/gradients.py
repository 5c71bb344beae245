"""Hand-written forward/backward passes for the trainable user models.

``forward`` returns the user-model vector u plus a cache; ``backward``
turns dL/du into gradients for the variant's trainable parameters:

    Denoising, DenoisingSoftmax   {"t"}
    Softmax/ZeroAttention+Additive {"W_q", "W_d", "v"}
    MultiHead                      {"W_Q", "W_K", "W_V", "W_O"}

Every other variant has no parameters and ``backward`` returns ``{}``.
The ReLU subgradient at 0 is taken as 0.
"""

from __future__ import annotations

import math
from dataclasses import replace
from typing import Dict, Tuple

import numpy as np

from . import alignment as al
from .types import (
    AdditiveParams,
    Alignment,
    AttentionConfig,
    MultiHeadParams,
    Variant,
    sigmoid,
)

Params = Dict[str, np.ndarray]


def trainable_params(attn: AttentionConfig) -> Params:
    """Writable copies of the parameters ``attn`` would learn."""
    v = attn.variant
    if v in (Variant.DENOISING, Variant.DENOISING_SOFTMAX):
        return {"t": np.array(attn.threshold_logit)}
    if v is Variant.MULTI_HEAD:
        return {k: a.copy() for k, a in attn.multihead_params.arrays().items()}
    if v in (Variant.SOFTMAX, Variant.ZERO_ATTENTION) and attn.alignment is Alignment.ADDITIVE:
        return {k: a.copy() for k, a in attn.additive_params.arrays().items()}
    return {}


def with_params(attn: AttentionConfig, params: Params) -> AttentionConfig:
    """Inverse of ``trainable_params``: a config carrying ``params``."""
    if not params:
        return attn
    if "t" in params:
        return replace(attn, threshold_logit=float(params["t"]))
    if "W_O" in params:
        return replace(attn, multihead_params=MultiHeadParams(**params))
    return replace(attn, additive_params=AdditiveParams(**params))


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max())
    return e / e.sum()


def _softmax_backward(w: np.ndarray, g_w: np.ndarray) -> np.ndarray:
    return w * (g_w - w @ g_w)


def forward(q: np.ndarray, D: np.ndarray, attn: AttentionConfig, params: Params = None) -> Tuple[np.ndarray, dict]:
    """User-model vector for query ``q`` over documents ``D`` (k, m).

    ``params`` overrides the trainable parameters stored on ``attn``.
    """
    if params is None:
        params = trainable_params(attn)
    v = attn.variant
    cache = {"D": D, "q": q}
    if v is Variant.MEAN:
        w = np.full(D.shape[0], 1.0 / D.shape[0])
    elif v in (Variant.DENOISING, Variant.DENOISING_SOFTMAX):
        e = al.align(q, D, Alignment.SHIFTED_COSINE)
        s = sigmoid(float(params["t"]))
        active = e > s
        f = np.where(active, e - s, 0.0)
        cache.update(s=s, active=active, f=f)
        if v is Variant.DENOISING:
            total = f.sum()
            denom = max(total, attn.epsilon)
            cache.update(total=total, denom=denom)
            w = f / denom
        else:
            w = _softmax(f)
    elif v is Variant.FILTER_ATTENTION:
        e = al.align(q, D, Alignment.SCALED_DOT)
        f = np.maximum(e, 0.0)
        w = f / max(f.sum(), attn.epsilon)
    elif v in (Variant.SOFTMAX, Variant.ZERO_ATTENTION):
        if attn.alignment is Alignment.ADDITIVE:
            W_q, W_d, vv = params["W_q"], params["W_d"], params["v"]
            pre_q = W_q @ q
            H = np.tanh(pre_q[None, :] + D @ W_d.T)
            e = H @ vv
            cache.update(H=H)
            if v is Variant.ZERO_ATTENTION:
                h0 = np.tanh(pre_q)
                cache.update(h0=h0)
                e = np.append(e, h0 @ vv)
        else:
            e = al.align(q, D, attn.alignment)
            if v is Variant.ZERO_ATTENTION:
                e = np.append(e, al.align(q, np.zeros((1, q.shape[0])), attn.alignment)[0])
        w_all = _softmax(e)
        cache.update(w_all=w_all)
        w = w_all[: D.shape[0]]
    elif v is Variant.MULTI_HEAD:
        return _multihead_forward(q, D, params, cache)
    else:
        raise ValueError(f"no forward pass for {v.value}")
    cache["w"] = w
    return w @ D, cache


def _multihead_forward(q, D, params, cache):
    W_Q, W_K, W_V, W_O = params["W_Q"], params["W_K"], params["W_V"], params["W_O"]
    heads, dk, m = W_Q.shape
    scale = 1.0 / math.sqrt(dk)
    Q = W_Q @ q  # (h, dk)
    K = np.einsum("hjm,km->hkj", W_K, D)
    V = np.einsum("hjm,km->hkj", W_V, D)
    logits = np.einsum("hkj,hj->hk", K, Q) * scale
    logits -= logits.max(axis=1, keepdims=True)
    A = np.exp(logits)
    A /= A.sum(axis=1, keepdims=True)
    O = np.einsum("hk,hkj->hj", A, V)
    c = O.reshape(m)
    cache.update(Q=Q, K=K, V=V, A=A, c=c, scale=scale, w=A.mean(axis=0))
    return W_O @ c, cache


def backward(g_u: np.ndarray, cache: dict, attn: AttentionConfig, params: Params = None) -> Params:
    """Gradients of the loss w.r.t. the trainable parameters, given dL/du."""
    if params is None:
        params = trainable_params(attn)
    v = attn.variant
    D = cache["D"]
    if v is Variant.MULTI_HEAD:
        return _multihead_backward(g_u, cache, params)
    if not params:
        return {}
    g_w = D @ g_u
    if v in (Variant.DENOISING, Variant.DENOISING_SOFTMAX):
        f = cache["f"]
        if v is Variant.DENOISING:
            total, denom = cache["total"], cache["denom"]
            if total > attn.epsilon:
                g_f = g_w / total - (g_w @ f) / total**2
            else:
                g_f = g_w / denom
        else:
            g_f = _softmax_backward(cache["w"], g_w)
        s = cache["s"]
        g_s = -np.sum(g_f[cache["active"]])
        return {"t": np.array(g_s * s * (1.0 - s))}
    # additive softmax / zero attention
    w_all = cache["w_all"]
    k = D.shape[0]
    g_w_all = np.zeros_like(w_all)
    g_w_all[:k] = g_w
    g_e_all = _softmax_backward(w_all, g_w_all)
    g_e = g_e_all[:k]
    H = cache["H"]
    vv = params["v"]
    q = cache["q"]
    g_v = H.T @ g_e
    g_pre = (g_e[:, None] * vv[None, :]) * (1.0 - H**2)  # (k, h)
    g_Wd = g_pre.T @ D
    g_preq = g_pre.sum(axis=0)
    if v is Variant.ZERO_ATTENTION:
        h0 = cache["h0"]
        g_z = g_e_all[k]
        g_v = g_v + g_z * h0
        g_preq = g_preq + g_z * vv * (1.0 - h0**2)
    return {"W_q": np.outer(g_preq, q), "W_d": g_Wd, "v": g_v}


def _multihead_backward(g_u, cache, params):
    W_O = params["W_O"]
    W_Q = params["W_Q"]
    heads, dk, m = W_Q.shape
    D, q = cache["D"], cache["q"]
    Q, K, V, A, c, scale = (cache[k] for k in ("Q", "K", "V", "A", "c", "scale"))
    g_WO = np.outer(g_u, c)
    g_O = (W_O.T @ g_u).reshape(heads, dk)
    # O[h] = sum_k A[h,k] V[h,k]
    g_WV = np.einsum("hj,hm->hjm", g_O, A @ D)
    g_A = np.einsum("hkj,hj->hk", V, g_O)
    g_logits = A * (g_A - np.sum(A * g_A, axis=1, keepdims=True))
    g_Q = np.einsum("hk,hkj->hj", g_logits, K) * scale
    g_K = np.einsum("hk,hj->hkj", g_logits, Q) * scale
    g_WQ = np.einsum("hj,m->hjm", g_Q, q)
    g_WK = np.einsum("hkj,km->hjm", g_K, D)
    return {"W_Q": g_WQ, "W_K": g_WK, "W_V": g_WV, "W_O": g_WO}


def cosine_and_grad(z: np.ndarray, d: np.ndarray) -> Tuple[float, np.ndarray]:
    """cos(z, d) and its gradient with respect to z (zero if either norm is 0)."""
    nz = np.linalg.norm(z)
    nd = np.linalg.norm(d)
    if nz == 0.0 or nd == 0.0:
        return 0.0, np.zeros_like(z)
    c = float(z @ d) / (nz * nd)
    return c, d / (nz * nd) - c * z / nz**2
