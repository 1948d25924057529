"""Small double-precision neural primitives with hand-written backward passes.

Parameters live in flat ``dict[str, ndarray]`` containers with dotted names
(``"enc_m.0.attn.q.W"``). Every ``*_forward`` returns ``(output, cache)``;
the matching ``*_backward`` takes the upstream gradient and the cache,
accumulates parameter gradients into a ``grads`` dict and returns the
gradient with respect to its input(s).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ._io import atomic_write_text

WEIGHTS_FORMAT = "poseforge-weights-v1"
LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)


class NonFiniteError(FloatingPointError):
    pass


def _acc(grads, name, g):
    if name in grads:
        grads[name] = grads[name] + g
    else:
        grads[name] = g


# -- initialization ---------------------------------------------------------

def init_linear(params, rng, name, din, dout, zero=False):
    if zero:
        params[f"{name}.W"] = np.zeros((din, dout))
    else:
        bound = 1.0 / math.sqrt(din)
        params[f"{name}.W"] = rng.uniform(-bound, bound, size=(din, dout))
    params[f"{name}.b"] = np.zeros(dout)


def init_layernorm(params, name, d):
    params[f"{name}.g"] = np.ones(d)
    params[f"{name}.b"] = np.zeros(d)


def init_attention(params, rng, name, d, zero_out=True):
    for proj in ("q", "k", "v"):
        init_linear(params, rng, f"{name}.{proj}", d, d)
    init_linear(params, rng, f"{name}.o", d, d, zero=zero_out)


def init_ffn(params, rng, name, d, hidden, zero_out=True):
    init_linear(params, rng, f"{name}.fc1", d, hidden)
    init_linear(params, rng, f"{name}.fc2", hidden, d, zero=zero_out)


def init_block(params, rng, name, d, hidden, zero_out=True):
    """Parameters for `encoder_block_forward` / `cross_block_forward`."""
    init_layernorm(params, f"{name}.ln1", d)
    init_attention(params, rng, f"{name}.attn", d, zero_out)
    init_layernorm(params, f"{name}.ln2", d)
    init_ffn(params, rng, f"{name}.ffn", d, hidden, zero_out)


# -- elementwise / affine layers -------------------------------------------

def linear_forward(x, params, name):
    W, b = params[f"{name}.W"], params[f"{name}.b"]
    return x @ W + b, x


def linear_backward(dy, x, params, name, grads):
    W = params[f"{name}.W"]
    din, dout = W.shape
    _acc(grads, f"{name}.W", x.reshape(-1, din).T @ dy.reshape(-1, dout))
    _acc(grads, f"{name}.b", dy.reshape(-1, dout).sum(axis=0))
    return dy @ W.T


def layernorm_forward(x, params, name):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return params[f"{name}.g"] * xhat + params[f"{name}.b"], (xhat, inv)


def layernorm_backward(dy, cache, params, name, grads):
    xhat, inv = cache
    d = xhat.shape[-1]
    _acc(grads, f"{name}.g", (dy * xhat).reshape(-1, d).sum(axis=0))
    _acc(grads, f"{name}.b", dy.reshape(-1, d).sum(axis=0))
    dxhat = dy * params[f"{name}.g"]
    return inv * (dxhat - dxhat.mean(axis=-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))


def gelu_forward(x):
    th = np.tanh(_GELU_C * (x + 0.044715 * (x * x * x)))
    return 0.5 * x * (1.0 + th), (x, th)


def gelu_backward(dy, cache):
    x, th = cache
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * (x * x))
    return dy * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * dinner)


def softmax(s, axis=-1):
    e = np.exp(s - s.max(axis=axis, keepdims=True))
    return e / e.sum(axis=axis, keepdims=True)


# -- attention ---------------------------------------------------------------

def attention(Q, K, V):
    """``softmax(Q K^T / sqrt(d)) V`` for ``(n, d)``, ``(m, d)``, ``(m, d)`` inputs."""
    Q, K, V = (np.asarray(a, dtype=np.float64) for a in (Q, K, V))
    if Q.ndim != 2 or K.ndim != 2 or V.ndim != 2:
        raise ValueError("attention expects 2-D inputs")
    if Q.shape[1] != K.shape[1] or K.shape[0] != V.shape[0]:
        raise ValueError(f"dimension mismatch: Q{Q.shape} K{K.shape} V{V.shape}")
    if Q.shape[0] < 1 or K.shape[0] < 1:
        raise ValueError("attention needs at least one query and one key")
    return softmax(Q @ K.T / math.sqrt(Q.shape[1])) @ V


def _split(x, h):
    B, n, d = x.shape
    return x.reshape(B, n, h, d // h).transpose(0, 2, 1, 3)


def _merge(x):
    B, h, n, dh = x.shape
    return x.transpose(0, 2, 1, 3).reshape(B, n, h * dh)


def mha_forward(xq, xkv, params, name, n_heads):
    """Multi-head attention over batched ``(B, n, d)`` queries and ``(B, m, d)`` context."""
    if xq.shape[-1] != xkv.shape[-1] or xq.shape[-1] % n_heads:
        raise ValueError(f"shape mismatch: {xq.shape} vs {xkv.shape} with {n_heads} heads")
    q, cq = linear_forward(xq, params, f"{name}.q")
    k, ck = linear_forward(xkv, params, f"{name}.k")
    v, cv = linear_forward(xkv, params, f"{name}.v")
    qh, kh, vh = _split(q, n_heads), _split(k, n_heads), _split(v, n_heads)
    scale = 1.0 / math.sqrt(qh.shape[-1])
    a = softmax(qh @ kh.transpose(0, 1, 3, 2) * scale)
    o = _merge(a @ vh)
    out, co = linear_forward(o, params, f"{name}.o")
    return out, (cq, ck, cv, qh, kh, vh, a, scale, co, n_heads)


def mha_backward(dout, cache, params, name, grads):
    """Returns ``(d_xq, d_xkv)``."""
    cq, ck, cv, qh, kh, vh, a, scale, co, n_heads = cache
    do = _split(linear_backward(dout, co, params, f"{name}.o", grads), n_heads)
    da = do @ vh.transpose(0, 1, 3, 2)
    dvh = a.transpose(0, 1, 3, 2) @ do
    ds = a * (da - (da * a).sum(axis=-1, keepdims=True)) * scale
    dqh = ds @ kh
    dkh = ds.transpose(0, 1, 3, 2) @ qh
    dxq = linear_backward(_merge(dqh), cq, params, f"{name}.q", grads)
    dxkv = (linear_backward(_merge(dkh), ck, params, f"{name}.k", grads)
            + linear_backward(_merge(dvh), cv, params, f"{name}.v", grads))
    return dxq, dxkv


# -- blocks -----------------------------------------------------------------

def ffn_forward(x, params, name):
    h, c1 = linear_forward(x, params, f"{name}.fc1")
    g, cg = gelu_forward(h)
    y, c2 = linear_forward(g, params, f"{name}.fc2")
    return y, (c1, cg, c2)


def ffn_backward(dy, cache, params, name, grads):
    c1, cg, c2 = cache
    dg = linear_backward(dy, c2, params, f"{name}.fc2", grads)
    return linear_backward(gelu_backward(dg, cg), c1, params, f"{name}.fc1", grads)


def _as_batch(x):
    x = np.asarray(x, dtype=np.float64)
    return (x[None], True) if x.ndim == 2 else (x, False)


def cross_block_forward(x, ctx, params, name, n_heads):
    """Pre-norm block: ``x + Attn(LN(x), ctx)`` then ``x + FFN(LN(x))``.

    With ``ctx=None`` the attention is self-attention over ``LN(x)``.
    Accepts ``(n, d)`` or batched ``(B, n, d)`` inputs.
    """
    x, squeeze = _as_batch(x)
    self_attn = ctx is None
    if not self_attn:
        ctx, _ = _as_batch(ctx)
    h1, cl1 = layernorm_forward(x, params, f"{name}.ln1")
    att, ca = mha_forward(h1, h1 if self_attn else ctx, params, f"{name}.attn", n_heads)
    x1 = x + att
    h2, cl2 = layernorm_forward(x1, params, f"{name}.ln2")
    f, cf = ffn_forward(h2, params, f"{name}.ffn")
    y = x1 + f
    cache = (cl1, ca, cl2, cf, self_attn, squeeze)
    return (y[0] if squeeze else y), cache


def cross_block_backward(dy, cache, params, name, grads):
    """Returns ``(dx, dctx)``; ``dctx`` is None for self-attention blocks."""
    cl1, ca, cl2, cf, self_attn, squeeze = cache
    if squeeze:
        dy = dy[None]
    dx1 = dy + layernorm_backward(ffn_backward(dy, cf, params, f"{name}.ffn", grads),
                                  cl2, params, f"{name}.ln2", grads)
    dh1, dctx = mha_backward(dx1, ca, params, f"{name}.attn", grads)
    if self_attn:
        dh1 = dh1 + dctx
        dctx = None
    dx = dx1 + layernorm_backward(dh1, cl1, params, f"{name}.ln1", grads)
    if squeeze:
        dx = dx[0]
        dctx = None if dctx is None else dctx[0]
    return dx, dctx


def encoder_block_forward(x, params, name, n_heads):
    """Pre-norm self-attention block: ``x + SAttn(LN(x))`` then ``x + FFN(LN(x))``."""
    return cross_block_forward(x, None, params, name, n_heads)


def encoder_block_backward(dy, cache, params, name, grads):
    return cross_block_backward(dy, cache, params, name, grads)[0]


# -- optimizer --------------------------------------------------------------

@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params, grads, state):
    """One bias-corrected Adam update; returns ``(new_params, new_state)``.

    Inputs are not modified. ``params`` and ``grads`` may be dicts of arrays or
    single arrays.
    """
    single = not isinstance(params, dict)
    if single:
        params, grads = {"_": params}, {"_": grads}
    step = state.step_count + 1
    b1, b2 = state.beta1, state.beta2
    c1, c2 = 1.0 - b1 ** step, 1.0 - b2 ** step
    new_p, new_m, new_v = {}, {}, {}
    for name, p in params.items():
        g = np.asarray(grads.get(name, 0.0), dtype=np.float64)
        if not np.all(np.isfinite(g)):
            raise NonFiniteError(f"non-finite gradient for {name!r}")
        g = np.broadcast_to(g, np.shape(p))
        m = b1 * state.m.get(name, 0.0) + (1.0 - b1) * g
        v = b2 * state.v.get(name, 0.0) + (1.0 - b2) * g * g
        new_p[name] = p - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        new_m[name], new_v[name] = m, v
    if single:
        new_p, new_m, new_v = new_p["_"], {"_": new_m["_"]}, {"_": new_v["_"]}
    new_state = AdamState(state.lr, b1, b2, state.eps, step, new_m, new_v)
    return new_p, new_state


# -- verification -----------------------------------------------------------

def grad_check(loss_and_grad, params, h=1e-5, max_coords=200, rng=None):
    """Max relative error between analytic and central-difference gradients.

    ``loss_and_grad(params) -> (loss, grads)`` where ``params``/``grads`` are a
    dict of arrays or a single array. When there are more than ``max_coords``
    coordinates, ``max_coords`` of them are sampled (at least one per tensor).
    Error per coordinate is ``|analytic - numeric| / max(1, |numeric|)``.
    """
    single = not isinstance(params, dict)
    P = {"_": np.asarray(params, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in params.items()}

    def call(p):
        loss, g = loss_and_grad(p["_"] if single else p)
        if not np.isfinite(loss):
            raise NonFiniteError("loss is not finite")
        return float(loss), ({"_": g} if single else g)

    _, grads = call(P)
    coords = [(k, i) for k, v in P.items() for i in range(v.size)]
    if len(coords) > max_coords:
        rng = np.random.default_rng(0) if rng is None else rng
        names = sorted(P)
        picked = [(k, int(rng.integers(P[k].size))) for k in names]
        extra = max_coords - len(picked)
        if extra > 0:
            sel = rng.choice(len(coords), size=extra, replace=False)
            picked += [coords[j] for j in sel]
        coords = picked
    worst = 0.0
    for name, i in coords:
        base = P[name]
        plus, minus = base.copy(), base.copy()
        plus.flat[i] += h
        minus.flat[i] -= h
        fp, _ = call({**P, name: plus})
        fm, _ = call({**P, name: minus})
        numeric = (fp - fm) / (2 * h)
        g = grads.get(name)
        analytic = 0.0 if g is None else float(np.asarray(g).flat[i])
        worst = max(worst, abs(analytic - numeric) / max(1.0, abs(numeric)))
    return worst


# -- persistence --------------------------------------------------------------

def weights_to_dict(params):
    return {
        "format": WEIGHTS_FORMAT,
        "tensors": {name: {"shape": list(params[name].shape),
                           "data": [float(x) for x in params[name].ravel()]}
                    for name in sorted(params)},
    }


def weights_from_dict(doc):
    if doc.get("format") != WEIGHTS_FORMAT:
        raise ValueError(f"unsupported weights format {doc.get('format')!r}")
    out = {}
    for name, t in doc["tensors"].items():
        arr = np.asarray(t["data"], dtype=np.float64).reshape(t["shape"])
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite values in tensor {name!r}")
        out[name] = arr
    return out


def save_weights(path, params, extra=None):
    doc = weights_to_dict(params)
    if extra:
        doc["meta"] = extra
    atomic_write_text(path, json.dumps(doc) + "\n")


def load_weights(path):
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    return weights_from_dict(doc), doc.get("meta", {})
