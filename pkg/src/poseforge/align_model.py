"""SVD-guided learnable pose alignment.

The closed-form fit gives an intermediate pose; two transformer encoders
embed the (reference, driven) correspondences and the intermediate pose, a
stack of cross-attention blocks fuses them, and an MLP head predicts a
residual similarity transform composed on top of the SVD estimate.

The residual ``(dtheta, dlog_scale, dtx, dty)`` acts about the reference
centroid ``c`` with translation measured in reference radii ``rho``::

    p -> c + exp(dlog_scale) R(dtheta) (p - c) + rho * dt

Every residual branch and the head's last layer start at zero, so an untrained
model reproduces the SVD fit exactly.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from . import nnet
from .misalign import make_rng, split_indices
from .similarity import (SimTransform, apply, compose, dis_metric, rotation_matrix,
                         similarity_fit)
from .skeleton import DEFAULT_CONF_THRESHOLD, N_KEYPOINTS, PoseSequence, common_keypoints

log = logging.getLogger(__name__)

N_RESIDUAL = 4
EVAL_CHUNK = 256


class TrainingDivergedError(FloatingPointError):
    pass


@dataclass
class ModelConfig:
    d_model: int = 64
    n_heads: int = 4
    ffn_hidden: int = 256
    n_encoder: int = 2
    n_fusion: int = 4
    head_hidden: int = 64
    use_pos_embed: bool = True


@dataclass
class TrainConfig:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0
    conf_threshold: float = DEFAULT_CONF_THRESHOLD

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr > 0:
            raise ValueError("lr must be > 0")


def init_params(seed=0, config=None, zero_residual=True):
    """Fresh parameters. ``zero_residual=False`` randomizes the zero-initialized
    projections too (useful for gradient checks)."""
    cfg = config or ModelConfig()
    rng = make_rng(seed, 0xA11)
    d, hid = cfg.d_model, cfg.ffn_hidden
    p = {}
    nnet.init_linear(p, rng, "tok_m", 6, d)
    nnet.init_linear(p, rng, "tok_svd", 3, d)
    p["pos"] = rng.uniform(-0.1, 0.1, size=(N_KEYPOINTS, d))
    for stack in ("enc_m", "enc_svd"):
        for i in range(cfg.n_encoder):
            nnet.init_block(p, rng, f"{stack}.{i}", d, hid, zero_out=zero_residual)
        nnet.init_layernorm(p, f"{stack}.ln", d)
    for i in range(cfg.n_fusion):
        nnet.init_block(p, rng, f"fuse.{i}", d, hid, zero_out=zero_residual)
    nnet.init_layernorm(p, "head.ln", d)
    nnet.init_linear(p, rng, "head.fc1", d, cfg.head_hidden)
    nnet.init_linear(p, rng, "head.fc2", cfg.head_hidden, N_RESIDUAL, zero=zero_residual)
    if not zero_residual:
        for name in list(p):
            if name.endswith(".b") or name.endswith(".g"):
                p[name] = p[name] + rng.uniform(-0.1, 0.1, size=p[name].shape)
    return p


# -- featurization -----------------------------------------------------------

@dataclass
class Batch:
    tok_m: np.ndarray    # (B, 18, 6)
    tok_svd: np.ndarray  # (B, 18, 3)
    q: np.ndarray        # (B, T, 18, 2) SVD-aligned driven keypoints
    target: np.ndarray   # (B, T, 18, 2)
    mask: np.ndarray     # (B, T, 18)
    center: np.ndarray   # (B, 2)
    radius: np.ndarray   # (B,)
    svd: list

    def __len__(self):
        return self.tok_m.shape[0]

    def take(self, idx):
        idx = np.asarray(idx)
        return Batch(self.tok_m[idx], self.tok_svd[idx], self.q[idx], self.target[idx],
                     self.mask[idx], self.center[idx], self.radius[idx],
                     [self.svd[i] for i in idx])


def _frames(driven):
    kp = driven.keypoints if isinstance(driven, PoseSequence) else np.asarray(driven, dtype=np.float64)
    return kp[None] if kp.ndim == 2 else kp


def _featurize(reference, driven, target, conf_threshold):
    ref = np.asarray(reference, dtype=np.float64)
    kp = _frames(driven)
    d0 = kp[0]
    idx = common_keypoints(d0, ref, conf_threshold)
    T_svd = similarity_fit(d0, ref, indices=idx)
    c = ref[idx, :2].mean(axis=0)
    rho = math.sqrt(((ref[idx, :2] - c) ** 2).sum(axis=1).mean())
    cd = d0[idx, :2].mean(axis=0)
    rho_d = math.sqrt(((d0[idx, :2] - cd) ** 2).sum(axis=1).mean())
    pr = ((ref[:, 2] >= conf_threshold) & (ref[:, 2] > 0)).astype(float)
    pd = ((d0[:, 2] >= conf_threshold) & (d0[:, 2] > 0)).astype(float)
    q = apply(T_svd, kp)
    tok_m = np.column_stack([(ref[:, :2] - c) / rho * pr[:, None],
                             (d0[:, :2] - cd) / rho_d * pd[:, None], pr, pd])
    tok_svd = np.column_stack([(q[0, :, :2] - c) / rho * pd[:, None], pd])
    if target is None:
        tgt = np.zeros(kp.shape[:2] + (2,))
        mask = np.zeros(kp.shape[:2])
    else:
        tk = _frames(target)
        if tk.shape != kp.shape:
            raise ValueError(f"target shape {tk.shape} != driven shape {kp.shape}")
        tgt = tk[..., :2]
        mask = ((q[..., 2] > 0) & (tk[..., 2] > 0)).astype(float)
    return tok_m, tok_svd, q[..., :2], tgt, mask, c, rho, T_svd


def make_batch(pairs, conf_threshold=DEFAULT_CONF_THRESHOLD):
    """Featurize ``(reference, driven, target_or_None)`` triples into one `Batch`."""
    feats = [_featurize(r, d, t, conf_threshold) for r, d, t in pairs]
    t_max = max(f[2].shape[0] for f in feats)

    def pad(a):
        out = np.zeros((t_max,) + a.shape[1:])
        out[:a.shape[0]] = a
        return out

    return Batch(
        tok_m=np.stack([f[0] for f in feats]),
        tok_svd=np.stack([f[1] for f in feats]),
        q=np.stack([pad(f[2]) for f in feats]),
        target=np.stack([pad(f[3]) for f in feats]),
        mask=np.stack([pad(f[4]) for f in feats]),
        center=np.stack([f[5] for f in feats]),
        radius=np.array([f[6] for f in feats]),
        svd=[f[7] for f in feats],
    )


def batch_from_items(items, conf_threshold=DEFAULT_CONF_THRESHOLD):
    return make_batch([(it.reference, it.driven, it.gt_aligned) for it in items], conf_threshold)


# -- network -----------------------------------------------------------------

def _embed(tokens, params, name, cfg):
    x, cache = nnet.linear_forward(tokens, params, name)
    if cfg.use_pos_embed:
        x = x + params["pos"]
    return x, cache


def _network_forward(params, batch, cfg):
    caches = {}
    streams = {}
    for stack, tokens, emb in (("enc_m", batch.tok_m, "tok_m"), ("enc_svd", batch.tok_svd, "tok_svd")):
        x, caches[emb] = _embed(tokens, params, emb, cfg)
        for i in range(cfg.n_encoder):
            x, caches[f"{stack}.{i}"] = nnet.encoder_block_forward(x, params, f"{stack}.{i}", cfg.n_heads)
        x, caches[f"{stack}.ln"] = nnet.layernorm_forward(x, params, f"{stack}.ln")
        streams[stack] = x
    f, ctx = streams["enc_m"], streams["enc_svd"]
    for i in range(cfg.n_fusion):
        f, caches[f"fuse.{i}"] = nnet.cross_block_forward(f, ctx, params, f"fuse.{i}", cfg.n_heads)
    pooled = f.mean(axis=1)
    h, caches["head.ln"] = nnet.layernorm_forward(pooled, params, "head.ln")
    h, caches["head.fc1"] = nnet.linear_forward(h, params, "head.fc1")
    h, caches["head.gelu"] = nnet.gelu_forward(h)
    out, caches["head.fc2"] = nnet.linear_forward(h, params, "head.fc2")
    caches["n_tokens"] = f.shape[1]
    return out, caches


def _network_backward(dout, caches, params, cfg):
    grads = {}
    dh = nnet.linear_backward(dout, caches["head.fc2"], params, "head.fc2", grads)
    dh = nnet.gelu_backward(dh, caches["head.gelu"])
    dh = nnet.linear_backward(dh, caches["head.fc1"], params, "head.fc1", grads)
    dpooled = nnet.layernorm_backward(dh, caches["head.ln"], params, "head.ln", grads)
    n = caches["n_tokens"]
    df = np.repeat(dpooled[:, None, :] / n, n, axis=1)
    dctx = 0.0
    for i in reversed(range(cfg.n_fusion)):
        df, dc = nnet.cross_block_backward(df, caches[f"fuse.{i}"], params, f"fuse.{i}", grads)
        dctx = dctx + dc
    for stack, emb, dx in (("enc_m", "tok_m", df), ("enc_svd", "tok_svd", dctx)):
        dx = nnet.layernorm_backward(dx, caches[f"{stack}.ln"], params, f"{stack}.ln", grads)
        for i in reversed(range(cfg.n_encoder)):
            dx = nnet.encoder_block_backward(dx, caches[f"{stack}.{i}"], params, f"{stack}.{i}", grads)
        if cfg.use_pos_embed:
            nnet._acc(grads, "pos", dx.sum(axis=0))
        nnet.linear_backward(dx, caches[emb], params, emb, grads)
    return grads


def _residual_apply(delta, batch):
    """Residual-transformed points ``(B, T, 18, 2)`` and the rotated offsets."""
    dth, dls, dt = delta[:, 0], delta[:, 1], delta[:, 2:4]
    cos, sin = np.cos(dth), np.sin(dth)
    c = batch.center[:, None, None, :]
    u = batch.q - c
    k = np.exp(dls)[:, None, None]
    cb, sb = cos[:, None, None], sin[:, None, None]
    r = np.stack([k * (cb * u[..., 0] - sb * u[..., 1]),
                  k * (sb * u[..., 0] + cb * u[..., 1])], axis=-1)
    p = c + r + (batch.radius[:, None] * dt)[:, None, None, :]
    return p, r


def batch_loss(params, batch, config=None, with_grad=False):
    """Mean over items of the per-item average keypoint distance to the target."""
    cfg = config or ModelConfig()
    delta, caches = _network_forward(params, batch, cfg)
    p, r = _residual_apply(delta, batch)
    e = p - batch.target
    dist = np.sqrt((e ** 2).sum(axis=-1))
    count = batch.mask.sum(axis=(1, 2))
    if np.any(count == 0):
        raise ValueError("no comparable keypoints")
    per_item = (dist * batch.mask).sum(axis=(1, 2)) / count
    loss = float(per_item.mean())
    if not with_grad:
        return loss, per_item
    B = len(batch)
    safe = np.where(dist > 1e-300, dist, 1.0)
    w = np.where(dist > 1e-300, batch.mask / safe, 0.0) / (count * B)[:, None, None]
    dp = e * w[..., None]
    d_delta = np.zeros_like(delta)
    d_delta[:, 0] = (dp[..., 0] * -r[..., 1] + dp[..., 1] * r[..., 0]).sum(axis=(1, 2))
    d_delta[:, 1] = (dp * r).sum(axis=(1, 2, 3))
    d_delta[:, 2:4] = batch.radius[:, None] * dp.sum(axis=(1, 2))
    return loss, _network_backward(d_delta, caches, params, cfg)


def loss_and_grad(params, batch, config=None):
    return batch_loss(params, batch, config, with_grad=True)


def predict_residuals(params, batch, config=None):
    delta, _ = _network_forward(params, batch, config or ModelConfig())
    return delta


def residual_transform(delta, center, radius):
    dth, dls = float(delta[0]), float(delta[1])
    R = rotation_matrix(dth)
    k = math.exp(dls)
    t = center - k * (R @ center) + radius * np.asarray(delta[2:4], dtype=np.float64)
    return SimTransform(R, k, t)


def transforms_from_batch(params, batch, config=None):
    delta = predict_residuals(params, batch, config)
    return [compose(residual_transform(delta[i], batch.center[i], batch.radius[i]), batch.svd[i])
            for i in range(len(batch))]


def forward(params, reference, driven, config=None, conf_threshold=DEFAULT_CONF_THRESHOLD):
    """Predicted `SimTransform` aligning ``driven`` to ``reference``."""
    batch = make_batch([(reference, driven, None)], conf_threshold)
    return transforms_from_batch(params, batch, config)[0]


def loss(params, item, config=None, conf_threshold=DEFAULT_CONF_THRESHOLD):
    T = forward(params, item.reference, item.driven, config, conf_threshold)
    return dis_metric(apply(T, item.driven), item.gt_aligned)


# -- training ----------------------------------------------------------------

def _eval_loss(params, batch, cfg):
    if len(batch) == 0:
        return float("nan")
    totals = []
    for s in range(0, len(batch), EVAL_CHUNK):
        chunk = batch.take(np.arange(s, min(s + EVAL_CHUNK, len(batch))))
        totals.append(batch_loss(params, chunk, cfg)[1])
    return float(np.concatenate(totals).mean())


def train(items, config=None, model_config=None, splits=None, init=None):
    """Adam over shuffled minibatches; returns ``(best_params, history)``.

    ``history`` holds one ``{"epoch", "train_loss", "val_loss"}`` row per epoch;
    row 0 is the untrained (SVD-only) model. The returned parameters are those
    with the lowest validation loss.
    """
    tc = config or TrainConfig()
    cfg = model_config or ModelConfig()
    if not items:
        raise ValueError("empty corpus")
    splits = splits or split_indices(len(items))
    train_idx, val_idx = list(splits["train"]), list(splits["val"])
    if not train_idx:
        raise ValueError("empty training split")
    if not val_idx:
        val_idx = train_idx
    train_batch = batch_from_items([items[i] for i in train_idx], tc.conf_threshold)
    val_batch = batch_from_items([items[i] for i in val_idx], tc.conf_threshold)
    params = init if init is not None else init_params(tc.seed, cfg)
    state = nnet.AdamState(lr=tc.lr)
    rng = make_rng(tc.seed, 0x5EED)

    history = [{"epoch": 0, "train_loss": _eval_loss(params, train_batch, cfg),
                "val_loss": _eval_loss(params, val_batch, cfg)}]
    best_val, best = history[0]["val_loss"], params
    n = len(train_batch)
    for epoch in range(1, tc.epochs + 1):
        order = rng.permutation(n)
        losses = []
        for s in range(0, n, tc.batch_size):
            mb = train_batch.take(order[s:s + tc.batch_size])
            value, grads = loss_and_grad(params, mb, cfg)
            if not math.isfinite(value):
                raise TrainingDivergedError(
                    f"non-finite loss at epoch {epoch}, batch {s // tc.batch_size}")
            params, state = nnet.adam_step(params, grads, state)
            losses.append(value * len(mb))
        row = {"epoch": epoch, "train_loss": float(sum(losses) / n),
               "val_loss": _eval_loss(params, val_batch, cfg)}
        if not math.isfinite(row["val_loss"]):
            raise TrainingDivergedError(f"non-finite validation loss at epoch {epoch}")
        history.append(row)
        log.info("epoch %d train %.6f val %.6f", epoch, row["train_loss"], row["val_loss"])
        if row["val_loss"] < best_val:
            best_val, best = row["val_loss"], params
    return best, history


def history_csv_rows(history):
    return [[h["epoch"], repr(h["train_loss"]), repr(h["val_loss"])] for h in history]


# -- evaluation --------------------------------------------------------------

METHODS = ("none", "svd", "learned")


def evaluate(params, items, config=None, conf_threshold=DEFAULT_CONF_THRESHOLD):
    """Dis per method (no alignment, SVD-only, learned) and stratum.

    Returns a list of ``{"method", "stratum", "mean_dis", "median_dis", "n"}`` rows,
    stratum ``"all"`` first, then each stratum present in ``items`` in sorted order.
    """
    if not items:
        raise ValueError("empty split")
    cfg = config or ModelConfig()
    per = {m: [] for m in METHODS}
    for s in range(0, len(items), EVAL_CHUNK):
        chunk = items[s:s + EVAL_CHUNK]
        batch = batch_from_items(chunk, conf_threshold)
        learned = transforms_from_batch(params, batch, cfg)
        for it, T_svd, T in zip(chunk, batch.svd, learned):
            per["none"].append(dis_metric(it.driven, it.gt_aligned))
            per["svd"].append(dis_metric(apply(T_svd, it.driven), it.gt_aligned))
            per["learned"].append(dis_metric(apply(T, it.driven), it.gt_aligned))
    strata = np.array([str(it.stratum) for it in items])
    rows = []
    for stratum in ["all"] + sorted(set(strata.tolist())):
        sel = np.ones(len(items), bool) if stratum == "all" else strata == stratum
        for m in METHODS:
            vals = np.asarray(per[m])[sel]
            rows.append({"method": m, "stratum": stratum, "mean_dis": float(vals.mean()),
                         "median_dis": float(np.median(vals)), "n": int(sel.sum())})
    return rows


def metrics_csv_rows(rows):
    return [[r["method"], r["stratum"], repr(r["mean_dis"]), repr(r["median_dis"]), r["n"]]
            for r in rows]


def config_to_dict(cfg):
    return asdict(cfg)
