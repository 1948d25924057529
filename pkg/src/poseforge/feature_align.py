"""Distribution alignment between feature tensors and the face-masked loss."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

SIGMA_EPS = 1e-8


@dataclass(frozen=True)
class FeatureStats:
    mean: float
    std: float


def stats(z):
    """Population mean and standard deviation over every element."""
    z = np.asarray(z, dtype=np.float64)
    if z.size == 0:
        raise ValueError("empty tensor")
    return FeatureStats(float(z.mean()), float(z.std()))


def _check_same_shape(a, b):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")


def _moments(z, channel_axis):
    if channel_axis is None:
        return z.mean(), z.std()
    axes = tuple(i for i in range(z.ndim) if i != channel_axis % z.ndim)
    return z.mean(axis=axes, keepdims=True), z.std(axis=axes, keepdims=True)


def adain_align(z_face, z_img, channel_axis=None):
    """Re-standardize ``z_face`` to the statistics of ``z_img`` and add them.

    Returns ``(z_face_aligned, z_face_aligned + z_img)``. Statistics are global
    unless ``channel_axis`` is given. Where ``z_face`` is constant (std <= 1e-8)
    the aligned tensor is ``z_img``'s mean.
    """
    z_face = np.asarray(z_face, dtype=np.float64)
    z_img = np.asarray(z_img, dtype=np.float64)
    _check_same_shape(z_face, z_img)
    if z_face.size == 0:
        raise ValueError("empty tensor")
    mu_f, sd_f = _moments(z_face, channel_axis)
    mu_i, sd_i = _moments(z_img, channel_axis)
    flat = sd_f <= SIGMA_EPS
    scale = np.where(flat, 0.0, sd_i / np.where(flat, 1.0, sd_f))
    aligned = (z_face - mu_f) * scale + mu_i
    aligned = np.where(flat, np.broadcast_to(mu_i, aligned.shape), aligned)
    return aligned, aligned + z_img


def masked_recon_loss(z_gt, z_eps, mask):
    """``mean(((z_gt - z_eps) * (1 + mask)) ** 2)``."""
    z_gt = np.asarray(z_gt, dtype=np.float64)
    z_eps = np.asarray(z_eps, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.float64)
    _check_same_shape(z_gt, z_eps)
    _check_same_shape(z_gt, mask)
    r = (z_gt - z_eps) * (1.0 + mask)
    return float((r * r).mean())
