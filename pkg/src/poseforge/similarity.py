"""Closed-form SVD similarity alignment of 2-D point sets.

Point sets are ``(2, M)`` arrays (one column per point). Functions that
accept poses take ``(18, 3)`` ``[x, y, conf]`` arrays, or stacks of them,
and leave missing keypoints (``conf == 0``) untouched.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .skeleton import DEFAULT_CONF_THRESHOLD, N_KEYPOINTS, PoseSequence, common_keypoints

DEGENERATE_TOL = 1e-12


class DegenerateConfigurationError(ValueError):
    """The correspondences do not determine a similarity transform."""

    def __init__(self, detail=""):
        msg = "degenerate configuration"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def rotation_matrix(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass(frozen=True, eq=False)
class SimTransform:
    """``p -> scale * rotation @ p + translation``."""

    rotation: np.ndarray
    scale: float
    translation: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(2, 2)
        t = np.asarray(self.translation, dtype=np.float64).reshape(2)
        if not self.scale > 0:
            raise ValueError(f"scale must be > 0, got {self.scale}")
        if np.abs(R.T @ R - np.eye(2)).max() > 1e-9 or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be a proper rotation matrix")
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", float(self.scale))

    @classmethod
    def identity(cls):
        return cls(np.eye(2), 1.0, np.zeros(2))

    @classmethod
    def from_params(cls, theta, scale, translation):
        return cls(rotation_matrix(theta), scale, translation)

    @property
    def theta(self):
        return math.atan2(self.rotation[1, 0], self.rotation[0, 0])

    def matrix(self):
        """Homogeneous 3x3 matrix."""
        M = np.eye(3)
        M[:2, :2] = self.scale * self.rotation
        M[:2, 2] = self.translation
        return M

    def allclose(self, other, atol=1e-9):
        return (np.allclose(self.rotation, other.rotation, rtol=0, atol=atol)
                and abs(self.scale - other.scale) <= atol
                and np.allclose(self.translation, other.translation, rtol=0, atol=atol))

    def to_dict(self):
        return {"theta": self.theta, "scale": self.scale,
                "t": [float(self.translation[0]), float(self.translation[1])]}

    @classmethod
    def from_dict(cls, doc):
        try:
            return cls.from_params(float(doc["theta"]), float(doc["scale"]),
                                   [float(v) for v in doc["t"]])
        except (KeyError, TypeError) as exc:
            raise ValueError(f"invalid SimTransform document: {exc}") from exc


@dataclass(frozen=True)
class CenteredSet:
    points: np.ndarray
    centroid: np.ndarray


def _as_pointset(points, name="points"):
    P = np.asarray(points, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] != 2:
        raise ValueError(f"{name} must have shape (2, M), got {P.shape}")
    return P


def _is_pose_like(arr):
    return arr.ndim >= 2 and arr.shape[-1] == 3 and arr.shape[-2] == N_KEYPOINTS


def center(points, weights=None):
    """Subtract the (optionally weighted) column mean."""
    P = _as_pointset(points)
    if P.shape[1] == 0:
        raise ValueError("cannot center an empty point set")
    if weights is None:
        c = P.mean(axis=1)
    else:
        w = np.asarray(weights, dtype=np.float64)
        c = (P * w).sum(axis=1) / w.sum()
    return CenteredSet(P - c[:, None], c)


def covariance(Xd, Xr, weights=None):
    """``K = sum_i w_i xd_i xr_i^T`` for index-aligned centered sets."""
    D = Xd.points if isinstance(Xd, CenteredSet) else _as_pointset(Xd, "Xd")
    R = Xr.points if isinstance(Xr, CenteredSet) else _as_pointset(Xr, "Xr")
    if D.shape != R.shape:
        raise ValueError(f"point count mismatch: {D.shape[1]} vs {R.shape[1]}")
    if weights is not None:
        D = D * np.asarray(weights, dtype=np.float64)
    return D @ R.T


def svd2x2(K):
    """Closed-form SVD of a real 2x2 matrix.

    Returns ``(U, s, Vt)`` with ``K = U @ diag(s) @ Vt``, ``s[0] >= s[1] >= 0``.
    """
    K = np.asarray(K, dtype=np.float64)
    a, b, c, d = K[0, 0], K[0, 1], K[1, 0], K[1, 1]
    e, f = (a + d) / 2, (a - d) / 2
    g, h = (c + b) / 2, (c - b) / 2
    q, r = math.hypot(e, h), math.hypot(f, g)
    sx, sy = q + r, q - r
    a1, a2 = math.atan2(g, f), math.atan2(h, e)
    U = rotation_matrix((a2 + a1) / 2)
    Vt = rotation_matrix((a2 - a1) / 2)
    if sy < 0:
        sy = -sy
        Vt = np.array([[1.0, 0.0], [0.0, -1.0]]) @ Vt
    return U, np.array([sx, sy]), Vt


def _kabsch(K):
    U, s, Vt = svd2x2(K)
    if s[0] < DEGENERATE_TOL:
        raise DegenerateConfigurationError("vanishing covariance")
    V = Vt.T
    d = 1.0 if np.linalg.det(V @ U.T) >= 0 else -1.0
    R = V @ np.diag([1.0, d]) @ U.T
    return R, s, d


def kabsch_rotation(K):
    """Proper rotation maximizing ``trace(R @ K)`` (reflection-corrected)."""
    return _kabsch(K)[0]


def _select(points, indices):
    arr = np.asarray(points, dtype=np.float64)
    if _is_pose_like(arr):
        if arr.ndim != 2:
            raise ValueError("expected a single pose; use fit_sequence for sequences")
        return arr[np.asarray(indices, dtype=int), :2].T
    arr = _as_pointset(arr)
    if indices is None:
        return arr
    return arr[:, np.asarray(indices, dtype=int)]


def similarity_fit(Pd, Pr, indices=None, weights=None,
                   conf_threshold=DEFAULT_CONF_THRESHOLD):
    """Least-squares similarity transform mapping driven ``Pd`` onto ``Pr``.

    ``Pd``/``Pr`` are ``(2, M)`` point sets or ``(18, 3)`` poses. For poses the
    default index set is the keypoints visible in both.
    """
    Pd_arr, Pr_arr = np.asarray(Pd), np.asarray(Pr)
    if indices is None and (_is_pose_like(Pd_arr) or _is_pose_like(Pr_arr)):
        if not (_is_pose_like(Pd_arr) and _is_pose_like(Pr_arr)):
            raise ValueError("both inputs must be poses, or pass explicit indices")
        indices = common_keypoints(Pd_arr, Pr_arr, conf_threshold)
    D = _select(Pd_arr, indices)
    R_ = _select(Pr_arr, indices)
    if D.shape != R_.shape:
        raise ValueError(f"point count mismatch: {D.shape} vs {R_.shape}")
    if D.shape[1] < 2:
        raise DegenerateConfigurationError(
            f"fewer than 2 usable correspondences ({D.shape[1]})")
    return _fit_pointsets(D, R_, weights)


def _fit_pointsets(D, Rp, weights=None):
    Xd = center(D, weights)
    Xr = center(Rp, weights)
    w = np.ones(D.shape[1]) if weights is None else np.asarray(weights, dtype=np.float64)
    dispersion = float((w * (Xd.points ** 2).sum(axis=0)).sum())
    if dispersion < DEGENERATE_TOL:
        raise DegenerateConfigurationError("coincident driven points")
    K = covariance(Xd, Xr, w)
    R, _, _ = _kabsch(K)
    S = float(np.trace(R @ K)) / dispersion
    if not S > DEGENERATE_TOL:
        raise DegenerateConfigurationError("non-positive scale")
    t = Xr.centroid - S * (R @ Xd.centroid)
    return SimTransform(R, S, t)


def fit_sequence(reference, driven, mode="first", conf_threshold=DEFAULT_CONF_THRESHOLD):
    """One transform for a whole driven sequence.

    ``mode="first"`` fits frame 0 against the reference; ``mode="stack"``
    repeats the reference over every frame and weights each correspondence
    by the product of the two confidences.
    """
    kp = driven.keypoints if isinstance(driven, PoseSequence) else np.asarray(driven)
    if kp.ndim == 2:
        kp = kp[None]
    ref = np.asarray(reference, dtype=np.float64)
    if mode == "first":
        return similarity_fit(kp[0], ref, conf_threshold=conf_threshold)
    if mode != "stack":
        raise ValueError(f"unknown mode {mode!r}")
    D, Rp, W = [], [], []
    for frame in kp:
        idx = common_keypoints(frame, ref, conf_threshold)
        D.append(frame[idx, :2].T)
        Rp.append(ref[idx, :2].T)
        W.append(frame[idx, 2] * ref[idx, 2])
    D, Rp, W = np.hstack(D), np.hstack(Rp), np.concatenate(W)
    if D.shape[1] < 2:
        raise DegenerateConfigurationError("fewer than 2 usable correspondences")
    return _fit_pointsets(D, Rp, W)


def apply(T, points):
    """Apply ``T`` to a point set, pose array (``(..., 18, 3)``) or `PoseSequence`."""
    if isinstance(points, PoseSequence):
        return PoseSequence(apply(T, points.keypoints), points.fps, points.width, points.height)
    arr = np.asarray(points, dtype=np.float64)
    A = T.scale * T.rotation
    if _is_pose_like(arr):
        out = arr.copy()
        xy = arr[..., :2] @ A.T + T.translation
        present = arr[..., 2:3] > 0
        out[..., :2] = np.where(present, xy, arr[..., :2])
        return out
    arr = _as_pointset(arr)
    return A @ arr + T.translation[:, None]


def compose(A, B):
    """Transform equivalent to applying ``B`` first, then ``A``."""
    return SimTransform(A.rotation @ B.rotation, A.scale * B.scale,
                        A.scale * (A.rotation @ B.translation) + A.translation)


def invert(T):
    Rt = T.rotation.T
    return SimTransform(Rt, 1.0 / T.scale, -(Rt @ T.translation) / T.scale)


def dis_metric(P, Pgt):
    """Mean Euclidean distance over keypoints present in both inputs."""
    if isinstance(P, PoseSequence):
        P = P.keypoints
    if isinstance(Pgt, PoseSequence):
        Pgt = Pgt.keypoints
    P = np.asarray(P, dtype=np.float64)
    Pgt = np.asarray(Pgt, dtype=np.float64)
    if P.shape != Pgt.shape:
        raise ValueError(f"shape mismatch: {P.shape} vs {Pgt.shape}")
    if _is_pose_like(P):
        mask = (P[..., 2] > 0) & (Pgt[..., 2] > 0)
        if not mask.any():
            raise ValueError("no comparable keypoints")
        d = np.linalg.norm(P[..., :2] - Pgt[..., :2], axis=-1)
        return float(d[mask].mean())
    P = _as_pointset(P)
    if P.shape[1] == 0:
        raise ValueError("no comparable keypoints")
    return float(np.linalg.norm(P - Pgt, axis=0).mean())
