"""Seeded synthesis of misaligned (reference, driven) pose corpora.

Every item draws from its own PCG64 stream seeded by ``SeedSequence([seed, index])``
so items can be generated in any order and still agree bit-for-bit.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ._io import atomic_write_text
from .skeleton import (LIMBS, N_KEYPOINTS, PoseSequence, normalize, pose_from_list,
                       pose_to_list, sequence_from_dict, sequence_to_dict)
from .similarity import SimTransform, apply, invert

KEYPOINT_FLOOR = 0.30
MAX_DROPOUT_DRAWS = 100
CORPUS_FORMAT = "poseforge-corpus-v1"


class KeypointFloorError(ValueError):
    def __init__(self, detail=""):
        msg = "keypoint floor violated"
        super().__init__(f"{msg}: {detail}" if detail else msg)


def make_rng(seed, *stream):
    """Portable PCG64 generator for ``(seed, *stream)``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), *map(int, stream)])))


@dataclass
class PerturbSpec:
    theta_range: tuple = (-math.pi / 4, math.pi / 4)
    scale_range: tuple = (0.5, 2.0)
    translate_range: tuple = (-0.25, 0.25)
    keypoint_noise_sigma: float = 0.01
    dropout_prob: float = 0.1
    limb_scale_jitter: float = 0.15
    # fraction of items that receive limb jitter; the rest form the noise-only stratum
    jitter_prob: float = 1.0

    def __post_init__(self):
        for name in ("theta_range", "scale_range", "translate_range"):
            lo, hi = getattr(self, name)
            if not lo <= hi:
                raise ValueError(f"{name}: lo > hi")
            setattr(self, name, (float(lo), float(hi)))
        if self.scale_range[0] <= 0:
            raise ValueError("scale_range lower bound must be > 0")
        if self.keypoint_noise_sigma < 0:
            raise ValueError("keypoint_noise_sigma must be >= 0")
        if not 0.0 <= self.dropout_prob <= 1.0:
            raise ValueError("dropout_prob must lie in [0, 1]")
        if self.limb_scale_jitter < 0:
            raise ValueError("limb_scale_jitter must be >= 0")
        if not 0.0 <= self.jitter_prob <= 1.0:
            raise ValueError("jitter_prob must lie in [0, 1]")

    @classmethod
    def identity(cls):
        """No-op perturbation."""
        return cls((0.0, 0.0), (1.0, 1.0), (0.0, 0.0), 0.0, 0.0, 0.0)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, doc):
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in doc.items()})


@dataclass(eq=False)
class CorpusItem:
    reference: np.ndarray
    driven: PoseSequence
    gt_transform: SimTransform
    gt_aligned: PoseSequence
    stratum: str = "limb-jitter"

    def to_dict(self):
        return {
            "stratum": self.stratum,
            "reference": {"keypoints": pose_to_list(self.reference)},
            "driven": sequence_to_dict(self.driven),
            "gt_transform": self.gt_transform.to_dict(),
            "gt_aligned": sequence_to_dict(self.gt_aligned),
        }

    @classmethod
    def from_dict(cls, doc):
        return cls(
            reference=pose_from_list(doc["reference"]["keypoints"], "reference"),
            driven=sequence_from_dict(doc["driven"]),
            gt_transform=SimTransform.from_dict(doc["gt_transform"]),
            gt_aligned=sequence_from_dict(doc["gt_aligned"]),
            stratum=doc.get("stratum", "limb-jitter"),
        )

    def digest(self):
        h = hashlib.sha256()
        h.update(self.stratum.encode())
        T = self.gt_transform
        for arr in (self.reference, self.driven.keypoints, self.gt_aligned.keypoints,
                    T.rotation, np.array([T.scale]), T.translation):
            h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
        return h.hexdigest()


def random_sim_transform(spec, rng):
    theta = rng.uniform(*spec.theta_range)
    scale = rng.uniform(*spec.scale_range)
    t = rng.uniform(*spec.translate_range, size=2)
    return SimTransform.from_params(theta, scale, t)


def limb_jitter(keypoints, multipliers):
    """Rescale every bone by its multiplier, walking the tree out from the neck.

    ``keypoints`` is ``(T, 18, 3)``; ``multipliers`` has one entry per `LIMBS` bone.
    """
    src = np.asarray(keypoints, dtype=np.float64)
    out = src.copy()
    present = src[..., 2] > 0
    for (parent, child), m in zip(LIMBS, multipliers):
        both = present[:, parent] & present[:, child]
        bone = src[:, child, :2] - src[:, parent, :2]
        moved = out[:, parent, :2] + m * bone
        # a child whose bone cannot be measured just follows its parent
        follow = src[:, child, :2] + (out[:, parent, :2] - src[:, parent, :2])
        out[:, child, :2] = np.where(both[:, None], moved,
                                     np.where(present[:, child, None], follow, src[:, child, :2]))
    return out


def perturb_sequence(seq, spec, rng):
    """Build one corpus item from a normalized sequence.

    The reference is frame 0 of ``seq``; the target ``gt_aligned`` is ``seq`` with
    limb jitter; the driven sequence is that target moved by the inverse of the
    ground-truth transform, plus noise and keypoint dropout.
    """
    if seq.width != 1 or seq.height != 1:
        raise ValueError("perturb_sequence expects a normalized sequence")
    src = seq.keypoints
    gt = random_sim_transform(spec, rng)
    jittered = src
    stratum = "noise-only"
    if spec.limb_scale_jitter > 0 and rng.random() < spec.jitter_prob:
        j = spec.limb_scale_jitter
        mult = rng.uniform(1.0 - j, 1.0 + j, size=len(LIMBS))
        jittered = limb_jitter(src, mult)
        stratum = "limb-jitter"
    driven = apply(invert(gt), jittered)
    present = driven[..., 2] > 0
    if spec.keypoint_noise_sigma > 0:
        noise = rng.normal(0.0, spec.keypoint_noise_sigma, size=driven[..., :2].shape)
        driven[..., :2] += np.where(present[..., None], noise, 0.0)
    floor = math.ceil(KEYPOINT_FLOOR * N_KEYPOINTS - 1e-9)
    if spec.dropout_prob > 0:
        for _ in range(MAX_DROPOUT_DRAWS):
            keep = rng.random(present.shape) >= spec.dropout_prob
            kept = present & keep
            if np.all(kept.sum(axis=1) >= floor):
                break
        else:
            raise KeypointFloorError(
                f"no dropout draw kept {floor} keypoints per frame in {MAX_DROPOUT_DRAWS} tries")
        driven[..., 2] = np.where(kept, driven[..., 2], 0.0)
    elif np.any(present.sum(axis=1) < floor):
        raise KeypointFloorError("source sequence is below the floor")
    return CorpusItem(
        reference=src[0].copy(),
        driven=PoseSequence(driven, seq.fps, 1, 1),
        gt_transform=gt,
        gt_aligned=PoseSequence(jittered.copy(), seq.fps, 1, 1),
        stratum=stratum,
    )


def procedural_walk(rng, n_frames=8, fps=30.0):
    """A parametric walking skeleton in normalized image coordinates."""
    height = rng.uniform(0.35, 0.55)
    cx, cy = 0.5 + rng.uniform(-0.08, 0.08, size=2)
    facing = 1.0 if rng.random() < 0.5 else -1.0
    side = rng.uniform(0.3, 1.0) * facing  # foreshortening of sagittal swing
    width = rng.uniform(0.7, 1.0)  # frontal width factor
    phase0 = rng.uniform(0, 2 * math.pi)
    cadence = rng.uniform(0.08, 0.2) * 2 * math.pi  # radians per frame
    arm_amp = rng.uniform(0.2, 0.6)
    leg_amp = rng.uniform(0.2, 0.5)
    u_arm, l_arm = height * rng.uniform(0.17, 0.2), height * rng.uniform(0.14, 0.17)
    thigh, shin = height * rng.uniform(0.23, 0.26), height * rng.uniform(0.22, 0.25)
    torso = height * rng.uniform(0.28, 0.32)
    sh_w, hip_w = height * rng.uniform(0.09, 0.12) * width, height * rng.uniform(0.05, 0.07) * width

    def limb(origin, angle, length):
        return origin + length * np.array([side * math.sin(angle), math.cos(angle)])

    frames = np.zeros((n_frames, N_KEYPOINTS, 3))
    for f in range(n_frames):
        ph = phase0 + cadence * f
        neck = np.array([cx, cy - 0.25 * height + 0.01 * height * math.cos(2 * ph)])
        kp = {1: neck}
        kp[0] = neck + height * np.array([0.03 * facing, -0.11])
        kp[14] = kp[0] + height * np.array([-0.025 * width + 0.01 * facing, -0.025])
        kp[15] = kp[0] + height * np.array([0.025 * width + 0.01 * facing, -0.025])
        kp[16] = kp[14] + height * np.array([-0.035 * width - 0.01 * facing, 0.01])
        kp[17] = kp[15] + height * np.array([0.035 * width - 0.01 * facing, 0.01])
        swing = math.sin(ph)
        for sign, (s, e, w), (h, k, a) in ((-1, (2, 3, 4), (8, 9, 10)), (1, (5, 6, 7), (11, 12, 13))):
            arm = sign * arm_amp * swing
            kp[s] = neck + np.array([sign * sh_w, 0.0])
            kp[e] = limb(kp[s], arm, u_arm)
            kp[w] = limb(kp[e], arm + 0.3 + 0.3 * max(0.0, -sign * swing), l_arm)
            leg = -sign * leg_amp * swing
            kp[h] = neck + np.array([sign * hip_w, torso])
            kp[k] = limb(kp[h], leg, thigh)
            kp[a] = limb(kp[k], leg - 0.5 * max(0.0, sign * swing), shin)
        for i, p in kp.items():
            frames[f, i] = (p[0], p[1], 1.0)
    return PoseSequence(frames, fps=fps, width=1, height=1)


def split_indices(n_items):
    """80/10/10 train/val/test split by item index."""
    n_train = int(0.8 * n_items)
    n_val = int(0.1 * n_items)
    idx = list(range(n_items))
    return {"train": idx[:n_train], "val": idx[n_train:n_train + n_val],
            "test": idx[n_train + n_val:]}


def gen_item(index, source, spec, seed, n_frames=8):
    rng = make_rng(seed, index)
    if source:
        seq = source[index % len(source)]
        if seq.width != 1 or seq.height != 1:
            seq = normalize(seq)
    else:
        seq = procedural_walk(rng, n_frames=n_frames)
    return perturb_sequence(seq, spec, rng)


def gen_corpus(source, spec, n_items, seed, procedural=True, n_frames=8):
    """Generate ``n_items`` items and their manifest.

    With an empty ``source`` the built-in walking generator supplies one fresh
    sequence per item, unless ``procedural`` is False.
    """
    if n_items < 1:
        raise ValueError("n_items must be >= 1")
    source = list(source or [])
    if not source and not procedural:
        raise ValueError("empty source with procedural generation disabled")
    items = [gen_item(i, source, spec, seed, n_frames) for i in range(n_items)]
    digests = [it.digest() for it in items]
    manifest = {
        "format": CORPUS_FORMAT,
        "seed": int(seed),
        "n_items": n_items,
        "n_frames": n_frames if not source else None,
        "source": "procedural-walk" if not source else f"{len(source)} sequences",
        "spec": spec.to_dict(),
        "spec_note": "perturbation ranges are declared defaults; uniform draws",
        "rng": "PCG64 seeded by SeedSequence([seed, item_index])",
        "splits": {k: len(v) for k, v in split_indices(n_items).items()},
        "items": [{"index": i, "digest": d, "stratum": it.stratum}
                  for i, (d, it) in enumerate(zip(digests, items))],
    }
    manifest["digest"] = hashlib.sha256(
        json.dumps({"seed": int(seed), "spec": spec.to_dict(), "items": digests},
                   sort_keys=True).encode()).hexdigest()
    return items, manifest


def write_corpus(directory, items, manifest, extra=None):
    directory = Path(directory)
    for i, item in enumerate(items):
        atomic_write_text(directory / "items" / f"{i}.json", json.dumps(item.to_dict()) + "\n")
    doc = dict(manifest)
    if extra:
        doc.update(extra)
    atomic_write_text(directory / "manifest.json", json.dumps(doc, indent=2) + "\n")


def load_corpus(directory):
    """Read a corpus directory; returns ``(items, manifest)``."""
    directory = Path(directory)
    manifest_path = directory / "manifest.json"
    if not manifest_path.is_file():
        raise FileNotFoundError(f"no manifest.json in {directory}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    items = []
    for i in range(manifest["n_items"]):
        doc = json.loads((directory / "items" / f"{i}.json").read_text(encoding="utf-8"))
        items.append(CorpusItem.from_dict(doc))
    return items, manifest
