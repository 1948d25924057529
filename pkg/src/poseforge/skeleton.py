"""Pose-sequence data model, JSON I/O and SVG rendering.

Poses are stored as ``(18, 3)`` float arrays of ``[x, y, conf]`` rows in
OpenPose BODY-18 order; a sequence stacks them into ``(T, 18, 3)``.
A keypoint with ``conf == 0`` is missing and its coordinates are ignored.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

N_KEYPOINTS = 18
DEFAULT_CONF_THRESHOLD = 0.3

KEYPOINT_NAMES = (
    "nose", "neck",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_hip", "r_knee", "r_ankle",
    "l_hip", "l_knee", "l_ankle",
    "r_eye", "l_eye", "r_ear", "l_ear",
)

# (parent, child) bones of the kinematic tree rooted at the neck.
LIMBS = (
    (1, 0), (0, 14), (14, 16), (0, 15), (15, 17),
    (1, 2), (2, 3), (3, 4),
    (1, 5), (5, 6), (6, 7),
    (1, 8), (8, 9), (9, 10),
    (1, 11), (11, 12), (12, 13),
)


class PoseFormatError(ValueError):
    """Raised when a pose document violates the schema."""


def check_pose(pose, name="pose"):
    """Return ``pose`` as a float64 ``(18, 3)`` array, validating it."""
    arr = np.asarray(pose, dtype=np.float64)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise PoseFormatError(f"{name} must have shape (18, 3), got {arr.shape}")
    if arr.shape[0] != N_KEYPOINTS:
        raise PoseFormatError(
            f"{name}: keypoint count {arr.shape[0]} != {N_KEYPOINTS}")
    _check_values(arr, name)
    return arr


def _check_values(arr, name):
    if not np.all(np.isfinite(arr)):
        raise PoseFormatError(f"{name}: non-finite keypoint value")
    conf = arr[..., 2]
    if np.any(conf < 0.0) or np.any(conf > 1.0):
        raise PoseFormatError(f"{name}: conf outside [0, 1]")


@dataclass(eq=False)
class PoseSequence:
    """Ordered frames of 18-keypoint skeletons.

    ``keypoints`` has shape ``(T, 18, 3)``. Coordinates are pixels unless
    ``width == height == 1``, which marks a normalized sequence.
    """

    keypoints: np.ndarray
    fps: float = 30.0
    width: int = 1
    height: int = 1

    def __post_init__(self):
        kp = np.array(self.keypoints, dtype=np.float64)
        if kp.ndim == 2:
            kp = kp[None]
        if kp.ndim != 3 or kp.shape[2] != 3:
            raise PoseFormatError(f"keypoints must have shape (T, 18, 3), got {kp.shape}")
        if kp.shape[0] == 0:
            raise PoseFormatError("frames must be non-empty")
        if kp.shape[1] != N_KEYPOINTS:
            raise PoseFormatError(
                f"keypoint count {kp.shape[1]} != {N_KEYPOINTS}")
        _check_values(kp, "frames")
        if not (self.fps > 0 and math.isfinite(self.fps)):
            raise PoseFormatError(f"fps must be > 0, got {self.fps}")
        if int(self.width) != self.width or int(self.height) != self.height:
            raise PoseFormatError("width and height must be integers")
        if self.width < 1 or self.height < 1:
            raise PoseFormatError("width and height must be >= 1")
        self.keypoints = kp
        self.fps = float(self.fps)
        self.width = int(self.width)
        self.height = int(self.height)

    @property
    def n_frames(self):
        return self.keypoints.shape[0]

    @property
    def frames(self):
        return list(self.keypoints)

    def __len__(self):
        return self.n_frames

    def __getitem__(self, i):
        return self.keypoints[i]

    def __eq__(self, other):
        if not isinstance(other, PoseSequence):
            return NotImplemented
        return (self.fps == other.fps and self.width == other.width
                and self.height == other.height
                and self.keypoints.shape == other.keypoints.shape
                and bool(np.array_equal(self.keypoints, other.keypoints)))

    def copy(self):
        return PoseSequence(self.keypoints.copy(), self.fps, self.width, self.height)


def _round9(v):
    return float(f"{v:.9g}")


def pose_to_list(pose):
    return [[_round9(x), _round9(y), _round9(c)] for x, y, c in np.asarray(pose)]


def pose_from_list(rows, name="pose"):
    if not isinstance(rows, list):
        raise PoseFormatError(f"{name}: keypoints must be a list")
    if len(rows) != N_KEYPOINTS:
        raise PoseFormatError(f"{name}: keypoint count {len(rows)} != {N_KEYPOINTS}")
    out = np.zeros((N_KEYPOINTS, 3))
    for i, kp in enumerate(rows):
        if kp is None:
            continue
        if not isinstance(kp, list) or len(kp) != 3:
            raise PoseFormatError(f"{name}: keypoint {i} must be [x, y, conf] or null")
        for v in kp:
            if isinstance(v, bool) or not isinstance(v, (int, float)):
                raise PoseFormatError(f"{name}: keypoint {i} has a non-numeric entry")
        out[i] = kp
    _check_values(out, name)
    return out


def sequence_to_dict(seq):
    return {
        "fps": _round9(seq.fps),
        "width": seq.width,
        "height": seq.height,
        "frames": [{"keypoints": pose_to_list(f)} for f in seq.keypoints],
    }


def sequence_from_dict(doc):
    if not isinstance(doc, dict):
        raise PoseFormatError("pose document must be a JSON object")
    for key in ("fps", "width", "height", "frames"):
        if key not in doc:
            raise PoseFormatError(f"missing field {key!r}")
    frames = doc["frames"]
    if not isinstance(frames, list) or not frames:
        raise PoseFormatError("frames must be a non-empty list")
    kps = []
    for t, frame in enumerate(frames):
        if not isinstance(frame, dict) or "keypoints" not in frame:
            raise PoseFormatError(f"frame {t} has no keypoints")
        kps.append(pose_from_list(frame["keypoints"], f"frame {t}"))
    fps = doc["fps"]
    if isinstance(fps, bool) or not isinstance(fps, (int, float)):
        raise PoseFormatError("fps must be a number")
    return PoseSequence(np.stack(kps), fps=fps, width=doc["width"], height=doc["height"])


def parse_pose_sequence(data):
    """Parse a UTF-8 JSON pose document (bytes or str) into a `PoseSequence`."""
    if isinstance(data, (bytes, bytearray)):
        try:
            data = data.decode("utf-8")
        except UnicodeDecodeError as exc:
            raise PoseFormatError(f"not UTF-8: {exc}") from exc
    try:
        doc = json.loads(data)
    except json.JSONDecodeError as exc:
        raise PoseFormatError(f"malformed JSON: {exc}") from exc
    return sequence_from_dict(doc)


def serialize_pose_sequence(seq):
    return json.dumps(sequence_to_dict(seq)) + "\n"


def normalize(seq):
    """Divide present coordinates by the frame size; width/height become 1."""
    kp = seq.keypoints.copy()
    present = kp[..., 2] > 0
    kp[..., 0] = np.where(present, kp[..., 0] / seq.width, kp[..., 0])
    kp[..., 1] = np.where(present, kp[..., 1] / seq.height, kp[..., 1])
    return PoseSequence(kp, seq.fps, 1, 1)


def common_keypoints(a, b, conf_threshold=DEFAULT_CONF_THRESHOLD):
    """Indices visible (conf >= threshold) in both poses, ascending."""
    if not 0.0 <= conf_threshold <= 1.0:
        raise ValueError("conf_threshold must lie in [0, 1]")
    a = np.asarray(a)
    b = np.asarray(b)
    mask = (a[:, 2] >= conf_threshold) & (b[:, 2] >= conf_threshold)
    # conf == 0 is always missing, even at threshold 0
    mask &= (a[:, 2] > 0) & (b[:, 2] > 0)
    return np.flatnonzero(mask)


def _fmt(v):
    return f"{v:.3f}"


def _svg_body(pose, w, h, radius, stroke, dx=0.0):
    pose = np.asarray(pose, dtype=np.float64)
    present = pose[:, 2] > 0
    lines = []
    for a, b in LIMBS:
        if present[a] and present[b]:
            lines.append(
                f'<line x1="{_fmt(pose[a, 0] * w + dx)}" y1="{_fmt(pose[a, 1] * h)}" '
                f'x2="{_fmt(pose[b, 0] * w + dx)}" y2="{_fmt(pose[b, 1] * h)}" '
                f'stroke="black" stroke-width="{stroke}"/>')
    for i in np.flatnonzero(present):
        lines.append(
            f'<circle cx="{_fmt(pose[i, 0] * w + dx)}" cy="{_fmt(pose[i, 1] * h)}" '
            f'r="{radius}" fill="red"/>')
    return lines


def _svg_doc(total_w, h, body):
    head = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{total_w}" height="{h}" '
        f'viewBox="0 0 {total_w} {h}">',
        f'<rect x="0" y="0" width="{total_w}" height="{h}" fill="white"/>',
    ]
    return "\n".join(head + body + ["</svg>"]) + "\n"


def render_svg(pose, canvas=(256, 256), radius=3.0, stroke=2.0):
    """Render a normalized pose as a deterministic SVG document."""
    w, h = canvas
    return _svg_doc(w, h, _svg_body(pose, w, h, radius, stroke))


def render_strip_svg(poses, canvas=(256, 256), radius=3.0, stroke=2.0):
    """Render normalized poses side by side, one ``canvas`` cell per frame."""
    w, h = canvas
    poses = list(poses)
    if not poses:
        raise ValueError("no frames to render")
    body = []
    for k, pose in enumerate(poses):
        body += _svg_body(pose, w, h, radius, stroke, dx=k * w)
    return _svg_doc(w * len(poses), h, body)
