"""Skeleton layouts, person-centric normalization and the evaluation alignment.

Skeletons are plain ``numpy`` arrays of shape ``(J, 3)`` (or ``(..., J, 3)``
for stacks of frames), in centimeters. The person-centric frame has axis 0
pointing in the horizontal facing direction, axis 1 along the horizontal
shoulder line (towards the left shoulder) and axis 2 vertical (up).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Any, Sequence

import numpy as np

from .errors import DegenerateShoulders, LayoutMismatch, NonFiniteInput

REFERENCE_SHOULDER_CM = 30.0
_SHOULDER_EPS = 1e-6


@dataclass(frozen=True)
class JointLayout:
    """Joint naming plus the index sets the pipeline relies on."""

    joint_names: tuple[str, ...]
    upper_idx: tuple[int, ...]
    lower_idx: tuple[int, ...]
    left_shoulder: int
    right_shoulder: int
    chest: int
    hip_center: int
    name: str = field(default="custom", compare=False)

    def __post_init__(self) -> None:
        J = len(self.joint_names)
        upper, lower = set(self.upper_idx), set(self.lower_idx)
        if len(upper) != len(self.upper_idx) or len(lower) != len(self.lower_idx):
            raise LayoutMismatch("duplicate indices in upper/lower partition")
        if upper & lower:
            raise LayoutMismatch(f"joints {sorted(upper & lower)} are both upper and lower")
        if upper | lower != set(range(J)):
            raise LayoutMismatch("upper_idx and lower_idx must cover every joint")
        for attr in ("left_shoulder", "right_shoulder", "chest", "hip_center"):
            idx = getattr(self, attr)
            if not 0 <= idx < J:
                raise LayoutMismatch(f"{attr}={idx} out of range for J={J}")
        if self.left_shoulder == self.right_shoulder:
            raise LayoutMismatch("left and right shoulder must differ")

    @property
    def J(self) -> int:
        return len(self.joint_names)

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "joint_names": list(self.joint_names),
            "upper_idx": list(self.upper_idx),
            "lower_idx": list(self.lower_idx),
            "left_shoulder": self.left_shoulder,
            "right_shoulder": self.right_shoulder,
            "chest": self.chest,
            "hip_center": self.hip_center,
        }

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> JointLayout:
        return cls(
            joint_names=tuple(d["joint_names"]),
            upper_idx=tuple(int(i) for i in d["upper_idx"]),
            lower_idx=tuple(int(i) for i in d["lower_idx"]),
            left_shoulder=int(d["left_shoulder"]),
            right_shoulder=int(d["right_shoulder"]),
            chest=int(d["chest"]),
            hip_center=int(d["hip_center"]),
            name=d.get("name", "custom"),
        )

    def hash(self) -> str:
        """Stable digest used to tie codebooks to datasets.

        The display name is excluded, only structure counts.
        """
        d = self.to_dict()
        d.pop("name")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":")).encode()
        return hashlib.sha256(blob).hexdigest()


_KINECT_NAMES = (
    "spine_base", "spine_mid", "neck", "head",
    "shoulder_left", "elbow_left", "wrist_left", "hand_left",
    "shoulder_right", "elbow_right", "wrist_right", "hand_right",
    "hip_left", "knee_left", "ankle_left", "foot_left",
    "hip_right", "knee_right", "ankle_right", "foot_right",
    "spine_shoulder", "handtip_left", "thumb_left", "handtip_right", "thumb_right",
)

KINECT_25 = JointLayout(
    joint_names=_KINECT_NAMES,
    upper_idx=(1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 20, 21, 22, 23, 24),
    lower_idx=(0, 12, 13, 14, 15, 16, 17, 18, 19),
    left_shoulder=4,
    right_shoulder=8,
    chest=1,
    hip_center=0,
    name="kinect25",
)

_PANOPTIC_NAMES = (
    "neck", "nose", "body_center",
    "shoulder_left", "elbow_left", "wrist_left", "hip_left", "knee_left", "ankle_left",
    "shoulder_right", "elbow_right", "wrist_right", "hip_right", "knee_right", "ankle_right",
    "eye_left", "ear_left", "eye_right", "ear_right",
)

PANOPTIC_19 = JointLayout(
    joint_names=_PANOPTIC_NAMES,
    upper_idx=(0, 1, 3, 4, 5, 9, 10, 11, 15, 16, 17, 18),
    lower_idx=(2, 6, 7, 8, 12, 13, 14),
    left_shoulder=3,
    right_shoulder=9,
    chest=0,
    hip_center=2,
    name="panoptic19",
)


@dataclass(frozen=True)
class AlignmentFrame:
    """Similarity transform ``p -> scale * rotation @ p + translation``."""

    rotation: np.ndarray
    translation: np.ndarray
    scale: float

    def apply(self, joints: np.ndarray) -> np.ndarray:
        return self.scale * joints @ self.rotation.T + self.translation


def _check_joints(joints: np.ndarray, layout: JointLayout) -> np.ndarray:
    joints = np.asarray(joints, dtype=np.float64)
    if joints.ndim < 2 or joints.shape[-2:] != (layout.J, 3):
        raise LayoutMismatch(f"expected (..., {layout.J}, 3) joints, got {joints.shape}")
    if not np.all(np.isfinite(joints)):
        raise NonFiniteInput("skeleton contains NaN or Inf")
    return joints


def _shoulder_vector(joints: np.ndarray, layout: JointLayout) -> np.ndarray:
    sh = joints[..., layout.left_shoulder, :] - joints[..., layout.right_shoulder, :]
    width = np.linalg.norm(sh, axis=-1)
    if np.any(width <= _SHOULDER_EPS):
        raise DegenerateShoulders("shoulder joints coincide")
    return sh


def person_centric_frame(
    joints: np.ndarray,
    layout: JointLayout,
    up: Sequence[float] = (0.0, 0.0, 1.0),
    reference_width: float = REFERENCE_SHOULDER_CM,
) -> AlignmentFrame:
    """World-to-person transform for a single ``(J, 3)`` skeleton."""
    joints = _check_joints(joints, layout)
    if joints.ndim != 2:
        raise LayoutMismatch("person_centric_frame takes a single skeleton")
    rot, scale = _person_rotation_scale(joints[None], layout, up, reference_width)
    rot, scale = rot[0], float(scale[0])
    chest = joints[layout.chest]
    return AlignmentFrame(rotation=rot, translation=-scale * rot @ chest, scale=scale)


def _person_rotation_scale(joints, layout, up, reference_width):
    sh = _shoulder_vector(joints, layout)
    up = np.asarray(up, dtype=np.float64)
    up = np.broadcast_to(up / np.linalg.norm(up), sh.shape).copy()
    down = joints[..., layout.hip_center, :] - joints[..., layout.chest, :]
    flip = np.einsum("...i,...i->...", down, up) > 0
    up[flip] *= -1.0
    lateral = sh - np.einsum("...i,...i->...", sh, up)[..., None] * up
    lat_norm = np.linalg.norm(lateral, axis=-1)
    if np.any(lat_norm <= _SHOULDER_EPS):
        raise DegenerateShoulders("shoulder line is vertical; facing direction undefined")
    lateral = lateral / lat_norm[..., None]
    facing = np.cross(lateral, up)
    rot = np.stack([facing, lateral, up], axis=-2)
    scale = reference_width / np.linalg.norm(sh, axis=-1)
    return rot, scale


def normalize_person_centric(
    raw: np.ndarray,
    layout: JointLayout,
    up: Sequence[float] = (0.0, 0.0, 1.0),
    reference_width: float = REFERENCE_SHOULDER_CM,
) -> np.ndarray:
    """Map world-frame skeletons into the person-centric frame.

    Origin at the chest joint, axes (facing, shoulder line, vertical), and
    scaled so the shoulder width equals ``reference_width``. ``up`` is the
    world vertical; its sign is flipped per skeleton if needed so that the
    hip center lies below the chest.

    Accepts ``(J, 3)`` or ``(..., J, 3)``.
    """
    joints = _check_joints(raw, layout)
    rot, scale = _person_rotation_scale(joints, layout, up, reference_width)
    centered = joints - joints[..., layout.chest : layout.chest + 1, :]
    return scale[..., None, None] * np.einsum("...ij,...kj->...ki", rot, centered)


def eval_alignment(s: np.ndarray, layout: JointLayout,
                   reference_width: float = REFERENCE_SHOULDER_CM) -> AlignmentFrame:
    """The similarity transform applied by :func:`align_for_eval`."""
    joints = _check_joints(s, layout)
    if joints.ndim != 2:
        raise LayoutMismatch("eval_alignment takes a single skeleton")
    rot, scale, center = _eval_rotation(joints[None], layout, reference_width)
    rot, scale = rot[0], float(scale[0])
    return AlignmentFrame(rotation=rot, translation=-scale * rot @ center[0], scale=scale)


def _eval_rotation(joints, layout, reference_width):
    sh = _shoulder_vector(joints, layout)
    r = np.hypot(sh[..., 0], sh[..., 1])
    if np.any(r <= _SHOULDER_EPS):
        raise DegenerateShoulders("shoulder line is vertical; cannot align to the yz plane")
    cx, cy = sh[..., 0] / r, sh[..., 1] / r
    zero, one = np.zeros_like(r), np.ones_like(r)
    rot = np.stack(
        [
            np.stack([cy, -cx, zero], axis=-1),
            np.stack([cx, cy, zero], axis=-1),
            np.stack([zero, zero, one], axis=-1),
        ],
        axis=-2,
    )
    scale = reference_width / np.linalg.norm(sh, axis=-1)
    center = joints.mean(axis=-2)
    return rot, scale, center


def align_for_eval(
    s: np.ndarray, layout: JointLayout, reference_width: float = REFERENCE_SHOULDER_CM
) -> np.ndarray:
    """Metric frame: shoulder line parallel to the yz plane, body center
    (mean of all joints) at the origin, shoulder distance ``reference_width``.

    Only a rotation about the vertical axis is applied, so the result is
    invariant to vertical-axis rotation, translation and uniform scaling.
    """
    joints = _check_joints(s, layout)
    rot, scale, center = _eval_rotation(joints, layout, reference_width)
    centered = joints - center[..., None, :]
    return scale[..., None, None] * np.einsum("...ij,...kj->...ki", rot, centered)


def joint_distances(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Per-joint Euclidean distance between two skeletons, no alignment."""
    return np.linalg.norm(np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64), axis=-1)


def joint_error(pred: np.ndarray, gt: np.ndarray, layout: JointLayout) -> np.ndarray:
    """Per-joint error (cm) after aligning both skeletons with :func:`align_for_eval`."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise LayoutMismatch(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    return joint_distances(align_for_eval(pred, layout), align_for_eval(gt, layout))


def split_pose(s: np.ndarray, layout: JointLayout) -> tuple[np.ndarray, np.ndarray]:
    """Flatten the upper and lower joint subsets, in layout index order."""
    joints = np.asarray(s)
    if joints.ndim < 2 or joints.shape[-2:] != (layout.J, 3):
        raise LayoutMismatch(f"expected (..., {layout.J}, 3) joints, got {joints.shape}")
    lead = joints.shape[:-2]
    upper = joints[..., list(layout.upper_idx), :].reshape(*lead, -1)
    lower = joints[..., list(layout.lower_idx), :].reshape(*lead, -1)
    return upper, lower


def merge_pose(upper: np.ndarray, lower: np.ndarray, layout: JointLayout) -> np.ndarray:
    """Inverse of :func:`split_pose`."""
    upper = np.asarray(upper)
    lower = np.asarray(lower)
    nu, nl = 3 * len(layout.upper_idx), 3 * len(layout.lower_idx)
    if upper.shape[-1] != nu or lower.shape[-1] != nl or upper.shape[:-1] != lower.shape[:-1]:
        raise LayoutMismatch(
            f"expected upper (..., {nu}) and lower (..., {nl}), got {upper.shape} and {lower.shape}"
        )
    lead = upper.shape[:-1]
    dtype = np.result_type(upper, lower)
    out = np.empty((*lead, layout.J, 3), dtype=dtype)
    out[..., list(layout.upper_idx), :] = upper.reshape(*lead, -1, 3)
    out[..., list(layout.lower_idx), :] = lower.reshape(*lead, -1, 3)
    return out
