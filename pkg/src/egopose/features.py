"""Per-frame input features.

* camera motion: frame-to-frame homographies by DLT, stacked over 15 steps
  into a 135-d window;
* second-person pose: 25 2D keypoints scaled to [0, 1], missing joints zero;
* scene descriptor: precomputed 2048-d vectors, only validated here.
"""

from __future__ import annotations

from collections import Counter
from typing import NamedTuple, Sequence

import numpy as np

from .errors import (
    DegenerateConfiguration,
    DimensionMismatch,
    InsufficientCorrespondences,
    NonFiniteInput,
    NormalizationFailure,
)

MOTION_STEPS = 15
MOTION_DIM = 9 * MOTION_STEPS
NUM_KEYPOINTS = 25
KEYPOINT_DIM = 2 * NUM_KEYPOINTS
SCENE_DIM = 2048

_RANK_RATIO = 1e-10
_H00_MIN = 1e-8
_IDENTITY_ROW = np.eye(3).ravel()


class Correspondence(NamedTuple):
    src: tuple[float, float]
    dst: tuple[float, float]


def _conditioning(pts: np.ndarray) -> np.ndarray:
    """Similarity moving the centroid to 0 with mean distance sqrt(2)."""
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    if mean_dist <= 0.0:
        raise DegenerateConfiguration("all points coincide")
    k = np.sqrt(2.0) / mean_dist
    return np.array([[k, 0.0, -k * centroid[0]], [0.0, k, -k * centroid[1]], [0.0, 0.0, 1.0]])


def _as_point_arrays(src, dst) -> tuple[np.ndarray, np.ndarray]:
    if dst is None:
        arr = np.asarray([tuple(c.src) + tuple(c.dst) if isinstance(c, Correspondence) else c for c in src],
                         dtype=np.float64)
        arr = arr.reshape(-1, 4)
        return arr[:, :2], arr[:, 2:]
    return np.asarray(src, dtype=np.float64).reshape(-1, 2), np.asarray(dst, dtype=np.float64).reshape(-1, 2)


def estimate_homography(src, dst=None) -> np.ndarray:
    """Homography mapping ``src`` points onto ``dst`` points, with ``h[0,0] == 1``.

    Either pass two ``(n, 2)`` arrays, or a single sequence of
    :class:`Correspondence` (or ``(n, 4)`` rows ``sx, sy, dx, dy``).

    The DLT system is built on conditioned points and solved with the
    right singular vector of the smallest singular value.

    Raises:
        InsufficientCorrespondences: fewer than 4 pairs.
        DegenerateConfiguration: the system has a null space of dimension > 1
            (collinear or repeated points).
        NormalizationFailure: the unit-norm solution has ``|h00| < 1e-8``.
    """
    src, dst = _as_point_arrays(src, dst)
    n = len(src)
    if n < 4 or len(dst) != n:
        raise InsufficientCorrespondences(f"need at least 4 correspondences, got {n}")
    if not (np.all(np.isfinite(src)) and np.all(np.isfinite(dst))):
        raise NonFiniteInput("correspondence coordinates must be finite")

    t_src, t_dst = _conditioning(src), _conditioning(dst)
    p = src @ t_src[:2, :2].T + t_src[:2, 2]
    q = dst @ t_dst[:2, :2].T + t_dst[:2, 2]

    x, y = p[:, 0], p[:, 1]
    u, v = q[:, 0], q[:, 1]
    zeros, ones = np.zeros(n), np.ones(n)
    a = np.empty((2 * n, 9))
    a[0::2] = np.stack([-x, -y, -ones, zeros, zeros, zeros, u * x, u * y, u], axis=1)
    a[1::2] = np.stack([zeros, zeros, zeros, -x, -y, -ones, v * x, v * y, v], axis=1)

    _, sv, vt = np.linalg.svd(a)
    if sv[7] < _RANK_RATIO * sv[0]:
        raise DegenerateConfiguration("correspondences do not determine a unique homography")

    h_cond = vt[-1].reshape(3, 3)
    h = np.linalg.solve(t_dst, h_cond @ t_src)
    h /= np.linalg.norm(h)
    return normalize_homography(h)


def normalize_homography(h: np.ndarray) -> np.ndarray:
    """Divide by the top-left element."""
    h = np.asarray(h, dtype=np.float64).reshape(3, 3)
    if abs(h[0, 0]) < _H00_MIN * np.linalg.norm(h):
        raise NormalizationFailure(f"h00={h[0, 0]:.3g} too small to normalize by")
    return h / h[0, 0]


def build_motion_window(history: Sequence[np.ndarray]) -> np.ndarray:
    """Stack up to 15 homographies (oldest first) into a 135-vector.

    Short histories are padded at the front with identities.
    """
    if len(history) > MOTION_STEPS:
        raise DimensionMismatch(f"at most {MOTION_STEPS} homographies, got {len(history)}")
    rows = [_IDENTITY_ROW] * (MOTION_STEPS - len(history))
    rows += [np.asarray(h, dtype=np.float64).reshape(9) for h in history]
    return np.concatenate(rows)


def motion_features(homographies: np.ndarray) -> np.ndarray:
    """Motion windows for every frame of a sequence.

    ``homographies[t]`` maps frame ``t-1`` to frame ``t`` (row 0 is the
    identity placeholder). Frame ``t`` gets rows ``t-14 .. t``, which are
    the 15 successive homographies spanning ``[f_{t-15}, f_t]``.

    Returns:
        ``(N, 135)`` array with the dtype of the input.
    """
    homs = np.asarray(homographies)
    homs = homs.reshape(len(homs), 9)
    pad = np.tile(_IDENTITY_ROW.astype(homs.dtype), (MOTION_STEPS - 1, 1))
    padded = np.concatenate([pad, homs], axis=0)
    windows = np.lib.stride_tricks.sliding_window_view(padded, (MOTION_STEPS, 9))[:, 0]
    return windows.reshape(len(homs), MOTION_DIM).copy()


def encode_keypoints(
    keypoints: np.ndarray,
    image_w: float,
    image_h: float,
    counter: Counter | None = None,
) -> np.ndarray:
    """Vectorized encoder: ``(..., 25, 2+)`` pixel keypoints -> ``(..., 50)``.

    NaN rows mark missing joints and encode as zeros; a third (confidence)
    column is ignored. Points outside the image are clamped into [0, 1] and
    counted under ``counter["out_of_frame"]``.
    """
    if image_w <= 0 or image_h <= 0:
        raise ValueError("image dimensions must be positive")
    kp = np.asarray(keypoints, dtype=np.float64)
    if kp.ndim < 2 or kp.shape[-2] != NUM_KEYPOINTS or kp.shape[-1] < 2:
        raise DimensionMismatch(f"expected (..., {NUM_KEYPOINTS}, 2) keypoints, got {kp.shape}")
    xy = kp[..., :2] / np.array([image_w, image_h], dtype=np.float64)
    present = np.all(np.isfinite(xy), axis=-1)
    clipped = np.clip(np.where(present[..., None], xy, 0.0), 0.0, 1.0)
    if counter is not None:
        moved = present & np.any(clipped != np.where(present[..., None], xy, 0.0), axis=-1)
        counter["out_of_frame"] += int(moved.sum())
    return clipped.reshape(*kp.shape[:-2], KEYPOINT_DIM)


def encode_second_person(
    keypoints,
    image_w: float,
    image_h: float,
    counter: Counter | None = None,
) -> np.ndarray:
    """Flatten 25 detector keypoints into a 50-vector in image-normalized units.

    ``keypoints`` is a length-25 sequence whose items are ``None`` (missing)
    or ``(x, y[, confidence])`` in pixels; NaN coordinates also count as
    missing. Missing joints encode as ``(0, 0)``. See :func:`encode_keypoints`
    for clamping.
    """
    if len(keypoints) != NUM_KEYPOINTS:
        raise DimensionMismatch(f"expected {NUM_KEYPOINTS} keypoints, got {len(keypoints)}")
    rows = np.full((NUM_KEYPOINTS, 2), np.nan)
    for j, kp in enumerate(keypoints):
        if kp is not None:
            rows[j] = np.asarray(kp, dtype=np.float64)[:2]
    return encode_keypoints(rows, image_w, image_h, counter)


def ingest_scene_feature(row) -> np.ndarray:
    """Validate one precomputed scene descriptor."""
    s = np.asarray(row)
    if s.ndim != 1 or s.shape[0] != SCENE_DIM:
        raise DimensionMismatch(f"scene feature must have {SCENE_DIM} entries, got shape {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteInput("scene feature contains NaN or Inf")
    return s


def ingest_scene_features(matrix) -> np.ndarray:
    """Validate an ``(N, 2048)`` block of scene descriptors."""
    s = np.asarray(matrix)
    if s.ndim != 2 or s.shape[1] != SCENE_DIM:
        raise DimensionMismatch(f"scene block must be (N, {SCENE_DIM}), got {s.shape}")
    if not np.all(np.isfinite(s)):
        raise NonFiniteInput("scene features contain NaN or Inf")
    return s
