"""Pose quantization with k-means.

The default codebook is mixed-granularity: the upper-body and lower-body
joint subsets are clustered independently, so a pose is coded by a pair of
cluster ids. :class:`FullBodyCodebook` is the single-codebook variant that
clusters whole poses.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .dataio import atomic_write_text, read_blob, write_blob
from .errors import EmptyInput, IndexOutOfRange, LayoutMismatch, TooFewPoints
from .skeleton import JointLayout, joint_distances, joint_error, merge_pose, split_pose

_CHUNK_ELEMENTS = 1 << 22


class ClusterPair(NamedTuple):
    upper_id: int
    lower_id: int


@dataclass
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    objective: float
    history: list[float] = field(default_factory=list)
    n_iter: int = 0


def squared_distances(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    """``(M, K)`` squared distances, computed from explicit differences.

    Explicit differences (rather than the ``|x|^2 - 2xc + |c|^2`` expansion)
    keep argmin results identical to a brute-force search.
    """
    x = np.asarray(x, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    out = np.empty((len(x), len(c)))
    step = max(1, _CHUNK_ELEMENTS // max(1, c.size))
    for a in range(0, len(x), step):
        diff = x[a : a + step, None, :] - c[None, :, :]
        out[a : a + step] = np.einsum("mkd,mkd->mk", diff, diff)
    return out


def _kmeans_pp(points: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    M = len(points)
    centers = np.empty((K, points.shape[1]))
    centers[0] = points[rng.integers(M)]
    d2 = squared_distances(points, centers[:1])[:, 0]
    for k in range(1, K):
        total = d2.sum()
        if total > 0:
            idx = rng.choice(M, p=d2 / total)
        else:
            idx = rng.integers(M)
        centers[k] = points[idx]
        d2 = np.minimum(d2, squared_distances(points, centers[k : k + 1])[:, 0])
    return centers


def _lloyd(points, centers, max_iters, tol):
    K = len(centers)
    history = []
    labels = np.zeros(len(points), dtype=np.int64)
    n_iter = 0
    for n_iter in range(1, max_iters + 1):
        d2 = squared_distances(points, centers)
        labels = np.argmin(d2, axis=1)
        obj = float(d2[np.arange(len(points)), labels].sum())
        if history and obj > history[-1] * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {history[-1]} -> {obj}")
        history.append(obj)

        sums = np.zeros_like(centers)
        np.add.at(sums, labels, points)
        counts = np.bincount(labels, minlength=K)
        new = centers.copy()
        filled = counts > 0
        new[filled] = sums[filled] / counts[filled, None]
        empty = np.flatnonzero(~filled)
        if len(empty):
            own = d2[np.arange(len(points)), labels]
            for k, idx in zip(empty, np.argsort(-own, kind="stable")):
                new[k] = points[idx]
        shift = np.max(np.linalg.norm(new - centers, axis=1))
        centers = new
        if shift < tol:
            break
    d2 = squared_distances(points, centers)
    labels = np.argmin(d2, axis=1)
    obj = float(d2[np.arange(len(points)), labels].sum())
    history.append(obj)
    return centers, labels, obj, history, n_iter


def run_kmeans(
    points: np.ndarray,
    K: int,
    max_iters: int = 100,
    tol: float = 1e-6,
    seed: int = 0,
    n_init: int = 1,
) -> KMeansResult:
    """Lloyd's algorithm with k-means++ seeding.

    ``history`` records the objective after every assignment step; it is
    checked to be non-increasing as the loop runs. With ``n_init > 1`` the
    restart with the lowest final objective wins (first one on ties).
    """
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2 or points.shape[1] < 1:
        raise ValueError(f"points must be (M, d) with d >= 1, got {points.shape}")
    if K < 1:
        raise ValueError("K must be >= 1")
    M = len(points)
    if M < K:
        raise TooFewPoints(f"{M} points cannot form {K} clusters")
    if len(np.unique(points, axis=0)) < K:
        raise TooFewPoints(f"fewer than {K} distinct points")
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        centers = _kmeans_pp(points, K, rng)
        res = KMeansResult(*_lloyd(points, centers, max_iters, tol))
        if best is None or res.objective < best.objective:
            best = res
    return best


def fit_kmeans(points, K, max_iters=100, tol=1e-6, seed=0, n_init=1) -> np.ndarray:
    """Centroids ``(K, d)``; see :func:`run_kmeans`."""
    return run_kmeans(points, K, max_iters=max_iters, tol=tol, seed=seed, n_init=n_init).centroids


def _nearest(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    # np.argmin returns the first minimum, which is the lowest-index tie-break
    return np.argmin(squared_distances(x, c), axis=1)


def _f32(a: np.ndarray) -> np.ndarray:
    # centroids are persisted as float32 blobs; keep the in-memory copy identical
    return np.asarray(a, dtype=np.float32).astype(np.float64)


@dataclass
class PoseCodebook:
    upper_centroids: np.ndarray
    lower_centroids: np.ndarray
    layout: JointLayout
    seed: int = 0

    @property
    def K_upp(self) -> int:
        return len(self.upper_centroids)

    @property
    def K_bot(self) -> int:
        return len(self.lower_centroids)

    def _check(self, poses: np.ndarray) -> np.ndarray:
        poses = np.asarray(poses, dtype=np.float64)
        if poses.shape[-2:] != (self.layout.J, 3):
            raise LayoutMismatch(f"pose shape {poses.shape} does not match J={self.layout.J}")
        return poses

    def quantize_many(self, poses: np.ndarray) -> np.ndarray:
        """``(N, 2)`` array of (upper, lower) ids for ``(N, J, 3)`` poses."""
        poses = self._check(poses).reshape(-1, self.layout.J, 3)
        up, lo = split_pose(poses, self.layout)
        return np.stack([_nearest(up, self.upper_centroids), _nearest(lo, self.lower_centroids)], axis=1)

    def reconstruct_many(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1, 2)
        if ids.size and (ids.min() < 0 or ids[:, 0].max() >= self.K_upp or ids[:, 1].max() >= self.K_bot):
            raise IndexOutOfRange(f"cluster ids out of range for K_upp={self.K_upp}, K_bot={self.K_bot}")
        return merge_pose(self.upper_centroids[ids[:, 0]], self.lower_centroids[ids[:, 1]], self.layout)

    def quantize(self, s: np.ndarray) -> ClusterPair:
        s = self._check(s)
        if s.ndim != 2:
            raise LayoutMismatch("quantize takes a single pose; use quantize_many")
        u, l = self.quantize_many(s[None])[0]
        return ClusterPair(int(u), int(l))

    def reconstruct(self, c: ClusterPair) -> np.ndarray:
        return self.reconstruct_many(np.array([tuple(c)]))[0]


@dataclass
class FullBodyCodebook:
    """Single codebook over whole-body pose vectors."""

    centroids: np.ndarray
    layout: JointLayout
    seed: int = 0

    @property
    def K(self) -> int:
        return len(self.centroids)

    def quantize_many(self, poses: np.ndarray) -> np.ndarray:
        poses = np.asarray(poses, dtype=np.float64)
        if poses.shape[-2:] != (self.layout.J, 3):
            raise LayoutMismatch(f"pose shape {poses.shape} does not match J={self.layout.J}")
        return _nearest(poses.reshape(-1, 3 * self.layout.J), self.centroids)

    def reconstruct_many(self, ids: np.ndarray) -> np.ndarray:
        ids = np.asarray(ids, dtype=np.int64).reshape(-1)
        if ids.size and (ids.min() < 0 or ids.max() >= self.K):
            raise IndexOutOfRange(f"cluster id out of range for K={self.K}")
        return self.centroids[ids].reshape(-1, self.layout.J, 3)

    def quantize(self, s: np.ndarray) -> int:
        return int(self.quantize_many(np.asarray(s)[None])[0])

    def reconstruct(self, c: int) -> np.ndarray:
        return self.reconstruct_many(np.array([c]))[0]


def _stack_poses(poses, layout: JointLayout) -> np.ndarray:
    arr = np.asarray(poses, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[1:] != (layout.J, 3):
        raise LayoutMismatch(f"expected (N, {layout.J}, 3) poses, got {arr.shape}")
    return arr


def build_codebook(
    train_poses,
    layout: JointLayout,
    K_upp: int = 700,
    K_bot: int = 100,
    seed: int = 0,
    max_iters: int = 100,
    tol: float = 1e-6,
    n_init: int = 1,
) -> PoseCodebook:
    """Fit the upper and lower codebooks independently on split poses."""
    poses = _stack_poses(train_poses, layout)
    if len(poses) < max(K_upp, K_bot):
        raise TooFewPoints(f"{len(poses)} poses for K_upp={K_upp}, K_bot={K_bot}")
    up, lo = split_pose(poses, layout)
    upper = fit_kmeans(up, K_upp, max_iters, tol, seed, n_init)
    lower = fit_kmeans(lo, K_bot, max_iters, tol, seed + 1, n_init)
    return PoseCodebook(_f32(upper), _f32(lower), layout, seed)


def build_single_codebook(
    train_poses, layout: JointLayout, K: int = 500, seed: int = 0,
    max_iters: int = 100, tol: float = 1e-6, n_init: int = 1,
) -> FullBodyCodebook:
    poses = _stack_poses(train_poses, layout)
    cents = fit_kmeans(poses.reshape(len(poses), -1), K, max_iters, tol, seed, n_init)
    return FullBodyCodebook(_f32(cents), layout, seed)


def quantize(s: np.ndarray, cb: PoseCodebook | FullBodyCodebook):
    return cb.quantize(s)


def reconstruct(c, cb: PoseCodebook | FullBodyCodebook) -> np.ndarray:
    return cb.reconstruct(c)


def quantization_stats(poses, cb: PoseCodebook | FullBodyCodebook, bins: int = 20) -> dict:
    """Distance from each pose to its quantized reconstruction.

    Returns a dict with

    * ``per_joint_cm``: mean over poses and joints of the per-joint error
      under the evaluation alignment (what a perfect classifier would score);
    * ``per_pose_cm``: mean over poses of the Euclidean norm of the full
      ``3J`` difference vector in the person-centric frame;
    * ``histogram``: ``(counts, edges)`` of the aligned per-joint errors.
    """
    poses = np.asarray(poses, dtype=np.float64)
    if poses.ndim != 3 or len(poses) == 0:
        raise EmptyInput("quantization_stats needs a non-empty (N, J, 3) pose array")
    rec = cb.reconstruct_many(cb.quantize_many(poses))
    per_joint = joint_error(rec, poses, cb.layout)
    per_pose = np.linalg.norm((rec - poses).reshape(len(poses), -1), axis=1)
    counts, edges = np.histogram(per_joint, bins=bins)
    return {
        "per_joint_cm": float(per_joint.mean()),
        "per_pose_cm": float(per_pose.mean()),
        "raw_per_joint_cm": float(joint_distances(rec, poses).mean()),
        "histogram": (counts, edges),
        "n_poses": len(poses),
    }


# ----------------------------------------------------------------------------
# persistence


def save_codebook(cb: PoseCodebook | FullBodyCodebook, out_dir) -> Path:
    """Write centroid blobs plus ``codebook.json`` metadata into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"seed": cb.seed, "layout": cb.layout.to_dict(), "layout_hash": cb.layout.hash()}
    if isinstance(cb, PoseCodebook):
        write_blob(out / "upper.y2me", cb.upper_centroids)
        write_blob(out / "lower.y2me", cb.lower_centroids)
        meta.update(mode="mixed", K_upp=cb.K_upp, K_bot=cb.K_bot)
    else:
        write_blob(out / "full.y2me", cb.centroids)
        meta.update(mode="single", K=cb.K)
    atomic_write_text(out / "codebook.json", json.dumps(meta, indent=2, sort_keys=True) + "\n")
    return out


def load_codebook(path) -> PoseCodebook | FullBodyCodebook:
    root = Path(path)
    if root.is_file():
        root = root.parent
    meta = json.loads((root / "codebook.json").read_text())
    layout = JointLayout.from_dict(meta["layout"])
    if layout.hash() != meta["layout_hash"]:
        raise LayoutMismatch("codebook layout hash does not match its layout")
    if meta["mode"] == "mixed":
        up = read_blob(root / "upper.y2me").astype(np.float64)
        lo = read_blob(root / "lower.y2me").astype(np.float64)
        if len(up) != meta["K_upp"] or len(lo) != meta["K_bot"]:
            raise LayoutMismatch("centroid blob sizes disagree with codebook.json")
        return PoseCodebook(up, lo, layout, meta["seed"])
    cents = read_blob(root / "full.y2me").astype(np.float64)
    return FullBodyCodebook(cents, layout, meta["seed"])
