"""On-disk formats: feature blobs, dataset manifests and the in-memory dataset.

Blob layout (little endian)::

    b"Y2ME"  u32 version  u64 rows  u64 cols  rows*cols float32 (row-major)

A dataset is a directory holding ``manifest.json`` plus one blob per
sequence and channel. Paths in the manifest are relative to its directory.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .errors import (
    BadMagic,
    DimOverflow,
    IoFailure,
    LayoutHashMismatch,
    MisalignedSequence,
    MissingChannel,
    NonFiniteInput,
    TruncatedFile,
)
from .features import KEYPOINT_DIM, SCENE_DIM, motion_features
from .skeleton import JointLayout

MAGIC = b"Y2ME"
BLOB_VERSION = 1
HEADER = struct.Struct("<4sIQQ")
MANIFEST_VERSION = 1
FPS = 30
_MAX_ELEMENTS = ((1 << 63) - HEADER.size) // 4

# posture codes stored in the per-frame posture channel
UNTAGGED, STANDING, SITTING = 0, 1, 2


def atomic_write_bytes(path: str | os.PathLike, data: bytes) -> None:
    """Write via a temporary sibling file and ``os.replace``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=f".{path.name}.", suffix=".tmp", dir=path.parent)
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: str | os.PathLike, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def blob_bytes(matrix) -> bytes:
    m = np.asarray(matrix)
    if m.ndim == 1:
        m = m[:, None]
    if m.ndim != 2:
        raise DimOverflow(f"blobs hold 2-D matrices, got {m.ndim}-D")
    if m.size and not np.all(np.isfinite(m)):
        raise NonFiniteInput("refusing to write NaN/Inf into a blob")
    rows, cols = m.shape
    payload = np.ascontiguousarray(m, dtype="<f4").tobytes()
    return HEADER.pack(MAGIC, BLOB_VERSION, rows, cols) + payload


def write_blob(path: str | os.PathLike, matrix) -> None:
    """Write a 2-D matrix (1-D is treated as a column) as float32."""
    atomic_write_bytes(path, blob_bytes(matrix))


def parse_blob(data: bytes, source: str = "<bytes>") -> np.ndarray:
    if len(data) < HEADER.size:
        raise TruncatedFile(f"{source}: {len(data)} bytes is shorter than the blob header")
    magic, version, rows, cols = HEADER.unpack_from(data)
    if magic != MAGIC:
        raise BadMagic(f"{source}: bad magic {magic!r}")
    if version != BLOB_VERSION:
        raise BadMagic(f"{source}: unsupported blob version {version}")
    if rows * cols > _MAX_ELEMENTS:
        raise DimOverflow(f"{source}: {rows}x{cols} exceeds the addressable payload size")
    expected = HEADER.size + 4 * rows * cols
    if len(data) < expected:
        raise TruncatedFile(f"{source}: expected {expected} bytes, found {len(data)}")
    if len(data) > expected:
        raise TruncatedFile(f"{source}: {len(data) - expected} trailing bytes after payload")
    arr = np.frombuffer(data, dtype="<f4", count=rows * cols, offset=HEADER.size)
    return arr.reshape(rows, cols).astype(np.float32)


def read_blob(path: str | os.PathLike) -> np.ndarray:
    try:
        data = Path(path).read_bytes()
    except FileNotFoundError as exc:
        raise MissingChannel(f"missing blob {path}") from exc
    return parse_blob(data, str(path))


# ----------------------------------------------------------------------------
# datasets


@dataclass
class SequenceRecord:
    """One video's frame-aligned channels.

    ``gt`` holds person-centric skeletons ``(N, J, 3)``; ``keypoints`` the
    normalized second-person vectors ``(N, 50)``; ``homographies`` the
    frame-to-frame motion ``(N, 9)``; ``posture`` per-frame codes.
    """

    id: str
    activity: str
    split: str
    scene: np.ndarray
    keypoints: np.ndarray
    homographies: np.ndarray
    gt: np.ndarray | None
    posture: np.ndarray
    extra: dict[str, np.ndarray] = field(default_factory=dict)
    _motion: np.ndarray | None = field(default=None, repr=False)

    @property
    def n_frames(self) -> int:
        return len(self.scene)

    @property
    def motion(self) -> np.ndarray:
        if self._motion is None:
            self._motion = motion_features(self.homographies)
        return self._motion

    def channel(self, name: str) -> np.ndarray:
        if name == "keypoints2d":
            return self.keypoints
        if name in self.extra:
            return self.extra[name]
        raise MissingChannel(f"sequence {self.id} has no channel {name!r}")


@dataclass
class Dataset:
    layout: JointLayout
    sequences: list[SequenceRecord]
    manifest: dict[str, Any] = field(default_factory=dict)

    def split(self, name: str) -> list[SequenceRecord]:
        return [s for s in self.sequences if s.split == name]

    def subset(self, name: str) -> Dataset:
        return Dataset(self.layout, self.split(name), self.manifest)

    @property
    def activities(self) -> list[str]:
        return list(self.manifest.get("activities") or sorted({s.activity for s in self.sequences}))


def write_manifest(path: str | os.PathLike, manifest: dict[str, Any]) -> None:
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _homographies_from_correspondences(blob: np.ndarray, n_frames: int) -> np.ndarray:
    from .features import estimate_homography

    out = np.tile(np.eye(3).ravel(), (n_frames, 1))
    frames = blob[:, 0].astype(np.int64)
    for t in np.unique(frames):
        if not 0 < t < n_frames:
            raise MisalignedSequence(f"correspondence frame index {t} outside [1, {n_frames})")
        rows = blob[frames == t]
        out[t] = estimate_homography(rows[:, 1:3].astype(np.float64), rows[:, 3:5].astype(np.float64)).ravel()
    return out


def load_dataset(
    manifest_path: str | os.PathLike,
    codebook_layout_hash: str | None = None,
) -> Dataset:
    """Load and validate a dataset bundle.

    Raises:
        MissingChannel: a referenced file does not exist.
        MisalignedSequence: a channel's row count differs from ``frame_count``.
        LayoutHashMismatch: ``codebook_layout_hash`` disagrees with the manifest layout.
    """
    manifest_path = Path(manifest_path)
    if manifest_path.is_dir():
        manifest_path = manifest_path / "manifest.json"
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError as exc:
        raise MissingChannel(f"manifest {manifest_path} not found") from exc
    except json.JSONDecodeError as exc:
        raise IoFailure(f"manifest {manifest_path} is not valid JSON: {exc}") from exc
    root = manifest_path.parent
    layout = JointLayout.from_dict(manifest["layout"])
    if codebook_layout_hash is not None and codebook_layout_hash != layout.hash():
        raise LayoutHashMismatch("codebook was built for a different joint layout")
    dims = manifest.get("channels", {})
    if dims.get("scene", SCENE_DIM) != SCENE_DIM or dims.get("keypoints2d", KEYPOINT_DIM) != KEYPOINT_DIM:
        raise MisalignedSequence(f"unexpected channel dims {dims}")

    sequences = []
    for entry in manifest["sequences"]:
        n = int(entry["frame_count"])
        files = entry["files"]

        def load(name: str, cols: int | None, required: bool = True):
            if name not in files:
                if required:
                    raise MissingChannel(f"sequence {entry['id']}: no {name!r} channel listed")
                return None
            arr = read_blob(root / files[name])
            if arr.shape[0] != n:
                raise MisalignedSequence(
                    f"sequence {entry['id']}: {name} has {arr.shape[0]} rows, expected {n}"
                )
            if cols is not None and arr.shape[1] != cols:
                raise MisalignedSequence(f"sequence {entry['id']}: {name} has {arr.shape[1]} columns, expected {cols}")
            return arr

        scene = load("scene", SCENE_DIM)
        keypoints = load("keypoints2d", KEYPOINT_DIM)
        if "homographies" in files:
            homs = load("homographies", 9)
        elif "correspondences" in files:
            homs = _homographies_from_correspondences(read_blob(root / files["correspondences"]), n)
        else:
            raise MissingChannel(f"sequence {entry['id']}: needs homographies or correspondences")
        gt = load("gt", 3 * layout.J, required=False)
        if gt is not None:
            gt = gt.reshape(n, layout.J, 3)
        posture = load("posture", 1, required=False)
        posture = np.zeros(n, dtype=np.int64) if posture is None else posture[:, 0].astype(np.int64)
        extra = {}
        for name in files:
            if name in ("scene", "keypoints2d", "homographies", "correspondences", "gt", "posture"):
                continue
            extra[name] = load(name, dims.get(name))
        sequences.append(
            SequenceRecord(
                id=str(entry["id"]),
                activity=str(entry.get("activity", "unknown")),
                split=str(entry.get("split", "train")),
                scene=scene,
                keypoints=keypoints,
                homographies=homs,
                gt=gt,
                posture=posture,
                extra=extra,
            )
        )
    return Dataset(layout=layout, sequences=sequences, manifest=manifest)
