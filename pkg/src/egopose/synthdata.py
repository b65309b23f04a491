"""Synthetic dyadic-interaction datasets with a known response structure.

The interactee cycles through upper/lower pose classes in segments; the
camera wearer answers ``response_lag`` frames later with the class given by
a fixed response map (with probability ``coupling``, otherwise a uniform
random class). Everything the model sees is derived from these classes:

* interactee 2D keypoints: projected prototypes, jittered, with per-joint
  dropout;
* camera homographies: posture (sit/stand) and arm-lean changes of the
  wearer tilt the chest camera, plus small shake;
* scene descriptors: one fixed random vector per activity, a weaker one per
  wearer posture, plus noise.

Class 0 of every body half is the neutral standing pose and the other
prototypes are spread around it, so the average pose is close to class 0.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .dataio import (
    FPS,
    MANIFEST_VERSION,
    SITTING,
    STANDING,
    Dataset,
    SequenceRecord,
    atomic_write_text,
    write_blob,
    write_manifest,
)
from .errors import IoFailure
from .features import (
    KEYPOINT_DIM,
    SCENE_DIM,
    Correspondence,
    encode_keypoints,
    normalize_homography,
)
from .skeleton import KINECT_25, JointLayout, merge_pose, normalize_person_centric, split_pose

IMAGE_W, IMAGE_H = 1920, 1080
FOCAL_PX = 800.0
DEFAULT_ACTIVITIES = ("conversation", "hand games", "throw-catch", "sports")

# world frame: x forward, y left, z up, cm
_KINECT_BASE = np.array([
    [0, 0, 100],    # spine_base
    [0, 0, 125],    # spine_mid
    [0, 0, 150],    # neck
    [0, 0, 165],    # head
    [0, 15, 145],   # shoulder_left
    [0, 17, 117],   # elbow_left
    [0, 18, 92],    # wrist_left
    [0, 18, 85],    # hand_left
    [0, -15, 145],  # shoulder_right
    [0, -17, 117],  # elbow_right
    [0, -18, 92],   # wrist_right
    [0, -18, 85],   # hand_right
    [0, 9, 100],    # hip_left
    [0, 10, 55],    # knee_left
    [0, 10, 10],    # ankle_left
    [8, 10, 3],     # foot_left
    [0, -9, 100],   # hip_right
    [0, -10, 55],   # knee_right
    [0, -10, 10],   # ankle_right
    [8, -10, 3],    # foot_right
    [0, 0, 145],    # spine_shoulder
    [0, 18, 77],    # handtip_left
    [4, 18, 86],    # thumb_left
    [0, -18, 77],   # handtip_right
    [4, -18, 86],   # thumb_right
], dtype=np.float64)

_ARMS = (  # shoulder, elbow, wrist, hand, handtip, thumb
    (4, 5, 6, 7, 21, 22),
    (8, 9, 10, 11, 23, 24),
)
_LEGS = ((12, 13, 14, 15), (16, 17, 18, 19))  # hip, knee, ankle, foot
_UPPER_ARM, _FOREARM, _HAND, _TIP = 28.0, 25.0, 7.0, 8.0
_THIGH, _SHIN, _FOOT = 45.0, 45.0, 8.0
_BODY_MID_Z = 0.5 * (_KINECT_BASE[:, 2].min() + _KINECT_BASE[:, 2].max())


@dataclass
class SynthConfig:
    num_sequences: int = 28
    num_test: int = 8
    frames_per_sequence: int = 512
    num_pose_classes_upper: int = 8
    num_pose_classes_lower: int = 4
    response_lag: int = 5
    coupling: float = 0.9
    observation_noise_cm: float = 1.0
    seed: int = 0
    activities: tuple[str, ...] = DEFAULT_ACTIVITIES
    camera_motion_amplitude: float = 0.02
    keypoint_dropout: float = 0.1
    keypoint_noise_cm: float = 1.0
    dwell_frames: tuple[int, int] = (20, 80)
    interactee_distance_cm: float = 200.0
    n_correspondences: int = 12
    correspondence_noise_px: float = 0.0
    scene_noise: float = 0.1
    min_prototype_rms_cm: float = 10.0
    prototype_spread_deg: float = 120.0
    predicted_3d_noise_cm: float = 8.0
    # "frame": each frame independently follows the response map with
    # probability `coupling`; "segment": one draw per interactee segment
    noise_mode: str = "frame"
    # fraction of segments in which the interactee is out of view (all
    # keypoints missing); the wearer then responds as to the neutral class
    absent_fraction: float = 0.25
    # chance that a new interactee segment takes the neutral class 0
    # (None: uniform over classes)
    neutral_prob: float | None = 0.5

    def __post_init__(self) -> None:
        self.activities = tuple(self.activities)
        self.dwell_frames = tuple(int(v) for v in self.dwell_frames)
        if not 0.0 <= self.coupling <= 1.0:
            raise ValueError("coupling must lie in [0, 1]")
        if self.response_lag < 1:
            raise ValueError("response_lag must be >= 1")
        for name in ("num_sequences", "frames_per_sequence", "num_pose_classes_upper", "num_pose_classes_lower"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if not 0 <= self.num_test <= self.num_sequences:
            raise ValueError("num_test must lie in [0, num_sequences]")
        if not self.activities:
            raise ValueError("need at least one activity label")
        if self.neutral_prob is not None and not 0.0 <= self.neutral_prob <= 1.0:
            raise ValueError("neutral_prob must lie in [0, 1]")
        if not 0.0 <= self.absent_fraction < 1.0:
            raise ValueError("absent_fraction must lie in [0, 1)")
        if self.noise_mode not in ("frame", "segment"):
            raise ValueError("noise_mode must be 'frame' or 'segment'")
        lo, hi = self.dwell_frames
        if not 1 <= lo <= hi:
            raise ValueError("dwell_frames must satisfy 1 <= lo <= hi")

    @classmethod
    def from_dict(cls, d: dict) -> SynthConfig:
        return cls(**d)

    def bayes_ceiling(self) -> dict[str, float]:
        c = self.coupling
        up = c + (1 - c) / self.num_pose_classes_upper
        lo = c + (1 - c) / self.num_pose_classes_lower
        return {"upper": up, "lower": lo, "mean": (up + lo) / 2}


# ----------------------------------------------------------------------------
# prototypes


def _perturb(direction: np.ndarray, max_angle: float, rng: np.random.Generator) -> np.ndarray:
    d = direction / np.linalg.norm(direction)
    w = rng.normal(size=3)
    w -= w.dot(d) * d
    w /= np.linalg.norm(w)
    theta = rng.uniform(0.25 * max_angle, max_angle)
    return np.cos(theta) * d + np.sin(theta) * w


def _random_upper(rng, spread) -> np.ndarray:
    pose = _KINECT_BASE.copy()
    down = np.array([0.0, 0.0, -1.0])
    for side, (sh, el, wr, ha, tip, th) in zip((1.0, -1.0), _ARMS):
        d1 = _perturb(down + [0, 0.1 * side, 0], spread, rng)
        d2 = _perturb(d1, 0.8 * spread, rng)
        pose[el] = pose[sh] + _UPPER_ARM * d1
        pose[wr] = pose[el] + _FOREARM * d2
        pose[ha] = pose[wr] + _HAND * d2
        pose[tip] = pose[ha] + _TIP * d2
        perp = np.cross(d2, [0.0, side, 0.0])
        if np.linalg.norm(perp) < 1e-6:
            perp = np.array([1.0, 0.0, 0.0])
        pose[th] = pose[ha] + 4.0 * perp / np.linalg.norm(perp)
    head_dir = _perturb(np.array([0.0, 0.0, 1.0]), 0.3 * spread, rng)
    pose[3] = pose[2] + 15.0 * head_dir
    return pose


def _random_lower(rng, spread, sitting: bool) -> np.ndarray:
    pose = _KINECT_BASE.copy()
    for hip, knee, ankle, foot in _LEGS:
        if sitting:
            thigh = _perturb(np.array([1.0, 0.0, -0.15]), 0.3 * spread, rng)
            shin = _perturb(np.array([0.1, 0.0, -1.0]), 0.3 * spread, rng)
        else:
            thigh = _perturb(np.array([0.0, 0.0, -1.0]), 0.45 * spread, rng)
            shin = _perturb(thigh, 0.45 * spread, rng)
        pose[knee] = pose[hip] + _THIGH * thigh
        pose[ankle] = pose[knee] + _SHIN * shin
        pose[foot] = pose[ankle] + _FOOT * np.array([1.0, 0.0, 0.0])
    return pose


def n_standing_classes(K_bot: int) -> int:
    return max(1, (K_bot + 1) // 2)


def make_prototypes(K: int, half: str, rng: np.random.Generator, layout: JointLayout = KINECT_25,
                    min_rms: float = 10.0, spread_deg: float = 75.0, max_tries: int = 10000,
                    centred: bool = True) -> np.ndarray:
    """``K`` full-skeleton prototypes differing only on one body half.

    Class 0 is the neutral pose. With ``centred`` it is the per-joint mean of
    the other classes, so it sits at the centre of the class cloud; otherwise
    it is the rest pose (arms down, standing). Candidates are rejection-sampled
    so that every pair, neutral included, is at least ``min_rms`` cm apart
    (RMS over the joints of that half).
    """
    spread = np.deg2rad(spread_deg)
    idx = list(layout.upper_idx if half == "upper" else layout.lower_idx)
    n_stand = n_standing_classes(K)

    def rms(a, b):
        return np.sqrt(np.mean(np.sum((a[idx] - b[idx]) ** 2, axis=1)))

    tries = 0
    while True:
        others: list[np.ndarray] = []
        while len(others) < K - 1:
            tries += 1
            if tries > max_tries:
                raise RuntimeError(f"could not place {K} {half} prototypes {min_rms} cm apart")
            if half == "upper":
                cand = _random_upper(rng, spread)
            else:
                cand = _random_lower(rng, spread, sitting=len(others) + 1 >= n_stand)
            if all(rms(cand, p) >= min_rms for p in others):
                others.append(cand)
        neutral = _KINECT_BASE.copy()
        if others and centred:
            neutral[idx] = np.mean([p[idx] for p in others], axis=0)
        if all(rms(neutral, p) >= min_rms for p in others):
            return np.stack([neutral] + others)


def _absence(n: int, fraction: float, dwell: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of out-of-view segments covering about ``fraction`` of the frames."""
    out = np.zeros(n, dtype=bool)
    t = 0
    while t < n:
        length = int(rng.integers(dwell[0], dwell[1] + 1))
        out[t : t + length] = rng.random() < fraction
        t += length
    return out


def _response_map(K: int, rng: np.random.Generator, n_stand: int | None = None) -> np.ndarray:
    """Permutation of class ids that keeps the neutral class 0 fixed.

    With ``n_stand`` the standing ids ``[0, n_stand)`` and the sitting ids
    are permuted separately, so the wearer sits when the interactee does.
    """
    if n_stand is None:
        return np.concatenate([[0], 1 + rng.permutation(K - 1)]).astype(np.int64)
    stand = 1 + rng.permutation(n_stand - 1)
    sit = n_stand + rng.permutation(K - n_stand)
    return np.concatenate([[0], stand, sit]).astype(np.int64)


def _segments(n: int, K: int, dwell: tuple[int, int], rng: np.random.Generator,
              neutral_prob: float | None = 0.5) -> np.ndarray:
    """Piecewise-constant class track; consecutive segments always differ.

    A new segment is class 0 with probability ``neutral_prob`` (uniform over
    all classes when None), otherwise uniform over the other classes; draws
    equal to the current class are repeated.
    """
    if neutral_prob is None or K == 1:
        probs = np.full(K, 1.0 / K)
    else:
        probs = np.full(K, (1.0 - neutral_prob) / (K - 1))
        probs[0] = neutral_prob
    out = np.empty(n, dtype=np.int64)
    t = 0
    cls = int(rng.choice(K, p=probs))
    while t < n:
        length = int(rng.integers(dwell[0], dwell[1] + 1))
        out[t : t + length] = cls
        t += length
        if K > 1:
            nxt = cls
            while nxt == cls:
                nxt = int(rng.choice(K, p=probs))
            cls = nxt
    return out


# ----------------------------------------------------------------------------
# camera


def _intrinsics() -> np.ndarray:
    return np.array([[FOCAL_PX, 0, IMAGE_W / 2], [0, FOCAL_PX, IMAGE_H / 2], [0, 0, 1.0]])


def _rotation(pitch: float, roll: float, yaw: float) -> np.ndarray:
    cp, sp = np.cos(pitch), np.sin(pitch)
    cr, sr = np.cos(roll), np.sin(roll)
    cy, sy = np.cos(yaw), np.sin(yaw)
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    rz = np.array([[cr, -sr, 0], [sr, cr, 0], [0, 0, 1]])
    ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    return rz @ rx @ ry


def apply_homography(h: np.ndarray, pts: np.ndarray) -> np.ndarray:
    ph = np.concatenate([pts, np.ones((len(pts), 1))], axis=1) @ h.T
    return ph[:, :2] / ph[:, 2:3]


def synth_correspondences(h_true: np.ndarray, n_points: int, noise_px: float = 0.0, seed: int = 0,
                          width: float = IMAGE_W, height: float = IMAGE_H) -> list[Correspondence]:
    """Points sampled uniformly in the frame and mapped through ``h_true``.

    Emits exactly ``n_points`` pairs even below the 4 a homography needs;
    rejecting those is the estimator's job.
    """
    rng = np.random.default_rng(seed)
    src = rng.uniform([0, 0], [width, height], size=(n_points, 2))
    dst = apply_homography(np.asarray(h_true, dtype=np.float64), src)
    if noise_px > 0:
        dst = dst + rng.normal(scale=noise_px, size=dst.shape)
    return [Correspondence(tuple(s), tuple(d)) for s, d in zip(src, dst)]


# ----------------------------------------------------------------------------
# generation


@dataclass
class _World:
    wearer_upper: np.ndarray
    wearer_lower: np.ndarray
    inter_upper: np.ndarray
    inter_lower: np.ndarray
    resp_upper: np.ndarray
    resp_lower: np.ndarray
    activity_vecs: np.ndarray
    posture_vecs: np.ndarray


def _build_world(cfg: SynthConfig, ss: np.random.SeedSequence) -> _World:
    proto_ss, resp_ss, scene_ss = ss.spawn(3)
    prng = np.random.default_rng(proto_ss)
    kw = dict(min_rms=cfg.min_prototype_rms_cm, spread_deg=cfg.prototype_spread_deg)
    Ku, Kb = cfg.num_pose_classes_upper, cfg.num_pose_classes_lower
    wu = make_prototypes(Ku, "upper", prng, **kw)
    wl = make_prototypes(Kb, "lower", prng, **kw)
    # the wearer's neutral class is central; the interactee's upper neutral is
    # central too, its lower neutral is plain standing
    iu = make_prototypes(Ku, "upper", prng, **kw)
    il = make_prototypes(Kb, "lower", prng, centred=False, **kw)
    rrng = np.random.default_rng(resp_ss)
    srng = np.random.default_rng(scene_ss)
    return _World(
        wearer_upper=wu, wearer_lower=wl, inter_upper=iu, inter_lower=il,
        resp_upper=_response_map(Ku, rrng), resp_lower=_response_map(Kb, rrng, n_standing_classes(Kb)),
        activity_vecs=srng.normal(size=(len(cfg.activities), SCENE_DIM)),
        posture_vecs=srng.normal(size=(2, SCENE_DIM)),
    )


def _compose(upper_protos, lower_protos, u_ids, l_ids, layout) -> np.ndarray:
    up, _ = split_pose(upper_protos[u_ids], layout)
    _, lo = split_pose(lower_protos[l_ids], layout)
    return merge_pose(up, lo, layout)


def _respond(inter_ext: np.ndarray, resp: np.ndarray, K: int, n: int, coupling: float, rng,
             mode: str = "frame") -> np.ndarray:
    # frame t answers the interactee class at t - lag, i.e. extended index t
    lagged = inter_ext[:n]
    if mode == "frame":
        follow = rng.random(n) < coupling
        noise = rng.integers(K, size=n)
    else:
        seg = np.concatenate([[0], np.cumsum(lagged[1:] != lagged[:-1])])
        n_seg = int(seg[-1]) + 1
        follow = (rng.random(n_seg) < coupling)[seg]
        noise = rng.integers(K, size=n_seg)[seg]
    return np.where(follow, resp[lagged], noise)


def _camera_homographies(wearer_u, wearer_l, cfg: SynthConfig, rng) -> np.ndarray:
    n = len(wearer_u)
    amp = cfg.camera_motion_amplitude
    n_stand = n_standing_classes(cfg.num_pose_classes_lower)
    sitting = (wearer_l >= n_stand).astype(np.float64)
    lean = (wearer_u % 2).astype(np.float64)
    pitch = amp * sitting + rng.normal(scale=0.05 * amp, size=n)
    roll = 0.5 * amp * lean + rng.normal(scale=0.05 * amp, size=n)
    yaw = rng.normal(scale=0.05 * amp, size=n)
    lift = 40.0 * amp * sitting  # small vertical image translation, px
    k = _intrinsics()
    k_inv = np.linalg.inv(k)
    homs = np.tile(np.eye(3).ravel(), (n, 1))
    prev = None
    for t in range(n):
        cam = _rotation(pitch[t], roll[t], yaw[t])
        if prev is not None:
            h = k @ cam @ prev.T @ k_inv
            h[1, 2] += (lift[t] - lift[t - 1]) * h[2, 2]
            homs[t] = normalize_homography(h).ravel()
        prev = cam
    return homs


def _project(points_cam: np.ndarray) -> np.ndarray:
    """(..., 3) points in the wearer frame (x forward, y left, z up) -> pixels."""
    depth = points_cam[..., 0]
    u = IMAGE_W / 2 - FOCAL_PX * points_cam[..., 1] / depth
    v = IMAGE_H / 2 - FOCAL_PX * points_cam[..., 2] / depth
    return np.stack([u, v], axis=-1)


def _sequence(i: int, cfg: SynthConfig, world: _World, ss: np.random.SeedSequence, layout: JointLayout):
    rng = np.random.default_rng(ss)
    n, lag = cfg.frames_per_sequence, cfg.response_lag
    Ku, Kb = cfg.num_pose_classes_upper, cfg.num_pose_classes_lower
    act_idx = i % len(cfg.activities)
    n_train = cfg.num_sequences - cfg.num_test

    # interactee classes, including `lag` frames of history before frame 0
    int_u_ext = _segments(n + lag, Ku, cfg.dwell_frames, rng, cfg.neutral_prob)
    int_l_ext = _segments(n + lag, Kb, cfg.dwell_frames, rng, cfg.neutral_prob)
    absent_ext = _absence(n + lag, cfg.absent_fraction, cfg.dwell_frames, rng)
    int_u_ext[absent_ext] = 0
    int_l_ext[absent_ext] = 0
    wear_u = _respond(int_u_ext, world.resp_upper, Ku, n, cfg.coupling, rng, cfg.noise_mode)
    wear_l = _respond(int_l_ext, world.resp_lower, Kb, n, cfg.coupling, rng, cfg.noise_mode)
    int_u, int_l = int_u_ext[lag:], int_l_ext[lag:]

    raw = _compose(world.wearer_upper, world.wearer_lower, wear_u, wear_l, layout)
    raw = raw + rng.normal(scale=cfg.observation_noise_cm, size=raw.shape)
    gt = normalize_person_centric(raw, layout)

    inter = _compose(world.inter_upper, world.inter_lower, int_u, int_l, layout)
    inter = inter + rng.normal(scale=cfg.keypoint_noise_cm, size=inter.shape)
    # face the wearer: rotate 180 degrees about vertical, with the middle of
    # the body at camera height so head and feet both stay in frame
    placed = inter * np.array([-1.0, -1.0, 1.0])
    placed = placed + np.array([cfg.interactee_distance_cm, 0.0, -_BODY_MID_Z])
    # a seated interactee's whole body sits lower in the view
    placed[..., 2] -= _THIGH * (int_l >= n_standing_classes(Kb))[:, None]
    pix = _project(placed)
    drop = rng.random(pix.shape[:2]) < cfg.keypoint_dropout
    drop[absent_ext[lag:]] = True
    pix[drop] = np.nan
    clamped = Counter()
    keypoints = encode_keypoints(pix, IMAGE_W, IMAGE_H, clamped)
    inter_3d = normalize_person_centric(inter, layout).reshape(n, -1)
    inter_3d_pred = inter_3d + rng.normal(scale=cfg.predicted_3d_noise_cm, size=inter_3d.shape)

    n_stand = n_standing_classes(Kb)
    posture = np.where(wear_l < n_stand, STANDING, SITTING)
    scene = (
        world.activity_vecs[act_idx]
        + 0.5 * world.posture_vecs[(posture == SITTING).astype(int)]
        + cfg.scene_noise * rng.normal(size=(n, SCENE_DIM))
    )
    homs = _camera_homographies(wear_u, wear_l, cfg, rng)

    corr_rows = []
    for t in range(1, n):
        h = homs[t].reshape(3, 3)
        src = rng.uniform([0, 0], [IMAGE_W, IMAGE_H], size=(cfg.n_correspondences, 2))
        dst = apply_homography(h, src)
        if cfg.correspondence_noise_px > 0:
            dst = dst + rng.normal(scale=cfg.correspondence_noise_px, size=dst.shape)
        corr_rows.append(np.column_stack([np.full(len(src), t), src, dst]))
    corr = np.concatenate(corr_rows) if corr_rows else np.zeros((0, 5))

    seq_id = f"seq{i:03d}"
    record = SequenceRecord(
        id=seq_id,
        activity=cfg.activities[act_idx],
        split="train" if i < n_train else "test",
        scene=scene.astype(np.float32),
        keypoints=keypoints.astype(np.float32),
        homographies=homs.astype(np.float32),
        gt=gt.astype(np.float32),
        posture=posture.astype(np.int64),
        extra={
            "second_person_3d": inter_3d.astype(np.float32),
            "second_person_3d_pred": inter_3d_pred.astype(np.float32),
            "wearer_classes": np.stack([wear_u, wear_l], axis=1).astype(np.float32),
            "interactee_classes": np.stack([int_u, int_l], axis=1).astype(np.float32),
        },
    )
    return record, corr.astype(np.float32), int(clamped["out_of_frame"])


@dataclass
class SynthBundle:
    dataset: Dataset
    correspondences: dict[str, np.ndarray] = field(default_factory=dict)
    response_maps: dict[str, np.ndarray] = field(default_factory=dict)
    prototypes: dict[str, np.ndarray] = field(default_factory=dict)


def synthesize(cfg: SynthConfig, layout: JointLayout = KINECT_25) -> SynthBundle:
    """Generate a dataset in memory. Same config and seed, same arrays."""
    if layout.J != len(_KINECT_BASE):
        raise ValueError("the synthetic generator only builds Kinect-25 skeletons")
    root = np.random.SeedSequence(cfg.seed)
    world_ss, *seq_ss = root.spawn(1 + cfg.num_sequences)
    world = _build_world(cfg, world_ss)
    records, corrs = [], {}
    clamped = 0
    for i in range(cfg.num_sequences):
        rec, corr, n_clamped = _sequence(i, cfg, world, seq_ss[i], layout)
        records.append(rec)
        corrs[rec.id] = corr
        clamped += n_clamped
    manifest = _manifest(cfg, layout, records)
    manifest["clamped_keypoints"] = clamped
    return SynthBundle(
        dataset=Dataset(layout=layout, sequences=records, manifest=manifest),
        correspondences=corrs,
        response_maps={"upper": world.resp_upper, "lower": world.resp_lower},
        prototypes={
            "wearer_upper": world.wearer_upper, "wearer_lower": world.wearer_lower,
            "interactee_upper": world.inter_upper, "interactee_lower": world.inter_lower,
        },
    )


_CHANNEL_FILES = ("scene", "keypoints2d", "homographies", "correspondences", "gt", "posture")


def _manifest(cfg: SynthConfig, layout: JointLayout, records: list[SequenceRecord]) -> dict:
    seqs = []
    for rec in records:
        files = {name: f"{rec.id}/{name}.y2me" for name in _CHANNEL_FILES}
        files.update({name: f"{rec.id}/{name}.y2me" for name in rec.extra})
        seqs.append({
            "id": rec.id,
            "frame_count": rec.n_frames,
            "activity": rec.activity,
            "split": rec.split,
            "files": files,
        })
    return {
        "format_version": MANIFEST_VERSION,
        "fps": FPS,
        "layout": layout.to_dict(),
        "layout_hash": layout.hash(),
        "activities": list(cfg.activities),
        "channels": {
            "scene": SCENE_DIM,
            "keypoints2d": KEYPOINT_DIM,
            "homographies": 9,
            "correspondences": 5,
            "gt": 3 * layout.J,
            "posture": 1,
            "second_person_3d": 3 * layout.J,
            "second_person_3d_pred": 3 * layout.J,
            "wearer_classes": 2,
            "interactee_classes": 2,
        },
        "image_size": [IMAGE_W, IMAGE_H],
        "bayes_ceiling": cfg.bayes_ceiling(),
        "synth_config": _jsonable(asdict(cfg)),
        "sequences": seqs,
    }


def _jsonable(d: dict) -> dict:
    return json.loads(json.dumps(d))


def generate(cfg: SynthConfig, out_dir, layout: JointLayout = KINECT_25) -> Path:
    """Write a synthetic bundle under ``out_dir``; returns the manifest path."""
    bundle = synthesize(cfg, layout)
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for rec in bundle.dataset.sequences:
            d = out / rec.id
            write_blob(d / "scene.y2me", rec.scene)
            write_blob(d / "keypoints2d.y2me", rec.keypoints)
            write_blob(d / "homographies.y2me", rec.homographies)
            write_blob(d / "correspondences.y2me", bundle.correspondences[rec.id])
            write_blob(d / "gt.y2me", rec.gt.reshape(rec.n_frames, -1))
            write_blob(d / "posture.y2me", rec.posture[:, None])
            for name, arr in rec.extra.items():
                write_blob(d / f"{name}.y2me", arr)
        path = out / "manifest.json"
        write_manifest(path, bundle.dataset.manifest)
        atomic_write_text(out / "synth_config.json", json.dumps(bundle.dataset.manifest["synth_config"],
                                                               indent=2, sort_keys=True) + "\n")
    except OSError as exc:
        raise IoFailure(f"could not write synthetic bundle to {out}: {exc}") from exc
    return path
