"""Sliding-window training with Adam, gradient clipping and checkpoints.

Checkpoint layout::

    b"Y2CK"  u32 header_len  header (UTF-8 JSON)  payload

The payload holds raw little-endian tensors in the order listed under
``header["tensors"]``: model weights in declaration order, the batch-norm
running statistics, then the Adam first and second moments. The header
carries both configs, progress counters, the loss curve and a SHA-256 of
the payload.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, NamedTuple

import numpy as np

from .codebook import FullBodyCodebook, PoseCodebook
from .dataio import Dataset, SequenceRecord, atomic_write_bytes, atomic_write_text
from .errors import (
    ChecksumError,
    ConfigMismatch,
    DimensionMismatch,
    DivergenceDetected,
    MisalignedSequence,
    MissingGroundTruth,
)
from .model import ModelConfig, ModelParams, SequenceBatch, decode, init_params, loss_and_grads, updated_bn_stats

log = logging.getLogger(__name__)

HEAD_KINDS = ("upper", "lower", "single", "regression")
CKPT_MAGIC = b"Y2CK"
CKPT_VERSION = 1
_LEN = struct.Struct("<I")


@dataclass(frozen=True)
class TrainConfig:
    window_len: int = 512
    window_overlap: int = 32
    min_window_len: int = 64
    batch_size: int = 32
    epochs: int = 20
    lr_phase1: float = 1e-3
    lr_phase2: float = 1e-4
    lr_switch_epoch: int = 10  # last epoch at lr_phase1
    seed: int = 0
    precision: str = "float32"
    clip_norm: float = 5.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    # probability of replacing a teacher-forced previous id with a random id
    prev_noise: float = 0.0
    # scheduled sampling: probability of feeding the model's own previous prediction
    sampling_prob: float = 0.0
    sampling_ramp_epochs: int = 0
    # z-score the motion and keypoint channels with train-split statistics
    standardize_inputs: bool = True

    def __post_init__(self) -> None:
        if not self.window_len > self.window_overlap >= 0:
            raise ValueError("need window_len > window_overlap >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise ValueError("batch_size must be >= 1 and epochs >= 0")
        if self.min_window_len < 1:
            raise ValueError("min_window_len must be >= 1")
        if not (0.0 <= self.prev_noise <= 1.0 and 0.0 <= self.sampling_prob <= 1.0):
            raise ValueError("prev_noise and sampling_prob must lie in [0, 1]")
        if self.precision not in ("float32", "float64"):
            raise ValueError("precision must be float32 or float64")

    @property
    def stride(self) -> int:
        return self.window_len - self.window_overlap

    @property
    def dtype(self):
        return np.dtype(self.precision)

    def sampling_at(self, epoch: int) -> float:
        """Scheduled-sampling probability, ramped linearly over the first epochs."""
        if self.sampling_ramp_epochs <= 0:
            return self.sampling_prob
        return self.sampling_prob * min(1.0, epoch / self.sampling_ramp_epochs)

    def lr_at(self, epoch: int) -> float:
        """Learning rate for 1-based ``epoch``."""
        return self.lr_phase1 if epoch <= self.lr_switch_epoch else self.lr_phase2

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)


def window_bounds(n_frames: int, window_len: int, overlap: int, min_len: int = 64) -> list[tuple[int, int]]:
    """``[a, b)`` ranges with stride ``window_len - overlap``.

    Full windows are emitted while they fit; one terminal window covering
    the remaining tail is kept if it has at least ``min_len`` frames.
    """
    stride = window_len - overlap
    out = []
    a = 0
    while a + window_len <= n_frames:
        out.append((a, a + window_len))
        a += stride
    # tail not covered by the last full window
    covered = out[-1][1] if out else 0
    if covered < n_frames:
        start = a if out else 0
        if n_frames - start >= min_len:
            out.append((start, n_frames))
    return out


class TrainingWindow(NamedTuple):
    sequence_id: str
    start: int
    stop: int

    @property
    def length(self) -> int:
        return self.stop - self.start


def _check_aligned(seq: SequenceRecord) -> None:
    n = seq.n_frames
    lengths = {"keypoints": len(seq.keypoints), "homographies": len(seq.homographies), "posture": len(seq.posture)}
    if seq.gt is not None:
        lengths["gt"] = len(seq.gt)
    bad = {k: v for k, v in lengths.items() if v != n}
    if bad:
        raise MisalignedSequence(f"sequence {seq.id}: {bad} rows vs {n} scene rows")


def make_windows(sequences, cfg: TrainConfig) -> list[TrainingWindow]:
    """Windows over every sequence in order; never crosses sequence boundaries."""
    seqs = sequences.sequences if isinstance(sequences, Dataset) else sequences
    out = []
    for seq in seqs:
        _check_aligned(seq)
        for a, b in window_bounds(seq.n_frames, cfg.window_len, cfg.window_overlap, cfg.min_window_len):
            out.append(TrainingWindow(seq.id, a, b))
    return out


# ----------------------------------------------------------------------------
# targets and batches


def head_targets(seq: SequenceRecord, codebook, head: str) -> tuple[np.ndarray, np.ndarray]:
    """``(targets, ids)`` for one sequence.

    ``ids`` are the class ids fed back as the previous pose; ``targets`` are
    the same ids for classification heads and flattened continuous poses for
    the regression head.
    """
    if seq.gt is None:
        raise MissingGroundTruth(f"sequence {seq.id} has no ground truth")
    if head in ("upper", "lower"):
        if not isinstance(codebook, PoseCodebook):
            raise ConfigMismatch(f"head {head!r} needs a mixed upper/lower codebook")
        ids = codebook.quantize_many(seq.gt)[:, 0 if head == "upper" else 1]
        return ids, ids
    if head in ("single", "regression"):
        if not isinstance(codebook, FullBodyCodebook):
            raise ConfigMismatch(f"head {head!r} needs a single full-body codebook")
        ids = codebook.quantize_many(seq.gt)
        if head == "single":
            return ids, ids
        return seq.gt.reshape(seq.n_frames, -1).astype(np.float64), ids
    raise ValueError(f"unknown head {head!r}; expected one of {HEAD_KINDS}")


def head_K(codebook, head: str) -> int:
    if head == "upper":
        return codebook.K_upp
    if head == "lower":
        return codebook.K_bot
    return codebook.K


def initial_pose_id(train_sequences, codebook, head: str) -> int:
    """Codebook id nearest to the mean training pose."""
    poses = [s.gt for s in train_sequences if s.gt is not None]
    if not poses:
        raise MissingGroundTruth("no training ground truth to average")
    mean_pose = np.concatenate(poses).astype(np.float64).mean(axis=0)
    if head in ("upper", "lower"):
        return int(codebook.quantize(mean_pose)[0 if head == "upper" else 1])
    return int(codebook.quantize(mean_pose))


INPUT_STD_FLOOR = 1e-3


def fit_input_normalizer(sequences) -> tuple[np.ndarray, np.ndarray]:
    """Per-dimension mean and standard deviation of ``m ++ o`` over ``sequences``.

    Keypoint class differences are a few hundredths of the image size, which
    the network barely sees unscaled. The floor keeps constant dimensions
    (``h00 = 1``) finite.
    """
    mo = np.concatenate(
        [np.concatenate([np.asarray(s.motion, np.float64), np.asarray(s.keypoints, np.float64)], axis=1)
         for s in sequences]
    )
    return mo.mean(axis=0), mo.std(axis=0) + INPUT_STD_FLOOR


@dataclass
class _TrackData:
    m: np.ndarray
    o: np.ndarray
    s: np.ndarray
    targets: np.ndarray
    prev: np.ndarray


def prepare_sequences(sequences, codebook, head: str, init_id: int, dtype=np.float32) -> dict[str, _TrackData]:
    """Per-sequence feature arrays and teacher-forcing inputs.

    The previous-pose input of a window's first frame is always ``init_id``
    (see :func:`assemble_batch`); inside a window frame ``t`` gets the
    ground-truth id of ``t-1``.
    """
    out = {}
    for seq in sequences:
        targets, ids = head_targets(seq, codebook, head)
        prev = np.concatenate([[init_id], ids[:-1]]).astype(np.int64)
        out[seq.id] = _TrackData(
            m=seq.motion.astype(dtype),
            o=np.asarray(seq.keypoints, dtype=dtype),
            s=seq.scene.astype(dtype),
            targets=targets,
            prev=prev,
        )
    return out


def assemble_batch(windows: list[TrainingWindow], data: dict[str, _TrackData], init_id: int, regression: bool):
    """Stack windows into a trailing-padded batch; returns ``(batch, targets)``."""
    T = max(w.length for w in windows)
    B = len(windows)
    first = data[windows[0].sequence_id]
    m = np.zeros((B, T, first.m.shape[1]), dtype=first.m.dtype)
    o = np.zeros((B, T, first.o.shape[1]), dtype=first.o.dtype)
    s = np.zeros((B, T, first.s.shape[1]), dtype=first.s.dtype)
    prev = np.full((B, T), init_id, dtype=np.int64)
    mask = np.zeros((B, T), dtype=bool)
    if regression:
        targets = np.zeros((B, T, first.targets.shape[1]), dtype=np.float64)
    else:
        targets = np.zeros((B, T), dtype=np.int64)
    for k, w in enumerate(windows):
        d = data[w.sequence_id]
        n = w.length
        sl = slice(w.start, w.stop)
        m[k, :n], o[k, :n], s[k, :n] = d.m[sl], d.o[sl], d.s[sl]
        prev[k, 1:n] = d.prev[w.start + 1 : w.stop]
        targets[k, :n] = d.targets[sl]
        mask[k, :n] = True
    return SequenceBatch(m=m, o=o, s=s, prev=prev, mask=mask), targets


def corrupt_prev(batch: SequenceBatch, K: int, rate: float, seed) -> None:
    """Replace a ``rate`` fraction of previous-pose inputs (never frame 0) with
    uniform random ids, in place."""
    rng = np.random.default_rng(seed)
    hit = rng.random(batch.prev.shape) < rate
    hit[:, 0] = False
    batch.prev[hit] = rng.integers(K, size=int(hit.sum()))


def sample_prev(batch: SequenceBatch, state: TrainState, rate: float, seed, codebook=None) -> None:
    """Scheduled sampling, in place: each frame after the first is fed the
    model's own previous prediction with probability ``rate``.

    The predictions come from a gradient-free pass that consumes the mixed
    inputs as it goes; the training forward pass then treats the resulting
    ids as fixed inputs.
    """
    rng = np.random.default_rng(seed)
    own = rng.random(batch.prev.shape) < rate
    own[:, 0] = False
    feedback = None
    if state.model_cfg.head == "regression":
        J = codebook.layout.J
        feedback = lambda out: codebook.quantize_many(np.asarray(out, dtype=np.float64).reshape(-1, J, 3))  # noqa: E731
    _, _, fed = decode(batch, state.params, state.model_cfg, state.init_id, feedback, use_own=own, bn_mode="train")
    batch.prev[...] = fed


# ----------------------------------------------------------------------------
# optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: ModelParams) -> AdamState:
        return cls({k: np.zeros_like(w) for k, w in params.weights.items()},
                   {k: np.zeros_like(w) for k, w in params.weights.items()})


def clip_gradients(grads: dict[str, np.ndarray], max_norm: float) -> float:
    """Scale ``grads`` in place to global norm <= ``max_norm``; returns the pre-clip norm."""
    total = float(np.sqrt(sum(float(np.sum(np.square(g, dtype=np.float64))) for g in grads.values())))
    if max_norm > 0 and total > max_norm:
        scale = max_norm / (total + 1e-12)
        for g in grads.values():
            g *= g.dtype.type(scale)
    return total


def adam_update(params: ModelParams, grads: dict[str, np.ndarray], state: AdamState, lr: float,
                cfg: TrainConfig) -> None:
    state.step += 1
    b1, b2 = cfg.beta1, cfg.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, w in params.weights.items():
        g = grads[name]
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w -= (lr * (m / c1) / (np.sqrt(v / c2) + cfg.adam_eps)).astype(w.dtype)


# ----------------------------------------------------------------------------
# training loop


@dataclass
class TrainState:
    head: str
    model_cfg: ModelConfig
    train_cfg: TrainConfig
    params: ModelParams
    opt: AdamState
    init_id: int
    epoch: int = 0
    loss_curve: list[tuple[int, int, float, float]] = field(default_factory=list)


def model_config_for(head: str, codebook, E: int = 256, D: int = 512, layout_J: int | None = None, **kw) -> ModelConfig:
    K = head_K(codebook, head)
    if head == "regression":
        J = layout_J or codebook.layout.J
        return ModelConfig(K=K, E=E, D=D, head="regression", output_dim=3 * J, **kw)
    return ModelConfig(K=K, E=E, D=D, **kw)


def new_state(dataset: Dataset, codebook, head: str, model_cfg: ModelConfig, train_cfg: TrainConfig) -> TrainState:
    if head not in HEAD_KINDS:
        raise ValueError(f"unknown head {head!r}; expected one of {HEAD_KINDS}")
    if model_cfg.K != head_K(codebook, head):
        raise ConfigMismatch(f"model K={model_cfg.K} but the {head} codebook has {head_K(codebook, head)} classes")
    if (model_cfg.head == "regression") != (head == "regression"):
        raise ConfigMismatch("regression head kind and model head disagree")
    train_seqs = dataset.split("train")
    init_id = initial_pose_id(train_seqs, codebook, head)
    params = init_params(model_cfg, seed=train_cfg.seed, dtype=train_cfg.dtype)
    if train_cfg.standardize_inputs:
        mean, std = fit_input_normalizer(train_seqs)
        if mean.shape[0] != model_cfg.motion_dim + model_cfg.o_dim:
            raise DimensionMismatch(
                f"training inputs have {mean.shape[0]} direct dims, model expects {model_cfg.motion_dim + model_cfg.o_dim}"
            )
        params.in_mean, params.in_std = mean.astype(train_cfg.dtype), std.astype(train_cfg.dtype)
    return TrainState(head, model_cfg, train_cfg, params, AdamState.zeros_like(params), init_id)


def run_epochs(state: TrainState, dataset: Dataset, codebook, until_epoch: int | None = None,
               checkpoint_dir=None, on_epoch: Callable[[TrainState], None] | None = None) -> TrainState:
    """Advance ``state`` epoch by epoch up to ``until_epoch`` (default: the config's epochs)."""
    cfg = state.train_cfg
    until = cfg.epochs if until_epoch is None else until_epoch
    train_seqs = dataset.split("train")
    windows = make_windows(train_seqs, cfg)
    if not windows:
        raise MisalignedSequence("no training windows: every train sequence is shorter than min_window_len")
    data = prepare_sequences(train_seqs, codebook, state.head, state.init_id, cfg.dtype)
    regression = state.head == "regression"
    while state.epoch < until:
        epoch = state.epoch + 1
        lr = cfg.lr_at(epoch)
        order = np.random.default_rng(cfg.seed + epoch).permutation(len(windows))
        for bi, start in enumerate(range(0, len(order), cfg.batch_size)):
            chunk = [windows[i] for i in order[start : start + cfg.batch_size]]
            batch, targets = assemble_batch(chunk, data, state.init_id, regression)
            if cfg.prev_noise > 0:
                corrupt_prev(batch, state.model_cfg.K, cfg.prev_noise, (cfg.seed, epoch, bi))
            if cfg.sampling_at(epoch) > 0:
                sample_prev(batch, state, cfg.sampling_at(epoch), (cfg.seed, epoch, bi), codebook)
            loss, grads, cache = loss_and_grads(batch, targets, state.params, state.model_cfg)
            if not np.isfinite(loss) or not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise DivergenceDetected(
                    f"non-finite loss {loss} at epoch {epoch}, batch {bi} (lr={lr}); windows "
                    + ", ".join(f"{w.sequence_id}[{w.start}:{w.stop})" for w in chunk)
                )
            state.params.bn_mean, state.params.bn_var = updated_bn_stats(cache, state.params)
            clip_gradients(grads, cfg.clip_norm)
            adam_update(state.params, grads, state.opt, lr, cfg)
            state.loss_curve.append((epoch, bi, float(loss), lr))
        state.epoch = epoch
        epoch_losses = [r[2] for r in state.loss_curve if r[0] == epoch]
        log.info("%s epoch %d lr %.1e mean loss %.4f", state.head, epoch, lr, float(np.mean(epoch_losses)))
        if checkpoint_dir is not None:
            save_checkpoint(state, Path(checkpoint_dir) / f"{state.head}_epoch{epoch:03d}.ckpt")
        if on_epoch is not None:
            on_epoch(state)
    return state


def train(dataset: Dataset, codebook, head: str, model_cfg: ModelConfig, train_cfg: TrainConfig,
          checkpoint_dir=None) -> TrainState:
    """Train one head from scratch on the dataset's ``train`` split."""
    state = new_state(dataset, codebook, head, model_cfg, train_cfg)
    run_epochs(state, dataset, codebook, checkpoint_dir=checkpoint_dir)
    if checkpoint_dir is not None:
        write_loss_curve(Path(checkpoint_dir) / f"{head}_loss.csv", state.loss_curve)
    return state


def resume(checkpoint, dataset: Dataset, codebook, train_cfg: TrainConfig, checkpoint_dir=None) -> TrainState:
    """Continue a saved run up to ``train_cfg.epochs``.

    Every training field except ``epochs`` must match the checkpoint.
    """
    state = checkpoint if isinstance(checkpoint, TrainState) else load_checkpoint(checkpoint)
    saved = state.train_cfg.to_dict()
    wanted = train_cfg.to_dict()
    diff = sorted(k for k in saved if k != "epochs" and saved[k] != wanted[k])
    if diff:
        raise ConfigMismatch(
            "resume config differs from checkpoint in " + ", ".join(f"{k}: {saved[k]!r} != {wanted[k]!r}" for k in diff)
        )
    state.train_cfg = train_cfg
    return run_epochs(state, dataset, codebook, checkpoint_dir=checkpoint_dir)


def write_loss_curve(path, curve) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "batch", "loss", "lr"])
    for epoch, batch, loss, lr in curve:
        w.writerow([epoch, batch, repr(float(loss)), repr(float(lr))])
    atomic_write_text(path, buf.getvalue())


# ----------------------------------------------------------------------------
# checkpoints


def _tensor_list(state: TrainState) -> list[tuple[str, np.ndarray]]:
    W = state.params.weights
    tensors = [(f"weights/{k}", W[k]) for k in W]
    tensors += [("bn/mean", state.params.bn_mean), ("bn/var", state.params.bn_var)]
    tensors += [(f"adam_m/{k}", state.opt.m[k]) for k in W]
    tensors += [(f"adam_v/{k}", state.opt.v[k]) for k in W]
    if state.params.in_mean is not None:
        tensors += [("input/mean", state.params.in_mean), ("input/std", state.params.in_std)]
    return tensors


def checkpoint_bytes(state: TrainState) -> bytes:
    tensors = _tensor_list(state)
    payload = b"".join(np.ascontiguousarray(a, dtype=a.dtype.newbyteorder("<")).tobytes() for _, a in tensors)
    header = {
        "format_version": CKPT_VERSION,
        "head": state.head,
        "model_config": state.model_cfg.to_dict(),
        "train_config": state.train_cfg.to_dict(),
        "epoch": state.epoch,
        "step": state.opt.step,
        "init_id": state.init_id,
        "loss_curve": [list(r) for r in state.loss_curve],
        "tensors": [[name, list(a.shape), a.dtype.newbyteorder("<").str] for name, a in tensors],
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hdr = json.dumps(header, sort_keys=True).encode("utf-8")
    return CKPT_MAGIC + _LEN.pack(len(hdr)) + hdr + payload


def save_checkpoint(state: TrainState, path) -> Path:
    path = Path(path)
    atomic_write_bytes(path, checkpoint_bytes(state))
    return path


def parse_checkpoint(data: bytes, source: str = "<bytes>") -> TrainState:
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise ChecksumError(f"{source}: not a checkpoint (bad magic)")
    (hlen,) = _LEN.unpack_from(data, 4)
    try:
        header = json.loads(data[8 : 8 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ChecksumError(f"{source}: corrupt checkpoint header") from exc
    payload = data[8 + hlen :]
    if hashlib.sha256(payload).hexdigest() != header.get("payload_sha256"):
        raise ChecksumError(f"{source}: payload checksum mismatch")
    model_cfg = ModelConfig.from_dict(header["model_config"])
    train_cfg = TrainConfig.from_dict(header["train_config"])
    arrays = {}
    off = 0
    for name, shape, dt in header["tensors"]:
        dtype = np.dtype(dt)
        n = int(np.prod(shape)) * dtype.itemsize
        arrays[name] = np.frombuffer(payload, dtype=dtype, count=int(np.prod(shape)), offset=off).reshape(shape)
        arrays[name] = arrays[name].astype(dtype.newbyteorder("="))
        off += n
    if off != len(payload):
        raise ChecksumError(f"{source}: payload size disagrees with tensor table")
    weights = {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("weights/")}
    params = ModelParams(weights, arrays["bn/mean"], arrays["bn/var"], arrays.get("input/mean"), arrays.get("input/std"))
    opt = AdamState(
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_m/")},
        {k.split("/", 1)[1]: v for k, v in arrays.items() if k.startswith("adam_v/")},
        step=int(header["step"]),
    )
    return TrainState(
        head=header["head"],
        model_cfg=model_cfg,
        train_cfg=train_cfg,
        params=params,
        opt=opt,
        init_id=int(header["init_id"]),
        epoch=int(header["epoch"]),
        loss_curve=[(int(e), int(b), float(l), float(lr)) for e, b, l, lr in header["loss_curve"]],
    )


def load_checkpoint(path) -> TrainState:
    return parse_checkpoint(Path(path).read_bytes(), str(path))
