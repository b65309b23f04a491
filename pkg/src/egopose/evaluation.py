"""Error reports, constant-pose baselines, feature ablations and
second-person substitutions.

All errors are per-joint Euclidean distances (cm) between skeletons that
were both passed through :func:`egopose.skeleton.align_for_eval`, scored
against the continuous ground truth. "All" is the joint-weighted mean over
every frame and joint.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field, replace
from typing import NamedTuple

import numpy as np

from .codebook import FullBodyCodebook, PoseCodebook
from .dataio import SITTING, STANDING, Dataset, SequenceRecord, atomic_write_text
from .errors import MissingChannel, MissingGroundTruth, NoTaggedFrames, UnknownActivityTag
from .model import ModelConfig, SequenceBatch, decode, forward
from .skeleton import JointLayout, align_for_eval, joint_distances
from .training import TrainConfig, TrainState, head_targets, model_config_for, train

SUBSTITUTION_MODES = ("true_detector", "gt_3d", "still", "zero", "random", "predicted_3d_file")
THREE_D_CHANNELS = {"gt_3d": "second_person_3d", "predicted_3d_file": "second_person_3d_pred"}

# rows of the feature ablation table: name -> (use_o, use_x)
ABLATIONS = {
    "ours": (True, True),
    "w/o x": (True, False),
    "w/o o": (False, True),
    "w/o both": (False, False),
}


# ----------------------------------------------------------------------------
# reports


class SequenceErrors(NamedTuple):
    sequence_id: str
    activity: str
    errors: np.ndarray  # (N, J) cm


class GroupRow(NamedTuple):
    upper: float
    lower: float
    all: float
    frames: int


def _group(errors: np.ndarray, layout: JointLayout) -> GroupRow:
    return GroupRow(
        upper=float(errors[:, list(layout.upper_idx)].mean()),
        lower=float(errors[:, list(layout.lower_idx)].mean()),
        all=float(errors.mean()),
        frames=len(errors),
    )


def per_activity_report(seq_errors: list[SequenceErrors], layout: JointLayout,
                        activities: list[str] | None = None) -> dict[str, GroupRow]:
    """One Upp/Bot/All row per activity, in ``activities`` order when given."""
    if activities is not None:
        for se in seq_errors:
            if se.activity not in activities:
                raise UnknownActivityTag(f"sequence {se.sequence_id} has unknown activity {se.activity!r}")
        order = [a for a in activities if any(se.activity == a for se in seq_errors)]
    else:
        order = sorted({se.activity for se in seq_errors})
    return {
        a: _group(np.concatenate([se.errors for se in seq_errors if se.activity == a]), layout)
        for a in order
    }


@dataclass
class EvalReport:
    """Aggregated errors; ``overall`` is joint-weighted over all frames."""

    layout: JointLayout
    per_joint: np.ndarray
    upper: float
    lower: float
    overall: float
    frame_count: int
    per_activity: dict[str, GroupRow] = field(default_factory=dict)
    accuracy: dict[str, float] = field(default_factory=dict)
    sequences: list[SequenceErrors] = field(default_factory=list, repr=False)

    @classmethod
    def from_errors(cls, seq_errors: list[SequenceErrors], layout: JointLayout,
                    activities: list[str] | None = None, accuracy: dict | None = None) -> EvalReport:
        if not seq_errors:
            raise MissingGroundTruth("nothing to score")
        errs = np.concatenate([se.errors for se in seq_errors])
        g = _group(errs, layout)
        return cls(
            layout=layout,
            per_joint=errs.mean(axis=0),
            upper=g.upper,
            lower=g.lower,
            overall=g.all,
            frame_count=g.frames,
            per_activity=per_activity_report(seq_errors, layout, activities),
            accuracy=dict(accuracy or {}),
            sequences=list(seq_errors),
        )

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values()))) if self.accuracy else float("nan")

    def rows(self) -> list[dict]:
        out = [dict(scope="all", name="all", upp=self.upper, bot=self.lower, all=self.overall, frames=self.frame_count)]
        for act, r in self.per_activity.items():
            out.append(dict(scope="activity", name=act, upp=r.upper, bot=r.lower, all=r.all, frames=r.frames))
        for j, name in enumerate(self.layout.joint_names):
            part = "upp" if j in self.layout.upper_idx else "bot"
            row = dict(scope="joint", name=name, upp="", bot="", all=float(self.per_joint[j]), frames=self.frame_count)
            row[part] = float(self.per_joint[j])
            out.append(row)
        for head, acc in self.accuracy.items():
            out.append(dict(scope="accuracy", name=head, upp="", bot="", all=acc, frames=self.frame_count))
        return out

    def to_csv(self, path=None) -> str:
        buf = io.StringIO()
        w = csv.DictWriter(buf, fieldnames=["scope", "name", "upp", "bot", "all", "frames"], lineterminator="\n")
        w.writeheader()
        w.writerows(self.rows())
        text = buf.getvalue()
        if path is not None:
            atomic_write_text(path, text)
        return text

    def table(self, title: str = "") -> str:
        lines = []
        if title:
            lines.append(title)
        lines.append("joint error (cm); All = joint-weighted mean over all frames")
        lines.append(f"{'':<16}{'Upp':>8}{'Bot':>8}{'All':>8}{'frames':>9}")
        lines.append(f"{'overall':<16}{self.upper:>8.2f}{self.lower:>8.2f}{self.overall:>8.2f}{self.frame_count:>9d}")
        for act, r in self.per_activity.items():
            lines.append(f"{act:<16}{r.upper:>8.2f}{r.lower:>8.2f}{r.all:>8.2f}{r.frames:>9d}")
        for head, acc in self.accuracy.items():
            lines.append(f"accuracy[{head}] {100 * acc:.1f}%")
        return "\n".join(lines)


def score_predictions(predictions: dict[str, np.ndarray], sequences: list[SequenceRecord], layout: JointLayout,
                      activities: list[str] | None = None, accuracy: dict | None = None) -> EvalReport:
    """Report for ``predictions[seq.id]`` ``(N, J, 3)`` against each sequence's gt."""
    seq_errors = []
    for seq in sequences:
        if seq.gt is None:
            raise MissingGroundTruth(f"sequence {seq.id} has no ground truth")
        pred = np.asarray(predictions[seq.id], dtype=np.float64)
        errs = joint_distances(align_for_eval(pred, layout), align_for_eval(seq.gt.astype(np.float64), layout))
        seq_errors.append(SequenceErrors(seq.id, seq.activity, errs))
    return EvalReport.from_errors(seq_errors, layout, activities, accuracy)


# ----------------------------------------------------------------------------
# model inference


def sequence_batch(sequences: list[SequenceRecord], dtype=np.float32) -> SequenceBatch:
    """Whole sequences, trailing-padded into one batch (``prev`` is zeros)."""
    T = max(s.n_frames for s in sequences)
    B = len(sequences)
    first = sequences[0]
    m = np.zeros((B, T, first.motion.shape[1]), dtype=dtype)
    o = np.zeros((B, T, first.keypoints.shape[1]), dtype=dtype)
    s = np.zeros((B, T, first.scene.shape[1]), dtype=dtype)
    mask = np.zeros((B, T), dtype=bool)
    for k, seq in enumerate(sequences):
        n = seq.n_frames
        m[k, :n], o[k, :n], s[k, :n] = seq.motion, seq.keypoints, seq.scene
        mask[k, :n] = True
    return SequenceBatch(m=m, o=o, s=s, prev=np.zeros((B, T), dtype=np.int64), mask=mask)


def _feedback_for(state: TrainState, codebook):
    if state.head != "regression":
        return None
    J = codebook.layout.J
    return lambda out: codebook.quantize_many(np.asarray(out, dtype=np.float64).reshape(-1, J, 3))


def decode_head(state: TrainState, sequences: list[SequenceRecord], codebook, cfg: ModelConfig | None = None):
    """Autoregressive outputs and ids, one ``(N, ...)`` pair per sequence."""
    cfg = cfg or state.model_cfg
    batch = sequence_batch(sequences, state.params.dtype)
    outs, ids, _ = decode(batch, state.params, cfg, state.init_id, _feedback_for(state, codebook))
    return [(outs[k, : s.n_frames], ids[k, : s.n_frames]) for k, s in enumerate(sequences)]


@dataclass
class PoseModel:
    """Trained heads plus the codebook that maps their ids back to skeletons.

    ``heads`` is ``{"upper": .., "lower": ..}`` for the mixed codebook,
    ``{"single": ..}`` or ``{"regression": ..}`` for a full-body one.
    """

    codebook: PoseCodebook | FullBodyCodebook
    heads: dict[str, TrainState]

    def __post_init__(self) -> None:
        kinds = set(self.heads)
        if kinds not in ({"upper", "lower"}, {"single"}, {"regression"}):
            raise ValueError(f"need upper+lower, single, or regression heads; got {sorted(kinds)}")

    @property
    def layout(self) -> JointLayout:
        return self.codebook.layout

    def with_features(self, use_o: bool | None = None, use_x: bool | None = None) -> PoseModel:
        """Same weights with a feature channel switched off at inference."""
        heads = {}
        for name, st in self.heads.items():
            cfg = st.model_cfg
            cfg = replace(cfg, use_o=cfg.use_o if use_o is None else use_o, use_x=cfg.use_x if use_x is None else use_x)
            heads[name] = replace(st, model_cfg=cfg)
        return PoseModel(self.codebook, heads)

    def predict(self, sequences: list[SequenceRecord]):
        """Per sequence: ``(ids, poses)``; ids are ``(N, 2)`` for the mixed
        codebook and ``(N,)`` otherwise, poses ``(N, J, 3)``."""
        if "upper" in self.heads:
            up = decode_head(self.heads["upper"], sequences, self.codebook)
            lo = decode_head(self.heads["lower"], sequences, self.codebook)
            out = []
            for (_, iu), (_, il) in zip(up, lo):
                ids = np.stack([iu, il], axis=1)
                out.append((ids, self.codebook.reconstruct_many(ids)))
            return out
        (name,) = self.heads
        res = decode_head(self.heads[name], sequences, self.codebook)
        if name == "regression":
            J = self.layout.J
            return [(ids, outs.astype(np.float64).reshape(-1, J, 3)) for outs, ids in res]
        return [(ids, self.codebook.reconstruct_many(ids)) for _, ids in res]


def evaluate(model: PoseModel, sequences, activities: list[str] | None = None) -> EvalReport:
    """Autoregressive decoding on ``sequences`` scored against the continuous gt."""
    if isinstance(sequences, Dataset):
        activities = activities or sequences.activities
        sequences = sequences.sequences
    for seq in sequences:
        if seq.gt is None:
            raise MissingGroundTruth(f"sequence {seq.id} has no ground truth")
    preds = model.predict(sequences)
    accuracy = {}
    for head in model.heads:
        if head == "regression":
            continue
        hits = total = 0
        for seq, (ids, _) in zip(sequences, preds):
            _, truth = head_targets(seq, model.codebook, head)
            col = ids[:, 0 if head == "upper" else 1] if ids.ndim == 2 else ids
            hits += int((col == truth).sum())
            total += len(truth)
        accuracy[head] = hits / total
    return score_predictions({s.id: p for s, (_, p) in zip(sequences, preds)}, sequences, model.layout,
                             activities, accuracy)


def teacher_forced_accuracy(state: TrainState, sequences: list[SequenceRecord], codebook) -> float:
    """Frame accuracy when every frame is fed the true previous id (eval-mode BN)."""
    hits = total = 0
    for seq in sequences:
        _, ids = head_targets(seq, codebook, state.head)
        batch = sequence_batch([seq], state.params.dtype)
        batch.prev[0] = np.concatenate([[state.init_id], ids[:-1]])
        out, _ = forward(batch, state.params, state.model_cfg, bn_mode="eval")
        hits += int((np.argmax(out[0], axis=-1) == ids).sum())
        total += len(ids)
    return hits / total


# ----------------------------------------------------------------------------
# baselines


def constant_pose(mode: str, train_sequences: list[SequenceRecord]) -> np.ndarray:
    """Mean continuous pose over training frames tagged standing or sitting."""
    code = {"stand": STANDING, "sit": SITTING}.get(mode)
    if code is None:
        raise ValueError(f"mode must be 'stand' or 'sit', got {mode!r}")
    frames = [s.gt[s.posture == code] for s in train_sequences if s.gt is not None]
    frames = [f for f in frames if len(f)]
    if not frames:
        raise NoTaggedFrames(f"no training frames tagged {mode}")
    return np.concatenate(frames).astype(np.float64).mean(axis=0)


def baseline_constant(mode: str, train_sequences, test_sequences, layout: JointLayout | None = None,
                      activities: list[str] | None = None):
    """``(pose, report)`` for the predictor emitting one fixed pose everywhere."""
    if isinstance(train_sequences, Dataset):
        layout = layout or train_sequences.layout
        train_sequences = train_sequences.sequences
    if isinstance(test_sequences, Dataset):
        activities = activities or test_sequences.activities
        layout = layout or test_sequences.layout
        test_sequences = test_sequences.sequences
    pose = constant_pose(mode, train_sequences)
    preds = {s.id: np.broadcast_to(pose, (s.n_frames,) + pose.shape) for s in test_sequences}
    return pose, score_predictions(preds, test_sequences, layout, activities)


# ----------------------------------------------------------------------------
# ablations and substitutions


def train_pose_model(dataset: Dataset, codebook, train_cfg: TrainConfig, E: int = 256, D: int = 512,
                     use_o: bool = True, use_x: bool = True, mode: str | None = None) -> PoseModel:
    """Train every head the codebook calls for (or the regression head)."""
    first = dataset.split("train")[0]
    o_dim = first.keypoints.shape[1]
    if mode is None:
        mode = "mixed" if isinstance(codebook, PoseCodebook) else "single"
    heads = ("upper", "lower") if mode == "mixed" else (mode,)
    states = {}
    for head in heads:
        cfg = model_config_for(head, codebook, E=E, D=D, o_dim=o_dim, use_o=use_o, use_x=use_x)
        states[head] = train(dataset, codebook, head, cfg, train_cfg)
    return PoseModel(codebook, states)


def ablate_features(dataset: Dataset, codebook, train_cfg: TrainConfig, use_o: bool = True, use_x: bool = True,
                    E: int = 256, D: int = 512):
    """Train a variant with the disabled channels zeroed (same input size) and
    evaluate it on the test split; returns ``(model, report)``."""
    model = train_pose_model(dataset, codebook, train_cfg, E=E, D=D, use_o=use_o, use_x=use_x)
    return model, evaluate(model, dataset.split("test"), dataset.activities)


def still_vector(reference: list[SequenceRecord]) -> np.ndarray:
    """Average second-person vector over frames where the wearer is tagged standing.

    Missing joints are zeros in the stored vectors; each slot is averaged
    over the frames where that joint was detected.
    """
    rows = [s.keypoints[s.posture == STANDING] for s in reference]
    rows = [r for r in rows if len(r)]
    if not rows:
        raise NoTaggedFrames("no standing-tagged frames to average")
    kp = np.concatenate(rows).astype(np.float64)
    present = kp.reshape(len(kp), -1, 2).any(axis=-1)
    present = np.repeat(present, 2, axis=1)
    counts = present.sum(axis=0)
    return np.where(counts > 0, (kp * present).sum(axis=0) / np.maximum(counts, 1), 0.0)


def substitute_second_person(dataset: Dataset, mode: str, seed: int = 0,
                             reference: Dataset | list[SequenceRecord] | None = None) -> Dataset:
    """A view of ``dataset`` with the second-person channel replaced.

    ``reference`` provides the standing frames for ``still`` (default: the
    dataset's train split, or the whole dataset if it has none). ``random``
    tiles the channel of another sequence with a different activity, drawn
    from ``dataset`` itself with a generator seeded by ``seed``. The chosen
    sources are recorded under ``manifest["substitution"]``.
    """
    if mode not in SUBSTITUTION_MODES:
        raise ValueError(f"unknown substitution mode {mode!r}; expected one of {SUBSTITUTION_MODES}")
    seqs = dataset.sequences
    sources: dict[str, str] = {}
    if mode == "true_detector":
        new = list(seqs)
    elif mode == "zero":
        new = [replace(s, keypoints=np.zeros_like(s.keypoints)) for s in seqs]
    elif mode == "still":
        if reference is None:
            reference = dataset.split("train") or seqs
        elif isinstance(reference, Dataset):
            reference = reference.sequences
        vec = still_vector(reference).astype(seqs[0].keypoints.dtype)
        new = [replace(s, keypoints=np.tile(vec, (s.n_frames, 1))) for s in seqs]
    elif mode == "random":
        rng = np.random.default_rng(seed)
        new = []
        for s in seqs:
            pool = [c for c in seqs if c.activity != s.activity]
            if not pool:
                raise MissingChannel(f"no sequence with an activity other than {s.activity!r} to draw from")
            src = pool[int(rng.integers(len(pool)))]
            reps = -(-s.n_frames // src.n_frames)
            kp = np.tile(src.keypoints, (reps, 1))[: s.n_frames]
            sources[s.id] = src.id
            new.append(replace(s, keypoints=kp.copy()))
    else:
        channel = THREE_D_CHANNELS[mode]
        new = []
        for s in seqs:
            if channel not in s.extra:
                raise MissingChannel(f"sequence {s.id} has no {channel!r} channel for mode {mode!r}")
            new.append(replace(s, keypoints=s.extra[channel]))
    manifest = dict(dataset.manifest)
    manifest["substitution"] = {"mode": mode, "seed": seed, "sources": sources}
    return Dataset(dataset.layout, new, manifest)
