"""Recurrent pose classifier with hand-written backpropagation through time.

Per frame the network sees the camera-motion window ``m`` (135), the
second-person keypoints ``o`` (50), the scene descriptor ``s`` (2048) and
the previous pose id. The scene is embedded and batch-normalized
(``x = BN(W_x s)``), the previous pose id is embedded by a column lookup
(``z = W_z[:, id]``), and ``b = m ++ o ++ x ++ z`` drives a stacked LSTM.
The top hidden state is mapped by ``W_p`` to class logits, or to pose
coordinates for the regression head.

``m`` and ``o`` are standardized with fixed per-dimension statistics stored
next to the batch-norm state (identity until fitted on training data). A
disabled ``o`` channel is zeroed before standardization, exactly as if the
detector had returned nothing.

Everything operates on batch-major arrays ``(B, T, ...)`` plus a boolean
frame mask. Padding is only ever trailing, so padded frames never influence
valid ones.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .errors import EmptySequence, IndexOutOfRange, ShapeMismatch
from .features import KEYPOINT_DIM, MOTION_DIM, SCENE_DIM

HEADS = ("classification", "regression")


@dataclass(frozen=True)
class ModelConfig:
    K: int
    E: int = 256
    D: int = 512
    num_layers: int = 2
    head: str = "classification"
    output_dim: int | None = None  # regression only: 3J
    motion_dim: int = MOTION_DIM
    o_dim: int = KEYPOINT_DIM
    scene_dim: int = SCENE_DIM
    use_o: bool = True
    use_x: bool = True
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1
    forget_bias: float = 1.0

    def __post_init__(self) -> None:
        if self.head not in HEADS:
            raise ValueError(f"head must be one of {HEADS}, got {self.head!r}")
        if self.head == "regression" and not self.output_dim:
            raise ValueError("regression head needs output_dim (3J)")
        for name in ("K", "E", "D", "num_layers", "motion_dim", "o_dim", "scene_dim"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")

    @property
    def input_dim(self) -> int:
        return self.motion_dim + self.o_dim + 2 * self.E

    @property
    def n_out(self) -> int:
        return self.K if self.head == "classification" else int(self.output_dim)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        return cls(**d)


def param_shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
    """Trainable tensors in declaration order."""
    shapes = {
        "W_x": (cfg.E, cfg.scene_dim),
        "bn_gamma": (cfg.E,),
        "bn_beta": (cfg.E,),
        "W_z": (cfg.E, cfg.K),
    }
    in_dim = cfg.input_dim
    for l in range(cfg.num_layers):
        shapes[f"W_ih{l}"] = (4 * cfg.D, in_dim)
        shapes[f"W_hh{l}"] = (4 * cfg.D, cfg.D)
        shapes[f"b{l}"] = (4 * cfg.D,)
        in_dim = cfg.D
    shapes["W_p"] = (cfg.n_out, cfg.D)
    shapes["b_p"] = (cfg.n_out,)
    return shapes


@dataclass
class ModelParams:
    weights: dict[str, np.ndarray]
    bn_mean: np.ndarray
    bn_var: np.ndarray
    # standardization of the concatenated (m, o) input; not trained
    in_mean: np.ndarray | None = None
    in_std: np.ndarray | None = None

    @property
    def dtype(self):
        return self.weights["W_x"].dtype

    def copy(self) -> ModelParams:
        return ModelParams(
            {k: v.copy() for k, v in self.weights.items()},
            self.bn_mean.copy(),
            self.bn_var.copy(),
            None if self.in_mean is None else self.in_mean.copy(),
            None if self.in_std is None else self.in_std.copy(),
        )

    def astype(self, dtype) -> ModelParams:
        return ModelParams(
            {k: v.astype(dtype) for k, v in self.weights.items()},
            self.bn_mean.astype(dtype),
            self.bn_var.astype(dtype),
            None if self.in_mean is None else self.in_mean.astype(dtype),
            None if self.in_std is None else self.in_std.astype(dtype),
        )


def init_params(cfg: ModelConfig, seed: int = 0, dtype=np.float32) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) matrices, zero biases,
    forget-gate bias ``cfg.forget_bias``, BN scale 1 and shift 0."""
    rng = np.random.default_rng(seed)
    weights = {}
    for name, shape in param_shapes(cfg).items():
        if name == "bn_gamma":
            w = np.ones(shape)
        elif len(shape) == 1:
            w = np.zeros(shape)
            if name.startswith("b") and name[1:].isdigit():
                w[cfg.D : 2 * cfg.D] = cfg.forget_bias
        else:
            bound = 1.0 / np.sqrt(shape[1])
            w = rng.uniform(-bound, bound, size=shape)
        weights[name] = w.astype(dtype)
    return ModelParams(weights, np.zeros(cfg.E, dtype=dtype), np.ones(cfg.E, dtype=dtype))


# ----------------------------------------------------------------------------
# inputs


@dataclass
class SequenceBatch:
    """Frame-aligned model inputs for ``B`` sequences of up to ``T`` frames."""

    m: np.ndarray  # (B, T, motion_dim)
    o: np.ndarray  # (B, T, o_dim)
    s: np.ndarray  # (B, T, scene_dim)
    prev: np.ndarray  # (B, T) previous pose ids (teacher forcing)
    mask: np.ndarray | None = None  # (B, T) bool

    def __post_init__(self) -> None:
        if self.m.ndim != 3:
            raise ShapeMismatch("batch arrays must be (B, T, dim)")
        B, T = self.m.shape[:2]
        if T == 0:
            raise EmptySequence("sequences must have at least one frame")
        if self.mask is None:
            self.mask = np.ones((B, T), dtype=bool)
        for name in ("o", "s"):
            if getattr(self, name).shape[:2] != (B, T):
                raise ShapeMismatch(f"{name} has shape {getattr(self, name).shape}, expected ({B}, {T}, ...)")
        if self.prev.shape != (B, T) or self.mask.shape != (B, T):
            raise ShapeMismatch("prev and mask must be (B, T)")

    @property
    def shape(self) -> tuple[int, int]:
        return self.m.shape[:2]


class StepInput(NamedTuple):
    m: np.ndarray
    o: np.ndarray
    s: np.ndarray
    prev_pose_id: int


def batch_from_steps(steps: list[StepInput]) -> SequenceBatch:
    if not steps:
        raise EmptySequence("empty sequence")
    return SequenceBatch(
        m=np.stack([st.m for st in steps])[None],
        o=np.stack([st.o for st in steps])[None],
        s=np.stack([st.s for st in steps])[None],
        prev=np.array([st.prev_pose_id for st in steps], dtype=np.int64)[None],
    )


def _check_batch(batch: SequenceBatch, cfg: ModelConfig) -> None:
    if batch.m.shape[2] != cfg.motion_dim or batch.o.shape[2] != cfg.o_dim or batch.s.shape[2] != cfg.scene_dim:
        raise ShapeMismatch(
            f"feature dims {(batch.m.shape[2], batch.o.shape[2], batch.s.shape[2])} do not match "
            f"config {(cfg.motion_dim, cfg.o_dim, cfg.scene_dim)}"
        )
    if batch.prev.size and (batch.prev.min() < 0 or batch.prev.max() >= cfg.K):
        raise IndexOutOfRange(f"previous pose ids must lie in [0, {cfg.K})")


# ----------------------------------------------------------------------------
# building blocks


def direct_inputs(batch: SequenceBatch, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """``m ++ o`` after channel masking and input standardization."""
    dtype = params.dtype
    m = batch.m.astype(dtype, copy=False)
    o = batch.o.astype(dtype, copy=False) if cfg.use_o else np.zeros(batch.o.shape, dtype=dtype)
    mo = np.concatenate([m, o], axis=-1)
    if params.in_mean is not None:
        mo = (mo - params.in_mean) / params.in_std
    return mo


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _bn_train(xl: np.ndarray, maskf: np.ndarray, eps: float):
    """Per-timestep batch statistics over the valid rows of ``(B, T, E)``."""
    n = np.maximum(maskf.sum(axis=0), 1.0)  # (T, 1)
    mu = (xl * maskf).sum(axis=0) / n
    diff = xl - mu
    var = (diff * diff * maskf).sum(axis=0) / n
    inv = 1.0 / np.sqrt(var + eps)
    return diff * inv, mu, var, inv, n


def embed_scene(s: np.ndarray, params: ModelParams, cfg: ModelConfig, mode: str = "eval",
                mask: np.ndarray | None = None) -> np.ndarray:
    """``BN(W_x s)`` for ``(B, scene_dim)`` or ``(B, T, scene_dim)`` inputs.

    In ``"train"`` mode the statistics come from the batch (per timestep);
    in ``"eval"`` mode from the running estimates.
    """
    s = np.asarray(s)
    if s.shape[-1] != cfg.scene_dim:
        raise ShapeMismatch(f"scene vectors must have {cfg.scene_dim} entries, got {s.shape[-1]}")
    squeeze = s.ndim == 2
    s3 = s[:, None, :] if squeeze else s
    W = params.weights
    xl = s3 @ W["W_x"].T
    if mode == "train":
        maskf = np.ones(s3.shape[:2] + (1,), dtype=xl.dtype) if mask is None else mask[..., None].astype(xl.dtype)
        xhat = _bn_train(xl, maskf, cfg.bn_eps)[0]
    elif mode == "eval":
        xhat = (xl - params.bn_mean) / np.sqrt(params.bn_var + cfg.bn_eps)
    else:
        raise ValueError(f"mode must be 'train' or 'eval', got {mode!r}")
    x = W["bn_gamma"] * xhat + W["bn_beta"]
    return x[:, 0] if squeeze else x


def embed_prev_pose(prev_pose_id, params: ModelParams, cfg: ModelConfig) -> np.ndarray:
    """Column lookup in ``W_z``; equal to ``W_z @ onehot(id)``."""
    ids = np.asarray(prev_pose_id, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.K):
        raise IndexOutOfRange(f"pose id must lie in [0, {cfg.K})")
    return params.weights["W_z"].T[ids]


@dataclass
class LstmState:
    h: list[np.ndarray]
    c: list[np.ndarray]

    @classmethod
    def zeros(cls, cfg: ModelConfig, batch: int = 1, dtype=np.float64) -> LstmState:
        return cls(
            [np.zeros((batch, cfg.D), dtype=dtype) for _ in range(cfg.num_layers)],
            [np.zeros((batch, cfg.D), dtype=dtype) for _ in range(cfg.num_layers)],
        )

    @property
    def output(self) -> np.ndarray:
        return self.h[-1]


def _cell(a: np.ndarray, c_prev: np.ndarray, D: int):
    sig = _sigmoid(a)
    i, f, o = sig[:, :D], sig[:, D : 2 * D], sig[:, 3 * D :]
    g = np.tanh(a[:, 2 * D : 3 * D])
    c = f * c_prev + i * g
    tc = np.tanh(c)
    return i, f, g, o, c, tc, o * tc


def lstm_step(b: np.ndarray, state: LstmState, params: ModelParams, cfg: ModelConfig) -> LstmState:
    """One time step through all layers; ``b`` is ``(input_dim,)`` or ``(B, input_dim)``.

    Gate order in the stacked weight matrices is input, forget, candidate, output.
    """
    b = np.asarray(b)
    squeeze = b.ndim == 1
    inp = b[None] if squeeze else b
    if inp.shape[-1] != cfg.input_dim:
        raise ShapeMismatch(f"LSTM input must have {cfg.input_dim} entries, got {inp.shape[-1]}")
    W = params.weights
    hs, cs = [], []
    for l in range(cfg.num_layers):
        h_prev, c_prev = state.h[l], state.c[l]
        if squeeze and h_prev.ndim == 1:
            h_prev, c_prev = h_prev[None], c_prev[None]
        a = inp @ W[f"W_ih{l}"].T + h_prev @ W[f"W_hh{l}"].T + W[f"b{l}"]
        *_, c, _, h = _cell(a, c_prev, cfg.D)
        hs.append(h[0] if squeeze else h)
        cs.append(c[0] if squeeze else c)
        inp = h
    return LstmState(hs, cs)


# ----------------------------------------------------------------------------
# teacher-forced forward / backward


@dataclass
class _LayerCache:
    inp: np.ndarray
    gates: np.ndarray  # (B, T, 4D) post-activation i, f, g, o
    c: np.ndarray
    tc: np.ndarray
    h: np.ndarray


@dataclass
class ForwardCache:
    batch: SequenceBatch
    cfg: ModelConfig
    bn_mode: str
    maskf: np.ndarray
    xhat: np.ndarray | None = None
    bn_inv: np.ndarray | None = None
    bn_n: np.ndarray | None = None
    bn_mu: np.ndarray | None = None
    bn_var: np.ndarray | None = None
    layers: list[_LayerCache] = field(default_factory=list)
    out: np.ndarray | None = None


def forward(batch: SequenceBatch, params: ModelParams, cfg: ModelConfig, bn_mode: str = "train"):
    """Teacher-forced pass: ``batch.prev`` supplies the previous pose ids.

    Returns ``(outputs, cache)`` with outputs ``(B, T, n_out)``: logits for
    the classification head, coordinates for the regression head.
    """
    _check_batch(batch, cfg)
    W = params.weights
    dtype = params.dtype
    B, T = batch.shape
    maskf = batch.mask[..., None].astype(dtype)
    cache = ForwardCache(batch=batch, cfg=cfg, bn_mode=bn_mode, maskf=maskf)

    if cfg.use_x:
        xl = batch.s.astype(dtype, copy=False) @ W["W_x"].T
        if bn_mode == "train":
            xhat, mu, var, inv, n = _bn_train(xl, maskf, cfg.bn_eps)
            cache.bn_mu, cache.bn_var, cache.bn_n = mu, var, n
        elif bn_mode == "eval":
            inv = np.broadcast_to(1.0 / np.sqrt(params.bn_var + cfg.bn_eps), (T, cfg.E))
            xhat = (xl - params.bn_mean) * inv
        else:
            raise ValueError(f"bn_mode must be 'train' or 'eval', got {bn_mode!r}")
        cache.xhat, cache.bn_inv = xhat, inv
        x = W["bn_gamma"] * xhat + W["bn_beta"]
    else:
        x = np.zeros((B, T, cfg.E), dtype=dtype)
    z = W["W_z"].T[batch.prev]
    inp = np.concatenate([direct_inputs(batch, params, cfg), x, z], axis=-1)

    D = cfg.D
    for l in range(cfg.num_layers):
        pre = inp @ W[f"W_ih{l}"].T + W[f"b{l}"]
        W_hh_T = W[f"W_hh{l}"].T
        gates = np.empty((B, T, 4 * D), dtype=dtype)
        cs = np.empty((B, T, D), dtype=dtype)
        tcs = np.empty_like(cs)
        hs = np.empty_like(cs)
        h = np.zeros((B, D), dtype=dtype)
        c = np.zeros((B, D), dtype=dtype)
        for t in range(T):
            i, f, g, og, c, tc, h = _cell(pre[:, t] + h @ W_hh_T, c, D)
            gates[:, t, :D], gates[:, t, D : 2 * D] = i, f
            gates[:, t, 2 * D : 3 * D], gates[:, t, 3 * D :] = g, og
            cs[:, t], tcs[:, t], hs[:, t] = c, tc, h
        cache.layers.append(_LayerCache(inp, gates, cs, tcs, hs))
        inp = hs
    out = inp @ W["W_p"].T + W["b_p"]
    cache.out = out
    return out, cache


def backward(cache: ForwardCache, dout: np.ndarray, params: ModelParams) -> dict[str, np.ndarray]:
    """Gradients of a scalar loss given ``dout = dL/d outputs``."""
    cfg = cache.cfg
    W = params.weights
    D, E = cfg.D, cfg.E
    grads: dict[str, np.ndarray] = {}
    top = cache.layers[-1].h
    n_out = dout.shape[-1]
    grads["W_p"] = dout.reshape(-1, n_out).T @ top.reshape(-1, D)
    grads["b_p"] = dout.sum(axis=(0, 1))
    dh_ext = dout @ W["W_p"]

    B, T = cache.batch.shape
    for l in reversed(range(cfg.num_layers)):
        lc = cache.layers[l]
        W_hh = W[f"W_hh{l}"]
        da = np.empty_like(lc.gates)
        dh_next = np.zeros((B, D), dtype=dout.dtype)
        dc_next = np.zeros((B, D), dtype=dout.dtype)
        for t in range(T - 1, -1, -1):
            g4 = lc.gates[:, t]
            i, f, g, o = g4[:, :D], g4[:, D : 2 * D], g4[:, 2 * D : 3 * D], g4[:, 3 * D :]
            tc = lc.tc[:, t]
            dh = dh_ext[:, t] + dh_next
            dc = dc_next + dh * o * (1.0 - tc * tc)
            c_prev = lc.c[:, t - 1] if t > 0 else 0.0
            da[:, t, :D] = dc * g * i * (1.0 - i)
            da[:, t, D : 2 * D] = dc * c_prev * f * (1.0 - f)
            da[:, t, 2 * D : 3 * D] = dc * i * (1.0 - g * g)
            da[:, t, 3 * D :] = dh * tc * o * (1.0 - o)
            dc_next = dc * f
            dh_next = da[:, t] @ W_hh
        h_prev = np.concatenate([np.zeros((B, 1, D), dtype=lc.h.dtype), lc.h[:, :-1]], axis=1)
        da2 = da.reshape(-1, 4 * D)
        grads[f"W_ih{l}"] = da2.T @ lc.inp.reshape(-1, lc.inp.shape[-1])
        grads[f"W_hh{l}"] = da2.T @ h_prev.reshape(-1, D)
        grads[f"b{l}"] = da2.sum(axis=0)
        dh_ext = da @ W[f"W_ih{l}"]

    dinp = dh_ext
    x_off = cfg.motion_dim + cfg.o_dim
    dz = dinp[..., x_off + E :]
    gz = np.zeros((cfg.K, E), dtype=dinp.dtype)
    np.add.at(gz, cache.batch.prev.reshape(-1), dz.reshape(-1, E))
    grads["W_z"] = gz.T.copy()

    if cfg.use_x:
        dx = dinp[..., x_off : x_off + E] * cache.maskf
        grads["bn_gamma"] = (dx * cache.xhat).sum(axis=(0, 1))
        grads["bn_beta"] = dx.sum(axis=(0, 1))
        dxhat = dx * W["bn_gamma"]
        if cache.bn_mode == "train":
            maskf, n = cache.maskf, cache.bn_n
            s1 = dxhat.sum(axis=0)
            s2 = (dxhat * cache.xhat).sum(axis=0)
            dxl = maskf * (cache.bn_inv / n) * (n * dxhat - s1 - cache.xhat * s2)
        else:
            dxl = dxhat * cache.bn_inv
        s = cache.batch.s.astype(dxl.dtype, copy=False)
        grads["W_x"] = dxl.reshape(-1, E).T @ s.reshape(-1, cfg.scene_dim)
    else:
        for name in ("W_x", "bn_gamma", "bn_beta"):
            grads[name] = np.zeros_like(W[name])

    return {name: grads[name] for name in W}


def updated_bn_stats(cache: ForwardCache, params: ModelParams) -> tuple[np.ndarray, np.ndarray]:
    """Running mean/variance after one training batch.

    Per-timestep batch statistics are averaged over timesteps with at least
    two valid rows before the exponential update; a single row carries no
    variance information, so batches without such a timestep leave the
    running statistics untouched.
    """
    cfg = cache.cfg
    if not cfg.use_x or cache.bn_mode != "train":
        return params.bn_mean, params.bn_var
    valid = cache.maskf.sum(axis=0)[:, 0] >= 2  # (T,)
    if not valid.any():
        return params.bn_mean, params.bn_var
    n = cache.bn_n[valid]
    mu = cache.bn_mu[valid].mean(axis=0)
    var = (cache.bn_var[valid] * n / (n - 1.0)).mean(axis=0)
    mom = cfg.bn_momentum
    return (1 - mom) * params.bn_mean + mom * mu, (1 - mom) * params.bn_var + mom * var


# ----------------------------------------------------------------------------
# losses


def _logsumexp(x: np.ndarray) -> np.ndarray:
    mx = x.max(axis=-1, keepdims=True)
    return (mx + np.log(np.exp(x - mx).sum(axis=-1, keepdims=True)))[..., 0]


def sequence_loss(logits: np.ndarray, targets: np.ndarray) -> float:
    """Summed cross entropy ``-sum_t log softmax(logits_t)[target_t]`` for one
    ``(N, K)`` sequence."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.int64)
    if logits.ndim != 2 or targets.shape != logits.shape[:1]:
        raise ShapeMismatch("logits must be (N, K) with one target per frame")
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[1]):
        raise IndexOutOfRange("target id out of range")
    picked = logits[np.arange(len(targets)), targets]
    return float((_logsumexp(logits) - picked).sum())


def classification_loss(logits, targets, mask, reduction="mean"):
    """Masked cross entropy and its gradient w.r.t. the logits.

    ``reduction="sum"`` gives the summed sequence loss; ``"mean"`` divides by
    the number of valid frames.
    """
    if targets.size and (targets.min() < 0 or targets.max() >= logits.shape[-1]):
        raise IndexOutOfRange("target id out of range")
    maskf = mask.astype(logits.dtype)
    norm = max(float(maskf.sum()), 1.0) if reduction == "mean" else 1.0
    lse = _logsumexp(logits)
    picked = np.take_along_axis(logits, targets[..., None], axis=-1)[..., 0]
    loss = float(((lse - picked) * maskf).sum() / norm)
    probs = np.exp(logits - lse[..., None])
    np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], -1) - 1.0, -1)
    return loss, probs * (maskf / norm)[..., None]


def regression_loss(pred, targets, mask, reduction="mean"):
    """Masked per-frame mean squared error and its gradient."""
    if pred.shape != targets.shape:
        raise ShapeMismatch(f"prediction {pred.shape} vs target {targets.shape}")
    maskf = mask.astype(pred.dtype)
    norm = max(float(maskf.sum()), 1.0) if reduction == "mean" else 1.0
    C = pred.shape[-1]
    diff = pred - targets
    loss = float(((diff * diff).mean(axis=-1) * maskf).sum() / norm)
    return loss, diff * (2.0 * maskf / (norm * C))[..., None]


def batch_loss(batch: SequenceBatch, targets: np.ndarray, params: ModelParams, cfg: ModelConfig,
               reduction: str = "mean", bn_mode: str = "train") -> float:
    """Teacher-forced loss without the backward pass."""
    out, _ = forward(batch, params, cfg, bn_mode=bn_mode)
    if cfg.head == "classification":
        return classification_loss(out, np.asarray(targets, dtype=np.int64), batch.mask, reduction)[0]
    return regression_loss(out, np.asarray(targets, dtype=out.dtype), batch.mask, reduction)[0]


def loss_and_grads(batch: SequenceBatch, targets: np.ndarray, params: ModelParams, cfg: ModelConfig,
                   reduction: str = "mean", bn_mode: str = "train"):
    """Teacher-forced loss, gradients, and the forward cache."""
    out, cache = forward(batch, params, cfg, bn_mode=bn_mode)
    if cfg.head == "classification":
        loss, dout = classification_loss(out, np.asarray(targets, dtype=np.int64), batch.mask, reduction)
    else:
        loss, dout = regression_loss(out, np.asarray(targets, dtype=out.dtype), batch.mask, reduction)
    return loss, backward(cache, dout, params), cache


# ----------------------------------------------------------------------------
# decoding


def decode(
    batch: SequenceBatch,
    params: ModelParams,
    cfg: ModelConfig,
    init_id: int,
    feedback: Callable[[np.ndarray], np.ndarray] | None = None,
    use_own: np.ndarray | None = None,
    bn_mode: str = "eval",
):
    """Autoregressive pass without gradient bookkeeping.

    Frame 0 is fed ``init_id``; frame ``t`` is fed the id decoded at ``t-1``:
    the lowest-index argmax of the logits, or ``feedback(outputs_t)`` if
    given (the regression head quantizes its coordinates this way).

    ``use_own`` ``(B, T)`` bool mixes in teacher forcing: where it is False
    frame ``t`` is fed ``batch.prev[:, t]`` instead. Without it
    ``batch.prev`` is ignored.

    Returns ``(outputs (B, T, n_out), ids (B, T), fed (B, T))`` where
    ``fed`` are the previous-pose ids actually consumed.
    """
    _check_batch(batch, cfg)
    if not 0 <= init_id < cfg.K:
        raise IndexOutOfRange(f"init_id {init_id} out of range for K={cfg.K}")
    if feedback is None:
        if cfg.head != "classification":
            raise ValueError("the regression head needs a feedback function")
        feedback = lambda out: np.argmax(out, axis=-1)  # noqa: E731
    W = params.weights
    dtype = params.dtype
    B, T = batch.shape
    if cfg.use_x:
        x = embed_scene(batch.s.astype(dtype, copy=False), params, cfg, mode=bn_mode, mask=batch.mask)
    else:
        x = np.zeros((B, T, cfg.E), dtype=dtype)
    static = np.concatenate([direct_inputs(batch, params, cfg), x], axis=-1)
    # static part of the first-layer projection can be done in one product
    n_static = static.shape[-1]
    W_ih0 = W["W_ih0"]
    pre0 = static @ W_ih0[:, :n_static].T + W["b0"]
    zproj = (W_ih0[:, n_static:] @ W["W_z"]).T  # (K, 4D): embedding folded into layer 0

    D = cfg.D
    hs = [np.zeros((B, D), dtype=dtype) for _ in range(cfg.num_layers)]
    cs = [np.zeros((B, D), dtype=dtype) for _ in range(cfg.num_layers)]
    outs = np.empty((B, T, cfg.n_out), dtype=dtype)
    ids = np.empty((B, T), dtype=np.int64)
    fed = np.empty((B, T), dtype=np.int64)
    prev = np.full(B, init_id, dtype=np.int64)
    W_hh_T = [W[f"W_hh{l}"].T for l in range(cfg.num_layers)]
    W_ih_T = [None] + [W[f"W_ih{l}"].T for l in range(1, cfg.num_layers)]
    for t in range(T):
        if use_own is not None:
            prev = np.where(use_own[:, t], prev, batch.prev[:, t])
        fed[:, t] = prev
        a = pre0[:, t] + zproj[prev] + hs[0] @ W_hh_T[0]
        *_, cs[0], _, hs[0] = _cell(a, cs[0], D)
        for l in range(1, cfg.num_layers):
            a = hs[l - 1] @ W_ih_T[l] + W[f"b{l}"] + hs[l] @ W_hh_T[l]
            *_, cs[l], _, hs[l] = _cell(a, cs[l], D)
        out_t = hs[-1] @ W["W_p"].T + W["b_p"]
        outs[:, t] = out_t
        prev = np.asarray(feedback(out_t), dtype=np.int64)
        ids[:, t] = prev
    return outs, ids, fed


def forward_sequence(
    batch: SequenceBatch,
    params: ModelParams,
    cfg: ModelConfig,
    mode: str = "autoregressive",
    init_id: int = 0,
    feedback: Callable[[np.ndarray], np.ndarray] | None = None,
):
    """Per-frame outputs and decoded ids in either decoding mode.

    ``teacher_forced`` feeds ``batch.prev`` (with ``prev[:, 0]`` expected to
    hold ``init_id``); ``autoregressive`` feeds back its own predictions.
    Batch norm runs in eval mode for both.
    """
    if mode == "teacher_forced":
        out, _ = forward(batch, params, cfg, bn_mode="eval")
        if feedback is None:
            ids = np.argmax(out, axis=-1)
        else:
            ids = np.stack([np.asarray(feedback(out[:, t]), dtype=np.int64) for t in range(out.shape[1])], axis=1)
        return out, ids
    if mode == "autoregressive":
        return decode(batch, params, cfg, init_id, feedback)[:2]
    raise ValueError(f"unknown mode {mode!r}")
