"""Central finite-difference check of the analytic gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import ModelConfig, ModelParams, SequenceBatch, batch_loss, init_params, loss_and_grads

TOY = dict(E=4, D=6, num_layers=2, K=5)


@dataclass
class GradCheckResult:
    head: str
    rel_errors: dict[str, float]

    @property
    def max_rel_error(self) -> float:
        return max(self.rel_errors.values())


def toy_problem(head: str = "classification", seed: int = 7, B: int = 3, N: int = 3, output_dim: int = 6):
    """Random float64 batch and parameters on the toy configuration."""
    rng = np.random.default_rng(seed)
    cfg = ModelConfig(head=head, output_dim=output_dim if head == "regression" else None, **TOY)
    params = init_params(cfg, seed=seed, dtype=np.float64)
    # non-trivial biases and BN affine terms so every path carries gradient
    for name, w in params.weights.items():
        if w.ndim == 1:
            w += rng.normal(scale=0.3, size=w.shape)
    batch = SequenceBatch(
        m=rng.normal(size=(B, N, cfg.motion_dim)) * 0.3,
        o=rng.uniform(size=(B, N, cfg.o_dim)),
        s=rng.normal(size=(B, N, cfg.scene_dim)),
        prev=rng.integers(cfg.K, size=(B, N)),
    )
    if head == "classification":
        targets = rng.integers(cfg.K, size=(B, N))
    else:
        targets = rng.normal(size=(B, N, output_dim))
    return cfg, params, batch, targets


def numeric_gradient(batch, targets, params: ModelParams, cfg: ModelConfig, name: str, step: float = 1e-5):
    w = params.weights[name]
    grad = np.zeros_like(w)
    flat, gflat = w.reshape(-1), grad.reshape(-1)
    for k in range(flat.size):
        orig = flat[k]
        flat[k] = orig + step
        lp = batch_loss(batch, targets, params, cfg, reduction="sum")
        flat[k] = orig - step
        lm = batch_loss(batch, targets, params, cfg, reduction="sum")
        flat[k] = orig
        gflat[k] = (lp - lm) / (2 * step)
    return grad


def relative_error(a: np.ndarray, b: np.ndarray) -> float:
    denom = np.linalg.norm(a) + np.linalg.norm(b)
    if denom < 1e-12:
        return 0.0
    return float(np.linalg.norm(a - b) / denom)


def check_gradients(head: str = "classification", seed: int = 7, step: float = 1e-5) -> GradCheckResult:
    """Compare analytic and central-difference gradients for every tensor."""
    cfg, params, batch, targets = toy_problem(head, seed)
    _, grads, _ = loss_and_grads(batch, targets, params, cfg, reduction="sum")
    errs = {}
    for name in params.weights:
        num = numeric_gradient(batch, targets, params, cfg, name, step)
        errs[name] = relative_error(grads[name], num)
    return GradCheckResult(head, errs)
