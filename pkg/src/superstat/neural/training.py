"""Online training: a fresh simulated batch for every optimizer step."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from ..generative import ModelSpec, simulate_batch
from .amortizer import Amortizer
from .network import PARAM_ORDER, NetworkWeights, NumericError

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    """Loss or weights became non-finite; ``weights`` holds the last finite state."""

    def __init__(self, message: str, weights: NetworkWeights, step: int, checkpoint: Path | None):
        super().__init__(message)
        self.weights = weights
        self.step = step
        self.checkpoint = checkpoint


@dataclass(frozen=True)
class TrainingConfig:
    epochs: int = 10
    iterations_per_epoch: int = 200
    batch_size: int = 8
    series_length: int = 100
    initial_lr: float = 5e-4
    lr_schedule: str = "cosine"
    clip_norm: float = 1.0
    hidden: int = 128
    head_hidden: int = 128
    diag_scale: float = 1.0
    count_scale: float = 5.0
    validation_size: int = 64
    warp: bool = True

    def __post_init__(self):
        for name in ("epochs", "iterations_per_epoch", "batch_size", "series_length", "hidden", "head_hidden"):
            if getattr(self, name) < (0 if name in ("epochs", "iterations_per_epoch") else 1):
                raise ValueError(f"{name} must be positive")
        if self.initial_lr <= 0:
            raise ValueError("initial_lr must be > 0")
        if self.lr_schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")

    @property
    def total_steps(self) -> int:
        return self.epochs * self.iterations_per_epoch

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainingConfig":
        known = cls.__dataclass_fields__
        unknown = set(d) - set(known)
        if unknown:
            raise ValueError(f"unknown training options: {sorted(unknown)}")
        return cls(**d)


def cosine_lr(step: int, total: int, lr0: float) -> float:
    if total <= 0:
        return lr0
    return 0.5 * lr0 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Adam:
    def __init__(self, params: dict, beta1=0.9, beta2=0.999, eps=1e-8):
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params: dict, grads: dict, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.b1**self.t
        c2 = 1.0 - self.b2**self.t
        for k in params:
            g = grads[k]
            self.m[k] *= self.b1
            self.m[k] += (1.0 - self.b1) * g
            self.v[k] *= self.b2
            self.v[k] += (1.0 - self.b2) * g * g
            params[k] -= lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


def clip_global_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


@dataclass
class TrainingResult:
    amortizer: Amortizer
    losses: np.ndarray  # per iteration
    validation: list[tuple[int, float]]  # (step, loss)
    seconds: float


def validation_loss(amortizer: Amortizer, batch) -> float:
    # a fixed stream keeps the atom-band targets identical across evaluations
    loss, _, _ = amortizer.loss(batch, need_grad=False, rng=np.random.default_rng(0))
    return float(loss)


def train(
    spec: ModelSpec,
    cfg: TrainingConfig,
    rng: np.random.Generator,
    amortizer: Amortizer | None = None,
    checkpoint_path: str | Path | None = None,
    progress_every: int = 0,
) -> TrainingResult:
    """Adam with cosine-decayed learning rate on freshly simulated batches.

    On a non-finite loss or weight update, training stops, the last finite
    weights are written to ``checkpoint_path`` (if given) and
    :class:`TrainingDiverged` is raised.
    """
    from .checkpoint import save_checkpoint

    if amortizer is None:
        amortizer = Amortizer.create(
            spec, rng, cfg.hidden, cfg.head_hidden, cfg.diag_scale, cfg.count_scale, cfg.warp
        )
    amortizer.train_config = cfg.to_dict()
    params = amortizer.weights.params
    val_batch = simulate_batch(spec, cfg.validation_size, cfg.series_length, rng) if cfg.validation_size else None
    validation = []
    if val_batch is not None:
        validation.append((0, validation_loss(amortizer, val_batch)))
    opt = Adam(params)
    total = cfg.total_steps
    losses = np.empty(total)
    start = time.perf_counter()
    for step in range(total):
        batch = simulate_batch(spec, cfg.batch_size, cfg.series_length, rng)
        last_good = {k: v.copy() for k, v in params.items()}
        try:
            loss, grads, _ = amortizer.loss(batch, rng=rng)
        except NumericError as exc:
            _diverged(amortizer, last_good, step, checkpoint_path, str(exc), save_checkpoint)
        clip_global_norm(grads, cfg.clip_norm)
        lr = cosine_lr(step, total, cfg.initial_lr) if cfg.lr_schedule == "cosine" else cfg.initial_lr
        opt.step(params, grads, lr)
        if not amortizer.weights.all_finite():
            _diverged(amortizer, last_good, step, checkpoint_path, "non-finite weights after update", save_checkpoint)
        losses[step] = loss
        if val_batch is not None and (step + 1) % cfg.iterations_per_epoch == 0:
            validation.append((step + 1, validation_loss(amortizer, val_batch)))
            log.info("epoch %d: train %.3f, validation %.3f", (step + 1) // cfg.iterations_per_epoch,
                     float(np.mean(losses[step + 1 - cfg.iterations_per_epoch : step + 1])), validation[-1][1])
        if progress_every and (step + 1) % progress_every == 0:
            log.info("step %d/%d loss %.3f", step + 1, total, float(np.mean(losses[max(0, step + 1 - progress_every) : step + 1])))
    return TrainingResult(amortizer, losses, validation, time.perf_counter() - start)


def _diverged(amortizer, last_good, step, checkpoint_path, reason, save_checkpoint):
    for k in PARAM_ORDER:
        amortizer.weights.params[k][...] = last_good[k]
    path = None
    if checkpoint_path is not None:
        path = Path(checkpoint_path)
        save_checkpoint(amortizer, path)
    raise TrainingDiverged(f"training diverged at step {step + 1}: {reason}", amortizer.weights.copy(), step, path)
