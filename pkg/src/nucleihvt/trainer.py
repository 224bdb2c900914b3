"""AdamW + cosine schedule training loop and evaluation."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .checkpoint import Checkpoint, OptimState, save_checkpoint
from .datapipe import BatchStream, NormStats, Sample, normalize
from .losses import LossWeights, combined_loss
from .metrics import MetricsReport, confusion_matrix
from .models import ModelConfig, forward
from .params import ParamStore
from .tensor import Tensor, no_grad, reset_tape

log = logging.getLogger(__name__)

DEFAULT_LR = {"nucleihvt": 0.005, "cb_nucleihvt": 0.001}


class NonFiniteLossError(FloatingPointError):
    def __init__(self, step: int, last_good: Checkpoint):
        super().__init__(f"non-finite loss at step {step}")
        self.step = step
        self.last_good = last_good


@dataclass
class TrainConfig:
    total_steps: int
    base_lr: float = 0.005
    min_lr: float | None = None
    batch_size: int = 4
    seed: int = 0
    eval_interval: int = 0
    checkpoint_path: str | None = None
    loss_weights: LossWeights = field(default_factory=LossWeights)
    weight_decay: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    grad_clip: float | None = None

    def __post_init__(self):
        if self.total_steps <= 0:
            raise ValueError("total_steps must be positive")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.min_lr is None:
            self.min_lr = self.base_lr / 100


def cosine_lr(step: int, total: int, base_lr: float, min_lr: float) -> float:
    if step >= total:
        return min_lr
    step = max(step, 0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + math.cos(math.pi * step / total))


def adamw_step(params: ParamStore, state: OptimState, lr: float) -> None:
    """Decoupled-weight-decay Adam update of every trainable tensor in place."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1**t
    bc2 = 1.0 - state.beta2**t
    for name, p in params.trainable():
        g = p.grad
        if g is None:
            raise ValueError(f"missing gradient for parameter {name}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (m / bc1) / (np.sqrt(v / bc2) + state.eps) + state.weight_decay * p.data
        p.data -= (lr * update).astype(p.dtype, copy=False)


def clip_grad_norm(params: ParamStore, max_norm: float) -> float:
    grads = [p.grad for _, p in params.trainable() if p.grad is not None]
    norm = math.sqrt(sum(float((g.astype(np.float64) ** 2).sum()) for g in grads))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


def _snapshot(cfg: ModelConfig, params: ParamStore, optim: OptimState, step: int, stream: BatchStream) -> Checkpoint:
    return Checkpoint(
        cfg,
        params.copy(),
        OptimState(
            {k: v.copy() for k, v in optim.m.items()},
            {k: v.copy() for k, v in optim.v.items()},
            optim.step,
            optim.beta1,
            optim.beta2,
            optim.eps,
            optim.weight_decay,
        ),
        step,
        {"seed": stream.seed, "next_step": step},
    )


def train(
    cfg: ModelConfig,
    params: ParamStore,
    stream: BatchStream,
    tcfg: TrainConfig,
    resume: Checkpoint | None = None,
    on_step: Callable[[int, float, float], bool] | None = None,
) -> tuple[Checkpoint, list[tuple[int, float, float]]]:
    """Run optimization from step 0 (or ``resume.step``) to ``total_steps``.

    ``on_step(step, lr, loss)`` may return True to stop early. Returns the
    final checkpoint and the (step, lr, loss) log of the steps run here.
    """
    if resume is not None:
        params = resume.params
        optim = resume.optim or OptimState()
        start = resume.step
    else:
        optim = OptimState(beta1=tcfg.beta1, beta2=tcfg.beta2, eps=tcfg.eps, weight_decay=tcfg.weight_decay)
        start = 0
    history: list[tuple[int, float, float]] = []
    last_good = None
    step = start
    for step in range(start, tcfg.total_steps):
        lr = cosine_lr(step, tcfg.total_steps, tcfg.base_lr, tcfg.min_lr)
        images, masks = stream.batch(step)
        reset_tape()
        params.zero_grad()
        logits = forward(Tensor(images), params, cfg, training=True)
        loss = combined_loss(logits, masks, tcfg.loss_weights)
        value = loss.item()
        if not math.isfinite(value):
            reset_tape()
            last_good = last_good or _snapshot(cfg, params, optim, step, stream)
            if tcfg.checkpoint_path:
                save_checkpoint(tcfg.checkpoint_path, last_good)
            raise NonFiniteLossError(step, last_good)
        loss.backward()
        if tcfg.grad_clip:
            clip_grad_norm(params, tcfg.grad_clip)
        adamw_step(params, optim, lr)
        history.append((step, lr, value))
        log.debug("step %d lr %.3e loss %.6f", step, lr, value)
        done = step + 1
        if tcfg.eval_interval and done % tcfg.eval_interval == 0 and done < tcfg.total_steps:
            last_good = _snapshot(cfg, params, optim, done, stream)
            if tcfg.checkpoint_path:
                save_checkpoint(tcfg.checkpoint_path, last_good)
        if on_step is not None and on_step(step, lr, value):
            step += 1
            break
    else:
        step = tcfg.total_steps
    final = _snapshot(cfg, params, optim, max(step, start), stream)
    if tcfg.checkpoint_path:
        save_checkpoint(tcfg.checkpoint_path, final)
    return final, history


def format_loss_log(history: Sequence[tuple[int, float, float]]) -> str:
    return "".join(f"{s} {lr!r} {loss!r}\n" for s, lr, loss in history)


def parse_loss_log(text: str) -> list[tuple[int, float, float]]:
    out = []
    for line in text.splitlines():
        if line.strip():
            s, lr, loss = line.split()
            out.append((int(s), float(lr), float(loss)))
    return out


def predict_logits(params: ParamStore, cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    """Eval-mode logits for normalized (N, 3, H, W) images of any size.

    Inputs are reflect-padded to a multiple of 32 (and at least 32) and the
    logits cropped back.
    """
    n, _, h, w = images.shape
    H, W = max(32, -(-h // 32) * 32), max(32, -(-w // 32) * 32)
    if (H, W) != (h, w):
        images = np.pad(images, ((0, 0), (0, 0), (0, H - h), (0, W - w)), mode="reflect" if h > 1 and w > 1 else "edge")
    with no_grad():
        logits = forward(Tensor(images.astype(np.float32)), params, cfg, training=False).data
    return logits[:, :, :h, :w]


def predict_mask(params: ParamStore, cfg: ModelConfig, images: np.ndarray) -> np.ndarray:
    return predict_logits(params, cfg, images).argmax(axis=1).astype(np.uint8)


def evaluate(
    params: ParamStore, cfg: ModelConfig, samples: Sequence[Sample], stats: NormStats, batch_size: int = 4
) -> MetricsReport:
    """Argmax predictions over the set; confusion counts are summed before
    metrics are computed."""
    if not samples:
        raise ValueError("cannot evaluate an empty dataset")
    k = cfg.num_classes
    total = np.zeros((k, k), dtype=np.int64)
    for i in range(0, len(samples), batch_size):
        chunk = samples[i : i + batch_size]
        shapes = {s.mask.shape for s in chunk}
        groups = [chunk] if len(shapes) == 1 else [[s] for s in chunk]
        for group in groups:
            images = np.stack([normalize(s.image, stats) for s in group])
            pred = predict_mask(params, cfg, images)
            truth = np.stack([s.mask for s in group])
            total += confusion_matrix(pred, truth, k)
    return MetricsReport.from_confusion(total)


def write_loss_log(path, history) -> None:
    Path(path).write_text(format_loss_log(history))
