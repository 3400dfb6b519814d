"""Cross-entropy training with SGD + momentum, checkpointing and loss logging."""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .fusion import FusedSample
from .network import NetworkConfig, SegmentationNet, build_model

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
CHECKPOINT_FORMAT_VERSION = 1
CHECKPOINT_PATTERN = "checkpoint_epoch{epoch:04d}.pt"


class TrainingDiverged(RuntimeError):
    pass


class CheckpointError(ValueError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    learning_rate: float = 0.0005
    momentum: float = 0.9
    epochs: int = 1
    seed: int = 0
    checkpoint_every: int = 1

    def __post_init__(self):
        if self.batch_size < 1 or self.epochs < 1 or self.checkpoint_every < 1:
            raise ValueError("batch_size, epochs and checkpoint_every must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"momentum must lie in [0, 1), got {self.momentum}")


@dataclass
class TrainState:
    epoch: int = 0
    step: int = 0
    running_loss: float = float("nan")
    epoch_losses: list[float] = field(default_factory=list)
    momentum_buffers: dict[str, torch.Tensor] = field(default_factory=dict)
    last_checkpoint: Path | None = None


def set_deterministic(enabled: bool = True) -> None:
    """Single-threaded execution with deterministic kernels."""
    if enabled:
        torch.set_num_threads(1)
    torch.use_deterministic_algorithms(enabled)


def cross_entropy_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Categorical cross-entropy averaged over pixels, then over the batch.

    ``logits`` is (B, n, N1, N2), ``targets`` is (B, N1, N2) with integer labels.
    """
    if logits.dim() != 4 or targets.dim() != 3:
        raise ValueError(f"expected (B, n, H, W) logits and (B, H, W) targets, "
                         f"got {tuple(logits.shape)} and {tuple(targets.shape)}")
    if logits.shape[0] != targets.shape[0] or logits.shape[2:] != targets.shape[1:]:
        raise ValueError(f"shape mismatch: logits {tuple(logits.shape)} vs targets {tuple(targets.shape)}")
    targets = targets.long()
    n = logits.shape[1]
    if targets.min() < 0 or targets.max() >= n:
        raise ValueError(f"target values must lie in [0, {n - 1}]")
    log_p = F.log_softmax(logits, dim=1).clamp(min=math.log(LOG_EPS))
    picked = log_p.gather(1, targets.unsqueeze(1)).squeeze(1)
    per_sample = -picked.flatten(1).mean(dim=1)
    return per_sample.sum() / logits.shape[0]


@torch.no_grad()
def sgdm_step(params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor],
              momentum_buffers: dict[str, torch.Tensor], lr: float, momentum: float):
    """In-place SGD with momentum: buf = momentum*buf + grad; param -= lr*buf.

    Missing buffers start at zero. Returns ``(params, momentum_buffers)``.
    """
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} != parameter shape {tuple(p.shape)} for {name}")
        if not torch.isfinite(g).all():
            raise TrainingDiverged(f"non-finite gradient for parameter {name}")
        buf = momentum_buffers.get(name)
        if buf is None:
            buf = torch.zeros_like(p)
            momentum_buffers[name] = buf
        buf.mul_(momentum).add_(g)
        p.sub_(lr * buf)
    return params, momentum_buffers


def stack_batch(samples: Sequence[FusedSample], dtype=torch.float32):
    x = torch.as_tensor(np.stack([s.channels for s in samples]), dtype=dtype)
    y = torch.as_tensor(np.stack([s.target for s in samples]), dtype=torch.long)
    return x, y


# -- checkpoints -------------------------------------------------------------

def save_checkpoint(path, model: SegmentationNet, state: TrainState, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "network_config": model.config.to_dict(),
        "parameters": {k: v.detach().clone() for k, v in model.state_dict().items()},
        "momentum_buffers": {k: v.detach().clone() for k, v in state.momentum_buffers.items()},
        "epoch": state.epoch,
        "step": state.step,
        "extra": dict(extra or {}),
    }
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(payload, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> tuple[SegmentationNet, TrainState, dict]:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise CheckpointError(
            f"{path}: checkpoint format version {version} is not supported "
            f"(expected {CHECKPOINT_FORMAT_VERSION})")
    model = build_model(NetworkConfig.from_dict(payload["network_config"]))
    params = payload["parameters"]
    dtype = next(iter(params.values())).dtype
    model.to(dtype)
    model.load_state_dict(params)
    state = TrainState(epoch=payload["epoch"], step=payload["step"],
                       momentum_buffers=dict(payload["momentum_buffers"]))
    return model, state, payload["extra"]


def latest_checkpoint(directory) -> Path:
    found = sorted(Path(directory).glob("checkpoint_epoch*.pt"))
    if not found:
        raise CheckpointError(f"no checkpoints in {directory}")
    return found[-1]


# -- loop --------------------------------------------------------------------

def train(model: SegmentationNet, dataset: Sequence[FusedSample], config: TrainConfig,
          checkpoint_dir=None, log_path=None, extra: dict | None = None) -> TrainState:
    """Train ``model`` in place.

    Each epoch visits every sample once in a seeded random order, in
    ``ceil(len(dataset) / batch_size)`` steps. If the loss turns non-finite the
    run aborts with :class:`TrainingDiverged`; checkpoints already written stay.
    """
    if not dataset:
        raise ValueError("training dataset is empty")
    rng = np.random.default_rng(config.seed)
    dtype = next(model.parameters()).dtype
    params = dict(model.named_parameters())
    state = TrainState()
    log_file = None
    if log_path is not None:
        Path(log_path).parent.mkdir(parents=True, exist_ok=True)
        log_file = open(log_path, "a", encoding="utf-8")

    try:
        for epoch in range(1, config.epochs + 1):
            model.train()
            order = rng.permutation(len(dataset))
            total, seen = 0.0, 0
            for start in range(0, len(order), config.batch_size):
                batch = [dataset[i] for i in order[start:start + config.batch_size]]
                x, y = stack_batch(batch, dtype)
                model.zero_grad(set_to_none=True)
                loss = cross_entropy_loss(model(x), y)
                if not torch.isfinite(loss):
                    raise TrainingDiverged(f"non-finite loss at epoch {epoch}, step {state.step + 1}")
                loss.backward()
                sgdm_step(params, {k: p.grad for k, p in params.items()},
                          state.momentum_buffers, config.learning_rate, config.momentum)
                state.step += 1
                total += loss.item() * len(batch)
                seen += len(batch)
            state.epoch = epoch
            state.running_loss = total / seen
            state.epoch_losses.append(state.running_loss)
            log.info("epoch %d step %d mean_loss %.6f", epoch, state.step, state.running_loss)
            if log_file is not None:
                log_file.write(f"{epoch},{state.step},{state.running_loss:.8f}\n")
                log_file.flush()
            if checkpoint_dir is not None and (
                    epoch % config.checkpoint_every == 0 or epoch == config.epochs):
                state.last_checkpoint = save_checkpoint(
                    Path(checkpoint_dir) / CHECKPOINT_PATTERN.format(epoch=epoch),
                    model, state, extra)
    finally:
        if log_file is not None:
            log_file.close()
    model.eval()
    return state
