"""
Trainer
=======
One training loop for both the encoder and the decoder.

- Adam with a fixed learning rate, no scheduler
- optional gradient accumulation (``grad_accumulation`` micro-batches per update)
- validation every ``eval_every`` updates; the best-validation-loss weights
  are kept as the checkpoint
- stops once ``min_steps`` updates are done AND the smoothed validation loss
  has not improved for ``patience`` evaluations (or at ``max_steps``)
- history appended to ``<name>.history.csv`` (step, split, metric, value)
- a NaN/inf loss writes ``<name>.nonfinite.pt`` and aborts

Usage:
    result = train(model, train_set, val_set, cfg, loss_fn, evaluate_fn,
                   out_dir=Path("runs/encoder"), name="encoder", meta=meta)
"""

import time
import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Optional

import numpy as np
import torch
from torch.utils.data import DataLoader

from common.errors import ConfigurationError, NonFiniteLossError
from common.io_utils import append_csv
from models.checkpoints import CheckpointMeta, save_checkpoint
from training.metrics import HISTORY_COLUMNS, MetricsRecord

logger = logging.getLogger(__name__)

LR_BOUNDS = (1e-5, 1e-2)
BATCH_BOUNDS = (6, 50)
ENCODER_MIN_STEPS = 1500
DECODER_MIN_STEPS = 4000


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 16
    min_steps: int = ENCODER_MIN_STEPS
    max_steps: Optional[int] = None         # default: 3 × min_steps
    grad_accumulation: int = 1
    eval_every: int = 50
    patience: int = 3
    smoothing: int = 2                      # validation losses averaged for the stop rule
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        lo, hi = LR_BOUNDS
        if not lo <= self.learning_rate <= hi:
            raise ConfigurationError(f"learning_rate {self.learning_rate} outside [{lo}, {hi}]")
        lo, hi = BATCH_BOUNDS
        if not lo <= self.batch_size <= hi:
            raise ConfigurationError(f"batch_size {self.batch_size} outside [{lo}, {hi}]")
        if self.grad_accumulation < 1:
            raise ConfigurationError("grad_accumulation must be >= 1")
        if self.min_steps < 0 or self.eval_every < 1 or self.patience < 1 or self.smoothing < 1:
            raise ConfigurationError("min_steps, eval_every, patience and smoothing must be positive")
        if self.max_steps is not None and self.max_steps < max(self.min_steps, 1):
            raise ConfigurationError(f"max_steps {self.max_steps} below min_steps {self.min_steps}")

    @property
    def step_limit(self) -> int:
        return self.max_steps if self.max_steps is not None else max(3 * self.min_steps, self.eval_every)

    def with_changes(self, **changes) -> "TrainConfig":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainResult:
    checkpoint: Path
    history: list[MetricsRecord]
    best_step: int
    best_metrics: dict
    steps: int
    stop_reason: str                        # "early_stop" | "max_steps"
    train_losses: list[float] = field(default_factory=list)


LossFn = Callable[[torch.nn.Module, tuple], torch.Tensor]
EvaluateFn = Callable[[torch.nn.Module, object], dict]


# ---------------------------------------------------------------------------
# Helpers
# ---------------------------------------------------------------------------

def seed_everything(seed: int) -> None:
    torch.manual_seed(seed)
    np.random.seed(seed % 2**32)
    torch.use_deterministic_algorithms(True, warn_only=True)


def _batches(dataset, batch_size: int, generator: torch.Generator):
    """Endless shuffled mini-batches; a new permutation every epoch."""
    loader = DataLoader(dataset, batch_size=batch_size, shuffle=True, generator=generator, drop_last=False)
    while True:
        for batch in loader:
            yield batch


def _smoothed(values: list[float], window: int) -> float:
    return float(np.mean(values[-window:]))


def _snapshot_nonfinite(out_dir: Path, name: str, model, batch, step: int) -> Path:
    path = Path(out_dir) / f"{name}.nonfinite.pt"
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({"step": step, "state_dict": model.state_dict(), "batch": batch}, path)
    return path


# ---------------------------------------------------------------------------
# Loop
# ---------------------------------------------------------------------------

def train(
    model: torch.nn.Module,
    train_set,
    val_set,
    cfg: TrainConfig,
    loss_fn: LossFn,
    evaluate_fn: EvaluateFn,
    out_dir: Path,
    name: str,
    meta: CheckpointMeta,
) -> TrainResult:
    """Train ``model`` in place; returns the best checkpoint and the history."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    history_path = out_dir / f"{name}.history.csv"
    if history_path.exists():
        history_path.unlink()
        logger.info(f"   replaced previous history {history_path.name}")

    seed_everything(cfg.seed)
    generator = torch.Generator().manual_seed(cfg.seed)
    batches = _batches(train_set, cfg.batch_size, generator)
    params = [p for p in model.parameters() if p.requires_grad]
    optimizer = torch.optim.Adam(params, lr=cfg.learning_rate)

    logger.info("=" * 55)
    logger.info(f"  Training {name}: {meta.architecture} on {meta.task}")
    logger.info(f"  lr={cfg.learning_rate}  batch={cfg.batch_size}x{cfg.grad_accumulation}  "
                f"min_steps={cfg.min_steps}  limit={cfg.step_limit}")
    logger.info("=" * 55)
    start = time.time()

    history: list[MetricsRecord] = []
    train_losses: list[float] = []
    window_losses: list[float] = []
    val_losses: list[float] = []
    best_smoothed = float("inf")
    best_val, best_step, best_metrics = float("inf"), 0, {}
    since_best = 0
    checkpoint = out_dir / f"{name}.pt"
    stop_reason = "max_steps"
    step = 0

    while step < cfg.step_limit:
        model.train()
        optimizer.zero_grad(set_to_none=True)
        step_loss = 0.0
        for _ in range(cfg.grad_accumulation):
            batch = next(batches)
            loss = loss_fn(model, batch)
            if not torch.isfinite(loss):
                snap = _snapshot_nonfinite(out_dir, name, model, batch, step)
                raise NonFiniteLossError(f"{name}: loss {loss.item()} at step {step}", str(snap))
            (loss / cfg.grad_accumulation).backward()
            step_loss += loss.item() / cfg.grad_accumulation
        optimizer.step()
        step += 1
        train_losses.append(step_loss)
        window_losses.append(step_loss)

        if step % cfg.eval_every and step < cfg.step_limit:
            continue

        model.eval()
        metrics = evaluate_fn(model, val_set)
        train_record = MetricsRecord(step, "train", loss=float(np.mean(window_losses)))
        val_record = MetricsRecord(step, "val", **{k: v for k, v in metrics.items()
                                                   if k in MetricsRecord.__dataclass_fields__ and v is not None})
        window_losses = []
        history += [train_record, val_record]
        append_csv(history_path, train_record.rows() + val_record.rows(), HISTORY_COLUMNS)

        val_loss = float(metrics["loss"])
        val_losses.append(val_loss)
        if val_loss < best_val:
            best_val, best_step, best_metrics = val_loss, step, dict(metrics)
            meta.step, meta.metrics = step, {k: v for k, v in metrics.items() if not isinstance(v, dict)}
            save_checkpoint(out_dir / name, model, meta)

        smoothed = _smoothed(val_losses, cfg.smoothing)
        if smoothed < best_smoothed:
            best_smoothed, since_best = smoothed, 0
        else:
            since_best += 1

        logger.info(f"── step {step:>6}  train {train_record.loss:.4f}  val {val_loss:.4f}"
                    + (f"  acc {metrics['accuracy']:.3f}" if metrics.get("accuracy") is not None else "")
                    + (f"  nwa {metrics['next_word_accuracy']:.3f}" if metrics.get("next_word_accuracy") is not None else ""))

        if step >= cfg.min_steps and since_best >= cfg.patience:
            stop_reason = "early_stop"
            break

    elapsed = time.time() - start
    logger.info("=" * 55)
    logger.info(f"✅ {name}: {step} steps in {elapsed:.1f}s ({stop_reason}), best val loss {best_val:.4f} at step {best_step}")
    logger.info("=" * 55)
    return TrainResult(checkpoint, history, best_step, best_metrics, step, stop_reason, train_losses)
