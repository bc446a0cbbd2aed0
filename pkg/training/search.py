"""
Hyperparameter Search
=====================
Small, sequential search over learning rate and batch size.

1. start at the middle of the grid
2. train, score the run on validation (encoder accuracy / decoder next-word accuracy)
3. stop when the score reaches ``target`` (0.95) or after ``max_combinations`` (4) runs
4. otherwise adjust from the observed training dynamics:
       diverged (non-finite loss, or an upward OLS trend)   → halve the learning rate
       noisy (large spread around a LOWESS smooth)          → double the batch size
       neither                                              → double the learning rate
   values are clamped to the TrainConfig bounds; a combination already tried
   is replaced by halving the learning rate again

The search log (JSON lines, one entry per run) is rewritten after every run.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import statsmodels.api as sm
from statsmodels.nonparametric.smoothers_lowess import lowess

from common.errors import ConfigurationError, NonFiniteLossError
from common.io_utils import read_jsonl, write_jsonl
from training.trainer import BATCH_BOUNDS, LR_BOUNDS, TrainConfig

logger = logging.getLogger(__name__)

DEFAULT_LEARNING_RATES = (1e-5, 1e-4, 1e-3, 1e-2)
DEFAULT_BATCH_SIZES = (6, 12, 25, 50)
TARGET = 0.95
MAX_COMBINATIONS = 4
TREND_P_VALUE = 0.05
NOISE_THRESHOLD = 0.15
LOWESS_FRAC = 0.3


@dataclass(frozen=True)
class SearchGrid:
    learning_rates: tuple[float, ...] = DEFAULT_LEARNING_RATES
    batch_sizes: tuple[int, ...] = DEFAULT_BATCH_SIZES

    def __post_init__(self):
        object.__setattr__(self, "learning_rates", tuple(sorted(float(x) for x in self.learning_rates)))
        object.__setattr__(self, "batch_sizes", tuple(sorted(int(x) for x in self.batch_sizes)))
        if not self.learning_rates or not self.batch_sizes:
            raise ConfigurationError("Search grid needs at least one learning rate and one batch size")
        if self.learning_rates[0] < LR_BOUNDS[0] or self.learning_rates[-1] > LR_BOUNDS[1]:
            raise ConfigurationError(f"Grid learning rates outside {LR_BOUNDS}")
        if self.batch_sizes[0] < BATCH_BOUNDS[0] or self.batch_sizes[-1] > BATCH_BOUNDS[1]:
            raise ConfigurationError(f"Grid batch sizes outside {BATCH_BOUNDS}")

    @property
    def midpoint(self) -> tuple[float, int]:
        return self.learning_rates[len(self.learning_rates) // 2], self.batch_sizes[len(self.batch_sizes) // 2]


@dataclass(frozen=True)
class Dynamics:
    diverged: bool
    noisy: bool
    slope: Optional[float]
    slope_p: Optional[float]
    noise: Optional[float]


@dataclass
class TrialOutcome:
    score: Optional[float]
    train_losses: list[float]
    payload: object = None


@dataclass
class SearchResult:
    best: TrainConfig
    best_score: Optional[float]
    successful: bool
    trials: list[dict] = field(default_factory=list)
    best_payload: object = None


# ---------------------------------------------------------------------------
# Dynamics
# ---------------------------------------------------------------------------

def assess_dynamics(losses: Sequence[float], noise_threshold: float = NOISE_THRESHOLD) -> Dynamics:
    """
    Diverged: a non-finite loss, or a significantly positive OLS slope of loss
    against step. Noisy: std of the residuals around a LOWESS smooth, relative
    to the mean smoothed loss, above ``noise_threshold``.
    """
    y = np.asarray(losses, dtype=np.float64)
    if y.size == 0 or not np.all(np.isfinite(y)):
        return Dynamics(True, False, None, None, None)
    if y.size < 5:
        return Dynamics(False, False, None, None, None)
    x = np.arange(y.size, dtype=np.float64)
    fit = sm.OLS(y, sm.add_constant(x)).fit()
    slope, p = float(fit.params[1]), float(fit.pvalues[1])
    smooth = lowess(y, x, frac=LOWESS_FRAC, return_sorted=False)
    scale = float(np.mean(np.abs(smooth))) or 1.0
    noise = float(np.std(y - smooth) / scale)
    return Dynamics(
        diverged=bool(slope > 0 and p < TREND_P_VALUE),
        noisy=bool(noise > noise_threshold),
        slope=slope, slope_p=p, noise=noise,
    )


def next_combination(cfg: TrainConfig, dyn: Dynamics, tried: set) -> tuple[TrainConfig, str]:
    lr, batch = cfg.learning_rate, cfg.batch_size
    if dyn.diverged:
        action, lr = "halve_lr", lr / 2
    elif dyn.noisy:
        action, batch = "double_batch", batch * 2
    else:
        action, lr = "double_lr", lr * 2
    lr = float(min(max(lr, LR_BOUNDS[0]), LR_BOUNDS[1]))
    batch = int(min(max(batch, BATCH_BOUNDS[0]), BATCH_BOUNDS[1]))
    while (lr, batch) in tried and lr > LR_BOUNDS[0]:
        action, lr = action + "+halve_lr", max(lr / 2, LR_BOUNDS[0])
    return cfg.with_changes(learning_rate=lr, batch_size=batch), action


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------

def hyperparameter_search(
    run: Callable[[TrainConfig], TrialOutcome],
    base: TrainConfig,
    grid: SearchGrid = SearchGrid(),
    target: float = TARGET,
    max_combinations: int = MAX_COMBINATIONS,
    log_path: Optional[Path] = None,
    name: str = "search",
) -> SearchResult:
    """``run`` trains one configuration and returns its validation score and train losses."""
    lr, batch = grid.midpoint
    cfg = base.with_changes(learning_rate=lr, batch_size=batch)
    tried: set = set()
    trials: list[dict] = []
    best: Optional[tuple[float, TrainConfig, object]] = None

    logger.info("=" * 55)
    logger.info(f"  Hyperparameter search ({name}): target {target}, budget {max_combinations}")
    logger.info("=" * 55)

    for trial in range(1, max_combinations + 1):
        tried.add((cfg.learning_rate, cfg.batch_size))
        try:
            outcome = run(cfg)
        except NonFiniteLossError as e:
            logger.warning(f"   trial {trial}: {e}")
            outcome = TrialOutcome(None, [float("nan")])
        dyn = assess_dynamics(outcome.train_losses)
        score = outcome.score
        if score is not None and (best is None or score > best[0]):
            best = (score, cfg, outcome.payload)
        solved = score is not None and score >= target

        entry = {
            "trial": trial,
            "learning_rate": cfg.learning_rate,
            "batch_size": cfg.batch_size,
            "score": score,
            "diverged": dyn.diverged,
            "noisy": dyn.noisy,
            "slope": dyn.slope,
            "noise": dyn.noise,
            "action": "stop" if solved or trial == max_combinations else None,
        }
        if entry["action"] is None:
            cfg_next, entry["action"] = next_combination(cfg, dyn, tried)
        trials.append(entry)
        logger.info(f"── trial {trial}: lr={entry['learning_rate']:g} batch={entry['batch_size']} "
                    f"score={score if score is None else round(score, 4)} → {entry['action']}")
        if log_path is not None:
            write_jsonl(log_path, trials)
        if entry["action"] == "stop":
            break
        cfg = cfg_next

    if best is None:
        result = SearchResult(cfg, None, False, trials)
    else:
        result = SearchResult(best[1], best[0], best[0] >= target, trials, best[2])
    if not result.successful:
        logger.warning(f"   search exhausted {len(trials)} combination(s) without reaching {target}")
    logger.info(f"✅ best lr={result.best.learning_rate:g} batch={result.best.batch_size} score={result.best_score}")
    return result


def load_search_log(path: Path) -> list[dict]:
    return read_jsonl(path)
