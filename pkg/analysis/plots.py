"""
Plots
=====
Figures for training and evaluation outputs, written as PNG through kaleido.

  - PR curves per label from an ``encoder_scores_<split>.csv``
  - loss history (train points with an OLS trendline, validation line)
  - validation metric histories (accuracy, PR-AUC, next-word accuracy, ...)

The CSV inputs are read only.

Usage:
    written = plot_directory(Path("runs/checkpoints/combined"), Path("runs/results/plots"))
"""

import logging
from pathlib import Path

import pandas as pd
import plotly.express as px
import plotly.graph_objects as go

from common.errors import InvalidInputError, MissingInputError, UndefinedMetricError
from training.metrics import HISTORY_COLUMNS, pr_auc

logger = logging.getLogger(__name__)

TRAIN_COLOR = "#12355B"
VAL_COLOR = "#C8102E"
TREND_COLOR = "#FFB000"
LAYOUT = dict(template="plotly_white", width=900, height=520, margin=dict(l=60, r=20, t=60, b=50))


def _read_csv(path: Path, columns) -> pd.DataFrame:
    path = Path(path)
    if not path.exists():
        raise MissingInputError(f"CSV not found: {path}")
    df = pd.read_csv(path)
    missing = set(columns) - set(df.columns)
    if missing:
        raise InvalidInputError(f"{path} lacks columns {sorted(missing)}")
    return df


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def pr_curve_figure(scores: pd.DataFrame, title: str = "Precision-recall") -> go.Figure:
    """One step curve per label; labels without positives are skipped."""
    fig = go.Figure()
    for label, group in scores.groupby("label", sort=False):
        try:
            curve = pr_auc(group["score"].to_numpy(), group["truth"].to_numpy())
        except UndefinedMetricError:
            logger.warning(f"   {label}: no positives, PR curve skipped")
            continue
        fig.add_trace(go.Scatter(
            x=curve.recall, y=curve.precision, mode="lines", line_shape="hv",
            name=f"{label} (AUC {curve.area:.3f})",
        ))
    fig.update_layout(title=title, xaxis_title="Recall", yaxis_title="Precision", **LAYOUT)
    fig.update_xaxes(range=[0, 1.02])
    fig.update_yaxes(range=[0, 1.02])
    return fig


def loss_history_figure(history: pd.DataFrame, title: str = "Loss") -> go.Figure:
    loss = history[history["metric"] == "loss"]
    train = loss[loss["split"] == "train"]
    val = loss[loss["split"] == "val"]
    if train.empty:
        raise InvalidInputError("History has no training loss")
    fig = px.scatter(train, x="step", y="value", trendline="ols",
                     trendline_color_override=TREND_COLOR, color_discrete_sequence=[TRAIN_COLOR])
    fig.data[0].name, fig.data[0].showlegend = "train", True
    if len(fig.data) > 1:
        fig.data[1].name, fig.data[1].showlegend = "train OLS trend", True
    if not val.empty:
        fig.add_trace(go.Scatter(x=val["step"], y=val["value"], mode="lines+markers",
                                 name="val", line=dict(color=VAL_COLOR)))
    fig.update_layout(title=title, xaxis_title="Update step", yaxis_title="Loss", **LAYOUT)
    return fig


def metric_history_figure(history: pd.DataFrame, title: str = "Validation metrics") -> go.Figure:
    val = history[(history["split"] == "val") & (history["metric"] != "loss")]
    fig = px.line(val, x="step", y="value", color="metric", markers=True)
    fig.update_layout(title=title, xaxis_title="Update step", yaxis_title="Value", **LAYOUT)
    fig.update_yaxes(range=[0, 1.02])
    return fig


def save_figure(fig: go.Figure, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.write_image(str(path))
    return path


# ---------------------------------------------------------------------------
# Batch
# ---------------------------------------------------------------------------

def plot_history(csv_path: Path, out_dir: Path) -> list[Path]:
    history = _read_csv(csv_path, HISTORY_COLUMNS)
    stem = Path(csv_path).name.removesuffix(".history.csv")
    written = [save_figure(loss_history_figure(history, f"{stem}: loss"), Path(out_dir) / f"{stem}_loss.png")]
    if ((history["split"] == "val") & (history["metric"] != "loss")).any():
        written.append(save_figure(metric_history_figure(history, f"{stem}: validation"),
                                   Path(out_dir) / f"{stem}_metrics.png"))
    return written


def plot_scores(csv_path: Path, out_dir: Path) -> Path:
    scores = _read_csv(csv_path, ["sample_id", "label", "score", "truth"])
    stem = Path(csv_path).stem
    return save_figure(pr_curve_figure(scores, f"{stem}: precision-recall"), Path(out_dir) / f"{stem}_pr.png")


def plot_directory(source: Path, out_dir: Path) -> list[Path]:
    """Plot every history and score CSV found below ``source``."""
    source = Path(source)
    if not source.exists():
        raise MissingInputError(f"Nothing to plot: {source} does not exist")
    written = []
    for csv_path in sorted(source.rglob("*.history.csv")):
        written += plot_history(csv_path, out_dir)
    for csv_path in sorted(source.rglob("encoder_scores_*.csv")):
        written.append(plot_scores(csv_path, out_dir))
    if not written:
        raise MissingInputError(f"No history or score CSV files below {source}")
    for path in written:
        logger.info(f"   {path}")
    return written
