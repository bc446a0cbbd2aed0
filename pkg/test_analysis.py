"""
Results tables and plots - tests
Run: pytest test_analysis.py
"""

import sys
from pathlib import Path
sys.path.insert(0, str(Path(__file__).resolve().parent))

import numpy as np
import pandas as pd
import pytest
from openpyxl import load_workbook

from analysis.plots import loss_history_figure, metric_history_figure, plot_directory, pr_curve_figure
from analysis.results_tables import BEST_CELL, build_tables, collect_results, export_tables
from common.errors import InvalidInputError, MissingInputError
from common.io_utils import save_json


def encoder_record(task, model, accuracy):
    return {"architecture": f"encoder:{model}", "task": task, "split": "test", "accuracy": accuracy}


def decoder_record(task, representation, nwa, fact):
    return {"architecture": f"decoder:cross_attention+{representation}", "representation": representation,
            "task": task, "split": "test", "next_word_accuracy": nwa, "factual_accuracy": fact}


@pytest.fixture
def results_dir(tmp_path):
    root = tmp_path / "results"
    save_json(root / "combined" / "encoder_eval_test.json", encoder_record("combined", "chunked_2d+conv3d", 0.62))
    save_json(root / "rotation" / "encoder_eval_test.json", encoder_record("rotation", "chunked_2d+conv3d", 0.91))
    save_json(root / "combined" / "a" / "decoder_eval_test.json", decoder_record("combined", "tokens", 0.8, 0.3))
    save_json(root / "combined" / "b" / "decoder_eval_test.json", decoder_record("combined", "feature_maps", 0.9, 0.5))
    save_json(root / "combined" / "b" / "decoder_eval_val.json", decoder_record("combined", "feature_maps", 0.1, 0.1))
    return root


def history_frame():
    rows = []
    for step in (10, 20, 30, 40):
        rows.append({"step": step, "split": "train", "metric": "loss", "value": 1.0 / step})
        rows.append({"step": step, "split": "val", "metric": "loss", "value": 1.5 / step})
        rows.append({"step": step, "split": "val", "metric": "accuracy", "value": step / 50})
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

def test_collect_results_filters_split(results_dir):
    records = collect_results([results_dir], "test")
    assert len(records) == 4
    assert sorted(r["kind"] for r in records) == ["decoder", "decoder", "encoder", "encoder"]


def test_build_tables(results_dir):
    tables = build_tables(collect_results([results_dir]))
    enc = tables["encoder_accuracy"]
    assert list(enc["Task"]) == ["rotation", "combined"]
    assert list(enc["chunked_2d+conv3d"]) == [0.91, 0.62]
    fact = tables["factual_accuracy"].set_index("Task")
    assert fact.loc["combined", "feature_maps"] == 0.5
    assert fact.loc["combined", "tokens"] == 0.3


def test_build_tables_without_records():
    tables = build_tables([])
    assert all(df.empty for df in tables.values())


def test_export_writes_csvs_and_workbook(results_dir, tmp_path):
    records = collect_results([results_dir])
    path = export_tables(build_tables(records), tmp_path / "out", records)
    assert (tmp_path / "out" / "next_word_accuracy.csv").exists()
    wb = load_workbook(path)
    assert wb.sheetnames == ["Summary", "encoder_accuracy", "next_word_accuracy", "factual_accuracy"]
    assert wb["Summary"].cell(row=4 + len(records) - 1, column=1).value in ("encoder", "decoder")

    ws = wb["next_word_accuracy"]
    header = [c.value for c in ws[2]]
    best_col = header.index("feature_maps") + 1
    assert ws.cell(row=3, column=best_col).value == 0.9
    assert ws.cell(row=3, column=best_col).fill.start_color.rgb.endswith(BEST_CELL)


# ---------------------------------------------------------------------------
# Figures
# ---------------------------------------------------------------------------

def test_pr_curve_skips_labels_without_positives():
    scores = pd.DataFrame({
        "sample_id": ["a", "b", "c", "a", "b", "c"],
        "label": ["mirror"] * 3 + ["rot_90"] * 3,
        "score": [0.9, 0.2, 0.4, 0.5, 0.6, 0.7],
        "truth": [1, 0, 0, 0, 0, 0],
    })
    fig = pr_curve_figure(scores)
    assert len(fig.data) == 1
    assert fig.data[0].name == "mirror (AUC 1.000)"


def test_loss_history_has_trend_and_validation():
    fig = loss_history_figure(history_frame())
    assert [trace.name for trace in fig.data] == ["train", "train OLS trend", "val"]
    assert np.allclose(fig.data[2].y, [0.15, 0.075, 0.05, 0.0375])


def test_loss_history_needs_training_loss():
    history = history_frame()
    with pytest.raises(InvalidInputError):
        loss_history_figure(history[history["split"] == "val"])


def test_metric_history_excludes_loss():
    fig = metric_history_figure(history_frame())
    assert [trace.name for trace in fig.data] == ["accuracy"]


def test_plot_directory_missing(tmp_path):
    with pytest.raises(MissingInputError):
        plot_directory(tmp_path / "absent", tmp_path / "plots")
    (tmp_path / "empty").mkdir()
    with pytest.raises(MissingInputError):
        plot_directory(tmp_path / "empty", tmp_path / "plots")


@pytest.mark.slow
def test_plot_directory_writes_png(tmp_path):
    pytest.importorskip("kaleido")
    history_frame().to_csv(tmp_path / "encoder.history.csv", index=False)
    written = plot_directory(tmp_path, tmp_path / "plots")
    assert sorted(p.name for p in written) == ["encoder_loss.png", "encoder_metrics.png"]
    assert all(p.stat().st_size > 0 for p in written)
