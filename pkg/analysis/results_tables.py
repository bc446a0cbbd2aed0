"""
Results Tables
==============
Collects the evaluation JSON files written by ``eval-encoder`` / ``eval-decoder``
and produces:
  1. Terminal report: printed summary tables
  2. CSV per table
  3. Excel workbook: one formatted sheet per table plus a summary tab

Tables (rows = task, columns = model or representation):
  - encoder accuracy (strict all-labels)
  - decoder next-word accuracy (teacher forcing)
  - decoder factual accuracy

Usage:
    tables = build_tables(collect_results([Path("runs/results")]))
    export_tables(tables, Path("runs/results"))
"""

import logging
from pathlib import Path
from typing import Iterable, Optional

import pandas as pd
from openpyxl import Workbook
from openpyxl.styles import Alignment, Border, Font, PatternFill, Side
from openpyxl.utils import get_column_letter

from common.io_utils import load_json

logger = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# Colours (openpyxl uses ARGB hex, no #)
# ---------------------------------------------------------------------------
HEADER_BG   = "12355B"   # deep blue header background
HEADER_FG   = "FFFFFF"
TITLE_BG    = "2E7D6B"   # teal title bar
ALT_ROW     = "EEF4F8"
BEST_CELL   = "FFE08A"   # best value per row
WHITE       = "FFFFFF"
DARK_TEXT   = "1A1A2E"

TASK_ORDER = ["mirror", "rotation", "occlusion", "combined"]
TABLES = {
    "encoder_accuracy":   "Encoder accuracy (all labels correct)",
    "next_word_accuracy": "Next-word accuracy (teacher forcing)",
    "factual_accuracy":   "Factual accuracy (parsed claims)",
}


# ---------------------------------------------------------------------------
# Collection
# ---------------------------------------------------------------------------

def collect_results(dirs: Iterable[Path], split: str = "test") -> list[dict]:
    records = []
    for d in dirs:
        for path in sorted(Path(d).rglob(f"*_eval_{split}.json")):
            record = load_json(path)
            record["kind"] = "encoder" if path.name.startswith("encoder") else "decoder"
            record["source"] = str(path)
            records.append(record)
    logger.info(f"── Collected {len(records)} evaluation file(s)")
    return records


def _pivot(rows: list[dict], column: str, value: str) -> pd.DataFrame:
    if not rows:
        return pd.DataFrame(columns=["Task"])
    df = pd.DataFrame(rows)
    table = df.pivot_table(index="task", columns=column, values=value, aggfunc="last")
    order = [t for t in TASK_ORDER if t in table.index] + sorted(t for t in table.index if t not in TASK_ORDER)
    table = table.reindex(order)
    table.index.name = "Task"
    table.columns.name = None
    return table.reset_index()


def build_tables(records: list[dict]) -> dict[str, pd.DataFrame]:
    encoder_rows = [
        {"task": r["task"], "model": r["architecture"].removeprefix("encoder:"), "accuracy": r["accuracy"]}
        for r in records if r["kind"] == "encoder"
    ]
    decoder_rows = [
        {"task": r["task"], "representation": r["representation"],
         "next_word_accuracy": r["next_word_accuracy"], "factual_accuracy": r["factual_accuracy"]}
        for r in records if r["kind"] == "decoder"
    ]
    return {
        "encoder_accuracy":   _pivot(encoder_rows, "model", "accuracy"),
        "next_word_accuracy": _pivot(decoder_rows, "representation", "next_word_accuracy"),
        "factual_accuracy":   _pivot(decoder_rows, "representation", "factual_accuracy"),
    }


# ---------------------------------------------------------------------------
# Terminal report
# ---------------------------------------------------------------------------

def print_terminal_report(tables: dict[str, pd.DataFrame]) -> None:
    for name, df in tables.items():
        print("\n" + "=" * 60)
        print(f"  {TABLES[name]}")
        print("=" * 60)
        if df.empty:
            print("  (no results)")
            continue
        print(df.to_string(index=False, float_format=lambda v: f"{v:.3f}"))


# ---------------------------------------------------------------------------
# Excel export
# ---------------------------------------------------------------------------

def make_header_style():
    return {
        "font":      Font(name="Arial", bold=True, color=HEADER_FG, size=10),
        "fill":      PatternFill("solid", start_color=HEADER_BG),
        "alignment": Alignment(horizontal="center", vertical="center", wrap_text=True),
        "border":    Border(bottom=Side(style="medium", color=HEADER_FG)),
    }


def make_title_style():
    return {
        "font":      Font(name="Arial", bold=True, color=WHITE, size=14),
        "fill":      PatternFill("solid", start_color=TITLE_BG),
        "alignment": Alignment(horizontal="left", vertical="center"),
    }


def apply_style(cell, style: dict):
    for attr, val in style.items():
        setattr(cell, attr, val)


def write_sheet(wb: Workbook, sheet_name: str, title: str, df: pd.DataFrame,
                number_format: str = "0.000", highlight_best: bool = True):
    """
    Write a results table to its own sheet.

    The best value of every row is highlighted; empty cells stay blank.
    """
    ws = wb.create_sheet(sheet_name)
    n_cols = max(len(df.columns), 1)

    ws.merge_cells(start_row=1, start_column=1, end_row=1, end_column=n_cols)
    apply_style(ws.cell(row=1, column=1, value=title), make_title_style())
    ws.row_dimensions[1].height = 28

    header_style = make_header_style()
    for col_idx, col_name in enumerate(df.columns, 1):
        apply_style(ws.cell(row=2, column=col_idx, value=col_name), header_style)
    ws.row_dimensions[2].height = 22

    value_cols = list(df.columns[1:])
    for row_idx, (_, row) in enumerate(df.iterrows(), 3):
        row_bg = ALT_ROW if (row_idx - 2) % 2 == 0 else WHITE
        values = pd.to_numeric(row[value_cols], errors="coerce") if value_cols else pd.Series(dtype=float)
        best = values.max() if highlight_best and values.notna().any() else None
        for col_idx, col_name in enumerate(df.columns, 1):
            value = row[col_name]
            if hasattr(value, "item"):
                value = value.item()
            if isinstance(value, float) and pd.isna(value):
                value = None
            cell = ws.cell(row=row_idx, column=col_idx, value=value)
            cell.font = Font(name="Arial", size=9, color=DARK_TEXT)
            fill = BEST_CELL if best is not None and col_idx > 1 and value == best else row_bg
            cell.fill = PatternFill("solid", start_color=fill)
            cell.alignment = Alignment(horizontal="center" if col_idx > 1 else "left", vertical="center")
            cell.border = Border(bottom=Side(style="hair", color="CCCCCC"))
            if col_idx > 1:
                cell.number_format = number_format
        ws.row_dimensions[row_idx].height = 16

    for col_idx, col_name in enumerate(df.columns, 1):
        max_len = max(len(str(col_name)), df[col_name].astype(str).str.len().max() if len(df) > 0 else 0)
        ws.column_dimensions[get_column_letter(col_idx)].width = min(max(max_len + 3, 8), 40)

    ws.freeze_panes = "A3"
    return ws


def build_summary_sheet(wb: Workbook, records: list[dict]):
    """First tab: one line per evaluation file."""
    ws = wb.create_sheet("Summary", 0)
    ws.sheet_view.showGridLines = False
    ws.merge_cells("A1:F1")
    title = ws["A1"]
    title.value = "Report generation benchmark - evaluation summary"
    title.font = Font(name="Arial", bold=True, size=16, color=WHITE)
    title.fill = PatternFill("solid", start_color=HEADER_BG)
    title.alignment = Alignment(horizontal="center", vertical="center")
    ws.row_dimensions[1].height = 36

    headers = ["Kind", "Task", "Model", "Accuracy", "Next-word", "Factual"]
    for col_idx, name in enumerate(headers, 1):
        apply_style(ws.cell(row=3, column=col_idx, value=name), make_header_style())
    for row_idx, r in enumerate(records, 4):
        values = [r["kind"], r["task"], r["architecture"], r.get("accuracy"),
                  r.get("next_word_accuracy"), r.get("factual_accuracy")]
        for col_idx, value in enumerate(values, 1):
            cell = ws.cell(row=row_idx, column=col_idx, value=value)
            cell.font = Font(name="Arial", size=9, color=DARK_TEXT)
            if col_idx > 3:
                cell.number_format = "0.000"
    for col_idx, width in enumerate([10, 12, 40, 12, 12, 12], 1):
        ws.column_dimensions[get_column_letter(col_idx)].width = width
    return ws


def export_tables(tables: dict[str, pd.DataFrame], out_dir: Path,
                  records: Optional[list[dict]] = None) -> Path:
    """Write one CSV per table and the workbook; returns the workbook path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for name, df in tables.items():
        df.to_csv(out_dir / f"{name}.csv", index=False)

    logger.info("── Building Excel workbook...")
    wb = Workbook()
    wb.remove(wb.active)
    build_summary_sheet(wb, records or [])
    for name, df in tables.items():
        write_sheet(wb, name[:31], TABLES[name], df)
    path = out_dir / "results.xlsx"
    wb.save(path)
    logger.info(f"   Excel saved to: {path}")
    return path
