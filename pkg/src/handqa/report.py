"""Stable text and CSV rendering of result tables.

Floats are always written with six decimals and columns keep the order
they were declared in, so reruns diff cleanly.
"""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

DECIMALS = 6


def format_cell(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (int,)) and not isinstance(value, bool):
        return str(value)
    if isinstance(value, float) or hasattr(value, "dtype"):
        v = float(value)
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        out = f"{v:.{DECIMALS}f}"
        return "0.000000" if out == "-0.000000" else out
    return str(value)


def table_csv(columns, rows) -> str:
    """CSV text with a header line; ``rows`` may be empty."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(list(columns))
    for row in rows:
        if len(row) != len(columns):
            raise ValueError(f"row has {len(row)} cells, expected {len(columns)}")
        w.writerow([format_cell(c) for c in row])
    return buf.getvalue()


def table_text(title: str, columns, rows) -> str:
    cells = [list(columns)] + [[format_cell(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(columns))]
    lines = [title]
    for r in cells:
        lines.append("  ".join(c.rjust(wd) for c, wd in zip(r, widths)))
    return "\n".join(lines) + "\n"


def emit_report(tables: dict, out_dir=None, title: str = "report") -> tuple[str, list[Path]]:
    """Render ``{name: (columns, rows)}`` as a text summary and CSV files.

    Returns:
      (summary text, written paths); nothing is written when ``out_dir`` is None.
    """
    parts = [f"# {title}\n"]
    written = []
    for name in tables:
        columns, rows = tables[name]
        parts.append(table_text(f"[{name}]", columns, rows))
        if out_dir is not None:
            path = Path(out_dir) / f"{name}.csv"
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(table_csv(columns, rows))
            written.append(path)
    summary = "\n".join(parts)
    if out_dir is not None:
        path = Path(out_dir) / f"{title}.txt"
        path.write_text(summary)
        written.append(path)
    return summary, written
