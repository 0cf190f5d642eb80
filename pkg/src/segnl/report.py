"""Evaluation report assembly and its file outputs (JSON, ROC CSV, SVG plot)."""

import csv
import json
import os
from xml.sax.saxutils import escape

import numpy as np

SCHEMA_PATH = os.path.join(os.path.dirname(__file__), "eval_report.schema.json")

TABLE_ROWS = ("DSC watershed", "DSC network", "AUC network")
TABLE_COLUMNS = ("left", "right", "both")


def load_schema():
    with open(SCHEMA_PATH) as fh:
        return json.load(fh)


def table(pooled_watershed, pooled_network, aucs):
    """Rows (watershed DSC, network DSC, network AUC) x columns (left, right, both)."""
    values = [
        [pooled_watershed[c] for c in TABLE_COLUMNS],
        [pooled_network[c] for c in TABLE_COLUMNS],
        [aucs[c] for c in TABLE_COLUMNS],
    ]
    return {"rows": list(TABLE_ROWS), "columns": list(TABLE_COLUMNS), "values": values}


def format_table(tab):
    width = max(len(r) for r in tab["rows"]) + 2
    lines = [" " * width + "".join(f"{c:>8}" for c in tab["columns"])]
    for name, vals in zip(tab["rows"], tab["values"]):
        lines.append(f"{name:<{width}}" + "".join(f"{v:8.3f}" for v in vals))
    return "\n".join(lines)


def write_report(report, path):
    with open(path, "w") as fh:
        json.dump(report, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_roc_csv(points, path):
    """Rows of ``threshold, fpr, tpr``; ``repr`` keeps full float precision."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in np.asarray(points, dtype=np.float64).tolist():
            writer.writerow([repr(thr), repr(fpr), repr(tpr)])


def read_roc_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    return np.array([[float(r["threshold"]), float(r["fpr"]), float(r["tpr"])] for r in rows])


def roc_svg(points, single_point, auc_value=None, size=400, margin=50):
    """ROC plot: the network curve as one polyline, the watershed as one circle marker."""
    inner = size - 2 * margin

    def px(fpr, tpr):
        return margin + fpr * inner, size - margin - tpr * inner

    pts = np.asarray(points, dtype=np.float64)
    order = np.lexsort((pts[:, -1], pts[:, -2]))
    coords = " ".join("{:.2f},{:.2f}".format(*px(f, t)) for f, t in pts[order][:, -2:])
    mx, my = px(*single_point)
    label = "network" if auc_value is None else f"network (AUC {auc_value:.3f})"
    ticks = []
    for v in (0.0, 0.25, 0.5, 0.75, 1.0):
        x, _ = px(v, 0)
        _, y = px(0, v)
        ticks.append(f'<text x="{x:.1f}" y="{size - margin + 18}" font-size="11" text-anchor="middle">{v:g}</text>')
        ticks.append(f'<text x="{margin - 8}" y="{y + 4:.1f}" font-size="11" text-anchor="end">{v:g}</text>')
    x0, y0 = px(0, 0)
    x1, y1 = px(1, 1)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
        f'<rect x="0" y="0" width="{size}" height="{size}" fill="white"/>',
        f'<path class="axes" d="M{x0:.1f},{y1:.1f} L{x0:.1f},{y0:.1f} L{x1:.1f},{y0:.1f}" '
        'fill="none" stroke="black" stroke-width="1"/>',
        f'<path class="chance" d="M{x0:.1f},{y0:.1f} L{x1:.1f},{y1:.1f}" stroke="#999" '
        'stroke-dasharray="4,4" fill="none"/>',
        *ticks,
        f'<text x="{size / 2}" y="{size - 12}" font-size="13" text-anchor="middle">False positive rate</text>',
        f'<text x="14" y="{size / 2}" font-size="13" text-anchor="middle" '
        f'transform="rotate(-90 14 {size / 2})">True positive rate</text>',
        f'<polyline class="roc" points="{coords}" fill="none" stroke="#1f4e9c" stroke-width="2"/>',
        f'<circle class="marker" cx="{mx:.2f}" cy="{my:.2f}" r="5" fill="#c0392b"/>',
        f'<text x="{x1 - 4:.1f}" y="{y0 - 28:.1f}" font-size="12" text-anchor="end" fill="#1f4e9c">'
        f'{escape(label)}</text>',
        f'<text x="{x1 - 4:.1f}" y="{y0 - 12:.1f}" font-size="12" text-anchor="end" fill="#c0392b">'
        'watershed</text>',
        "</svg>",
    ]
    return "\n".join(parts) + "\n"


def write_svg(text, path):
    with open(path, "w") as fh:
        fh.write(text)
