"""Deterministic run artifacts: metrics JSON, CSV tables, an SVG accuracy chart.

Every writer uses sorted keys, fixed float formats, and explicit newlines so
the same results always serialize to the same bytes.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import asdict

from .errors import DataError, FormatError
from .protocol import MethodResult, RunConfig

PALETTE = (
    "#1f77b4",
    "#d62728",
    "#2ca02c",
    "#9467bd",
    "#ff7f0e",
    "#8c564b",
    "#17becf",
    "#e377c2",
    "#7f7f7f",
    "#bcbd22",
)

METRICS_NAME = "metrics.json"
TABLE_NAME = "table.csv"
LOSSES_NAME = "losses.csv"
CHART_NAME = "accuracy.svg"


def _round6(x) -> float:
    return round(float(x), 6)


def metrics_payload(
    cfg: RunConfig, config_text: str, results: list[MethodResult], base_acc: float
) -> dict:
    if not results:
        raise DataError("no results to report")
    lengths = {len(r.metrics.acc) for r in results}
    if len(lengths) != 1:
        raise DataError("methods report different session counts")
    methods = []
    for r in results:
        methods.append(
            {
                "name": r.name,
                "acc": [_round6(a) for a in r.metrics.acc],
                "pd": _round6(r.metrics.pd),
                "avg_acc": _round6(r.metrics.avg_acc),
                "memory_lookup_acc": (
                    [_round6(a) for a in r.mram_acc] if r.mram_acc else None
                ),
                "prototype_match_acc": (
                    [_round6(a) for a in r.match_acc] if r.match_acc else None
                ),
                "store_classes": list(r.store_classes),
            }
        )
    return {
        "config": asdict(cfg),
        "config_text": config_text,
        "base_accuracy": _round6(base_acc),
        "methods": methods,
    }


def _write_text(path: str, text: str) -> None:
    with open(path, "wb") as fh:
        fh.write(text.encode("utf-8"))


def write_metrics(path: str, payload: dict) -> None:
    _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _table_rows(payload: dict) -> list[tuple[str, list[float], float, float]]:
    try:
        methods = payload["methods"]
        rows = [(m["name"], [float(a) for a in m["acc"]], float(m["pd"]), float(m["avg_acc"])) for m in methods]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"malformed metrics payload: {exc}") from exc
    if not rows:
        raise FormatError("metrics payload lists no methods")
    return rows


def write_table(path: str, payload: dict) -> None:
    rows = _table_rows(payload)
    n = len(rows[0][1])
    header = "method," + ",".join(f"acc_{i}" for i in range(n)) + ",pd,avg_acc"
    lines = [header]
    for name, acc, pd, avg in rows:
        cells = [name] + [f"{a:.4f}" for a in acc] + [f"{pd:.4f}", f"{avg:.4f}"]
        lines.append(",".join(cells))
    _write_text(path, "\n".join(lines) + "\n")


def write_losses(path: str, results: list[MethodResult]) -> None:
    lines = ["method,session,epoch,l_cls,l_edge,l_memory,l_update,total"]
    for r in results:
        for session, epoch, l_cls, l_edge, l_mem, l_upd, total in r.loss_rows:
            lines.append(
                f"{r.name},{session},{epoch},"
                f"{l_cls:.6f},{l_edge:.6f},{l_mem:.6f},{l_upd:.6f},{total:.6f}"
            )
    _write_text(path, "\n".join(lines) + "\n")


def render_accuracy_svg(payload: dict) -> str:
    """Accuracy-by-session line chart, one polyline per method."""
    rows = _table_rows(payload)
    sessions = len(rows[0][1])
    left, right, top, bottom = 60.0, 620.0, 40.0, 360.0
    legend_rows = math.ceil(len(rows) / 3)
    height = int(bottom + 40 + legend_rows * 18 + 10)

    def x_of(i: int) -> float:
        if sessions == 1:
            return (left + right) / 2.0
        return left + i * (right - left) / (sessions - 1)

    def y_of(acc: float) -> float:
        return bottom - (acc / 100.0) * (bottom - top)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 640 {height}" '
        f'width="640" height="{height}" font-family="monospace" font-size="12">',
        f'<rect x="0" y="0" width="640" height="{height}" fill="#ffffff"/>',
        '<text x="320" y="20" text-anchor="middle" font-size="14">accuracy by session</text>',
    ]
    for tick in range(0, 101, 20):
        y = y_of(tick)
        parts.append(
            f'<line x1="{left:.2f}" y1="{y:.2f}" x2="{right:.2f}" y2="{y:.2f}" '
            'stroke="#dddddd" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{left - 8:.2f}" y="{y + 4:.2f}" text-anchor="end">{tick}</text>'
        )
    for i in range(sessions):
        x = x_of(i)
        parts.append(
            f'<line x1="{x:.2f}" y1="{bottom:.2f}" x2="{x:.2f}" y2="{bottom + 5:.2f}" '
            'stroke="#000000" stroke-width="1"/>'
        )
        parts.append(
            f'<text x="{x:.2f}" y="{bottom + 18:.2f}" text-anchor="middle">{i}</text>'
        )
    parts.append(
        f'<line x1="{left:.2f}" y1="{top:.2f}" x2="{left:.2f}" y2="{bottom:.2f}" '
        'stroke="#000000" stroke-width="1"/>'
    )
    parts.append(
        f'<line x1="{left:.2f}" y1="{bottom:.2f}" x2="{right:.2f}" y2="{bottom:.2f}" '
        'stroke="#000000" stroke-width="1"/>'
    )
    parts.append(
        f'<text x="{(left + right) / 2:.2f}" y="{bottom + 34:.2f}" text-anchor="middle">session</text>'
    )
    parts.append(
        f'<text x="16" y="{(top + bottom) / 2:.2f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {(top + bottom) / 2:.2f})">accuracy (%)</text>'
    )
    for idx, (name, acc, _, _) in enumerate(rows):
        color = PALETTE[idx % len(PALETTE)]
        points = " ".join(f"{x_of(i):.2f},{y_of(a):.2f}" for i, a in enumerate(acc))
        parts.append(
            f'<polyline points="{points}" fill="none" stroke="{color}" stroke-width="2"/>'
        )
        row, col = divmod(idx, 3)
        lx = 60 + col * 190
        ly = bottom + 48 + row * 18
        parts.append(
            f'<rect x="{lx:.2f}" y="{ly - 9:.2f}" width="12" height="12" fill="{color}"/>'
        )
        parts.append(f'<text x="{lx + 18:.2f}" y="{ly + 2:.2f}">{name}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def write_chart(path: str, payload: dict) -> None:
    _write_text(path, render_accuracy_svg(payload))


def write_run_outputs(
    out_dir: str,
    cfg: RunConfig,
    config_text: str,
    results: list[MethodResult],
    base_acc: float,
) -> dict[str, str]:
    """Emit the full artifact set; returns {artifact name: path}."""
    os.makedirs(out_dir, exist_ok=True)
    payload = metrics_payload(cfg, config_text, results, base_acc)
    paths = {
        METRICS_NAME: os.path.join(out_dir, METRICS_NAME),
        TABLE_NAME: os.path.join(out_dir, TABLE_NAME),
        LOSSES_NAME: os.path.join(out_dir, LOSSES_NAME),
        CHART_NAME: os.path.join(out_dir, CHART_NAME),
    }
    write_metrics(paths[METRICS_NAME], payload)
    write_table(paths[TABLE_NAME], payload)
    write_losses(paths[LOSSES_NAME], results)
    write_chart(paths[CHART_NAME], payload)
    return paths


def rerender(out_dir: str) -> dict[str, str]:
    """Rebuild table.csv and accuracy.svg from an existing metrics.json."""
    metrics_path = os.path.join(out_dir, METRICS_NAME)
    with open(metrics_path, "rb") as fh:
        try:
            payload = json.loads(fh.read().decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise FormatError(f"unreadable metrics file: {exc}") from exc
    paths = {
        TABLE_NAME: os.path.join(out_dir, TABLE_NAME),
        CHART_NAME: os.path.join(out_dir, CHART_NAME),
    }
    write_table(paths[TABLE_NAME], payload)
    write_chart(paths[CHART_NAME], payload)
    return paths
