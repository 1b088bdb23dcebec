"""Explanation files: a per-minute CSV and a self-contained two-panel SVG."""

from __future__ import annotations

import math
from pathlib import Path

import numpy as np

from .attribution import Attribution

_W, _H = 640, 420
_LEFT, _RIGHT = 60, 20
_TOP_PANEL = (40, 200)
_BOTTOM_PANEL = (240, 400)


def explanation_stem(case_id: str, minute: int, model: str) -> str:
    return f"case_{case_id}_t{minute}_{model}"


def _num(v: float) -> str:
    s = f"{v:.6g}"
    return s if s != "-0" else "0"


def explanation_csv(attribution: Attribution, raw_window: np.ndarray) -> str:
    """Rows for minute offsets -59..0; missing SpO2 is written as an empty field."""
    raw = np.asarray(raw_window, dtype=np.float64).reshape(-1)
    n = raw.size
    if attribution.per_minute.shape != (n,):
        raise ValueError("attribution and window lengths differ")
    lines = ["minute_offset,spo2,attribution"]
    for i in range(n):
        spo2 = "" if math.isnan(raw[i]) else repr(float(raw[i]))
        lines.append(f"{i - (n - 1)},{spo2},{float(attribution.per_minute[i])!r}")
    return "\n".join(lines) + "\n"


def explanation_svg(attribution: Attribution, raw_window: np.ndarray, risk: float, title: str = "") -> str:
    """SpO2 trace on top, attribution bars below, predicted risk in the title."""
    raw = np.asarray(raw_window, dtype=np.float64).reshape(-1)
    attr = attribution.per_minute
    n = raw.size
    plot_w = _W - _LEFT - _RIGHT
    xs = [_LEFT + plot_w * (i + 0.5) / n for i in range(n)]

    observed = raw[~np.isnan(raw)]
    lo = min(float(observed.min()), 90.0) if observed.size else 90.0
    hi = 100.0
    y0, y1 = _TOP_PANEL

    def y_spo2(v: float) -> float:
        return y1 - (v - lo) / (hi - lo) * (y1 - y0)

    segments: list[list[str]] = [[]]
    for x, v in zip(xs, raw):
        if math.isnan(v):
            if segments[-1]:
                segments.append([])
            continue
        segments[-1].append(f"{_num(x)},{_num(y_spo2(float(v)))}")

    b0, b1 = _BOTTOM_PANEL
    mid = (b0 + b1) / 2
    scale = float(np.max(np.abs(attr))) if attr.size else 0.0
    half = (b1 - b0) / 2
    bar_w = plot_w / n * 0.8

    heading = f"{title} risk={risk:.4f}".strip()
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
        f'<text x="{_W / 2:g}" y="22" font-family="sans-serif" font-size="14" text-anchor="middle">{_escape(heading)}</text>',
        f'<rect x="{_LEFT}" y="{y0}" width="{plot_w}" height="{y1 - y0}" fill="none" stroke="#888"/>',
        f'<text x="8" y="{(y0 + y1) / 2:g}" font-family="sans-serif" font-size="11">SpO2</text>',
        f'<text x="{_LEFT - 4}" y="{y0 + 4}" font-family="sans-serif" font-size="10" text-anchor="end">{_num(hi)}</text>',
        f'<text x="{_LEFT - 4}" y="{y1}" font-family="sans-serif" font-size="10" text-anchor="end">{_num(lo)}</text>',
    ]
    for seg in segments:
        if len(seg) == 1:
            cx, cy = seg[0].split(",")
            out.append(f'<circle cx="{cx}" cy="{cy}" r="1.5" fill="#1f5fa8"/>')
        elif seg:
            out.append(f'<polyline points="{" ".join(seg)}" fill="none" stroke="#1f5fa8" stroke-width="1.5"/>')
    out.append(f'<rect x="{_LEFT}" y="{b0}" width="{plot_w}" height="{b1 - b0}" fill="none" stroke="#888"/>')
    out.append(f'<line x1="{_LEFT}" y1="{_num(mid)}" x2="{_LEFT + plot_w}" y2="{_num(mid)}" stroke="#444"/>')
    out.append(f'<text x="8" y="{mid:g}" font-family="sans-serif" font-size="11">attr</text>')
    for x, a in zip(xs, attr):
        h = 0.0 if scale == 0 else float(a) / scale * half
        if h == 0:
            continue
        top = mid - h if h > 0 else mid
        color = "#c0392b" if h > 0 else "#2e86c1"
        out.append(
            f'<rect x="{_num(x - bar_w / 2)}" y="{_num(top)}" width="{_num(bar_w)}" height="{_num(abs(h))}" fill="{color}"/>'
        )
    out.append(
        f'<text x="{_LEFT}" y="{b1 + 14}" font-family="sans-serif" font-size="10">-{n - 1} min</text>'
    )
    out.append(
        f'<text x="{_LEFT + plot_w}" y="{b1 + 14}" font-family="sans-serif" font-size="10" text-anchor="end">now</text>'
    )
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _escape(s: str) -> str:
    return s.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def render_explanation(
    attribution: Attribution,
    raw_window: np.ndarray,
    risk: float,
    out_dir: str | Path,
    case_id: str,
    minute: int,
    model: str,
) -> tuple[Path, Path]:
    """Write ``case_<id>_t<minute>_<model>.csv`` and ``.svg`` into ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
        stem = explanation_stem(case_id, minute, model)
        csv_path = out / f"{stem}.csv"
        svg_path = out / f"{stem}.svg"
        csv_path.write_bytes(explanation_csv(attribution, raw_window).encode())
        svg_path.write_bytes(explanation_svg(attribution, raw_window, risk, f"{case_id} t={minute} {model}").encode())
    except OSError as exc:
        raise OSError(f"cannot write explanation to {out}: {exc}") from exc
    return csv_path, svg_path
