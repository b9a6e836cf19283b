"""Fold aggregation, CSV tables, SVG plots and reconstruction dumps.

All writers are byte-deterministic: fixed float formatting, LF endings and no
timestamps.
"""
from __future__ import annotations

import csv
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .exceptions import PreconditionError, ShapeError

METRICS_HEADER = ("round", "acc_mean", "acc_std", "sim_mean", "sim_std")
FINAL_HEADER = ("dataset", "algo", "partition", "strategy", "acc_mean", "acc_std")
LOG_FLOOR = 1e-8

# fixed so a strategy keeps its color across every figure
COLORS = {
    "model-inversion": "#1f77b4",
    "gradient-inversion": "#ff7f0e",
    "reference": "#2ca02c",
    "random": "#d62728",
    "drop": "#9467bd",
    "no-action": "#8c564b",
}
_FALLBACK = ("#e377c2", "#7f7f7f", "#bcbd22", "#17becf")


def _fmt(x: float) -> str:
    s = f"{x:.6f}"
    return "0.000000" if s == "-0.000000" else s


def similarity(clients) -> float:
    """Mean L2 distance over all unordered pairs of parameter vectors."""
    vecs = [np.asarray(getattr(c, "data", c), dtype=np.float64) for c in clients]
    if len(vecs) < 2:
        raise PreconditionError("similarity needs at least two models")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ShapeError("parameter vectors differ in shape")
    return float(np.mean([np.linalg.norm(a - b) for a, b in itertools.combinations(vecs, 2)]))


@dataclass(frozen=True, eq=False)
class AggregateSeries:
    strategy: str
    acc_mean: np.ndarray
    acc_std: np.ndarray
    sim_mean: np.ndarray
    sim_std: np.ndarray

    def __len__(self):
        return len(self.acc_mean)

    @property
    def rounds(self) -> np.ndarray:
        return np.arange(1, len(self) + 1)


def _pad(values, horizon: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise PreconditionError("empty fold series")
    if values.size >= horizon:
        return values[:horizon]
    return np.concatenate([values, np.full(horizon - values.size, values[-1])])


def _stats(rows: np.ndarray):
    mean = rows.mean(axis=0)
    std = rows.std(axis=0, ddof=1) if rows.shape[0] > 1 else np.zeros(rows.shape[1])
    return mean, std


def aggregate(folds, strategy: str = "", horizon: int | None = None) -> AggregateSeries:
    """Per-round mean and sample std across folds.

    ``folds`` is a list of RoundLog lists (or objects with a ``logs``
    attribute). Early-stopped folds carry their last value forward to
    ``horizon``, which defaults to the longest fold.
    """
    series = [getattr(f, "logs", f) for f in folds]
    if not series:
        raise PreconditionError("aggregate needs at least one fold")
    if horizon is None:
        horizon = max(len(s) for s in series)
    acc = np.stack([_pad([r.mean_accuracy for r in s], horizon) for s in series])
    sim = np.stack([_pad([r.similarity for r in s], horizon) for s in series])
    am, as_ = _stats(acc)
    sm, ss = _stats(sim)
    return AggregateSeries(strategy, am, as_, sm, ss)


# --------------------------------------------------------------------------
# CSV


def _write_rows(path, header, rows) -> Path:
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            w.writerows(rows)
    except OSError as exc:
        raise OSError(f"{path}: {exc.strerror or exc}") from exc
    return path


def write_metrics_csv(series: AggregateSeries, path) -> Path:
    rows = [(int(r), _fmt(a), _fmt(b), _fmt(c), _fmt(d))
            for r, a, b, c, d in zip(series.rounds, series.acc_mean, series.acc_std,
                                     series.sim_mean, series.sim_std)]
    return _write_rows(path, METRICS_HEADER, rows)


def read_metrics_csv(path, strategy: str = "") -> AggregateSeries:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != METRICS_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    data = np.array([[float(v) for v in r] for r in rows[1:]]).reshape(-1, 5)
    return AggregateSeries(strategy, data[:, 1], data[:, 2], data[:, 3], data[:, 4])


@dataclass(frozen=True)
class FinalTableRow:
    dataset: str
    algo: str
    partition: str
    strategy: str
    acc_mean: float
    acc_std: float


def final_row(dataset: str, algo: str, partition: str, series: AggregateSeries) -> FinalTableRow:
    return FinalTableRow(dataset, algo, partition, series.strategy,
                         float(series.acc_mean[-1]), float(series.acc_std[-1]))


def write_final_table_csv(rows, path) -> Path:
    out = [(r.dataset, r.algo, r.partition, r.strategy, _fmt(r.acc_mean), _fmt(r.acc_std)) for r in rows]
    return _write_rows(path, FINAL_HEADER, out)


def read_final_table_csv(path) -> list[FinalTableRow]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if tuple(rows[0]) != FINAL_HEADER:
        raise ValueError(f"{path}: unexpected header {rows[0]}")
    return [FinalTableRow(a, b, c, d, float(e), float(f)) for a, b, c, d, e, f in rows[1:]]


# --------------------------------------------------------------------------
# SVG

_W, _H = 640, 400
_L, _R, _T, _B = 64, 150, 30, 46


def _color(name: str, k: int) -> str:
    return COLORS.get(name, _FALLBACK[k % len(_FALLBACK)])


def _nice_ticks(lo: float, hi: float, n: int = 5):
    if hi <= lo:
        return [lo]
    step = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(step))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= step), default=step)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-12:
        ticks.append(round(t, 12))
        t += step
    return ticks


def emit_svg(series_set, kind: str, path, title: str | None = None) -> Path:
    """Mean curve with a shaded ±std band for each strategy.

    ``kind`` is ``"convergence"`` (accuracy, linear axis) or ``"similarity"``
    (pairwise L2, log axis with values clamped to 1e-8).
    """
    if kind not in ("convergence", "similarity"):
        raise ValueError(f"unknown plot kind {kind!r}")
    series_set = list(series_set)
    if not series_set:
        raise PreconditionError("nothing to plot")
    log_y = kind == "similarity"
    curves = []
    clamped = False
    for s in series_set:
        mean, std = (s.sim_mean, s.sim_std) if log_y else (s.acc_mean, s.acc_std)
        lo, hi = mean - std, mean + std
        if log_y:
            clamped |= bool(np.any(mean < LOG_FLOOR))
            lo, mean, hi = (np.log10(np.maximum(v, LOG_FLOOR)) for v in (lo, mean, hi))
        curves.append((s.strategy, mean, lo, hi))
    ymin = min(float(c[2].min()) for c in curves)
    ymax = max(float(c[3].max()) for c in curves)
    if log_y:
        ymin, ymax = math.floor(ymin), math.ceil(ymax)
    if ymax - ymin < 1e-9:
        ymin, ymax = ymin - 0.5, ymax + 0.5
    n = max(len(s) for s in series_set)
    pw, ph = _W - _L - _R, _H - _T - _B

    def X(r):
        return _L + (pw * (r - 1) / max(n - 1, 1))

    def Y(v):
        return _T + ph * (1.0 - (v - ymin) / (ymax - ymin))

    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_W}" height="{_H}" viewBox="0 0 {_W} {_H}">',
        f'<rect x="0" y="0" width="{_W}" height="{_H}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_L}" y="18" font-family="sans-serif" font-size="13">{escape(title)}</text>')
    out.append(f'<rect x="{_L}" y="{_T}" width="{pw}" height="{ph}" fill="none" stroke="black"/>')
    yticks = list(range(int(ymin), int(ymax) + 1)) if log_y else _nice_ticks(ymin, ymax)
    for t in yticks:
        label = f"1e{t}" if log_y else f"{t:g}"
        out.append(f'<line x1="{_L - 4}" y1="{Y(t):.2f}" x2="{_L}" y2="{Y(t):.2f}" stroke="black"/>')
        out.append(f'<text x="{_L - 6}" y="{Y(t) + 4:.2f}" font-family="sans-serif" font-size="10" '
                   f'text-anchor="end">{label}</text>')
    for t in _nice_ticks(1, n):
        if t < 1:
            continue
        out.append(f'<text x="{X(t):.2f}" y="{_T + ph + 16}" font-family="sans-serif" font-size="10" '
                   f'text-anchor="middle">{int(t)}</text>')
    out.append(f'<text x="{_L + pw / 2:.2f}" y="{_H - 8}" font-family="sans-serif" font-size="11" '
               f'text-anchor="middle">round</text>')
    ylabel = "mean pairwise L2 (log)" if log_y else "mean client accuracy"
    out.append(f'<text x="14" y="{_T + ph / 2:.2f}" font-family="sans-serif" font-size="11" '
               f'text-anchor="middle" transform="rotate(-90 14 {_T + ph / 2:.2f})">{ylabel}</text>')
    for k, (name, mean, lo, hi) in enumerate(curves):
        col = _color(name, k)
        rs = range(1, len(mean) + 1)
        band = [f"{X(r):.2f},{Y(v):.2f}" for r, v in zip(rs, hi)]
        band += [f"{X(r):.2f},{Y(v):.2f}" for r, v in reversed(list(zip(rs, lo)))]
        out.append(f'<polygon class="band" points="{" ".join(band)}" fill="{col}" fill-opacity="0.2" stroke="none"/>')
        line = " ".join(f"{X(r):.2f},{Y(v):.2f}" for r, v in zip(rs, mean))
        out.append(f'<polyline class="mean" data-strategy="{escape(name)}" points="{line}" fill="none" '
                   f'stroke="{col}" stroke-width="1.5"/>')
        ly = _T + 14 + 16 * k
        out.append(f'<line x1="{_W - _R + 10}" y1="{ly}" x2="{_W - _R + 30}" y2="{ly}" stroke="{col}" stroke-width="2"/>')
        out.append(f'<text x="{_W - _R + 34}" y="{ly + 4}" font-family="sans-serif" font-size="11">'
                   f'{escape(name)}</text>')
    if clamped:
        out.append(f'<text x="{_L + 4}" y="{_T + ph - 4}" font-family="sans-serif" font-size="9">'
                   f'values below 1e-8 clamped</text>')
    out.append("</svg>")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(("\n".join(out) + "\n").encode("utf-8"))
    return path


# --------------------------------------------------------------------------
# reconstructions


def to_pixels(x) -> np.ndarray:
    return np.rint(255.0 * np.clip(np.asarray(x, dtype=np.float64), 0.0, 1.0)).astype(np.uint8)


def write_pgm(path, pixels: np.ndarray) -> Path:
    h, w = pixels.shape
    path = Path(path)
    path.write_bytes(f"P5\n{w} {h}\n255\n".encode("ascii") + pixels.astype(np.uint8).tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:  # magic, width, height, maxval; exactly one whitespace byte follows
        while raw[pos:pos + 1].isspace():
            pos += 1
        end = pos
        while end < len(raw) and not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = (int(f) for f in fields[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM supported")
    body = raw[pos + 1:]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, got {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w)


def dump_reconstruction(silo, out_dir, grid_shape=None) -> list[Path]:
    """CSV of the synthetic points (label last) plus one PGM per image sample."""
    out_dir = Path(out_dir)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"{out_dir}: {exc.strerror or exc}") from exc
    X = np.asarray(silo.X, dtype=np.float64)
    y = np.asarray(silo.y, dtype=np.int64)
    header = [f"x{j}" for j in range(X.shape[1])] + ["label"]
    rows = [[_fmt(v) for v in x] + [int(c)] for x, c in zip(X, y)]
    written = [_write_rows(out_dir / "reconstruction.csv", header, rows)]
    if grid_shape is not None:
        h, w = grid_shape
        if h * w != X.shape[1]:
            raise ShapeError(f"grid {grid_shape} does not match {X.shape[1]} features")
        for idx, (x, c) in enumerate(zip(X, y)):
            written.append(write_pgm(out_dir / f"sample_{idx}_class_{int(c)}.pgm", to_pixels(x).reshape(h, w)))
    return written
