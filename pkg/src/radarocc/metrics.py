"""IoU / mIoU evaluation over range bands inside the hFoV mask."""
from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import forward_distance_mask
from .occupancy import BACKGROUND, FOREGROUND, FREE, OccupancyGrid

DEFAULT_RANGES = (12.8, 25.6, 51.2)
METRICS = ("IoU", "mIoU", "BG IoU", "FG IoU")


def _iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.count_nonzero(a | b)
    if union == 0:
        return math.nan
    return np.count_nonzero(a & b) / union


@dataclass
class MetricTable:
    ranges: tuple[float, ...]
    values: dict = field(default_factory=dict)   # (metric, range) -> float (nan = undefined)

    def get(self, metric: str, r: float) -> float:
        return self.values[(metric, float(r))]

    def rows(self) -> list[tuple[str, float, float]]:
        return [(m, r, self.values[(m, r)]) for r in self.ranges for m in METRICS]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["metric", "range", "value"])
        for m, r, v in self.rows():
            w.writerow([m, f"{r:g}", "" if math.isnan(v) else f"{v:.6f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        head = " | ".join(f"{m:>7s}" for _ in self.ranges for m in METRICS)
        bands = " | ".join(f"{'@' + format(r, 'g') + ' m':^{len(METRICS) * 10 - 3}s}" for r in self.ranges)
        cells = []
        for r in self.ranges:
            for m in METRICS:
                v = self.values[(m, r)]
                cells.append(f"{'n/a':>7s}" if math.isnan(v) else f"{100 * v:7.1f}")
        return f"{bands}\n{head}\n{' | '.join(cells)}\n"


def eval_metrics(pred: OccupancyGrid, gt: OccupancyGrid, mask: np.ndarray | None = None,
                 ranges=DEFAULT_RANGES) -> MetricTable:
    """Geometric IoU, per-class BG/FG IoU and their mean, per forward range band."""
    if pred.grid != gt.grid or pred.labels.shape != gt.labels.shape:
        raise ValueError("prediction and ground truth use different grid specs")
    if mask is None:
        mask = np.ones(gt.labels.shape, dtype=bool)
    table = MetricTable(tuple(float(r) for r in ranges))
    for r in table.ranges:
        m = mask & forward_distance_mask(gt.grid, r)
        p, g = pred.labels[m], gt.labels[m]
        table.values[("IoU", r)] = _iou(p != FREE, g != FREE)
        bg = _iou(p == BACKGROUND, g == BACKGROUND)
        fg = _iou(p == FOREGROUND, g == FOREGROUND)
        table.values[("BG IoU", r)] = bg
        table.values[("FG IoU", r)] = fg
        defined = [v for v in (bg, fg) if not math.isnan(v)]
        table.values[("mIoU", r)] = float(np.mean(defined)) if defined else math.nan
    return table


@dataclass
class MetricAccumulator:
    """Dataset-level metrics: intersections and unions summed over frames before dividing."""

    ranges: tuple[float, ...] = DEFAULT_RANGES
    counts: dict = field(default_factory=dict)

    def add(self, pred: OccupancyGrid, gt: OccupancyGrid, mask: np.ndarray) -> None:
        if pred.grid != gt.grid:
            raise ValueError("prediction and ground truth use different grid specs")
        for r in self.ranges:
            m = mask & forward_distance_mask(gt.grid, r)
            p, g = pred.labels[m], gt.labels[m]
            for name, a, b in (("IoU", p != FREE, g != FREE),
                               ("BG IoU", p == BACKGROUND, g == BACKGROUND),
                               ("FG IoU", p == FOREGROUND, g == FOREGROUND)):
                i, u = self.counts.get((name, r), (0, 0))
                self.counts[(name, r)] = (i + np.count_nonzero(a & b), u + np.count_nonzero(a | b))

    def table(self) -> MetricTable:
        t = MetricTable(tuple(float(r) for r in self.ranges))
        for r in t.ranges:
            for name in ("IoU", "BG IoU", "FG IoU"):
                i, u = self.counts.get((name, r), (0, 0))
                t.values[(name, r)] = i / u if u else math.nan
            defined = [t.values[(n, r)] for n in ("BG IoU", "FG IoU") if not math.isnan(t.values[(n, r)])]
            t.values[("mIoU", r)] = float(np.mean(defined)) if defined else math.nan
        return t
