"""Overlap and surface-distance metrics plus a one-tailed signed-rank test.

Label maps carry a physical pixel spacing so surface distances come out
in millimetres.  Metrics return None (not zero, not an exception) when
they are undefined for an instance, e.g. the class is absent from both
maps; aggregation code skips those entries explicitly.
"""

from __future__ import annotations

import numpy as np
from scipy.spatial import cKDTree
from scipy.stats import norm, rankdata

from .errors import DomainError, LabelError, ShapeError

N_CLASSES = 4
CLASS_NAMES = ("background", "lumen", "wall", "tumor")
FOREGROUND_CLASSES = (1, 2, 3)


class LabelMap:
    """Per-pixel class codes 0..3 on a grid with physical spacing (mm)."""

    def __init__(self, grid, spacing=(0.5, 0.5)):
        grid = np.asarray(grid)
        if grid.ndim != 2:
            raise ShapeError(f"label grid must be 2D, got rank {grid.ndim}")
        if not np.issubdtype(grid.dtype, np.integer):
            raise LabelError(f"label grid must be integer, got {grid.dtype}")
        if grid.size and (grid.min() < 0 or grid.max() >= N_CLASSES):
            raise LabelError(f"class codes must lie in [0, {N_CLASSES}), got "
                             f"[{grid.min()}, {grid.max()}]")
        spacing = (float(spacing[0]), float(spacing[1]))
        if spacing[0] <= 0 or spacing[1] <= 0:
            raise DomainError(f"pixel spacing must be positive, got {spacing}")
        self.grid = np.ascontiguousarray(grid)
        self.spacing = spacing

    @property
    def shape(self):
        return self.grid.shape

    def mask(self, cls: int) -> np.ndarray:
        _check_class(cls)
        return self.grid == cls


def _check_class(cls):
    if not 0 <= cls < N_CLASSES:
        raise LabelError(f"class must lie in [0, {N_CLASSES}), got {cls}")


def _check_pair(a: LabelMap, b: LabelMap):
    if a.shape != b.shape:
        raise ShapeError(f"grid extents differ: {a.shape} vs {b.shape}")
    if a.spacing != b.spacing:
        raise ShapeError(f"pixel spacings differ: {a.spacing} vs {b.spacing}")


def dsc(a: LabelMap, b: LabelMap, cls: int):
    """Overlap 2|A n B| / (|A| + |B|); None when both masks are empty."""
    _check_pair(a, b)
    ma = a.mask(cls)
    mb = b.mask(cls)
    denom = int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return None
    return 2.0 * int(np.logical_and(ma, mb).sum()) / denom


def pooled_dsc(pairs, cls: int):
    """DSC over several map pairs pooled into one count (volume-style)."""
    inter = 0
    denom = 0
    for a, b in pairs:
        _check_pair(a, b)
        ma = a.mask(cls)
        mb = b.mask(cls)
        inter += int(np.logical_and(ma, mb).sum())
        denom += int(ma.sum()) + int(mb.sum())
    if denom == 0:
        return None
    return 2.0 * inter / denom


def surface(a: LabelMap, cls: int) -> np.ndarray:
    """(K, 2) row/col indices of class pixels with an exposed 4-neighbor.

    A pixel belongs to the surface when at least one axis neighbor is
    not of the class; pixels on the image border always qualify.
    """
    m = a.mask(cls)
    padded = np.pad(m, 1, constant_values=False)
    core = (padded[:-2, 1:-1] & padded[2:, 1:-1]
            & padded[1:-1, :-2] & padded[1:-1, 2:])
    return np.argwhere(m & ~core)


def assd(a: LabelMap, b: LabelMap, cls: int):
    """Average symmetric surface distance in mm; None when a surface is empty.

    Sums each surface point's distance to the nearest point of the other
    surface, both ways, and divides by the total point count.
    """
    _check_pair(a, b)
    sa = surface(a, cls)
    sb = surface(b, cls)
    if len(sa) == 0 or len(sb) == 0:
        return None
    scale = np.asarray(a.spacing)
    pa = sa * scale
    pb = sb * scale
    da = cKDTree(pb).query(pa)[0]
    db = cKDTree(pa).query(pb)[0]
    return float((da.sum() + db.sum()) / (len(pa) + len(pb)))


def wilcoxon_one_tailed(x, y, exact=None):
    """Signed-rank p-value for the hypothesis that x runs larger than y.

    Zero differences are dropped; tied magnitudes get average ranks.
    With 12 or fewer nonzero pairs the p-value enumerates all sign
    assignments exactly, beyond that a normal approximation with tie and
    continuity corrections applies.  ``exact`` forces one mode.  Returns
    None when every difference is zero.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ShapeError(f"need equal-length 1D samples, got {x.shape} "
                         f"and {y.shape}")
    if x.size < 5:
        raise DomainError(f"need at least 5 pairs, got {x.size}")
    d = x - y
    d = d[d != 0.0]
    n = d.size
    if n == 0:
        return None
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    if exact is None:
        exact = n <= 12
    if exact:
        if n > 20:
            raise DomainError(f"exact enumeration over 2^{n} sign patterns "
                              f"is not practical")
        sums = np.zeros(1)
        for r in ranks:
            sums = np.concatenate([sums, sums + r])
        # >= with a small slack so float rank sums compare reliably
        hits = int((sums >= w_plus - 1e-9).sum())
        return hits / float(2 ** n)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0
    _, counts = np.unique(ranks, return_counts=True)
    var -= (counts ** 3 - counts).sum() / 48.0
    if var <= 0:
        return None
    z = (w_plus - mean - 0.5) / np.sqrt(var)
    return float(norm.sf(z))


class MetricReport:
    """Per-sample, per-class metric rows plus aggregation helpers."""

    def __init__(self):
        self.rows = []

    def add(self, sample_id, cls, dsc_value, assd_value):
        _check_class(cls)
        self.rows.append((str(sample_id), int(cls), dsc_value, assd_value))

    def csv(self) -> str:
        def cell(v):
            return "NA" if v is None else f"{v:.4f}"

        lines = ["sample_id,class,dsc,assd_mm"]
        for sid, cls, d, s in self.rows:
            lines.append(f"{sid},{CLASS_NAMES[cls]},{cell(d)},{cell(s)}")
        return "\n".join(lines) + "\n"

    def values(self, cls, metric="dsc"):
        col = 2 if metric == "dsc" else 3
        return [row[col] for row in self.rows
                if row[1] == cls and row[col] is not None]

    def mean_std(self, cls, metric="dsc"):
        """(mean, std, count) over defined entries; (None, None, 0) if none."""
        vals = self.values(cls, metric)
        if not vals:
            return None, None, 0
        arr = np.asarray(vals, dtype=np.float64)
        return float(arr.mean()), float(arr.std()), len(vals)

    def mean_foreground_dsc(self):
        """Mean of the per-class mean DSCs over lumen, wall and tumor.

        Classes with no defined entries are skipped; None when nothing
        is defined at all.
        """
        means = []
        for cls in FOREGROUND_CLASSES:
            m, _, count = self.mean_std(cls, "dsc")
            if count:
                means.append(m)
        if not means:
            return None
        return float(np.mean(means))
