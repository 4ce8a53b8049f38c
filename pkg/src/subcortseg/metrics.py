"""Segmentation evaluation: Dice, Hausdorff distance and Wilcoxon signed-rank test."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree
from scipy.stats import rankdata

from .errors import EmptySet, GridMismatch, TooFewPairs
from .nifti_io import CLASS_NAMES, N_CLASSES, LabelVolume

EXACT_MAX_N = 12


def _is_mask(a) -> bool:
    return isinstance(a, np.ndarray) and a.dtype == bool


def _coords(a) -> np.ndarray:
    """Voxel coordinates (N, 3) from a boolean mask or an iterable of index triples."""
    if _is_mask(a):
        return np.argwhere(a)
    arr = np.asarray(list(a) if not isinstance(a, np.ndarray) else a, dtype=np.int64)
    return arr.reshape(-1, 3)


def dsc(a, b) -> float:
    """Dice similarity 2|A n B| / (|A| + |B|).

    ``a`` and ``b`` are boolean masks of one shape or collections of voxel
    index triples.  Two empty sets score 1.
    """
    if _is_mask(a) and _is_mask(b):
        if a.shape != b.shape:
            raise GridMismatch(f"mask shapes differ: {a.shape} vs {b.shape}")
        size = np.count_nonzero(a) + np.count_nonzero(b)
        overlap = np.count_nonzero(a & b)
    else:
        sa = {tuple(v) for v in _coords(a).tolist()}
        sb = {tuple(v) for v in _coords(b).tolist()}
        size = len(sa) + len(sb)
        overlap = len(sa & sb)
    if size == 0:
        return 1.0
    return 2.0 * overlap / size


def surface(mask: np.ndarray) -> np.ndarray:
    """Voxels of ``mask`` with at least one 6-neighbour outside it."""
    inner = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1),
                                   border_value=0)
    return mask & ~inner


def _directed(a: np.ndarray, b: np.ndarray, spacing: np.ndarray) -> float:
    # nearest neighbours from the tree; distances recomputed in one fixed form
    _, idx = cKDTree(b * spacing).query(a * spacing, k=1)
    diff = (a - b[idx]) * spacing
    return float(np.sqrt((diff * diff).sum(axis=1)).max())


def hausdorff(a, b, spacing=(1.0, 1.0, 1.0), surface_only: bool = False) -> float:
    """Symmetric Hausdorff distance in millimetres between two voxel sets.

    Coordinates are scaled by ``spacing`` before taking Euclidean distances.
    By default every voxel of both sets takes part; ``surface_only`` restricts
    the sets to their 6-connected boundary voxels (masks only).
    """
    if surface_only:
        if not (_is_mask(a) and _is_mask(b)):
            raise TypeError("surface_only needs boolean masks")
        a, b = surface(a), surface(b)
    ca, cb = _coords(a), _coords(b)
    if len(ca) == 0 or len(cb) == 0:
        raise EmptySet("Hausdorff distance is undefined for an empty set")
    s = np.asarray(spacing, dtype=np.float64)[:3]
    return max(_directed(ca, cb, s), _directed(cb, ca, s))


class WilcoxonResult(NamedTuple):
    statistic: float
    p_value: float
    n: int
    exact: bool


def _exact_p(ranks: np.ndarray, w: float) -> float:
    """Two-sided p from the exact null distribution of the positive rank sum.

    Ranks may be half-integers (ties), so the distribution is built over
    doubled ranks.  p = P(min(T+, T-) <= W) over all 2^n sign assignments.
    """
    doubled = np.rint(2 * ranks).astype(np.int64)
    total = int(doubled.sum())
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in doubled:
        shifted = np.zeros_like(counts)
        shifted[r:] = counts[:-r]
        counts = counts + shifted
    w2 = int(round(2 * w))
    sums = np.arange(total + 1)
    hits = np.minimum(sums, total - sums) <= w2
    return float(counts[hits].sum()) / float(2 ** len(ranks))


def wilcoxon_signed_rank(x, y, exact_max_n: int = EXACT_MAX_N) -> WilcoxonResult:
    """Paired Wilcoxon signed-rank test.

    Zero differences are dropped; tied |differences| get average ranks.  The
    statistic is min(W+, W-).  For n <= ``exact_max_n`` the two-sided p-value
    is exact, otherwise it comes from the normal approximation with tie
    correction.
    """
    d = np.asarray(x, dtype=np.float64) - np.asarray(y, dtype=np.float64)
    d = d[d != 0]
    n = len(d)
    if n < 5:
        raise TooFewPairs(f"{n} nonzero differences; at least 5 are required")
    ranks = rankdata(np.abs(d))
    w_plus = float(ranks[d > 0].sum())
    w_minus = float(ranks[d < 0].sum())
    w = min(w_plus, w_minus)
    if n <= exact_max_n:
        return WilcoxonResult(w, _exact_p(ranks, w), n, True)

    _, tie_counts = np.unique(ranks, return_counts=True)
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w - mean) / math.sqrt(var)
    p = min(1.0, math.erfc(abs(z) / math.sqrt(2.0)))
    return WilcoxonResult(w, p, n, False)


# ---------------------------------------------------------------------------
# reports


@dataclass
class ClassScore:
    id: int
    name: str
    dsc: float
    hd_mm: Optional[float]

    @property
    def hd_defined(self) -> bool:
        return self.hd_mm is not None


@dataclass
class StructureReport:
    classes: list = field(default_factory=list)
    avg_dsc: float = float("nan")
    std_dsc: float = float("nan")
    avg_hd: Optional[float] = None
    std_hd: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "classes": [{"id": c.id, "name": c.name, "dsc": c.dsc, "hd_mm": c.hd_mm} for c in self.classes],
            "avg_dsc": self.avg_dsc,
            "std_dsc": self.std_dsc,
            "avg_hd": self.avg_hd,
            "std_hd": self.std_hd,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def write_json(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_json())

    def dsc_by_name(self) -> dict:
        return {c.name: c.dsc for c in self.classes}


def evaluate(pred: LabelVolume, gt: LabelVolume, surface_only: bool = False) -> StructureReport:
    """Per-structure DSC and HD (mm) of ``pred`` against ``gt`` for classes 1..14.

    Averages and (population) standard deviations are taken across the 14
    classes; HD statistics use only classes where it is defined.
    """
    if pred.shape != gt.shape:
        raise GridMismatch(f"prediction grid {pred.shape} != ground truth grid {gt.shape}")
    if not np.allclose(pred.spacing, gt.spacing, rtol=1e-6, atol=0):
        raise GridMismatch(f"voxel spacing differs: {pred.spacing} vs {gt.spacing}")
    report = StructureReport()
    for c in range(1, N_CLASSES):
        a = pred.data == c
        b = gt.data == c
        hd = None
        if a.any() and b.any():
            hd = hausdorff(a, b, gt.spacing, surface_only=surface_only)
        report.classes.append(ClassScore(c, CLASS_NAMES[c], dsc(a, b), hd))
    scores = np.array([c.dsc for c in report.classes])
    report.avg_dsc = float(scores.mean())
    report.std_dsc = float(scores.std())
    hds = np.array([c.hd_mm for c in report.classes if c.hd_defined])
    if len(hds):
        report.avg_hd = float(hds.mean())
        report.std_hd = float(hds.std())
    return report
