"""Evaluation metrics: region composition, Dice overlap, Hausdorff distance.

Regions follow the nested convention: enhancing tumor is label 4, tumor
core is labels {1, 4}, whole tumor is labels {1, 2, 4}. The Hausdorff
distance is the full (not percentile) symmetric maximum over boundary
point sets, using Euclidean distance with optional voxel spacing.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "RegionMasks",
    "MetricReport",
    "UndefinedMetricError",
    "compose_regions",
    "dice_score",
    "extract_boundary",
    "hausdorff",
    "hausdorff_grid",
]

_VALID_LABELS = frozenset({0, 1, 2, 4})


class UndefinedMetricError(Exception):
    """Raised when a metric has no defined value (e.g. empty boundary set)."""


@dataclass(frozen=True)
class RegionMasks:
    """Binary masks for the three nested evaluation regions."""

    et: np.ndarray
    wt: np.ndarray
    tc: np.ndarray

    def as_dict(self) -> dict[str, np.ndarray]:
        return {"et": self.et, "wt": self.wt, "tc": self.tc}


@dataclass
class MetricReport:
    """Per-region Dice and Hausdorff values; NaN marks undefined distances.

    `flags` records degenerate cases (both-empty Dice, undefined HD) so
    they are never silently folded into the numbers.
    """

    dice_et: float
    dice_wt: float
    dice_tc: float
    hd_et: float
    hd_wt: float
    hd_tc: float
    flags: list[str] = field(default_factory=list)

    def to_text(self) -> str:
        lines = [
            f"dice_et={self.dice_et!r}",
            f"dice_wt={self.dice_wt!r}",
            f"dice_tc={self.dice_tc!r}",
            f"hd_et={self.hd_et!r}",
            f"hd_wt={self.hd_wt!r}",
            f"hd_tc={self.hd_tc!r}",
        ]
        lines += [f"flag_{name}=1" for name in self.flags]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "MetricReport":
        values: dict[str, float] = {}
        flags: list[str] = []
        for line in text.splitlines():
            line = line.strip()
            if not line:
                continue
            key, _, raw = line.partition("=")
            if key.startswith("flag_"):
                flags.append(key[5:])
            else:
                values[key] = float(raw)
        return cls(flags=flags, **values)


def compose_regions(labels: np.ndarray) -> RegionMasks:
    """ET = {4}, TC = {1, 4}, WT = {1, 2, 4} from a coded label grid."""
    labels = np.asarray(labels)
    present = set(np.unique(labels).tolist())
    unknown = present - _VALID_LABELS
    if unknown:
        raise ValueError(f"unknown label codes {sorted(unknown)}")
    return RegionMasks(et=labels == 4, wt=labels > 0, tc=(labels == 1) | (labels == 4))


def dice_score(a: np.ndarray, b: np.ndarray) -> float:
    """2|A n B| / (|A| + |B|); two empty masks count as perfect agreement."""
    a = np.asarray(a, dtype=bool)
    b = np.asarray(b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    denom = int(a.sum()) + int(b.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / denom


def extract_boundary(mask: np.ndarray) -> np.ndarray:
    """Coordinates (N, 3) of mask voxels with a 6-neighbor outside the mask.

    Voxels on the volume border count as boundary. Empty mask gives an
    empty (0, 3) array.
    """
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        return np.empty((0, 3), dtype=np.int64)
    padded = np.pad(mask, 1)
    interior = np.ones_like(mask)
    for axis in range(3):
        lo = [slice(1, -1)] * 3
        hi = [slice(1, -1)] * 3
        lo[axis] = slice(0, -2)
        hi[axis] = slice(2, None)
        interior &= padded[tuple(lo)] & padded[tuple(hi)]
    return np.argwhere(mask & ~interior)


def _directed_sq(p: np.ndarray, g: np.ndarray, block: int = 512) -> float:
    """max over p of the squared distance to the nearest g point."""
    worst = 0.0
    for start in range(0, len(p), block):
        chunk = p[start : start + block]
        d2 = ((chunk[:, None, :] - g[None, :, :]) ** 2).sum(axis=2)
        worst = max(worst, float(d2.min(axis=1).max()))
    return worst


def hausdorff(pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Symmetric Hausdorff distance between two mask boundaries.

    Raises UndefinedMetricError when either mask is empty; callers must
    report that, never substitute zero.
    """
    pb = extract_boundary(pred)
    gb = extract_boundary(gt)
    if len(pb) == 0 or len(gb) == 0:
        raise UndefinedMetricError("Hausdorff undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    p = pb.astype(np.float64) * sp
    g = gb.astype(np.float64) * sp
    return float(np.sqrt(max(_directed_sq(p, g), _directed_sq(g, p))))


class _CellGrid:
    """Uniform spatial hash over scaled points for exact nearest lookups."""

    def __init__(self, points: np.ndarray, cell: float):
        self.points = points
        self.cell = cell
        self.buckets: dict[tuple[int, int, int], np.ndarray] = {}
        keys = np.floor(points / cell).astype(np.int64)
        order = np.lexsort(keys.T[::-1])
        sorted_keys = keys[order]
        split_at = np.nonzero(np.any(np.diff(sorted_keys, axis=0), axis=1))[0] + 1
        for idx_group in np.split(order, split_at):
            self.buckets[tuple(keys[idx_group[0]])] = self.points[idx_group]

    def nearest_sq(self, q: np.ndarray) -> float:
        base = tuple(np.floor(q / self.cell).astype(np.int64))
        best = np.inf
        ring = 0
        while True:
            for kd in range(base[0] - ring, base[0] + ring + 1):
                for kh in range(base[1] - ring, base[1] + ring + 1):
                    for kw in range(base[2] - ring, base[2] + ring + 1):
                        if max(abs(kd - base[0]), abs(kh - base[1]), abs(kw - base[2])) != ring:
                            continue
                        pts = self.buckets.get((kd, kh, kw))
                        if pts is None:
                            continue
                        d2 = ((pts - q) ** 2).sum(axis=1)
                        best = min(best, float(d2.min()))
            # every point in ring r+1 or beyond sits at least ring*cell away,
            # so the current best cannot be beaten once it is within that bound
            if best <= (ring * self.cell) ** 2:
                return best
            ring += 1


def hausdorff_grid(pred: np.ndarray, gt: np.ndarray, spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)) -> float:
    """Spatial-grid accelerated Hausdorff; agrees exactly with `hausdorff`.

    Squared distances are computed with the same expression as the
    brute-force path, so the minimum (and therefore the result) is
    bit-identical.
    """
    pb = extract_boundary(pred)
    gb = extract_boundary(gt)
    if len(pb) == 0 or len(gb) == 0:
        raise UndefinedMetricError("Hausdorff undefined for an empty mask")
    sp = np.asarray(spacing, dtype=np.float64)
    p = pb.astype(np.float64) * sp
    g = gb.astype(np.float64) * sp
    cell = float(max(sp.max(), 1e-9)) * 2.0

    def directed(a: np.ndarray, b: np.ndarray) -> float:
        grid = _CellGrid(b, cell)
        return max(grid.nearest_sq(q) for q in a)

    return float(np.sqrt(max(directed(p, g), directed(g, p))))
