"""Classical tumor-prior pipeline and five-channel input assembly.

An Otsu threshold over the nonzero FLAIR voxels isolates hyperintense
candidates, the largest connected component is kept, seed voxels are
sampled from it, and a region grows outward from the seeds by intensity
similarity. The grown mask becomes the fifth network input channel next
to the four z-scored modalities.

The growth acceptance test compares each voxel against the mean
intensity of the seed set, fixed before growth, so the result does not
depend on traversal order. The intensity tolerance defaults to the
median tumor-region standard deviation of a labeled training set, with
a documented fallback constant when no labels are available.
"""

from __future__ import annotations

import logging
import warnings
from collections import deque
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .volume_io import MultiModalVolume

__all__ = [
    "DEFAULT_DELTA",
    "PriorConfig",
    "TumorStdStats",
    "otsu_threshold",
    "largest_component",
    "select_seeds",
    "region_grow",
    "tumor_std_stats",
    "derive_delta",
    "generate_prior",
    "build_input",
]

log = logging.getLogger(__name__)

DEFAULT_DELTA = 35.0

_OFFSETS_6 = ((1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1))
_OFFSETS_26 = tuple(
    (d, h, w)
    for d in (-1, 0, 1)
    for h in (-1, 0, 1)
    for w in (-1, 0, 1)
    if (d, h, w) != (0, 0, 0)
)


def _offsets(connectivity: int):
    if connectivity == 6:
        return _OFFSETS_6
    if connectivity == 26:
        return _OFFSETS_26
    raise ValueError(f"connectivity {connectivity} not in (6, 26)")


@dataclass(frozen=True)
class PriorConfig:
    histogram_bins: int = 256
    component_connectivity: int = 26
    growth_connectivity: int = 6
    n_seeds: int = 10
    delta: float = DEFAULT_DELTA
    rng_seed: int = 0

    def __post_init__(self):
        if self.n_seeds < 1:
            raise ValueError("n_seeds must be >= 1")
        if self.delta <= 0:
            raise ValueError("delta must be positive")
        if self.histogram_bins < 2:
            raise ValueError("need at least 2 histogram bins")
        _offsets(self.component_connectivity)
        _offsets(self.growth_connectivity)


@dataclass(frozen=True)
class TumorStdStats:
    """Per-case tumor-intensity standard deviations with summary values.

    The median of an even-length list is the lower of the two central
    values so it always corresponds to an actual case.
    """

    per_case: tuple[float, ...]
    min: float
    max: float
    median: float

    @classmethod
    def from_values(cls, values) -> "TumorStdStats":
        values = tuple(float(v) for v in values)
        if not values:
            raise ValueError("no usable cases")
        ordered = sorted(values)
        return cls(values, ordered[0], ordered[-1], ordered[(len(ordered) - 1) // 2])


def otsu_threshold(flair: np.ndarray, bins: int = 256, mask: np.ndarray | None = None) -> float:
    """Histogram bin edge maximizing the between-class variance.

    Only masked voxels enter the histogram (default: nonzero voxels, so
    background air is excluded). Ties resolve to the lowest threshold.
    """
    flair = np.asarray(flair, dtype=np.float64)
    if mask is None:
        mask = flair != 0
    values = flair[np.asarray(mask, dtype=bool)]
    if values.size < 2 or np.min(values) == np.max(values):
        raise ValueError("Otsu needs at least two distinct masked intensities")
    counts, edges = np.histogram(values, bins=bins)
    counts = counts.astype(np.float64)
    centers = 0.5 * (edges[:-1] + edges[1:])
    total = counts.sum()
    w0 = np.cumsum(counts)[:-1]  # class sizes left of each interior edge
    w1 = total - w0
    csum = np.cumsum(counts * centers)[:-1]
    # an edge whose preceding bin is empty splits the data identically to a
    # lower edge, so dropping it realizes the lowest-threshold tie rule
    valid = (w0 > 0) & (w1 > 0) & (counts[:-1] > 0)
    score = np.full(bins - 1, -np.inf)
    mu0 = np.where(valid, csum / np.where(w0 > 0, w0, 1.0), 0.0)
    mu1 = np.where(valid, (csum[-1] + counts[-1] * centers[-1] - csum) / np.where(w1 > 0, w1, 1.0), 0.0)
    score[valid] = (w0[valid] / total) * (w1[valid] / total) * (mu0[valid] - mu1[valid]) ** 2
    best = int(np.argmax(score))  # argmax takes the first (lowest) maximizer
    return float(edges[best + 1])


def largest_component(mask: np.ndarray, connectivity: int = 26) -> np.ndarray:
    """Keep only the connected component with the most voxels.

    Ties go to the component whose first voxel comes earliest in scan
    order. An empty mask passes through unchanged.
    """
    mask = np.asarray(mask, dtype=bool)
    offsets = _offsets(connectivity)
    visited = np.zeros(mask.shape, dtype=bool)
    best_mask = np.zeros(mask.shape, dtype=bool)
    best_size = 0
    D, H, W = mask.shape
    for start in np.argwhere(mask):
        start = tuple(start)
        if visited[start]:
            continue
        component = []
        queue = deque([start])
        visited[start] = True
        while queue:
            d, h, w = queue.popleft()
            component.append((d, h, w))
            for dd, dh, dw in offsets:
                nd, nh, nw = d + dd, h + dh, w + dw
                if 0 <= nd < D and 0 <= nh < H and 0 <= nw < W and mask[nd, nh, nw] and not visited[nd, nh, nw]:
                    visited[nd, nh, nw] = True
                    queue.append((nd, nh, nw))
        if len(component) > best_size:
            best_size = len(component)
            best_mask = np.zeros(mask.shape, dtype=bool)
            coords = np.array(component)
            best_mask[coords[:, 0], coords[:, 1], coords[:, 2]] = True
    return best_mask


def select_seeds(component: np.ndarray, n: int, rng_seed: int) -> list[tuple[int, int, int]]:
    """Uniform sample of component voxels without replacement.

    Returns every voxel when the component holds fewer than n.
    """
    coords = np.argwhere(np.asarray(component, dtype=bool))
    if len(coords) == 0:
        raise ValueError("cannot select seeds from an empty component")
    rng = np.random.default_rng(rng_seed)
    take = min(n, len(coords))
    chosen = coords[rng.choice(len(coords), size=take, replace=False)]
    return [tuple(int(v) for v in c) for c in chosen]


def region_grow(
    flair: np.ndarray,
    seeds,
    delta: float,
    connectivity: int = 6,
) -> np.ndarray:
    """Breadth-first growth from all seeds against a fixed reference mean.

    A voxel joins when |intensity - mean(seed intensities)| <= delta and
    it touches the region; seeds are members regardless of the predicate.
    """
    flair = np.asarray(flair, dtype=np.float64)
    seeds = [tuple(int(v) for v in s) for s in seeds]
    if not seeds:
        raise ValueError("need at least one seed")
    D, H, W = flair.shape
    for s in seeds:
        if not (0 <= s[0] < D and 0 <= s[1] < H and 0 <= s[2] < W):
            raise ValueError(f"seed {s} outside grid {flair.shape}")
    mu = float(np.mean([flair[s] for s in seeds]))
    accept = np.abs(flair - mu) <= delta
    offsets = _offsets(connectivity)
    region = np.zeros(flair.shape, dtype=bool)
    queue = deque()
    for s in seeds:
        if not region[s]:
            region[s] = True
            queue.append(s)
    while queue:
        d, h, w = queue.popleft()
        for dd, dh, dw in offsets:
            nd, nh, nw = d + dd, h + dh, w + dw
            if 0 <= nd < D and 0 <= nh < H and 0 <= nw < W and not region[nd, nh, nw] and accept[nd, nh, nw]:
                region[nd, nh, nw] = True
                queue.append((nd, nh, nw))
    return region


def tumor_std_stats(cases) -> TumorStdStats:
    """Population std of FLAIR intensities inside labeled tumor, per case.

    Cases with fewer than two tumor voxels are skipped with a warning;
    raises when nothing usable remains.
    """
    values = []
    for i, (flair, labels) in enumerate(cases):
        tumor = np.asarray(flair, dtype=np.float64)[np.asarray(labels) != 0]
        if tumor.size < 2:
            warnings.warn(f"case {i}: fewer than 2 tumor voxels, skipped", stacklevel=2)
            continue
        values.append(float(np.std(tumor)))
    return TumorStdStats.from_values(values)


def derive_delta(volumes) -> float:
    """Median tumor-region intensity std over labeled volumes.

    Falls back to the documented constant when no volume carries a usable
    tumor region.
    """
    cases = [(v.flair, v.labels) for v in volumes if v.labels is not None]
    try:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            median = tumor_std_stats(cases).median
    except ValueError:
        return DEFAULT_DELTA
    return median if median > 0 else DEFAULT_DELTA


def generate_prior(flair: np.ndarray, config: PriorConfig) -> np.ndarray:
    """Full pipeline: threshold, largest component, seeds, region growth.

    Degrades gracefully: when thresholding or component extraction finds
    nothing usable the result is an all-zero prior plus a log diagnostic,
    never an exception.
    """
    flair = np.asarray(flair, dtype=np.float64)
    empty = np.zeros(flair.shape, dtype=bool)
    try:
        threshold = otsu_threshold(flair, config.histogram_bins)
    except ValueError as exc:
        log.warning("prior degraded to empty mask: %s", exc)
        return empty
    candidates = flair > threshold
    component = largest_component(candidates, config.component_connectivity)
    if not component.any():
        log.warning("prior degraded to empty mask: no voxels above threshold %.4g", threshold)
        return empty
    seeds = select_seeds(component, config.n_seeds, config.rng_seed)
    return region_grow(flair, seeds, config.delta, config.growth_connectivity)


def build_input(volume: MultiModalVolume, prior: np.ndarray | None) -> Tensor:
    """Stack z-scored modalities and the binary prior into (1, C, D, H, W).

    Each modality is normalized over its nonzero voxels only and the
    background stays zero, so air never skews the statistics. Passing
    `prior=None` builds the 4-channel variant for the no-prior ablation.
    """
    channels = [    # FLAIR, T1ce, T1, T2 order is fixed by MultiModalVolume
        _zscore_nonzero(volume.modalities[i]) for i in range(4)
    ]
    if prior is not None:
        prior = np.asarray(prior)
        if prior.shape != volume.dims:
            raise ValueError(f"prior dims {prior.shape} != volume dims {volume.dims}")
        channels.append((prior != 0).astype(np.float32))
    stacked = np.stack(channels)[None]
    return Tensor(stacked.astype(np.float32))


def _zscore_nonzero(grid: np.ndarray) -> np.ndarray:
    grid = np.asarray(grid, dtype=np.float32)
    support = grid != 0
    if support.sum() < 2:
        return np.zeros_like(grid)
    mean = grid[support].mean()
    std = grid[support].std()
    if std == 0:
        return np.zeros_like(grid)
    out = np.zeros_like(grid)
    out[support] = (grid[support] - mean) / std
    return out
