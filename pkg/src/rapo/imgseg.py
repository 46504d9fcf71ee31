"""Grid planning for slicing high-resolution images into encoder-sized tiles.

Candidate grids are all (columns, rows) factorizations of the allowed slice
counts. Grids whose expansion difference is at least ``tau`` are rejected;
the survivor whose aspect ratio is closest to the image's wins. Comparisons
are done in exact rational arithmetic so ties are real ties.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache


@dataclass(frozen=True)
class Dims:
    width: int
    height: int

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise ValueError(f"dimensions must be positive, got {self.width}x{self.height}")


@dataclass(frozen=True)
class PlannerConfig:
    n_all: frozenset[int] = frozenset(range(1, 10))
    tau: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "n_all", frozenset(self.n_all))
        if not self.n_all or min(self.n_all) < 1:
            raise ValueError("n_all must be a non-empty set of positive integers")
        if not self.tau > 0:
            raise ValueError("tau must be positive")


@dataclass(frozen=True)
class GridPlan:
    m: int
    n: int
    shape_score: float
    expansion_diff: float
    fallback: bool = False


@dataclass(frozen=True)
class Rect:
    x: int
    y: int
    width: int
    height: int
    kind: str = "slice"  # "slice" or "thumbnail"

    def as_list(self) -> list[int]:
        return [self.x, self.y, self.width, self.height]


@lru_cache(maxsize=64)
def _candidates(n_all: frozenset[int]) -> tuple[tuple[int, int], ...]:
    return tuple(sorted((m, count // m) for count in n_all
                        for m in range(1, count + 1) if count % m == 0))


def enumerate_candidates(cfg: PlannerConfig = PlannerConfig()) -> set[tuple[int, int]]:
    return set(_candidates(cfg.n_all))


def _shape_score(image: Dims, m: int, n: int) -> Fraction:
    return abs(Fraction(image.width, image.height) - Fraction(m, n))


def _expansion_diff(image: Dims, encoder: Dims, m: int, n: int) -> Fraction:
    perimeter = image.width + image.height
    return abs(Fraction(encoder.width * n + encoder.height * m - perimeter, perimeter))


def shape_score(image: Dims, m: int, n: int) -> float:
    return float(_shape_score(image, m, n))


def expansion_diff(image: Dims, encoder: Dims, m: int, n: int) -> float:
    # encoder width pairs with the row count n, height with the column count m
    return float(_expansion_diff(image, encoder, m, n))


def _area_preferred(image: Dims, encoder: Dims, m: int, n: int) -> bool:
    # 0.5 * Wv * Hv * n * m < W * H, doubled to stay in integers
    return encoder.width * encoder.height * n * m < 2 * image.width * image.height


def plan(image: Dims, encoder: Dims, cfg: PlannerConfig = PlannerConfig()) -> GridPlan:
    W, H = image.width, image.height
    perimeter = W + H
    tau = Fraction(cfg.tau)
    best_key, best = None, None
    for m, n in _candidates(cfg.n_all):
        # d < tau, cross-multiplied to stay in integers
        if abs(encoder.width * n + encoder.height * m - perimeter) * tau.denominator \
                >= tau.numerator * perimeter:
            continue
        key = (_shape_score(image, m, n), not _area_preferred(image, encoder, m, n), m * n, m)
        if best_key is None or key < best_key:
            best_key, best = key, (m, n)
    if best is None:
        return GridPlan(1, 1, shape_score(image, 1, 1), expansion_diff(image, encoder, 1, 1),
                        fallback=True)
    m, n = best
    return GridPlan(m, n, float(best_key[0]), expansion_diff(image, encoder, m, n))


def _splits(total: int, parts: int) -> list[tuple[int, int]]:
    base = total // parts
    out = [(i * base, base) for i in range(parts)]
    start, _ = out[-1]
    out[-1] = (start, total - start)
    return out


def slice_layout(grid: GridPlan, image: Dims, encoder: Dims) -> list[Rect]:
    """Tile rectangles (row-major, remainders to the last row/column) plus the thumbnail.

    Every slice is meant to be resized to ``encoder``. A fallback plan keeps
    only the thumbnail.
    """
    thumb = Rect(0, 0, image.width, image.height, "thumbnail")
    if grid.fallback:
        return [thumb]
    if grid.m > image.width or grid.n > image.height:
        raise ValueError(f"cannot cut {image.width}x{image.height} into {grid.m}x{grid.n}")
    rects = [Rect(x, y, w, h)
             for y, h in _splits(image.height, grid.n)
             for x, w in _splits(image.width, grid.m)]
    rects.append(thumb)
    return rects


@dataclass
class PlanRecord:
    plan: GridPlan
    rects: list[Rect] = field(default_factory=list)

    def to_record(self) -> dict:
        return {
            "m": self.plan.m,
            "n": self.plan.n,
            "S": self.plan.shape_score,
            "d": self.plan.expansion_diff,
            "fallback": self.plan.fallback,
            "rects": [dict(zip(("x", "y", "w", "h"), r.as_list()), kind=r.kind)
                      for r in self.rects],
        }
