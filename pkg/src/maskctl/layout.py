"""Joint token layout: prompt spans, patch grid and region partition.

Token order is fixed as ``[p_1 .. p_n, p_g, image patches row-major]``.
Region grouping is carried by membership vectors, never by reordering
tokens. Region indices are 0-based (``0..n-1``); background patches carry
``BACKGROUND``. Group ``n`` is the global prompt plus the background.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DegenerateBox, InvalidArity, OutOfBounds, OverlappingRegions, ValidationError

BACKGROUND = -1

# box edges closer than this to a grid line snap onto it
_SNAP = 1e-9


@dataclass(frozen=True)
class BBox:
    """Normalized box, fractions of image width (x) and height (y)."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= v <= 1.0) or math.isnan(v):
                raise ValidationError(f"bbox coordinate {v!r} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise DegenerateBox(f"empty bbox {self.as_list()}")

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "BBox":
        if len(values) != 4:
            raise ValidationError(f"bbox needs 4 values, got {len(values)}")
        return cls(*(float(v) for v in values))

    def as_list(self) -> list[float]:
        return [self.x1, self.y1, self.x2, self.y2]


@dataclass(frozen=True)
class PatchRect:
    """Half-open rectangle of patch-grid indices."""

    row_start: int
    row_end: int
    col_start: int
    col_end: int

    def __post_init__(self):
        if self.row_end <= self.row_start or self.col_end <= self.col_start:
            raise DegenerateBox(f"empty rect {self}")
        if self.row_start < 0 or self.col_start < 0:
            raise OutOfBounds(f"negative rect index {self}")

    @property
    def height(self) -> int:
        return self.row_end - self.row_start

    @property
    def width(self) -> int:
        return self.col_end - self.col_start

    @property
    def area(self) -> int:
        return self.height * self.width

    def contains(self, row: int, col: int) -> bool:
        return self.row_start <= row < self.row_end and self.col_start <= col < self.col_end

    def fits(self, grid_h: int, grid_w: int) -> bool:
        return self.row_end <= grid_h and self.col_end <= grid_w

    def to_bbox(self, grid_h: int, grid_w: int) -> BBox:
        return BBox(self.col_start / grid_w, self.row_start / grid_h, self.col_end / grid_w, self.row_end / grid_h)


def _snap(v: float) -> float:
    r = round(v)
    return float(r) if abs(v - r) < _SNAP else v


def rasterize_bbox(b: BBox, grid_h: int, grid_w: int) -> PatchRect:
    """Outer cover of ``b`` on the patch grid (floor on start, ceil on end)."""
    col_start = max(0, math.floor(_snap(b.x1 * grid_w)))
    col_end = min(grid_w, math.ceil(_snap(b.x2 * grid_w)))
    row_start = max(0, math.floor(_snap(b.y1 * grid_h)))
    row_end = min(grid_h, math.ceil(_snap(b.y2 * grid_h)))
    if row_end <= row_start or col_end <= col_start:
        raise DegenerateBox(f"bbox {b.as_list()} rasterizes to an empty rect on {grid_h}x{grid_w}")
    return PatchRect(row_start, row_end, col_start, col_end)


def build_region_partition(boxes: Sequence[BBox], grid_h: int, grid_w: int) -> np.ndarray:
    """Row-major region index per patch; ``BACKGROUND`` outside every box."""
    region = np.full((grid_h, grid_w), BACKGROUND, dtype=np.int64)
    for i, b in enumerate(boxes):
        r = rasterize_bbox(b, grid_h, grid_w)
        window = region[r.row_start:r.row_end, r.col_start:r.col_end]
        taken = window[window != BACKGROUND]
        if taken.size:
            raise OverlappingRegions(f"region {i} overlaps region {int(taken.flat[0])}")
        window[...] = i
    return region.reshape(-1)


@dataclass(frozen=True)
class TokenLayout:
    n: int
    prompt_spans: tuple[tuple[int, int], ...]
    grid_h: int
    grid_w: int
    region_of_patch: np.ndarray = field(repr=False)
    rects: tuple[PatchRect, ...] = ()

    @property
    def L_T(self) -> int:
        return self.prompt_spans[-1][1]

    @property
    def L_I(self) -> int:
        return self.grid_h * self.grid_w

    @property
    def size(self) -> int:
        return self.L_T + self.L_I

    @property
    def prompt_lengths(self) -> list[int]:
        return [b - a for a, b in self.prompt_spans]

    def background_count(self) -> int:
        return int(np.count_nonzero(self.region_of_patch == BACKGROUND))

    def token_groups(self) -> np.ndarray:
        """Group index per joint token: ``i`` for (p_i, r_i), ``n`` for (p_g, r^c)."""
        text = np.empty(self.L_T, dtype=np.int64)
        for i, (a, b) in enumerate(self.prompt_spans):
            text[a:b] = i
        img = np.where(self.region_of_patch == BACKGROUND, self.n, self.region_of_patch)
        return np.concatenate([text, img])


def build_token_layout(prompt_lengths: Sequence[int], boxes: Sequence[BBox], grid_h: int, grid_w: int) -> TokenLayout:
    """Layout for ``n`` textual prompts plus a trailing global prompt.

    ``prompt_lengths`` holds ``n + 1`` token counts, the global prompt last.
    """
    n = len(prompt_lengths) - 1
    if n < 1:
        raise InvalidArity(f"need at least one textual prompt besides the global one, got {len(prompt_lengths)} lengths")
    if len(boxes) != n:
        raise InvalidArity(f"{n} textual prompts but {len(boxes)} boxes")
    if any(int(k) < 1 for k in prompt_lengths):
        raise ValidationError(f"prompt lengths must be positive: {list(prompt_lengths)}")
    if grid_h < 1 or grid_w < 1:
        raise ValidationError(f"bad grid {grid_h}x{grid_w}")
    ends = np.cumsum([int(k) for k in prompt_lengths])
    starts = np.concatenate([[0], ends[:-1]])
    spans = tuple((int(a), int(b)) for a, b in zip(starts, ends))
    region = build_region_partition(boxes, grid_h, grid_w)
    rects = tuple(rasterize_bbox(b, grid_h, grid_w) for b in boxes)
    return TokenLayout(n=n, prompt_spans=spans, grid_h=grid_h, grid_w=grid_w, region_of_patch=region, rects=rects)


@dataclass(frozen=True)
class MembershipVectors:
    m_p: np.ndarray  # (n+1, L_T) bool
    m_r: np.ndarray  # (n+1, L_I) bool
    m_joint: np.ndarray  # (n+1, L_T+L_I) bool

    @property
    def n(self) -> int:
        return self.m_p.shape[0] - 1

    @property
    def L_T(self) -> int:
        return self.m_p.shape[1]

    @property
    def L_I(self) -> int:
        return self.m_r.shape[1]


def membership_vectors(layout: TokenLayout) -> MembershipVectors:
    n = layout.n
    m_p = np.zeros((n + 1, layout.L_T), dtype=bool)
    for i, (a, b) in enumerate(layout.prompt_spans):
        m_p[i, a:b] = True
    groups = np.where(layout.region_of_patch == BACKGROUND, n, layout.region_of_patch)
    m_r = groups[None, :] == np.arange(n + 1)[:, None]
    return MembershipVectors(m_p=m_p, m_r=m_r, m_joint=np.concatenate([m_p, m_r], axis=1))
