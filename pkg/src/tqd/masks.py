"""Self-attention and association masks for denoising query layouts.

Queries are concatenated as: denoising groups (in group order), then track
queries, then detection queries.  Masks are dense float 0/1 matrices where
``1`` means the key is blocked for that query.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class QueryLayout:
    group_sizes: tuple[int, ...] = ()
    n_track: int = 0
    n_det: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "group_sizes", tuple(int(n) for n in self.group_sizes))
        if any(n < 0 for n in self.group_sizes) or self.n_track < 0 or self.n_det < 0:
            raise ValueError(f"query counts must be non-negative: {self}")

    @property
    def n_dn(self) -> int:
        return sum(self.group_sizes)

    @property
    def n_source(self) -> int:
        """Rows of the unified source set: all denoising queries plus tracks."""
        return self.n_dn + self.n_track

    @property
    def width(self) -> int:
        return self.n_dn + self.n_track + self.n_det

    def group_ids(self) -> np.ndarray:
        """Group index of every query; -1 for track and detection queries."""
        ids = [np.full(n, g) for g, n in enumerate(self.group_sizes)]
        ids.append(np.full(self.n_track + self.n_det, -1))
        return np.concatenate(ids).astype(int)

    def without_denoising(self) -> "QueryLayout":
        return QueryLayout((), self.n_track, self.n_det)


def build_self_attention_mask(layout: QueryLayout) -> np.ndarray:
    """W×W mask: a denoising key is visible only to queries of its own group."""
    gid = layout.group_ids()
    key_is_dn = gid >= 0
    different_group = gid[:, None] != gid[None, :]
    blocked = key_is_dn[None, :] & different_group
    return blocked.astype(np.float64)


def build_association_mask(layout: QueryLayout) -> np.ndarray:
    """N_D × (N_DN,all + N_T) mask blocking every denoising source column."""
    mask = np.zeros((layout.n_det, layout.n_source))
    mask[:, : layout.n_dn] = 1.0
    return mask


def audit_self_attention_mask(mask: np.ndarray, layout: QueryLayout) -> list[tuple[int, int]]:
    """Entries that would leak denoising information or break group isolation.

    Returns (query, key) pairs that are *allowed* although the key is a
    denoising query outside the query's own group, plus pairs that are
    blocked although they should be visible.
    """
    expected = build_self_attention_mask(layout)
    if mask.shape != expected.shape:
        raise ValueError(f"mask shape {mask.shape} does not match layout width {layout.width}")
    bad = np.argwhere(mask != expected)
    return [(int(i), int(j)) for i, j in bad]


def audit_association_mask(mask: np.ndarray, layout: QueryLayout) -> list[tuple[int, int]]:
    expected = build_association_mask(layout)
    if mask.shape != expected.shape:
        raise ValueError(f"mask shape {mask.shape} does not match layout {layout}")
    return [(int(i), int(j)) for i, j in np.argwhere(mask != expected)]


def format_mask(mask: np.ndarray) -> str:
    """Text grid, one row per line, ``#`` for blocked and ``.`` for allowed."""
    return "\n".join("".join("#" if v else "." for v in row) for row in mask) + "\n"


def parse_mask(text: str) -> np.ndarray:
    rows = [line.strip() for line in text.splitlines() if line.strip()]
    if not rows:
        return np.zeros((0, 0))
    return np.array([[1.0 if c == "#" else 0.0 for c in row] for row in rows])
