"""Temporal denoising query generation.

Denoising (DN) queries are cloned from ground-truth boxes of the generation
frame, perturbed by up to four noise families, optionally propagated one
frame forward with a constant-velocity model, and supervised to reconstruct
the matching ground truth of the frame they are fed into.

Noise scales follow the covariance convention: ``sigma_velo`` and
``sigma_query`` are variances of isotropic Gaussians, ``lambda_center``
scales a uniform box-relative center shift.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .boxes import BevBox, centers

STRATEGIES = ("general", "dedicated", "hybrid")
MODES = ("static", "temporal")


class DenoisingConfigError(ValueError):
    pass


@dataclass(frozen=True)
class DenoisingGroupSpec:
    lambda_center: float = 1.0
    sigma_velo: float = 4.0
    sigma_query: float = 0.1
    alpha_fp: float = 0.1
    alpha_drop: float = 0.0
    mode: str = "temporal"

    def __post_init__(self) -> None:
        for name in ("lambda_center", "sigma_velo", "sigma_query", "alpha_fp"):
            v = getattr(self, name)
            if not (math.isfinite(v) and v >= 0):
                raise DenoisingConfigError(f"{name} must be finite and >= 0, got {v}")
        if not 0.0 <= self.alpha_drop <= 1.0:
            raise DenoisingConfigError(f"alpha_drop must lie in [0, 1], got {self.alpha_drop}")
        if self.mode not in MODES:
            raise DenoisingConfigError(f"unknown denoising mode {self.mode!r}")


@dataclass
class TrackQueries:
    """Track query features keyed by instance id (the DN feature source)."""

    features: np.ndarray
    instance_ids: list[int]

    def lookup(self) -> dict[int, int]:
        return {iid: i for i, iid in enumerate(self.instance_ids)}


@dataclass
class FalsePositivePool:
    """Detections of the generation frame not matched to any ground truth."""

    features: np.ndarray
    boxes: list[BevBox]
    scores: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "FalsePositivePool":
        return cls(np.zeros((0, dim)), [], np.zeros(0))


@dataclass
class DenoisingQuerySet:
    features: np.ndarray
    boxes: list[BevBox]
    group_ids: np.ndarray
    target_ids: list[int | None]
    positive: np.ndarray
    n_groups: int
    mode: str = "temporal"
    reference_points: np.ndarray = field(init=False)

    def __post_init__(self) -> None:
        self.group_ids = np.asarray(self.group_ids, dtype=int)
        self.positive = np.asarray(self.positive, dtype=bool)
        self.reference_points = centers(self.boxes)
        n = len(self.boxes)
        if not (self.features.shape[0] == n == len(self.group_ids) == len(self.target_ids) == len(self.positive)):
            raise ValueError("denoising query set fields disagree in length")
        if n and np.any(np.diff(self.group_ids) < 0):
            raise ValueError("denoising queries must be ordered by group")

    def __len__(self) -> int:
        return len(self.boxes)

    @property
    def group_sizes(self) -> tuple[int, ...]:
        return tuple(int(np.sum(self.group_ids == g)) for g in range(self.n_groups))

    def subset(self, keep: np.ndarray) -> "DenoisingQuerySet":
        keep = np.asarray(keep, dtype=bool)
        return DenoisingQuerySet(
            self.features[keep],
            [b for b, k in zip(self.boxes, keep) if k],
            self.group_ids[keep],
            [t for t, k in zip(self.target_ids, keep) if k],
            self.positive[keep],
            self.n_groups,
            self.mode,
        )

    @classmethod
    def empty(cls, dim: int, n_groups: int = 0, mode: str = "temporal") -> "DenoisingQuerySet":
        return cls(np.zeros((0, dim)), [], np.zeros(0, int), [], np.zeros(0, bool), n_groups, mode)

    @classmethod
    def concat(cls, parts: Sequence["DenoisingQuerySet"], mode: str) -> "DenoisingQuerySet":
        if not parts:
            raise ValueError("nothing to concatenate")
        dim = parts[0].features.shape[1]
        feats, boxes, gids, tids, pos = [np.zeros((0, dim))], [], [], [], []
        for g, part in enumerate(parts):
            feats.append(part.features)
            boxes.extend(part.boxes)
            gids.extend([g] * len(part))
            tids.extend(part.target_ids)
            pos.extend(part.positive.tolist())
        return cls(np.vstack(feats), boxes, np.array(gids, int), tids, np.array(pos, bool), len(parts), mode)


def apply_center_noise(box: BevBox, lam: float, rng: np.random.Generator) -> BevBox:
    if lam == 0:
        return box
    w, l, h = box.size
    half = 0.5 * lam * np.array([w, l, h])
    delta = rng.uniform(-half, half)
    return box.with_center(np.asarray(box.center) + delta)


def apply_query_noise(q: np.ndarray, sigma_query: float, rng: np.random.Generator) -> np.ndarray:
    if sigma_query == 0:
        return q
    return q + rng.normal(0.0, math.sqrt(sigma_query), size=q.shape)


def apply_velocity_noise(box: BevBox, sigma_velo: float, rng: np.random.Generator) -> BevBox:
    if sigma_velo == 0:
        return box
    eps = rng.normal(0.0, math.sqrt(sigma_velo), size=2)
    return box.with_velocity(np.asarray(box.velocity) + eps)


def n_negatives(alpha_fp: float, n_gt: int) -> int:
    """k = alpha_fp * n_gt, rounded half up."""
    return int(math.floor(alpha_fp * n_gt + 0.5))


def append_negative_queries(
    qs: DenoisingQuerySet, fp: FalsePositivePool, alpha_fp: float, n_gt: int, group: int | None = None
) -> DenoisingQuerySet:
    """Append the top-k scoring false positives as background-target queries.

    Negatives join ``group`` (default: the last group) right after its
    existing members.
    """
    k = min(n_negatives(alpha_fp, n_gt), len(fp.boxes))
    if k == 0:
        return qs
    group = qs.n_groups - 1 if group is None else group
    order = np.argsort(-np.asarray(fp.scores), kind="stable")[:k]
    neg = DenoisingQuerySet(
        fp.features[order],
        [fp.boxes[i] for i in order],
        np.full(k, group),
        [None] * k,
        np.zeros(k, bool),
        qs.n_groups,
        qs.mode,
    )
    insert_at = int(np.searchsorted(qs.group_ids, group, side="right"))
    head = qs.subset(np.arange(len(qs)) < insert_at)
    tail = qs.subset(np.arange(len(qs)) >= insert_at)
    return _join(head, neg, tail)


def _join(*parts: DenoisingQuerySet) -> DenoisingQuerySet:
    first = parts[0]
    return DenoisingQuerySet(
        np.vstack([p.features for p in parts]),
        [b for p in parts for b in p.boxes],
        np.concatenate([p.group_ids for p in parts]),
        [t for p in parts for t in p.target_ids],
        np.concatenate([p.positive for p in parts]),
        first.n_groups,
        first.mode,
    )


def drop_positive_queries(qs: DenoisingQuerySet, alpha_drop: float, rng: np.random.Generator) -> DenoisingQuerySet:
    """Remove each positive query independently with probability ``alpha_drop``."""
    if alpha_drop == 0 or len(qs) == 0:
        return qs
    keep = np.ones(len(qs), bool)
    for i in np.flatnonzero(qs.positive):
        if rng.random() < alpha_drop:
            keep[i] = False
    return qs.subset(keep)


def make_group_specs(strategy: str, n_groups: int, base: DenoisingGroupSpec) -> list[DenoisingGroupSpec]:
    """Expand a base spec into per-group specs.

    ``dedicated`` gives three groups carrying only center, only velocity and
    only query noise; ``hybrid`` adds two general groups to those three.
    False-positive injection and drop stay as in ``base`` for every group.
    A dedicated group whose noise family is switched off in ``base`` would
    carry no box or query noise, so it becomes a general group instead and
    the group count is kept.
    """
    if strategy not in STRATEGIES:
        raise DenoisingConfigError(f"unknown grouping strategy {strategy!r}")
    if n_groups < 1:
        raise DenoisingConfigError(f"need at least one denoising group, got {n_groups}")
    if strategy == "dedicated" and n_groups != 3:
        raise DenoisingConfigError(f"dedicated grouping needs 3 groups, got {n_groups}")
    if strategy == "hybrid" and n_groups != 5:
        raise DenoisingConfigError(f"hybrid grouping needs 5 groups, got {n_groups}")
    if strategy == "general":
        return [base] * n_groups
    families = (
        (base.lambda_center, replace(base, sigma_velo=0.0, sigma_query=0.0)),
        (base.sigma_velo, replace(base, lambda_center=0.0, sigma_query=0.0)),
        (base.sigma_query, replace(base, lambda_center=0.0, sigma_velo=0.0)),
    )
    dedicated = [spec if scale > 0 else base for scale, spec in families]
    if strategy == "dedicated":
        return dedicated
    return dedicated + [base, base]


def propagate_queries(qs: DenoisingQuerySet, dt: float) -> DenoisingQuerySet:
    """Advance every query one frame with its own (noised) velocity.

    Static-mode sets are returned unchanged.
    """
    if qs.mode == "static":
        return qs
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")
    return DenoisingQuerySet(
        qs.features, [b.advanced(dt) for b in qs.boxes], qs.group_ids, qs.target_ids, qs.positive, qs.n_groups, qs.mode
    )


def assign_denoising_targets(qs: DenoisingQuerySet, gt_frame: Sequence[BevBox]) -> list[BevBox | None]:
    """Ground-truth target per query; ``None`` means background.

    A positive query whose instance is missing from ``gt_frame`` (it died or
    left between frames) is trained towards background.
    """
    by_id = {b.instance_id: b for b in gt_frame}
    return [by_id.get(t) if (p and t is not None) else None for t, p in zip(qs.target_ids, qs.positive)]


def _group_queries(
    gt: Sequence[BevBox],
    tracks: TrackQueries | None,
    fp: FalsePositivePool,
    spec: DenoisingGroupSpec,
    rng: np.random.Generator,
    dim: int,
    query_init: str,
) -> DenoisingQuerySet:
    lookup = tracks.lookup() if tracks is not None else {}
    feats = np.zeros((len(gt), dim))
    if query_init == "track":
        for i, b in enumerate(gt):
            j = lookup.get(b.instance_id)
            if j is not None:
                feats[i] = tracks.features[j]
    boxes = [apply_center_noise(b, spec.lambda_center, rng) for b in gt]
    boxes = [apply_velocity_noise(b, spec.sigma_velo, rng) for b in boxes]
    feats = np.vstack([np.zeros((0, dim))] + [apply_query_noise(f, spec.sigma_query, rng)[None] for f in feats])
    qs = DenoisingQuerySet(
        feats, boxes, np.zeros(len(gt), int), [b.instance_id for b in gt], np.ones(len(gt), bool), 1, spec.mode
    )
    qs = append_negative_queries(qs, fp, spec.alpha_fp, len(gt))
    return drop_positive_queries(qs, spec.alpha_drop, rng)


def generate(
    gt: Sequence[BevBox],
    tracks: TrackQueries | None,
    fp: FalsePositivePool,
    specs: Sequence[DenoisingGroupSpec],
    rng: np.random.Generator,
    dim: int,
    query_init: str = "track",
) -> DenoisingQuerySet:
    """Build all denoising groups for one frame transition.

    Each group draws from its own child stream of ``rng``, so groups are
    independent and a fixed seed reproduces the set bit for bit.
    ``query_init='zero'`` starts every query from the zero vector instead of
    copying the matching track query.
    """
    if not specs:
        raise DenoisingConfigError("at least one group spec is required")
    if query_init not in ("track", "zero"):
        raise DenoisingConfigError(f"unknown query_init {query_init!r}")
    modes = {s.mode for s in specs}
    if len(modes) != 1:
        raise DenoisingConfigError("all groups must share one denoising mode")
    children = rng.spawn(len(specs))
    parts = [_group_queries(gt, tracks, fp, s, r, dim, query_init) for s, r in zip(specs, children)]
    return DenoisingQuerySet.concat(parts, specs[0].mode)
