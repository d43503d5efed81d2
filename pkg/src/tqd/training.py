"""Losses, teacher-forced unrolling and the optimisation loop.

One training step draws a snippet of consecutive frames, unrolls the
tracker over it with ground-truth-driven track management, builds a
denoising set at every frame transition and takes one Adam step on

    L = lambda_dn * L_DN + L_tracker

Every random draw comes from a named substream (model init, snippet choice,
denoising noise), so switching denoising on or off never shifts any other
stream.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Parameter, Tensor
from .boxes import BevBox, box_targets, centers
from .denoising import (
    MODES,
    DenoisingGroupSpec,
    DenoisingQuerySet,
    FalsePositivePool,
    TrackQueries,
    assign_denoising_targets,
    generate,
    make_group_specs,
    propagate_queries,
)
from .matching import MatchResult, hungarian_match
from .sim import SceneData
from .tracker import FrameOutput, Predictions, Tracker, TrackState, with_id
from .rng import substream

__all__ = [
    "LossWeights", "DenoisingSettings", "TrainConfig", "Adam", "MatchResult", "hungarian_match",
    "compute_tracker_loss", "compute_denoising_loss", "snippet_loss", "train_step", "train",
]


@dataclass(frozen=True)
class LossWeights:
    lambda_dn: float = 1.0
    w_box: float = 1.0
    w_cls: float = 1.0
    w_assoc: float = 1.0

    def __post_init__(self) -> None:
        for k, v in vars(self).items():
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"loss weight {k} must be finite and >= 0, got {v}")


@dataclass(frozen=True)
class DenoisingSettings:
    """``mode='off'`` disables denoising entirely (no queries, no RNG draws)."""

    mode: str = "temporal"
    strategy: str = "general"
    n_groups: int = 1
    base: DenoisingGroupSpec = field(default_factory=DenoisingGroupSpec)
    query_init: str = "track"
    dn_assoc_loss: bool = True

    def __post_init__(self) -> None:
        if self.mode not in MODES + ("off",):
            raise ValueError(f"unknown denoising mode {self.mode!r}")
        if self.query_init not in ("track", "zero"):
            raise ValueError(f"unknown query_init {self.query_init!r}; expected 'track' or 'zero'")
        if self.mode != "off":
            self.group_specs()

    @property
    def enabled(self) -> bool:
        return self.mode != "off"

    def group_specs(self) -> list[DenoisingGroupSpec]:
        return make_group_specs(self.strategy, self.n_groups, replace(self.base, mode=self.mode))


@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    snippet_length: int = 3
    seed: int = 0
    lr: float = 1e-3
    weights: LossWeights = field(default_factory=LossWeights)
    denoising: DenoisingSettings = field(default_factory=DenoisingSettings)
    adopt_gate: float = 2.0  # meters; 0 disables

    def __post_init__(self) -> None:
        if self.snippet_length < 2:
            raise ValueError("snippet_length must be >= 2")
        if self.steps < 0 or self.lr < 0:
            raise ValueError("steps and lr must be >= 0")
        if self.adopt_gate < 0:
            raise ValueError("adopt_gate must be >= 0")


class Adam:
    """Adam with bias correction; default moment parameters."""

    def __init__(self, params: Sequence[Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = [np.zeros_like(p.value) for p in self.params]
        self.v = [np.zeros_like(p.value) for p in self.params]

    def step(self) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for i, p in enumerate(self.params):
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            if self.lr == 0:
                continue
            p.value -= self.lr * (self.m[i] / c1) / (np.sqrt(self.v[i] / c2) + self.eps)


# -- loss terms -------------------------------------------------------------

def l1_sum(pred: Tensor, rows: np.ndarray, target: np.ndarray) -> Tensor | None:
    if len(rows) == 0:
        return None
    return ad.sum_all(ad.absolute(ad.sub(ad.take_rows(pred, rows), target)))


def bce_sum(logits: Tensor, labels: np.ndarray) -> Tensor | None:
    """Sum of binary cross-entropy on logits: softplus(z) - y z."""
    if logits.shape[0] * logits.shape[1] == 0:
        return None
    labels = np.asarray(labels, dtype=np.float64).reshape(logits.shape)
    return ad.sum_all(ad.sub(ad.softplus(logits), ad.mul(logits, labels)))


def _total(terms: list[Tensor | None], denom: float) -> Tensor | None:
    terms = [t for t in terms if t is not None]
    if not terms:
        return None
    acc = terms[0]
    for t in terms[1:]:
        acc = ad.add(acc, t)
    return ad.scale(acc, 1.0 / denom)


def _weighted(parts: list[tuple[float, Tensor | None]]) -> Tensor | None:
    acc = None
    for w, t in parts:
        if t is None or w == 0:
            continue
        t = ad.scale(t, w)
        acc = t if acc is None else ad.add(acc, t)
    return acc


def _mean_of(items: list[Tensor | None]) -> Tensor | None:
    present = [t for t in items if t is not None]
    if not present:
        return None
    return _total(present, float(len(present)))


@dataclass
class FrameTargets:
    """Supervision for one frame.

    ``track_targets[u]`` / ``det_targets[d]`` is the ground-truth box or
    ``None`` (background).  ``det_instance[d]`` is the instance id a
    detection query was assigned to (or -1) and drives association labels.
    """

    track_targets: list[BevBox | None]
    det_targets: list[BevBox | None]
    det_instance: np.ndarray
    track_instance: list[int]

    def association_labels(self, source_instances: Sequence[int | None]) -> np.ndarray:
        src = np.array([-2 if s is None else s for s in source_instances], dtype=np.int64).reshape(-1, 1)
        return (src == self.det_instance.reshape(1, -1)).astype(np.float64)


def _box_and_cls(head_box: Tensor, head_logit: Tensor, refs: np.ndarray, targets: list[BevBox | None],
                 ref_velocity: np.ndarray | None = None):
    rows = np.array([i for i, t in enumerate(targets) if t is not None], dtype=np.intp)
    box = None
    if len(rows):
        vel = None if ref_velocity is None else ref_velocity[rows]
        tgt = box_targets([targets[i] for i in rows], refs[rows], vel)
        box = l1_sum(head_box, rows, tgt)
    labels = np.array([t is not None for t in targets], dtype=np.float64)
    return box, bce_sum(head_logit, labels), len(rows)


def compute_tracker_loss(out: FrameOutput, targets: FrameTargets, weights: LossWeights) -> Tensor | None:
    """Deep-supervised loss on track and detection queries.

    Per layer: box L1 summed over parameters and normalised by the number of
    positives, objectness BCE averaged over queries, association BCE
    averaged over (track, detection) pairs.  Layer losses are averaged.
    """
    n_queries = len(targets.track_targets) + len(targets.det_targets)
    per_layer = []
    for heads, refs in zip(out.heads, out.layer_refs):
        boxes, clss, n_pos = [], [], 0
        for seg, tgts in (("track", targets.track_targets), ("det", targets.det_targets)):
            if seg not in heads:
                continue
            b, c, n = _box_and_cls(heads[seg].box, heads[seg].logit, refs[seg], tgts, out.ref_velocity.get(seg))
            boxes.append(b)
            clss.append(c)
            n_pos += n
        per_layer.append(_weighted([
            (weights.w_box, _total(boxes, max(1, n_pos))),
            (weights.w_cls, _total(clss, max(1, n_queries))),
        ]))
    assoc_layers = []
    if targets.track_instance:
        labels = targets.association_labels(targets.track_instance)
        for layer in out.assoc:
            if "track" in layer:
                assoc_layers.append(_total([bce_sum(layer["track"], labels)], labels.size))
    return _weighted([(1.0, _mean_of(per_layer)), (weights.w_assoc, _mean_of(assoc_layers))])


def compute_denoising_loss(
    out: FrameOutput,
    dn: DenoisingQuerySet,
    dn_targets: list[BevBox | None],
    det_instance: np.ndarray,
    weights: LossWeights,
    assoc_loss: bool = True,
) -> Tensor | None:
    """Same term structure as the track-query loss, per denoising group.

    Each group is normalised on its own and the groups are averaged, so the
    number of groups does not rescale the loss.  Association labels pair a
    positive query with the detection assigned to its target instance.
    """
    if len(dn) == 0 or "dn" not in out.refs:
        return None
    src_inst = [t.instance_id if t is not None else None for t in dn_targets]
    labels_all = (np.array([-2 if s is None else s for s in src_inst]).reshape(-1, 1)
                  == det_instance.reshape(1, -1)).astype(np.float64)
    groups = []
    for gidx in range(dn.n_groups):
        rows = np.flatnonzero(dn.group_ids == gidx)
        if len(rows) == 0:
            continue
        tg = [dn_targets[i] for i in rows]
        layers = []
        for heads, refs in zip(out.heads, out.layer_refs):
            box = ad.take_rows(heads["dn"].box, rows)
            logit = ad.take_rows(heads["dn"].logit, rows)
            b, c, n = _box_and_cls(box, logit, refs["dn"][rows], tg, out.ref_velocity["dn"][rows])
            layers.append(_weighted([
                (weights.w_box, _total([b], max(1, n))),
                (weights.w_cls, _total([c], len(rows))),
            ]))
        assoc_layers = []
        if assoc_loss:
            lab = labels_all[rows]
            for layer in out.assoc:
                if "dn" in layer:
                    z = ad.take_rows(layer["dn"], rows)
                    assoc_layers.append(_total([bce_sum(z, lab)], lab.size))
        groups.append(_weighted([(1.0, _mean_of(layers)), (weights.w_assoc, _mean_of(assoc_layers))]))
    return _mean_of(groups)


# -- teacher forcing --------------------------------------------------------

def match_detections(pred: Predictions, gt: Sequence[BevBox], candidates: Sequence[int],
                     weights: LossWeights) -> np.ndarray:
    """Hungarian assignment of detection queries to the candidate GT indices.

    Cost: ``w_box * L1(center) + w_cls * (1 - score)``.  Returns the GT index
    per detection query or -1.
    """
    out = np.full(len(pred.boxes), -1, dtype=np.int64)
    if not candidates or not pred.boxes:
        return out
    pc = centers(pred.boxes)
    gc = centers([gt[k] for k in candidates])
    cost = weights.w_box * np.abs(pc[:, None, :] - gc[None, :, :]).sum(axis=2)
    cost = cost + weights.w_cls * (1.0 - pred.scores)[:, None]
    res = hungarian_match(cost)
    for d, c in res.pairs():
        out[d] = candidates[c]
    return out


def frame_targets(model: Tracker, out: FrameOutput, state: TrackState, gt: Sequence[BevBox],
                  weights: LossWeights) -> tuple[FrameTargets, Predictions, Predictions]:
    by_id = {b.instance_id: b for b in gt}
    track_targets = [by_id.get(i) for i in state.ids]
    det_pred = out.predictions("det")
    track_pred = out.predictions("track") if len(state) else Predictions.empty(model.config.feature_dim)
    if model.config.paradigm == "TBA":
        live = set(state.ids)
        candidates = [k for k, b in enumerate(gt) if b.instance_id not in live]
    else:
        candidates = list(range(len(gt)))
    det_gt = match_detections(det_pred, gt, candidates, weights)
    det_targets = [gt[k] if k >= 0 else None for k in det_gt]
    det_instance = np.array([gt[k].instance_id if k >= 0 else -1 for k in det_gt], dtype=np.int64)
    return FrameTargets(track_targets, det_targets, det_instance, list(state.ids)), track_pred, det_pred


def teacher_forced_update(model: Tracker, state: TrackState, track_pred: Predictions, det_pred: Predictions,
                          targets: FrameTargets, gt: Sequence[BevBox],
                          adopt_gate: float = 0.0) -> tuple[TrackState, FalsePositivePool]:
    """Ground-truth-driven track management used during training.

    Tracks of instances that left the scene are removed.  With learned
    association (TBD/ADA) a track adopts the detection query assigned to its
    instance; TBA tracks carry their own outputs.  Instances without a track
    are born from their assigned detection.  With ``adopt_gate`` > 0 a
    detection whose BEV center lies ``adopt_gate`` or farther from its
    instance is neither adopted nor born from: the Hungarian assignment gives
    every instance some detection, and one far from it would start a track
    that cannot follow its target.  Unassigned detections form the
    false-positive pool.
    """
    alive = {b.instance_id for b in gt}
    by_id = {b.instance_id: b for b in gt}
    det_of = {}
    for d, i in enumerate(targets.det_instance):
        if i < 0:
            continue
        c, t = det_pred.boxes[d].center, by_id[int(i)].center
        if adopt_gate == 0 or math.hypot(c[0] - t[0], c[1] - t[1]) < adopt_gate:
            det_of[int(i)] = d
    adopt = model.config.paradigm != "TBA"
    feats, boxes, ids = [], [], []
    for u, iid in enumerate(state.ids):
        if iid not in alive:
            continue
        d = det_of.get(iid) if adopt else None
        if d is not None:
            feats.append(det_pred.features[d])
            boxes.append(with_id(det_pred.boxes[d], iid, det_pred.scores[d]))
        else:
            feats.append(track_pred.features[u])
            boxes.append(with_id(track_pred.boxes[u], iid, track_pred.scores[u]))
        ids.append(iid)
    live = set(ids)
    for b in gt:
        d = det_of.get(b.instance_id)
        if b.instance_id in live or d is None:
            continue
        feats.append(det_pred.features[d])
        boxes.append(with_id(det_pred.boxes[d], b.instance_id, det_pred.scores[d]))
        ids.append(b.instance_id)
    dim = model.config.feature_dim
    new_state = TrackState(np.array(feats).reshape(-1, dim), boxes, ids, [0] * len(ids),
                           [b.score for b in boxes], state.next_id)
    fp_rows = np.flatnonzero(targets.det_instance < 0)
    pool = FalsePositivePool(det_pred.features[fp_rows], [det_pred.boxes[i] for i in fp_rows],
                             det_pred.scores[fp_rows])
    return new_state, pool


# -- unrolling --------------------------------------------------------------

@dataclass
class LossBreakdown:
    total: float
    tracker: float
    denoising: float


def _denoising_set(cfg: TrainConfig, model: Tracker, frame: int, gt_prev, gt_cur, state: TrackState,
                   pool: FalsePositivePool, rng: np.random.Generator) -> DenoisingQuerySet:
    dn_cfg = cfg.denoising
    tracks = TrackQueries(state.features, list(state.ids))
    source = gt_prev if dn_cfg.mode == "temporal" else gt_cur
    qs = generate(source, tracks, pool, dn_cfg.group_specs(), rng, model.config.feature_dim, dn_cfg.query_init)
    return propagate_queries(qs, model.config.dt)


def snippet_loss(model: Tracker, g: Graph, data: SceneData, start: int, cfg: TrainConfig,
                 step: int = 0) -> tuple[Tensor, Tensor | None, Tensor | None]:
    """Unroll ``snippet_length`` frames from ``start`` and build the loss.

    Returns (total, tracker part, denoising part); the two parts are means
    over the frames that produced them.  Track state passes between frames
    as detached values, so a finite-difference check holds it fixed exactly
    like the gradient does.
    """
    dim = model.config.feature_dim
    state = TrackState.empty(dim)
    pool = FalsePositivePool.empty(dim)
    tracker_terms: list[Tensor | None] = []
    dn_terms: list[Tensor | None] = []
    frames = data.scene.frames
    for k in range(cfg.snippet_length):
        f = start + k
        gt = frames[f]
        dn = None
        if cfg.denoising.enabled and k > 0:
            rng = substream(cfg.seed, "dn", step, k)
            dn = _denoising_set(cfg, model, k, frames[f - 1], gt, state, pool, rng)
        out = model.forward_frame(g, state, dn, data.observations[f].raw)
        targets, track_pred, det_pred = frame_targets(model, out, state, gt, cfg.weights)
        tracker_terms.append(compute_tracker_loss(out, targets, cfg.weights))
        if dn is not None and len(dn):
            dn_targets = assign_denoising_targets(dn, gt)
            dn_terms.append(compute_denoising_loss(out, dn, dn_targets, targets.det_instance, cfg.weights,
                                                   cfg.denoising.dn_assoc_loss))
        state, pool = teacher_forced_update(model, state, track_pred, det_pred, targets, gt, cfg.adopt_gate)
    l_tracker = _mean_of(tracker_terms)
    l_dn = _mean_of(dn_terms)
    if l_tracker is None:
        l_tracker = ad.scale(ad.sum_all(g.param(model.params["head.ln.g"])), 0.0)
    total = l_tracker if l_dn is None else ad.add(l_tracker, ad.scale(l_dn, cfg.weights.lambda_dn))
    return total, l_tracker, l_dn


def sample_snippet(seed: int, step: int, n_scenes: int, n_frames: int, length: int) -> tuple[int, int]:
    rng = substream(seed, "snippet", step)
    scene = int(rng.integers(n_scenes))
    start = int(rng.integers(n_frames - length + 1))
    return scene, start


def train_step(model: Tracker, optimizer: Adam, data: SceneData, start: int, cfg: TrainConfig,
               step: int = 0) -> LossBreakdown:
    model.zero_grad()
    g = Graph()
    total, l_tr, l_dn = snippet_loss(model, g, data, start, cfg, step)
    g.backward(total)
    optimizer.step()
    return LossBreakdown(float(total.value[0, 0]), float(l_tr.value[0, 0]),
                         0.0 if l_dn is None else float(l_dn.value[0, 0]))


LOG_HEADER = "step,L_total,L_tracker,L_DN,lr"


def train(model: Tracker, dataset: Sequence[SceneData], cfg: TrainConfig,
          log_path: Path | None = None) -> list[LossBreakdown]:
    """Run ``cfg.steps`` optimisation steps; optionally stream the CSV log."""
    if not dataset:
        raise ValueError("empty training set")
    n_frames = min(len(d.scene) for d in dataset)
    if n_frames < cfg.snippet_length:
        raise ValueError(f"scenes have {n_frames} frames, snippet needs {cfg.snippet_length}")
    opt = Adam(model.parameters(), cfg.lr)
    history = []
    fh = open(log_path, "w", encoding="utf-8") if log_path is not None else None
    try:
        if fh:
            fh.write(LOG_HEADER + "\n")
        for step in range(cfg.steps):
            scene, start = sample_snippet(cfg.seed, step, len(dataset), n_frames, cfg.snippet_length)
            rec = train_step(model, opt, dataset[scene], start, cfg, step)
            history.append(rec)
            if fh:
                fh.write(f"{step},{rec.total:.17g},{rec.tracker:.17g},{rec.denoising:.17g},{cfg.lr:.17g}\n")
    finally:
        if fh:
            fh.close()
    return history
