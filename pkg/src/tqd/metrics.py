"""Tracking metrics: CLEAR-MOT counts and the recall-swept AMOTA / AMOTP.

Predictions are matched to ground truth per frame by greedy score-ordered
assignment on BEV center distance.  A ground-truth instance scores an
identity switch when the track id it is matched to differs from the track
id of its previous match.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BevBox, TrackOutput

N_RECALL_POINTS = 40
DEFAULT_THRESHOLD = 2.0

TrackResult = list[list[TrackOutput]]  # per frame, the reported tracks


@dataclass(frozen=True)
class FrameMatch:
    pairs: list[tuple[int, int, float]]  # (pred index, gt index, distance)
    false_positives: list[int]
    misses: list[int]


def match_frame(preds: Sequence[TrackOutput], gts: Sequence[BevBox], threshold: float = DEFAULT_THRESHOLD,
                last_track: dict[int, int] | None = None) -> FrameMatch:
    """Greedy matching in descending score order.

    Each prediction takes the closest unmatched ground truth within
    ``threshold``.  On an exact distance tie the ground truth last matched
    to the same track id wins, then the lower ground-truth index.
    """
    if threshold <= 0:
        raise ValueError("match threshold must be positive")
    last_track = last_track or {}
    order = sorted(range(len(preds)), key=lambda i: -preds[i].score)
    gt_xy = np.array([b.center[:2] for b in gts], dtype=np.float64).reshape(-1, 2)
    taken = np.zeros(len(gts), dtype=bool)
    pairs, fps = [], []
    for i in order:
        p = preds[i]
        if len(gts) == 0:
            fps.append(i)
            continue
        dist = np.hypot(gt_xy[:, 0] - p.box.center[0], gt_xy[:, 1] - p.box.center[1])
        best, best_key = -1, None
        for j in range(len(gts)):
            if taken[j] or dist[j] > threshold:
                continue
            carried = last_track.get(gts[j].instance_id) == p.track_id
            key = (dist[j], not carried, j)
            if best_key is None or key < best_key:
                best, best_key = j, key
        if best < 0:
            fps.append(i)
        else:
            taken[best] = True
            pairs.append((i, best, float(dist[best])))
    misses = [j for j in range(len(gts)) if not taken[j]]
    return FrameMatch(pairs, sorted(fps), misses)


@dataclass(frozen=True)
class Counts:
    tp: int
    fp: int
    fn: int
    ids: int
    n_gt: int
    distance_sum: float

    @property
    def recall(self) -> float:
        return self.tp / self.n_gt if self.n_gt else 0.0

    @property
    def mota(self) -> float:
        return 1.0 - (self.fp + self.fn + self.ids) / self.n_gt if self.n_gt else 0.0


def count_errors(results: Sequence[TrackResult], scenes: Sequence[Sequence[Sequence[BevBox]]],
                 threshold: float = DEFAULT_THRESHOLD, min_score: float | None = None) -> Counts:
    """Accumulate TP/FP/FN/IDS over scenes, keeping predictions with score >= ``min_score``."""
    if len(results) != len(scenes):
        raise ValueError(f"{len(results)} results for {len(scenes)} scenes")
    tp = fp = fn = ids = n_gt = 0
    dist = 0.0
    for res, frames in zip(results, scenes):
        if len(res) != len(frames):
            raise ValueError(f"result has {len(res)} frames, scene has {len(frames)}")
        last: dict[int, int] = {}
        for preds, gts in zip(res, frames):
            if min_score is not None:
                preds = [p for p in preds if p.score >= min_score]
            m = match_frame(preds, gts, threshold, last)
            for i, j, d in m.pairs:
                iid = gts[j].instance_id
                if iid in last and last[iid] != preds[i].track_id:
                    ids += 1
                last[iid] = preds[i].track_id
                dist += d
            tp += len(m.pairs)
            fp += len(m.false_positives)
            fn += len(m.misses)
            n_gt += len(gts)
    return Counts(tp, fp, fn, ids, n_gt, dist)


def clear_mot(results, scenes, threshold: float = DEFAULT_THRESHOLD) -> dict[str, float]:
    c = count_errors(results, scenes, threshold)
    return {"MOTA": c.mota, "IDS": c.ids, "FP": c.fp, "FN": c.fn, "TP": c.tp, "Recall": c.recall}


def _tp_scores(results, scenes, threshold: float) -> np.ndarray:
    scores = []
    for res, frames in zip(results, scenes):
        last: dict[int, int] = {}
        for preds, gts in zip(res, frames):
            m = match_frame(preds, gts, threshold, last)
            for i, j, _ in m.pairs:
                last[gts[j].instance_id] = preds[i].track_id
                scores.append(preds[i].score)
    return np.sort(np.array(scores, dtype=np.float64))[::-1]


def recall_sweep(results, scenes, threshold: float = DEFAULT_THRESHOLD) -> list[dict[str, float]]:
    """Per recall point r = k/40: the score cut-off, counts, MOTAR and MOTP.

    The cut-off for r is the score of the ceil(r * n_gt)-th best true
    positive of the unfiltered matching.  MOTAR uses the recall actually
    achieved at that cut-off.  A recall point the tracker never reaches
    scores MOTAR 0 and MOTP equal to the match threshold.
    """
    n_gt = sum(len(f) for s in scenes for f in s)
    tp_scores = _tp_scores(results, scenes, threshold)
    rows = []
    for k in range(1, N_RECALL_POINTS + 1):
        r = k / N_RECALL_POINTS
        need = -(-k * n_gt // N_RECALL_POINTS)
        if n_gt == 0 or need > len(tp_scores) or need == 0:
            rows.append({"recall_target": r, "cutoff": math.nan, "achieved": False,
                         "MOTAR": 0.0, "MOTP": threshold})
            continue
        cutoff = float(tp_scores[need - 1])
        c = count_errors(results, scenes, threshold, cutoff)
        ra = c.recall
        motar = 0.0 if ra == 0 else max(0.0, 1.0 - (c.ids + c.fp + c.fn - (1.0 - ra) * n_gt) / (ra * n_gt))
        motp = c.distance_sum / c.tp if c.tp else threshold
        rows.append({"recall_target": r, "cutoff": cutoff, "achieved": True, "MOTAR": motar, "MOTP": motp,
                     "TP": c.tp, "FP": c.fp, "FN": c.fn, "IDS": c.ids})
    return rows


def amota_amotp(results, scenes, threshold: float = DEFAULT_THRESHOLD) -> tuple[float, float]:
    rows = recall_sweep(results, scenes, threshold)
    return (float(np.mean([r["MOTAR"] for r in rows])), float(np.mean([r["MOTP"] for r in rows])))


@dataclass(frozen=True)
class MetricReport:
    AMOTA: float
    AMOTP: float
    MOTA: float
    Recall: float
    IDS: int
    FP: int
    FN: int
    TP: int

    def as_dict(self) -> dict[str, float]:
        return dict(vars(self))


METRIC_COLUMNS = ("AMOTA", "AMOTP", "MOTA", "Recall", "IDS", "FP", "FN", "TP")


def evaluate(results, scenes, threshold: float = DEFAULT_THRESHOLD) -> MetricReport:
    c = count_errors(results, scenes, threshold)
    amota, amotp = amota_amotp(results, scenes, threshold)
    return MetricReport(amota, amotp, c.mota, c.recall, c.ids, c.fp, c.fn, c.tp)


# -- track result files -----------------------------------------------------

RESULT_HEADER = "scene,frame,track_id,x,y,z,w,l,h,yaw,vx,vy,score"


def format_track_results(results: Sequence[TrackResult]) -> str:
    lines = [RESULT_HEADER]
    for s, res in enumerate(results):
        for f, frame in enumerate(res):
            for t in frame:
                b = t.box
                vals = (*b.center, *b.size, b.yaw, *b.velocity, t.score)
                lines.append(f"{s},{f},{t.track_id}," + ",".join(f"{v:.17g}" for v in vals))
    return "\n".join(lines) + "\n"


def write_track_results(path: Path, results: Sequence[TrackResult]) -> None:
    Path(path).write_text(format_track_results(results), encoding="utf-8")


def read_track_results(path: Path, n_frames: Sequence[int]) -> list[TrackResult]:
    """Parse a results file; ``n_frames[s]`` gives the frame count of scene ``s``."""
    out: list[TrackResult] = [[[] for _ in range(n)] for n in n_frames]
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    if not lines or lines[0] != RESULT_HEADER:
        raise ValueError(f"{path}: missing track result header")
    for line in lines[1:]:
        if not line:
            continue
        f = line.split(",")
        s, fr, tid = int(f[0]), int(f[1]), int(f[2])
        x, y, z, w, l, h, yaw, vx, vy, score = (float(v) for v in f[3:13])
        box = BevBox((x, y, z), (w, l, h), yaw, (vx, vy), tid, score)
        out[s][fr].append(TrackOutput(tid, box, score))
    return out
