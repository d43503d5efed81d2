"""Oracles, golden cases and random-instance builders shared by the unit and
acceptance tests."""

from __future__ import annotations

import itertools

import numpy as np

from tqd import autodiff as ad
from tqd.autodiff import Graph, Parameter
from tqd.boxes import BevBox, TrackOutput
from tqd.denoising import DenoisingGroupSpec, FalsePositivePool, TrackQueries, generate
from tqd.masks import QueryLayout
from tqd.rng import substream
from tqd.tracker import Tracker, TrackerConfig, TrackState

# -- masks ------------------------------------------------------------------

def compositions(n):
    """All ordered partitions of n into positive parts."""
    if n == 0:
        yield ()
        return
    for first in range(1, n + 1):
        for rest in compositions(n - first):
            yield (first,) + rest


def all_layouts(max_width):
    for w in range(max_width + 1):
        for n_dn in range(w + 1):
            for groups in compositions(n_dn):
                for n_track in range(w - n_dn + 1):
                    yield QueryLayout(groups, n_track, w - n_dn - n_track)


def oracle_self_attention(layout):
    """Entry-by-entry evaluation of the blocking predicate."""
    owner = []
    for g, n in enumerate(layout.group_sizes):
        owner += [g] * n
    owner += [None] * (layout.n_track + layout.n_det)
    w = len(owner)
    out = np.zeros((w, w))
    for i in range(w):
        for j in range(w):
            key_dn = owner[j] is not None
            if key_dn and (owner[i] is None or owner[i] != owner[j]):
                out[i, j] = 1.0
    return out


def oracle_association(layout):
    out = np.zeros((layout.n_det, layout.n_dn + layout.n_track))
    for i in range(layout.n_det):
        for j in range(layout.n_dn + layout.n_track):
            out[i, j] = 1.0 if j < layout.n_dn else 0.0
    return out


# -- assignment -------------------------------------------------------------

def brute_force_cost(cost):
    """Minimum total cost over every assignment of the smaller side."""
    n, m = cost.shape
    if n > m:
        return brute_force_cost(cost.T)
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.intp).reshape(-1, n)
    return float(cost[np.arange(n), perms].sum(axis=1).min())


# -- metrics ----------------------------------------------------------------

def gt(iid, x, y=0.0):
    return BevBox((x, y, 1.0), (2.0, 4.0, 1.5), 0.0, (0.0, 0.0), iid)


def pred(tid, x, score, y=0.0):
    return TrackOutput(tid, BevBox((x, y, 1.0), (2.0, 4.0, 1.5), 0.0, (0.0, 0.0), tid, score), score)


def clear_mot_case():
    """Two instances over three frames: TP 5, FP 1, FN 1, IDS 1, MOTA 0.5."""
    scene = [[gt(1, 0.0), gt(2, 10.0)], [gt(1, 1.0), gt(2, 11.0)], [gt(1, 2.0), gt(2, 12.0)]]
    res = [
        [pred(100, 0.5, 0.9), pred(200, 10.0, 0.8)],
        [pred(100, 1.0, 0.9), pred(300, 11.0, 0.8), pred(400, 40.0, 0.7)],  # id switch on 2, one FP
        [pred(100, 2.0, 0.9)],  # instance 2 missed
    ]
    return [res], [scene]


def sweep_case():
    """One instance over four frames: AMOTA 19/24, AMOTP 0.35."""
    scene = [[gt(1, 0.0)] for _ in range(4)]
    res = [
        [pred(1, 0.2, 0.9)],
        [pred(1, 0.4, 0.8)],
        [pred(1, 0.6, 0.7), pred(5, 30.0, 0.75)],
        [pred(2, 0.8, 0.6)],
    ]
    return [res], [scene]


def perfect_case(seed=0):
    rng = np.random.default_rng(seed)
    scenes, results = [], []
    for _ in range(3):
        frames = [[gt(i, float(rng.uniform(-40, 40)), float(5 * i)) for i in range(4)] for _ in range(6)]
        scenes.append(frames)
        results.append([[pred(100 + b.instance_id, b.center[0], 1.0, b.center[1]) for b in f] for f in frames])
    return results, scenes


# -- tracker instances --------------------------------------------------------

SMALL = dict(feature_dim=8, n_det_queries=5, n_freq=2)


def random_box(rng, iid=None, arena=50.0):
    c = (rng.uniform(-arena, arena), rng.uniform(-arena, arena), rng.uniform(0.5, 1.5))
    s = tuple(rng.uniform(1.0, 4.0, 3))
    return BevBox(c, s, rng.uniform(-3, 3), tuple(rng.normal(0, 3, 2)), iid, 1.0)


def random_state(rng, n, dim):
    boxes = [random_box(rng, 100 + i) for i in range(n)]
    return TrackState(rng.normal(size=(n, dim)), boxes, [100 + i for i in range(n)], [0] * n, [0.9] * n, 100 + n)


def random_obs(rng, n):
    b = [random_box(rng) for _ in range(n)]
    return np.array([[*x.center, *x.size, np.sin(x.yaw), np.cos(x.yaw)] for x in b]).reshape(-1, 8)


def random_dn(rng, state, n_groups, dim, mode="temporal"):
    n_gt = int(rng.integers(0, 5))
    gt_boxes = [random_box(rng, 100 + i) for i in range(n_gt)]
    fp = FalsePositivePool(rng.normal(size=(3, dim)), [random_box(rng) for _ in range(3)], rng.random(3))
    specs = [DenoisingGroupSpec(alpha_fp=float(rng.uniform(0, 0.6)), mode=mode)] * n_groups
    return generate(gt_boxes, TrackQueries(state.features, state.ids), fp, specs, rng, dim)


def outputs_without_dn(out):
    """Every value the frame exposes for track and detection queries."""
    vals = []
    for heads in out.heads:
        for s in ("track", "det"):
            if s in heads:
                vals += [heads[s].box.value, heads[s].logit.value]
    for layer in out.assoc:
        if "track" in layer:
            vals.append(layer["track"].value)
    vals += [out.features[s].value for s in ("track", "det") if s in out.features]
    return vals


def dn_rows(out, rows):
    vals = [out.features["dn"].value[rows]]
    for heads in out.heads:
        vals += [heads["dn"].box.value[rows], heads["dn"].logit.value[rows]]
    for layer in out.assoc:
        if "dn" in layer:
            vals.append(layer["dn"].value[rows])
    return vals


def scaled_model(paradigm, seed, layers):
    model = Tracker.create(TrackerConfig(paradigm=paradigm, decoder_layers=layers, **SMALL), seed)
    rng = substream(seed, "scale")
    for p in model.parameters():
        p.value *= rng.uniform(0.5, 2.0)  # vary weight magnitude across instances
    return model


def leak_gap(paradigm, n_instances):
    """Largest change in any track/detection output when a DN set is added."""
    worst = 0.0
    for seed in range(n_instances):
        rng = substream(seed, "leak", paradigm)
        model = scaled_model(paradigm, seed, 1 + seed % 2)
        state = random_state(rng, int(rng.integers(0, 4)), 8)
        obs = random_obs(rng, int(rng.integers(0, 6)))
        dn = random_dn(rng, state, int(rng.integers(1, 4)), 8, ("temporal", "static")[seed % 2])
        clean = model.forward_frame(Graph(record=False), state, None, obs)
        noisy = model.forward_frame(Graph(record=False), state, dn, obs)
        for a, b in zip(outputs_without_dn(clean), outputs_without_dn(noisy)):
            worst = max(worst, float(np.max(np.abs(a - b), initial=0.0)))
    return worst


def group_gap(paradigm, n_instances):
    """(largest change outside a perturbed DN group, instances where the
    perturbed group itself did not move)."""
    worst, frozen, used = 0.0, 0, 0
    seed = 0
    while used < n_instances:
        rng = substream(seed, "groups", paradigm)
        seed += 1
        model = scaled_model(paradigm, seed, 2)
        state = random_state(rng, int(rng.integers(0, 4)), 8)
        obs = random_obs(rng, int(rng.integers(1, 6)))
        dn = random_dn(rng, state, int(rng.integers(2, 5)), 8)
        if len(dn) == 0:
            continue
        used += 1
        base = model.forward_frame(Graph(record=False), state, dn, obs)
        g = int(dn.group_ids[int(rng.integers(len(dn)))])
        own = dn.group_ids == g
        dn.features[own] += rng.normal(0, 5.0, size=dn.features[own].shape)
        moved = model.forward_frame(Graph(record=False), state, dn, obs)
        others = np.flatnonzero(~own)
        for a, b in zip(dn_rows(base, others) + outputs_without_dn(base),
                        dn_rows(moved, others) + outputs_without_dn(moved)):
            worst = max(worst, float(np.max(np.abs(a - b), initial=0.0)))
        own_rows = np.flatnonzero(own)
        frozen += int(np.array_equal(dn_rows(base, own_rows)[0], dn_rows(moved, own_rows)[0]))
    return worst, frozen


# -- differentiable primitives -------------------------------------------------

PRIMITIVE_CASES = {
    "matmul": lambda g, a, b, c: ad.matmul(a, ad.transpose(b)),
    "add": lambda g, a, b, c: ad.add(a, b),
    "sub": lambda g, a, b, c: ad.sub(a, b),
    "mul": lambda g, a, b, c: ad.mul(a, b),
    "add_row": lambda g, a, b, c: ad.add_row(a, c),
    "mul_row": lambda g, a, b, c: ad.mul_row(a, c),
    "scale": lambda g, a, b, c: ad.scale(a, -1.7),
    "transpose": lambda g, a, b, c: ad.matmul(ad.transpose(a), b),
    "reshape": lambda g, a, b, c: ad.mul(ad.reshape(a, a.shape[1], a.shape[0]), ad.transpose(b)),
    "vstack": lambda g, a, b, c: ad.mul(ad.vstack([a, b]), ad.vstack([b, a])),
    "hstack": lambda g, a, b, c: ad.mul(ad.hstack([a, b]), ad.hstack([b, b])),
    "take_rows": lambda g, a, b, c: ad.mul(ad.take_rows(a, np.array([2, 0])), ad.take_rows(b, np.array([1, 2]))),
    "take_cols": lambda g, a, b, c: ad.mul(ad.take_cols(a, 1, 3), ad.take_cols(b, 0, 2)),
    "relu": lambda g, a, b, c: ad.mul(ad.relu(ad.add(a, g.constant(np.full(a.shape, 0.5)))), b),
    "sum_all": lambda g, a, b, c: ad.sum_all(ad.mul(a, b)),
    "gelu": lambda g, a, b, c: ad.mul(ad.gelu(a), b),
    "sigmoid": lambda g, a, b, c: ad.mul(ad.sigmoid(a), b),
    "softplus": lambda g, a, b, c: ad.mul(ad.softplus(a), b),
    "abs": lambda g, a, b, c: ad.mul(ad.absolute(ad.add(a, g.constant(np.full(a.shape, 3.0)))), b),
    "mean": lambda g, a, b, c: ad.mean(ad.mul(a, b)),
    "layer_norm": lambda g, a, b, c: ad.mul(ad.layer_norm(a), b),
    "masked_softmax": lambda g, a, b, c: ad.mul(
        ad.masked_softmax(a, np.array([[0.0, 1, 0, 0], [1, 1, 1, 1], [0, 0, 0, 1]])), b),
    "linear": lambda g, a, b, c: ad.linear(a, ad.transpose(b), None),
    "feed_forward": lambda g, a, b, c: ad.feed_forward(
        a, ad.transpose(b), g.constant(np.zeros((1, 3))), b, c),
    "norm_affine": lambda g, a, b, c: ad.mul(ad.norm_affine(a, c, c), b),
}


def primitive_gradient_error(name, n_instances):
    """Worst finite-difference gap of one primitive over random instances."""
    build = PRIMITIVE_CASES[name]
    worst = 0.0
    for seed in range(n_instances):
        rng = np.random.default_rng(seed)
        pa = Parameter("a", rng.normal(size=(3, 4)))
        pb = Parameter("b", rng.normal(size=(3, 4)))
        pc = Parameter("c", rng.normal(size=(1, 4)))
        w = rng.normal(size=(64,))

        def f(g):
            out = build(g, g.param(pa), g.param(pb), g.param(pc))
            flat = ad.reshape(out, 1, out.shape[0] * out.shape[1])
            return ad.matmul(flat, g.constant(w[: flat.shape[1]].reshape(-1, 1)))

        worst = max(worst, ad.finite_diff_check(f, [pa, pb, pc], h=1e-5))
    return worst
