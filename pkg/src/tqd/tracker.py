"""Query-based tracker with three paradigms and denoising-aware masking.

Queries are kept in three segments, processed row-wise on their own:
``dn`` (all denoising groups), ``track`` and ``det``.  Any operation that
mixes rows (self-attention, association) draws its keys from the masks in
:mod:`tqd.masks`, and blocked keys are never touched.  As a result the
track and detection outputs of a forward pass are bit-for-bit the same with
or without a denoising set attached.

Paradigms:

* ``TBA``: layers of self-attention, observation cross-attention and FFN;
  track queries keep their identity, detection queries only spawn tracks.
* ``TBD``: the same detector layers, followed by a stack of
  edge-augmented cross-attention association layers.
* ``ADA``: every layer runs detection sublayers and then one association
  sublayer, so detection and association alternate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Graph, Parameter, Tensor
from .boxes import N_BOX_PARAMS, BevBox, TrackOutput, decode_boxes
from .denoising import DenoisingQuerySet
from .masks import QueryLayout, build_association_mask, build_self_attention_mask
from .matching import hungarian_match
from .numeric import sigmoid
from .rng import substream

PARADIGMS = ("TBA", "TBD", "ADA")
SEGMENTS = ("dn", "track", "det")
SOURCE_SEGMENTS = ("dn", "track")
EDGE_SCALE = np.array([10.0, 10.0, 2.0, 10.0])
LOCALITY_SCALE = 5.0  # meters; width of the attention prior around a reference point
OFFSET_SCALE = 10.0


class TrackerConfigError(ValueError):
    pass


@dataclass(frozen=True)
class TrackerConfig:
    paradigm: str = "ADA"
    decoder_layers: int = 2
    feature_dim: int = 32
    n_det_queries: int = 32
    tau_birth: float = 0.6
    tau_out: float = 0.4
    max_miss: int = 3
    assoc_gate: float = 0.5
    birth_nms: float = 1.0  # meters; 0 disables
    arena: float = 50.0
    dt: float = 0.5
    n_freq: int = 6

    def __post_init__(self) -> None:
        if self.paradigm not in PARADIGMS:
            raise TrackerConfigError(f"unknown paradigm {self.paradigm!r}; expected one of {PARADIGMS}")
        if self.decoder_layers < 1:
            raise TrackerConfigError("decoder_layers must be >= 1")
        if self.feature_dim < 4:
            raise TrackerConfigError("feature_dim must be >= 4")
        if self.n_det_queries < 1:
            raise TrackerConfigError("n_det_queries must be >= 1")
        for name in ("tau_birth", "tau_out", "assoc_gate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise TrackerConfigError(f"{name} must lie in [0, 1]")
        if self.max_miss < 1:
            raise TrackerConfigError("max_miss must be >= 1")
        if self.birth_nms < 0:
            raise TrackerConfigError("birth_nms must be >= 0")


# -- encodings --------------------------------------------------------------

def sinusoidal_encoding(values: np.ndarray, n_freq: int) -> np.ndarray:
    """[sin(pi 2^k v), cos(pi 2^k v)] for k < n_freq, per input column."""
    values = np.asarray(values, dtype=np.float64)
    freqs = math.pi * 2.0 ** np.arange(n_freq)
    ang = values[:, :, None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=2).reshape(values.shape[0], -1)


def normalize_points(points: np.ndarray, arena: float) -> np.ndarray:
    return np.asarray(points, dtype=np.float64).reshape(-1, 3) / np.array([arena, arena, 2.0])


def observation_features(raw: np.ndarray, arena: float, n_freq: int) -> np.ndarray:
    """Fixed encoding of raw observation boxes (x, y, z, w, l, h, sin, cos)."""
    raw = np.asarray(raw, dtype=np.float64).reshape(-1, 8)
    norm = np.column_stack([
        raw[:, 0] / arena, raw[:, 1] / arena, raw[:, 2] / 2.0,
        np.log(raw[:, 3]), np.log(raw[:, 4]), np.log(raw[:, 5]), raw[:, 6], raw[:, 7],
    ]) if raw.shape[0] else np.zeros((0, 8))
    return sinusoidal_encoding(norm, n_freq)


def edge_features(src_refs: np.ndarray, det_refs: np.ndarray) -> np.ndarray:
    """Pairwise box-center differences, source-major: row u * N_D + d."""
    diff = src_refs[:, None, :] - det_refs[None, :, :]
    dist = np.hypot(diff[..., 0], diff[..., 1])[..., None]
    feats = np.concatenate([diff, dist], axis=2).reshape(-1, 4)
    return feats / EDGE_SCALE


@lru_cache(maxsize=256)
def _attention_patterns(layout: QueryLayout) -> tuple[tuple[np.ndarray, np.ndarray], ...]:
    """Rows sharing one self-attention mask row, with the keys they may see."""
    mask = build_self_attention_mask(layout)
    groups: dict[bytes, list[int]] = {}
    for i in range(mask.shape[0]):
        groups.setdefault(mask[i].tobytes(), []).append(i)
    out = []
    for rows in groups.values():
        cols = np.flatnonzero(mask[rows[0]] == 0)
        out.append((np.array(rows, dtype=np.intp), cols.astype(np.intp)))
    return tuple(out)


# -- state and outputs ------------------------------------------------------

@dataclass
class TrackState:
    features: np.ndarray
    boxes: list[BevBox]
    ids: list[int]
    misses: list[int]
    scores: list[float]
    next_id: int = 0

    @classmethod
    def empty(cls, dim: int) -> "TrackState":
        return cls(np.zeros((0, dim)), [], [], [], [])

    def __len__(self) -> int:
        return len(self.ids)

    def reference_points(self, dt: float) -> np.ndarray:
        return np.array([b.advanced(dt).center for b in self.boxes], dtype=np.float64).reshape(-1, 3)

    def velocities(self) -> np.ndarray:
        return np.array([b.velocity for b in self.boxes], dtype=np.float64).reshape(-1, 2)


@dataclass
class HeadOutput:
    box: Tensor
    logit: Tensor


@dataclass
class FrameOutput:
    layout: QueryLayout
    refs: dict[str, np.ndarray]
    heads: list[dict[str, HeadOutput]]
    assoc: list[dict[str, Tensor]]
    features: dict[str, Tensor]
    layer_refs: list[dict[str, np.ndarray]] = field(default_factory=list)  # refs each head is relative to
    ref_velocity: dict[str, np.ndarray] = field(default_factory=dict)  # carried velocity of source queries

    def final(self, seg: str) -> HeadOutput | None:
        return self.heads[-1].get(seg) if self.heads else None

    def predictions(self, seg: str) -> "Predictions":
        """Decoded final-layer outputs as plain arrays (no gradient)."""
        head = self.final(seg)
        if head is None:
            return Predictions.empty(self.features_dim())
        g = head.box.graph
        box, logit = g.detached_value(head.box), g.detached_value(head.logit)
        feats = g.detached_value(self.features[seg])
        scores = sigmoid(logit[:, 0])
        refs = self.layer_refs[-1][seg] if self.layer_refs else self.refs[seg]
        return Predictions(decode_boxes(box, refs, scores, self.ref_velocity.get(seg)), scores, feats)

    def association_scores(self, seg: str = "track") -> np.ndarray:
        if not self.assoc or seg not in self.assoc[-1]:
            n = len(self.refs.get(seg, ())) if seg in self.refs else 0
            return np.zeros((n, self.layout.n_det))
        t = self.assoc[-1][seg]
        return sigmoid(t.graph.detached_value(t))

    def features_dim(self) -> int:
        return next(iter(self.features.values())).value.shape[1]


@dataclass
class Predictions:
    boxes: list[BevBox]
    scores: np.ndarray
    features: np.ndarray

    @classmethod
    def empty(cls, dim: int) -> "Predictions":
        return cls([], np.zeros(0), np.zeros((0, dim)))


# -- model ------------------------------------------------------------------

@dataclass
class Tracker:
    config: TrackerConfig
    params: dict[str, Parameter] = field(default_factory=dict)
    det_refs: np.ndarray = field(default=None)  # type: ignore[assignment]

    @classmethod
    def create(cls, config: TrackerConfig, seed: int = 0) -> "Tracker":
        rng = substream(seed, "model-init")
        model = cls(config)
        model._build(rng)
        a = config.arena
        model.det_refs = np.column_stack([
            rng.uniform(-a, a, config.n_det_queries),
            rng.uniform(-a, a, config.n_det_queries),
            rng.uniform(0.0, 2.0, config.n_det_queries),
        ])
        return model

    # parameters

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Parameter(name, value)

    def _dense(self, name: str, n_in: int, n_out: int, rng, bias: bool = True) -> None:
        limit = math.sqrt(6.0 / (n_in + n_out))
        self._add(f"{name}.w", rng.uniform(-limit, limit, (n_in, n_out)))
        if bias:
            self._add(f"{name}.b", np.zeros((1, n_out)))

    def _norm(self, name: str) -> None:
        d = self.config.feature_dim
        self._add(f"{name}.g", np.ones((1, d)))
        self._add(f"{name}.b", np.zeros((1, d)))

    def _mlp(self, name: str, n_in: int, hidden: int, n_out: int, rng) -> None:
        self._dense(f"{name}.fc1", n_in, hidden, rng)
        self._dense(f"{name}.fc2", hidden, n_out, rng)

    def _build(self, rng: np.random.Generator) -> None:
        cfg = self.config
        d, f = cfg.feature_dim, cfg.n_freq
        self._dense("obs", 8 * 2 * f, d, rng)
        self._mlp("pos", 3 * 2 * f, d, d, rng)
        self._add("det_embed", rng.normal(0.0, 0.5, (cfg.n_det_queries, d)))
        for prefix in self.detection_layer_names():
            for sub in ("sa", "ca"):
                for w in ("q", "k", "v", "o"):
                    self._dense(f"{prefix}.{sub}.{w}", d, d, rng, bias=False)
                self._norm(f"{prefix}.{sub}.ln")
            self._dense(f"{prefix}.ca.r", 3, d, rng, bias=False)
            self._norm(f"{prefix}.ffn.ln")
            self._mlp(f"{prefix}.ffn", d, 2 * d, d, rng)
        for prefix in self.association_layer_names():
            for w in ("q", "k", "v"):
                self._dense(f"{prefix}.eaca.{w}", d, d, rng, bias=False)
            self._dense(f"{prefix}.eaca.e1", d, 1, rng, bias=False)
            self._dense(f"{prefix}.eaca.e2", 1, d, rng, bias=False)
            for ln in ("ln_q", "ln_u", "ln_e", "ln_qf", "ln_ef"):
                self._norm(f"{prefix}.eaca.{ln}")
            self._mlp(f"{prefix}.eaca.ffn_q", d, 2 * d, d, rng)
            self._mlp(f"{prefix}.eaca.ffn_e", d, 2 * d, d, rng)
        if self.association_layer_names():
            self._mlp("edge", 4, d, d, rng)
            self._norm("head.assoc.ln")
            self._mlp("head.assoc", d, d, 1, rng)
        self._norm("head.ln")
        self._mlp("head.box", d, d, N_BOX_PARAMS, rng)
        self._add("head.box.snap", np.ones((1, 3)))
        self._mlp("head.cls", d, d, 1, rng)

    def detection_layer_names(self) -> list[str]:
        n = self.config.decoder_layers
        if self.config.paradigm == "TBD":
            return [f"det{i}" for i in range(n)]
        return [f"layer{i}" for i in range(n)]

    def association_layer_names(self) -> list[str]:
        n = self.config.decoder_layers
        if self.config.paradigm == "TBD":
            return [f"assoc{i}" for i in range(n)]
        if self.config.paradigm == "ADA":
            return [f"layer{i}" for i in range(n)]
        return []

    def parameters(self) -> list[Parameter]:
        return list(self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    # building blocks

    def _p(self, g: Graph, name: str) -> Tensor:
        return g.param(self.params[name])

    def _linear(self, g, x, name, bias=True):
        return ad.linear(x, self._p(g, f"{name}.w"), self._p(g, f"{name}.b") if bias else None)

    def _mlp_apply(self, g, x, name):
        return self._linear(g, ad.gelu(self._linear(g, x, f"{name}.fc1")), f"{name}.fc2")

    def _ln(self, g, x, name):
        return ad.norm_affine(x, self._p(g, f"{name}.g"), self._p(g, f"{name}.b"))

    def _pos(self, g, refs):
        enc = sinusoidal_encoding(normalize_points(refs, self.config.arena), self.config.n_freq)
        return self._mlp_apply(g, g.constant(enc), "pos")

    def masked_self_attention(
        self, g: Graph, X: dict[str, Tensor], layout: QueryLayout, prefix: str,
        P: dict[str, Tensor] | None = None,
    ) -> dict[str, Tensor]:
        """Pre-norm residual self-attention over all segments under the self-attention mask.

        Position embeddings ``P`` enter queries and keys, not values.
        """
        names = [s for s in SEGMENTS if s in X]
        normed = {s: self._ln(g, X[s], f"{prefix}.ln") for s in names}
        located = {s: ad.add(normed[s], P[s]) if P else normed[s] for s in names}
        Q = ad.vstack([ad.matmul(located[s], self._p(g, f"{prefix}.q.w")) for s in names])
        K = ad.vstack([ad.matmul(located[s], self._p(g, f"{prefix}.k.w")) for s in names])
        V = ad.vstack([ad.matmul(normed[s], self._p(g, f"{prefix}.v.w")) for s in names])
        inv_sqrt = 1.0 / math.sqrt(self.config.feature_dim)
        outs, order = [], []
        for rows, cols in _attention_patterns(layout):
            q = ad.take_rows(Q, rows)
            k = ad.take_rows(K, cols)
            v = ad.take_rows(V, cols)
            scores = ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt)
            weights = ad.masked_softmax(scores, np.zeros(scores.shape))
            outs.append(ad.matmul(weights, v))
            order.append(rows)
        Y = ad.vstack(outs)
        inverse = np.argsort(np.concatenate(order), kind="stable")
        out, start = {}, 0
        for s in names:
            n = X[s].shape[0]
            y = ad.take_rows(Y, inverse[start : start + n])
            out[s] = ad.add(X[s], ad.matmul(y, self._p(g, f"{prefix}.o.w")))
            start += n
        return out

    def observation_cross_attention(
        self, g: Graph, X: dict[str, Tensor], tokens: Tensor | None, prefix: str,
        refs: dict[str, np.ndarray] | None = None, obs_xyz: np.ndarray | None = None,
        P: dict[str, Tensor] | None = None,
    ) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """Every query attends to every observation token; no tokens means no update.

        With reference points and observation centers given, scores carry a
        Gaussian locality prior on the BEV distance and each query also
        receives its attention-weighted offset to the observations, projected
        by ``r.w`` (a stand-in for sampling image features at the reference
        point).  The second return value holds that offset in meters per
        segment; it is empty without geometry.
        """
        if tokens is None or tokens.shape[0] == 0:
            return X, {}
        K = ad.matmul(tokens, self._p(g, f"{prefix}.k.w"))
        V = ad.matmul(tokens, self._p(g, f"{prefix}.v.w"))
        Kt = ad.transpose(K)
        inv_sqrt = 1.0 / math.sqrt(self.config.feature_dim)
        out, offsets = {}, {}
        for s, x in X.items():
            xn = self._ln(g, x, f"{prefix}.ln")
            q = ad.matmul(ad.add(xn, P[s]) if P else xn, self._p(g, f"{prefix}.q.w"))
            scores = ad.scale(ad.matmul(q, Kt), inv_sqrt)
            geometric = refs is not None and obs_xyz is not None
            if geometric:
                d2 = ((refs[s][:, None, :2] - obs_xyz[None, :, :2]) ** 2).sum(axis=2)
                scores = ad.add(scores, -d2 / (2.0 * LOCALITY_SCALE ** 2))
            weights = ad.masked_softmax(scores, np.zeros(scores.shape))
            update = ad.matmul(weights, V)
            if geometric:
                offsets[s] = ad.sub(ad.matmul(weights, obs_xyz), refs[s])
                rel = ad.scale(offsets[s], 1.0 / OFFSET_SCALE)
                update = ad.add(update, ad.matmul(rel, self._p(g, f"{prefix}.r.w")))
            out[s] = ad.add(x, ad.matmul(update, self._p(g, f"{prefix}.o.w")))
        return out, offsets

    def _ffn(self, g, X, prefix):
        return {s: ad.add(x, self._mlp_apply(g, self._ln(g, x, f"{prefix}.ln"), prefix)) for s, x in X.items()}

    def edge_augmented_cross_attention(
        self, g: Graph, X: dict[str, Tensor], E: dict[str, Tensor], layout: QueryLayout, prefix: str
    ) -> tuple[dict[str, Tensor], dict[str, Tensor]]:
        """Update detection queries from track queries only, and every edge from raw scores.

        Scores ``A`` combine query-key products with an edge bias.  Detection
        features aggregate a masked softmax of ``A`` over track columns, while
        each edge row (including denoising pairs) is updated from its own
        pre-mask score.
        """
        p = f"{prefix}.eaca"
        n_det = layout.n_det
        inv_sqrt = 1.0 / math.sqrt(self.config.feature_dim)
        q = ad.matmul(self._ln(g, X["det"], f"{p}.ln_q"), self._p(g, f"{p}.q.w"))
        qt_src = {}
        A: dict[str, Tensor] = {}
        for s in SOURCE_SEGMENTS:
            if s not in X:
                continue
            un = self._ln(g, X[s], f"{p}.ln_u")
            qt_src[s] = un
            k = ad.matmul(un, self._p(g, f"{p}.k.w"))
            bias = ad.matmul(self._ln(g, E[s], f"{p}.ln_e"), self._p(g, f"{p}.e1.w"))
            bias = ad.transpose(ad.reshape(bias, X[s].shape[0], n_det))
            A[s] = ad.add(ad.scale(ad.matmul(q, ad.transpose(k)), inv_sqrt), bias)
        det = X["det"]
        if "track" in A:
            full = ad.hstack([A[s] for s in SOURCE_SEGMENTS if s in A])
            weights = ad.masked_softmax(full, build_association_mask(layout))
            if "dn" in A:
                weights = ad.take_cols(weights, layout.n_dn, layout.n_source)
            values = ad.matmul(qt_src["track"], self._p(g, f"{p}.v.w"))
            det = ad.add(det, ad.matmul(weights, values))
        det = ad.add(det, self._mlp_apply(g, self._ln(g, det, f"{p}.ln_qf"), f"{p}.ffn_q"))
        new_E = {}
        for s, a in A.items():
            pairs = ad.reshape(ad.transpose(a), E[s].shape[0], 1)
            e = ad.add(E[s], ad.matmul(pairs, self._p(g, f"{p}.e2.w")))
            new_E[s] = ad.add(e, self._mlp_apply(g, self._ln(g, e, f"{p}.ln_ef"), f"{p}.ffn_e"))
        X = dict(X)
        X["det"] = det
        return X, new_E

    def task_heads(
        self, g: Graph, X: dict[str, Tensor], offsets: dict[str, Tensor] | None = None
    ) -> tuple[dict[str, HeadOutput], dict[str, Tensor]]:
        """Box parameters (offsets from the reference point) and objectness logits.

        When the last observation attention supplied an attention-weighted
        offset, it is added to the predicted center through the per-axis gain
        ``head.box.snap``.  Velocity of denoising and track queries is a
        residual on the velocity they carry (``FrameOutput.ref_velocity``).
        """
        heads, feats = {}, {}
        offsets = offsets or {}
        for s, x in X.items():
            xn = self._ln(g, x, "head.ln")
            feats[s] = xn
            box = self._mlp_apply(g, xn, "head.box")
            if s in offsets:
                center = ad.add(ad.take_cols(box, 0, 3), ad.mul_row(offsets[s], self._p(g, "head.box.snap")))
                box = ad.hstack([center, ad.take_cols(box, 3, N_BOX_PARAMS)])
            heads[s] = HeadOutput(box, self._mlp_apply(g, xn, "head.cls"))
        return heads, feats

    def association_head(self, g: Graph, E: dict[str, Tensor], n_det: int) -> dict[str, Tensor]:
        """Association logits per (source, detection) pair, shaped sources × detections."""
        out = {}
        for s, e in E.items():
            logit = self._mlp_apply(g, self._ln(g, e, "head.assoc.ln"), "head.assoc")
            out[s] = ad.reshape(logit, e.shape[0] // n_det, n_det)
        return out

    def _edges(self, g, centers: dict[str, np.ndarray]) -> dict[str, Tensor]:
        """Initial edges from differences between the predicted centers of each
        source query and of each detection query (treated as constants)."""
        E = {}
        for s in SOURCE_SEGMENTS:
            if s in centers:
                E[s] = self._mlp_apply(g, g.constant(edge_features(centers[s], centers["det"])), "edge")
        return E

    # forward

    def forward_frame(
        self,
        g: Graph,
        state: TrackState,
        dn: DenoisingQuerySet | None,
        obs_raw: np.ndarray,
    ) -> FrameOutput:
        cfg = self.config
        refs: dict[str, np.ndarray] = {}
        ref_velocity: dict[str, np.ndarray] = {}
        X: dict[str, Tensor] = {}
        group_sizes: tuple[int, ...] = ()
        if dn is not None:
            group_sizes = dn.group_sizes
            if len(dn):
                refs["dn"] = dn.reference_points
                ref_velocity["dn"] = np.array([b.velocity for b in dn.boxes], dtype=np.float64).reshape(-1, 2)
                X["dn"] = g.constant(dn.features)
        if len(state):
            refs["track"] = state.reference_points(cfg.dt)
            ref_velocity["track"] = state.velocities()
            X["track"] = g.constant(state.features)
        refs["det"] = self.det_refs
        X["det"] = self._p(g, "det_embed")
        layout = QueryLayout(group_sizes, len(state), cfg.n_det_queries)

        obs_raw = np.asarray(obs_raw, dtype=np.float64).reshape(-1, 8)
        tokens = None
        if obs_raw.shape[0]:
            enc = observation_features(obs_raw, cfg.arena, cfg.n_freq)
            tokens = self._linear(g, g.constant(enc), "obs")

        heads_per_layer: list[dict[str, HeadOutput]] = []
        assoc_per_layer: list[dict[str, Tensor]] = []
        layer_refs: list[dict[str, np.ndarray]] = []
        feats: dict[str, Tensor] = {}
        obs_xyz = obs_raw[:, :3]
        cur = dict(refs)

        def detect(X, name):
            # Each layer's heads predict offsets from the current reference
            # points; the next layer starts from the predicted centers and
            # re-embeds them.
            nonlocal cur, feats
            P = {s: self._pos(g, cur[s]) for s in cur}
            X, offsets = self._detection_layer(g, X, layout, tokens, name, cur, obs_xyz, P)
            heads, feats = self.task_heads(g, X, offsets)
            heads_per_layer.append(heads)
            layer_refs.append(cur)
            cur = {s: cur[s] + g.detached_value(heads[s].box)[:, :3] for s in cur}
            return X, heads

        if cfg.paradigm == "ADA":
            E = None
            for name in self.detection_layer_names():
                X, heads = detect(X, name)
                if E is None:
                    E = self._edges(g, cur)
                X, E = self.edge_augmented_cross_attention(g, X, E, layout, name)
                assoc_per_layer.append(self.association_head(g, E, cfg.n_det_queries))
        else:
            for name in self.detection_layer_names():
                X, heads = detect(X, name)
            if cfg.paradigm == "TBD":
                E = self._edges(g, cur)
                for name in self.association_layer_names():
                    X, E = self.edge_augmented_cross_attention(g, X, E, layout, name)
                    assoc_per_layer.append(self.association_head(g, E, cfg.n_det_queries))
        return FrameOutput(layout, refs, heads_per_layer, assoc_per_layer, feats, layer_refs, ref_velocity)

    def _detection_layer(self, g, X, layout, tokens, name, refs, obs_xyz, P):
        X = self.masked_self_attention(g, X, layout, f"{name}.sa", P)
        X, offsets = self.observation_cross_attention(g, X, tokens, f"{name}.ca", refs, obs_xyz, P)
        return self._ffn(g, X, f"{name}.ffn"), offsets


# -- track management -------------------------------------------------------

def with_id(box: BevBox, iid: int, score: float) -> BevBox:
    return BevBox(box.center, box.size, box.yaw, box.velocity, iid, float(np.clip(score, 0.0, 1.0)))


def update_tracks(
    state: TrackState,
    track_pred: Predictions,
    det_pred: Predictions,
    assoc_scores: np.ndarray | None,
    config: TrackerConfig,
) -> tuple[TrackState, list[TrackOutput]]:
    """Inference-time track update.

    With association scores (TBD/ADA), tracks and detections are matched by
    Hungarian assignment on ``1 - S``; pairs scoring below the gate stay
    unmatched.  Without them (TBA), a track survives on its own score.
    Unmatched tracks age and die after ``max_miss`` misses; unmatched
    confident detections start new tracks, in descending score order, unless
    their BEV center lies within ``birth_nms`` of a kept or newly born track.
    """
    feats, boxes, ids, misses, scores = [], [], [], [], []
    used_det: set[int] = set()
    matched: dict[int, int] = {}
    if assoc_scores is not None and len(state) and len(det_pred.boxes):
        res = hungarian_match(1.0 - assoc_scores)
        for u, d in res.pairs():
            if assoc_scores[u, d] >= config.assoc_gate:
                matched[u] = d
    for u, tid in enumerate(state.ids):
        if u in matched:
            d = matched[u]
            used_det.add(d)
            s = float(det_pred.scores[d])
            feats.append(det_pred.features[d])
            boxes.append(with_id(det_pred.boxes[d], tid, s))
            misses.append(0)
            scores.append(s)
            ids.append(tid)
            continue
        s = float(track_pred.scores[u])
        hit = assoc_scores is None and s > config.tau_out
        miss = 0 if hit else state.misses[u] + 1
        if miss >= config.max_miss:
            continue
        feats.append(track_pred.features[u])
        boxes.append(with_id(track_pred.boxes[u], tid, s))
        misses.append(miss)
        scores.append(s)
        ids.append(tid)
    next_id = state.next_id
    taken = [b.center[:2] for b in boxes]
    for d in sorted(range(len(det_pred.scores)), key=lambda i: (-det_pred.scores[i], i)):
        s = det_pred.scores[d]
        if d in used_det or s <= config.tau_birth:
            continue
        xy = det_pred.boxes[d].center[:2]
        if config.birth_nms > 0 and any(math.hypot(xy[0] - t[0], xy[1] - t[1]) < config.birth_nms for t in taken):
            continue
        taken.append(xy)
        feats.append(det_pred.features[d])
        boxes.append(with_id(det_pred.boxes[d], next_id, float(s)))
        ids.append(next_id)
        misses.append(0)
        scores.append(float(s))
        next_id += 1
    dim = state.features.shape[1]
    new_state = TrackState(np.array(feats).reshape(-1, dim), boxes, ids, misses, scores, next_id)
    output = [TrackOutput(i, b, s) for i, b, s in zip(ids, boxes, scores) if s > config.tau_out]
    return new_state, output


def track_frame(model: Tracker, state: TrackState, obs_raw: np.ndarray) -> tuple[TrackState, list[TrackOutput]]:
    """One inference step.  Never builds denoising queries."""
    out = model.forward_frame(Graph(record=False), state, None, obs_raw)
    s = out.association_scores("track") if model.config.paradigm != "TBA" else None
    return update_tracks(state, out.predictions("track"), out.predictions("det"), s, model.config)


def track_scene(model: Tracker, observations) -> list[list[TrackOutput]]:
    state = TrackState.empty(model.config.feature_dim)
    results = []
    for obs in observations:
        raw = obs.raw if hasattr(obs, "raw") else obs
        state, out = track_frame(model, state, raw)
        results.append(out)
    return results


# -- checkpoints ------------------------------------------------------------

CHECKPOINT_MAGIC = "tqd-checkpoint v1"


def save_checkpoint(path: Path, model: Tracker) -> None:
    """Text manifest (config + tensor names/shapes), then little-endian float64 data."""
    tensors = [("buffer.det_refs", model.det_refs)] + [(n, p.value) for n, p in model.params.items()]
    lines = [CHECKPOINT_MAGIC]
    for k, v in vars(model.config).items():
        lines.append(f"config {k}={v}")
    for name, arr in tensors:
        lines.append(f"tensor {name} {arr.shape[0]} {arr.shape[1]}")
    lines.append("end")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    body = b"".join(np.ascontiguousarray(arr, dtype="<f8").tobytes() for _, arr in tensors)
    Path(path).write_bytes(header + body)


def load_checkpoint(path: Path) -> Tracker:
    data = Path(path).read_bytes()
    end = data.find(b"\nend\n")
    if not data.startswith(CHECKPOINT_MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a tqd checkpoint")
    header = data[: end].decode("utf-8").splitlines()[1:]
    body = memoryview(data)[end + len(b"\nend\n"):]
    fields = {f.name: f.type for f in TrackerConfig.__dataclass_fields__.values()}
    cfg_kw, shapes = {}, []
    for line in header:
        kind, rest = line.split(" ", 1)
        if kind == "config":
            key, value = rest.split("=", 1)
            typ = fields[key]
            cfg_kw[key] = value if typ == "str" else (int(value) if typ == "int" else float(value))
        elif kind == "tensor":
            name, r, c = rest.split()
            shapes.append((name, int(r), int(c)))
    model = Tracker(TrackerConfig(**cfg_kw))
    offset = 0
    for name, r, c in shapes:
        n = r * c * 8
        arr = np.frombuffer(body[offset : offset + n], dtype="<f8").astype(np.float64).reshape(r, c)
        offset += n
        if name == "buffer.det_refs":
            model.det_refs = arr
        else:
            model.params[name] = Parameter(name, arr)
    if offset != len(body):
        raise ValueError(f"{path}: trailing bytes after tensor data")
    return model
