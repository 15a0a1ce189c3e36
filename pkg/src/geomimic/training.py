"""Learning which feature association the demonstrator was controlling.

Every way of wiring the observed features into the chosen constraint type
becomes a candidate. Each candidate's geometric error trace gets a
demonstration-quality score (did the error decay, and smoothly), and the
scorer network is trained so that the soft selection over candidates
concentrates on high-quality ones, stays consistent across frames (score
change regularizer) and sharpens toward a single winner (selection
entropy-style regularizer).

Gradients of the full objective are assembled analytically: the softmax
and regularizer parts in closed form here, the network part through
``network.backward_batch``.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from . import network
from .geometry import (
    ERROR_DIM,
    ErrorSignal,
    GeometryError,
    ImagePoint,
    KernelKind,
    conic_through,
    l2l_error,
    line_through,
    p2c_error,
    p2l_error,
    p2p_error,
)
from .network import KernelGraph, NetParams, graph_from_entities
from .scene import DemoSequence, FeatureClass, FeatureObservation, IMAGE_SIZE

QUALITY_EPS = 1e-6


class TrainingError(ValueError):
    """Invalid training input."""


class TooFewFeaturesError(TrainingError):
    """Not enough features of the right classes to build any candidate."""


class NoVisibleCandidatesError(TrainingError):
    """Every candidate has an invisible member on this frame."""


@dataclass
class TrainConfig:
    """Objective weights and optimization settings."""

    alpha_gcr: float = 0.1
    alpha_rsw: float = 0.05
    lambda_dec: float = 1.0
    lambda_smooth: float = 1.0
    lr: float = 0.05
    epochs: int = 300
    seed: int = 0
    alpha_conf: float = 1.0
    hidden: int = 32
    rounds: int = 3

    def __post_init__(self) -> None:
        if self.alpha_conf <= 0:
            raise TrainingError("alpha_conf must be positive")
        if self.epochs < 1 or self.hidden < 1 or self.rounds < 0:
            raise TrainingError("epochs and hidden must be >= 1, rounds >= 0")
        if self.lr <= 0:
            raise TrainingError("lr must be positive")
        if min(self.alpha_gcr, self.alpha_rsw, self.lambda_dec, self.lambda_smooth) < 0:
            raise TrainingError("objective weights must be >= 0")

    def to_json_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(payload) - known
        if unknown:
            raise TrainingError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**payload)


@dataclass
class CandidateInstance:
    """One possible feature association, tracked across frames.

    entities: per-entity id tuples, e.g. ((5,), (1, 2)) for point 5
    against segment (1, 2). graphs/errors hold one entry per frame, None
    where any member feature is invisible.
    """

    kernel_kind: KernelKind
    entities: tuple[tuple[int, ...], ...]
    graphs: list[KernelGraph | None] = field(default_factory=list)
    errors: list[ErrorSignal | None] = field(default_factory=list)

    @property
    def feature_ids(self) -> tuple[int, ...]:
        return tuple(fid for ent in self.entities for fid in ent)

    @property
    def id_set(self) -> frozenset[int]:
        return frozenset(self.feature_ids)


def _group_entities(
    features: Sequence[FeatureObservation],
) -> tuple[list[tuple[int, ...]], list[tuple[int, ...]], list[tuple[int, ...]]]:
    """Split features into point, segment and conic entities.

    Segment endpoints pair up on consecutive ids and conic samples form
    runs of five consecutive ids, matching the generator's allocation.
    """
    points = sorted(o.id for o in features if o.feature_class is FeatureClass.POINT)
    endpoints = sorted(o.id for o in features if o.feature_class is FeatureClass.SEGMENT_ENDPOINT)
    samples = sorted(o.id for o in features if o.feature_class is FeatureClass.CONIC_SAMPLE)
    if len(endpoints) % 2:
        raise TrainingError("odd number of segment endpoints; cannot pair them")
    segments = []
    for i in range(0, len(endpoints), 2):
        a, b = endpoints[i], endpoints[i + 1]
        if b != a + 1:
            raise TrainingError(f"segment endpoints {a},{b} are not consecutive ids")
        segments.append((a, b))
    if len(samples) % 5:
        raise TrainingError("conic samples must come in groups of five")
    conics = []
    for i in range(0, len(samples), 5):
        run = tuple(samples[i : i + 5])
        if run[-1] != run[0] + 4:
            raise TrainingError(f"conic sample ids {run} are not consecutive")
        conics.append(run)
    return [(p,) for p in points], segments, conics


def build_candidates(
    features: Sequence[FeatureObservation], kind: KernelKind
) -> list[CandidateInstance]:
    """Enumerate all candidate associations available in a feature set.

    p2p pairs points, p2l crosses points with segments, l2l pairs
    segments, p2c crosses points with conic entities. Candidates are
    returned in a deterministic id order.
    """
    kind = KernelKind(kind)
    points, segments, conics = _group_entities(features)
    if kind is KernelKind.P2P:
        combos = [tuple(sorted(pair)) for pair in itertools.combinations(points, 2)]
    elif kind is KernelKind.P2L:
        combos = [(p, s) for p in points for s in segments]
    elif kind is KernelKind.L2L:
        combos = [tuple(sorted(pair)) for pair in itertools.combinations(segments, 2)]
    else:
        combos = [(p, c) for p in points for c in conics]
    if not combos:
        raise TooFewFeaturesError(f"no {kind.value} candidates can be built")
    return [CandidateInstance(kind, tuple(ent)) for ent in sorted(combos)]


def encode_node(obs: FeatureObservation, image_size: tuple[int, int] = IMAGE_SIZE) -> np.ndarray:
    """Node encoding: appearance descriptor plus normalized pixel coords."""
    w, h = image_size
    return np.concatenate([obs.descriptor, [obs.pixel.u / w, obs.pixel.v / h]])


def candidate_error(
    candidate: CandidateInstance,
    by_id: dict[int, FeatureObservation],
    frame_index: int = 0,
) -> ErrorSignal:
    """Geometric error of a candidate given one frame's observations.

    For l2l the first entity's endpoints are measured against the line
    through the second entity (entities are ordered by smallest id).
    """
    kind = candidate.kernel_kind
    ents = candidate.entities
    if kind is KernelKind.P2P:
        p1 = by_id[ents[0][0]].pixel
        p2 = by_id[ents[1][0]].pixel
        return p2p_error(p1, p2, frame_index)
    if kind is KernelKind.P2L:
        p = by_id[ents[0][0]].pixel
        line = line_through(by_id[ents[1][0]].pixel, by_id[ents[1][1]].pixel)
        return p2l_error(p, line, frame_index)
    if kind is KernelKind.L2L:
        seg = (by_id[ents[0][0]].pixel, by_id[ents[0][1]].pixel)
        line = line_through(by_id[ents[1][0]].pixel, by_id[ents[1][1]].pixel)
        return l2l_error(seg, line, frame_index)
    p = by_id[ents[0][0]].pixel
    conic = conic_through([by_id[fid].pixel for fid in ents[1]])
    return p2c_error(p, conic, frame_index)


def attach_frame(
    candidates: Sequence[CandidateInstance],
    frame: Sequence[FeatureObservation],
    frame_index: int,
    image_size: tuple[int, int] = IMAGE_SIZE,
) -> None:
    """Append one frame's graphs and errors to every candidate.

    A candidate is skipped (None entries) when any member is missing or
    invisible, or its geometry degenerates on this frame.
    """
    by_id = {o.id: o for o in frame if o.visible}
    for cand in candidates:
        if not all(fid in by_id for fid in cand.feature_ids):
            cand.graphs.append(None)
            cand.errors.append(None)
            continue
        try:
            err = candidate_error(cand, by_id, frame_index)
        except GeometryError:
            cand.graphs.append(None)
            cand.errors.append(None)
            continue
        entities = [
            np.stack([encode_node(by_id[fid], image_size) for fid in ent])
            for ent in cand.entities
        ]
        cand.graphs.append(graph_from_entities(cand.kernel_kind, entities))
        cand.errors.append(err)


def quality_score(
    errors: Sequence[ErrorSignal | None],
    lambda_dec: float = 1.0,
    lambda_smooth: float = 1.0,
) -> float:
    """How much an error trace looks like a converging control signal.

    Combines normalized first-to-last decrease with a penalty on squared
    frame-to-frame jumps; both are scale-normalized by the trace maximum.
    Frames where the candidate was invisible are skipped.
    """
    norms = np.array([e.norm() for e in errors if e is not None])
    if norms.size < 2:
        raise TrainingError("quality needs at least 2 usable frames")
    peak = float(norms.max())
    dec = (norms[0] - norms[-1]) / (peak + QUALITY_EPS)
    jumps = np.diff(norms)
    smooth = -float(np.mean(jumps**2)) / (peak + QUALITY_EPS) ** 2
    return float(lambda_dec * dec + lambda_smooth * smooth)


def select_out(b: np.ndarray, alpha_conf: float = 1.0) -> tuple[np.ndarray, int]:
    """Softmax selection over candidate scores.

    Returns the selection weights and the winner index (ties resolve to
    the lowest index). alpha_conf acts as a temperature: the
    demonstrator-confidence weight divides the scores.
    """
    b = np.asarray(b, dtype=float)
    if b.ndim != 1 or b.size == 0:
        raise TrainingError("select_out needs a non-empty 1-D score array")
    if alpha_conf <= 0:
        raise TrainingError("alpha_conf must be positive")
    scaled = b / alpha_conf
    shifted = scaled - scaled.max()
    expd = np.exp(shifted)
    g = expd / expd.sum()
    return g, int(np.argmax(b))


@dataclass
class _Pack:
    """Flattened (candidate, frame) instances for batched evaluation."""

    nodes: np.ndarray  # (B, n, F)
    edges: np.ndarray
    cand_index: np.ndarray  # (B,)
    frame_members: list[np.ndarray]  # per frame: batch rows visible there
    gcr_pairs: np.ndarray  # (P, 2) batch rows of consecutive usable frames
    quality: np.ndarray  # (m,)
    n_frames: int
    rounds: int


def _pack_candidates(
    candidates: Sequence[CandidateInstance], config: TrainConfig
) -> _Pack:
    if not candidates:
        raise TrainingError("no candidates to train on")
    n_frames = len(candidates[0].graphs)
    if any(len(c.graphs) != n_frames for c in candidates):
        raise TrainingError("candidates disagree on frame count")
    if n_frames == 0:
        raise TrainingError("candidates carry no frames; call attach_frame first")
    quality = np.array(
        [quality_score(c.errors, config.lambda_dec, config.lambda_smooth) for c in candidates]
    )
    rows: list[np.ndarray] = []
    cand_index: list[int] = []
    frame_members: list[list[int]] = [[] for _ in range(n_frames)]
    gcr_pairs: list[tuple[int, int]] = []
    edges = None
    for j, cand in enumerate(candidates):
        prev_row = None
        for t, graph in enumerate(cand.graphs):
            if graph is None:
                continue
            if edges is None:
                edges = graph.edges
            row = len(rows)
            rows.append(graph.nodes)
            cand_index.append(j)
            frame_members[t].append(row)
            if prev_row is not None:
                gcr_pairs.append((prev_row, row))
            prev_row = row
    if not rows:
        raise NoVisibleCandidatesError("no candidate is visible on any frame")
    return _Pack(
        nodes=np.stack(rows),
        edges=edges,
        cand_index=np.array(cand_index, dtype=int),
        frame_members=[np.array(m, dtype=int) for m in frame_members],
        gcr_pairs=np.array(gcr_pairs, dtype=int).reshape(-1, 2),
        quality=quality,
        n_frames=n_frames,
        rounds=config.rounds,
    )


@dataclass
class LossBreakdown:
    value: float
    expected_quality: float
    gcr_term: float
    rsw_term: float


def _loss_packed(
    pack: _Pack, params: NetParams, config: TrainConfig
) -> tuple[LossBreakdown, NetParams]:
    scores, cache = network.forward_batch(pack.nodes, pack.edges, params, pack.rounds)
    d_scores = np.zeros_like(scores)
    alpha = config.alpha_conf

    expected_quality = 0.0
    rsw = 0.0
    for members in pack.frame_members:
        if members.size == 0:
            continue
        g, _ = select_out(scores[members], alpha)
        q = pack.quality[pack.cand_index[members]]
        gq = float(g @ q)
        expected_quality += gq
        # d(-sum g q)/db_k = -(g_k (q_k - g.q)) / alpha
        d_scores[members] += -(g * (q - gq)) / alpha
        sum_g2 = float(g @ g)
        rsw += 1.0 - sum_g2
        # d(1 - sum g^2)/db_k = -(2/alpha) g_k (g_k - sum g^2)
        d_scores[members] += -config.alpha_rsw * (2.0 / alpha) * g * (g - sum_g2)

    gcr = 0.0
    if pack.gcr_pairs.size:
        prev_rows = pack.gcr_pairs[:, 0]
        next_rows = pack.gcr_pairs[:, 1]
        diffs = scores[next_rows] - scores[prev_rows]
        gcr = float(diffs @ diffs)
        np.add.at(d_scores, next_rows, 2.0 * config.alpha_gcr * diffs)
        np.add.at(d_scores, prev_rows, -2.0 * config.alpha_gcr * diffs)

    value = -expected_quality + config.alpha_gcr * gcr + config.alpha_rsw * rsw
    grads = network.backward_batch(cache, params, d_scores)
    return LossBreakdown(float(value), expected_quality, gcr, rsw), grads


def loss(
    candidates: Sequence[CandidateInstance], params: NetParams, config: TrainConfig
) -> tuple[LossBreakdown, NetParams]:
    """Full objective and its parameter gradients.

    The value is minus the per-frame expected candidate quality under the
    soft selection, plus the score-change and selection-sharpness
    regularizers weighted by alpha_gcr and alpha_rsw.
    """
    return _loss_packed(_pack_candidates(candidates, config), params, config)


@dataclass
class TrainedKernel:
    """A trained scorer plus everything needed to reuse it."""

    kernel_kind: KernelKind
    params: NetParams
    config: TrainConfig
    loss_trace: np.ndarray  # columns: epoch, loss, gcr_term, rsw_term, expected_quality
    image_size: tuple[int, int] = IMAGE_SIZE

    def to_json_dict(self) -> dict:
        return {
            "kernel_kind": self.kernel_kind.value,
            "params": self.params.to_json_dict(),
            "config": self.config.to_json_dict(),
            "image_size": list(self.image_size),
            "loss_trace": [[float(x) for x in row] for row in self.loss_trace],
        }

    @classmethod
    def from_json_dict(cls, payload: dict) -> "TrainedKernel":
        return cls(
            kernel_kind=KernelKind(payload["kernel_kind"]),
            params=NetParams.from_json_dict(payload["params"]),
            config=TrainConfig.from_json_dict(payload["config"]),
            loss_trace=np.array(payload["loss_trace"], dtype=float).reshape(-1, 5),
            image_size=tuple(payload.get("image_size", IMAGE_SIZE)),
        )


def save_trained(trained: TrainedKernel, path: str) -> None:
    with open(path, "w") as fh:
        json.dump(trained.to_json_dict(), fh)


def load_trained(path: str) -> TrainedKernel:
    with open(path) as fh:
        return TrainedKernel.from_json_dict(json.load(fh))


def write_loss_csv(trained: TrainedKernel, path: str) -> None:
    with open(path, "w") as fh:
        fh.write("# config: " + json.dumps(trained.config.to_json_dict()) + "\n")
        fh.write("epoch,loss,gcr_term,rsw_term,expected_quality\n")
        for row in trained.loss_trace:
            epoch = int(row[0])
            cells = ",".join(repr(float(v)) for v in row[1:])
            fh.write(f"{epoch},{cells}\n")


def prepare_candidates(
    demo: DemoSequence, kind: KernelKind, image_size: tuple[int, int] | None = None
) -> list[CandidateInstance]:
    """Candidates with graphs and errors attached for every demo frame."""
    size = image_size or (demo.config.image_size if demo.config else IMAGE_SIZE)
    candidates = build_candidates(demo.frames[0], kind)
    for t, frame in enumerate(demo.frames):
        attach_frame(candidates, frame, t, size)
    return candidates


# Update steps are clipped to this global gradient norm. The objective
# sums over frames, so raw gradients scale with demo length and a fixed
# learning rate can catapult the params out of a good basin.
GRAD_CLIP_NORM = 5.0


def train(demo: DemoSequence, kind: KernelKind, config: TrainConfig) -> TrainedKernel:
    """Fit the scorer on one demonstration by plain gradient descent.

    Gradients are norm-clipped and the returned params are the
    lowest-loss iterate seen along the trace, not the last one.
    Deterministic for a fixed config: init, packing order and the
    single-threaded numpy math are all seed-driven.
    """
    kind = KernelKind(kind)
    size = demo.config.image_size if demo.config else IMAGE_SIZE
    candidates = prepare_candidates(demo, kind, size)
    pack = _pack_candidates(candidates, config)
    input_dim = pack.nodes.shape[2]
    rng = np.random.default_rng([config.seed, 51])
    params = NetParams.init_random(config.hidden, input_dim, rng)

    trace = np.empty((config.epochs, 5))
    best_loss = math.inf
    best_params = params.copy()
    for epoch in range(config.epochs):
        breakdown, grads = _loss_packed(pack, params, config)
        if breakdown.value < best_loss:
            best_loss = breakdown.value
            best_params = params.copy()
        gnorm = float(np.linalg.norm(grads.flat()))
        scale = -config.lr
        if gnorm > GRAD_CLIP_NORM:
            scale *= GRAD_CLIP_NORM / gnorm
        params.add_scaled(grads, scale)
        trace[epoch] = (
            epoch,
            breakdown.value,
            breakdown.gcr_term,
            breakdown.rsw_term,
            breakdown.expected_quality,
        )
    if not np.isfinite(trace[:, 1]).all():
        raise TrainingError("training diverged: non-finite loss")
    return TrainedKernel(kind, best_params, config, trace, size)


@dataclass
class InferenceResult:
    winner_ids: frozenset[int]
    winner_entities: tuple[tuple[int, ...], ...]
    weights: np.ndarray
    candidates: list[CandidateInstance]
    error: ErrorSignal
    low_confidence: bool


def infer(
    features: Sequence[FeatureObservation],
    trained: TrainedKernel,
    frame_index: int = 0,
) -> InferenceResult:
    """Select the most task-relevant association on a single frame.

    Only visible features take part. The result is flagged low-confidence
    when the winning weight stays below 2/m (barely above the uniform
    1/m), e.g. while the demonstrated features are occluded.
    """
    visible = [o for o in features if o.visible]
    if not visible:
        raise NoVisibleCandidatesError("no visible features on this frame")
    try:
        candidates = build_candidates(visible, trained.kernel_kind)
    except (TooFewFeaturesError, TrainingError) as exc:
        raise NoVisibleCandidatesError(str(exc)) from exc
    attach_frame(candidates, visible, frame_index, trained.image_size)
    usable = [c for c in candidates if c.graphs[0] is not None]
    if not usable:
        raise NoVisibleCandidatesError("all candidates degenerate on this frame")
    nodes = np.stack([c.graphs[0].nodes for c in usable])
    scores, _ = network.forward_batch(
        nodes, usable[0].graphs[0].edges, trained.params, trained.config.rounds
    )
    g, winner = select_out(scores, trained.config.alpha_conf)
    cand = usable[winner]
    return InferenceResult(
        winner_ids=cand.id_set,
        winner_entities=cand.entities,
        weights=g,
        candidates=usable,
        error=cand.errors[0],
        low_confidence=float(g[winner]) < 2.0 / len(usable),
    )
