"""Instance branch: box partition and embedding, spatiotemporal sampling of
image features, sparse temporal fusion, and iterative box refinement."""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass, replace

import numpy as np

from .adaptor import SparseQuerySet
from .errors import DimensionMismatch, LambdaOutOfRange, NoHistory
from .geometry import (
    CameraModel,
    EgoPose,
    compensate_and_warp,
    project_points,
    temporal_transform,
)
from .grid_ops import (
    AttentionParams,
    FeatureGrid,
    LinearMap,
    SamplingPattern,
    deformable_aggregate,
    mlp_apply,
    self_attention,
)
from .proposals import (
    BOX_DIM,
    ScoredBoxes,
    normalize_orientation,
    ranking_order,
    sigmoid,
)

POS, SCA, ORI, VEL = slice(0, 3), slice(3, 6), slice(6, 8), slice(8, 10)


@dataclass(eq=False)
class BoxPartition:
    position: np.ndarray  # (N, 3)
    scale: np.ndarray  # (N, 3)
    velocity: np.ndarray  # (N, 2)
    orientation: np.ndarray  # (N, 2) sin, cos
    degenerate: np.ndarray = None  # (N,) rows whose orientation was (0, 0)

    def assemble(self) -> np.ndarray:
        out = np.empty((len(self.position), BOX_DIM))
        out[:, POS] = self.position
        out[:, SCA] = self.scale
        out[:, ORI] = self.orientation
        out[:, VEL] = self.velocity
        return out


def partition_box(p_box) -> BoxPartition:
    boxes = np.asarray(p_box, dtype=np.float64)
    if boxes.ndim != 2 or boxes.shape[1] != BOX_DIM:
        raise DimensionMismatch(f"boxes must be N x {BOX_DIM}, got {boxes.shape}")
    ori, degenerate = normalize_orientation(boxes[:, ORI])
    return BoxPartition(
        boxes[:, POS].copy(), boxes[:, SCA].copy(), boxes[:, VEL].copy(), ori, degenerate
    )


@dataclass(eq=False)
class BoxEmbedParams:
    position: LinearMap  # 3 -> C
    scale: LinearMap  # 3 -> C
    velocity: LinearMap  # 2 -> C
    orientation: LinearMap  # 2 -> C
    glob: LinearMap  # C -> C


def embed_box(parts: BoxPartition, params: BoxEmbedParams) -> np.ndarray:
    """Sum of four local embeddings followed by a global projection."""
    local = (
        params.position(parts.position)
        + params.scale(parts.scale)
        + params.velocity(parts.velocity)
        + params.orientation(parts.orientation)
    )
    return params.glob(local)


@dataclass(eq=False)
class SamplingHeads:
    """Per-frame offset/weight heads plus the inner/outer value maps.

    ``offset`` maps ``C -> frames*K*2`` pixel offsets, ``weight`` maps
    ``C -> frames*K`` logits (softmax over K within each frame).
    """

    offset: LinearMap
    weight: LinearMap
    inner: LinearMap
    outer: LinearMap


@dataclass(eq=False)
class SampledFeatureStack:
    per_frame: np.ndarray  # (T+1, N, C)
    validity: np.ndarray  # (T+1, N, V)

    @property
    def frames(self) -> int:
        return self.per_frame.shape[0] - 1


def spatiotemporal_sample(
    features: Sequence[Sequence[FeatureGrid]],
    parts: BoxPartition,
    rig: Sequence[CameraModel],
    poses: Sequence[EgoPose],
    heads: SamplingHeads,
    queries: np.ndarray,
    t_chi: int = 3,
    tau: float = 0.5,
) -> SampledFeatureStack:
    """Read image features for every query at frames ``0..t_chi``.

    ``features[t][v]`` is the grid of view ``v`` at frame ``t``. Query centers
    are rewound along their velocity, warped into frame ``t`` and projected
    into each camera; views where the center is behind the camera or outside
    the image are skipped and the remaining views are averaged.
    """
    if t_chi < 0 or t_chi >= len(features) or t_chi >= len(poses):
        raise NoHistory(f"t_chi={t_chi} needs {t_chi + 1} frames, have {min(len(features), len(poses))}")
    n = len(parts.position)
    queries = np.asarray(queries, dtype=np.float64)
    frames = t_chi + 1
    k_total = heads.weight.out_dim
    if k_total % frames:
        raise DimensionMismatch(f"{heads.weight.name}: out_dim {k_total} not divisible by {frames} frames")
    k = k_total // frames
    if heads.offset.out_dim != 2 * k_total:
        raise DimensionMismatch(f"{heads.offset.name}: out_dim must be {2 * k_total}")
    offsets = heads.offset(queries).reshape(n, frames, k, 2)
    logits = heads.weight(queries).reshape(n, frames, k)
    c_out = heads.outer.out_dim
    per_frame = np.zeros((frames, n, c_out))
    validity = np.zeros((frames, n, len(rig)), dtype=bool)
    for t in range(frames):
        m_t = temporal_transform(poses[0], poses[t])
        pts = compensate_and_warp(parts.position, parts.velocity, t, tau, m_t)
        acc = np.zeros((n, c_out))
        for v, cam in enumerate(rig):
            grid = features[t][v]
            uv, _, ok = project_points(cam, pts)
            ok &= (uv[:, 0] >= 0) & (uv[:, 0] <= grid.width - 1) & (uv[:, 1] >= 0) & (uv[:, 1] <= grid.height - 1)
            validity[t, :, v] = ok
            idx = np.flatnonzero(ok)
            if idx.size == 0:
                continue
            pattern = SamplingPattern.from_logits(uv[idx], offsets[idx, t], logits[idx, t])
            acc[idx] += deformable_aggregate(grid, pattern, heads.inner, heads.outer)
        nvalid = validity[t].sum(axis=1)
        seen = nvalid > 0
        per_frame[t, seen] = acc[seen] / nvalid[seen, None]
    return SampledFeatureStack(per_frame, validity)


def temporal_fuse(stack: SampledFeatureStack | np.ndarray, lam: float, encoder) -> np.ndarray:
    """Fuse frames from oldest to newest.

    For ``t = T .. 1``: ``F[t-1] <- encoder(concat(F[t-1], lam * F[t]))``.
    ``encoder`` is an MLP layer list mapping ``2C -> C``.
    """
    if not 0.0 < lam < 1.0:
        raise LambdaOutOfRange(f"lambda must lie in (0, 1), got {lam}")
    per_frame = stack.per_frame if isinstance(stack, SampledFeatureStack) else np.asarray(stack, dtype=np.float64)
    fused = per_frame[-1].copy()
    for t in range(per_frame.shape[0] - 1, 0, -1):
        fused = mlp_apply(encoder, np.concatenate([per_frame[t - 1], lam * fused], axis=-1))
    return fused


@dataclass(eq=False)
class RefinementState:
    queries: SparseQuerySet
    layer: int = 0
    eta: float = 3.0
    lam: float = 0.6
    box_offsets: np.ndarray = None

    def __post_init__(self):
        if not self.eta > 0:
            raise ValueError("eta must be positive")
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


def refine_layer(state: RefinementState, embedding: np.ndarray, f_delta: np.ndarray, reg_head) -> RefinementState:
    """Residual feature update and box-offset regression.

    ``F <- F + eta * F_delta``; ``delta = reg(F + G)``; ``P_box <- P_box + delta``
    with orientation renormalized and scales clipped at zero.
    """
    q = state.queries
    f_delta = np.asarray(f_delta, dtype=np.float64)
    if f_delta.shape != q.features.shape or np.shape(embedding) != q.features.shape:
        raise DimensionMismatch("F_delta and embedding must match the query features (N x C)")
    feats = q.features + state.eta * f_delta
    delta = mlp_apply(reg_head, feats + embedding)
    if delta.shape != q.boxes.shape:
        raise DimensionMismatch(f"regression head emits {delta.shape[-1]} values, expected {BOX_DIM}")
    boxes = q.boxes + delta
    boxes[:, ORI], _ = normalize_orientation(boxes[:, ORI])
    boxes[:, SCA] = np.maximum(boxes[:, SCA], 0.0)
    new_q = replace(q, features=feats, boxes=boxes)
    return replace(state, queries=new_q, layer=state.layer + 1, box_offsets=delta)


@dataclass(eq=False)
class LayerParams:
    attn: AttentionParams
    embed: BoxEmbedParams
    sampling: SamplingHeads
    enc: list  # [(LinearMap, act), ...] 2C -> C
    reg: list  # [(LinearMap, act), ...] C -> 10
    cls: LinearMap  # C -> 1


@dataclass(eq=False)
class Detections:
    boxes: np.ndarray  # (M, 10)
    scores: np.ndarray  # (M,)
    provenance: np.ndarray  # (M,)
    query_index: np.ndarray  # (M,)

    def __len__(self):
        return len(self.scores)


def decode(
    queries: SparseQuerySet,
    features: Sequence[Sequence[FeatureGrid]],
    rig: Sequence[CameraModel],
    poses: Sequence[EgoPose],
    layers: Sequence[LayerParams],
    t_chi: int = 3,
    tau: float = 0.5,
    eta: float = 3.0,
    lam: float = 0.6,
    output_count: int = 300,
    timings: dict | None = None,
) -> Detections:
    """Run the refinement layers and score the final queries."""
    import time

    if len(layers) < 1:
        raise ValueError("need at least one decoder layer")
    state = RefinementState(queries, 0, eta, lam)
    clock = timings if timings is not None else {}
    for params in layers:
        q = state.queries
        parts = partition_box(q.boxes)
        g = embed_box(parts, params.embed)
        attended = self_attention(q.features, g, params.attn)
        state = replace(state, queries=replace(q, features=attended))
        t0 = time.perf_counter()
        stack = spatiotemporal_sample(features, parts, rig, poses, params.sampling, attended, t_chi, tau)
        t1 = time.perf_counter()
        f_delta = temporal_fuse(stack, lam, params.enc)
        t2 = time.perf_counter()
        clock["sampling"] = clock.get("sampling", 0.0) + (t1 - t0)
        clock["fusion"] = clock.get("fusion", 0.0) + (t2 - t1)
        state = refine_layer(state, g, f_delta, params.reg)
    final = state.queries
    scores = sigmoid(layers[-1].cls(final.features)[:, 0])
    order = ranking_order(ScoredBoxes(final.boxes, scores, np.zeros(len(scores), dtype=np.int64)))[:output_count]
    return Detections(final.boxes[order], scores[order], final.provenance[order], order)
