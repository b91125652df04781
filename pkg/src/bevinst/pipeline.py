"""End-to-end orchestration: BEV branch -> proposals -> adaptor -> instance branch.

Also builds the *oracle* parameter set used for synthetic checks: heads that
copy the simulator's signature channels instead of trained weights.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .adaptor import (
    PROPOSAL,
    ConverterParams,
    adaptive_resample,
    compose_queries,
    convert_features,
    make_query_state,
)
from .branch import decode
from .config import RunConfig
from .errors import NoHistory
from .geometry import temporal_transform
from .lss import (
    align_bev,
    bev_temporal_encode,
    lift_frustum,
    predict_depth_distribution,
    voxel_pool,
)
from .params import ParamRegistry
from .proposals import (
    ProposalSet,
    nms_filter,
    ranking_order,
    score_and_regress,
    topk_pad,
)
from .scene import (
    DEPTH_CHANNEL,
    OBJECTNESS_CHANNEL,
    SMALL_CHANNEL,
    SyntheticScene,
    jitter_rig,
)

STAGES = ("proposals", "full")
STAGE_KEYS = ("lift", "pool", "adaptor", "sampling", "fusion")


@dataclass(eq=False)
class PipelineResult:
    stage: str
    boxes: np.ndarray
    scores: np.ndarray
    provenance: np.ndarray
    timings: dict[str, float] = field(default_factory=dict)
    frustum_points: int = 0

    def __len__(self):
        return len(self.scores)


def bev_branch(features, rig, poses, config: RunConfig, reg: ParamRegistry, timings: dict | None = None):
    """Lift and pool every frame of the BEV history, align to the current frame and encode."""
    timings = timings if timings is not None else {}
    frames = config.history + 1
    if len(features) < frames or len(poses) < frames:
        raise NoHistory(f"BEV history needs {frames} frames, scene has {min(len(features), len(poses))}")
    head = reg.linear("bev.depth")
    bins = config.depth_bins.values()
    grids = []
    npoints = 0
    for t in range(frames):
        acc = None
        for cam, feat in zip(rig, features[t]):
            t0 = time.perf_counter()
            depth = predict_depth_distribution(feat, head, bins)
            cloud = lift_frustum(feat, depth, cam)
            t1 = time.perf_counter()
            pooled = voxel_pool(cloud, config.bev, frame=t)
            t2 = time.perf_counter()
            timings["lift"] = timings.get("lift", 0.0) + (t1 - t0)
            timings["pool"] = timings.get("pool", 0.0) + (t2 - t1)
            npoints += len(cloud.weights)
            acc = pooled if acc is None else type(pooled)(pooled.spec, acc.data + pooled.data, t)
        if t > 0:
            acc = align_bev(acc, temporal_transform(poses[0], poses[t]))
        grids.append(acc)
    bev = bev_temporal_encode(grids, reg.linear("bev.temporal"))
    return bev, npoints


def proposal_stage(bev, config: RunConfig, reg: ParamRegistry) -> ProposalSet:
    cands = score_and_regress(bev, reg.linear("proposal.head"))
    kept = nms_filter(cands, config.nms_threshold, config.nms_radius)
    return topk_pad(kept, config.n_beta, config.seeds.padding, config.bev)


def adaptor_stage(bev, proposals: ProposalSet, config: RunConfig, reg: ParamRegistry):
    state = make_query_state(bev, proposals.boxes[:, :3])
    converted = convert_features(bev, reg.converter("adaptor.converter"))
    adapted = adaptive_resample(
        converted,
        state,
        reg.linear("adaptor.offset"),
        reg.linear("adaptor.weight"),
        reg.linear("adaptor.inner"),
        reg.linear("adaptor.outer"),
    )
    potential = reg.potential("adaptor.potential") if config.n_gamma > 0 else None
    if potential is not None and len(potential.features) != config.n_gamma:
        potential.features = potential.features[: config.n_gamma]
        potential.reference_boxes = potential.reference_boxes[: config.n_gamma]
    return compose_queries(adapted, proposals, potential)


def run_pipeline(
    scene: SyntheticScene,
    features,
    reg: ParamRegistry,
    config: RunConfig,
    stage: str = "full",
) -> PipelineResult:
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    rig = jitter_rig(scene.rig, config.extrinsics_jitter, config.seeds.jitter)
    timings = {key: 0.0 for key in STAGE_KEYS}
    bev, npoints = bev_branch(features, rig, scene.poses, config, reg, timings)
    proposals = proposal_stage(bev, config, reg)
    if stage == "proposals":
        real = np.flatnonzero(~proposals.padding_mask)
        order = real[
            ranking_order(_as_scored(proposals.boxes[real], proposals.scores[real]))
        ][: config.output_count]
        return PipelineResult(
            "proposals", proposals.boxes[order], proposals.scores[order],
            np.array([PROPOSAL] * len(order)), timings, npoints,
        )
    t0 = time.perf_counter()
    queries = adaptor_stage(bev, proposals, config, reg)
    timings["adaptor"] += time.perf_counter() - t0
    layers = [reg.layer(i) for i in range(config.layers)]
    dets = decode(
        queries, features, rig, scene.poses, layers,
        t_chi=config.t_chi, tau=scene.tau, eta=config.eta, lam=config.lam,
        output_count=config.output_count, timings=timings,
    )
    return PipelineResult("full", dets.boxes, dets.scores, dets.provenance, timings, npoints)


def _as_scored(boxes, scores):
    from .proposals import ScoredBoxes

    return ScoredBoxes(boxes, scores, np.zeros(len(scores), dtype=np.int64))


# --- detection JSON -----------------------------------------------------------


def detections_to_dict(result: PipelineResult, meta: dict | None = None) -> dict:
    boxes = []
    for b, s, p in zip(result.boxes, result.scores, result.provenance):
        boxes.append(
            {
                "xyz": [float(v) for v in b[0:3]],
                "wlh": [float(v) for v in b[3:6]],
                "yaw_sincos": [float(b[6]), float(b[7])],
                "vxy": [float(b[8]), float(b[9])],
                "score": float(s),
                "provenance": str(p),
            }
        )
    info = {"stage": result.stage, "count": len(boxes)}
    info.update(meta or {})
    return {"boxes": boxes, "meta": info}


def dumps_detections(result: PipelineResult, meta: dict | None = None) -> str:
    return json.dumps(detections_to_dict(result, meta), indent=1, sort_keys=True) + "\n"


def detections_from_dict(data: dict):
    """Return ``(boxes (M, 10), scores (M,), provenance list)``."""
    from .errors import ParseError

    try:
        entries = data["boxes"]
        boxes = np.array(
            [e["xyz"] + e["wlh"] + e["yaw_sincos"] + e["vxy"] for e in entries], dtype=np.float64
        ).reshape(-1, 10)
        scores = np.array([e["score"] for e in entries], dtype=np.float64)
        prov = [e.get("provenance", PROPOSAL) for e in entries]
    except (KeyError, TypeError, ValueError) as exc:
        raise ParseError(f"malformed detection file: {exc}") from None
    return boxes, scores, prov


# --- oracle parameters ------------------------------------------------------------

# Query-feature layout used by the oracle instance branch.
Q_BEV = (0, 1)  # BEV signature copied in by the adaptor
Q_EVIDENCE = 2  # image signature evidence, lambda-weighted over frames
Q_MASK = 3  # silhouette mask at frame 0
Q_POSITION = (4, 5, 6)
Q_VELOCITY = (7, 8)
Q_APPEARANCE = (9, 10, 11)
Q_SUPPRESS = 12  # attention read-out: strongest priority among same-identity queries
Q_PRIORITY = 13  # tie-break priority carried by potential queries
Q_FINAL_EVIDENCE = 14  # evidence read by the last layer, after suppression
ORACLE_MIN_CHANNELS = 15
ENC_GAIN = 100.0
GATE_GAIN = 200.0


def oracle_registry(
    config: RunConfig,
    depth_sharpness: float = 1.0,
    proposal_gain: float = 1.0,
    proposal_bias: float = -3.0,
    cls_gain: float = 8.0,
    cls_bias: float = -4.0,
    look_away_gain: float = 1.0e4,
    identity_sharpness: float = 4.0e7,
    priority_sharpness: float = 2.0e4,
) -> ParamRegistry:
    """Hand-set parameters for the synthetic scenes of :mod:`bevinst.scene`.

    They play the role of trained weights and exercise every stage:

    * depth head: logits ``s * g * (bin * z - bin**2 / 2)`` from the
      objectness ``g`` and objectness-times-depth channels, a Gaussian in depth
      centred on the rendered camera depth;
    * BEV temporal reduction: current grid plus the mean of the aligned history;
    * proposal head: score logit ``gain * (regular + small) + bias`` with a
      fixed default box;
    * adaptor: identity converter, zero offsets, BEV signatures copied into
      the query features;
    * instance branch, per layer: sampling heads that copy the image channels
      (signatures, silhouette mask, position/velocity read-outs, appearance)
      into the query layout above; a temporal encoder that accumulates
      signature evidence over frames and keeps the frame-0 read-outs; a box
      regressor that, where the mask is fully on, moves the box onto the
      read-out position/velocity (``GeLU(d) - GeLU(-d) = d`` with a gate that
      shuts both units off elsewhere);
    * last layer: self-attention groups queries by appearance and reports the
      strongest priority in each group; every query whose own priority differs
      from that shifts its sampling points away from its box ("looks away"),
      so only one query per object reads signature evidence, and the
      classifier scores that final evidence.

    Requires ``channels >= 15`` and at least 4 channels per attention head.
    """
    from .adaptor import PotentialQueries
    from .params import init_params
    from .scene import (
        APPEARANCE_CHANNELS,
        MASK_CHANNEL,
        POSITION_CHANNELS,
        REGRESSION_OFFSETS,
        REGULAR_CHANNEL,
        RESERVED_CHANNELS,
        VELOCITY_CHANNELS,
    )

    c = config.channels
    if c < max(ORACLE_MIN_CHANNELS, RESERVED_CHANNELS):
        raise ValueError(f"oracle parameters need at least {max(ORACLE_MIN_CHANNELS, RESERVED_CHANNELS)} channels")
    if c // config.heads < 4:
        raise ValueError("oracle parameters need at least 4 channels per attention head")
    reg = init_params(config)
    bins = config.depth_bins.values()
    w = np.zeros((len(bins), c))
    w[:, DEPTH_CHANNEL] = depth_sharpness * bins
    w[:, OBJECTNESS_CHANNEL] = -depth_sharpness * bins**2 / 2.0
    reg.set_linear("bev.depth", w, np.zeros(len(bins)))

    frames = config.history + 1
    w = np.zeros((c, frames * c))
    for t in range(1, frames):
        w[:, t * c : (t + 1) * c] = np.eye(c) / (frames - 1)
    reg.set_linear("bev.temporal", w, np.zeros(c))

    w = np.zeros((11, c))
    w[0, REGULAR_CHANNEL] = proposal_gain
    w[0, SMALL_CHANNEL] = proposal_gain
    b = np.zeros(11)
    b[0] = proposal_bias
    b[3] = 0.8  # z
    b[4:7] = (1.8, 4.0, 1.6)  # w, l, h
    b[8] = 1.0  # cos(yaw)
    reg.set_linear("proposal.head", w, b)

    k = config.k
    reg.set_linear("adaptor.offset", np.zeros((2 * k, c)), np.zeros(2 * k))
    reg.set_linear("adaptor.weight", np.zeros((k, c)), np.zeros(k))
    inner = np.zeros((c, c))
    inner[list(Q_BEV), [REGULAR_CHANNEL, SMALL_CHANNEL]] = 1.0
    reg.set_linear("adaptor.inner", inner, np.zeros(c))
    reg.set_linear("adaptor.outer", np.eye(c), np.zeros(c))
    reg.set_converter("adaptor.converter", ConverterParams.identity(c))
    pot = PotentialQueries.initialize(config.n_gamma, c, config.bev, seed=config.seeds.potential)
    pot.features = np.zeros_like(pot.features)
    # distinct priorities below any proposal's BEV signature, highest first
    pot.features[:, Q_PRIORITY] = 0.5 * (1.0 - np.arange(config.n_gamma) / max(config.n_gamma, 1))
    reg.set_potential("adaptor.potential", pot)

    nf = config.t_chi + 1
    eta, layers = config.eta, config.layers
    pos_off = REGRESSION_OFFSETS["position"]
    vel_off = REGRESSION_OFFSETS["velocity"]
    # (query channel, image channel, box column, offset)
    readouts = [(Q_POSITION[i], POSITION_CHANNELS[i], i, pos_off[i]) for i in range(3)] + [
        (Q_VELOCITY[i], VELOCITY_CHANNELS[i], 8 + i, vel_off[i]) for i in range(2)
    ]

    inner = np.zeros((c, c))
    inner[Q_EVIDENCE, [REGULAR_CHANNEL, SMALL_CHANNEL]] = 1.0
    inner[Q_MASK, MASK_CHANNEL] = 1.0
    for qc, ic, _, _ in readouts:
        inner[qc, ic] = 1.0
    inner[list(Q_APPEARANCE), list(APPEARANCE_CHANNELS)] = 1.0

    # encoder: hidden 0 = evidence of both halves, 1..6 = frame-0 mask/read-outs,
    # 7..12 = +/- appearance (GeLU(x) - GeLU(-x) = x keeps the sign)
    keep = [Q_MASK] + [r[0] for r in readouts]
    e1 = np.zeros((c, 2 * c))
    e1[0, Q_EVIDENCE] = e1[0, c + Q_EVIDENCE] = ENC_GAIN
    for h, qc in enumerate(keep, start=1):
        e1[h, qc] = ENC_GAIN
    for i, qc in enumerate(Q_APPEARANCE):
        e1[7 + i, qc] = ENC_GAIN
        e1[10 + i, qc] = -ENC_GAIN
    e2 = np.eye(c)
    e3 = np.zeros((c, c))
    e3[Q_EVIDENCE, 0] = 1.0 / ENC_GAIN
    for h, qc in enumerate(keep, start=1):
        e3[qc, h] = 1.0 / ENC_GAIN
    for i, qc in enumerate(Q_APPEARANCE):
        e3[qc, 7 + i] = 1.0 / ENC_GAIN
        e3[qc, 10 + i] = -1.0 / ENC_GAIN

    evidence_scale = 1.0 / (layers * eta * sum(config.lam**t for t in range(nf)))
    zc = np.zeros(c)
    for i in range(layers):
        p = f"branch.layer{i}"
        acc = (i + 1) * eta  # read-outs accumulated in F after this layer's update
        last = i == layers - 1 and i > 0
        mats = {f"w{m}": np.zeros((c, c)) for m in "qkvo"}
        mats.update({f"b{m}": np.zeros(c) for m in "qkvo"})
        if last:  # suppression attention
            seen = i * eta  # accumulation before the last layer's sampling
            for j, qc in enumerate(Q_APPEARANCE):
                mats["wq"][j, qc] = identity_sharpness / seen
                mats["wk"][j, qc] = 1.0 / seen
            mats["bq"][3] = 1.0
            for qc in (*Q_BEV, Q_PRIORITY):
                mats["wk"][3, qc] = priority_sharpness
                mats["wv"][0, qc] = 1.0
            mats["wo"][Q_SUPPRESS, 0] = 1.0
        reg.set_attention(f"{p}.attn", config.heads, **mats)

        pos = np.zeros((c, 3))
        vel = np.zeros((c, 2))
        for qc, _, col, _ in readouts:
            if col < 3:
                pos[qc, col] = -acc
            else:
                vel[qc, col - 8] = -acc
        reg.set_embed(f"{p}.embed", pos, np.zeros((c, 3)), vel, np.zeros((c, 2)), np.eye(c))
        offset = np.zeros((nf * k * 2, c))
        if last:
            # horizontal pixel offset proportional to (group best priority - own priority)
            offset[0::2, Q_SUPPRESS] = look_away_gain
            offset[0::2, [*Q_BEV, Q_PRIORITY]] = -look_away_gain
        reg.set_linear(f"{p}.offset", offset, np.zeros(nf * k * 2))
        reg.set_linear(f"{p}.weight", np.zeros((nf * k, c)), np.zeros(nf * k))
        layer_inner = inner.copy()
        layer_enc1 = e1.copy()
        layer_enc3 = e3.copy()
        if last:
            layer_inner[[Q_EVIDENCE, Q_FINAL_EVIDENCE]] = layer_inner[[Q_FINAL_EVIDENCE, Q_EVIDENCE]]
            layer_enc1[0, [Q_EVIDENCE, c + Q_EVIDENCE, Q_FINAL_EVIDENCE, c + Q_FINAL_EVIDENCE]] = (0, 0, ENC_GAIN, ENC_GAIN)
            layer_enc3[[Q_EVIDENCE, Q_FINAL_EVIDENCE]] = layer_enc3[[Q_FINAL_EVIDENCE, Q_EVIDENCE]]
        reg.set_linear(f"{p}.inner", layer_inner, zc)
        reg.set_linear(f"{p}.outer", np.eye(c), zc)
        reg.set_mlp(f"{p}.enc", [(layer_enc1, zc), (e2, zc), (layer_enc3, zc)], ["gelu", "gelu", "none"])

        r1 = np.zeros((c, c))
        rb = np.zeros(c)
        r2 = np.zeros((10, c))
        for j, (qc, _, col, off) in enumerate(readouts):
            for sign, h in ((1.0, 2 * j), (-1.0, 2 * j + 1)):
                r1[h, qc] = sign / acc
                r1[h, Q_MASK] = GATE_GAIN / acc
                rb[h] = -sign * off - GATE_GAIN
                r2[col, h] = sign
        reg.set_mlp(f"{p}.reg", [(r1, rb), (r2, np.zeros(10))], ["gelu", "none"])

        wc = np.zeros((1, c))
        if last:
            wc[0, Q_FINAL_EVIDENCE] = cls_gain / (eta * sum(config.lam**t for t in range(nf)))
        else:
            wc[0, Q_EVIDENCE] = cls_gain * evidence_scale
        reg.set_linear(f"{p}.cls", wc, np.array([cls_bias]))
    return reg
