"""BEV proposal head: per-cell scoring and box regression, NMS, top-k with padding.

Box layout (10 values): ``x, y, z, w, l, h, sin(yaw), cos(yaw), vx, vy``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .grid_ops import LinearMap
from .lss import BEVGrid, BEVSpec

BOX_DIM = 10
PAD_YAW = np.pi / 2


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def normalize_orientation(sincos: np.ndarray):
    """Unit-normalize ``(..., 2)`` sin/cos rows. Zero rows become ``(0, 1)``.

    Returns ``(normalized, degenerate_mask)``.
    """
    sc = np.asarray(sincos, dtype=np.float64)
    norm = np.linalg.norm(sc, axis=-1, keepdims=True)
    degenerate = norm[..., 0] < 1e-12
    safe = np.where(norm < 1e-12, 1.0, norm)
    out = sc / safe
    out[degenerate] = (0.0, 1.0)
    return out, degenerate


@dataclass
class ScoredBox:
    box: np.ndarray
    score: float
    class_id: int = 0


@dataclass(eq=False)
class ScoredBoxes:
    """Columnar list of scored boxes."""

    boxes: np.ndarray  # (M, 10)
    scores: np.ndarray  # (M,)
    class_ids: np.ndarray  # (M,)

    def __post_init__(self):
        self.boxes = np.asarray(self.boxes, dtype=np.float64).reshape(-1, BOX_DIM)
        self.scores = np.asarray(self.scores, dtype=np.float64).reshape(-1)
        self.class_ids = np.asarray(self.class_ids, dtype=np.int64).reshape(-1)
        if not (len(self.boxes) == len(self.scores) == len(self.class_ids)):
            raise DimensionMismatch("boxes, scores and class ids must have equal length")

    def __len__(self):
        return len(self.scores)

    def __getitem__(self, idx) -> ScoredBox:
        return ScoredBox(self.boxes[idx].copy(), float(self.scores[idx]), int(self.class_ids[idx]))

    def take(self, index) -> ScoredBoxes:
        return ScoredBoxes(self.boxes[index], self.scores[index], self.class_ids[index])

    @classmethod
    def from_list(cls, items) -> ScoredBoxes:
        items = list(items)
        if not items:
            return cls.empty()
        return cls(
            np.stack([np.asarray(b.box, dtype=np.float64) for b in items]),
            [b.score for b in items],
            [b.class_id for b in items],
        )

    @classmethod
    def empty(cls) -> ScoredBoxes:
        return cls(np.zeros((0, BOX_DIM)), np.zeros(0), np.zeros(0, dtype=np.int64))


@dataclass(eq=False)
class ProposalSet:
    boxes: np.ndarray  # (k, 10)
    scores: np.ndarray  # (k,)
    class_ids: np.ndarray  # (k,)
    padding_mask: np.ndarray  # (k,) True for blank padding

    def __len__(self):
        return len(self.scores)


def score_and_regress(bev: BEVGrid, head: LinearMap) -> ScoredBoxes:
    """Per-cell 1x1 head: one score logit plus 10 box regressands.

    Regressands: ``dx, dy`` (meters from the cell center), ``z``, ``w, l, h``
    (clipped at zero), ``sin, cos`` (normalized) and ``vx, vy``.
    """
    c = bev.channels
    if head.in_dim != c or head.out_dim != 1 + BOX_DIM:
        raise DimensionMismatch(f"{head.name}: expected {c} -> {1 + BOX_DIM}, got {head.in_dim} -> {head.out_dim}")
    feats = bev.data.reshape(c, -1).T
    out = head(feats)
    reg = out[:, 1:]
    centers = bev.spec.cell_centers().reshape(-1, 2)
    boxes = np.empty((feats.shape[0], BOX_DIM))
    boxes[:, 0:2] = centers + reg[:, 0:2]
    boxes[:, 2] = reg[:, 2]
    boxes[:, 3:6] = np.maximum(reg[:, 3:6], 0.0)
    boxes[:, 6:8], _ = normalize_orientation(reg[:, 6:8])
    boxes[:, 8:10] = reg[:, 8:10]
    return ScoredBoxes(boxes, sigmoid(out[:, 0]), np.zeros(len(boxes), dtype=np.int64))


def ranking_order(cands: ScoredBoxes) -> np.ndarray:
    """Indices sorted by score descending, then x ascending, then y ascending."""
    return np.lexsort((cands.boxes[:, 1], cands.boxes[:, 0], -cands.scores))


def nms_filter(cands: ScoredBoxes, score_threshold: float = 0.1, suppression_radius: float = 1.0) -> ScoredBoxes:
    """Score threshold followed by greedy BEV center-distance suppression.

    A box is suppressed when its center lies within ``suppression_radius``
    (inclusive) of an already-kept box.
    """
    if not 0.0 <= score_threshold <= 1.0:
        raise ValueError("score_threshold must lie in [0, 1]")
    cands = cands.take(np.flatnonzero(cands.scores >= score_threshold))
    order = ranking_order(cands)
    xy = cands.boxes[order, :2]
    alive = np.ones(len(order), dtype=bool)
    keep = []
    r2 = suppression_radius**2
    for i in range(len(order)):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = slice(i + 1, None)
        d2 = np.sum((xy[rest] - xy[i]) ** 2, axis=1)
        alive[rest] &= d2 > r2
    return cands.take(np.asarray(keep, dtype=np.int64))


def topk_pad(filtered: ScoredBoxes, k: int = 450, rng_seed: int = 0, spec: BEVSpec | None = None) -> ProposalSet:
    """Keep the ``k`` best boxes; pad the remainder with blank boxes.

    Padding boxes sit at a uniform random ``(x, y)`` inside the BEV range
    (``numpy.random.default_rng(rng_seed)``, z = 0) with yaw pi/2 and zero
    scale and velocity.
    """
    if k <= 0:
        raise ValueError("k must be positive")
    spec = spec or BEVSpec()
    order = ranking_order(filtered)[:k]
    kept = filtered.take(order)
    n_pad = k - len(kept)
    pad = np.zeros((n_pad, BOX_DIM))
    if n_pad:
        rng = np.random.default_rng(rng_seed)
        lo = np.asarray(spec.range_min)
        hi = np.asarray(spec.range_max)
        pad[:, 0:2] = rng.uniform(lo, hi, size=(n_pad, 2))
        pad[:, 6] = np.sin(PAD_YAW)
        pad[:, 7] = 0.0
    return ProposalSet(
        boxes=np.concatenate([kept.boxes, pad]),
        scores=np.concatenate([kept.scores, np.zeros(n_pad)]),
        class_ids=np.concatenate([kept.class_ids, np.zeros(n_pad, dtype=np.int64)]),
        padding_mask=np.concatenate([np.zeros(len(kept), dtype=bool), np.ones(n_pad, dtype=bool)]),
    )
