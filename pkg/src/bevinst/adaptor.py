"""Instance adaptor: BEV reprojection, deformable BEV resampling, the 3x3
feature converter, and composition with potential queries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatch
from .grid_ops import (
    FeatureGrid,
    LinearMap,
    SamplingPattern,
    deformable_aggregate,
    sample_bilinear,
)
from .lss import BEVGrid, BEVSpec
from .proposals import BOX_DIM, ProposalSet

PROPOSAL = "proposal"
POTENTIAL = "potential"
BN_EPS = 1e-5
# BEV array entry ``[i, j]`` holds the cell whose center reprojects to
# ``(j + 0.5, i + 0.5)``; bilinear reads subtract this to land on cell centers.
CELL_CENTER_SHIFT = 0.5


def reproject_to_bev(p_o, spec: BEVSpec) -> np.ndarray:
    """Ego ``(x, y, z)`` meters to continuous BEV cell coordinates ``(x, y)``."""
    p = np.asarray(p_o, dtype=np.float64)
    return (p[..., :2] - np.asarray(spec.range_min)) / spec.cell_size


def bev_to_ego(coords, spec: BEVSpec) -> np.ndarray:
    """Inverse of :func:`reproject_to_bev` on the planar part."""
    return np.asarray(coords, dtype=np.float64) * spec.cell_size + np.asarray(spec.range_min)


@dataclass(eq=False)
class BEVQueryState:
    reprojected: np.ndarray  # (N, 2)
    seed_features: np.ndarray  # (N, C)
    homogeneous_z: np.ndarray = None

    def __post_init__(self):
        if self.homogeneous_z is None:
            self.homogeneous_z = np.ones(len(self.reprojected))


def make_query_state(bev: BEVGrid, p_o) -> BEVQueryState:
    coords = reproject_to_bev(p_o, bev.spec)
    return BEVQueryState(coords, sample_bilinear(bev.data, coords - CELL_CENTER_SHIFT))


def adaptive_resample(
    bev: BEVGrid,
    state: BEVQueryState,
    offset_head: LinearMap,
    weight_head: LinearMap,
    inner: LinearMap,
    outer: LinearMap,
) -> np.ndarray:
    """Deformable resampling around each reprojected proposal.

    Offsets (cell units) and attention logits are linear in the seed features;
    ``K`` is inferred from ``weight_head.out_dim``. A zero offset reads the
    value of the cell containing the proposal center.
    """
    n, c = state.seed_features.shape
    k = weight_head.out_dim
    if offset_head.out_dim != 2 * k:
        raise DimensionMismatch(f"{offset_head.name}: out_dim must be 2*K = {2 * k}, got {offset_head.out_dim}")
    if offset_head.in_dim != c or weight_head.in_dim != c:
        raise DimensionMismatch(f"offset/weight heads must read {c} seed channels")
    offsets = offset_head(state.seed_features).reshape(n, k, 2)
    base = state.reprojected - CELL_CENTER_SHIFT
    pattern = SamplingPattern.from_logits(base, offsets, weight_head(state.seed_features))
    return deformable_aggregate(FeatureGrid(bev.data), pattern, inner, outer)


@dataclass(eq=False)
class ConverterParams:
    """3x3 convolution (padding 1) followed by inference-mode batch norm."""

    kernel: np.ndarray  # (C_out, C_in, 3, 3)
    bias: np.ndarray = None
    mean: np.ndarray = None
    var: np.ndarray = None
    gamma: np.ndarray = None
    beta: np.ndarray = None
    name: str = "adaptor.converter"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel, dtype=np.float64)
        if self.kernel.ndim != 4 or self.kernel.shape[2:] != (3, 3):
            raise DimensionMismatch(f"{self.name}: kernel must be C_out x C_in x 3 x 3")
        co = self.kernel.shape[0]
        defaults = {"bias": 0.0, "mean": 0.0, "var": 1.0, "gamma": 1.0, "beta": 0.0}
        for attr, default in defaults.items():
            val = getattr(self, attr)
            val = np.full(co, default) if val is None else np.asarray(val, dtype=np.float64).reshape(-1)
            if val.shape != (co,):
                raise DimensionMismatch(f"{self.name}: {attr} must have {co} entries")
            setattr(self, attr, val)

    @classmethod
    def identity(cls, channels: int) -> ConverterParams:
        kernel = np.zeros((channels, channels, 3, 3))
        kernel[np.arange(channels), np.arange(channels), 1, 1] = 1.0
        return cls(kernel)


def conv3x3(data: np.ndarray, kernel: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Zero-padded 3x3 cross-correlation of a ``C x H x W`` array."""
    c, h, w = data.shape
    if kernel.shape[1] != c:
        raise DimensionMismatch(f"kernel expects {kernel.shape[1]} input channels, got {c}")
    padded = np.pad(data, ((0, 0), (1, 1), (1, 1)))
    out = np.zeros((kernel.shape[0], h, w))
    for dy in range(3):
        for dx in range(3):
            out += np.einsum("oc,chw->ohw", kernel[:, :, dy, dx], padded[:, dy : dy + h, dx : dx + w])
    if bias is not None:
        out += bias[:, None, None]
    return out


def convert_grid(data: np.ndarray, params: ConverterParams) -> np.ndarray:
    y = conv3x3(data, params.kernel, params.bias)
    scale = params.gamma / np.sqrt(params.var + BN_EPS)
    return (y - params.mean[:, None, None]) * scale[:, None, None] + params.beta[:, None, None]


def convert_features(bev: BEVGrid, params: ConverterParams, points=None):
    """Convert the whole BEV grid; with ``points`` return bilinear reads of the result.

    Whole-grid mode returns a :class:`BEVGrid`; sampled mode returns ``N x C``.
    """
    converted = BEVGrid(bev.spec, convert_grid(bev.data, params), bev.frame)
    if points is None:
        return converted
    return sample_bilinear(converted.data, points)


@dataclass(eq=False)
class PotentialQueries:
    features: np.ndarray  # (N_gamma, C)
    reference_boxes: np.ndarray  # (N_gamma, 10)
    seed: int = 0

    def __post_init__(self):
        if len(self.features) != len(self.reference_boxes):
            raise DimensionMismatch("potential features and reference boxes must have equal counts")

    @classmethod
    def initialize(cls, count: int, channels: int, spec: BEVSpec, seed: int = 0, feature_std: float = 0.02):
        rng = np.random.default_rng(seed)
        boxes = np.zeros((count, BOX_DIM))
        boxes[:, 0:2] = rng.uniform(np.asarray(spec.range_min), np.asarray(spec.range_max), size=(count, 2))
        boxes[:, 3:6] = 1.0
        boxes[:, 7] = 1.0
        feats = rng.normal(0.0, feature_std, size=(count, channels))
        return cls(feats, boxes, seed)


@dataclass(eq=False)
class SparseQuerySet:
    features: np.ndarray  # (N, C)
    boxes: np.ndarray  # (N, 10)
    provenance: np.ndarray  # (N,) of PROPOSAL / POTENTIAL
    padding_mask: np.ndarray = None  # (N,) True for blank-padded proposals
    proposal_scores: np.ndarray = None  # (N,) BEV scores, zero for potentials

    def __post_init__(self):
        n = len(self.features)
        if len(self.boxes) != n or len(self.provenance) != n:
            raise DimensionMismatch("query set arrays disagree on N")
        if self.padding_mask is None:
            self.padding_mask = np.zeros(n, dtype=bool)
        if self.proposal_scores is None:
            self.proposal_scores = np.zeros(n)

    def __len__(self):
        return len(self.features)

    def counts(self):
        return int(np.sum(self.provenance == PROPOSAL)), int(np.sum(self.provenance == POTENTIAL))


def compose_queries(adapted, proposals: ProposalSet, potential: PotentialQueries | None) -> SparseQuerySet:
    adapted = np.asarray(adapted, dtype=np.float64)
    if len(adapted) != len(proposals):
        raise DimensionMismatch(f"{len(adapted)} adapted features for {len(proposals)} proposals")
    if potential is None or len(potential.features) == 0:
        feats, boxes = adapted.copy(), proposals.boxes.copy()
        n_pot = 0
    else:
        if potential.features.shape[1] != adapted.shape[1]:
            raise DimensionMismatch("potential query channels differ from adapted features")
        feats = np.concatenate([adapted, potential.features])
        boxes = np.concatenate([proposals.boxes, potential.reference_boxes])
        n_pot = len(potential.features)
    n_prop = len(adapted)
    provenance = np.array([PROPOSAL] * n_prop + [POTENTIAL] * n_pot)
    return SparseQuerySet(
        feats,
        boxes,
        provenance,
        padding_mask=np.concatenate([proposals.padding_mask, np.zeros(n_pot, dtype=bool)]),
        proposal_scores=np.concatenate([proposals.scores, np.zeros(n_pot)]),
    )
