"""Dense-grid primitives: bilinear sampling, deformable aggregation, small nets.

Sampling coordinates are ``(x, y)`` in cell units where ``x`` indexes the
width axis and ``y`` the height axis of a ``C x H x W`` array; integer
coordinates hit cell values exactly. Reads outside the grid are zero.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .errors import DimensionMismatch, HeadsMismatch, OnBoundary, ParseError


@dataclass(eq=False)
class FeatureGrid:
    data: np.ndarray  # (C, H, W)
    frame: int = 0
    view: int = 0
    scale: int = 0

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 3:
            raise DimensionMismatch(f"feature grid must be C x H x W, got shape {self.data.shape}")

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(eq=False)
class LinearMap:
    """``y = W x + b`` with ``W`` shaped ``(out_dim, in_dim)``."""

    name: str
    weights: np.ndarray
    bias: np.ndarray | None = None

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise DimensionMismatch(f"{self.name}: weights must be 2-D")
        if self.bias is not None:
            self.bias = np.asarray(self.bias, dtype=np.float64).reshape(-1)
            if self.bias.shape[0] != self.out_dim:
                raise DimensionMismatch(f"{self.name}: bias length {self.bias.shape[0]} != out_dim {self.out_dim}")

    @property
    def in_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def identity(cls, name: str, dim: int) -> LinearMap:
        return cls(name, np.eye(dim))

    @classmethod
    def zeros(cls, name: str, in_dim: int, out_dim: int, bias: bool = True) -> LinearMap:
        return cls(name, np.zeros((out_dim, in_dim)), np.zeros(out_dim) if bias else None)

    def __call__(self, x) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.in_dim:
            raise DimensionMismatch(f"{self.name}: expected input dim {self.in_dim}, got {x.shape[-1]}")
        y = x @ self.weights.T
        if self.bias is not None:
            y = y + self.bias
        return y


def softmax_normalize(logits, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


@dataclass(eq=False)
class SamplingPattern:
    base_points: np.ndarray  # (N, 2)
    offsets: np.ndarray  # (N, K, 2)
    weights: np.ndarray  # (N, K), rows sum to 1

    def __post_init__(self):
        self.base_points = np.asarray(self.base_points, dtype=np.float64).reshape(-1, 2)
        self.offsets = np.asarray(self.offsets, dtype=np.float64)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        n = self.base_points.shape[0]
        if self.offsets.shape[:1] != (n,) or self.offsets.shape[-1] != 2 or self.weights.shape != self.offsets.shape[:2]:
            raise DimensionMismatch("sampling pattern arrays disagree on N or K")
        if np.any(self.weights < 0) or np.abs(self.weights.sum(axis=1) - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("sampling weights must be non-negative and sum to 1 per query")

    @classmethod
    def from_logits(cls, base_points, offsets, logits) -> SamplingPattern:
        return cls(base_points, offsets, softmax_normalize(logits, axis=-1))

    @property
    def num_points(self) -> int:
        return self.offsets.shape[1]


def sample_bilinear(data: np.ndarray, points) -> np.ndarray:
    """Vectorized zero-padded bilinear read.

    ``data`` is ``(C, H, W)``, ``points`` is ``(..., 2)``; returns ``(..., C)``.
    Non-finite points read as zero.
    """
    pts = np.asarray(points, dtype=np.float64)
    c, h, w = data.shape
    lead = pts.shape[:-1]
    flat = pts.reshape(-1, 2)
    finite = np.all(np.isfinite(flat), axis=1)
    x = np.where(finite, flat[:, 0], -2.0)
    y = np.where(finite, flat[:, 1], -2.0)
    x0 = np.floor(x)
    y0 = np.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    table = data.reshape(c, h * w).T  # (H*W, C)
    out = np.zeros((flat.shape[0], c))
    for dy, dx, wgt in (
        (0, 0, (1 - fx) * (1 - fy)),
        (0, 1, fx * (1 - fy)),
        (1, 0, (1 - fx) * fy),
        (1, 1, fx * fy),
    ):
        xi = x0 + dx
        yi = y0 + dy
        ok = finite & (xi >= 0) & (xi < w) & (yi >= 0) & (yi < h)
        if not ok.any():
            continue
        idx = np.where(ok, yi * w + xi, 0)
        out += np.where(ok, wgt, 0.0)[:, None] * table[idx]
    return out.reshape(lead + (c,))


def bilinear_sample(grid: FeatureGrid, point) -> np.ndarray:
    """Read a ``C``-vector at continuous cell coordinate ``(x, y)``."""
    return sample_bilinear(grid.data, np.asarray(point, dtype=np.float64).reshape(2))


def bilinear_gradient(grid: FeatureGrid, point, boundary_tol: float = 1e-9) -> np.ndarray:
    """Analytic ``C x 2`` Jacobian ``[d/dx, d/dy]`` of :func:`bilinear_sample`.

    Raises:
        OnBoundary: if either coordinate lies within ``boundary_tol`` of an
            integer, where the piecewise-bilinear surface has a kink.
    """
    x, y = (float(v) for v in np.asarray(point, dtype=np.float64).reshape(2))
    for v in (x, y):
        if abs(v - round(v)) < boundary_tol:
            raise OnBoundary(f"coordinate {v!r} is on a cell boundary")
    data = grid.data
    c, h, w = data.shape
    x0, y0 = int(np.floor(x)), int(np.floor(y))
    fx, fy = x - x0, y - y0

    def at(xi, yi):
        if 0 <= xi < w and 0 <= yi < h:
            return data[:, yi, xi]
        return np.zeros(c)

    v00, v10, v01, v11 = at(x0, y0), at(x0 + 1, y0), at(x0, y0 + 1), at(x0 + 1, y0 + 1)
    d_dx = (1 - fy) * (v10 - v00) + fy * (v11 - v01)
    d_dy = (1 - fx) * (v01 - v00) + fx * (v11 - v10)
    return np.stack([d_dx, d_dy], axis=1)


def deformable_aggregate(grid: FeatureGrid, pattern: SamplingPattern, inner: LinearMap, outer: LinearMap) -> np.ndarray:
    """``outer(sum_k w_ik * inner(sample(base_i + offset_ik)))`` for every query ``i``."""
    if inner.in_dim != grid.channels:
        raise DimensionMismatch(f"{inner.name}: in_dim {inner.in_dim} != grid channels {grid.channels}")
    if outer.in_dim != inner.out_dim:
        raise DimensionMismatch(f"{outer.name}: in_dim {outer.in_dim} != {inner.name} out_dim {inner.out_dim}")
    pts = pattern.base_points[:, None, :] + pattern.offsets
    feats = inner(sample_bilinear(grid.data, pts))  # (N, K, C')
    pooled = np.einsum("nk,nkc->nc", pattern.weights, feats)
    return outer(pooled)


def gelu(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return 0.5 * x * (1.0 + erf(x / np.sqrt(2.0)))


ACTIVATIONS = {
    "none": lambda x: x,
    "gelu": gelu,
    "relu": lambda x: np.maximum(x, 0.0),
}


def mlp_apply(layers: Sequence[tuple], x) -> np.ndarray:
    """Forward pass through ``[(LinearMap, activation_tag), ...]``."""
    out = np.asarray(x, dtype=np.float64)
    for lin, act in layers:
        if act not in ACTIVATIONS:
            raise ValueError(f"unknown activation {act!r}")
        out = ACTIVATIONS[act](lin(out))
    return out


@dataclass(eq=False)
class AttentionParams:
    q: LinearMap
    k: LinearMap
    v: LinearMap
    o: LinearMap
    heads: int = 8


def self_attention(queries, positional, params: AttentionParams, return_weights: bool = False):
    """Single-layer multi-head self-attention with a residual connection.

    ``positional`` is added to the query/key inputs only.
    """
    x = np.asarray(queries, dtype=np.float64)
    pos = np.asarray(positional, dtype=np.float64)
    if x.ndim != 2 or x.shape != pos.shape:
        raise DimensionMismatch(f"queries {x.shape} and positional {pos.shape} must match as N x C")
    n, c = x.shape
    if n < 1:
        raise DimensionMismatch("need at least one token")
    for lin in (params.q, params.k, params.v):
        if lin.in_dim != c or lin.out_dim != c:
            raise DimensionMismatch(f"{lin.name}: expected {c} -> {c}")
    if params.o.in_dim != c or params.o.out_dim != c:
        raise DimensionMismatch(f"{params.o.name}: expected {c} -> {c}")
    if c % params.heads != 0:
        raise HeadsMismatch(f"channels {c} not divisible by {params.heads} heads")
    d = c // params.heads
    qk_in = x + pos
    q = params.q(qk_in).reshape(n, params.heads, d).transpose(1, 0, 2)
    k = params.k(qk_in).reshape(n, params.heads, d).transpose(1, 0, 2)
    v = params.v(x).reshape(n, params.heads, d).transpose(1, 0, 2)
    attn = softmax_normalize(q @ k.transpose(0, 2, 1) / np.sqrt(d), axis=-1)  # (heads, N, N)
    mixed = (attn @ v).transpose(1, 0, 2).reshape(n, c)
    out = x + params.o(mixed)
    if return_weights:
        return out, attn
    return out


# --- FGRD tensor blobs -----------------------------------------------------

FGRD_MAGIC = b"FGRD"


def dumps_fgrd(data: np.ndarray) -> bytes:
    arr = np.asarray(data)
    if arr.ndim != 3:
        raise DimensionMismatch("FGRD blobs hold C x H x W arrays")
    c, h, w = arr.shape
    header = FGRD_MAGIC + b"\n" + f"{c} {h} {w}\n".encode("ascii")
    return header + np.ascontiguousarray(arr, dtype="<f4").tobytes()


def loads_fgrd(blob: bytes) -> np.ndarray:
    if not blob.startswith(FGRD_MAGIC + b"\n"):
        raise ParseError("missing FGRD magic", line=1)
    rest = blob[len(FGRD_MAGIC) + 1 :]
    nl = rest.find(b"\n")
    if nl < 0:
        raise ParseError("missing dims line", line=2)
    try:
        c, h, w = (int(v) for v in rest[:nl].decode("ascii").split())
    except ValueError as exc:
        raise ParseError(f"bad dims line: {exc}", line=2) from None
    payload = rest[nl + 1 :]
    if len(payload) != 4 * c * h * w:
        raise ParseError(f"payload has {len(payload)} bytes, expected {4 * c * h * w}")
    return np.frombuffer(payload, dtype="<f4").reshape(c, h, w).astype(np.float64)


def save_fgrd(path, data: np.ndarray) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps_fgrd(data))


def load_fgrd(path) -> np.ndarray:
    with open(path, "rb") as fh:
        return loads_fgrd(fh.read())
