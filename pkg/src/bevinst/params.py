"""Named parameter blocks standing in for every learnable weight.

File layout (``params.bin``)::

    b"BVPR" | uint32 version | uint64 header length | header JSON | float64 payload

The UTF-8 header lists blocks sorted by name, each with its kind, attributes
and ``(key, shape, offset)`` of every array; arrays are little-endian float64
laid out back to back in header order. Saving the same registry twice gives
identical bytes.
"""

from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field

import numpy as np

from .adaptor import ConverterParams, PotentialQueries
from .branch import BoxEmbedParams, LayerParams, SamplingHeads
from .errors import DimensionMismatch, ParseError
from .grid_ops import AttentionParams, LinearMap

MAGIC = b"BVPR"
FORMAT_VERSION = 1


@dataclass(eq=False)
class ParamBlock:
    kind: str
    arrays: dict[str, np.ndarray]
    attrs: dict = field(default_factory=dict)


class ParamRegistry:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.blocks: dict[str, ParamBlock] = {}

    def __contains__(self, name):
        return name in self.blocks

    def __len__(self):
        return len(self.blocks)

    def names(self) -> list[str]:
        return sorted(self.blocks)

    def block(self, name: str) -> ParamBlock:
        try:
            return self.blocks[name]
        except KeyError:
            raise KeyError(f"parameter block {name!r} not found") from None

    def _expect(self, name, kind):
        blk = self.block(name)
        if blk.kind != kind:
            raise DimensionMismatch(f"{name}: expected a {kind} block, found {blk.kind}")
        return blk

    # -- setters --------------------------------------------------------------

    def set_linear(self, name: str, weights, bias=None):
        arrays = {"w": np.asarray(weights, dtype=np.float64)}
        if bias is not None:
            arrays["b"] = np.asarray(bias, dtype=np.float64)
        self.blocks[name] = ParamBlock("linear", arrays)

    def set_mlp(self, name: str, layers, activations):
        arrays = {}
        has_bias = []
        for i, (w, b) in enumerate(layers):
            arrays[f"w{i}"] = np.asarray(w, dtype=np.float64)
            if b is not None:
                arrays[f"b{i}"] = np.asarray(b, dtype=np.float64)
            has_bias.append(b is not None)
        self.blocks[name] = ParamBlock("mlp", arrays, {"activations": list(activations), "bias": has_bias})

    def set_attention(self, name: str, heads: int, **mats):
        arrays = {k: np.asarray(v, dtype=np.float64) for k, v in mats.items()}
        self.blocks[name] = ParamBlock("attention", arrays, {"heads": int(heads)})

    def set_embed(self, name: str, position, scale, velocity, orientation, glob):
        arrays = {
            "position": position, "scale": scale, "velocity": velocity, "orientation": orientation, "glob": glob,
        }
        self.blocks[name] = ParamBlock("embed", {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})

    def set_converter(self, name: str, conv: ConverterParams):
        arrays = {k: getattr(conv, k) for k in ("kernel", "bias", "mean", "var", "gamma", "beta")}
        self.blocks[name] = ParamBlock("converter", {k: np.asarray(v, dtype=np.float64) for k, v in arrays.items()})

    def set_potential(self, name: str, pq: PotentialQueries):
        self.blocks[name] = ParamBlock(
            "potential",
            {"features": np.asarray(pq.features, dtype=np.float64), "boxes": np.asarray(pq.reference_boxes)},
            {"seed": int(pq.seed)},
        )

    # -- typed getters ----------------------------------------------------------

    def linear(self, name: str) -> LinearMap:
        blk = self._expect(name, "linear")
        return LinearMap(name, blk.arrays["w"], blk.arrays.get("b"))

    def mlp(self, name: str) -> list:
        blk = self._expect(name, "mlp")
        acts = blk.attrs["activations"]
        return [
            (LinearMap(f"{name}[{i}]", blk.arrays[f"w{i}"], blk.arrays.get(f"b{i}")), act)
            for i, act in enumerate(acts)
        ]

    def attention(self, name: str) -> AttentionParams:
        blk = self._expect(name, "attention")
        a = blk.arrays
        maps = {
            p: LinearMap(f"{name}.{p}", a[f"w{p}"], a.get(f"b{p}")) for p in ("q", "k", "v", "o")
        }
        return AttentionParams(heads=blk.attrs["heads"], **maps)

    def embed(self, name: str) -> BoxEmbedParams:
        a = self._expect(name, "embed").arrays
        return BoxEmbedParams(*(LinearMap(f"{name}.{k}", a[k]) for k in ("position", "scale", "velocity",
                                                                         "orientation", "glob")))

    def converter(self, name: str) -> ConverterParams:
        a = self._expect(name, "converter").arrays
        return ConverterParams(name=name, **a)

    def potential(self, name: str) -> PotentialQueries:
        blk = self._expect(name, "potential")
        return PotentialQueries(blk.arrays["features"], blk.arrays["boxes"], blk.attrs.get("seed", 0))

    def layer(self, i: int) -> LayerParams:
        p = f"branch.layer{i}"
        return LayerParams(
            attn=self.attention(f"{p}.attn"),
            embed=self.embed(f"{p}.embed"),
            sampling=SamplingHeads(
                self.linear(f"{p}.offset"), self.linear(f"{p}.weight"),
                self.linear(f"{p}.inner"), self.linear(f"{p}.outer"),
            ),
            enc=self.mlp(f"{p}.enc"),
            reg=self.mlp(f"{p}.reg"),
            cls=self.linear(f"{p}.cls"),
        )

    def num_layers(self) -> int:
        n = 0
        while f"branch.layer{n}.cls" in self.blocks:
            n += 1
        return n

    def audit(self, config) -> None:
        """Check that every block the pipeline reads exists with config-derived shapes.

        Raises :class:`DimensionMismatch` naming the first offending block.
        """
        expected = init_params(config, seed=0)
        for name in expected.names():
            if name not in self.blocks:
                raise DimensionMismatch(f"{name}: block missing from registry")
            want, have = expected.blocks[name], self.blocks[name]
            if want.kind != have.kind:
                raise DimensionMismatch(f"{name}: expected a {want.kind} block, found {have.kind}")
            for key, arr in want.arrays.items():
                got = have.arrays.get(key)
                if got is None and key.startswith("b"):
                    continue  # bias-free variant
                if got is None or got.shape != arr.shape:
                    shape = None if got is None else tuple(got.shape)
                    raise DimensionMismatch(f"{name}.{key}: expected shape {tuple(arr.shape)}, got {shape}")
            if want.kind == "attention" and have.attrs.get("heads") != config.heads:
                raise DimensionMismatch(f"{name}: {have.attrs.get('heads')} heads, config says {config.heads}")

    # -- serialization --------------------------------------------------------------

    def dumps(self) -> bytes:
        header_blocks = []
        payload = []
        offset = 0
        for name in self.names():
            blk = self.blocks[name]
            entries = []
            for key in sorted(blk.arrays):
                arr = np.ascontiguousarray(blk.arrays[key], dtype="<f8")
                entries.append({"key": key, "shape": list(arr.shape), "offset": offset})
                payload.append(arr.tobytes())
                offset += arr.nbytes
            header_blocks.append({"name": name, "kind": blk.kind, "attrs": blk.attrs, "arrays": entries})
        header = json.dumps({"seed": self.seed, "blocks": header_blocks}, sort_keys=True, separators=(",", ":"))
        hb = header.encode("utf-8")
        return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hb)) + hb + b"".join(payload)

    @classmethod
    def loads(cls, blob: bytes) -> ParamRegistry:
        if blob[:4] != MAGIC:
            raise ParseError("not a parameter file (bad magic)")
        if len(blob) < 16:
            raise ParseError("truncated parameter file")
        version, hlen = struct.unpack("<IQ", blob[4:16])
        if version != FORMAT_VERSION:
            raise ParseError(f"unsupported parameter format version {version}", field="version")
        try:
            header = json.loads(blob[16 : 16 + hlen].decode("utf-8"))
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise ParseError(f"bad header: {exc}") from None
        data = blob[16 + hlen :]
        reg = cls(seed=header.get("seed", 0))
        for b in header["blocks"]:
            arrays = {}
            for e in b["arrays"]:
                count = int(np.prod(e["shape"])) if e["shape"] else 1
                start, stop = e["offset"], e["offset"] + 8 * count
                if stop > len(data):
                    raise ParseError("payload truncated", field=f"{b['name']}.{e['key']}")
                arrays[e["key"]] = np.frombuffer(data[start:stop], dtype="<f8").reshape(e["shape"]).astype(np.float64)
            reg.blocks[b["name"]] = ParamBlock(b["kind"], arrays, b["attrs"])
        return reg

    def save(self, path) -> None:
        with open(path, "wb") as fh:
            fh.write(self.dumps())

    @classmethod
    def load(cls, path) -> ParamRegistry:
        with open(path, "rb") as fh:
            return cls.loads(fh.read())


# -- initialization -----------------------------------------------------------------


def _rng(seed: int, name: str) -> np.random.Generator:
    return np.random.default_rng([seed, zlib.crc32(name.encode("utf-8"))])


def _dense(rng, out_dim, in_dim, gain=1.0):
    return rng.normal(0.0, gain / np.sqrt(in_dim), size=(out_dim, in_dim))


def init_params(config, seed: int | None = None) -> ParamRegistry:
    """Seeded random initialization of every block the pipeline reads."""
    from .adaptor import PotentialQueries

    seed = config.seeds.params if seed is None else seed
    c = config.channels
    k = config.k
    frames = config.t_chi + 1
    reg = ParamRegistry(seed)

    def linear(name, in_dim, out_dim, bias=True, gain=1.0):
        rng = _rng(seed, name)
        reg.set_linear(name, _dense(rng, out_dim, in_dim, gain), np.zeros(out_dim) if bias else None)

    def mlp(name, dims, acts):
        rng = _rng(seed, name)
        layers = [(_dense(rng, o, i), np.zeros(o)) for i, o in zip(dims[:-1], dims[1:])]
        reg.set_mlp(name, layers, acts)

    linear("bev.depth", c, config.depth_bins.count)
    linear("bev.temporal", (config.history + 1) * c, c, gain=0.1)
    linear("proposal.head", c, 11)
    linear("adaptor.offset", c, 2 * k, gain=0.1)
    linear("adaptor.weight", c, k)
    linear("adaptor.inner", c, c)
    linear("adaptor.outer", c, c)
    rng = _rng(seed, "adaptor.converter")
    conv = ConverterParams(rng.normal(0.0, 1.0 / np.sqrt(9 * c), size=(c, c, 3, 3)))
    reg.set_converter("adaptor.converter", conv)
    reg.set_potential(
        "adaptor.potential",
        PotentialQueries.initialize(config.n_gamma, c, config.bev, seed=config.seeds.potential),
    )
    for i in range(config.layers):
        p = f"branch.layer{i}"
        rng = _rng(seed, f"{p}.attn")
        mats = {}
        for m in ("q", "k", "v", "o"):
            mats[f"w{m}"] = _dense(rng, c, c)
            mats[f"b{m}"] = np.zeros(c)
        reg.set_attention(f"{p}.attn", config.heads, **mats)
        rng = _rng(seed, f"{p}.embed")
        reg.set_embed(
            f"{p}.embed", _dense(rng, c, 3), _dense(rng, c, 3), _dense(rng, c, 2), _dense(rng, c, 2), _dense(rng, c, c)
        )
        linear(f"{p}.offset", c, frames * k * 2, gain=0.1)
        linear(f"{p}.weight", c, frames * k)
        linear(f"{p}.inner", c, c)
        linear(f"{p}.outer", c, c)
        mlp(f"{p}.enc", [2 * c, c, c, c], ["gelu", "gelu", "none"])
        mlp(f"{p}.reg", [c, c, 10], ["gelu", "none"])
        linear(f"{p}.cls", c, 1)
    return reg
