"""A deterministic desk-scale diffusion-style network.

The graph is a two-stage UNet: conv stem, downsample, a transformer block
(self-attention, text cross-attention, feed-forward) at the bottleneck, an
upsample with a concatenated skip connection, a second cross-attention at
full resolution, and a conv head that emits a pseudo-image with the same
spatial shape as the latent. Time conditioning enters through a small MLP
over sinusoidal features plus per-stage channel projections.

Every weighted layer carries a descriptor (kind, metric group, parameter /
activation / MAC counts) and can be independently fake-quantized on its
weight and/or its input activation. Normalizations and nonlinearities are
never quantized. The concatenated skip tensor is always quantized as two
separately calibrated halves. Layers are bias-free, so a layer's parameter
count is exactly the product of its weight shape.

Layer-kind grouping: cross-attention projections and feed-forward layers
form the "content" group; self-attention, convolutions, and everything
else form the "quality" group.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path

import numpy as np

from . import quantizer
from .errors import ConfigError, InputError, ParameterError, ShapeError, ValidationError
from .quantizer import PER_CHANNEL, PER_TENSOR, params_from_minmax
from .tensor_core import Tensor, derive_seed, make_rng, load_tensor, random_normal, save_tensor


class LayerKind(str, Enum):
    CONV_IN = "conv_in"
    CONV = "conv"
    CONV_OUT = "conv_out"
    SELF_ATTN = "self_attn"
    CROSS_ATTN_TO_Q = "cross_attn_to_q"
    CROSS_ATTN_TO_K = "cross_attn_to_k"
    CROSS_ATTN_TO_V = "cross_attn_to_v"
    CROSS_ATTN_TO_OUT = "cross_attn_to_out"
    FFN = "ffn"
    TIME_EMBED = "time_embed"


CONTENT = "content"
QUALITY = "quality"

_CONTENT_KINDS = {
    LayerKind.CROSS_ATTN_TO_Q,
    LayerKind.CROSS_ATTN_TO_K,
    LayerKind.CROSS_ATTN_TO_V,
    LayerKind.CROSS_ATTN_TO_OUT,
    LayerKind.FFN,
}


def group_for_kind(kind: LayerKind) -> str:
    """Metric group of a layer kind; a pure function of the kind."""
    return CONTENT if kind in _CONTENT_KINDS else QUALITY


@dataclass(frozen=True)
class LayerDescriptor:
    id: str
    kind: LayerKind
    group: str
    weight: Tensor  # (out, in) for linear, (out, in, 3, 3) for conv
    param_count: int
    act_elem_count: int
    mac_count: int
    op: str  # "linear" | "conv"
    stride: int = 1


@dataclass
class QuantConfig:
    """Per-layer bit choices; ``None`` means the tensor stays full precision."""

    weight_bits: dict[str, int | None]
    act_bits: dict[str, int | None]

    @classmethod
    def all_fp(cls, layer_ids) -> "QuantConfig":
        ids = list(layer_ids)
        return cls({i: None for i in ids}, {i: None for i in ids})

    @classmethod
    def uniform(cls, layer_ids, weight_bits: int | None, act_bits: int | None) -> "QuantConfig":
        ids = list(layer_ids)
        return cls({i: weight_bits for i in ids}, {i: act_bits for i in ids})

    def validate(self, layer_ids) -> None:
        expected = set(layer_ids)
        for name, mapping in (("weight", self.weight_bits), ("activation", self.act_bits)):
            got = set(mapping)
            if got != expected:
                missing = sorted(expected - got)
                extra = sorted(got - expected)
                raise ConfigError(f"{name} bits mismatch: missing={missing} extra={extra}")

    def wants_act_quant(self) -> bool:
        return any(b is not None for b in self.act_bits.values())

    def to_json_dict(self) -> dict:
        return {
            lid: {"weight": self.weight_bits[lid], "activation": self.act_bits[lid]}
            for lid in sorted(self.weight_bits)
        }

    @classmethod
    def from_json_dict(cls, d: dict) -> "QuantConfig":
        return cls(
            {lid: entry["weight"] for lid, entry in d.items()},
            {lid: entry["activation"] for lid, entry in d.items()},
        )


@dataclass(frozen=True)
class ActRange:
    """Calibrated input range for one layer.

    ``kind`` is "tensor" (one range), "halves" (separately calibrated halves
    of a concatenated skip tensor, split along the channel axis), or
    "rest_rows" (range over the non-first token rows of a text embedding).
    """

    kind: str
    lo: tuple[float, ...]
    hi: tuple[float, ...]
    split: int | None = None


@dataclass
class ToyModel:
    seed: int
    width: int
    depth: int
    spatial: int
    latent_channels: int
    text_tokens: int
    text_channels: int
    time_dim: int
    layers: dict[str, LayerDescriptor]
    layer_order: list[str]
    _fq_weights: dict = field(default_factory=dict, repr=False)
    _bos_rows: dict = field(default_factory=dict, repr=False)

    def layer_ids(self) -> list[str]:
        return list(self.layer_order)

    def fq_weight(self, layer_id: str, bits: int) -> Tensor:
        """Fake-quantized weight, memoized; per-output-channel grids."""
        key = (layer_id, bits)
        cached = self._fq_weights.get(key)
        if cached is None:
            w = self.layers[layer_id].weight
            params = quantizer.calibrate_minmax(w, bits, PER_CHANNEL, channel_axis=0)
            cached = quantizer.fake_quant(w, params)
            self._fq_weights[key] = cached
        return cached

    def bos_row(self, layer_id: str, embedding: Tensor) -> Tensor:
        """Cached full-precision first-token output row for a to_k/to_v layer."""
        key = (layer_id, embedding[0].tobytes())
        cached = self._bos_rows.get(key)
        if cached is None:
            cached = quantizer.bos_cache_entry(embedding, self.layers[layer_id].weight)
            self._bos_rows[key] = cached
        return cached


def _silu(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = x[pos] / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = x[~pos] * ex / (1.0 + ex)
    return out


def _softmax_rows(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _norm_chw(x: np.ndarray) -> np.ndarray:
    return x / math.sqrt(float((x * x).mean()) + 1e-8)


def _norm_rows(tok: np.ndarray) -> np.ndarray:
    return tok / np.sqrt((tok * tok).mean(axis=1, keepdims=True) + 1e-8)


def _sinusoid(t: float, dim: int) -> np.ndarray:
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half) / half)
    ang = float(t) * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)])


def _upsample2(x: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def _conv3x3(x: np.ndarray, w: np.ndarray, stride: int = 1) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    win = win[:, ::stride, ::stride]
    h_out, w_out = win.shape[1], win.shape[2]
    cols = win.transpose(1, 2, 0, 3, 4).reshape(h_out * w_out, x.shape[0] * 9)
    out = cols @ w.reshape(w.shape[0], -1).T
    return out.T.reshape(w.shape[0], h_out, w_out).copy()


def build_toy_unet(
    seed: int,
    width: int = 8,
    depth: int = 1,
    *,
    spatial: int = 16,
    latent_channels: int = 4,
    text_tokens: int = 8,
    text_channels: int = 16,
    time_dim: int = 16,
) -> ToyModel:
    """Build the fixed two-stage graph with deterministic weights from ``seed``."""
    if width < 2:
        raise ParameterError("width must be >= 2")
    if depth < 1:
        raise ParameterError("depth must be >= 1")
    if spatial < 4 or spatial % 2:
        raise ParameterError("spatial must be even and >= 4")
    if text_tokens < 2:
        raise ParameterError("text_tokens must be >= 2")
    if time_dim < 2 or time_dim % 2:
        raise ParameterError("time_dim must be even and >= 2")

    w1, w2 = width, 2 * width
    s1, s2 = spatial, spatial // 2
    tok_mid, tok_full = s2 * s2, s1 * s1

    specs: list[tuple[str, LayerKind, str, tuple, int, int]] = []

    def linear(lid, kind, out_f, in_f, rows):
        specs.append((lid, kind, "linear", (out_f, in_f), rows * in_f, rows * in_f * out_f))

    def conv(lid, kind, out_c, in_c, h_in, stride=1):
        h_out = h_in // stride
        specs.append(
            (lid, kind, "conv", (out_c, in_c, 3, 3), in_c * h_in * h_in, h_out * h_out * out_c * in_c * 9)
        )

    linear("time.fc1", LayerKind.TIME_EMBED, time_dim, time_dim, 1)
    linear("time.fc2", LayerKind.TIME_EMBED, time_dim, time_dim, 1)
    linear("enc0.time_proj", LayerKind.TIME_EMBED, w1, time_dim, 1)
    conv("enc0.conv_in", LayerKind.CONV_IN, w1, latent_channels, s1)
    for i in range(depth):
        conv(f"enc0.res{i}.conv", LayerKind.CONV, w1, w1, s1)
    conv("enc1.down", LayerKind.CONV, w2, w1, s1, stride=2)
    linear("enc1.time_proj", LayerKind.TIME_EMBED, w2, time_dim, 1)
    for i in range(depth):
        conv(f"enc1.res{i}.conv", LayerKind.CONV, w2, w2, s2)
    for name in ("to_q", "to_k", "to_v", "to_out"):
        linear(f"mid.self.{name}", LayerKind.SELF_ATTN, w2, w2, tok_mid)
    linear("mid.cross.to_q", LayerKind.CROSS_ATTN_TO_Q, w2, w2, tok_mid)
    linear("mid.cross.to_k", LayerKind.CROSS_ATTN_TO_K, w2, text_channels, text_tokens)
    linear("mid.cross.to_v", LayerKind.CROSS_ATTN_TO_V, w2, text_channels, text_tokens)
    linear("mid.cross.to_out", LayerKind.CROSS_ATTN_TO_OUT, w2, w2, tok_mid)
    linear("mid.ffn.fc1", LayerKind.FFN, 2 * w2, w2, tok_mid)
    linear("mid.ffn.fc2", LayerKind.FFN, w2, 2 * w2, tok_mid)
    for i in range(depth):
        conv(f"dec1.res{i}.conv", LayerKind.CONV, w2, w2, s2)
    conv("dec0.up_conv", LayerKind.CONV, w1, w2, s1)
    conv("dec0.fuse", LayerKind.CONV, w1, 2 * w1, s1)
    linear("dec0.cross.to_q", LayerKind.CROSS_ATTN_TO_Q, w1, w1, tok_full)
    linear("dec0.cross.to_k", LayerKind.CROSS_ATTN_TO_K, w1, text_channels, text_tokens)
    linear("dec0.cross.to_v", LayerKind.CROSS_ATTN_TO_V, w1, text_channels, text_tokens)
    linear("dec0.cross.to_out", LayerKind.CROSS_ATTN_TO_OUT, w1, w1, tok_full)
    conv("out.conv_out", LayerKind.CONV_OUT, latent_channels, w1, s1)

    layers: dict[str, LayerDescriptor] = {}
    order: list[str] = []
    for lid, kind, op, shape, act_elems, macs in specs:
        fan_in = shape[1] if op == "linear" else shape[1] * 9
        weight = random_normal(shape, 0.0, 1.0 / math.sqrt(fan_in), derive_seed(seed, f"weight/{lid}"))
        layers[lid] = LayerDescriptor(
            id=lid,
            kind=kind,
            group=group_for_kind(kind),
            weight=weight,
            param_count=int(np.prod(shape)),
            act_elem_count=act_elems,
            mac_count=macs,
            op=op,
            stride=2 if lid == "enc1.down" else 1,
        )
        order.append(lid)

    return ToyModel(
        seed=seed,
        width=width,
        depth=depth,
        spatial=spatial,
        latent_channels=latent_channels,
        text_tokens=text_tokens,
        text_channels=text_channels,
        time_dim=time_dim,
        layers=layers,
        layer_order=order,
    )


_BOS_PATTERN_SEED = 0x0B05F00D  # fixed: the first-token row never varies with the caller's seed


def synth_text_embedding(
    seed: int,
    tokens: int = 8,
    channels: int = 16,
    bos_magnitude: float = 800.0,
    body_magnitude: float = 12.0,
) -> Tensor:
    """Synthetic text embedding with a constant extreme-magnitude first row.

    Row 0 is a fixed pattern (identical across seeds) scaled to
    ``bos_magnitude``; the remaining rows are seeded Gaussians scaled so
    their max magnitude equals ``body_magnitude``.
    """
    if tokens < 2:
        raise InputError("tokens must be >= 2")
    bos = make_rng(_BOS_PATTERN_SEED, f"bos/{channels}").normal(size=channels)
    bos *= bos_magnitude / np.abs(bos).max()
    body = random_normal((tokens - 1, channels), 0.0, 1.0, derive_seed(seed, "text-body"))
    body *= body_magnitude / np.abs(body).max()
    return np.vstack([bos[None, :], body])


def make_input_set(seed: int, n: int, model: ToyModel) -> list[tuple[Tensor, Tensor, float]]:
    """Deterministic (latent, embedding, timestep) triples keyed by ``seed``."""
    if n < 1:
        raise ParameterError("input set must be non-empty")
    out = []
    shape = (model.latent_channels, model.spatial, model.spatial)
    for i in range(n):
        latent = random_normal(shape, 0.0, 1.0, derive_seed(seed, f"latent/{i}"))
        emb = synth_text_embedding(derive_seed(seed, f"text/{i}"), model.text_tokens, model.text_channels)
        timestep = float(make_rng(seed, f"time/{i}").random())
        out.append((latent, emb, timestep))
    return out


class _Run:
    """One forward pass: applies per-layer quantization hooks and recording."""

    def __init__(self, model, config, act_ranges, bos_aware, trace, calib):
        self.model = model
        self.config = config
        self.act_ranges = act_ranges
        self.bos_aware = bos_aware
        self.trace = trace
        self.calib = calib

    def _record(self, lid: str, kind: str, parts: list[np.ndarray], split: int | None = None):
        if self.trace is not None:
            self.trace[lid] = {
                "act_elems": int(sum(p.size for p in parts)),
                "macs": self.trace.get(lid, {}).get("macs", 0),
            }
        if self.calib is not None:
            lo = tuple(float(p.min()) for p in parts)
            hi = tuple(float(p.max()) for p in parts)
            prev = self.calib.get(lid)
            if prev is not None:
                lo = tuple(min(a, b) for a, b in zip(prev.lo, lo))
                hi = tuple(max(a, b) for a, b in zip(prev.hi, hi))
            self.calib[lid] = ActRange(kind=kind, lo=lo, hi=hi, split=split)

    def _act_params(self, lid: str, bits: int, expect_kind: str, slot: int = 0):
        if self.act_ranges is None or lid not in self.act_ranges:
            raise ConfigError(f"activation quantization of {lid} requires calibrated ranges")
        rng = self.act_ranges[lid]
        if rng.kind != expect_kind:
            raise ConfigError(f"calibration for {lid} is {rng.kind!r}, expected {expect_kind!r}")
        return params_from_minmax(rng.lo[slot], rng.hi[slot], bits, PER_TENSOR)

    def _quant_in(self, lid: str, x: np.ndarray) -> np.ndarray:
        bits = self.config.act_bits[lid]
        if bits is None:
            return x
        return quantizer.fake_quant(x, self._act_params(lid, bits, "tensor"))

    def _weight(self, lid: str) -> np.ndarray:
        bits = self.config.weight_bits[lid]
        if bits is None:
            return self.model.layers[lid].weight
        return self.model.fq_weight(lid, bits)

    def linear(self, lid: str, x: np.ndarray) -> np.ndarray:
        rows = x[None, :] if x.ndim == 1 else x
        self._record(lid, "tensor", [rows])
        out = self._quant_in(lid, rows) @ self._weight(lid).T
        if self.trace is not None:
            self.trace[lid]["macs"] = int(rows.shape[0] * rows.shape[1] * out.shape[1])
        return out[0] if x.ndim == 1 else out

    def kv_linear(self, lid: str, embedding: np.ndarray) -> np.ndarray:
        """Text-embedding consumer; first-token-aware when enabled."""
        if not self.bos_aware:
            return self.linear(lid, embedding)
        rest = embedding[1:]
        self._record(lid, "rest_rows", [rest])
        bits = self.config.act_bits[lid]
        a_params = None if bits is None else self._act_params(lid, bits, "rest_rows")
        out = quantizer.bos_aware_linear(
            embedding,
            self._weight(lid),
            w_params=None,
            a_params=a_params,
            bos_output=self.model.bos_row(lid, embedding),
        )
        if self.trace is not None:
            self.trace[lid]["macs"] = int(embedding.shape[0] * embedding.shape[1] * out.shape[1])
            self.trace[lid]["act_elems"] = int(embedding.size)
        return out

    def conv(self, lid: str, x: np.ndarray) -> np.ndarray:
        layer = self.model.layers[lid]
        self._record(lid, "tensor", [x])
        xq = self._quant_in(lid, x)
        out = _conv3x3(xq, self._weight(lid), stride=layer.stride)
        if self.trace is not None:
            self.trace[lid]["macs"] = int(out.shape[1] * out.shape[2] * out.shape[0] * x.shape[0] * 9)
        return out

    def fuse_conv(self, lid: str, x: np.ndarray, split: int) -> np.ndarray:
        """Conv over a concatenated skip tensor; halves quantized separately."""
        layer = self.model.layers[lid]
        self._record(lid, "halves", [x[:split], x[split:]], split=split)
        bits = self.config.act_bits[lid]
        if bits is not None:
            a = quantizer.fake_quant(x[:split], self._act_params(lid, bits, "halves", 0))
            b = quantizer.fake_quant(x[split:], self._act_params(lid, bits, "halves", 1))
            x = np.concatenate([a, b], axis=0)
        out = _conv3x3(x, self._weight(lid), stride=layer.stride)
        if self.trace is not None:
            self.trace[lid]["macs"] = int(out.shape[1] * out.shape[2] * out.shape[0] * x.shape[0] * 9)
        return out

    def attention(self, prefix: str, tokens: np.ndarray, kv: np.ndarray | None) -> np.ndarray:
        """Residual branch of one attention block; ``kv=None`` means self-attention."""
        qin = _norm_rows(tokens)
        q = self.linear(f"{prefix}.to_q", qin)
        if kv is None:
            k = self.linear(f"{prefix}.to_k", qin)
            v = self.linear(f"{prefix}.to_v", qin)
        else:
            k = self.kv_linear(f"{prefix}.to_k", kv)
            v = self.kv_linear(f"{prefix}.to_v", kv)
        attn = _softmax_rows(q @ k.T / math.sqrt(q.shape[1]))
        return self.linear(f"{prefix}.to_out", attn @ v)


def _forward_graph(run: _Run, latent, embedding, timestep) -> Tensor:
    model = run.model
    w1 = model.width

    t_feat = _sinusoid(timestep, model.time_dim)
    temb = _silu(run.linear("time.fc2", _silu(run.linear("time.fc1", t_feat))))

    x = run.conv("enc0.conv_in", latent)
    x = x + run.linear("enc0.time_proj", temb)[:, None, None]
    for i in range(model.depth):
        x = x + run.conv(f"enc0.res{i}.conv", _silu(_norm_chw(x)))
    skip = x

    x = run.conv("enc1.down", _silu(_norm_chw(x)))
    x = x + run.linear("enc1.time_proj", temb)[:, None, None]
    for i in range(model.depth):
        x = x + run.conv(f"enc1.res{i}.conv", _silu(_norm_chw(x)))

    s2 = model.spatial // 2
    tok = x.reshape(2 * w1, s2 * s2).T
    tok = tok + run.attention("mid.self", tok, kv=None)
    tok = tok + run.attention("mid.cross", tok, kv=embedding)
    tok = tok + run.linear("mid.ffn.fc2", _silu(run.linear("mid.ffn.fc1", tok)))
    x = _norm_chw(tok.T.reshape(2 * w1, s2, s2))

    for i in range(model.depth):
        x = x + run.conv(f"dec1.res{i}.conv", _silu(_norm_chw(x)))
    x = run.conv("dec0.up_conv", _upsample2(x))
    x = run.fuse_conv("dec0.fuse", np.concatenate([x, skip], axis=0), split=w1)

    tok = x.reshape(w1, model.spatial * model.spatial).T
    tok = tok + run.attention("dec0.cross", tok, kv=embedding)
    x = _norm_chw(tok.T.reshape(w1, model.spatial, model.spatial))

    return run.conv("out.conv_out", _silu(x))


def _check_inputs(model: ToyModel, latent, embedding) -> None:
    want = (model.latent_channels, model.spatial, model.spatial)
    if tuple(latent.shape) != want:
        raise ShapeError(f"latent shape {latent.shape} != {want}")
    if tuple(embedding.shape) != (model.text_tokens, model.text_channels):
        raise ShapeError(
            f"embedding shape {embedding.shape} != {(model.text_tokens, model.text_channels)}"
        )


def forward(
    model: ToyModel,
    latent: Tensor,
    embedding: Tensor,
    timestep: float,
    config: QuantConfig | None = None,
    bos_aware: bool = False,
    act_ranges: dict[str, ActRange] | None = None,
    trace: dict | None = None,
) -> Tensor:
    """One denoising-style step; returns a pseudo-image shaped like the latent."""
    _check_inputs(model, latent, embedding)
    cfg = config if config is not None else QuantConfig.all_fp(model.layer_order)
    cfg.validate(model.layer_order)
    if cfg.wants_act_quant() and act_ranges is None:
        raise ConfigError("config quantizes activations but no calibrated ranges were given")
    run = _Run(model, cfg, act_ranges, bos_aware, trace, calib=None)
    return _forward_graph(run, latent, embedding, timestep)


def calibrate_activations(
    model: ToyModel, inputs: list[tuple[Tensor, Tensor, float]], bos_aware: bool = False
) -> dict[str, ActRange]:
    """Batch min/max of every layer's input over the calibration inputs."""
    if not inputs:
        raise ParameterError("calibration needs at least one input")
    acc: dict[str, ActRange] = {}
    cfg = QuantConfig.all_fp(model.layer_order)
    for latent, embedding, timestep in inputs:
        _check_inputs(model, latent, embedding)
        run = _Run(model, cfg, None, bos_aware, None, calib=acc)
        _forward_graph(run, latent, embedding, timestep)
    return acc


def audit_shapes(model: ToyModel, seed: int = 0) -> list[str]:
    """Compare descriptor act/MAC counts against a traced forward; [] means clean."""
    latent, embedding, timestep = make_input_set(seed, 1, model)[0]
    trace: dict = {}
    forward(model, latent, embedding, timestep, trace=trace)
    problems = []
    for lid, layer in model.layers.items():
        got = trace.get(lid)
        if got is None:
            problems.append(f"{lid}: never executed")
            continue
        if got["act_elems"] != layer.act_elem_count:
            problems.append(f"{lid}: act_elems {got['act_elems']} != {layer.act_elem_count}")
        if got["macs"] != layer.mac_count:
            problems.append(f"{lid}: macs {got['macs']} != {layer.mac_count}")
    return problems


def model_layer_summary(model: ToyModel) -> list[dict]:
    """Cost-model rows: id, kind, group, and the three per-layer counts."""
    return [
        {
            "id": lid,
            "kind": model.layers[lid].kind.value,
            "group": model.layers[lid].group,
            "param_count": model.layers[lid].param_count,
            "act_elem_count": model.layers[lid].act_elem_count,
            "mac_count": model.layers[lid].mac_count,
            "weight_shape": list(model.layers[lid].weight.shape),
        }
        for lid in model.layer_order
    ]


def model_to_json_dict(model: ToyModel) -> dict:
    return {
        "kind": "toy-unet",
        "seed": model.seed,
        "width": model.width,
        "depth": model.depth,
        "spatial": model.spatial,
        "latent_channels": model.latent_channels,
        "text_tokens": model.text_tokens,
        "text_channels": model.text_channels,
        "time_dim": model.time_dim,
        "layers": model_layer_summary(model),
    }


def save_model(model: ToyModel, json_path: Path | str, weights_dir: Path | str) -> None:
    import json

    weights_dir = Path(weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    for lid in model.layer_order:
        save_tensor(model.layers[lid].weight, weights_dir / lid)
    with open(json_path, "w") as f:
        json.dump(model_to_json_dict(model), f, sort_keys=True, indent=2)
        f.write("\n")


def load_model(json_path: Path | str, weights_dir: Path | str) -> ToyModel:
    """Rebuild the architecture from metadata and read weights from disk."""
    import json

    with open(json_path) as f:
        meta = json.load(f)
    model = build_toy_unet(
        seed=meta["seed"],
        width=meta["width"],
        depth=meta["depth"],
        spatial=meta["spatial"],
        latent_channels=meta["latent_channels"],
        text_tokens=meta["text_tokens"],
        text_channels=meta["text_channels"],
        time_dim=meta["time_dim"],
    )
    stored = {row["id"]: row for row in meta["layers"]}
    if set(stored) != set(model.layer_order):
        raise ValidationError("stored layer list does not match the architecture")
    weights_dir = Path(weights_dir)
    for lid, layer in model.layers.items():
        row = stored[lid]
        for field_name in ("kind", "group", "param_count", "act_elem_count", "mac_count"):
            want = getattr(layer, field_name)
            want = want.value if isinstance(want, LayerKind) else want
            if row[field_name] != want:
                raise ValidationError(f"layer {lid}: stored {field_name} disagrees with architecture")
        w = load_tensor(weights_dir / lid)
        if w.shape != layer.weight.shape:
            raise ValidationError(f"layer {lid}: weight shape {w.shape} != {layer.weight.shape}")
        layer.weight[...] = w
    model._fq_weights.clear()
    model._bos_rows.clear()
    return model
