"""One-layer-at-a-time sensitivity analysis with per-group metrics.

Each probe quantizes exactly one layer's weight or input activation at one
bit-width, runs the network forward, and compares the output against the
full-precision reference. Content-group layers (cross-attention and
feed-forward) are scored with SSIM; quality-group layers (everything else)
with SQNR in dB. Scores are averaged over the input set. Full-precision
reference outputs are computed once and reused across all probes.
"""

from __future__ import annotations

import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass

import numpy as np

from . import metrics, toy_model
from .errors import ParameterError, ValidationError
from .quantizer import BIT_WIDTHS
from .tensor_core import Tensor

WEIGHT = "weight"
ACTIVATION = "activation"
TENSOR_KINDS = (WEIGHT, ACTIVATION)


@dataclass(frozen=True)
class SensitivityEntry:
    layer_id: str
    tensor_kind: str
    bit_width: int
    score: float
    metric_kind: str
    n_inputs: int


@dataclass
class SensitivityTable:
    entries: list[SensitivityEntry]

    def layer_ids(self) -> list[str]:
        seen: dict[str, None] = {}
        for e in self.entries:
            seen.setdefault(e.layer_id, None)
        return list(seen)

    def bit_widths(self) -> tuple[int, ...]:
        return tuple(sorted({e.bit_width for e in self.entries}))

    def score(self, layer_id: str, bit_width: int, tensor_kind: str | None = None) -> float:
        for e in self.entries:
            if e.layer_id == layer_id and e.bit_width == bit_width:
                if tensor_kind is None or e.tensor_kind == tensor_kind:
                    return e.score
        raise KeyError((layer_id, bit_width, tensor_kind))

    def validate_complete(self, layer_ids, bit_widths, tensor_kind: str) -> None:
        """Exactly one entry per (layer, tensor_kind, bit_width)."""
        want = {(lid, tensor_kind, b) for lid in layer_ids for b in bit_widths}
        got = [(e.layer_id, e.tensor_kind, e.bit_width) for e in self.entries]
        if len(got) != len(set(got)):
            raise ValidationError("table holds duplicate (layer, kind, bits) entries")
        if set(got) != want:
            raise ValidationError(
                f"table is incomplete: missing {sorted(want - set(got))[:5]}..."
                if want - set(got)
                else "table holds entries outside the expected grid"
            )

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    @classmethod
    def from_jsonl(cls, text: str) -> "SensitivityTable":
        entries = [SensitivityEntry(**json.loads(line)) for line in text.splitlines() if line.strip()]
        return cls(entries)


def output_checksum(t: Tensor) -> str:
    return hashlib.sha256(np.ascontiguousarray(t, dtype=np.float64).tobytes()).hexdigest()


def fp_references(
    model: toy_model.ToyModel, inputs, bos_aware: bool = False
) -> list[Tensor]:
    """Full-precision outputs for every input, computed once per analysis."""
    return [
        toy_model.forward(model, latent, emb, t, config=None, bos_aware=bos_aware)
        for latent, emb, t in inputs
    ]


def probe_layer(
    model: toy_model.ToyModel,
    inputs,
    refs: list[Tensor],
    layer_id: str,
    tensor_kind: str,
    bit_width: int,
    *,
    bos_aware: bool = False,
    act_ranges=None,
    sqnr_cap_db: float = metrics.DEFAULT_SQNR_CAP_DB,
) -> tuple[float, float]:
    """Quantize one layer's tensor at one bit-width; mean (SSIM, SQNR) vs FP."""
    cfg = toy_model.QuantConfig.all_fp(model.layer_order)
    if tensor_kind == WEIGHT:
        cfg.weight_bits[layer_id] = bit_width
    elif tensor_kind == ACTIVATION:
        cfg.act_bits[layer_id] = bit_width
    else:
        raise ParameterError(f"tensor_kind must be one of {TENSOR_KINDS}")
    ssim_sum = 0.0
    sqnr_sum = 0.0
    for (latent, emb, t), ref in zip(inputs, refs):
        out = toy_model.forward(
            model, latent, emb, t, config=cfg, bos_aware=bos_aware, act_ranges=act_ranges
        )
        data_range = float(ref.max() - ref.min())
        weights = metrics.SsimWeights.for_data_range(data_range if data_range > 0 else 1.0)
        ssim_sum += metrics.ssim(ref, out, weights).value
        sqnr_sum += metrics.sqnr_db(ref, out, cap_db=sqnr_cap_db).value
    n = len(refs)
    return ssim_sum / n, sqnr_sum / n


def analyze(
    model: toy_model.ToyModel,
    inputs,
    bit_widths=BIT_WIDTHS,
    tensor_kind: str = WEIGHT,
    bos_aware: bool = False,
    *,
    act_ranges=None,
    jobs: int = 1,
) -> SensitivityTable:
    """Score every (layer, bit_width) pair for one tensor kind."""
    if not inputs:
        raise ParameterError("sensitivity analysis needs a non-empty input set")
    bit_widths = tuple(sorted(set(int(b) for b in bit_widths)))
    if not bit_widths or any(b not in BIT_WIDTHS for b in bit_widths):
        raise ParameterError(f"bit widths must be a non-empty subset of {BIT_WIDTHS}")
    if tensor_kind not in TENSOR_KINDS:
        raise ParameterError(f"tensor_kind must be one of {TENSOR_KINDS}")

    refs = fp_references(model, inputs, bos_aware=bos_aware)
    if tensor_kind == ACTIVATION and act_ranges is None:
        act_ranges = toy_model.calibrate_activations(model, inputs, bos_aware=bos_aware)

    tasks = [(lid, b) for lid in model.layer_order for b in bit_widths]

    def run_one(task):
        lid, b = task
        ssim_score, sqnr_score = probe_layer(
            model, inputs, refs, lid, tensor_kind, b, bos_aware=bos_aware, act_ranges=act_ranges
        )
        group = model.layers[lid].group
        if group == toy_model.CONTENT:
            return SensitivityEntry(lid, tensor_kind, b, ssim_score, metrics.SSIM, len(refs))
        return SensitivityEntry(lid, tensor_kind, b, sqnr_score, metrics.SQNR_DB, len(refs))

    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            entries = list(pool.map(run_one, tasks))
    else:
        entries = [run_one(t) for t in tasks]
    return SensitivityTable(entries)


def rank_long_tail(table: SensitivityTable) -> list[tuple[str, float]]:
    """Layers ordered most-sensitive first: ascending score at the lowest bit-width."""
    low = min(table.bit_widths())
    scored = [(e.layer_id, e.score) for e in table.entries if e.bit_width == low]
    return sorted(scored, key=lambda pair: (pair[1], pair[0]))
