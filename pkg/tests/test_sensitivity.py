import numpy as np
import pytest

from mixprec import metrics, quantizer, sensitivity as sv, toy_model as tm
from mixprec.errors import ParameterError, ValidationError


def test_table_completeness(model, weight_table):
    weight_table.validate_complete(model.layer_order, (2, 4, 8), "weight")
    assert len(weight_table.entries) == len(model.layer_order) * 3


def test_metric_kind_follows_group(model, weight_table):
    for e in weight_table.entries:
        group = model.layers[e.layer_id].group
        expected = metrics.SSIM if group == tm.CONTENT else metrics.SQNR_DB
        assert e.metric_kind == expected
        assert e.n_inputs == 32


def test_on_grid_weight_scores_perfect(model, small_inputs):
    # craft weights that min-max calibration reproduces exactly at 8 bits
    content_id, quality_id = "mid.ffn.fc1", "enc0.res0.conv"
    saved = {lid: model.layers[lid].weight.copy() for lid in (content_id, quality_id)}
    try:
        step = 2.0**-5
        rng = np.random.Generator(np.random.Philox(3))
        for lid in (content_id, quality_id):
            w = model.layers[lid].weight
            flat = w.reshape(w.shape[0], -1)
            codes = rng.integers(0, 256, size=flat.shape).astype(np.float64)
            codes[:, 0] = 0.0
            codes[:, 1] = 255.0
            flat[...] = codes * step
            model._fq_weights.clear()
        refs = sv.fp_references(model, small_inputs)
        ssim_score, _ = sv.probe_layer(model, small_inputs, refs, content_id, "weight", 8)
        _, sqnr_score = sv.probe_layer(model, small_inputs, refs, quality_id, "weight", 8)
        assert ssim_score == pytest.approx(1.0, abs=1e-12)
        assert sqnr_score == 100.0
    finally:
        for lid, w in saved.items():
            model.layers[lid].weight[...] = w
        model._fq_weights.clear()


def test_analyze_rejects_bad_args(model, small_inputs):
    with pytest.raises(ParameterError):
        sv.analyze(model, [])
    with pytest.raises(ParameterError):
        sv.analyze(model, small_inputs, bit_widths=(3,))
    with pytest.raises(ParameterError):
        sv.analyze(model, small_inputs, tensor_kind="bias")


def test_analyze_deterministic_rerun(model, small_inputs):
    a = sv.analyze(model, small_inputs, bit_widths=(4,), tensor_kind="weight")
    b = sv.analyze(model, small_inputs, bit_widths=(4,), tensor_kind="weight")
    assert a.entries == b.entries


def test_analyze_parallel_matches_serial(model, small_inputs):
    a = sv.analyze(model, small_inputs, bit_widths=(4, 8), tensor_kind="weight", jobs=1)
    b = sv.analyze(model, small_inputs, bit_widths=(4, 8), tensor_kind="weight", jobs=4)
    assert a.entries == b.entries


def test_fp_reference_reuse_identical(model, small_inputs):
    first = sv.fp_references(model, small_inputs)
    second = sv.fp_references(model, small_inputs)
    for a, b in zip(first, second):
        assert sv.output_checksum(a) == sv.output_checksum(b)


def test_single_fault_isolation(model, small_inputs):
    # a probe config quantizes exactly one tensor of one layer
    cfg = tm.QuantConfig.all_fp(model.layer_order)
    cfg.weight_bits["enc0.conv_in"] = 4
    quantized = [lid for lid, b in cfg.weight_bits.items() if b is not None]
    quantized += [lid for lid, b in cfg.act_bits.items() if b is not None]
    assert quantized == ["enc0.conv_in"]


def test_rank_long_tail_ordering(weight_table):
    ranked = sv.rank_long_tail(weight_table)
    scores = [s for _, s in ranked]
    assert scores == sorted(scores)
    again = sv.rank_long_tail(weight_table)
    assert ranked == again


def test_rank_long_tail_tie_break():
    entries = [
        sv.SensitivityEntry("b", "weight", 2, 0.5, metrics.SSIM, 1),
        sv.SensitivityEntry("a", "weight", 2, 0.5, metrics.SSIM, 1),
        sv.SensitivityEntry("c", "weight", 2, 0.1, metrics.SSIM, 1),
    ]
    ranked = sv.rank_long_tail(sv.SensitivityTable(entries))
    assert [lid for lid, _ in ranked] == ["c", "a", "b"]


def test_rank_uses_lowest_bit_width(weight_table):
    low = min(weight_table.bit_widths())
    assert low == 2
    ranked = sv.rank_long_tail(weight_table)
    by_id = {e.layer_id: e.score for e in weight_table.entries if e.bit_width == low}
    assert all(by_id[lid] == score for lid, score in ranked)


def test_jsonl_roundtrip(weight_table):
    text = weight_table.to_jsonl()
    back = sv.SensitivityTable.from_jsonl(text)
    assert back.entries == weight_table.entries


def test_validate_rejects_incomplete(model, weight_table):
    broken = sv.SensitivityTable(weight_table.entries[:-1])
    with pytest.raises(ValidationError):
        broken.validate_complete(model.layer_order, (2, 4, 8), "weight")
    doubled = sv.SensitivityTable(weight_table.entries + weight_table.entries[:1])
    with pytest.raises(ValidationError):
        doubled.validate_complete(model.layer_order, (2, 4, 8), "weight")


def test_content_layers_take_lowest_ssim_end(model, small_inputs):
    # at 2 bits, the most content-destroying layers are cross-attention/ffn
    refs = sv.fp_references(model, small_inputs)
    ssim_by_layer = {}
    for lid in model.layer_order:
        ssim_score, _ = sv.probe_layer(model, small_inputs, refs, lid, "weight", 2)
        ssim_by_layer[lid] = ssim_score
    worst = min(ssim_by_layer, key=ssim_by_layer.get)
    assert model.layers[worst].group == tm.CONTENT
    content = [s for lid, s in ssim_by_layer.items() if model.layers[lid].group == tm.CONTENT]
    quality = [s for lid, s in ssim_by_layer.items() if model.layers[lid].group == tm.QUALITY]
    assert np.mean(content) < np.mean(quality)


def test_kv_activation_sensitivity_relaxes_with_bos_handling(model, small_inputs):
    kv = [
        lid
        for lid in model.layer_order
        if model.layers[lid].kind in (tm.LayerKind.CROSS_ATTN_TO_K, tm.LayerKind.CROSS_ATTN_TO_V)
    ]

    def kv_scores(bos):
        refs = sv.fp_references(model, small_inputs, bos_aware=bos)
        ranges = tm.calibrate_activations(model, small_inputs, bos_aware=bos)
        out = {}
        for lid in kv:
            s, _ = sv.probe_layer(
                model, small_inputs, refs, lid, "activation", 8, bos_aware=bos, act_ranges=ranges
            )
            out[lid] = s
        return out

    off, on = kv_scores(False), kv_scores(True)
    assert all(on[lid] >= off[lid] for lid in kv)
    assert sum(on.values()) > sum(off.values())
