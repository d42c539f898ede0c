import json
import warnings

import numpy as np
import pytest

from reference_model import patch_forecast, token_forecast
from tsfm_lens.errors import BundleFormatError, ContextTruncatedWarning, PlanError, ShapeError
from tsfm_lens.model import (
    EMPTY_PLAN,
    AblationPlan,
    AblationTarget,
    ModelConfig,
    TokenizerConfig,
    forecast_quantiles,
    forward,
    head_contribution,
    init_weights,
    load_bundle,
    save_bundle,
    weight_shapes,
)
from tsfm_lens.numerics import Rng

from conftest import ctx_series, scaled_up


def test_init_reproducible_and_shapes(enc_dec):
    again = init_weights(enc_dec.config, Rng(11))
    assert enc_dec.digest() == again.digest()
    for name, shape in weight_shapes(enc_dec.config).items():
        assert enc_dec.weights[name].shape == shape
    other = init_weights(enc_dec.config, Rng(12))
    assert other.digest() != enc_dec.digest()


def test_init_mean_within_three_sigma(enc_dec):
    for name, w in enc_dec.weights.items():
        if name.endswith("norm") or np.all(w == 0):
            continue
        std = w.std()
        assert abs(w.mean()) < 3 * std / np.sqrt(w.size) + 1e-15, name


def test_weights_are_read_only(enc_dec):
    with pytest.raises(ValueError):
        enc_dec.weights["embed"][0, 0] = 1.0


def test_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(arch="rnn")
    with pytest.raises(ValueError):
        ModelConfig(n_heads=0)


@pytest.mark.parametrize("fixture,oracle", [("enc_dec", "token"), ("dec_only", "patch"), ("dec_quantile", "patch")])
def test_forward_matches_reference(fixture, oracle, request):
    bundle = scaled_up(request.getfixturevalue(fixture), 10.0)
    ctx = ctx_series(32)
    ts, _ = forward(bundle, ctx, horizon=8)
    if oracle == "token":
        ref, _ = token_forecast(bundle, ctx, 8)
        assert np.array_equal(ts.values[:, 0], ref)
    else:
        ref = patch_forecast(bundle, ctx, 8)
        assert np.max(np.abs(ts.values[:, 0] - ref)) < 1e-10


@pytest.mark.parametrize("fixture", ["enc_dec", "dec_only", "dec_quantile"])
def test_empty_plan_bit_identical(fixture, request):
    bundle = scaled_up(request.getfixturevalue(fixture))
    ctx = ctx_series(32)
    a, _ = forward(bundle, ctx, horizon=8)
    b, _ = forward(bundle, ctx, plan=EMPTY_PLAN, horizon=8)
    c, tr = forward(bundle, ctx, plan=AblationPlan([]), horizon=8, trace=True)
    assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()


@pytest.mark.parametrize("fixture", ["enc_dec", "dec_only"])
def test_entire_layer_equals_zero_weight_oracle(fixture, request):
    bundle = scaled_up(request.getfixturevalue(fixture))
    ctx = ctx_series(32)
    for layer in range(bundle.config.n_layers):
        a, ta = forward(bundle, ctx, plan=AblationPlan([(layer, "entire_layer")]), horizon=8, trace=True)
        b, tb = forward(bundle.zero_layer(layer), ctx, horizon=8, trace=True)
        assert np.max(np.abs(a.values - b.values)) <= 1e-12
        assert np.max(np.abs(ta.outputs - tb.outputs)) <= 1e-12


def test_entire_layer_matches_reference_skip(enc_dec):
    bundle = scaled_up(enc_dec, 10.0)
    ctx = ctx_series(32)
    a, _ = forward(bundle, ctx, plan=AblationPlan([(1, "entire_layer")]), horizon=8)
    ref, _ = token_forecast(bundle, ctx, 8, skip_layers=(1,))
    assert np.array_equal(a.values[:, 0], ref)


def test_all_heads_equals_union_of_heads(enc_dec):
    bundle = scaled_up(enc_dec)
    ctx = ctx_series(32)
    h = bundle.config.n_heads
    for kind in ("self", "cross"):
        a, _ = forward(bundle, ctx, plan=AblationPlan([(0, f"all_{kind}_heads")]), horizon=8)
        b, _ = forward(bundle, ctx, plan=AblationPlan([(0, f"{kind}_head", i) for i in range(h)]), horizon=8)
        assert a.values.tobytes() == b.values.tobytes()


def test_ablation_changes_output(enc_dec):
    bundle = scaled_up(enc_dec)
    ctx = ctx_series(32)
    _, base = forward(bundle, ctx, horizon=8, trace=True)
    _, abl = forward(bundle, ctx, plan=AblationPlan([(0, "mlp")]), horizon=8, trace=True)
    assert not np.array_equal(base.outputs, abl.outputs)
    assert np.all(abl.mlp_writes[:, 0] == 0)


def test_trace_residual_identity_and_head_sums(enc_dec, dec_only):
    for bundle in (scaled_up(enc_dec), scaled_up(dec_only)):
        _, tr = forward(bundle, ctx_series(32), horizon=8, trace=True)
        for l in range(bundle.config.n_layers):
            delta = tr.self_writes[:, l] + tr.mlp_writes[:, l]
            if tr.cross_writes is not None:
                delta = delta + tr.cross_writes[:, l]
            assert np.max(np.abs(tr.residuals[:, l + 1] - tr.residuals[:, l] - delta)) < 1e-10
            heads = sum(head_contribution(tr, l, h) for h in range(bundle.config.n_heads))
            assert np.max(np.abs(heads - tr.self_writes[:, l])) < 1e-10
        cols = tr.self_attn.sum(axis=-1)
        assert np.allclose(cols, 1.0, atol=1e-12)


def test_head_contribution_single_head_and_ablated():
    cfg = ModelConfig(arch="encoder_decoder", n_layers=1, n_heads=1, d_model=8, d_head=8, d_ff=16,
                      context_len=16, horizon=4, tokenizer=TokenizerConfig(16))
    bundle = init_weights(cfg, Rng(0))
    _, tr = forward(bundle, ctx_series(16), horizon=4, trace=True)
    assert np.array_equal(head_contribution(tr, 0, 0), tr.self_writes[:, 0])
    _, tr2 = forward(bundle, ctx_series(16), plan=AblationPlan([(0, "self_head", 0)]), horizon=4, trace=True)
    assert np.all(head_contribution(tr2, 0, 0) == 0)


def test_plan_errors(enc_dec, dec_only):
    with pytest.raises(PlanError):
        forward(enc_dec, ctx_series(32), plan=AblationPlan([(5, "mlp")]))
    with pytest.raises(PlanError):
        forward(enc_dec, ctx_series(32), plan=AblationPlan([(0, "self_head", 9)]))
    with pytest.raises(PlanError):
        forward(dec_only, ctx_series(32), plan=AblationPlan([(0, "all_cross_heads")]))
    with pytest.raises(PlanError):
        AblationTarget(0, "self_head")
    with pytest.raises(PlanError):
        AblationTarget(0, "bogus")


def test_plan_json_roundtrip_and_union():
    p = AblationPlan([(0, "self_head", 1), (1, "mlp"), (0, "self_head", 1)])
    assert len(p) == 2
    back = AblationPlan.from_json(json.loads(json.dumps(p.to_json())))
    assert back == p
    assert p.union(AblationPlan([(2, "entire_layer")])).to_json()[-1] == {"layer": 2, "component": "entire_layer"}


def test_context_truncation_warns(enc_dec):
    long = ctx_series(80)
    with warnings.catch_warnings(record=True) as rec:
        warnings.simplefilter("always")
        a, tr = forward(enc_dec, long, horizon=4, trace=True)
    assert any(issubclass(w.category, ContextTruncatedWarning) for w in rec)
    assert tr.warnings
    b, _ = forward(enc_dec, long[-32:], horizon=4)
    assert np.array_equal(a.values, b.values)


def test_forecast_quantiles_shape(dec_quantile):
    q = forecast_quantiles(dec_quantile, ctx_series(32), horizon=8)
    assert q.shape == (8, 9)


def test_save_load_roundtrip_and_rejections(tmp_path, enc_dec, dec_only):
    path = tmp_path / "m.json"
    save_bundle(enc_dec, path)
    back = load_bundle(path)
    assert back.digest() == enc_dec.digest()
    for k in enc_dec.weights:
        assert np.array_equal(back.weights[k], enc_dec.weights[k])
    with pytest.raises(BundleFormatError):
        load_bundle(path, expected_config=dec_only.config)
    doc = json.loads(path.read_text())
    doc["format_version"] = 99
    (tmp_path / "bad.json").write_text(json.dumps(doc))
    with pytest.raises(BundleFormatError):
        load_bundle(tmp_path / "bad.json")
    (tmp_path / "junk.json").write_text("[1, 2]")
    with pytest.raises(BundleFormatError):
        load_bundle(tmp_path / "junk.json")


def test_bundle_shape_validation(enc_dec):
    with pytest.raises(ShapeError):
        enc_dec.with_weights({"embed": np.zeros((3, 3))})
    bad = dict(enc_dec.weights)
    bad.pop("w_out")
    with pytest.raises(ShapeError):
        type(enc_dec)(enc_dec.config, bad)
