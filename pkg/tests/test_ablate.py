import math

import numpy as np
import pytest

from tsfm_lens import ablate
from tsfm_lens.errors import PlanError
from tsfm_lens.evalmetrics import geometric_mean, spearman_distance
from tsfm_lens.model import AblationPlan, ModelConfig, PatchConfig, init_weights
from tsfm_lens.numerics import Rng
from tsfm_lens.synthdata import gen_seasonal

from conftest import SMALL, scaled_up


@pytest.fixture
def cases(seasonal_data):
    return ablate.make_cases(seasonal_data, 32, 8)


@pytest.fixture
def live(dec_only):
    return scaled_up(dec_only, 10.0)


def test_make_cases_split(seasonal_data):
    cs = ablate.make_cases(seasonal_data, 32, 8)
    v = seasonal_data[0].values[:, 0]
    assert np.array_equal(cs[0].actual, v[-8:])
    assert np.array_equal(cs[0].context.values[:, 0], v[-40:-8])
    assert cs[0].season == 12
    with pytest.raises(ValueError):
        ablate.make_cases(seasonal_data, 200, 8)


def test_stable_rank_fixtures(dec_only):
    cfg = dec_only.config
    d, dh = cfg.d_model, cfg.d_head
    eye = np.zeros((cfg.n_heads, d, dh))
    eye[:, :dh, :] = np.eye(dh)
    rank1 = np.zeros((cfg.n_heads, d, dh))
    rank1[:, 0, 0] = 1.0
    b = dec_only.with_weights({"dec.0.sa.wq": eye, "dec.0.sa.wk": eye, "dec.1.sa.wq": rank1, "dec.1.sa.wk": eye})
    assert ablate.head_stable_ranks(b, 0) == [float(dh)] * cfg.n_heads
    assert ablate.head_stable_ranks(b, 1) == [1.0] * cfg.n_heads
    qk = ablate.qk_matrix(dec_only, 0, 1)
    oracle = np.linalg.norm(qk, "fro") ** 2 / np.linalg.norm(qk, 2) ** 2
    assert abs(ablate.head_stable_ranks(dec_only, 0)[1] - oracle) < 1e-10
    unscaled = dec_only.weights["dec.0.sa.wq"][1] @ dec_only.weights["dec.0.sa.wk"][1].T
    assert abs(oracle - np.linalg.norm(unscaled, "fro") ** 2 / np.linalg.norm(unscaled, 2) ** 2) < 1e-9


def test_orderings(dec_only):
    sr = ablate.head_stable_ranks(dec_only, 0)
    desc = ablate.head_ordering(dec_only, 0, "srank_desc")
    asc = ablate.head_ordering(dec_only, 0, "srank_asc")
    assert sr[desc.order[0]] >= sr[desc.order[-1]]
    assert desc.order == tuple(reversed(asc.order))
    assert desc.keep_set(1) == (desc.order[-1],)
    assert desc.plan(desc.n_heads).is_empty
    assert len(desc.plan(0)) == desc.n_heads
    r1 = ablate.head_ordering(dec_only, 0, "random", rng=Rng(4))
    r2 = ablate.head_ordering(dec_only, 0, "random", rng=Rng(4))
    assert r1.order == r2.order
    with pytest.raises(ValueError):
        ablate.head_ordering(dec_only, 0, "random")
    with pytest.raises(PlanError):
        ablate.HeadOrdering(0, (0, 0), "srank_desc")


def test_heads1pp_k_zero_when_heads_inert(live, cases):
    inert = live.with_weights({"dec.0.sa.wo": np.zeros_like(live.weights["dec.0.sa.wo"])})
    res = ablate.heads_at_1pp(inert, cases, 0, ablate.head_ordering(inert, 0, "srank_desc"))
    assert res.k == 0 and res.errors == [res.baseline]


def test_heads1pp_single_essential_head(seasonal_data):
    cfg = ModelConfig(arch="decoder_only", patch=PatchConfig(4), **{**SMALL, "n_heads": 1, "d_head": 16})
    bundle = scaled_up(init_weights(cfg, Rng(2)), 10.0)
    cs = ablate.make_cases(seasonal_data, 32, 8)
    for strategy in ("srank_desc", "srank_asc"):
        res = ablate.heads_at_1pp(bundle, cs, 0, ablate.head_ordering(bundle, 0, strategy))
        assert res.rel_change(0) > 0.01
        assert res.k == 1 and res.ablated == res.baseline


def test_heads1pp_scan_against_exhaustive(live, cases):
    for layer in range(live.config.n_layers):
        ordering = ablate.head_ordering(live, layer, "srank_desc")
        res = ablate.heads_at_1pp(live, cases, layer, ordering)
        table = ablate.exhaustive_keep_errors(live, cases, layer)
        e0 = table[frozenset(range(live.config.n_heads))]
        assert e0 == res.baseline
        ok = [k for k in range(ordering.n_heads + 1)
              if (table[frozenset(ordering.keep_set(k))] - e0) / e0 <= 0.01]
        assert res.k == min(ok)


def test_heads1pp_layer_mismatch(live, cases):
    with pytest.raises(PlanError):
        ablate.heads_at_1pp(live, cases, 1, ablate.head_ordering(live, 0, "srank_desc"))


def test_layer_sweep_rows_and_control(live, cases):
    rep = ablate.layer_sweep(live, cases)
    L = live.config.n_layers
    for target in ablate.SWEEP_TARGETS:
        assert sum(r.target == target for r in rep.rows) == L
    control = rep.rows[0]
    assert control.target == "none" and control.group == "control"
    assert control.ablated == control.baseline and control.spearman_distance == 0.0
    assert rep.to_csv().splitlines()[0] == ",".join(ablate.SWEEP_COLUMNS)


def test_layer_sweep_zero_layer_is_noop(live, cases):
    z = live.zero_layer(1)
    rep = ablate.layer_sweep(z, cases, targets=("entire_layer",), control=False)
    row = [r for r in rep.rows if r.layer == 1][0]
    assert row.pct_change == 0.0 and row.spearman_distance == 0.0


def test_layer_sweep_recompute_from_stored_forecasts(live, cases):
    rep = ablate.layer_sweep(live, cases, group_size=2, window=8)
    for row in rep.rows:
        preds = rep.forecasts[(row.group, row.target)]
        dist = np.mean([spearman_distance(rep.baseline_forecasts[c.name], preds[c.name]) for c in cases])
        err = geometric_mean([ablate.case_metric("mase", preds[c.name], c, 8) for c in cases])
        assert abs(dist - row.spearman_distance) < 1e-15
        assert abs(err - row.ablated) < 1e-15
    assert [r.group for r in rep.rows] == ["control", "0-1", "0-1", "0-1"]


def test_layer_sweep_jobs_deterministic(live, cases):
    a = ablate.layer_sweep(live, cases, jobs=1).to_csv()
    b = ablate.layer_sweep(live, cases, jobs=3).to_csv()
    assert a == b


def test_build_plan_percentages():
    cfg = ModelConfig(arch="decoder_only", n_layers=20, n_heads=16, d_model=32, d_head=2, d_ff=8,
                      context_len=16, horizon=4, patch=PatchConfig(4))
    bundle = init_weights(cfg, Rng(0))
    layers = [1, 3, 5, 7, 9, 11, 13]
    orderings = {l: ablate.head_ordering(bundle, l, "srank_desc") for l in layers}
    s = ablate.build_plan(bundle, {l: 12 for l in layers}, orderings)
    assert s.n_ablated == 28 and s.n_total == 320 and abs(s.pct_ablated - 8.75) < 1e-12
    keep_all = ablate.build_plan(bundle, {l: 16 for l in layers}, orderings)
    assert keep_all.plan.is_empty
    back = AblationPlan.from_json(s.plan.to_json())
    assert back == s.plan
    with_mlp = ablate.build_plan(bundle, {1: 16}, {1: orderings[1]}, mlp_layers=(2,))
    assert with_mlp.plan.to_json() == [{"layer": 2, "component": "mlp"}]
    with pytest.raises(PlanError):
        ablate.build_plan(bundle, {2: 3}, {})


def test_baseline_cache_keyed_by_content(live, cases):
    e1 = ablate.baseline_error(live, cases)
    other = scaled_up(live, 1.5)
    assert ablate.baseline_error(other, cases) != e1
    assert ablate.baseline_error(live, cases) == e1
    assert not math.isnan(e1)


def test_seasonal_case_season_clamped():
    s = gen_seasonal(Rng(0), 200, [(48, 1.0, 0.0)], 0.0)
    assert ablate.make_cases([s], 32, 8)[0].season == 1
