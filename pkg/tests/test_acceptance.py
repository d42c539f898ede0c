"""One test group per acceptance criterion; the terminal summary prints a pass/fail line for each."""

import csv
import json
import math
import os
import time

import jsonschema
import mpmath
import numpy as np
import pytest
from scipy.integrate import solve_ivp
from scipy.special import softmax

from tsfm_lens import ablate, cli, lens, schemas, verify
from tsfm_lens import kernel as K
from tsfm_lens.evalmetrics import crps_from_quantiles, mase, spearman_distance
from tsfm_lens.model import (
    EMPTY_PLAN,
    AblationPlan,
    ModelConfig,
    PatchConfig,
    TokenizerConfig,
    forward,
    head_contribution,
    init_weights,
    load_bundle,
)
from tsfm_lens.numerics import Rng, stable_rank
from tsfm_lens.synthdata import OdeSpec, gen_seasonal, integrate_rk4
from tsfm_lens.train import TrainConfig, eval_loss, sample_examples, train

from conftest import ctx_series, scaled_up
from test_lens import gram_oracle

acc = pytest.mark.acceptance


# --- 1. tilt factorization ---------------------------------------------------------

@acc(1)
def test_tilt_factorization_identity():
    rng = Rng(101)
    t0 = time.perf_counter()
    worst = 0.0
    for _ in range(200):
        head = K.random_head(rng)
        assert head.dim <= 32
        c = rng.integers(1, 65)
        hq, hk = rng.normal(head.dim), rng.normal((c, head.dim))
        oracle = softmax(hk @ head.m.T @ hq)
        worst = max(worst, float(np.max(np.abs(K.tilt_factorization(head, hq, hk) - oracle))))
    elapsed = time.perf_counter() - t0
    print(f"tilt: max_abs={worst:.3e} time={elapsed:.2f}s")
    assert worst < 1e-10 and elapsed < 10.0


# --- 2. NW equivalence -------------------------------------------------------------

@acc(2)
def test_nw_equivalence_equal_norm_keys():
    rng = np.random.default_rng(102)
    worst = 0.0
    for _ in range(500):
        d, c = rng.integers(1, 65), rng.integers(1, 65)
        keys = rng.normal(size=(c, d))
        keys *= rng.uniform(0.5, 2.5) / np.linalg.norm(keys, axis=1, keepdims=True)
        q = rng.normal(size=d)
        attn = softmax(keys @ q / math.sqrt(d))
        tau = math.sqrt(d)
        nw = softmax(-np.sum((keys - q) ** 2, axis=1) / (2 * tau))
        assert np.max(np.abs(attn - nw)) < 1e-12
        worst = max(worst, float(np.max(np.abs(K.nw_weights(q, keys, tau) - attn))),
                    K.attention_vs_nw(q, keys, d))
    print(f"nw: max_abs={worst:.3e}")
    assert worst < 1e-10


# --- 3. concentration bound --------------------------------------------------------

def exact_log_residual(row, j, beta):
    with mpmath.workdps(40):
        z = [mpmath.mpf(float(x)) * beta for x in row]
        rest = mpmath.fsum(mpmath.exp(v) for k, v in enumerate(z) if k != j)
        return float(mpmath.log(rest / (rest + mpmath.exp(z[j]))))


def oracle_bound(inst, r):
    """lhs in 40-digit arithmetic and both right-hand sides from numpy's SVD."""
    u, s, vt = np.linalg.svd(inst.head.m)
    m_r = (u[:, :r] * s[:r]) @ vt[:r]
    full = inst.queries @ inst.head.m @ inst.keys.T
    trunc = inst.queries @ m_r @ inst.keys.T
    rho = float(np.sum(s[r:] ** 2))
    mqk = 2 * np.linalg.norm(inst.queries, axis=1).max() * np.linalg.norm(inst.keys, axis=1).max()
    tail = math.sqrt(rho) * mqk
    # any backward-stable SVD fixes the tail singular values only to about eps * sigma_max
    tail_tol = inst.beta * mqk * 64 * np.finfo(float).eps * s[0]
    log_c, beta = math.log(inst.keys.shape[0] - 1), inst.beta
    out = []
    for i in range(full.shape[0]):
        js = int(np.argmax(trunc[i]))
        assert js == int(np.argmax(full[i]))
        gamma = full[i, js] - np.max(np.delete(full[i], js))
        gamma_r = trunc[i, js] - np.max(np.delete(trunc[i], js))
        lhs = exact_log_residual(full[i], js, beta)
        out.append((lhs, log_c - beta * gamma, log_c - beta * (gamma_r - tail), 3e-9 * beta * (gamma_r + np.abs(trunc[i]).max()) + tail_tol))
    return rho, out


@acc(3)
def test_bound_zero_violations_and_runtime():
    records = []
    t0 = time.perf_counter()
    res = verify.bound_suite(1000, 20, records=records)
    elapsed = time.perf_counter() - t0
    print(f"bound suite: {len(records)} instances in {elapsed:.1f}s, failures={res.failures}")
    assert res.passed and elapsed < 60.0
    assert len(records) == 1000 and all(r["assumptions_ok"] and r["holds"] for r in records)
    fams = [r["family"] for r in records]
    assert fams.count("rank_deficient") == 500 and fams.count("spectral_tail") == 500


@acc(3)
def test_bound_independent_recompute():
    violations, n_queries = 0, 0
    for inst in verify.bound_instances(1000):
        pkg = K.verify_bound(inst)
        rho, rows = oracle_bound(inst, pkg.r)
        if inst.family == "rank_deficient":
            assert rho < 1e-20
        else:
            assert rho > 0
        for (lhs, rg, rt, tol), p_lhs, p_rt in zip(rows, pkg.log_lhs, pkg.log_rhs_truncated):
            n_queries += 1
            violations += not (lhs <= rg + 1e-9 and lhs <= rt + 1e-9)
            assert abs(lhs - p_lhs) <= 1e-9 * max(1.0, abs(lhs))
            # the package shrinks a and d by a relative 1e-9 to keep the assumptions strict
            assert abs(p_rt - rt) <= tol + 1e-12
    print(f"oracle: {n_queries} queries, violations={violations}")
    assert violations == 0


@acc(3)
def test_bound_beta_slopes():
    for inst in verify.bound_instances(20, 5000):
        s = K.beta_slopes(inst)
        i = K.verify_bound(inst).worst
        q = K.measure(inst, inst.head.r)[0][i]
        row = inst.queries[i] @ inst.head.m @ inst.keys.T
        oracle = np.polyfit(s.betas, [exact_log_residual(row, q.j_star, b) for b in s.betas], 1)[0]
        assert abs(s.slope_lhs - oracle) <= 1e-6 * abs(oracle)
        # the log residual mass falls at least as fast as -gamma
        assert s.slope_lhs <= -q.gamma * (1 - 1e-9)
        assert s.ok and s.slope_lhs <= s.slope_generic + 1e-9 and s.slope_lhs <= s.slope_truncated + 1e-9


# --- 4. stable rank ----------------------------------------------------------------

@acc(4)
def test_stable_rank_properties():
    for n in (1, 2, 5, 17, 32):
        assert stable_rank(np.eye(n)) == n
    rng = np.random.default_rng(104)
    worst = 0.0
    for i in range(500):
        m, n = rng.integers(1, 20, size=2)
        k = rng.integers(1, min(m, n) + 1)
        a = rng.normal(size=(m, k)) @ rng.normal(size=(k, n)) * 10.0 ** rng.uniform(-3, 3)
        sr = stable_rank(a)
        rank = np.linalg.matrix_rank(a)
        assert 1.0 - 1e-12 <= sr <= rank + 1e-9, (i, sr, rank)
        oracle = np.linalg.norm(a, "fro") ** 2 / np.linalg.norm(a, 2) ** 2
        assert abs(sr - oracle) <= 1e-9 * oracle
        for c in (1e-4, 3.7, 2.0 ** 20):
            worst = max(worst, abs(stable_rank(c * a) - sr))
    print(f"stable rank: max scale deviation={worst:.3e}")
    assert worst < 1e-9


# --- 5. entropic rank --------------------------------------------------------------

@acc(5)
def test_entropic_rank_fixtures_and_oracle():
    for h in (2, 3, 5):
        orth = np.tile(np.eye(h, 8) * 2.0, (3, 1, 1))
        assert abs(lens.entropic_rank_from_vectors(orth) - h) < 1e-6
        base = np.random.default_rng(h).normal(size=8)
        coll = np.tile(np.outer(np.arange(1, h + 1), base), (3, 1, 1))
        assert abs(lens.entropic_rank_from_vectors(coll) - 1.0) < 1e-3
    rng = np.random.default_rng(105)
    worst = 0.0
    for _ in range(100):
        h = rng.integers(2, 9)
        v = rng.normal(size=(rng.integers(1, 6), h, rng.integers(2, 17)))
        r = lens.entropic_rank_from_vectors(v)
        assert 1.0 - 1e-12 <= r <= h + 1e-12
        worst = max(worst, abs(r - gram_oracle(v)))
    print(f"entropic rank: max oracle deviation={worst:.3e}")
    assert worst < 1e-8


# --- 6. ablation identities --------------------------------------------------------

def _models():
    small = dict(n_layers=2, n_heads=2, d_model=16, d_head=8, d_ff=32, context_len=32, horizon=8)
    return [
        scaled_up(init_weights(ModelConfig(arch="encoder_decoder", tokenizer=TokenizerConfig(32), **small), Rng(61))),
        scaled_up(init_weights(ModelConfig(arch="decoder_only", patch=PatchConfig(4), **small), Rng(62))),
        scaled_up(init_weights(ModelConfig(arch="decoder_only", patch=PatchConfig(4), quantile_head=True,
                                           **small), Rng(63))),
    ]


@acc(6)
def test_empty_plan_bit_identical():
    for bundle in _models():
        ctx = ctx_series(32, 9)
        a, _ = forward(bundle, ctx, horizon=8)
        b, _ = forward(bundle, ctx, plan=EMPTY_PLAN, horizon=8)
        c, _ = forward(bundle, ctx, plan=AblationPlan([]), horizon=8, trace=True)
        assert a.values.tobytes() == b.values.tobytes() == c.values.tobytes()


@acc(6)
def test_entire_layer_equals_zero_weight_model():
    for bundle in _models()[:2]:
        ctx = ctx_series(32, 9)
        for layer in range(bundle.config.n_layers):
            a, ta = forward(bundle, ctx, plan=AblationPlan([(layer, "entire_layer")]), horizon=8, trace=True)
            b, tb = forward(bundle.zero_layer(layer), ctx, horizon=8, trace=True)
            assert np.max(np.abs(a.values - b.values)) <= 1e-12
            assert np.max(np.abs(ta.outputs - tb.outputs)) <= 1e-12


@acc(6)
def test_head_contributions_sum_to_writes():
    for bundle in _models():
        _, tr = forward(bundle, ctx_series(32, 9), horizon=8, trace=True)
        for layer in range(bundle.config.n_layers):
            total = sum(head_contribution(tr, layer, h) for h in range(bundle.config.n_heads))
            assert np.max(np.abs(total - tr.self_writes[:, layer])) < 1e-10


# --- 7. heads@1pp ------------------------------------------------------------------

@pytest.fixture(scope="module")
def trained_two_head():
    cfg = ModelConfig(arch="encoder_decoder", n_layers=2, n_heads=2, d_model=16, d_head=8, d_ff=32,
                      context_len=48, horizon=8, tokenizer=TokenizerConfig(64))
    rng = Rng(70)
    data = [gen_seasonal(rng, 240, [(12, 1.0, 0.4 * i), (5, 0.3, 0.0)], 0.05, f"s{i}") for i in range(4)]
    res = train(init_weights(cfg, Rng(71)), data, TrainConfig(loss="cross_entropy", lr=3e-3, steps=80,
                                                               batch_size=4, seed=72))
    assert res.curve[-1] < res.curve[0]
    return res.bundle, ablate.make_cases(data, 48, 8)


@acc(7)
@pytest.mark.parametrize("kind", ["self", "cross"])
def test_heads1pp_matches_exhaustive(trained_two_head, kind):
    bundle, cases = trained_two_head
    for layer in range(bundle.config.n_layers):
        table = ablate.exhaustive_keep_errors(bundle, cases, layer, kind=kind)
        e0 = table[frozenset(range(2))]
        for strategy in ("srank_desc", "srank_asc"):
            ordering = ablate.head_ordering(bundle, layer, strategy, kind=kind)
            res = ablate.heads_at_1pp(bundle, cases, layer, ordering)
            rel = [(table[frozenset(ordering.keep_set(k))] - e0) / e0 for k in range(3)]
            expected = min(k for k in range(3) if rel[k] <= 0.01)
            print(f"{kind} layer {layer} {strategy}: k={res.k} rel={['%.4f' % x for x in rel]}")
            assert res.k == expected
            if res.k > 0:
                assert rel[res.k - 1] > 0.01 and res.rel_change(res.k - 1) > 0.01


# --- 8. gradients ------------------------------------------------------------------

@acc(8)
def test_gradient_check_every_parameter():
    t0 = time.perf_counter()
    res = verify.gradients_suite(0)
    elapsed = time.perf_counter() - t0
    for c in res.cases:
        print(f"{c['case']}: {c['n_params']} entries, worst rel {c['worst_rel_error']:.2e}")
    losses = {c["case"].split(":")[1] for c in res.cases}
    assert losses == {"cross_entropy", "mse", "quantile"}
    for cfg, _ in verify.gradient_configs():
        assert cfg.n_layers == 2 and cfg.d_model == 16
    n_weights = [sum(np.size(v) for v in init_weights(cfg, Rng(1)).weights.values())
                 for cfg, _ in verify.gradient_configs()]
    assert [c["n_params"] for c in res.cases] == n_weights
    assert res.passed, res.failures
    assert elapsed < 300.0


# --- 9. desk-scale pipeline ---------------------------------------------------------

E2E_SEED = 2024
E2E_MODEL = ["--arch", "encoder_decoder", "--layers", "4", "--heads", "4", "--d-model", "64", "--vocab", "512",
             "--context-len", "64", "--horizon", "16", "--steps", "300", "--lr", "1e-3", "--batch-size", "8"]


def _pipeline(root):
    """Run the full command sequence with relative paths inside ``root``."""
    os.chdir(root)
    seed = ["--seed", str(E2E_SEED)]
    data = ["--data", "data/train.json"]
    steps = [
        ["gen-data", "--system", "seasonal", "--n", "400", "--count", "8", "--period", "12", "30",
         "--noise", "0.05", "--out", "data/train.json"],
        ["gen-data", "--system", "seasonal", "--n", "400", "--count", "4", "--period", "12", "30",
         "--noise", "0.05", "--out", "data/eval.json", "--seed", str(E2E_SEED + 100)],
        ["train", *data, "--out-dir", "model", *E2E_MODEL],
        ["sweep-layers", "--model", "model/model.json", "--data", "data/eval.json", "--out-dir", "sweep"],
        ["heads1pp", "--model", "model/model.json", "--data", "data/eval.json", "--out-dir", "heads1pp"],
        ["lens", "--model", "model/model.json", "--data", "data/eval.json", "--out-dir", "lens"],
        ["rrt", "--model", "model/model.json", "--out-dir", "rrt", "--motif-len", "16", "--repeats", "4"],
    ]
    for argv in steps:
        argv = argv if "--seed" in argv else argv + seed
        assert cli.main(argv) == 0, argv


EXPECTED = {
    "model": ["loss_curve.csv", "manifest.json", "model.json"],
    "sweep": ["manifest.json", "sweep.csv", "sweep_forecasts.json"],
    "heads1pp": ["heads1pp.csv", "heads1pp.json", "manifest.json"],
    "lens": ["entropy_curve.csv", "lens.json", "logit_map.csv", "manifest.json", "rollout.csv", "truncated.csv"],
    "rrt": ["manifest.json", "rrt.json", "rrt_profiles.csv"],
}


@pytest.fixture(scope="module")
def e2e(tmp_path_factory):
    cwd = os.getcwd()
    roots = [tmp_path_factory.mktemp("run_a"), tmp_path_factory.mktemp("run_b")]
    t0 = time.perf_counter()
    try:
        for r in roots:
            _pipeline(r)
    finally:
        os.chdir(cwd)
    return roots, time.perf_counter() - t0


@acc(9)
def test_e2e_runtime_and_files(e2e):
    roots, elapsed = e2e
    print(f"two full pipeline runs in {elapsed:.0f}s")
    assert elapsed / 2 < 30 * 60
    for sub, names in EXPECTED.items():
        assert sorted(os.listdir(roots[0] / sub)) == names, sub


@acc(9)
def test_e2e_trained_cross_entropy(e2e):
    root = e2e[0][0]
    bundle = load_bundle(root / "model" / "model.json")
    cfg = bundle.config
    assert (cfg.n_layers, cfg.n_heads, cfg.d_model, cfg.tokenizer.vocab_size) == (4, 4, 64, 512)
    rng = Rng(9)
    held_out = [gen_seasonal(rng, 400, [(12, 1.0, 2 * math.pi * rng.uniform()),
                                        (30, 0.5, 2 * math.pi * rng.uniform())], 0.05) for _ in range(4)]
    batch = sample_examples(bundle, held_out, 32, Rng(10))
    ce = eval_loss(bundle, batch, TrainConfig(loss="cross_entropy"))
    print(f"held-out CE={ce:.3f} target < {math.log(512) - 0.5:.3f}")
    assert ce < math.log(512) - 0.5


@acc(9)
def test_e2e_schema_valid(e2e):
    root = e2e[0][0]
    for sub, names in EXPECTED.items():
        for name in names:
            path = root / sub / name
            if name.endswith(".json"):
                jsonschema.validate(json.loads(path.read_text()), schemas.JSON_REPORTS[name])
            else:
                with open(path) as fh:
                    rows = list(csv.reader(fh))
                assert schemas.header_matches(name, rows[0]) and len(rows) > 1, name
    heads = json.loads((root / "heads1pp" / "heads1pp.json").read_text())
    assert {r["strategy"] for r in heads["results"]} == {"srank_desc", "srank_asc", "random"}
    lens_doc = json.loads((root / "lens" / "lens.json").read_text())
    assert len(lens_doc["entropic_rank"]) == 4
    assert all(1.0 <= r <= 4.0 for r in lens_doc["entropic_rank"])
    sweep = list(csv.DictReader(open(root / "sweep" / "sweep.csv")))
    for target in ablate.SWEEP_TARGETS:
        assert sum(r["target"] == target for r in sweep) == 4


@acc(9)
def test_e2e_byte_reproducible(e2e):
    a, b = e2e[0]
    for sub, names in EXPECTED.items():
        for name in names:
            x, y = (a / sub / name).read_bytes(), (b / sub / name).read_bytes()
            if name == "manifest.json":
                x, y = json.loads(x), json.loads(y)
                x.pop("wall_time"), y.pop("wall_time")
            assert x == y, f"{sub}/{name}"


# --- 10. metrics -------------------------------------------------------------------

@acc(10)
def test_spearman_conventions():
    assert spearman_distance([1, 2, 3, 4], [7, 7, 7, 7]) == 1.0
    assert spearman_distance([2, 2, 2], [2, 2, 2]) == 1.0
    assert spearman_distance([1, 2, 3, 4], [9, 5, 1, -3]) == 2.0
    assert spearman_distance([1, 2, 3, 4], [1, 4, 9, 16]) == 0.0


@acc(10)
def test_mase_scale_invariance():
    rng = np.random.default_rng(110)
    f, a, ins = rng.normal(size=16), rng.normal(size=16), rng.normal(size=64)
    base = mase(f, a, ins, 4)
    for c in (1e-6, 0.3, 7.0, 1e5):
        assert abs(mase(c * f, c * a, c * ins, 4) - base) <= 1e-12 * base


@acc(10)
def test_crps_single_level_pinball():
    rng = np.random.default_rng(111)
    q, y = rng.normal(size=30), rng.normal(size=30)
    pinball = sum(max(0.5 * (yi - qi), -0.5 * (yi - qi)) for qi, yi in zip(q, y))
    assert abs(crps_from_quantiles(q[:, None], [0.5], y) - 2 * pinball / np.sum(np.abs(y))) < 1e-12


@acc(10)
def test_overlap_table_arithmetic():
    cells = (0.0139, 0.0694, 0.0556, 0.8611)
    t = lens.OverlapTable(*cells)
    # cells carry 4 decimals, so a ratio a / (a + b) is known to about 5e-5 / (a + b)
    assert abs(t.p_s_given_i - 0.1667) <= 5e-5 / (cells[0] + cells[1]) + 5e-5
    assert abs(t.p_i_given_s - 0.2000) <= 5e-5 / (cells[0] + cells[2]) + 5e-5
    exact = lens.OverlapTable.from_flags([1] * 12 + [0] * 132, [1, 1] + [0] * 10 + [1] * 8 + [0] * 124)
    assert round(exact.p_s_given_i, 4) == 0.1667 and round(exact.p_i_given_s, 4) == 0.2000
    assert abs(t.p_s_given_i - 0.0139 / (0.0139 + 0.0694)) < 1e-15
    assert abs(t.p_i_given_s - 0.0139 / (0.0139 + 0.0556)) < 1e-15


# --- 11. RK4 order -----------------------------------------------------------------

@acc(11)
def test_rk4_step_halving_ratio():
    x0 = np.array([1.0, 1.0, 1.0])

    def lorenz(_, s):
        return [10.0 * (s[1] - s[0]), s[0] * (28.0 - s[2]) - s[1], s[0] * s[1] - 8.0 / 3.0 * s[2]]

    t = np.arange(1, 101) * 0.01
    ref = solve_ivp(lorenz, (0.0, 1.0), x0, method="DOP853", rtol=1e-13, atol=1e-13, t_eval=t).y.T
    coarse = integrate_rk4(OdeSpec("lorenz63", {}, tuple(x0), 0.01, 100, 0)).values
    fine = integrate_rk4(OdeSpec("lorenz63", {}, tuple(x0), 0.005, 200, 0)).values[1::2]
    ratio = np.max(np.abs(coarse - ref)) / np.max(np.abs(fine - ref))
    print(f"RK4 step-halving ratio={ratio:.2f}")
    assert 12.0 <= ratio <= 20.0
