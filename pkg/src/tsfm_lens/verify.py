"""Self-check suites run by ``tsfm-lens verify``: kernel, bound, gradients and metrics."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import kernel as K
from .evalmetrics import crps_from_quantiles, mase, smape, spearman_distance
from .lens import OverlapTable
from .model import ModelConfig, PatchConfig, TokenizerConfig, init_weights
from .numerics import Rng
from .synthdata import gen_seasonal
from .train import TrainConfig, gradient_check, sample_examples

SUITES = ("kernel", "bound", "gradients", "metrics")


@dataclass
class SuiteResult:
    name: str
    cases: list = field(default_factory=list)
    failures: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def check(self, label: str, ok: bool, **detail):
        entry = {"case": label, "passed": bool(ok), **detail}
        self.cases.append(entry)
        if not ok:
            self.failures.append(entry)

    def to_dict(self):
        return {"suite": self.name, "passed": self.passed, "n_cases": len(self.cases),
                "failures": self.failures, "cases": self.cases}


def _equal_norm_keys(rng, n_keys, d):
    keys = rng.normal((n_keys, d))
    return keys / np.linalg.norm(keys, axis=1, keepdims=True) * (0.5 + 2.0 * rng.uniform())


def kernel_suite(n_heads: int = 200, n_nw: int = 500, n_generic: int = 200, seed: int = 0) -> SuiteResult:
    res = SuiteResult("kernel")
    rng = Rng(seed)
    worst = 0.0
    for _ in range(n_heads):
        head = K.random_head(rng)
        c = rng.integers(1, 65)
        hq, hk = rng.normal(head.dim), rng.normal((c, head.dim))
        worst = max(worst, float(np.max(np.abs(K.tilt_factorization(head, hq, hk) - K.direct_weights(head, hq, hk)))))
    res.check("tilt_factorization", worst < 1e-10, max_abs=worst, n=n_heads)
    worst = 0.0
    for _ in range(n_nw):
        d = rng.integers(1, 65)
        keys = _equal_norm_keys(rng, rng.integers(1, 65), d)
        worst = max(worst, K.attention_vs_nw(rng.normal(d), keys, d))
    res.check("nw_equivalence", worst < 1e-10, max_abs=worst, n=n_nw)
    bad = 0
    for _ in range(n_generic):
        c = rng.integers(2, 65)
        row = rng.normal(c) * (0.1 + 5.0 * rng.uniform())
        if not K.generic_bound_holds(row, 0.1 + 10.0 * rng.uniform()):
            bad += 1
    res.check("generic_bound", bad == 0, violations=bad, n=n_generic)
    sym = K.verify_bound(K.symmetric_instance())
    res.check("symmetric_zero_margin_rejected", not sym.assumptions_ok and sym.holds is None,
              failed=sym.failed)
    return res


def bound_instances(n: int, seed0: int = 0):
    """Alternate the rank-deficient (rho = 0) and spectral-tail (rho > 0) families."""
    return [K.low_rank_instance(seed0 + i) if i % 2 == 0 else K.tail_instance(seed0 + i) for i in range(n)]


def bound_suite(n_instances: int = 1000, n_slopes: int = 20, n_rank_sweep: int = 20,
                seed: int = 0, records: list | None = None) -> SuiteResult:
    res = SuiteResult("bound")
    violations, rejected = 0, 0
    for inst in bound_instances(n_instances, seed):
        out = K.verify_bound(inst)
        if records is not None:
            records.append({**out.to_dict(), "family": inst.family})
        if not out.assumptions_ok:
            rejected += 1
        elif not out.holds:
            violations += 1
            res.failures.append({"case": "bound_violation", "seed": inst.seed, "r": out.r, "slack": out.slack})
    res.check("bound_instances", violations == 0 and rejected == 0, violations=violations,
              rejected=rejected, n=n_instances)
    bad = []
    for inst in bound_instances(n_slopes, seed + 1_000_000):
        s = K.beta_slopes(inst)
        if not s.ok:
            bad.append({"seed": inst.seed, "slope_lhs": s.slope_lhs, "slope_generic": s.slope_generic,
                        "slope_truncated": s.slope_truncated})
    res.check("beta_slopes", not bad, n=n_slopes, bad=bad)
    swept, viol = 0, 0
    for inst in bound_instances(n_rank_sweep, seed + 2_000_000):
        for r in range(1, inst.head.dim):
            out = K.verify_bound(inst, r)
            if out.assumptions_ok:
                swept += 1
                viol += not out.holds
    res.check("rank_sweep", viol == 0, verdicts=swept, violations=viol)
    return res


def gradient_configs():
    small = dict(n_layers=2, n_heads=2, d_model=16, d_head=8, d_ff=32, context_len=16, horizon=4)
    return [
        (ModelConfig(arch="encoder_decoder", tokenizer=TokenizerConfig(vocab_size=16), **small), "cross_entropy"),
        (ModelConfig(arch="decoder_only", patch=PatchConfig(4), **small), "mse"),
        (ModelConfig(arch="decoder_only", patch=PatchConfig(4), quantile_head=True, **small), "quantile"),
    ]


def gradients_suite(seed: int = 0, max_entries: int | None = None) -> SuiteResult:
    res = SuiteResult("gradients")
    data = [gen_seasonal(Rng(seed), 200, [(12, 1.0, 0.3), (5, 0.4, 1.1)], 0.1)]
    for cfg, loss in gradient_configs():
        bundle = init_weights(cfg, Rng(seed + 1))
        batch = sample_examples(bundle, data, 2, Rng(seed + 2))
        results = gradient_check(bundle, batch, TrainConfig(loss=loss), max_entries=max_entries,
                                 rng=Rng(seed + 3))
        worst = max(results, key=lambda r: r.rel_error)
        res.check(f"{cfg.arch}:{loss}", all(r.passed for r in results),
                  n_params=sum(r.n_checked for r in results), worst_tensor=worst.name,
                  worst_rel_error=worst.rel_error,
                  failing=[r.name for r in results if not r.passed])
    return res


def metrics_suite(seed: int = 0) -> SuiteResult:
    res = SuiteResult("metrics")
    res.check("spearman_identity", spearman_distance([1, 2, 3], [1, 2, 3]) == 0.0)
    res.check("spearman_reversed", spearman_distance([1, 2, 3], [3, 2, 1]) == 2.0)
    res.check("spearman_constant", spearman_distance([1, 2, 3], [5, 5, 5]) == 1.0)
    rng = Rng(seed)
    f, a, ins = rng.normal(20), rng.normal(20), rng.normal(50)
    base = mase(f, a, ins, 3)
    dev = max(abs(mase(c * f, c * a, c * ins, 3) - base) / base for c in (1e-3, 0.7, 13.0, 4096.0))
    res.check("mase_scale_invariance", dev < 1e-12, max_rel=dev)
    q = rng.normal(20)
    crps = crps_from_quantiles(q[:, None], [0.5], a)
    direct = float(np.mean(np.abs(q - a)) / np.mean(np.abs(a)))
    res.check("crps_single_level", abs(crps - direct) < 1e-12 * max(1.0, direct), crps=crps, direct=direct)
    res.check("smape_three_point", abs(smape([1, 2, 3], [2, 2, 2]) - 200.0 * (1 / 3 + 0 + 1 / 5) / 3) < 1e-12)
    table = OverlapTable(0.0139, 0.0694, 0.0556, 0.8611)
    res.check("overlap_table_p_s_given_i", abs(table.p_s_given_i - 0.1667) < 5e-4, value=table.p_s_given_i)
    res.check("overlap_table_p_i_given_s", abs(table.p_i_given_s - 0.2000) < 5e-4, value=table.p_i_given_s)
    counts = OverlapTable.from_flags([1] * 12 + [0] * 132, [1, 1] + [0] * 10 + [1] * 8 + [0] * 124)
    res.check("overlap_counts", round(counts.p_s_given_i, 4) == 0.1667 and round(counts.p_i_given_s, 4) == 0.2,
              p_s_given_i=counts.p_s_given_i, p_i_given_s=counts.p_i_given_s)
    return res


def run_suites(names=SUITES, seed: int = 0, quick: bool = False, records: list | None = None) -> list:
    out = []
    for name in names:
        if name == "kernel":
            out.append(kernel_suite(50 if quick else 200, 100 if quick else 500, seed=seed))
        elif name == "bound":
            out.append(bound_suite(100 if quick else 1000, 5 if quick else 20, 4 if quick else 20,
                                   seed=seed, records=records))
        elif name == "gradients":
            out.append(gradients_suite(seed, max_entries=8 if quick else None))
        elif name == "metrics":
            out.append(metrics_suite(seed))
        else:
            raise ValueError(f"unknown suite {name!r}")
    return out


def summary(results) -> dict:
    return {"passed": all(r.passed for r in results), "suites": [r.to_dict() for r in results]}
