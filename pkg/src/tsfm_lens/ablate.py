"""Zero-ablation experiments: layer sweeps, stable-rank head orderings and heads@1pp."""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .errors import PlanError, TsfmLensError, UndefinedInputError
from .evalmetrics import DEFAULT_WINDOW, geometric_mean, mase, nrmse, smape, spearman_distance
from .model import AblationPlan, AblationTarget, ModelBundle, forward
from .numerics import Rng, stable_rank
from .synthdata import TimeSeries

TOLERANCE = 0.01
STRATEGIES = ("srank_desc", "srank_asc", "random")
SWEEP_TARGETS = ("all_heads", "mlp", "entire_layer")
SWEEP_COLUMNS = ["layer", "group", "target", "k", "strategy", "metric", "baseline", "ablated",
                 "pct_change", "spearman_distance"]


# --- evaluation cases --------------------------------------------------------

@dataclass(frozen=True, eq=False)
class EvalCase:
    """A context to forecast from and the actual continuation to score against."""

    name: str
    context: TimeSeries
    actual: np.ndarray
    season: int = 1

    def key(self) -> bytes:
        h = hashlib.sha256(self.name.encode())
        h.update(self.context.values.tobytes())
        h.update(np.asarray(self.actual, dtype=np.float64).tobytes())
        h.update(str(self.season).encode())
        return h.digest()


def make_cases(series, context_len: int, horizon: int, season=None) -> list:
    """Split each series into its last ``context_len + horizon`` points."""
    out = []
    for s in series:
        v = s.values[:, 0]
        need = context_len + horizon
        if v.shape[0] < need:
            raise ValueError(f"series {s.name} shorter than {need}")
        ctx = v[-need:-horizon]
        per = season if season is not None else (s.period or 1)
        if per >= context_len:
            per = 1
        out.append(EvalCase(s.name, TimeSeries(ctx, s.dt, s.name, s.period), v[-horizon:].copy(), per))
    return out


def _cases_key(cases) -> str:
    h = hashlib.sha256()
    for c in cases:
        h.update(c.key())
    return h.hexdigest()


def case_forecast(bundle: ModelBundle, case: EvalCase, plan=None) -> np.ndarray:
    ts, _ = forward(bundle, case.context, plan=plan, horizon=len(case.actual))
    return ts.values[: len(case.actual), 0]


def case_metric(metric: str, forecast, case: EvalCase, window=None) -> float:
    f = np.asarray(forecast)[:window]
    a = np.asarray(case.actual)[:window]
    if metric == "mase":
        return mase(f, a, case.context.values[:, 0], case.season)
    if metric == "smape":
        return smape(f, a)
    if metric == "nrmse":
        return nrmse(f, a)
    raise ValueError(f"unknown metric {metric!r}")


def _map(fn, items, jobs):
    if jobs and jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as ex:
            return list(ex.map(fn, items))
    return [fn(x) for x in items]


def aggregate_error(bundle, cases, plan=None, metric="mase", window=DEFAULT_WINDOW, jobs=None) -> float:
    """Geometric mean over cases of ``metric`` on the first ``window`` forecast points."""
    vals = _map(lambda c: case_metric(metric, case_forecast(bundle, c, plan), c, window), cases, jobs)
    return geometric_mean(vals)


_BASELINE_CACHE: dict = {}


def baseline_error(bundle, cases, metric="mase", window=DEFAULT_WINDOW) -> float:
    """Unablated error, cached by the content hash of (bundle, cases, metric, window)."""
    key = (bundle.digest(), _cases_key(cases), metric, window)
    if key not in _BASELINE_CACHE:
        _BASELINE_CACHE[key] = aggregate_error(bundle, cases, None, metric, window)
    return _BASELINE_CACHE[key]


# --- head orderings ------------------------------------------------------------

def _default_kind(bundle):
    return "cross" if bundle.config.has_cross else "self"


def qk_matrix(bundle: ModelBundle, layer: int, head: int, kind: str = "self") -> np.ndarray:
    """``W_Q^i (W_K^i)^T / sqrt(d_head)`` of one head, shape [d_model, d_model]."""
    tag = "sa" if kind == "self" else "ca"
    wq = bundle.weights[f"dec.{layer}.{tag}.wq"][head]
    wk = bundle.weights[f"dec.{layer}.{tag}.wk"][head]
    return wq @ wk.T / math.sqrt(bundle.config.d_head)


def head_stable_ranks(bundle: ModelBundle, layer: int, kind: str | None = None) -> list:
    """Stable rank of each head's query-key matrix; NaN marks a zero matrix."""
    kind = kind or _default_kind(bundle)
    cfg = bundle.config
    if not 0 <= layer < cfg.n_layers:
        raise PlanError(f"layer {layer} out of range")
    if kind == "cross" and not cfg.has_cross:
        raise PlanError("model has no cross-attention")
    out = []
    for i in range(cfg.n_heads):
        try:
            out.append(stable_rank(qk_matrix(bundle, layer, i, kind)))
        except UndefinedInputError:
            out.append(math.nan)
    return out


@dataclass(frozen=True)
class HeadOrdering:
    """Order in which heads of one layer are ablated; the kept set is a suffix."""

    layer: int
    order: tuple
    strategy: str
    kind: str = "self"
    stable_ranks: tuple = ()

    def __post_init__(self):
        if sorted(self.order) != list(range(len(self.order))):
            raise PlanError("ordering must be a permutation of the head indices")

    @property
    def n_heads(self) -> int:
        return len(self.order)

    def keep_set(self, k: int) -> tuple:
        if not 0 <= k <= self.n_heads:
            raise PlanError(f"k={k} outside [0, {self.n_heads}]")
        return tuple(sorted(self.order[self.n_heads - k:]))

    def ablated_set(self, k: int) -> tuple:
        return tuple(sorted(self.order[: self.n_heads - k]))

    def plan(self, k: int) -> AblationPlan:
        comp = "self_head" if self.kind == "self" else "cross_head"
        return AblationPlan([AblationTarget(self.layer, comp, i) for i in self.ablated_set(k)])


def head_ordering(bundle: ModelBundle, layer: int, strategy: str, kind: str | None = None,
                  rng: Rng | None = None) -> HeadOrdering:
    """``srank_desc`` ablates high stable rank first (keeping the lowest), ``srank_asc`` the reverse.

    Ties go to the lower head index; heads with an undefined stable rank are
    ablated last under both strategies. ``random`` needs ``rng``.
    """
    kind = kind or _default_kind(bundle)
    if strategy not in STRATEGIES:
        raise ValueError(f"strategy must be one of {STRATEGIES}")
    sr = head_stable_ranks(bundle, layer, kind)
    idx = range(len(sr))
    if strategy == "random":
        if rng is None:
            raise ValueError("random ordering needs an rng")
        order = tuple(int(i) for i in rng.permutation(len(sr)))
    else:
        sign = -1.0 if strategy == "srank_desc" else 1.0
        order = tuple(sorted(idx, key=lambda i: (math.isnan(sr[i]), sign * sr[i] if not math.isnan(sr[i]) else 0.0, i)))
    return HeadOrdering(layer, order, strategy, kind, tuple(sr))


# --- heads@1pp -------------------------------------------------------------------

@dataclass
class Heads1ppResult:
    layer: int
    strategy: str
    kind: str
    k: int
    baseline: float
    ablated: float
    metric: str
    tolerance: float
    order: tuple
    errors: list = field(default_factory=list)

    def rel_change(self, k=None) -> float:
        e = self.errors[self.k if k is None else k]
        return (e - self.baseline) / self.baseline

    def to_dict(self) -> dict:
        return {
            "layer": self.layer, "strategy": self.strategy, "kind": self.kind, "k": self.k,
            "baseline": self.baseline, "ablated": self.ablated, "metric": self.metric,
            "tolerance": self.tolerance, "order": list(self.order), "errors_by_k": list(self.errors),
        }


def heads_at_1pp(bundle: ModelBundle, cases, layer: int, ordering: HeadOrdering, metric: str = "mase",
                 tolerance: float = TOLERANCE, window=DEFAULT_WINDOW, jobs=None) -> Heads1ppResult:
    """Smallest k such that keeping ``ordering.keep_set(k)`` raises the error by at most ``tolerance``.

    All other heads of the given attention kind in ``layer`` are zeroed and
    the MLP is left alone. The scan runs k = 0..H and records every error.
    """
    if ordering.layer != layer:
        raise PlanError("ordering belongs to a different layer")
    e0 = baseline_error(bundle, cases, metric, window)
    if not (math.isfinite(e0) and e0 > 0):
        raise UndefinedInputError(f"baseline {metric} must be finite and positive, got {e0}")
    errors = []
    k_found = None
    for k in range(ordering.n_heads + 1):
        plan = ordering.plan(k)
        e = e0 if plan.is_empty else aggregate_error(bundle, cases, plan, metric, window, jobs)
        errors.append(e)
        if (e - e0) / e0 <= tolerance:
            k_found = k
            break
    if k_found is None:
        k_found = ordering.n_heads
    if k_found > 0 and not (errors[k_found - 1] - e0) / e0 > tolerance:
        raise AssertionError("heads@1pp minimality violated")
    return Heads1ppResult(layer, ordering.strategy, ordering.kind, k_found, e0, errors[k_found],
                          metric, tolerance, ordering.order, errors)


def exhaustive_keep_errors(bundle: ModelBundle, cases, layer: int, kind: str | None = None,
                           metric: str = "mase", window=DEFAULT_WINDOW) -> dict:
    """Error for every keep-set of heads in ``layer`` (2^H forward sweeps)."""
    kind = kind or _default_kind(bundle)
    h = bundle.config.n_heads
    comp = "self_head" if kind == "self" else "cross_head"
    out = {}
    for k in range(h + 1):
        for keep in itertools.combinations(range(h), k):
            plan = AblationPlan([AblationTarget(layer, comp, i) for i in range(h) if i not in keep])
            out[frozenset(keep)] = aggregate_error(bundle, cases, plan, metric, window)
    return out


# --- layer sweep -----------------------------------------------------------------

@dataclass
class SweepRow:
    layer: int
    group: str
    target: str
    k: int
    strategy: str
    metric: str
    baseline: float
    ablated: float
    pct_change: float
    spearman_distance: float
    flags: tuple = ()

    def as_list(self):
        return [self.layer, self.group, self.target, self.k, self.strategy, self.metric,
                repr(float(self.baseline)), repr(float(self.ablated)), repr(float(self.pct_change)),
                repr(float(self.spearman_distance))]


@dataclass
class SweepReport:
    rows: list
    baseline_forecasts: dict
    forecasts: dict  # (group, target) -> {case name: forecast}

    def to_csv(self) -> str:
        return rows_to_csv(self.rows)


def rows_to_csv(rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in rows:
        w.writerow(r.as_list())
    return buf.getvalue()


def sweep_plan(bundle: ModelBundle, layers, target: str) -> AblationPlan:
    cfg = bundle.config
    entries = []
    for l in layers:
        if target == "all_heads":
            entries.append(AblationTarget(l, "all_self_heads"))
            if cfg.has_cross:
                entries.append(AblationTarget(l, "all_cross_heads"))
        elif target == "mlp":
            entries.append(AblationTarget(l, "mlp"))
        elif target == "entire_layer":
            entries.append(AblationTarget(l, "entire_layer"))
        elif target != "none":
            raise PlanError(f"unknown sweep target {target!r}")
    return AblationPlan(entries)


def layer_groups(n_layers: int, group_size: int = 1) -> list:
    if group_size < 1:
        raise ValueError("group_size must be >= 1")
    return [tuple(range(s, min(s + group_size, n_layers))) for s in range(0, n_layers, group_size)]


def _group_label(layers) -> str:
    return str(layers[0]) if len(layers) == 1 else f"{layers[0]}-{layers[-1]}"


def layer_sweep(bundle: ModelBundle, cases, targets=SWEEP_TARGETS, group_size: int = 1,
                metric: str = "mase", window: int = DEFAULT_WINDOW, control: bool = True,
                jobs=None) -> SweepReport:
    """Ablate each contiguous layer group per target and compare with the baseline.

    ``spearman_distance`` is the mean over cases of the distance between the
    first ``window`` baseline and ablated forecast points. Cases whose
    forecast fails are flagged and excluded from both means.
    """
    if not cases:
        raise ValueError("layer_sweep needs at least one case")
    h = bundle.config.n_heads
    base = {c.name: case_forecast(bundle, c) for c in cases}
    base_err = geometric_mean([case_metric(metric, base[c.name], c, window) for c in cases])
    jobs_list = []
    if control:
        jobs_list.append(((-1,), "none"))
    for target in targets:
        for grp in layer_groups(bundle.config.n_layers, group_size):
            jobs_list.append((grp, target))

    def run(job):
        grp, target = job
        plan = sweep_plan(bundle, [l for l in grp if l >= 0], target)
        preds, flags = {}, []
        for c in cases:
            try:
                preds[c.name] = base[c.name] if plan.is_empty else case_forecast(bundle, c, plan)
            except (TsfmLensError, FloatingPointError) as exc:
                flags.append(f"{c.name}:{type(exc).__name__}")
        ok = [c for c in cases if c.name in preds]
        err = geometric_mean([case_metric(metric, preds[c.name], c, window) for c in ok])
        dist = float(np.mean([spearman_distance(base[c.name][:window], preds[c.name][:window]) for c in ok])) \
            if ok else math.nan
        k = h if target in ("none", "mlp") else 0
        pct = 100.0 * (err - base_err) / base_err if base_err else math.nan
        row = SweepRow(grp[0], "control" if target == "none" else _group_label(grp), target, k,
                       "none", metric, base_err, err, pct, dist, tuple(flags))
        return row, preds

    results = _map(run, jobs_list, jobs)
    rows = [r for r, _ in results]
    forecasts = {(r.group, r.target): p for r, p in results}
    return SweepReport(rows, base, forecasts)


# --- plan assembly -----------------------------------------------------------------

@dataclass
class PlanSummary:
    plan: AblationPlan
    n_ablated: int
    n_total: int

    @property
    def pct_ablated(self) -> float:
        return 100.0 * self.n_ablated / self.n_total


def build_plan(bundle: ModelBundle, keep_counts: dict, orderings: dict, mlp_layers=()) -> PlanSummary:
    """Compose per-layer head keep counts (and optional MLP ablations) into one plan.

    ``keep_counts[l]`` heads are kept in layer l following ``orderings[l]``.
    The summary reports ablated heads as a share of all heads of the layer
    attention kind across the model.
    """
    cfg = bundle.config
    entries = []
    n_ablated = 0
    kinds = set()
    for layer in sorted(keep_counts):
        if layer not in orderings:
            raise PlanError(f"layer {layer} has a keep count but no ordering")
        ordering = orderings[layer]
        if ordering.layer != layer:
            raise PlanError(f"ordering for layer {ordering.layer} filed under layer {layer}")
        if ordering.n_heads != cfg.n_heads:
            raise PlanError("ordering head count does not match the model")
        kinds.add(ordering.kind)
        k = int(keep_counts[layer])
        sub = ordering.plan(k)
        n_ablated += len(sub)
        entries.extend(sub)
    if len(kinds) > 1:
        raise PlanError("orderings mix self- and cross-attention heads")
    extra = set(orderings) - set(keep_counts)
    if extra:
        raise PlanError(f"orderings given for layers without keep counts: {sorted(extra)}")
    for layer in mlp_layers:
        entries.append(AblationTarget(int(layer), "mlp"))
    plan = AblationPlan(entries)
    plan.validate(cfg)
    return PlanSummary(plan, n_ablated, cfg.n_layers * cfg.n_heads)
