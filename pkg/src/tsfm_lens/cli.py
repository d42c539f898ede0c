"""``tsfm-lens`` command line: data, training, forecasting, ablations, lenses, verification.

Every artifact-producing command writes its reports atomically plus one
``manifest.json`` (or ``<out>.manifest.json`` for single-file outputs).
Exit codes: 0 success, 1 verification or experiment failure, 2 usage or IO.
"""

from __future__ import annotations

import argparse
import json
import math
import os
import sys

import numpy as np

from . import ablate, lens, verify
from .errors import (
    BundleFormatError,
    ConfigError,
    DecodeError,
    PlanError,
    ShapeError,
    TrainingDiverged,
    TsfmLensError,
    UnsupportedArchitectureError,
)
from .evalmetrics import DEFAULT_WINDOW, MetricsReport, evaluate_point, spearman_distance
from .model import (
    AblationPlan,
    ModelConfig,
    PatchConfig,
    TokenizerConfig,
    forward,
    init_weights,
    load_bundle,
    save_bundle,
)
from .numerics import Rng
from .reports import Manifest, csv_text, dumps, write_csv, write_json
from .synthdata import OdeSpec, TimeSeries, gen_random_walk, gen_seasonal, integrate_rk4
from .train import TrainConfig, train

SEED_ENV = "TSFM_LENS_SEED"
ORDER_FLAGS = {"srank-desc": "srank_desc", "srank-asc": "srank_asc", "random": "random"}


class UsageError(Exception):
    pass


# --- seeds and inputs --------------------------------------------------------------

def base_seed(args) -> int:
    if args.seed is not None:
        return int(args.seed)
    env = os.environ.get(SEED_ENV)
    if env is None or env == "":
        return 0
    try:
        return int(env)
    except ValueError as exc:
        raise UsageError(f"{SEED_ENV} must be an integer, got {env!r}") from exc


def derived_seeds(seed: int) -> dict:
    return {"data": seed, "init": seed + 1, "train": seed + 2, "rrt": seed + 3, "random_order": seed + 4}


def load_dataset(path) -> list:
    """A dataset file holds one series document or a JSON list of them."""
    with open(path) as fh:
        doc = json.load(fh)
    docs = doc if isinstance(doc, list) else [doc]
    try:
        return [TimeSeries.from_dict(d) for d in docs]
    except (KeyError, TypeError, ValueError) as exc:
        raise ShapeError(f"{path}: malformed series document ({exc})") from exc


def load_many(paths) -> list:
    out = []
    for p in paths:
        out.extend(load_dataset(p))
    return out


def _manifest_config(args) -> dict:
    return {k: v for k, v in sorted(vars(args).items()) if k not in ("func", "config")}


def _cases(bundle, series, args):
    cfg = bundle.config
    horizon = args.horizon or cfg.horizon
    ctx = min(args.context_len or cfg.context_len, cfg.context_len)
    return ablate.make_cases(series, ctx, horizon)


# --- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    seed = base_seed(args)
    rng = Rng(derived_seeds(seed)["data"])
    out = []
    for i in range(args.count):
        name = f"{args.system}_{i}" if args.count > 1 else args.system
        if args.system in ("lorenz", "thomas"):
            system = "lorenz63" if args.system == "lorenz" else "thomas"
            base = np.array([1.0, 1.0, 1.0]) if system == "lorenz63" else np.array([0.1, 0.0, -0.1])
            init = base + 0.1 * rng.normal(3)
            s = integrate_rk4(OdeSpec(system, {}, tuple(init), args.dt, args.n, args.burn_in))
            s.name = name
        elif args.system == "seasonal":
            comps = [(p, args.amplitude / (k + 1), 2.0 * math.pi * rng.uniform())
                     for k, p in enumerate(args.period)]
            s = gen_seasonal(rng, args.n, comps, args.noise, name)
        else:
            s = gen_random_walk(rng, args.n, args.step_std, name)
        out.append(s.to_dict())
    m = Manifest("gen-data", _manifest_config(args), seed)
    write_json(args.out, out[0] if args.count == 1 else out)
    m.add_output(args.out)
    m.write(args.out + ".manifest.json")
    return 0


def _model_config(args) -> ModelConfig:
    d_head = args.d_head or args.d_model // args.heads
    return ModelConfig(
        arch=args.arch, n_layers=args.layers, n_heads=args.heads, d_model=args.d_model, d_head=d_head,
        d_ff=args.d_ff or 4 * args.d_model, context_len=args.context_len, horizon=args.horizon,
        n_enc_layers=args.enc_layers, tokenizer=TokenizerConfig(args.vocab, args.range_low, args.range_high),
        patch=PatchConfig(args.patch_len), quantile_head=args.quantile_head,
    )


def cmd_train(args) -> int:
    seed = base_seed(args)
    seeds = derived_seeds(seed)
    try:
        cfg = _model_config(args)
    except ValueError as exc:
        raise UsageError(str(exc)) from exc
    loss = args.loss or ("cross_entropy" if cfg.arch == "encoder_decoder"
                         else "quantile" if cfg.quantile_head else "mse")
    tc = TrainConfig(loss=loss, lr=args.lr, steps=args.steps, batch_size=args.batch_size, seed=seeds["train"],
                     context_len=args.train_context_len, horizon=args.train_horizon)
    series = load_many(args.data)
    m = Manifest("train", _manifest_config(args), seed)
    for p in args.data:
        m.add_input(p)
    os.makedirs(args.out_dir, exist_ok=True)
    curve_path = os.path.join(args.out_dir, "loss_curve.csv")
    model_path = os.path.join(args.out_dir, "model.json")
    bundle = init_weights(cfg, Rng(seeds["init"]))
    try:
        result = train(bundle, series, tc)
    except TrainingDiverged as exc:
        write_csv(curve_path, ["step", "loss"], list(enumerate(exc.curve)))
        m.add_output(curve_path)
        m.write(os.path.join(args.out_dir, "manifest.json"))
        print(f"training diverged: {exc}", file=sys.stderr)
        return 1
    save_bundle(result.bundle, model_path)
    write_csv(curve_path, ["step", "loss"], result.curve_rows())
    m.add_output(model_path)
    m.add_output(curve_path)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    if result.curve:
        print(f"final loss {result.curve[-1]:.6f} (initial {result.curve[0]:.6f})")
    return 0


def _load_plan(path):
    if not path:
        return None
    with open(path) as fh:
        return AblationPlan.from_json(json.load(fh))


def cmd_forecast(args) -> int:
    seed = base_seed(args)
    bundle = load_bundle(args.model)
    series = load_many(args.data)
    plan = _load_plan(args.plan)
    horizon = args.horizon or bundle.config.horizon
    m = Manifest("forecast", _manifest_config(args), seed)
    m.add_input(args.model)
    for p in args.data:
        m.add_input(p)
    if args.plan:
        m.add_input(args.plan)
    forecasts, records = [], []
    for s in series:
        v = s.values[:, 0]
        if args.holdout:
            if v.shape[0] <= horizon + 1:
                raise ShapeError(f"series {s.name} too short to hold out {horizon} points")
            ctx, actual = v[:-horizon], v[-horizon:]
        else:
            ctx, actual = v, None
        ctx = ctx[-bundle.config.context_len:]
        ts, _ = forward(bundle, TimeSeries(ctx, s.dt, s.name, s.period), plan=plan, horizon=horizon,
                        n_layers=args.n_layers)
        pred = ts.values[:horizon, 0]
        forecasts.append({"name": s.name, "dt": s.dt, "channels": 1, "period": s.period,
                          "values": pred[:, None].tolist()})
        if actual is not None:
            season = s.period if s.period and s.period < ctx.shape[0] else 1
            records.extend(evaluate_point(s.name, pred, actual, ctx, season))
    os.makedirs(args.out_dir, exist_ok=True)
    fpath = os.path.join(args.out_dir, "forecast.json")
    write_json(fpath, forecasts)
    m.add_output(fpath)
    if records:
        mpath = os.path.join(args.out_dir, "metrics.csv")
        from .reports import atomic_write
        atomic_write(mpath, MetricsReport(records).to_csv())
        m.add_output(mpath)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return 0


def cmd_sweep_layers(args) -> int:
    seed = base_seed(args)
    bundle = load_bundle(args.model)
    series = load_many(args.data)
    cases = _cases(bundle, series, args)
    report = ablate.layer_sweep(bundle, cases, targets=tuple(args.targets), group_size=args.group_size,
                                metric=args.metric, window=args.window, control=not args.no_control,
                                jobs=args.jobs)
    m = Manifest("sweep-layers", _manifest_config(args), seed)
    m.add_input(args.model)
    for p in args.data:
        m.add_input(p)
    os.makedirs(args.out_dir, exist_ok=True)
    from .reports import atomic_write
    csv_path = os.path.join(args.out_dir, "sweep.csv")
    atomic_write(csv_path, report.to_csv())
    fc_path = os.path.join(args.out_dir, "sweep_forecasts.json")
    write_json(fc_path, {
        "baseline": {k: v for k, v in report.baseline_forecasts.items()},
        "ablated": [{"group": g, "target": t, "forecasts": f} for (g, t), f in report.forecasts.items()],
        "window": args.window,
    })
    m.add_output(csv_path)
    m.add_output(fc_path)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return 0


def cmd_heads1pp(args) -> int:
    seed = base_seed(args)
    bundle = load_bundle(args.model)
    series = load_many(args.data)
    cases = _cases(bundle, series, args)
    layers = args.layers if args.layers else list(range(bundle.config.n_layers))
    kind = args.kind or ("cross" if bundle.config.has_cross else "self")
    rng = Rng(derived_seeds(seed)["random_order"])
    results, rows, ranks = [], [], {}
    base = {c.name: ablate.case_forecast(bundle, c) for c in cases}
    for layer in layers:
        for flag in args.order:
            strategy = ORDER_FLAGS[flag]
            ordering = ablate.head_ordering(bundle, layer, strategy, kind, rng if strategy == "random" else None)
            ranks[str(layer)] = list(ordering.stable_ranks)
            res = ablate.heads_at_1pp(bundle, cases, layer, ordering, args.metric, args.tolerance,
                                      args.window, args.jobs)
            plan = ordering.plan(res.k)
            dist = float(np.mean([
                spearman_distance(base[c.name][: args.window],
                                  (base[c.name] if plan.is_empty else ablate.case_forecast(bundle, c, plan))[: args.window])
                for c in cases
            ]))
            results.append({**res.to_dict(), "spearman_distance": dist})
            pct = 100.0 * (res.ablated - res.baseline) / res.baseline
            rows.append(ablate.SweepRow(layer, str(layer), f"{kind}_heads", res.k, strategy, args.metric,
                                        res.baseline, res.ablated, pct, dist))
    m = Manifest("heads1pp", _manifest_config(args), seed)
    m.add_input(args.model)
    for p in args.data:
        m.add_input(p)
    os.makedirs(args.out_dir, exist_ok=True)
    jpath = os.path.join(args.out_dir, "heads1pp.json")
    write_json(jpath, {"kind": kind, "tolerance": args.tolerance, "metric": args.metric,
                       "stable_ranks": ranks, "results": results})
    cpath = os.path.join(args.out_dir, "heads1pp.csv")
    from .reports import atomic_write
    atomic_write(cpath, ablate.rows_to_csv(rows))
    m.add_output(jpath)
    m.add_output(cpath)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return 0


def cmd_lens(args) -> int:
    seed = base_seed(args)
    bundle = load_bundle(args.model)
    cfg = bundle.config
    series = load_many(args.data)
    cases = _cases(bundle, series, args)
    case = cases[min(args.series_index, len(cases) - 1)]
    horizon = len(case.actual)
    m = Manifest("lens", _manifest_config(args), seed)
    m.add_input(args.model)
    for p in args.data:
        m.add_input(p)
    os.makedirs(args.out_dir, exist_ok=True)
    from .reports import atomic_write
    outputs = []

    def out(name, text):
        path = os.path.join(args.out_dir, name)
        atomic_write(path, text)
        outputs.append(path)

    ts, tr = forward(bundle, case.context, trace=True, horizon=horizon)
    n_layers = cfg.n_layers
    doc = {"series": case.name, "arch": cfg.arch, "horizon": horizon}
    if cfg.arch == "encoder_decoder":
        lm = lens.logit_map_from_trace(bundle, tr)
        v = cfg.tokenizer.vocab_size
        rows = [[t, l, *lm.probs[t, l]] for t in range(lm.probs.shape[0]) for l in range(n_layers + 1)]
        out("logit_map.csv", csv_text(["step", "layer"] + [f"p{j}" for j in range(v)], rows))
        curve = lens.layer_entropy_curve(lm)
        doc["entropy_curve"] = list(curve)
        out("entropy_curve.csv", csv_text(["layer", "entropy"], list(enumerate(curve))))
    else:
        outs = lens.residual_readout(bundle, tr.residuals)
        rows = [[t, l, *outs[t, l]] for t in range(outs.shape[0]) for l in range(n_layers + 1)]
        out("layer_outputs.csv", csv_text(["step", "layer"] + [f"o{j}" for j in range(cfg.out_dim)], rows))
    rollouts = [lens.rollout_from_trace(tr, l) for l in range(n_layers)]
    rrows = []
    for ro in rollouts:
        for h in range(ro.matrix.shape[0]):
            for key in range(ro.matrix.shape[1]):
                rrows.append([ro.layer, h, key, *ro.matrix[h, key]])
    steps = rollouts[0].matrix.shape[2]
    out("rollout.csv", csv_text(["layer", "head", "key"] + [f"t{j}" for j in range(steps)], rrows))
    profiles = lens.profiles_from_rollouts(rollouts)
    doc["rollout_kind"] = rollouts[0].kind
    doc["profiles"] = [p.to_dict() for p in profiles]
    doc["n_sharp"] = sum(p.classification == "sharp" for p in profiles)
    doc["n_diffuse"] = sum(p.classification == "diffuse" for p in profiles)
    if cfg.n_heads >= 2:
        traces = [forward(bundle, c.context, trace=True, horizon=len(c.actual))[1] for c in cases]
        kind = "cross" if cfg.has_cross else "self"
        doc["entropic_rank_kind"] = kind
        doc["entropic_rank"] = [lens.entropic_rank_from_vectors(lens.head_vectors(traces, l, kind))
                                for l in range(n_layers)]
    trows = []
    full = ts.values[:horizon, 0]
    for l in range(n_layers + 1):
        pred = lens.truncated_forecast(bundle, case.context, l, horizon).values[:horizon, 0]
        recs = {r.metric: r.value for r in evaluate_point(case.name, pred, case.actual, case.context.values[:, 0],
                                                           case.season)}
        trows.append([l, recs["mase"], recs["smape"], recs["nrmse"], spearman_distance(full, pred)])
    out("truncated.csv", csv_text(["layer", "mase", "smape", "nrmse", "spearman_distance"], trows))
    out("lens.json", dumps(doc))
    for p in outputs:
        m.add_output(p)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return 0


def cmd_rrt(args) -> int:
    seed = base_seed(args)
    bundle = load_bundle(args.model)
    rep = lens.rrt_test(bundle, Rng(derived_seeds(seed)["rrt"]), args.motif_len, args.repeats,
                        teacher_forced=not args.free_rollout)
    m = Manifest("rrt", _manifest_config(args), seed)
    m.add_input(args.model)
    os.makedirs(args.out_dir, exist_ok=True)
    jpath = os.path.join(args.out_dir, "rrt.json")
    write_json(jpath, rep.to_dict())
    cols = ["layer", "head", "raw_entropy", "entropy", "classification", "prefix_score", "copy_score", "induction"]
    cpath = os.path.join(args.out_dir, "rrt_profiles.csv")
    write_csv(cpath, cols, [[getattr(p, c) for c in cols] for p in rep.profiles])
    m.add_output(jpath)
    m.add_output(cpath)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    return 0


def cmd_verify(args) -> int:
    seed = base_seed(args)
    names = verify.SUITES if "all" in args.suite else tuple(dict.fromkeys(args.suite))
    records = []
    results = verify.run_suites(names, seed=seed, quick=args.quick, records=records)
    summary = verify.summary(results)
    m = Manifest("verify", _manifest_config(args), seed)
    os.makedirs(args.out_dir, exist_ok=True)
    jpath = os.path.join(args.out_dir, "verify.json")
    write_json(jpath, summary)
    m.add_output(jpath)
    if records:
        bpath = os.path.join(args.out_dir, "bound_instances.json")
        write_json(bpath, records)
        m.add_output(bpath)
    m.write(os.path.join(args.out_dir, "manifest.json"))
    for r in results:
        print(f"{r.name}: {'PASS' if r.passed else 'FAIL'} ({len(r.cases)} checks)")
    if not summary["passed"]:
        print(dumps([f for r in results for f in r.failures]), file=sys.stderr)
        return 1
    return 0


# --- parser --------------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", help="JSON file of option defaults (flags override it)")
    p.add_argument("--seed", type=int, default=None, help=f"base seed (default ${SEED_ENV} or 0)")
    p.add_argument("--jobs", type=int, default=1, help="worker threads for sweeps")


def _eval_args(p):
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--context-len", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--metric", default="mase", choices=["mase", "smape", "nrmse"])
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW)


def build_parser():
    parser = argparse.ArgumentParser(prog="tsfm-lens", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    subs = {}

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    _common(p)
    p.add_argument("--system", required=True, choices=["lorenz", "thomas", "seasonal", "walk"])
    p.add_argument("--n", type=int, default=2048)
    p.add_argument("--dt", type=float, default=0.01)
    p.add_argument("--burn-in", type=int, default=1000)
    p.add_argument("--count", type=int, default=1)
    p.add_argument("--period", type=float, nargs="+", default=[12.0])
    p.add_argument("--amplitude", type=float, default=1.0)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--step-std", type=float, default=1.0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_gen_data)
    subs["gen-data"] = p

    p = sub.add_parser("train", help="train a toy forecaster")
    _common(p)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--arch", default="encoder_decoder", choices=["encoder_decoder", "decoder_only"])
    p.add_argument("--layers", type=int, default=4)
    p.add_argument("--enc-layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--d-head", type=int, default=None)
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--context-len", type=int, default=256)
    p.add_argument("--horizon", type=int, default=64)
    p.add_argument("--vocab", type=int, default=512)
    p.add_argument("--range-low", type=float, default=-15.0)
    p.add_argument("--range-high", type=float, default=15.0)
    p.add_argument("--patch-len", type=int, default=16)
    p.add_argument("--quantile-head", action="store_true")
    p.add_argument("--loss", default=None, choices=["cross_entropy", "mse", "quantile"])
    p.add_argument("--steps", type=int, default=1000)
    p.add_argument("--lr", type=float, default=3e-4)
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--train-context-len", type=int, default=None)
    p.add_argument("--train-horizon", type=int, default=None)
    p.set_defaults(func=cmd_train)
    subs["train"] = p

    p = sub.add_parser("forecast", help="forecast each series, optionally under an ablation plan")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, nargs="+")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--horizon", type=int, default=None)
    p.add_argument("--plan", default=None, help="ablation plan JSON")
    p.add_argument("--n-layers", type=int, default=None, help="read out after this many decoder layers")
    p.add_argument("--holdout", action="store_true", help="hold out the last horizon points and score them")
    p.set_defaults(func=cmd_forecast)
    subs["forecast"] = p

    p = sub.add_parser("sweep-layers", help="ablate each layer (group) per target")
    _common(p)
    _eval_args(p)
    p.add_argument("--targets", nargs="+", default=list(ablate.SWEEP_TARGETS), choices=list(ablate.SWEEP_TARGETS))
    p.add_argument("--group-size", type=int, default=1)
    p.add_argument("--no-control", action="store_true")
    p.set_defaults(func=cmd_sweep_layers)
    subs["sweep-layers"] = p

    p = sub.add_parser("heads1pp", help="minimal kept heads per layer within 1%% error")
    _common(p)
    _eval_args(p)
    p.add_argument("--layers", type=int, nargs="+", default=None)
    p.add_argument("--order", nargs="+", default=list(ORDER_FLAGS), choices=list(ORDER_FLAGS))
    p.add_argument("--kind", default=None, choices=["self", "cross"])
    p.add_argument("--tolerance", type=float, default=ablate.TOLERANCE)
    p.set_defaults(func=cmd_heads1pp)
    subs["heads1pp"] = p

    p = sub.add_parser("lens", help="logit maps, entropy, rollouts, entropic rank, truncation")
    _common(p)
    _eval_args(p)
    p.add_argument("--series-index", type=int, default=0)
    p.set_defaults(func=cmd_lens)
    subs["lens"] = p

    p = sub.add_parser("rrt", help="repeated-random-tokens induction head test")
    _common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--motif-len", type=int, default=32)
    p.add_argument("--repeats", type=int, default=4)
    p.add_argument("--free-rollout", action="store_true")
    p.set_defaults(func=cmd_rrt)
    subs["rrt"] = p

    p = sub.add_parser("verify", help="run the numerical self-check suites")
    _common(p)
    p.add_argument("--suite", nargs="+", default=["all"], choices=list(verify.SUITES) + ["all"])
    p.add_argument("--out-dir", required=True)
    p.add_argument("--quick", action="store_true", help="smaller case counts")
    p.set_defaults(func=cmd_verify)
    subs["verify"] = p
    return parser, subs


def _config_path(argv):
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    return known.config


def parse_args(argv):
    """Parse with precedence flags > --config file > built-in defaults."""
    parser, subs = build_parser()
    path = _config_path(argv)
    command = next((a for a in argv if a in subs), None)
    if path and command:
        with open(path) as fh:
            cfg = json.load(fh)
        if not isinstance(cfg, dict):
            raise ConfigError("config file must hold a JSON object")
        cfg = {k.replace("-", "_"): v for k, v in cfg.items()}
        sp = subs[command]
        known = {a.dest for a in sp._actions}
        unknown = sorted(set(cfg) - known)
        if unknown:
            raise ConfigError(f"unknown config keys for {command}: {unknown}")
        sp.set_defaults(**cfg)
        # required flags may now come from the file
        for action in sp._actions:
            if action.dest in cfg:
                action.required = False
    return parser.parse_args(argv)


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    except (OSError, json.JSONDecodeError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    try:
        return int(args.func(args))
    except (UsageError, OSError, json.JSONDecodeError, BundleFormatError, ConfigError, PlanError, ShapeError,
            DecodeError, UnsupportedArchitectureError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except TsfmLensError as exc:
        print(f"failed: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def entry():
    sys.exit(main())


if __name__ == "__main__":
    entry()
