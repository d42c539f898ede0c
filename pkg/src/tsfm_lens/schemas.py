"""JSON schemas and CSV headers of every report the CLI writes.

Plain dicts in JSON Schema draft 2020-12 form; validation itself is left to
the caller (the test suite uses ``jsonschema``). Non-finite floats are
written as null, hence the ``num`` type.
"""

from __future__ import annotations

num = {"type": ["number", "null"]}
integer = {"type": "integer"}
string = {"type": "string"}
boolean = {"type": "boolean"}


def arr(items, **kw):
    return {"type": "array", "items": items, **kw}


def obj(props, required=None, extra=False):
    return {"type": "object", "properties": props, "required": list(required or props),
            "additionalProperties": extra}


DIGESTS = {"type": "object", "additionalProperties": {"type": "string", "pattern": "^[0-9a-f]{64}$"}}

MANIFEST = obj({
    "command": string, "config": {"type": "object"}, "seed": {"type": ["integer", "null"]},
    "tool_version": string, "inputs": DIGESTS, "outputs": DIGESTS, "wall_time": {"type": "number", "minimum": 0},
})

SERIES = obj({
    "name": string, "dt": {"type": "number", "exclusiveMinimum": 0}, "channels": {"type": "integer", "minimum": 1},
    "period": {"type": ["integer", "null"]}, "values": arr(arr({"type": "number"}), minItems=2),
})

DATASET = {"oneOf": [SERIES, arr(SERIES, minItems=1)]}

BUNDLE = obj({"format_version": {"const": 1}, "config": {"type": "object"},
              "weights": {"type": "object"}}, extra=True)

FORECASTS = arr(SERIES)

HEAD_PROFILE = obj({
    "layer": integer, "head": integer, "raw_entropy": num, "entropy": num,
    "classification": {"enum": ["sharp", "diffuse", "neither"]}, "prefix_score": num, "copy_score": num,
    "induction": boolean, "sharp": boolean,
})

OVERLAP = obj({
    "n_heads": integer, "p_is": num, "p_i_not_s": num, "p_not_i_s": num, "p_not_i_not_s": num,
    "p_i": num, "p_s": num, "p_s_given_i": num, "p_i_given_s": num,
})

RRT = obj({
    "motif": arr(integer, minItems=1), "teacher_forced": boolean, "thresholds": {"type": "object"},
    "profiles": arr(HEAD_PROFILE), "overlap": OVERLAP,
})

HEADS1PP_RESULT = obj({
    "layer": integer, "strategy": {"enum": ["srank_desc", "srank_asc", "random"]},
    "kind": {"enum": ["self", "cross"]}, "k": {"type": "integer", "minimum": 0}, "baseline": num,
    "ablated": num, "metric": string, "tolerance": {"type": "number"}, "order": arr(integer),
    "errors_by_k": arr(num, minItems=1), "spearman_distance": num,
})

HEADS1PP = obj({
    "kind": {"enum": ["self", "cross"]}, "tolerance": {"type": "number"}, "metric": string,
    "stable_ranks": {"type": "object", "additionalProperties": arr(num)},
    "results": arr(HEADS1PP_RESULT, minItems=1),
})

LENS = obj({
    "series": string, "arch": {"enum": ["encoder_decoder", "decoder_only"]}, "horizon": integer,
    "entropy_curve": arr(num), "rollout_kind": {"enum": ["self", "cross"]}, "profiles": arr(HEAD_PROFILE),
    "n_sharp": integer, "n_diffuse": integer, "entropic_rank_kind": {"enum": ["self", "cross"]},
    "entropic_rank": arr(num),
}, required=["series", "arch", "horizon", "rollout_kind", "profiles", "n_sharp", "n_diffuse"])

SWEEP_FORECASTS = obj({
    "baseline": {"type": "object", "additionalProperties": arr(num)},
    "ablated": arr(obj({"group": string, "target": string,
                        "forecasts": {"type": "object", "additionalProperties": arr(num)}})),
    "window": integer,
})

SUITE = obj({"suite": string, "passed": boolean, "n_cases": integer, "failures": arr({"type": "object"}),
             "cases": arr({"type": "object"})})

VERIFY = obj({"passed": boolean, "suites": arr(SUITE, minItems=1)})

BOUND_RECORD = obj({
    "seed": integer, "r": integer, "lhs": num, "rhs_generic": num, "rhs_truncated": num, "slack": num,
    "assumptions_ok": boolean, "failed": arr(string), "holds": {"type": ["boolean", "null"]}, "family": string,
}, required=["seed", "r", "lhs", "rhs_generic", "rhs_truncated", "slack", "assumptions_ok"], extra=True)

BOUND_INSTANCES = arr(BOUND_RECORD)

JSON_REPORTS = {
    "manifest.json": MANIFEST,
    "model.json": BUNDLE,
    "forecast.json": FORECASTS,
    "rrt.json": RRT,
    "heads1pp.json": HEADS1PP,
    "lens.json": LENS,
    "sweep_forecasts.json": SWEEP_FORECASTS,
    "verify.json": VERIFY,
    "bound_instances.json": BOUND_INSTANCES,
}

# fixed headers; prefix entries end in "*" and match a numbered column run
CSV_HEADERS = {
    "loss_curve.csv": ["step", "loss"],
    "metrics.csv": ["series", "metric", "value", "flags"],
    "sweep.csv": ["layer", "group", "target", "k", "strategy", "metric", "baseline", "ablated", "pct_change",
                  "spearman_distance"],
    "heads1pp.csv": ["layer", "group", "target", "k", "strategy", "metric", "baseline", "ablated", "pct_change",
                     "spearman_distance"],
    "logit_map.csv": ["step", "layer", "p*"],
    "layer_outputs.csv": ["step", "layer", "o*"],
    "entropy_curve.csv": ["layer", "entropy"],
    "rollout.csv": ["layer", "head", "key", "t*"],
    "truncated.csv": ["layer", "mase", "smape", "nrmse", "spearman_distance"],
    "rrt_profiles.csv": ["layer", "head", "raw_entropy", "entropy", "classification", "prefix_score",
                         "copy_score", "induction"],
}


def header_matches(name: str, header: list) -> bool:
    """True if a CSV header row matches the declared layout for ``name``."""
    layout = CSV_HEADERS[name]
    fixed = [c for c in layout if not c.endswith("*")]
    if header[: len(fixed)] != fixed:
        return False
    rest = header[len(fixed):]
    if len(layout) == len(fixed):
        return not rest
    prefix = layout[-1][:-1]
    return bool(rest) and rest == [f"{prefix}{j}" for j in range(len(rest))]
