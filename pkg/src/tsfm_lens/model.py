"""Toy transformer forecasters sharing one pre-norm residual-stream core.

Two architectures are supported:

``encoder_decoder``
    Token-level model. The mean-scaled, quantized context (plus EOS) runs
    through a bidirectional encoder stack; the decoder attends causally to
    its own tokens and cross-attends to the encoder output, and decodes
    greedily one value token per step.
``decoder_only``
    Patch-level model. Instance-normalized non-overlapping patches are
    linearly embedded; a causal stack predicts the next patch (or its nine
    quantiles) from the last position, rolled out autoregressively.

Each decoder layer updates the residual stream as
``H <- H + SA(N(H))``, ``H <- H + CA(N(H), E)`` (encoder-decoder only) and
``H <- H + MLP(N(H))`` with ``N`` an RMS norm with learned gain. Forecasts
are ``N(H^(L)) @ W_out``. Every forward pass can honour an
:class:`AblationPlan` and record a :class:`ForecastTrace`.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import tempfile
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from . import autograd as ag
from .errors import BundleFormatError, ContextTruncatedWarning, PlanError, ShapeError
from .numerics import Rng
from .synthdata import TimeSeries
from .tokenize import (
    DECODER_START_ID,
    EOS_ID,
    N_SPECIAL,
    PatchConfig,
    PatchStats,
    TokenizerConfig,
    dequantize,
    mean_scale,
    patchify,
    quantize,
)

FORMAT_VERSION = 1
ARCHS = ("encoder_decoder", "decoder_only")
QUANTILE_LEVELS = tuple(round(0.1 * k, 1) for k in range(1, 10))
MEDIAN_INDEX = QUANTILE_LEVELS.index(0.5)


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "encoder_decoder"
    n_layers: int = 4
    n_heads: int = 4
    d_model: int = 64
    d_head: int = 16
    d_ff: int = 256
    context_len: int = 256
    horizon: int = 64
    n_enc_layers: int | None = None
    tokenizer: TokenizerConfig = field(default_factory=TokenizerConfig)
    patch: PatchConfig = field(default_factory=PatchConfig)
    quantile_head: bool = False
    norm_eps: float = 1e-6
    rope_base: float = 10000.0

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        if self.n_layers < 1 or self.n_heads < 1:
            raise ValueError("need n_layers >= 1 and n_heads >= 1")
        if self.d_model != self.n_heads * self.d_head:
            raise ValueError("d_model must equal n_heads * d_head")
        if self.d_head % 2:
            raise ValueError("d_head must be even for rotary positions")
        if self.n_enc_layers is not None and self.n_enc_layers < 1:
            raise ValueError("n_enc_layers must be >= 1")
        if self.quantile_head and self.arch != "decoder_only":
            raise ValueError("the quantile head is only available for decoder_only")

    @property
    def encoder_layers(self) -> int:
        return self.n_layers if self.n_enc_layers is None else self.n_enc_layers

    @property
    def has_cross(self) -> bool:
        return self.arch == "encoder_decoder"

    @property
    def out_dim(self) -> int:
        if self.arch == "encoder_decoder":
            return self.tokenizer.vocab_size
        return self.patch.patch_len * (len(QUANTILE_LEVELS) if self.quantile_head else 1)

    def to_dict(self) -> dict:
        d = asdict(self)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if "tokenizer" in d:
            d["tokenizer"] = TokenizerConfig(**d["tokenizer"])
        if "patch" in d:
            d["patch"] = PatchConfig(**d["patch"])
        return cls(**d)


def _attn_shapes(prefix, cfg):
    h, d, k = cfg.n_heads, cfg.d_model, cfg.d_head
    return [
        (f"{prefix}.wq", (h, d, k)),
        (f"{prefix}.wk", (h, d, k)),
        (f"{prefix}.wv", (h, d, k)),
        (f"{prefix}.wo", (h, k, d)),
    ]


def _mlp_shapes(prefix, cfg):
    return [
        (f"{prefix}.w_in", (cfg.d_model, cfg.d_ff)),
        (f"{prefix}.b_in", (cfg.d_ff,)),
        (f"{prefix}.w_out", (cfg.d_ff, cfg.d_model)),
        (f"{prefix}.b_out", (cfg.d_model,)),
    ]


@lru_cache(maxsize=32)
def _weight_shapes(cfg: ModelConfig):
    d = cfg.d_model
    shapes = []
    if cfg.arch == "encoder_decoder":
        shapes.append(("embed", (cfg.tokenizer.n_tokens, d)))
        for l in range(cfg.encoder_layers):
            shapes.append((f"enc.{l}.sa_norm", (d,)))
            shapes += _attn_shapes(f"enc.{l}.sa", cfg)
            shapes.append((f"enc.{l}.mlp_norm", (d,)))
            shapes += _mlp_shapes(f"enc.{l}.mlp", cfg)
        shapes.append(("enc.final_norm", (d,)))
    else:
        shapes.append(("patch_in.w", (cfg.patch.patch_len, d)))
        shapes.append(("patch_in.b", (d,)))
    for l in range(cfg.n_layers):
        shapes.append((f"dec.{l}.sa_norm", (d,)))
        shapes += _attn_shapes(f"dec.{l}.sa", cfg)
        if cfg.has_cross:
            shapes.append((f"dec.{l}.ca_norm", (d,)))
            shapes += _attn_shapes(f"dec.{l}.ca", cfg)
        shapes.append((f"dec.{l}.mlp_norm", (d,)))
        shapes += _mlp_shapes(f"dec.{l}.mlp", cfg)
    shapes.append(("final_norm", (d,)))
    shapes.append(("w_out", (d, cfg.out_dim)))
    return tuple(shapes)


def weight_shapes(cfg: ModelConfig) -> dict:
    return dict(_weight_shapes(cfg))


def _is_residual_writer(name: str) -> bool:
    return name.endswith(".wo") or name.endswith("mlp.w_out")


@dataclass(frozen=True, eq=False)
class ModelBundle:
    """Architecture config plus every weight array, keyed by parameter name."""

    config: ModelConfig
    weights: dict

    def __post_init__(self):
        expected = weight_shapes(self.config)
        if set(expected) != set(self.weights):
            missing = sorted(set(expected) - set(self.weights))
            extra = sorted(set(self.weights) - set(expected))
            raise ShapeError(f"weights do not match config (missing={missing[:3]}, extra={extra[:3]})")
        frozen = {}
        for name, shape in expected.items():
            arr = np.array(self.weights[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {arr.shape}")
            if not np.all(np.isfinite(arr)):
                raise ShapeError(f"{name}: non-finite weights")
            arr.setflags(write=False)
            frozen[name] = arr
        object.__setattr__(self, "weights", frozen)
        object.__setattr__(self, "_tensors", None)

    def tensors(self) -> dict:
        if self._tensors is None:
            object.__setattr__(self, "_tensors", {k: ag.Tensor(v) for k, v in self.weights.items()})
        return self._tensors

    def with_weights(self, weights: dict) -> "ModelBundle":
        return ModelBundle(self.config, {**self.weights, **weights})

    def zero_layer(self, layer: int) -> "ModelBundle":
        """Copy of the bundle with every decoder layer-``layer`` parameter set to zero."""
        prefix = f"dec.{layer}."
        return self.with_weights(
            {k: np.zeros_like(v) for k, v in self.weights.items() if k.startswith(prefix)}
        )

    def digest(self) -> str:
        h = hashlib.sha256(json.dumps(self.config.to_dict(), sort_keys=True).encode())
        for name, _ in _weight_shapes(self.config):
            h.update(name.encode())
            h.update(self.weights[name].tobytes())
        return h.hexdigest()


def init_weights(cfg: ModelConfig, rng: Rng) -> ModelBundle:
    """Gaussian init: std 0.02 / sqrt(L) for residual-writing matrices, 0.02 otherwise.

    Norm gains start at one and biases at zero. Parameters are drawn in the
    fixed order of the weight table, so a seed fixes every value.
    """
    writer_std = 0.02 / math.sqrt(cfg.n_layers)
    weights = {}
    for name, shape in _weight_shapes(cfg):
        if name.endswith("norm"):
            weights[name] = np.ones(shape)
        elif ".b_" in name or name.endswith(".b"):
            weights[name] = np.zeros(shape)
        else:
            std = writer_std if _is_residual_writer(name) else 0.02
            weights[name] = rng.normal(tuple(shape), std=std)
    return ModelBundle(cfg, weights)


# --- ablation plans ----------------------------------------------------------

COMPONENTS = ("self_head", "cross_head", "all_self_heads", "all_cross_heads", "mlp", "entire_layer")
_INDEXED = ("self_head", "cross_head")


@dataclass(frozen=True, order=True)
class AblationTarget:
    layer: int
    component: str
    index: int | None = None

    def __post_init__(self):
        if self.component not in COMPONENTS:
            raise PlanError(f"unknown component {self.component!r}")
        if (self.component in _INDEXED) != (self.index is not None):
            raise PlanError(f"{self.component} {'needs' if self.component in _INDEXED else 'takes no'} head index")

    def to_dict(self):
        d = {"layer": self.layer, "component": self.component}
        if self.index is not None:
            d["index"] = self.index
        return d


@dataclass(frozen=True)
class LayerAblation:
    self_heads: frozenset = frozenset()
    cross_heads: frozenset = frozenset()
    mlp: bool = False


class AblationPlan:
    """A set of zero-ablation targets; duplicates collapse."""

    def __init__(self, entries=()):
        targets = []
        for e in entries:
            if isinstance(e, AblationTarget):
                targets.append(e)
            elif isinstance(e, dict):
                targets.append(AblationTarget(int(e["layer"]), e["component"], e.get("index")))
            else:
                targets.append(AblationTarget(*e))
        self.entries = frozenset(targets)

    def __repr__(self):
        return f"AblationPlan({sorted(self.entries, key=_target_key)})"

    def __eq__(self, other):
        return isinstance(other, AblationPlan) and self.entries == other.entries

    def __hash__(self):
        return hash(self.entries)

    def __len__(self):
        return len(self.entries)

    def __iter__(self):
        return iter(sorted(self.entries, key=_target_key))

    @property
    def is_empty(self) -> bool:
        return not self.entries

    def union(self, other: "AblationPlan") -> "AblationPlan":
        return AblationPlan(self.entries | other.entries)

    def validate(self, cfg: ModelConfig) -> None:
        for t in self.entries:
            if not 0 <= t.layer < cfg.n_layers:
                raise PlanError(f"layer {t.layer} out of range [0, {cfg.n_layers})")
            if "cross" in t.component and not cfg.has_cross:
                raise PlanError(f"{t.component} needs an encoder-decoder model")
            if t.index is not None and not 0 <= t.index < cfg.n_heads:
                raise PlanError(f"head {t.index} out of range [0, {cfg.n_heads})")

    def resolve(self, cfg: ModelConfig) -> dict:
        """Map layer -> :class:`LayerAblation` with every entry expanded to heads/MLP."""
        self.validate(cfg)
        all_heads = frozenset(range(cfg.n_heads))
        out = {}
        for t in self.entries:
            cur = out.get(t.layer, LayerAblation())
            sh, ch, mlp = set(cur.self_heads), set(cur.cross_heads), cur.mlp
            if t.component == "self_head":
                sh.add(t.index)
            elif t.component == "cross_head":
                ch.add(t.index)
            elif t.component == "all_self_heads":
                sh |= all_heads
            elif t.component == "all_cross_heads":
                ch |= all_heads
            elif t.component == "mlp":
                mlp = True
            else:
                sh |= all_heads
                if cfg.has_cross:
                    ch |= all_heads
                mlp = True
            out[t.layer] = LayerAblation(frozenset(sh), frozenset(ch), mlp)
        return out

    def to_json(self) -> list:
        return [t.to_dict() for t in self]

    @classmethod
    def from_json(cls, items) -> "AblationPlan":
        if not isinstance(items, list):
            raise PlanError("plan file must hold a JSON list")
        return cls(items)


def _target_key(t: AblationTarget):
    return (t.layer, t.component, -1 if t.index is None else t.index)


EMPTY_PLAN = AblationPlan()


# --- trace -------------------------------------------------------------------

@dataclass
class ForecastTrace:
    """Per-step instrumentation of one forecast.

    Arrays carry a leading step axis of length T (decoded tokens or patches).
    ``residuals[t, l]`` is ``H^(l)`` at the query position of step t;
    attention rows are padded with zeros up to the longest key length.
    """

    arch: str
    n_layers: int
    residuals: np.ndarray
    self_attn: np.ndarray
    self_head_writes: np.ndarray
    self_writes: np.ndarray
    mlp_writes: np.ndarray
    final_hidden: np.ndarray
    outputs: np.ndarray
    query_inputs: np.ndarray
    cross_attn: np.ndarray | None = None
    cross_head_writes: np.ndarray | None = None
    cross_writes: np.ndarray | None = None
    encoder_tokens: np.ndarray | None = None
    scale: float | None = None
    patch_stats: PatchStats | None = None
    warnings: list = field(default_factory=list)

    @property
    def n_steps(self) -> int:
        return self.residuals.shape[0]


def head_contribution(trace: ForecastTrace, layer: int, head: int, kind: str = "self") -> np.ndarray:
    """Residual write ``O^i W_O^i`` of one head at every recorded step, shape [T, d_model]."""
    writes = trace.self_head_writes if kind == "self" else trace.cross_head_writes
    if writes is None:
        raise ShapeError(f"trace has no {kind}-attention heads")
    if not 0 <= layer < writes.shape[1] or not 0 <= head < writes.shape[2]:
        raise IndexError(f"layer/head ({layer}, {head}) out of range {writes.shape[1:3]}")
    return writes[:, layer, head, :].copy()


# --- core computation ----------------------------------------------------------

@lru_cache(maxsize=64)
def _rope_tables(length: int, d_head: int, base: float):
    half = d_head // 2
    inv = base ** (-np.arange(half) / half)
    ang = np.arange(length)[:, None] * inv[None, :]
    return np.cos(ang), np.sin(ang)


@lru_cache(maxsize=64)
def _causal_mask(n: int):
    return np.tril(np.ones((n, n), dtype=bool))


def _attention(p, prefix, cfg, xq, xkv, causal, rotary, ablated, rec, key):
    n_q, n_k = xq.shape[0], xkv.shape[0]
    q = ag.matmul(ag.reshape(xq, (1, n_q, cfg.d_model)), p[f"{prefix}.wq"])
    k = ag.matmul(ag.reshape(xkv, (1, n_k, cfg.d_model)), p[f"{prefix}.wk"])
    v = ag.matmul(ag.reshape(xkv, (1, n_k, cfg.d_model)), p[f"{prefix}.wv"])
    if rotary:
        cos, sin = _rope_tables(max(n_q, n_k), cfg.d_head, cfg.rope_base)
        q = ag.rope(q, cos[n_k - n_q:n_k], sin[n_k - n_q:n_k])
        k = ag.rope(k, cos[:n_k], sin[:n_k])
    scores = ag.mul(ag.matmul(q, ag.swapaxes(k)), 1.0 / math.sqrt(cfg.d_head))
    mask = _causal_mask(n_k)[n_k - n_q:] if causal else None
    attn = ag.softmax(scores, mask)
    per_head = ag.matmul(ag.matmul(attn, v), p[f"{prefix}.wo"])
    if ablated:
        keep = np.ones((cfg.n_heads, 1, 1))
        keep[sorted(ablated)] = 0.0
        per_head = ag.mul(per_head, keep)
    write = ag.sum_axis(per_head, 0)
    if rec is not None:
        rec[f"{key}_attn"].append(attn.data)
        rec[f"{key}_heads"].append(per_head.data)
        rec[f"{key}_write"].append(write.data)
    return write


def _mlp(p, prefix, xn):
    h = ag.gelu(ag.add(ag.matmul(xn, p[f"{prefix}.w_in"]), p[f"{prefix}.b_in"]))
    return ag.add(ag.matmul(h, p[f"{prefix}.w_out"]), p[f"{prefix}.b_out"])


def _norm(p, name, x, cfg):
    return ag.rmsnorm(x, p[name], cfg.norm_eps)


def encode(p, cfg: ModelConfig, enc_tokens):
    """Encoder stack over token ids; returns the normalized encoder output E."""
    x = ag.embed(p["embed"], enc_tokens)
    for l in range(cfg.encoder_layers):
        pre = f"enc.{l}"
        xn = _norm(p, f"{pre}.sa_norm", x, cfg)
        x = ag.add(x, _attention(p, f"{pre}.sa", cfg, xn, xn, False, True, None, None, None))
        x = ag.add(x, _mlp(p, f"{pre}.mlp", _norm(p, f"{pre}.mlp_norm", x, cfg)))
    return _norm(p, "enc.final_norm", x, cfg)


def embed_patches(p, patches):
    return ag.add(ag.matmul(patches, p["patch_in.w"]), p["patch_in.b"])


def decoder_stack(p, cfg: ModelConfig, x, enc_out=None, resolved=None, n_layers=None, rec=None):
    """Run the first ``n_layers`` decoder layers on residual ``x`` [T, d_model].

    ``resolved`` is the output of :meth:`AblationPlan.resolve`. When ``rec``
    is a dict, per-layer residuals, attention weights and writes are appended
    to its lists.
    """
    resolved = resolved or {}
    n_layers = cfg.n_layers if n_layers is None else n_layers
    if rec is not None:
        rec["residual"].append(x.data)
    for l in range(n_layers):
        pre = f"dec.{l}"
        abl = resolved.get(l)
        xn = _norm(p, f"{pre}.sa_norm", x, cfg)
        x = ag.add(x, _attention(p, f"{pre}.sa", cfg, xn, xn, True, True,
                                 abl.self_heads if abl else None, rec, "self"))
        if cfg.has_cross:
            xn = _norm(p, f"{pre}.ca_norm", x, cfg)
            x = ag.add(x, _attention(p, f"{pre}.ca", cfg, xn, enc_out, False, False,
                                     abl.cross_heads if abl else None, rec, "cross"))
        if abl is not None and abl.mlp:
            if rec is not None:
                rec["mlp_write"].append(np.zeros(x.shape))
        else:
            m = _mlp(p, f"{pre}.mlp", _norm(p, f"{pre}.mlp_norm", x, cfg))
            x = ag.add(x, m)
            if rec is not None:
                rec["mlp_write"].append(m.data)
        if rec is not None:
            rec["residual"].append(x.data)
    return x


def output_head(p, cfg: ModelConfig, x):
    """``N(x) @ W_out`` and the normalized hidden state it was computed from."""
    hidden = _norm(p, "final_norm", x, cfg)
    return ag.matmul(hidden, p["w_out"]), hidden


def _new_rec():
    keys = ["residual", "self_attn", "self_heads", "self_write", "cross_attn",
            "cross_heads", "cross_write", "mlp_write"]
    return {k: [] for k in keys}


def _select_rows(rec, rows):
    """Collapse a single-pass record into per-row arrays (rows = index array)."""
    out = {"residual": np.stack([r[rows] for r in rec["residual"]], axis=1)}
    for key in ("self", "cross"):
        if rec[f"{key}_attn"]:
            out[f"{key}_attn"] = np.stack([a[:, rows, :] for a in rec[f"{key}_attn"]], axis=0).transpose(2, 0, 1, 3)
            out[f"{key}_heads"] = np.stack([h[:, rows, :] for h in rec[f"{key}_heads"]], axis=0).transpose(2, 0, 1, 3)
            out[f"{key}_write"] = np.stack([w[rows] for w in rec[f"{key}_write"]], axis=1)
    n = len(rows)
    d = out["residual"].shape[-1]
    out["mlp_write"] = (np.stack([m[rows] for m in rec["mlp_write"]], axis=1)
                        if rec["mlp_write"] else np.zeros((n, 0, d)))
    if "self_attn" not in out:
        out["self_attn"] = np.zeros((n, 0, 0, 0))
        out["self_heads"] = np.zeros((n, 0, 0, d))
        out["self_write"] = np.zeros((n, 0, d))
    return out


def _pad_last(arrays, width):
    return np.concatenate(
        [np.pad(a, [(0, 0)] * (a.ndim - 1) + [(0, width - a.shape[-1])]) for a in arrays], axis=0
    )


def _assemble(cfg, steps, outputs, hidden, queries, n_layers, **extra) -> ForecastTrace:
    width = max(s["self_attn"].shape[-1] for s in steps)
    cross = steps[0].get("cross_attn") is not None
    return ForecastTrace(
        arch=cfg.arch,
        n_layers=n_layers,
        residuals=np.concatenate([s["residual"] for s in steps], axis=0),
        self_attn=_pad_last([s["self_attn"] for s in steps], width),
        self_head_writes=np.concatenate([s["self_heads"] for s in steps], axis=0),
        self_writes=np.concatenate([s["self_write"] for s in steps], axis=0),
        mlp_writes=np.concatenate([s["mlp_write"] for s in steps], axis=0),
        final_hidden=np.concatenate(hidden, axis=0),
        outputs=np.concatenate(outputs, axis=0),
        query_inputs=np.asarray(queries),
        cross_attn=np.concatenate([s["cross_attn"] for s in steps], axis=0) if cross else None,
        cross_head_writes=np.concatenate([s["cross_heads"] for s in steps], axis=0) if cross else None,
        cross_writes=np.concatenate([s["cross_write"] for s in steps], axis=0) if cross else None,
        **extra,
    )


def _context_values(bundle, context, notes):
    if isinstance(context, TimeSeries):
        values = context.values[:, 0]
    else:
        values = np.asarray(context, dtype=np.float64).reshape(-1)
    c = bundle.config.context_len
    if values.shape[0] > c:
        msg = f"context of length {values.shape[0]} truncated to the last {c} points"
        notes.append(msg)
        warnings.warn(msg, ContextTruncatedWarning, stacklevel=3)
        values = values[-c:]
    return values


def context_tokens(bundle: ModelBundle, context):
    """Scale and token ids for a context (left-truncated to ``context_len``)."""
    notes = []
    values = _context_values(bundle, context, notes)
    scale, scaled = mean_scale(values)
    return scale, quantize(scaled, bundle.config.tokenizer), notes


def _sample_token(logits, rng: Rng):
    z = logits - logits.max()
    pr = np.exp(z)
    pr /= pr.sum()
    u = rng.uniform()
    return int(min(np.searchsorted(np.cumsum(pr), u, side="right"), pr.size - 1))


def decode_tokens(bundle: ModelBundle, enc_tokens, horizon, plan=None, trace=False,
                  n_layers=None, sample_rng=None, first_tokens=()):
    """Greedy (or sampled) token rollout from explicit encoder token ids.

    ``enc_tokens`` is used as given (callers append EOS). The decoder input
    starts with DECODER_START followed by ``first_tokens``. Returns
    ``(generated_tokens, trace_or_None)``.
    """
    cfg = bundle.config
    p = bundle.tensors()
    resolved = (plan or EMPTY_PLAN).resolve(cfg)
    n_used = cfg.n_layers if n_layers is None else n_layers
    with ag.no_grad():
        enc_out = encode(p, cfg, np.asarray(enc_tokens, dtype=np.int64))
        dec = [DECODER_START_ID] + [int(t) for t in first_tokens]
        steps, outputs, hidden, queries = [], [], [], []
        generated = []
        for _ in range(horizon):
            rec = _new_rec() if trace else None
            x = ag.embed(p["embed"], np.asarray(dec, dtype=np.int64))
            x = decoder_stack(p, cfg, x, enc_out, resolved, n_used, rec)
            logits, hid = output_head(p, cfg, x[-1:])
            row = logits.data[0]
            if sample_rng is None:
                tok = int(np.argmax(row)) + N_SPECIAL
            else:
                tok = _sample_token(row, sample_rng) + N_SPECIAL
            if trace:
                steps.append(_select_rows(rec, np.array([len(dec) - 1])))
                outputs.append(logits.data)
                hidden.append(hid.data)
                queries.append(dec[-1])
            generated.append(tok)
            dec.append(tok)
    tr = None
    if trace:
        tr = _assemble(cfg, steps, outputs, hidden, queries, n_used,
                       encoder_tokens=np.asarray(enc_tokens, dtype=np.int64))
    return np.asarray(generated, dtype=np.int64), tr


def teacher_forced_trace(bundle: ModelBundle, enc_tokens, dec_tokens, plan=None, n_layers=None) -> ForecastTrace:
    """Single decoder pass over fixed ``dec_tokens``, recording every position."""
    cfg = bundle.config
    if cfg.arch != "encoder_decoder":
        raise ShapeError("teacher_forced_trace needs an encoder-decoder model")
    p = bundle.tensors()
    resolved = (plan or EMPTY_PLAN).resolve(cfg)
    n_used = cfg.n_layers if n_layers is None else n_layers
    dec = np.asarray(dec_tokens, dtype=np.int64)
    with ag.no_grad():
        enc_out = encode(p, cfg, np.asarray(enc_tokens, dtype=np.int64))
        rec = _new_rec()
        x = decoder_stack(p, cfg, ag.embed(p["embed"], dec), enc_out, resolved, n_used, rec)
        logits, hid = output_head(p, cfg, x)
    step = _select_rows(rec, np.arange(dec.shape[0]))
    return _assemble(cfg, [step], [logits.data], [hid.data], dec, n_used,
                     encoder_tokens=np.asarray(enc_tokens, dtype=np.int64))


def _forward_tokens(bundle, context, plan, trace, horizon, n_layers, sample_rng):
    cfg = bundle.config
    scale, tokens, notes = context_tokens(bundle, context)
    enc_tokens = np.concatenate([tokens, [EOS_ID]])
    gen, tr = decode_tokens(bundle, enc_tokens, horizon, plan, trace, n_layers, sample_rng)
    values = dequantize(gen, cfg.tokenizer, scale)
    if tr is not None:
        tr.scale = scale
        tr.warnings = notes
    return values, tr


def _forward_patches(bundle, context, plan, trace, horizon, n_layers):
    cfg = bundle.config
    p = bundle.tensors()
    notes = []
    values = _context_values(bundle, context, notes)
    patches, stats = patchify(values, cfg.patch)
    resolved = (plan or EMPTY_PLAN).resolve(cfg)
    n_used = cfg.n_layers if n_layers is None else n_layers
    plen = cfg.patch.patch_len
    n_steps = -(-horizon // plen)
    seq = patches
    steps, outputs, hidden, queries, preds = [], [], [], [], []
    with ag.no_grad():
        for _ in range(n_steps):
            rec = _new_rec() if trace else None
            x = embed_patches(p, seq)
            x = decoder_stack(p, cfg, x, None, resolved, n_used, rec)
            out, hid = output_head(p, cfg, x[-1:])
            row = out.data[0]
            if cfg.quantile_head:
                nxt = row.reshape(plen, len(QUANTILE_LEVELS))[:, MEDIAN_INDEX]
            else:
                nxt = row
            if trace:
                steps.append(_select_rows(rec, np.array([seq.shape[0] - 1])))
                outputs.append(out.data)
                hidden.append(hid.data)
                queries.append(seq.shape[0] - 1)
            preds.append(nxt.copy())
            seq = np.vstack([seq, nxt[None, :]])
    z = np.concatenate(preds)[:horizon]
    values_out = z * stats.std + stats.mean
    tr = None
    if trace:
        tr = _assemble(cfg, steps, outputs, hidden, queries, n_used, patch_stats=stats, warnings=notes)
    return values_out, tr


def forward(bundle: ModelBundle, context, plan: AblationPlan | None = None, trace: bool = False,
            horizon: int | None = None, n_layers: int | None = None, sample_rng: Rng | None = None):
    """Forecast ``horizon`` points after ``context``.

    Parameters
    ----------
    bundle : ModelBundle
    context : TimeSeries or 1-D array
        Channel 0 is used; contexts longer than ``context_len`` are
        left-truncated and a ``ContextTruncatedWarning`` is issued.
    plan : AblationPlan, optional
        Components whose residual writes are replaced by zero.
    trace : bool
        Record a :class:`ForecastTrace`.
    n_layers : int, optional
        Stop after this many decoder layers and read out ``H^(n_layers)``.
    sample_rng : Rng, optional
        Sample tokens instead of greedy argmax (token model only).

    Returns
    -------
    (TimeSeries, ForecastTrace or None)
    """
    cfg = bundle.config
    horizon = cfg.horizon if horizon is None else int(horizon)
    if n_layers is not None and not 0 <= n_layers <= cfg.n_layers:
        raise ValueError(f"n_layers must lie in [0, {cfg.n_layers}]")
    if cfg.arch == "encoder_decoder":
        values, tr = _forward_tokens(bundle, context, plan, trace, horizon, n_layers, sample_rng)
    else:
        values, tr = _forward_patches(bundle, context, plan, trace, horizon, n_layers)
    dt = context.dt if isinstance(context, TimeSeries) else 1.0
    name = context.name if isinstance(context, TimeSeries) else "forecast"
    period = context.period if isinstance(context, TimeSeries) else None
    if values.shape[0] < 2:
        values = np.concatenate([values, values])[:2] if values.size else np.zeros(2)
    return TimeSeries(values, dt, f"{name}:forecast", period), tr


def forecast_quantiles(bundle: ModelBundle, context, plan=None, horizon=None) -> np.ndarray:
    """Quantile rollout [horizon, 9] of a decoder-only model with a quantile head."""
    cfg = bundle.config
    if not cfg.quantile_head:
        raise ShapeError("model has no quantile head")
    horizon = cfg.horizon if horizon is None else horizon
    _, tr = _forward_patches(bundle, context, plan, True, horizon, None)
    q = tr.outputs.reshape(tr.n_steps * cfg.patch.patch_len, len(QUANTILE_LEVELS))[:horizon]
    return q * tr.patch_stats.std + tr.patch_stats.mean


# --- persistence -------------------------------------------------------------

def bundle_to_dict(bundle: ModelBundle) -> dict:
    return {
        "format_version": FORMAT_VERSION,
        "config": bundle.config.to_dict(),
        "weights": {k: bundle.weights[k].tolist() for k, _ in _weight_shapes(bundle.config)},
    }


def bundle_from_dict(doc) -> ModelBundle:
    if not isinstance(doc, dict) or "format_version" not in doc:
        raise BundleFormatError("missing format_version header")
    if doc["format_version"] != FORMAT_VERSION:
        raise BundleFormatError(f"unsupported format_version {doc['format_version']!r}")
    try:
        cfg = ModelConfig.from_dict(doc["config"])
        weights = {k: np.asarray(v, dtype=np.float64) for k, v in doc["weights"].items()}
        return ModelBundle(cfg, weights)
    except (KeyError, TypeError, ValueError) as exc:
        raise BundleFormatError(f"malformed bundle: {exc}") from exc


def save_bundle(bundle: ModelBundle, path) -> None:
    """Write the versioned JSON weight file atomically (temp file + rename)."""
    payload = json.dumps(bundle_to_dict(bundle))
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=directory, suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        fh.write(payload)
    os.replace(tmp, path)


def load_bundle(path, expected_config: ModelConfig | None = None) -> ModelBundle:
    try:
        with open(path) as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise BundleFormatError(f"{path}: not valid JSON ({exc})") from exc
    bundle = bundle_from_dict(doc)
    if expected_config is not None and bundle.config != expected_config:
        raise BundleFormatError("bundle config does not match the expected config")
    return bundle


def replace_config(cfg: ModelConfig, **changes) -> ModelConfig:
    return replace(cfg, **changes)
