"""Read-only instruments over forecast traces.

Direct logit attribution on the residual stream, layer truncation, attention
rollouts and head sharpness, the entropic rank of head outputs, and the
repeated-random-tokens (RRT) induction-head test.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .errors import ConfigError, UndefinedInputError, UnsupportedArchitectureError
from .model import (
    DECODER_START_ID,
    EOS_ID,
    N_SPECIAL,
    ForecastTrace,
    ModelBundle,
    decode_tokens,
    forward,
    output_head,
    teacher_forced_trace,
)
from .numerics import Rng, svd

SHARP_THRESHOLD = 0.38
DIFFUSE_THRESHOLD = 0.62
PREFIX_THRESHOLD = 0.3
COPY_THRESHOLD = 2.0
LOG_FLOOR = 1e-12
ZERO_NORM = 1e-12


def _softmax(z):
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def entropy(p, axis=-1):
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=axis)


def _require_tokens(bundle, what):
    if bundle.config.arch != "encoder_decoder":
        raise UnsupportedArchitectureError(f"{what} needs the encoder-decoder token model")


# --- direct logit attribution -----------------------------------------------------

@dataclass
class LogitMap:
    """``probs[t, l]`` is softmax(N(H^(l)) W_out) at decoded step t, l = 0..L."""

    logits: np.ndarray
    probs: np.ndarray
    tokens: np.ndarray

    @property
    def n_layers(self) -> int:
        return self.probs.shape[1] - 1


def residual_readout(bundle: ModelBundle, residuals: np.ndarray) -> np.ndarray:
    """Apply the final norm and output map to each residual row separately.

    ``residuals`` has shape [..., d_model]. Rows go through the same code path
    as the model's own readout so the last layer reproduces it exactly.
    """
    p = bundle.tensors()
    flat = residuals.reshape(-1, residuals.shape[-1])
    out = np.empty((flat.shape[0], bundle.config.out_dim))
    with ag.no_grad():
        for i in range(flat.shape[0]):
            logits, _ = output_head(p, bundle.config, ag.Tensor(flat[i:i + 1]))
            out[i] = logits.data[0]
    return out.reshape(residuals.shape[:-1] + (bundle.config.out_dim,))


def logit_map_from_trace(bundle: ModelBundle, trace: ForecastTrace, tokens=None) -> LogitMap:
    logits = residual_readout(bundle, trace.residuals)
    return LogitMap(logits, _softmax(logits), np.asarray(tokens if tokens is not None else []))


def dla_logit_maps(bundle: ModelBundle, context, horizon=None, plan=None) -> LogitMap:
    """Per-layer token distributions along the greedy rollout."""
    _require_tokens(bundle, "dla_logit_maps")
    ts, tr = forward(bundle, context, plan=plan, trace=True, horizon=horizon)
    tokens = np.argmax(tr.outputs, axis=1) + N_SPECIAL
    return logit_map_from_trace(bundle, tr, tokens)


def layer_outputs(bundle: ModelBundle, context, horizon=None, plan=None) -> np.ndarray:
    """Decoder-only variant: raw ``N(H^(l)) W_out`` patch outputs, shape [steps, L+1, out_dim]."""
    if bundle.config.arch != "decoder_only":
        raise UnsupportedArchitectureError("layer_outputs is the decoder-only readout")
    _, tr = forward(bundle, context, plan=plan, trace=True, horizon=horizon)
    return residual_readout(bundle, tr.residuals)


def layer_entropy_curve(logit_map: LogitMap) -> np.ndarray:
    """Mean entropy (nats) over decoded steps for every layer readout."""
    return entropy(logit_map.probs).mean(axis=0)


def truncated_forecast(bundle: ModelBundle, context, layer: int, horizon=None, plan=None):
    """Forecast read out from ``H^(layer)``, dropping every later decoder layer."""
    ts, _ = forward(bundle, context, plan=plan, horizon=horizon, n_layers=layer)
    return ts


# --- attention rollout and sharpness -------------------------------------------------

@dataclass
class AttentionRollout:
    """``matrix[h]`` is [keys, steps]; column t is head h's attention at decoded step t.

    For the token model the keys are the encoder positions (context tokens
    then EOS) and ``kind`` is ``cross``; the decoder-only variant stores the
    causal self-attention rows zero-padded to the longest row.
    """

    layer: int
    kind: str
    matrix: np.ndarray

    def head(self, h: int) -> np.ndarray:
        return self.matrix[h]


def rollout_from_trace(trace: ForecastTrace, layer: int) -> AttentionRollout:
    if trace.cross_attn is not None:
        return AttentionRollout(layer, "cross", trace.cross_attn[:, layer].transpose(1, 2, 0).copy())
    return AttentionRollout(layer, "self", trace.self_attn[:, layer].transpose(1, 2, 0).copy())


def attention_rollout(bundle: ModelBundle, context, horizon=None, layer: int = 0, plan=None) -> AttentionRollout:
    _, tr = forward(bundle, context, plan=plan, trace=True, horizon=horizon)
    return rollout_from_trace(tr, layer)


def head_entropy(rollout: AttentionRollout, head: int) -> float:
    """Mean over steps of the entropy of each attention column (nats)."""
    return float(entropy(rollout.matrix[head], axis=0).mean())


def minmax_normalize(values) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    lo, hi = v.min(), v.max()
    if hi - lo <= 0:
        return np.zeros_like(v)
    return (v - lo) / (hi - lo)


@dataclass
class HeadProfile:
    layer: int
    head: int
    raw_entropy: float
    entropy: float = math.nan
    classification: str = "neither"
    prefix_score: float = math.nan
    copy_score: float = math.nan
    induction: bool = False
    sharp: bool = False

    def to_dict(self):
        return asdict(self)


def classify_sharp(profiles, threshold: float = SHARP_THRESHOLD, diffuse: float = DIFFUSE_THRESHOLD):
    """Label heads sharp (entropy <= threshold), diffuse (>= diffuse) or neither."""
    out = []
    for p in profiles:
        sharp = p.entropy <= threshold
        if sharp:
            label = "sharp"
        elif p.entropy >= diffuse:
            label = "diffuse"
        else:
            label = "neither"
        out.append(HeadProfile(**{**asdict(p), "classification": label, "sharp": bool(sharp)}))
    return out


def profiles_from_rollouts(rollouts) -> list:
    """Head profiles with min-max normalized entropies across all given layers."""
    raw = []
    for ro in rollouts:
        for h in range(ro.matrix.shape[0]):
            raw.append(HeadProfile(ro.layer, h, head_entropy(ro, h)))
    norm = minmax_normalize([p.raw_entropy for p in raw])
    for p, e in zip(raw, norm):
        p.entropy = float(e)
    return classify_sharp(raw)


def head_profiles(bundle: ModelBundle, context, horizon=None) -> list:
    _, tr = forward(bundle, context, trace=True, horizon=horizon)
    return profiles_from_rollouts([rollout_from_trace(tr, l) for l in range(tr.n_layers)])


# --- entropic rank -----------------------------------------------------------------

def location_entropy(vectors) -> float | None:
    """Spectral entropy of the normalized head vectors at one location.

    Vectors with norm below 1e-12 are dropped; returns None when none remain.
    """
    x = np.asarray(vectors, dtype=np.float64)
    norms = np.linalg.norm(x, axis=1)
    keep = norms >= ZERO_NORM
    if not keep.any():
        return None
    u = x[keep] / norms[keep, None]
    w = svd(u).s
    p = w / w.sum()
    return float(-np.sum(p * np.log(np.maximum(p, LOG_FLOOR))))


def entropic_rank_from_vectors(vectors) -> float:
    """``exp`` of the mean location entropy; ``vectors`` is [locations, H, d]."""
    ents = [e for e in (location_entropy(v) for v in np.asarray(vectors)) if e is not None]
    if not ents:
        raise UndefinedInputError("every location had only zero head vectors")
    return float(math.exp(np.mean(ents)))


def head_vectors(traces, layer: int, kind: str = "cross") -> np.ndarray:
    """Stack per-head writes of ``layer`` over traces and steps, shape [locations, H, d]."""
    parts = []
    for tr in traces:
        w = tr.cross_head_writes if kind == "cross" else tr.self_head_writes
        if w is None:
            raise UnsupportedArchitectureError("trace has no cross-attention heads")
        parts.append(w[:, layer])
    return np.concatenate(parts, axis=0)


def entropic_rank(bundle: ModelBundle, contexts, layer: int, kind: str | None = None, horizon=None) -> float:
    if bundle.config.n_heads < 2:
        raise ConfigError("entropic rank needs at least two heads")
    kind = kind or ("cross" if bundle.config.has_cross else "self")
    traces = [forward(bundle, c, trace=True, horizon=horizon)[1] for c in contexts]
    return entropic_rank_from_vectors(head_vectors(traces, layer, kind))


# --- RRT induction test ---------------------------------------------------------------

@dataclass
class OverlapTable:
    """Joint proportions of induction (I) and sharp (S) heads."""

    p_is: float
    p_i_not_s: float
    p_not_i_s: float
    p_not_i_not_s: float
    n_heads: int | None = None

    @classmethod
    def from_flags(cls, induction, sharp) -> "OverlapTable":
        i = np.asarray(induction, dtype=bool)
        s = np.asarray(sharp, dtype=bool)
        n = i.size
        return cls(float(np.sum(i & s)) / n, float(np.sum(i & ~s)) / n,
                   float(np.sum(~i & s)) / n, float(np.sum(~i & ~s)) / n, n)

    @property
    def p_i(self) -> float:
        return self.p_is + self.p_i_not_s

    @property
    def p_s(self) -> float:
        return self.p_is + self.p_not_i_s

    @property
    def p_s_given_i(self) -> float:
        return self.p_is / self.p_i if self.p_i > 0 else math.nan

    @property
    def p_i_given_s(self) -> float:
        return self.p_is / self.p_s if self.p_s > 0 else math.nan

    def to_dict(self):
        return {
            "p_is": self.p_is, "p_i_not_s": self.p_i_not_s, "p_not_i_s": self.p_not_i_s,
            "p_not_i_not_s": self.p_not_i_not_s, "p_i": self.p_i, "p_s": self.p_s,
            "p_s_given_i": self.p_s_given_i, "p_i_given_s": self.p_i_given_s, "n_heads": self.n_heads,
        }


def prefix_score(attn_columns, enc_tokens, current_tokens) -> float:
    """Mean attention on the latest encoder position holding each step's current token.

    ``attn_columns`` is [steps, keys]. Steps whose current token does not
    occur among the encoder tokens are skipped; NaN if all are.
    """
    enc = np.asarray(enc_tokens)
    vals = []
    for row, tok in zip(np.asarray(attn_columns), current_tokens):
        pos = np.flatnonzero(enc == tok)
        if pos.size:
            vals.append(row[pos[-1]])
    return float(np.mean(vals)) if vals else math.nan


def copy_zscore(attribution, target_bin: int) -> float:
    """Standard deviations by which the target bin exceeds the mean attribution."""
    a = np.asarray(attribution, dtype=np.float64)
    sd = a.std()
    if sd == 0:
        return 0.0
    return float((a[target_bin] - a.mean()) / sd)


def head_logit_attribution(bundle: ModelBundle, write, final_residual) -> np.ndarray:
    """Linearized readout of one head write: ``g * write / rms(H^L) @ W_out``."""
    eps = bundle.config.norm_eps
    rms = np.sqrt(np.mean(final_residual * final_residual, axis=-1, keepdims=True) + eps)
    return (write / rms * bundle.weights["final_norm"]) @ bundle.weights["w_out"]


@dataclass
class RrtReport:
    profiles: list
    overlap: OverlapTable
    motif: list
    teacher_forced: bool
    thresholds: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "motif": [int(t) for t in self.motif],
            "teacher_forced": self.teacher_forced,
            "thresholds": self.thresholds,
            "profiles": [p.to_dict() for p in self.profiles],
            "overlap": self.overlap.to_dict(),
        }


def rrt_test(bundle: ModelBundle, rng: Rng, motif_len: int = 32, repeats: int = 4,
             teacher_forced: bool = True, prefix_threshold: float = PREFIX_THRESHOLD,
             copy_threshold: float = COPY_THRESHOLD, sharp_threshold: float = SHARP_THRESHOLD) -> RrtReport:
    """Repeated-random-tokens test over every cross-attention head.

    A motif of ``motif_len`` value tokens repeated ``repeats`` times plus EOS
    is the encoder input. The decoder gets DECODER_START and the motif's first
    token; by default the rest of one motif is teacher-forced, otherwise the
    greedy rollout continues for ``motif_len`` steps. For each step whose
    current token occurs in the encoder, the expected next token is the one
    following its latest occurrence in the motif cycle.
    """
    _require_tokens(bundle, "rrt_test")
    cfg = bundle.config
    if motif_len < 1 or repeats < 2:
        raise ConfigError("need motif_len >= 1 and repeats >= 2")
    if motif_len * repeats > cfg.context_len:
        raise ConfigError(f"motif_len * repeats = {motif_len * repeats} exceeds context_len {cfg.context_len}")
    motif = rng.integers(N_SPECIAL, cfg.tokenizer.n_tokens, size=motif_len)
    enc = np.concatenate([np.tile(motif, repeats), [EOS_ID]]).astype(np.int64)
    if teacher_forced:
        dec = np.concatenate([[DECODER_START_ID], motif]).astype(np.int64)
    else:
        gen, _ = decode_tokens(bundle, enc, motif_len - 1, first_tokens=[int(motif[0])])
        dec = np.concatenate([[DECODER_START_ID, motif[0]], gen]).astype(np.int64)
    tr = teacher_forced_trace(bundle, enc, dec)
    steps = np.arange(1, dec.shape[0])
    current = dec[steps]
    body = enc[:-1]
    targets = []
    for tok in current:
        pos = np.flatnonzero(body == tok)
        targets.append(None if not pos.size else int(motif[(pos[-1] + 1) % motif_len]))
    final_res = tr.residuals[:, -1]
    profiles = []
    for l in range(cfg.n_layers):
        for h in range(cfg.n_heads):
            attn = tr.cross_attn[steps, l, h]
            ps = prefix_score(attn, enc, current)
            scores = []
            for j, t in enumerate(steps):
                if targets[j] is None:
                    continue
                attr = head_logit_attribution(bundle, tr.cross_head_writes[t, l, h], final_res[t])
                scores.append(copy_zscore(attr, targets[j] - N_SPECIAL))
            cs = float(np.mean(scores)) if scores else math.nan
            raw = float(entropy(tr.cross_attn[steps, l, h], axis=-1).mean())
            ind = bool(ps >= prefix_threshold and cs >= copy_threshold)
            profiles.append(HeadProfile(l, h, raw, prefix_score=ps, copy_score=cs, induction=ind))
    for p, e in zip(profiles, minmax_normalize([p.raw_entropy for p in profiles])):
        p.entropy = float(e)
    profiles = classify_sharp(profiles, sharp_threshold)
    overlap = OverlapTable.from_flags([p.induction for p in profiles], [p.sharp for p in profiles])
    thresholds = {"prefix": prefix_threshold, "copy": copy_threshold, "sharp": sharp_threshold,
                  "diffuse": DIFFUSE_THRESHOLD}
    return RrtReport(profiles, overlap, [int(t) for t in motif], teacher_forced, thresholds)
