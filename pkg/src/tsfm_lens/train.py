"""Adam training of the toy forecasters with exact reverse-mode gradients."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .errors import NumericError, ShapeError, TrainingDiverged
from .model import (
    DECODER_START_ID,
    EOS_ID,
    N_SPECIAL,
    QUANTILE_LEVELS,
    ModelBundle,
    decoder_stack,
    embed_patches,
    encode,
    output_head,
)
from .numerics import Rng
from .synthdata import TimeSeries
from .tokenize import mean_scale, patchify, quantize

LOSSES = ("cross_entropy", "mse", "quantile")
DIVERGENCE_FACTOR = 10.0
DIVERGENCE_PATIENCE = 100


@dataclass(frozen=True)
class TrainConfig:
    loss: str = "cross_entropy"
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: int = 1000
    batch_size: int = 8
    seed: int = 0
    context_len: int | None = None
    horizon: int | None = None

    def __post_init__(self):
        if self.loss not in LOSSES:
            raise ValueError(f"loss must be one of {LOSSES}")
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if self.steps < 0:
            raise ValueError("steps must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps > 0):
            raise ValueError("invalid Adam hyperparameters")

    def to_dict(self):
        return asdict(self)


def check_loss(bundle: ModelBundle, cfg: TrainConfig) -> None:
    mc = bundle.config
    if mc.arch == "encoder_decoder" and cfg.loss != "cross_entropy":
        raise ValueError("the token model trains with cross_entropy")
    if mc.arch == "decoder_only":
        if cfg.loss == "cross_entropy":
            raise ValueError("the patch model trains with mse or quantile loss")
        if (cfg.loss == "quantile") != mc.quantile_head:
            raise ValueError("quantile loss needs a quantile head (and vice versa)")


# --- examples ------------------------------------------------------------------

@dataclass(frozen=True)
class TokenExample:
    enc_tokens: np.ndarray
    dec_inputs: np.ndarray
    targets: np.ndarray  # value-bin index in [0, V)


@dataclass(frozen=True)
class PatchExample:
    patches: np.ndarray  # [P, patch_len], instance-normalized


def token_example(bundle: ModelBundle, context, target) -> TokenExample:
    """Teacher-forcing example: context scale applied to both context and target."""
    tok = bundle.config.tokenizer
    scale, scaled = mean_scale(np.asarray(context, dtype=np.float64))
    ctx = quantize(scaled, tok)
    tgt = quantize(np.asarray(target, dtype=np.float64) / scale, tok)
    return TokenExample(
        enc_tokens=np.concatenate([ctx, [EOS_ID]]).astype(np.int64),
        dec_inputs=np.concatenate([[DECODER_START_ID], tgt[:-1]]).astype(np.int64),
        targets=(tgt - N_SPECIAL).astype(np.int64),
    )


def patch_example(bundle: ModelBundle, window) -> PatchExample:
    patches, _ = patchify(np.asarray(window, dtype=np.float64), bundle.config.patch)
    if patches.shape[0] < 2:
        raise ShapeError("a patch training window needs at least two patches")
    return PatchExample(patches)


def sample_examples(bundle: ModelBundle, data, n: int, rng: Rng, context_len=None, horizon=None):
    """Draw ``n`` random training windows from the series in ``data`` (channel 0)."""
    mc = bundle.config
    series = [s.values[:, 0] if isinstance(s, TimeSeries) else np.asarray(s, dtype=np.float64).reshape(-1)
              for s in data]
    c = context_len or mc.context_len
    if mc.arch == "encoder_decoder":
        t = horizon or mc.horizon
        need = c + t
    else:
        p = mc.patch.patch_len
        need = max(2, c // p) * p
    usable = [v for v in series if v.shape[0] >= need]
    if not usable:
        raise ShapeError(f"no series is long enough for a window of {need} points")
    out = []
    for _ in range(n):
        v = usable[rng.integers(0, len(usable))]
        start = rng.integers(0, v.shape[0] - need + 1)
        w = v[start:start + need]
        if mc.arch == "encoder_decoder":
            out.append(token_example(bundle, w[:c], w[c:]))
        else:
            out.append(patch_example(bundle, w))
    return out


# --- losses ------------------------------------------------------------------

def example_loss(params: dict, bundle: ModelBundle, example, loss: str):
    mc = bundle.config
    if isinstance(example, TokenExample):
        enc = encode(params, mc, example.enc_tokens)
        x = decoder_stack(params, mc, ag.embed(params["embed"], example.dec_inputs), enc)
        logits, _ = output_head(params, mc, x)
        return ag.cross_entropy(logits, example.targets)
    z = example.patches
    x = decoder_stack(params, mc, embed_patches(params, z[:-1]))
    out, _ = output_head(params, mc, x)
    if loss == "quantile":
        pred = ag.reshape(out, (z.shape[0] - 1, mc.patch.patch_len, len(QUANTILE_LEVELS)))
        return ag.pinball(pred, z[1:], QUANTILE_LEVELS)
    return ag.mse(out, z[1:])


def loss_and_grads(bundle: ModelBundle, batch, cfg: TrainConfig, batch_id=None):
    """Mean loss over ``batch`` and its exact gradient for every weight.

    Examples are processed one at a time and their gradients summed in batch
    order, so the result does not depend on scheduling.
    """
    check_loss(bundle, cfg)
    if not batch:
        raise ValueError("empty batch")
    params = {k: ag.Tensor(v, requires_grad=True) for k, v in bundle.weights.items()}
    total = 0.0
    weight = 1.0 / len(batch)
    for ex in batch:
        l = example_loss(params, bundle, ex, cfg.loss)
        ag.backward(ag.mul(l, weight))
        total += float(l.data) * weight
    if not math.isfinite(total):
        raise NumericError(f"non-finite loss in batch {batch_id}")
    grads = {k: (t.grad if t.grad is not None else np.zeros_like(t.data)) for k, t in params.items()}
    return total, grads


def eval_loss(bundle: ModelBundle, batch, cfg: TrainConfig) -> float:
    params = bundle.tensors()
    with ag.no_grad():
        return float(np.mean([float(example_loss(params, bundle, ex, cfg.loss).data) for ex in batch]))


# --- optimizer -----------------------------------------------------------------

class Adam:
    def __init__(self, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m = {}
        self.v = {}

    def step(self, weights: dict, grads: dict) -> dict:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        out = {}
        for name, w in weights.items():
            g = grads[name]
            m = self.m.get(name, 0.0) * b1 + (1.0 - b1) * g
            v = self.v.get(name, 0.0) * b2 + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            out[name] = w - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
        return out


@dataclass
class TrainResult:
    bundle: ModelBundle
    curve: list

    def curve_rows(self):
        return [(i, loss) for i, loss in enumerate(self.curve)]


def train(bundle: ModelBundle, data, cfg: TrainConfig) -> TrainResult:
    """Run ``cfg.steps`` Adam steps on random windows drawn from ``data``.

    ``curve[i]`` is the batch loss before update i. Raises ``TrainingDiverged``
    (carrying the curve) once the loss has exceeded 10x the first loss for
    100 consecutive steps.
    """
    check_loss(bundle, cfg)
    if cfg.steps == 0:
        return TrainResult(bundle, [])
    rng = Rng(cfg.seed)
    opt = Adam(cfg.lr, cfg.beta1, cfg.beta2, cfg.eps)
    weights = dict(bundle.weights)
    current = bundle
    curve = []
    above = 0
    for step in range(cfg.steps):
        batch = sample_examples(current, data, cfg.batch_size, rng, cfg.context_len, cfg.horizon)
        loss, grads = loss_and_grads(current, batch, cfg, batch_id=step)
        curve.append(loss)
        if loss > DIVERGENCE_FACTOR * curve[0]:
            above += 1
            if above >= DIVERGENCE_PATIENCE:
                raise TrainingDiverged(f"loss above {DIVERGENCE_FACTOR}x initial for "
                                       f"{DIVERGENCE_PATIENCE} steps", curve)
        else:
            above = 0
        weights = opt.step(weights, grads)
        current = ModelBundle(bundle.config, weights)
    return TrainResult(current, curve)


# --- finite-difference check -----------------------------------------------------

@dataclass
class GradCheckResult:
    name: str
    n_checked: int
    rel_error: float
    max_abs_error: float
    passed: bool


def gradient_check(bundle: ModelBundle, batch, cfg: TrainConfig, h: float = 1e-5,
                   tol: float = 1e-4, names=None, max_entries=None, rng: Rng | None = None):
    """Compare analytic gradients with central differences, one result per tensor.

    A tensor passes when ``||g_fd - g|| <= tol * max(||g_fd||, ||g||)`` and
    every entry satisfies ``|g_fd - g| <= tol * max(|g_fd|, |g|) + tol * max|g|``.
    With ``max_entries`` only a seeded random subset of entries is perturbed.
    """
    _, grads = loss_and_grads(bundle, batch, cfg)
    params = {k: ag.Tensor(np.array(v)) for k, v in bundle.weights.items()}

    def loss_now():
        with ag.no_grad():
            return sum(float(example_loss(params, bundle, ex, cfg.loss).data) for ex in batch) / len(batch)

    results = []
    for name in names or list(bundle.weights):
        arr = params[name].data
        g = grads[name]
        idx = list(np.ndindex(arr.shape))
        if max_entries is not None and len(idx) > max_entries:
            pick = (rng or Rng(0)).permutation(len(idx))[:max_entries]
            idx = [idx[i] for i in sorted(pick)]
        num = np.zeros(len(idx))
        ana = np.array([g[i] for i in idx])
        for j, i in enumerate(idx):
            orig = arr[i]
            arr[i] = orig + h
            up = loss_now()
            arr[i] = orig - h
            down = loss_now()
            arr[i] = orig
            num[j] = (up - down) / (2.0 * h)
        diff = np.abs(num - ana)
        scale = max(np.linalg.norm(num), np.linalg.norm(ana))
        rel = float(np.linalg.norm(num - ana) / scale) if scale > 0 else 0.0
        gmax = float(max(np.abs(num).max(initial=0.0), np.abs(ana).max(initial=0.0)))
        elem_ok = bool(np.all(diff <= tol * np.maximum(np.abs(num), np.abs(ana)) + tol * gmax))
        results.append(GradCheckResult(name, len(idx), rel, float(diff.max(initial=0.0)),
                                       rel <= tol and elem_ok))
    return results
