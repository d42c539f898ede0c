"""Synthetic series: RK4 chaotic flows, seasonal mixtures and random walks."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceError, ShapeError
from .numerics import Rng

DIVERGENCE_LIMIT = 1e6

LORENZ_DEFAULTS = {"sigma": 10.0, "rho": 28.0, "beta": 8.0 / 3.0}
THOMAS_DEFAULTS = {"b": 0.208186}


@dataclass
class TimeSeries:
    values: np.ndarray
    dt: float = 1.0
    name: str = "series"
    period: int | None = None

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim == 1:
            v = v[:, None]
        if v.ndim != 2 or v.shape[0] < 2 or v.shape[1] < 1:
            raise ShapeError(f"TimeSeries needs shape [length>=2, channels>=1], got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("TimeSeries values must be finite")
        if not self.dt > 0:
            raise ValueError("dt must be positive")
        self.values = v

    @property
    def length(self) -> int:
        return self.values.shape[0]

    @property
    def channels(self) -> int:
        return self.values.shape[1]

    def channel(self, c: int = 0) -> np.ndarray:
        return self.values[:, c].copy()

    def window(self, start: int, stop: int, name: str | None = None) -> "TimeSeries":
        return TimeSeries(self.values[start:stop], self.dt, name or self.name, self.period)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "dt": self.dt,
            "channels": self.channels,
            "period": self.period,
            "values": self.values.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TimeSeries":
        values = np.asarray(d["values"], dtype=np.float64)
        if values.ndim == 1:
            values = values[:, None]
        if values.shape[1] != int(d.get("channels", values.shape[1])):
            raise ShapeError("channel count does not match values")
        return cls(values, float(d["dt"]), str(d.get("name", "series")), d.get("period"))


def save_series(series: TimeSeries, path) -> None:
    with open(path, "w") as fh:
        json.dump(series.to_dict(), fh)


def load_series(path) -> TimeSeries:
    with open(path) as fh:
        return TimeSeries.from_dict(json.load(fh))


@dataclass
class OdeSpec:
    system: str = "lorenz63"
    params: dict = field(default_factory=dict)
    initial_state: tuple = (1.0, 1.0, 1.0)
    dt: float = 0.01
    n_steps: int = 2048
    burn_in: int = 1000

    def __post_init__(self):
        if self.system not in ("lorenz63", "thomas"):
            raise ValueError(f"unknown system {self.system!r}")
        if self.n_steps <= 0 or not self.dt > 0 or self.burn_in < 0:
            raise ValueError("need n_steps > 0, dt > 0, burn_in >= 0")
        if len(self.initial_state) != 3:
            raise ValueError("initial_state must be a triple")


def lorenz63(state, sigma=10.0, rho=28.0, beta=8.0 / 3.0):
    x, y, z = state
    return np.array([sigma * (y - x), x * (rho - z) - y, x * y - beta * z])


def thomas(state, b=0.208186):
    x, y, z = state
    return np.array([math.sin(y) - b * x, math.sin(z) - b * y, math.sin(x) - b * z])


def _vector_field(spec: OdeSpec):
    if spec.system == "lorenz63":
        p = {**LORENZ_DEFAULTS, **spec.params}
        return lambda s: lorenz63(s, p["sigma"], p["rho"], p["beta"])
    p = {**THOMAS_DEFAULTS, **spec.params}
    return lambda s: thomas(s, p["b"])


def rk4_step(f, state, h):
    k1 = f(state)
    k2 = f(state + 0.5 * h * k1)
    k3 = f(state + 0.5 * h * k2)
    k4 = f(state + h * k3)
    return state + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)


def integrate_rk4(spec: OdeSpec) -> TimeSeries:
    """Classic RK4 trajectory of ``spec.system``.

    The state after each of ``burn_in + n_steps`` steps is recorded and the
    first ``burn_in`` records are dropped, so the result has ``n_steps`` rows
    and 3 channels. Raises ``DivergenceError`` once any |value| exceeds 1e6.
    """
    f = _vector_field(spec)
    state = np.asarray(spec.initial_state, dtype=np.float64)
    total = spec.burn_in + spec.n_steps
    out = np.empty((spec.n_steps, 3))
    for step in range(1, total + 1):
        state = rk4_step(f, state, spec.dt)
        if not np.all(np.isfinite(state)) or np.max(np.abs(state)) > DIVERGENCE_LIMIT:
            raise DivergenceError(f"trajectory diverged at step {step}", step=step)
        if step > spec.burn_in:
            out[step - spec.burn_in - 1] = state
    return TimeSeries(out, spec.dt, spec.system)


def gen_seasonal(rng: Rng, length: int, components, noise_std: float = 0.0,
                 name: str = "seasonal") -> TimeSeries:
    """Sum of ``amplitude * sin(2 pi t / period + phase)`` plus Gaussian noise.

    ``components`` is a sequence of ``(period, amplitude, phase)``; t = 0..length-1.
    """
    components = [tuple(map(float, c)) for c in components]
    if not components:
        raise ValueError("need at least one component")
    if any(p < 2 for p, _, _ in components):
        raise ValueError("periods must be >= 2")
    if length < max(p for p, _, _ in components):
        raise ValueError("length must be at least the longest period")
    t = np.arange(length, dtype=np.float64)
    values = np.zeros(length)
    for period, amp, phase in components:
        values += amp * np.sin(2.0 * np.pi * t / period + phase)
    if noise_std > 0:
        values = values + rng.normal(length, std=noise_std)
    main = max(components, key=lambda c: abs(c[1]))[0]
    period = int(round(main)) if float(main).is_integer() else None
    return TimeSeries(values, 1.0, name, period)


def gen_random_walk(rng: Rng, length: int, step_std: float = 1.0,
                    name: str = "walk") -> TimeSeries:
    if length < 2:
        raise ValueError("length must be >= 2")
    steps = np.zeros(length)
    if step_std > 0:
        steps[1:] = rng.normal(length - 1, std=step_std)
    return TimeSeries(np.cumsum(steps), 1.0, name)
