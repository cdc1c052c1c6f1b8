"""
Input signals u(t) used to force full- and reduced-order models.

Every signal has a one-line text form so that it can be stored alongside
a dataset and rebuilt on load, e.g. ``step:0.248``, ``impulse:-0.25``,
``sinusoid:0.65*sin(1t+0)+0.65*cos(2t+0)``.
"""
import re
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from errors import DataError


class InputSignal:
    """Base class; ``m`` is the number of input channels."""
    m: int = 1

    def __call__(self, t: float) -> np.ndarray:
        raise NotImplementedError

    def sample(self, times: np.ndarray) -> np.ndarray:
        return np.stack([self(float(t)) for t in times])

    def describe(self) -> str:
        raise NotImplementedError


@dataclass
class Step(InputSignal):
    """u(t) = amplitude on every channel for t >= start, else 0."""
    amplitude: float
    m: int = 1
    start: float = 0.0

    def __call__(self, t: float) -> np.ndarray:
        return np.full(self.m, self.amplitude if t >= self.start else 0.0)

    def describe(self) -> str:
        return f"step:{self.amplitude!r}"


@dataclass
class Impulse(InputSignal):
    """
    Impulse of strength ``amplitude`` applied at t = 0 on ``channel``.

    It is realised through the initial condition x0 = amplitude * B[:, channel];
    the signal itself is identically zero.
    """
    amplitude: float
    m: int = 1
    channel: int = 0

    def __call__(self, t: float) -> np.ndarray:
        return np.zeros(self.m)

    def describe(self) -> str:
        return f"impulse:{self.amplitude!r}"


@dataclass
class Sinusoid(InputSignal):
    """Sum of terms amplitude * sin|cos(frequency * t + phase) on every channel."""
    terms: List[Tuple[float, float, float, str]] = field(default_factory=list)
    m: int = 1

    def __post_init__(self):
        for _, _, _, kind in self.terms:
            if kind not in ("sin", "cos"):
                raise ValueError(f"Sinusoid term kind must be 'sin' or 'cos', got {kind!r}")

    def __call__(self, t: float) -> np.ndarray:
        val = 0.0
        for amp, freq, phase, kind in self.terms:
            fn = np.sin if kind == "sin" else np.cos
            val += amp * fn(freq * t + phase)
        return np.full(self.m, val)

    def describe(self) -> str:
        parts = [f"{a!r}*{k}({f!r}t+{p!r})" for a, f, p, k in self.terms]
        return "sinusoid:" + "+".join(parts)


@dataclass
class Sampled(InputSignal):
    """Piecewise-linear interpolation of sampled inputs (held constant outside the grid)."""
    times: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float).reshape(len(self.times), -1)
        self.m = self.values.shape[1]

    def __call__(self, t: float) -> np.ndarray:
        return np.array([np.interp(t, self.times, self.values[:, k]) for k in range(self.m)])

    def describe(self) -> str:
        return "sampled"


def forcing_sinusoid(amplitude: float, m: int = 1) -> Sinusoid:
    """amplitude * (sin t + cos 2t)."""
    return Sinusoid(terms=[(amplitude, 1.0, 0.0, "sin"), (amplitude, 2.0, 0.0, "cos")], m=m)


_TERM = re.compile(r"^\s*([-+0-9.eE]+)\*(sin|cos)\(([-+0-9.eE]+)t\+([-+0-9.eE]+)\)\s*$")


def parse_signal(text: str, m: int = 1, times: Optional[np.ndarray] = None,
                 values: Optional[np.ndarray] = None) -> InputSignal:
    """
    Rebuild a signal from its ``describe()`` form.

    Raises:
        DataError: If the text is not a recognised signal description.
    """
    kind, _, arg = text.strip().partition(":")
    try:
        if kind == "step":
            return Step(float(arg), m=m)
        if kind == "impulse":
            return Impulse(float(arg), m=m)
        if kind == "sinusoid":
            terms = []
            for chunk in _split_terms(arg):
                match = _TERM.match(chunk)
                if match is None:
                    raise ValueError(chunk)
                amp, fn, freq, phase = match.groups()
                terms.append((float(amp), float(freq), float(phase), fn))
            return Sinusoid(terms=terms, m=m)
        if kind == "sampled":
            if times is None or values is None:
                raise ValueError("sampled signal needs times and values")
            return Sampled(times, values)
    except ValueError as exc:
        raise DataError(f"Cannot parse input signal '{text}': {exc}") from exc
    raise DataError(f"Unknown input signal kind '{kind}'")


def _split_terms(arg: str) -> Sequence[str]:
    # a "+" separates terms only right after a closing parenthesis
    return [t for t in re.split(r"(?<=\))\+", arg) if t]
