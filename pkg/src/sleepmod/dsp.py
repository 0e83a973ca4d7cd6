"""Slow-oscillation detection and stimulus generation.

Covers the single-op-amp band-pass biquad (analog response, centre
frequency and Q from component values), its bilinear-transform
realization as a cascade of two identical sections, a hysteresis
zero-crossing detector, delayed trigger scheduling, and pink-noise
generation.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from scipy import signal

from .config import SleepStage


@dataclass(frozen=True)
class BiquadComponents:
    R1: float
    R2: float
    R3: float
    R4: float
    C1: float
    C2: float

    def __post_init__(self):
        for name in ("R1", "R2", "R3", "R4", "C1", "C2"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")

    @property
    def R_eq(self) -> float:
        return 1.0 / (1.0 / self.R1 + 1.0 / self.R2)

    @property
    def alpha(self) -> float:
        return self.R4 / self.R1

    def scaled(self, k: float) -> "BiquadComponents":
        """Impedance scaling: resistors times k, capacitors divided by k."""
        return BiquadComponents(self.R1 * k, self.R2 * k, self.R3 * k, self.R4 * k,
                                self.C1 / k, self.C2 / k)

    def analog_coeffs(self) -> tuple[float, float, float]:
        """``(b1, a1, a0)`` of ``H(s) = b1 s / (s^2 + a1 s + a0)``."""
        b1 = -self.alpha / (self.C1 * self.R_eq)
        a1 = (1.0 / self.C1 + 1.0 / self.C2) / self.R3
        a0 = 1.0 / (self.C1 * self.C2 * self.R3 * self.R_eq)
        return b1, a1, a0


def design_components(f0: float = 1.0, q: float = 2.0, c: float = 100e-9,
                      alpha: float = 1.0) -> BiquadComponents:
    """Equal-capacitor design hitting ``f0`` and ``q`` exactly.

    With C1 = C2 = C: Q = sqrt(R3 / R_eq) / 2 and w0 = 1 / (C sqrt(R3 R_eq)).
    """
    w0 = 2 * math.pi * f0
    r_eq = 1.0 / (2 * q * c * w0)
    r3 = 4 * q * q * r_eq
    r1 = r2 = 2 * r_eq
    return BiquadComponents(R1=r1, R2=r2, R3=r3, R4=alpha * r1, C1=c, C2=c)


REFERENCE_COMPONENTS = design_components()


def equal_components(r: float = 10e3, c: float = 100e-9) -> BiquadComponents:
    """R1 = R2 = 2R, R3 = R, R4 = 2R, C1 = C2 = C: w0 = 1/(RC), Q = 1/2."""
    return BiquadComponents(R1=2 * r, R2=2 * r, R3=r, R4=2 * r, C1=c, C2=c)


def analog_response(c: BiquadComponents, f) -> complex:
    b1, a1, a0 = c.analog_coeffs()
    s = 2j * math.pi * np.asarray(f, dtype=np.float64)
    h = b1 * s / (s * s + a1 * s + a0)
    return complex(h) if np.ndim(h) == 0 else h


def center_freq(c: BiquadComponents) -> float:
    w0 = 1.0 / math.sqrt(c.C1 * c.C2 * c.R3 * c.R_eq)
    return w0 / (2 * math.pi)


def q_factor(c: BiquadComponents) -> float:
    return 1.0 / (math.sqrt(c.C1 * c.C2 * c.R3 * c.R_eq) / c.R3 * (1.0 / c.C1 + 1.0 / c.C2))


def peak_gain(c: BiquadComponents) -> float:
    """|H(j w0)| = alpha R3 / (R_eq (1 + C1/C2))."""
    return c.alpha * c.R3 / (c.R_eq * (1.0 + c.C1 / c.C2))


def bilinear_section(c: BiquadComponents, sample_rate: float) -> np.ndarray:
    """One second-order section ``[b0, b1, b2, 1, a1, a2]``, prewarped at w0."""
    b1, a1, a0 = c.analog_coeffs()
    w0 = 2 * math.pi * center_freq(c)
    k = w0 / math.tan(w0 / (2 * sample_rate))
    d0 = k * k + a1 * k + a0
    b = np.array([b1 * k, 0.0, -b1 * k]) / d0
    a = np.array([1.0, 2 * (a0 - k * k) / d0, (k * k - a1 * k + a0) / d0])
    return np.concatenate([b, a])


class DiscreteBiquadCascade:
    """Two identical sections in transposed direct form II, streaming."""

    n_sections = 2

    def __init__(self, components: BiquadComponents, sample_rate: float):
        f0 = center_freq(components)
        if sample_rate <= 4 * f0:
            raise ValueError(f"sample rate {sample_rate} Hz too low for f0 = {f0:.4g} Hz")
        self.components = components
        self.sample_rate = float(sample_rate)
        section = bilinear_section(components, sample_rate)
        self.sos = np.vstack([section] * self.n_sections)
        for radius in self.pole_radii():
            if not radius < 1.0:
                raise ValueError("unstable section: pole on or outside the unit circle")
        self.zi = np.zeros((self.n_sections, 2))

    def pole_radii(self) -> list[float]:
        return [float(np.max(np.abs(np.roots(sec[3:])))) for sec in self.sos]

    def reset(self) -> None:
        self.zi = np.zeros((self.n_sections, 2))

    def process(self, samples) -> np.ndarray:
        x = np.asarray(samples, dtype=np.float64)
        if x.size == 0:
            return x.copy()
        y, self.zi = signal.sosfilt(self.sos, x, zi=self.zi)
        return y

    def frequency_response(self, f) -> np.ndarray:
        _, h = signal.sosfreqz(self.sos, worN=np.asarray(f, dtype=np.float64), fs=self.sample_rate)
        return h

    def report(self) -> dict:
        c = self.components
        return {
            "components": {k: getattr(c, k) for k in ("R1", "R2", "R3", "R4", "C1", "C2")},
            "R_eq": c.R_eq,
            "alpha": c.alpha,
            "f0_hz": center_freq(c),
            "q": q_factor(c),
            "peak_gain": peak_gain(c),
            "sample_rate": self.sample_rate,
            "sections": [
                {"b": sec[:3].tolist(), "a": sec[3:].tolist()} for sec in self.sos
            ],
            "pole_radii": self.pole_radii(),
        }


def discretize(c: BiquadComponents, sample_rate: float) -> DiscreteBiquadCascade:
    return DiscreteBiquadCascade(c, sample_rate)


def filter_stream(cascade: DiscreteBiquadCascade, samples) -> np.ndarray:
    return cascade.process(samples)


class ZeroCrossingDetector:
    """Negative-to-positive crossing comparator with hysteresis.

    The detector arms once the signal is at or below ``-hysteresis`` and fires
    on the next strictly positive sample. The event is stamped at whichever
    of the two straddling samples lies closer to zero. With
    ``hysteresis=None`` the threshold tracks 5 % of the running RMS.
    """

    def __init__(self, hysteresis: Optional[float] = 0.0, rms_fraction: float = 0.05,
                 rms_time_constant: float = 512.0):
        if hysteresis is not None and hysteresis < 0:
            raise ValueError("hysteresis must be non-negative")
        self.hysteresis = hysteresis
        self.rms_fraction = rms_fraction
        self._rms_alpha = 1.0 / rms_time_constant
        self._ms = 0.0
        self._armed = False
        self._prev: Optional[float] = None
        self._n = 0

    def process(self, samples) -> list[int]:
        events = []
        fixed = self.hysteresis
        for v in np.asarray(samples, dtype=np.float64):
            if fixed is None:
                self._ms += self._rms_alpha * (v * v - self._ms)
                h = self.rms_fraction * math.sqrt(self._ms)
            else:
                h = fixed
            if self._armed and v > 0.0:
                prev = self._prev if self._prev is not None else 0.0
                events.append(self._n - 1 if -prev <= v else self._n)
                self._armed = False
            elif v <= -h:
                self._armed = True
            self._prev = float(v)
            self._n += 1
        return events


def detect_zero_crossings(filtered, hysteresis: Optional[float] = 0.0) -> list[int]:
    return ZeroCrossingDetector(hysteresis).process(filtered)


def _default_gate() -> frozenset:
    return frozenset({SleepStage.N2, SleepStage.N3})


@dataclass(frozen=True)
class TriggerConfig:
    delay_samples: int = 0
    gate_stages: frozenset = field(default_factory=_default_gate)
    refractory_samples: int = 0

    def __post_init__(self):
        if self.delay_samples < 0 or self.refractory_samples < 0:
            raise ValueError("delay and refractory must be non-negative")
        stages = frozenset(SleepStage.parse(s) for s in self.gate_stages)
        if not stages:
            raise ValueError("gate_stages must not be empty")
        object.__setattr__(self, "gate_stages", stages)

    def to_dict(self) -> dict:
        return {
            "delay_samples": self.delay_samples,
            "gate_stages": sorted(s.name for s in self.gate_stages),
            "refractory_samples": self.refractory_samples,
        }


class TriggerScheduler:
    """Stateful gate + refractory logic; refractory counts from the last
    crossing that fired."""

    def __init__(self, cfg: TriggerConfig):
        self.cfg = cfg
        self._last_fired: Optional[int] = None

    def offer(self, event: int, stage: Optional[SleepStage]) -> Optional[int]:
        if stage is None or stage not in self.cfg.gate_stages:
            return None
        if self._last_fired is not None and event - self._last_fired < self.cfg.refractory_samples:
            return None
        self._last_fired = event
        return event + self.cfg.delay_samples


def schedule_trigger(events: Iterable[int], cfg: TriggerConfig, current_stage) -> list[int]:
    stage = None if current_stage is None else SleepStage.parse(current_stage)
    sched = TriggerScheduler(cfg)
    out = []
    for e in events:
        t = sched.offer(int(e), stage)
        if t is not None:
            out.append(t)
    return out


# pole/zero pairs one decade apart with zeros half a decade above each pole
PINK_POLES_HZ = tuple(10.0 ** (k - 0.25) for k in range(3))
PINK_ZEROS_HZ = tuple(p * 10.0 ** 0.5 for p in PINK_POLES_HZ)


def pink_filter_sos(sample_rate: float, mode: str, cutoff_hz: Optional[float] = None) -> np.ndarray:
    if mode == "single_pole":
        fc = sample_rate / 1000.0 if cutoff_hz is None else cutoff_hz
        z, p, k = [], [-2 * math.pi * fc], 2 * math.pi * fc
    elif mode == "multi_pole":
        z = [-2 * math.pi * f for f in PINK_ZEROS_HZ]
        p = [-2 * math.pi * f for f in PINK_POLES_HZ]
        k = float(np.prod([-pp for pp in p]) / np.prod([-zz for zz in z]))
    else:
        raise ValueError(f"unknown pink-noise mode {mode!r}")
    if max(PINK_ZEROS_HZ) >= sample_rate / 2 and mode == "multi_pole":
        raise ValueError("sample rate too low for the pole-zero ladder")
    zd, pd, kd = signal.bilinear_zpk(z, p, k, fs=sample_rate)
    return signal.zpk2sos(zd, pd, kd)


def pink_noise(n_samples: int, sample_rate: float, seed: int, mode: str = "multi_pole",
               cutoff_hz: Optional[float] = None) -> np.ndarray:
    """Filtered seeded white Gaussian noise, normalised to unit RMS."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    sos = pink_filter_sos(sample_rate, mode, cutoff_hz)
    white = np.random.default_rng(seed).standard_normal(n_samples)
    y = signal.sosfilt(sos, white)
    rms = math.sqrt(float(np.mean(y * y)))
    return y / rms if rms > 0 else y


def spectral_slope_db_per_decade(x, sample_rate: float, f_lo: float, f_hi: float,
                                 nperseg: Optional[int] = None) -> float:
    """Least-squares slope of 10 log10(PSD) against log10(f) (Welch PSD)."""
    if nperseg is None:
        nperseg = min(len(x), int(2 ** math.ceil(math.log2(8 * sample_rate / f_lo))))
    f, pxx = signal.welch(x, fs=sample_rate, nperseg=nperseg)
    sel = (f >= f_lo) & (f <= f_hi)
    return float(np.polyfit(np.log10(f[sel]), 10 * np.log10(pxx[sel]), 1)[0])
