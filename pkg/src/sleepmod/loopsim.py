"""Closed-loop simulation: synthetic EEG, AFE model, classification stream,
phase-locked triggering and scoring."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .config import SleepStage
from .cost import virtual_latency_s
from .dsp import (
    REFERENCE_COMPONENTS,
    BiquadComponents,
    DiscreteBiquadCascade,
    TriggerConfig,
    TriggerScheduler,
    ZeroCrossingDetector,
)
from .model import Classifier

SAMPLE_RATE = 256

BANDS = {
    "delta": (0.5, 4.0),
    "theta": (4.0, 8.0),
    "alpha": (8.0, 12.0),
    "sigma": (12.0, 15.0),
    "beta": (15.0, 30.0),
}


@dataclass(frozen=True)
class StageTemplate:
    powers: tuple  # relative power per band, in BANDS order
    rms: float     # relative amplitude

    def __post_init__(self):
        if len(self.powers) != len(BANDS) or min(self.powers) < 0 or sum(self.powers) <= 0:
            raise ValueError("band powers must be non-negative and not all zero")


DEFAULT_TEMPLATES = {
    SleepStage.W: StageTemplate((0.05, 0.05, 0.55, 0.05, 0.30), 0.5),
    SleepStage.N1: StageTemplate((0.25, 0.55, 0.08, 0.04, 0.08), 0.6),
    SleepStage.N2: StageTemplate((0.35, 0.15, 0.05, 0.40, 0.05), 0.8),
    SleepStage.N3: StageTemplate((0.85, 0.07, 0.03, 0.03, 0.02), 1.6),
    SleepStage.REM: StageTemplate((0.10, 0.35, 0.05, 0.05, 0.45), 0.55),
}


@dataclass(frozen=True)
class AfeModel:
    """Fixed-gain amplifier followed by a signed ADC."""

    gain_db: float = 49.5
    adc_bits: int = 16
    adc_range_v: float = 2.4  # peak-to-peak at the ADC input

    @property
    def gain(self) -> float:
        return 10.0 ** (self.gain_db / 20.0)

    @property
    def lsb_uv(self) -> float:
        """Input-referred LSB in microvolts."""
        return self.adc_range_v / (1 << self.adc_bits) / self.gain * 1e6

    @property
    def full_scale_uv(self) -> float:
        return self.lsb_uv * (1 << (self.adc_bits - 1))

    def digitize(self, x_uv) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(codes, clipped_mask)``."""
        lo, hi = -(1 << (self.adc_bits - 1)), (1 << (self.adc_bits - 1)) - 1
        codes = np.floor(np.asarray(x_uv, dtype=np.float64) / self.lsb_uv + 0.5)
        clipped = (codes < lo) | (codes > hi)
        return np.clip(codes, lo, hi).astype(np.int64), clipped

    def to_uv(self, codes) -> np.ndarray:
        return np.asarray(codes, dtype=np.float64) * self.lsb_uv


@dataclass(frozen=True)
class SyntheticEegConfig:
    schedule: tuple  # ((SleepStage, duration_s), ...)
    amplitude_uv: float = 40.0
    noise_floor: float = 0.05  # relative to amplitude_uv
    seed: int = 0
    templates: Optional[dict] = None
    sample_rate: int = SAMPLE_RATE
    afe: AfeModel = field(default_factory=AfeModel)

    def __post_init__(self):
        sched = tuple((SleepStage.parse(s), float(d)) for s, d in self.schedule)
        if not sched or any(d <= 0 for _, d in sched):
            raise ValueError("schedule needs positive durations")
        object.__setattr__(self, "schedule", sched)
        if self.amplitude_uv < 0 or self.noise_floor < 0:
            raise ValueError("amplitudes must be non-negative")


@dataclass
class EegRecording:
    samples: np.ndarray   # input-referred microvolts after digitization
    stages: np.ndarray    # ground-truth stage index per sample
    codes: np.ndarray     # raw ADC codes
    clipped: np.ndarray   # boolean mask
    sample_rate: int = SAMPLE_RATE

    def __len__(self) -> int:
        return len(self.samples)


def _band_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    spec = np.fft.rfft(rng.standard_normal(n))
    f = np.fft.rfftfreq(n, 1.0 / fs)
    spec[(f < lo) | (f >= hi)] = 0.0
    x = np.fft.irfft(spec, n)
    sd = x.std()
    return x / sd if sd > 0 else x


def gen_eeg(cfg: SyntheticEegConfig) -> EegRecording:
    fs = cfg.sample_rate
    templates = {**DEFAULT_TEMPLATES, **(cfg.templates or {})}
    lengths = [int(round(d * fs)) for _, d in cfg.schedule]
    n = sum(lengths)
    stages = np.concatenate([np.full(m, int(s), dtype=np.int64) for (s, _), m in zip(cfg.schedule, lengths)])
    rng = np.random.default_rng(cfg.seed)
    gains = np.zeros((len(BANDS), len(SleepStage)))
    for stage in SleepStage:
        t = templates[stage]
        p = np.asarray(t.powers, dtype=np.float64)
        gains[:, int(stage)] = np.sqrt(p / p.sum()) * t.rms
    x = np.zeros(n)
    for b, (lo, hi) in enumerate(BANDS.values()):
        x += gains[b, stages] * _band_noise(rng, n, fs, lo, hi)
    x += cfg.noise_floor * rng.standard_normal(n)
    x *= cfg.amplitude_uv
    codes, clipped = cfg.afe.digitize(x)
    return EegRecording(cfg.afe.to_uv(codes), stages, codes, clipped, fs)


def band_power_fraction(x, fs: float, lo: float, hi: float, total=(0.5, 30.0)) -> float:
    from scipy import signal

    f, pxx = signal.welch(x, fs=fs, nperseg=min(len(x), int(8 * fs)))
    band = pxx[(f >= lo) & (f < hi)].sum()
    whole = pxx[(f >= total[0]) & (f < total[1])].sum()
    return float(band / whole) if whole > 0 else 0.0


def random_schedule(rng: np.random.Generator, n_windows: int, window_s: int = 20,
                    min_block: int = 3, max_block: int = 10) -> tuple:
    """Stage blocks of whole windows, stages drawn uniformly."""
    sched, left = [], n_windows
    while left > 0:
        k = int(min(left, rng.integers(min_block, max_block + 1)))
        sched.append((SleepStage(int(rng.integers(len(SleepStage)))), k * window_s))
        left -= k
    return tuple(sched)


@dataclass(frozen=True)
class LoopConfig:
    window_s: int = 20
    hop_s: float = 1.0
    trigger: TriggerConfig = field(default_factory=TriggerConfig)
    mode: str = "quant"
    forced_stage: Optional[SleepStage] = None
    settle_s: float = 5.0
    hysteresis: Optional[float] = None  # None: 5 % of running RMS
    components: BiquadComponents = REFERENCE_COMPONENTS

    def __post_init__(self):
        if self.window_s not in (20, 30):
            raise ValueError("window_s must be 20 or 30")
        if not 0 < self.hop_s <= self.window_s:
            raise ValueError("hop must be positive and no longer than the window")
        if self.mode not in ("float", "quant"):
            raise ValueError(f"unknown mode {self.mode!r}")
        if self.forced_stage is not None:
            object.__setattr__(self, "forced_stage", SleepStage.parse(self.forced_stage))

    def to_dict(self) -> dict:
        return {
            "window_s": self.window_s,
            "hop_s": self.hop_s,
            "trigger": self.trigger.to_dict(),
            "mode": self.mode,
            "forced_stage": None if self.forced_stage is None else self.forced_stage.name,
            "settle_s": self.settle_s,
            "hysteresis": self.hysteresis,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "LoopConfig":
        trig = d.get("trigger", {})
        return cls(
            window_s=int(d.get("window_s", 20)),
            hop_s=float(d.get("hop_s", 1.0)),
            trigger=TriggerConfig(
                delay_samples=int(trig.get("delay_samples", 0)),
                gate_stages=frozenset(trig.get("gate_stages", ["N2", "N3"])),
                refractory_samples=int(trig.get("refractory_samples", 0)),
            ),
            mode=d.get("mode", "quant"),
            forced_stage=d.get("forced_stage"),
            settle_s=float(d.get("settle_s", 5.0)),
            hysteresis=d.get("hysteresis"),
        )


@dataclass
class LoopEvent:
    t: int
    kind: str  # classification | warming_up | zero_cross | trigger | clip_warning
    data: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {"t": self.t, "kind": self.kind, **self.data}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))


def classify_stream(samples, engine, window_samples: int, hop_samples: int):
    """Yield ``(t_end, Classification)`` for each hop.

    One ``Classifier`` per phase ``t_end mod window`` keeps the buffered
    segments consecutive and non-overlapping, so every segment is encoded once.
    """
    streams: dict[int, Classifier] = {}
    for t in range(window_samples, len(samples) + 1, hop_samples):
        phase = t % window_samples
        if phase not in streams:
            streams[phase] = Classifier(engine)
        yield t, streams[phase].classify(samples[t - window_samples:t])


KIND_ORDER = {"clip_warning": 0, "warming_up": 1, "classification": 2, "zero_cross": 3, "trigger": 4}


def run_loop(eeg: Union[EegRecording, np.ndarray], engine, cfg: LoopConfig,
             sample_rate: int = SAMPLE_RATE) -> list[LoopEvent]:
    """Simulate the acquisition -> classify -> trigger pipeline.

    Each hop classifies the trailing window; classification streams are kept
    per phase so that the three buffered segments are consecutive,
    non-overlapping windows. Filtering and crossing detection run
    continuously; a crossing triggers when the latest stage is gated.
    """
    if isinstance(eeg, EegRecording):
        samples, clipped, sample_rate = eeg.samples, eeg.clipped, eeg.sample_rate
    else:
        samples, clipped = np.asarray(eeg, dtype=np.float64), None
    n = len(samples)
    win = cfg.window_s * sample_rate
    hop = cfg.hop_s * sample_rate
    if abs(hop - round(hop)) > 1e-9:
        raise ValueError("hop must be a whole number of samples")
    hop = int(round(hop))
    if cfg.forced_stage is None:
        if engine is None:
            raise ValueError("an engine is required unless the stage is forced")
        if engine.cfg.segment_samples != win:
            raise ValueError(
                f"model expects {engine.cfg.segment_s}-s segments, loop uses {cfg.window_s}-s windows")
        if engine.mode != cfg.mode:
            raise ValueError(f"loop mode {cfg.mode!r} does not match engine mode {engine.mode!r}")
        latency = virtual_latency_s(engine.cfg)
    else:
        latency = 0.0

    events: list[LoopEvent] = []
    if clipped is not None and clipped.any():
        edges = np.flatnonzero(np.diff(np.concatenate([[0], clipped.astype(np.int8)])) == 1)
        events += [LoopEvent(int(i), "clip_warning") for i in edges]

    cascade = DiscreteBiquadCascade(cfg.components, sample_rate)
    detector = ZeroCrossingDetector(cfg.hysteresis)
    scheduler = TriggerScheduler(cfg.trigger)
    settle = int(round(cfg.settle_s * sample_rate))
    stage: Optional[SleepStage] = cfg.forced_stage

    def run_chunk(a: int, b: int) -> None:
        if b <= a:
            return
        y = cascade.process(samples[a:b])
        for e in detector.process(y):  # absolute sample indices
            events.append(LoopEvent(e, "zero_cross", {"stage": None if stage is None else stage.name}))
            if e < settle:
                continue
            fire = scheduler.offer(e, stage)
            if fire is not None:
                events.append(LoopEvent(fire, "trigger", {"crossing": e, "delay": fire - e}))

    pos = 0
    if cfg.forced_stage is not None:
        ticks = ((t, None) for t in range(win, n + 1, hop))
    else:
        ticks = classify_stream(samples, engine, win, hop)
    for t, res in ticks:
        run_chunk(pos, t)
        pos = t
        if res is None:
            continue
        if res.warming_up:
            events.append(LoopEvent(t, "warming_up"))
            continue
        stage = res.stage
        events.append(LoopEvent(t, "classification", {
            "stage": res.stage.name,
            "probs": [float(p) for p in res.probs],
            "latency_s": latency,
        }))
    run_chunk(pos, n)
    events.sort(key=lambda ev: (ev.t, KIND_ORDER[ev.kind]))
    return events


def window_truth(stages: np.ndarray, t_end: int, win: int) -> SleepStage:
    counts = np.bincount(stages[t_end - win:t_end], minlength=len(SleepStage))
    return SleepStage(int(np.argmax(counts)))


def score(predictions: Sequence, truth: Sequence) -> dict:
    """Accuracy, macro-F1 (absent classes count as 0), Cohen's kappa, per-class accuracy."""
    pred = np.array([int(SleepStage.parse(p)) for p in predictions], dtype=np.int64)
    true = np.array([int(SleepStage.parse(t)) for t in truth], dtype=np.int64)
    if pred.size == 0 or pred.size != true.size:
        raise ValueError("predictions and truth must be equal-length and non-empty")
    k = len(SleepStage)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (true, pred), 1)
    n = cm.sum()
    tp = np.diag(cm).astype(np.float64)
    support = cm.sum(axis=1).astype(np.float64)
    predicted = cm.sum(axis=0).astype(np.float64)
    denom = support + predicted
    f1 = np.divide(2 * tp, denom, out=np.zeros(k), where=denom > 0)
    p_o = tp.sum() / n
    p_e = float((support * predicted).sum()) / (n * n)
    kappa = 1.0 if p_e == 1.0 else (p_o - p_e) / (1.0 - p_e)
    per_class = {s.name: (float(tp[s] / support[s]) if support[s] else None) for s in SleepStage}
    return {
        "acc": float(p_o),
        "macro_f1": float(f1.mean()),
        "kappa": float(kappa),
        "per_class_acc": per_class,
        "confusion": cm.tolist(),
        "n": int(n),
    }


def score_events(events: Sequence[LoopEvent], stages: np.ndarray, window_samples: int) -> dict:
    preds, truth = [], []
    for ev in events:
        if ev.kind == "classification":
            preds.append(ev.data["stage"])
            truth.append(window_truth(stages, ev.t, window_samples))
    return score(preds, truth)


def summarize(events: Sequence[LoopEvent], cfg: LoopConfig, stages: Optional[np.ndarray] = None,
              sample_rate: int = SAMPLE_RATE) -> dict:
    counts: dict[str, int] = {}
    for ev in events:
        counts[ev.kind] = counts.get(ev.kind, 0) + 1
    lat = [ev.data["latency_s"] for ev in events if ev.kind == "classification"]
    out = {
        "config": cfg.to_dict(),
        "counts": dict(sorted(counts.items())),
        "max_latency_s": max(lat) if lat else 0.0,
        "latency_within_hop": (max(lat) if lat else 0.0) <= cfg.hop_s,
    }
    if stages is not None and counts.get("classification"):
        out["score"] = score_events(events, stages, cfg.window_s * sample_rate)
    return out


def fig6_demo(cycles: int = 110, delay_samples: int = 0, sample_rate: int = SAMPLE_RATE,
              amplitude_uv: float = 50.0) -> tuple[np.ndarray, LoopConfig]:
    """1 Hz sinusoid with the stage pinned to N3: the bench phase-lock check."""
    t = np.arange(cycles * sample_rate)
    x = amplitude_uv * np.sin(2 * np.pi * t / sample_rate)
    cfg = LoopConfig(trigger=TriggerConfig(delay_samples=delay_samples,
                                           gate_stages=frozenset({SleepStage.N3})),
                     forced_stage=SleepStage.N3, hysteresis=None)
    return x, cfg


def sine_up_crossings(n: int, sample_rate: int = SAMPLE_RATE, freq: float = 1.0) -> np.ndarray:
    period = sample_rate / freq
    return np.arange(0, n, period)


__all__ = [
    "AfeModel",
    "EegRecording",
    "LoopConfig",
    "LoopEvent",
    "StageTemplate",
    "SyntheticEegConfig",
    "band_power_fraction",
    "classify_stream",
    "fig6_demo",
    "gen_eeg",
    "random_schedule",
    "run_loop",
    "score",
    "score_events",
    "summarize",
    "window_truth",
]
