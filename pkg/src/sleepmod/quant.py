"""Post-training static quantization and calibration.

Activation magnitudes are histogrammed into 2048 bins over [0, max_abs].
Thresholds come from MinMax, a mass percentile, or the KL-divergence scan
that projects the clipped distribution onto 128 levels.
"""
from __future__ import annotations

import json
import math
import warnings
from dataclasses import dataclass
from typing import Iterable, Optional

import numpy as np

from .config import ModelConfig
from .tensor import QuantTensor, quantize
from .weights import ACT_PREFIX, WeightBundle

N_BINS = 2048
N_LEVELS = 128
QMAX = 127


class CalibrationError(ValueError):
    pass


@dataclass
class CalibrationHistogram:
    bins: np.ndarray
    max_abs: float

    @property
    def total_count(self) -> int:
        return int(self.bins.sum())

    @property
    def edges(self) -> np.ndarray:
        return np.arange(len(self.bins) + 1) * (self.max_abs / len(self.bins))

    def edge(self, i: int) -> float:
        return i * (self.max_abs / len(self.bins))


def bin_indices(values: np.ndarray, max_abs: float, n_bins: int = N_BINS) -> np.ndarray:
    if max_abs <= 0:
        return np.zeros(values.shape, dtype=np.int64)
    idx = np.floor(values * n_bins / max_abs).astype(np.int64)
    return np.minimum(idx, n_bins - 1)


def collect_stats(stream: Iterable[np.ndarray], n_bins: int = N_BINS) -> CalibrationHistogram:
    """Histogram of |activation| over a (re-iterable) sequence of arrays.

    Two passes: the first finds ``max_abs``, the second bins.
    """
    chunks = [np.abs(np.asarray(a, dtype=np.float64)).ravel() for a in stream]
    if not chunks or sum(c.size for c in chunks) == 0:
        raise CalibrationError("empty activation stream")
    max_abs = max(float(c.max()) for c in chunks if c.size)
    bins = np.zeros(n_bins, dtype=np.int64)
    for c in chunks:
        bins += np.bincount(bin_indices(c, max_abs, n_bins), minlength=n_bins)
    return CalibrationHistogram(bins, max_abs)


@dataclass(frozen=True)
class CalibMethod:
    kind: str  # "minmax" | "entropy" | "percentile"
    percentile: float = 100.0

    def __post_init__(self):
        if self.kind not in ("minmax", "entropy", "percentile"):
            raise ValueError(f"unknown calibration method {self.kind!r}")
        if self.kind == "percentile" and not (50.0 < self.percentile <= 100.0):
            raise ValueError("percentile must lie in (50, 100]")

    @classmethod
    def parse(cls, text: str, percentile: Optional[float] = None) -> "CalibMethod":
        text = text.lower()
        if text.startswith("percentile"):
            if ":" in text:
                percentile = float(text.split(":", 1)[1])
            return cls("percentile", 99.99 if percentile is None else percentile)
        return cls(text)

    def label(self) -> str:
        return f"percentile:{self.percentile:g}" if self.kind == "percentile" else self.kind


MINMAX = CalibMethod("minmax")
ENTROPY = CalibMethod("entropy")


def Percentile(p: float) -> CalibMethod:
    return CalibMethod("percentile", p)


@dataclass(frozen=True)
class QuantParams:
    threshold: float
    kl: Optional[float] = None

    @property
    def scale(self) -> float:
        return self.threshold / QMAX


KL_TIE_RTOL = 1e-12


def _kl_for_candidate(bins: np.ndarray, i: int, n_levels: int = N_LEVELS) -> float:
    sliced = bins[:i].astype(np.float64)
    p = sliced.copy()
    p[-1] += bins[i:].sum()
    nonzero = p != 0
    merged = i // n_levels
    starts = np.arange(n_levels) * merged
    group_sums = np.add.reduceat(sliced, starts)
    group_nz = np.add.reduceat(nonzero.astype(np.int64), starts)
    # reduceat's last group already runs to the end of the slice
    group_of = np.minimum(np.arange(i) // merged, n_levels - 1)
    with np.errstate(divide="ignore", invalid="ignore"):
        per_bin = np.where(group_nz > 0, group_sums / np.maximum(group_nz, 1), 0.0)
    q = np.where(nonzero, per_bin[group_of], 0.0)
    p_sum, q_sum = p.sum(), q.sum()
    if q_sum == 0:
        return math.inf
    pn, qn = p[nonzero] / p_sum, q[nonzero] / q_sum
    if np.any(qn == 0):
        return math.inf
    return float(np.sum(pn * np.log(pn / qn)))


def entropy_scan(hist: CalibrationHistogram, n_levels: int = N_LEVELS) -> tuple[int, np.ndarray]:
    """KL divergence for every candidate cut ``i`` in [n_levels, n_bins]."""
    n = len(hist.bins)
    kls = np.array([_kl_for_candidate(hist.bins, i, n_levels) for i in range(n_levels, n + 1)])
    # cuts whose KL differs only by summation rounding count as ties; take the smallest
    best = int(np.flatnonzero(kls <= kls.min() * (1 + KL_TIE_RTOL))[0]) + n_levels
    return best, kls


def calibrate(hist: CalibrationHistogram, method: CalibMethod) -> QuantParams:
    if hist.total_count == 0 or hist.max_abs <= 0:
        raise CalibrationError("degenerate histogram: no non-zero activations")
    if method.kind == "minmax":
        return QuantParams(hist.max_abs)
    if method.kind == "percentile":
        cum = np.cumsum(hist.bins)
        need = method.percentile / 100.0 * hist.total_count
        k = int(np.searchsorted(cum, need, side="left"))
        k = min(k, len(hist.bins) - 1)
        return QuantParams(hist.edge(k + 1))
    best, kls = entropy_scan(hist)
    return QuantParams(hist.edge(best), kl=float(kls[best - N_LEVELS]))


def quantize_weight_tensor(w) -> tuple[QuantTensor, bool]:
    """Per-tensor symmetric MinMax; returns (tensor, degenerate_flag)."""
    w = np.asarray(w, dtype=np.float64)
    max_abs = float(np.max(np.abs(w))) if w.size else 0.0
    if max_abs == 0.0:
        return QuantTensor(np.zeros(w.shape, dtype=np.int8), 1.0), True
    return quantize(w, max_abs / QMAX), False


def quantize_weights(bundle: WeightBundle) -> WeightBundle:
    if bundle.quantized:
        raise ValueError("bundle is already quantized")
    tensors, degenerate = {}, []
    for name, w in sorted(bundle.tensors.items()):
        q, flag = quantize_weight_tensor(w)
        tensors[name] = q
        if flag:
            degenerate.append(name)
    if degenerate:
        warnings.warn(f"all-zero weight tensors quantized with scale 1.0: {degenerate}")
    meta = {**bundle.meta, "quantized": True, "zero_weight_tensors": degenerate}
    return WeightBundle(tensors, meta)


def build_quantized_model(bundle: WeightBundle, params: dict, cfg: Optional[ModelConfig] = None,
                          method: Optional[CalibMethod] = None) -> WeightBundle:
    """Quantize weights and attach every activation scale.

    ``params`` maps activation site -> ``QuantParams`` (or a bare threshold).
    """
    from .model import activation_sites

    sites = activation_sites(cfg) if cfg is not None else sorted(params)
    missing = [s for s in sites if s not in params]
    if missing:
        raise CalibrationError(f"missing calibration for sites: {', '.join(missing)}")
    qb = quantize_weights(bundle)
    for site in sites:
        p = params[site]
        threshold = p.threshold if isinstance(p, QuantParams) else float(p)
        if not threshold > 0:
            raise CalibrationError(f"non-positive threshold for {site}")
        qb.tensors[ACT_PREFIX + site] = QuantTensor(np.zeros(0, dtype=np.int8), threshold / QMAX)
    if cfg is not None:
        qb.meta["config_hash"] = cfg.config_hash()
    if method is not None:
        qb.meta["calibration"] = method.label()
    return qb


class ActivationRecorder:
    """Observer that gathers per-site activation arrays from a float pass."""

    def __init__(self):
        self.data: dict[str, list[np.ndarray]] = {}

    def __call__(self, site: str, value) -> None:
        self.data.setdefault(site, []).append(np.abs(np.asarray(value, dtype=np.float32)).ravel())

    def histograms(self) -> dict[str, CalibrationHistogram]:
        return {site: collect_stats(chunks) for site, chunks in sorted(self.data.items())}


def run_calibration_pass(engine, segments) -> dict[str, CalibrationHistogram]:
    """Stream consecutive segments through a float engine, recording every site."""
    from .model import FeatureBuffer

    rec = ActivationRecorder()
    buf = FeatureBuffer(engine.cfg.seq_len)
    for seg in segments:
        a_shape, a_detail = engine.rep_learn(seg, observe=rec)
        buf.push(a_shape, a_detail)
        if buf.warm:
            h_f, h_r = engine.seq_learn(buf.details())
            engine.dense_head(a_shape, a_detail, h_f, h_r, observe=rec)
    if "dense.in" not in rec.data:
        raise CalibrationError("calibration needs at least seq_len segments")
    return rec.histograms()


def calibrate_all(hists: dict, method: CalibMethod) -> dict[str, QuantParams]:
    return {site: calibrate(h, method) for site, h in hists.items()}


def calibration_report(params: dict, method: CalibMethod, hists: Optional[dict] = None) -> dict:
    out = {}
    for site, p in sorted(params.items()):
        entry = {"method": method.label(), "threshold": p.threshold, "scale": p.scale}
        if p.kl is not None:
            entry["kl"] = p.kl
        if hists is not None:
            entry["max_abs"] = hists[site].max_abs
        out[site] = entry
    return out


def params_from_report(report: dict) -> dict[str, QuantParams]:
    try:
        return {site: QuantParams(float(e["threshold"]), e.get("kl")) for site, e in report.items()}
    except (KeyError, TypeError, ValueError) as exc:
        raise CalibrationError(f"malformed calibration report: {exc}") from exc


def dump_report(report: dict) -> str:
    return json.dumps(report, indent=2, sort_keys=True) + "\n"


__all__ = [
    "CalibMethod",
    "CalibrationError",
    "CalibrationHistogram",
    "ENTROPY",
    "MINMAX",
    "Percentile",
    "QuantParams",
    "build_quantized_model",
    "calibrate",
    "calibrate_all",
    "calibration_report",
    "collect_stats",
    "entropy_scan",
    "quantize_weights",
    "run_calibration_pass",
]
