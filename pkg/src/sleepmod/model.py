"""Dual-path CNN + BiLSTM + residual dense classifier.

``FloatEngine`` is the real-valued reference. ``QuantEngine`` runs the
integer datapath: int8 activations and weights, 32-bit accumulation,
multiply-shift requantization, and LSTM state held as signed 16-bit with
12 fractional bits, with tanh/sigmoid from the interpolated lookup table.
Softmax always runs in floating point, as it would on the host MCU.
"""
from __future__ import annotations

from collections import deque
from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .config import ModelConfig, PathConfig, SleepStage
from .fixedpoint import (
    INT16_MAX,
    INT16_MIN,
    Requantizer,
    derive_requantizer,
    fixed_mul,
    requantize,
    saturate_to_i16,
)
from .lut import sigmoid_lut_fixed, tanh_lut_fixed
from .tensor import (
    QuantTensor,
    adaptive_avg_pool_codes,
    adaptive_avg_pool_float,
    conv1d_float,
    conv1d_quant,
    maxpool1d,
    quantize,
    relu,
)
from .weights import WeightBundle

STATE_FRAC_BITS = 12
STATE_ONE = 1 << STATE_FRAC_BITS
H_CODE_SCALE = 1.0 / 127.0  # hidden state as int8 for the recurrent matmul

Observer = Callable[[str, np.ndarray], None]


class WarmingUp(Exception):
    """The feature buffer does not yet hold ``seq_len`` segments."""


def activation_sites(cfg: ModelConfig) -> list[str]:
    sites = ["input"]
    for prefix, path in (("shape", cfg.shape_path), ("detail", cfg.detail_path)):
        sites += [f"{prefix}.conv{i}" for i in range(1, len(path.layers) + 1)]
    return sites + ["dense.in", "dense.hidden"]


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def lstm_cell_step_float(x, h_prev, c_prev, weight):
    """Reference LSTM cell; ``weight`` is (4H, I+H) with gate order i, f, g, o."""
    z = np.asarray(weight, dtype=np.float64) @ np.concatenate([x, h_prev])
    i, f, g, o = np.split(z, 4)
    c = _sigmoid(f) * c_prev + _sigmoid(i) * np.tanh(g)
    h = _sigmoid(o) * np.tanh(c)
    return h, c


@dataclass(frozen=True)
class LstmQuantRecipe:
    """Requantizers mapping each half of the gate matmul into Q.12."""

    from_x: Requantizer
    from_h: Requantizer
    h_to_code: Requantizer

    @classmethod
    def build(cls, x_scale: float, w_scale: float) -> "LstmQuantRecipe":
        return cls(
            from_x=derive_requantizer(x_scale * w_scale * STATE_ONE),
            from_h=derive_requantizer(H_CODE_SCALE * w_scale * STATE_ONE),
            h_to_code=derive_requantizer(1.0 / (H_CODE_SCALE * STATE_ONE)),
        )


def lstm_cell_step_quant(x_codes, h_q, c_q, weight: QuantTensor, recipe: LstmQuantRecipe):
    """Integer LSTM cell: int8 input codes, Q.12 int16 state in and out."""
    n_in = len(x_codes)
    w = weight.data.astype(np.float64)
    h_codes = requantize(np.asarray(h_q, dtype=np.int64), recipe.h_to_code)
    acc_x = np.rint(w[:, :n_in] @ np.asarray(x_codes, dtype=np.float64)).astype(np.int64)
    acc_h = np.rint(w[:, n_in:] @ h_codes.astype(np.float64)).astype(np.int64)
    z = saturate_to_i16(requantize(acc_x, recipe.from_x, INT16_MIN, INT16_MAX)
                        + requantize(acc_h, recipe.from_h, INT16_MIN, INT16_MAX))
    zi, zf, zg, zo = np.split(z, 4)
    i = sigmoid_lut_fixed(zi, STATE_FRAC_BITS)
    f = sigmoid_lut_fixed(zf, STATE_FRAC_BITS)
    g = tanh_lut_fixed(zg, STATE_FRAC_BITS, STATE_FRAC_BITS)
    o = sigmoid_lut_fixed(zo, STATE_FRAC_BITS)
    c = saturate_to_i16(fixed_mul(f, c_q, STATE_FRAC_BITS) + fixed_mul(i, g, STATE_FRAC_BITS))
    h = fixed_mul(o, tanh_lut_fixed(c, STATE_FRAC_BITS, STATE_FRAC_BITS), STATE_FRAC_BITS)
    return saturate_to_i16(h), c


def softmax(logits) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max())
    return e / e.sum()


def argmax_stage(probs) -> SleepStage:
    # np.argmax returns the first maximum: lowest stage index wins ties
    return SleepStage(int(np.argmax(probs)))


class FloatEngine:
    mode = "float"

    def __init__(self, cfg: ModelConfig, bundle: WeightBundle):
        if bundle.quantized:
            raise ValueError("FloatEngine needs a float weight bundle")
        bundle.validate(cfg)
        self.cfg = cfg
        self.w = {k: np.asarray(v, dtype=np.float64) for k, v in bundle.tensors.items()
                  if not k.startswith("act.")}

    def _path(self, x, prefix: str, path: PathConfig, observe: Optional[Observer]):
        pool = path.pool(self.cfg.segment_s)
        for i, spec in enumerate(path.layers, start=1):
            x = relu(conv1d_float(x, self.w[f"{prefix}.conv{i}.weight"], spec))
            if i == pool.after_layer:
                x = maxpool1d(x, pool.window, pool.stride)
            if observe:
                observe(f"{prefix}.conv{i}", x)
        return x

    def rep_learn(self, segment, observe: Optional[Observer] = None):
        segment = np.asarray(segment, dtype=np.float64).ravel()
        if segment.size != self.cfg.segment_samples:
            raise ValueError(f"segment has {segment.size} samples, expected {self.cfg.segment_samples}")
        x = segment[None, :]
        if observe:
            observe("input", x)
        return (self._path(x, "shape", self.cfg.shape_path, observe),
                self._path(x, "detail", self.cfg.detail_path, observe))

    def seq_learn(self, details: Sequence[np.ndarray]):
        seq = np.concatenate([np.asarray(d, dtype=np.float64) for d in details], axis=1)
        hsz = self.cfg.lstm.hidden_size
        h, c = np.zeros(hsz), np.zeros(hsz)
        for t in range(seq.shape[1]):
            h, c = lstm_cell_step_float(seq[:, t], h, c, self.w["lstm.fwd.weight"])
        h_f = h
        h, c = np.zeros(hsz), np.zeros(hsz)
        for t in reversed(range(seq.shape[1])):
            h, c = lstm_cell_step_float(seq[:, t], h, c, self.w["lstm.rev.weight"])
        return h_f, h

    def dense_head(self, a_shape, a_detail, h_f, h_r, observe: Optional[Observer] = None):
        d = np.concatenate([
            adaptive_avg_pool_float(a_shape, self.cfg.dense.r_shape),
            adaptive_avg_pool_float(a_detail, self.cfg.dense.r_detail),
            np.asarray(h_f, dtype=np.float64),
            np.asarray(h_r, dtype=np.float64),
        ])
        if observe:
            observe("dense.in", d)
        hidden = relu(self.w["dense.hidden.weight"] @ d)
        if observe:
            observe("dense.hidden", hidden)
        return self.w["dense.out.weight"] @ hidden

    def state_to_real(self, h) -> np.ndarray:
        return np.asarray(h, dtype=np.float64)


class QuantEngine:
    mode = "quant"

    def __init__(self, cfg: ModelConfig, bundle: WeightBundle,
                 trace: Optional[Callable[[dict], None]] = None):
        if not bundle.quantized:
            raise ValueError("QuantEngine needs a quantized weight bundle")
        bundle.validate(cfg)
        self.cfg = cfg
        self.trace = trace
        self.w: dict[str, QuantTensor] = {k: v for k, v in bundle.tensors.items()
                                          if not k.startswith("act.")}
        self.act = bundle.act_scales()
        missing = [s for s in activation_sites(cfg) if s not in self.act]
        if missing:
            raise ValueError(f"quantized bundle lacks activation scales for {missing}")
        self.conv_rq = {}
        for prefix, path in (("shape", cfg.shape_path), ("detail", cfg.detail_path)):
            prev = "input"
            for i in range(1, len(path.layers) + 1):
                site = f"{prefix}.conv{i}"
                w_scale = self.w[f"{site}.weight"].scale
                self.conv_rq[site] = derive_requantizer(self.act[prev] * w_scale / self.act[site])
                prev = site
        x_scale = self.act[f"detail.conv{len(cfg.detail_path.layers)}"]
        self.lstm_recipe = {d: LstmQuantRecipe.build(x_scale, self.w[f"lstm.{d}.weight"].scale)
                            for d in ("fwd", "rev")}
        s_in = self.act["dense.in"]
        self.h_to_dense = derive_requantizer(1.0 / (STATE_ONE * s_in))
        self.hidden_rq = derive_requantizer(
            s_in * self.w["dense.hidden.weight"].scale / self.act["dense.hidden"])
        self.logit_scale = self.act["dense.hidden"] * self.w["dense.out.weight"].scale
        self._pool_rq: dict[tuple[str, int], Requantizer] = {}

    def quantize_input(self, segment) -> QuantTensor:
        return quantize(np.asarray(segment, dtype=np.float64).ravel()[None, :], self.act["input"])

    def _path(self, x: QuantTensor, prefix: str, path: PathConfig) -> QuantTensor:
        pool = path.pool(self.cfg.segment_s)
        for i, spec in enumerate(path.layers, start=1):
            site = f"{prefix}.conv{i}"
            x = relu(conv1d_quant(x, self.w[f"{site}.weight"], spec, self.conv_rq[site],
                                  self.act[site], trace=self.trace))
            if i == pool.after_layer:
                x = maxpool1d(x, pool.window, pool.stride)
        return x

    def rep_learn(self, segment, observe: Optional[Observer] = None):
        segment = np.asarray(segment, dtype=np.float64).ravel()
        if segment.size != self.cfg.segment_samples:
            raise ValueError(f"segment has {segment.size} samples, expected {self.cfg.segment_samples}")
        x = self.quantize_input(segment)
        return (self._path(x, "shape", self.cfg.shape_path),
                self._path(x, "detail", self.cfg.detail_path))

    def seq_learn(self, details: Sequence[QuantTensor]):
        seq = np.concatenate([d.data.astype(np.int64) for d in details], axis=1)
        hsz = self.cfg.lstm.hidden_size
        out = []
        for direction, steps in (("fwd", range(seq.shape[1])), ("rev", reversed(range(seq.shape[1])))):
            h = np.zeros(hsz, dtype=np.int64)
            c = np.zeros(hsz, dtype=np.int64)
            for t in steps:
                h, c = lstm_cell_step_quant(seq[:, t], h, c, self.w[f"lstm.{direction}.weight"],
                                            self.lstm_recipe[direction])
            out.append(h)
        return out[0], out[1]

    def _pooled_residual(self, q: QuantTensor, out_len: int, site: str) -> np.ndarray:
        sums, widths = adaptive_avg_pool_codes(q.data, out_len)
        out = np.empty(out_len, dtype=np.int64)
        for width in np.unique(widths):
            key = (site, int(width))
            if key not in self._pool_rq:
                self._pool_rq[key] = derive_requantizer(q.scale / (int(width) * self.act["dense.in"]))
            sel = widths == width
            out[sel] = requantize(sums[sel], self._pool_rq[key])
        return out

    def dense_head(self, a_shape: QuantTensor, a_detail: QuantTensor, h_f, h_r,
                   observe: Optional[Observer] = None):
        d = np.concatenate([
            self._pooled_residual(a_shape, self.cfg.dense.r_shape, "shape"),
            self._pooled_residual(a_detail, self.cfg.dense.r_detail, "detail"),
            requantize(np.asarray(h_f, dtype=np.int64), self.h_to_dense),
            requantize(np.asarray(h_r, dtype=np.int64), self.h_to_dense),
        ]).astype(np.float64)
        w1 = self.w["dense.hidden.weight"].data.astype(np.float64)
        acc = np.rint(w1 @ d).astype(np.int64)
        hidden = np.maximum(requantize(acc, self.hidden_rq), 0).astype(np.float64)
        w2 = self.w["dense.out.weight"].data.astype(np.float64)
        acc_out = np.rint(w2 @ hidden).astype(np.int64)
        # the int32 accumulators go to the MCU, which rescales before softmax
        return acc_out.astype(np.float64) * self.logit_scale

    def state_to_real(self, h) -> np.ndarray:
        return np.asarray(h, dtype=np.float64) / STATE_ONE


Engine = Union[FloatEngine, QuantEngine]


def load_engine(cfg: ModelConfig, bundle: WeightBundle, **kwargs) -> Engine:
    return QuantEngine(cfg, bundle, **kwargs) if bundle.quantized else FloatEngine(cfg, bundle)


class FeatureBuffer:
    """Ring buffer of the last ``seq_len`` segments' features, oldest first."""

    def __init__(self, seq_len: int = 3):
        self.seq_len = seq_len
        self._items: deque = deque(maxlen=seq_len)

    def push(self, a_shape, a_detail) -> None:
        self._items.append((a_shape, a_detail))

    @property
    def warm(self) -> bool:
        return len(self._items) == self.seq_len

    def details(self) -> list:
        if not self.warm:
            raise WarmingUp(f"{len(self._items)}/{self.seq_len} segments buffered")
        return [d for _, d in self._items]

    def latest(self):
        return self._items[-1]

    def __len__(self) -> int:
        return len(self._items)


@dataclass
class Classification:
    stage: Optional[SleepStage]
    probs: Optional[np.ndarray]
    logits: Optional[np.ndarray] = None

    @property
    def warming_up(self) -> bool:
        return self.stage is None


class Classifier:
    """One classification stream: rep_learn -> buffer -> seq_learn -> head."""

    def __init__(self, engine: Engine):
        self.engine = engine
        self.buffer = FeatureBuffer(engine.cfg.seq_len)

    def push(self, window) -> None:
        self.buffer.push(*self.engine.rep_learn(window))

    def classify(self, window) -> Classification:
        self.push(window)
        if not self.buffer.warm:
            return Classification(None, None)
        h_f, h_r = self.engine.seq_learn(self.buffer.details())
        a_shape, a_detail = self.buffer.latest()
        logits = self.engine.dense_head(a_shape, a_detail, h_f, h_r)
        probs = softmax(logits)
        return Classification(argmax_stage(probs), probs, logits)


def classify_windows(engine: Engine, windows) -> list[Classification]:
    clf = Classifier(engine)
    return [clf.classify(w) for w in windows]
