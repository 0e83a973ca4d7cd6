"""Deterministic fixture weights for the synthetic staging task.

The first convolution of each path is a bank of windowed sinusoids
(cosine/sine pairs on a log-spaced frequency grid), so each channel
measures band energy. Deeper convolutions smooth each channel in time.
The LSTM and hidden dense layer are random; only the output layer is fitted,
by ridge regression on float hidden features of a training recording.
"""
from __future__ import annotations

from importlib import resources
from pathlib import Path

import numpy as np

from .config import ModelConfig, SleepStage, reference_config
from .loopsim import SyntheticEegConfig, gen_eeg, random_schedule, window_truth
from .model import Classifier, FloatEngine
from .weights import WeightBundle, load_bundle

FIXTURE_NAME = "fixture_float.slpw"
FIXTURE_SEED = 20240
TRAIN_SEED = 1
CALIB_SEED = 2
EVAL_SEED = 3
INPUT_UNIT_UV = 40.0  # typical EEG amplitude; sets conv1 gain so features are O(1)


def fixture_path() -> Path:
    return Path(str(resources.files("sleepmod") / "data" / FIXTURE_NAME))


def load_fixture() -> WeightBundle:
    return load_bundle(fixture_path())


def synthetic_recording(seed: int, n_windows: int, window_s: int = 20, **kwargs):
    """Random 5-stage schedule of whole windows."""
    rng = np.random.default_rng(seed)
    sched = random_schedule(rng, n_windows, window_s)
    return gen_eeg(SyntheticEegConfig(schedule=sched, seed=seed + 1000, **kwargs))


def windows_of(rec, window_s: int = 20):
    win = window_s * rec.sample_rate
    n = len(rec.samples) // win
    segs = [rec.samples[k * win:(k + 1) * win] for k in range(n)]
    truth = [window_truth(rec.stages, (k + 1) * win, win) for k in range(n)]
    return segs, truth


def _filter_bank(n_ch: int, k: int, fs: float, f_lo: float, f_hi: float) -> np.ndarray:
    t = (np.arange(k) - (k - 1) / 2) / fs
    window = np.hanning(k)
    freqs = np.geomspace(f_lo, f_hi, n_ch // 2)
    w = np.empty((n_ch, 1, k))
    for j, f in enumerate(freqs):
        for phase in range(2):
            carrier = np.cos(2 * np.pi * f * t - phase * np.pi / 2)
            w[2 * j + phase, 0] = window * carrier / (window.sum() / 2) / INPUT_UNIT_UV
    return w


def _smoother(rng, n_ch: int, k: int, noise: float = 0.02) -> np.ndarray:
    w = noise * rng.standard_normal((n_ch, n_ch, k)) / np.sqrt(n_ch * k)
    w[np.arange(n_ch), np.arange(n_ch), :] += 1.0 / k
    return w


def initial_weights(cfg: ModelConfig, seed: int = FIXTURE_SEED) -> dict:
    rng = np.random.default_rng(seed)
    fs = cfg.sample_rate
    t = {}
    bands = {"shape": (0.5, 16.0), "detail": (2.0, 32.0)}
    for prefix, path in (("shape", cfg.shape_path), ("detail", cfg.detail_path)):
        first = path.layers[0]
        t[f"{prefix}.conv1.weight"] = _filter_bank(first.out_channels, first.kernel_size, fs, *bands[prefix])
        for i, spec in enumerate(path.layers[1:], start=2):
            t[f"{prefix}.conv{i}.weight"] = _smoother(rng, spec.out_channels, spec.kernel_size)
    h, n_in = cfg.lstm.hidden_size, cfg.lstm.input_size
    for d in ("fwd", "rev"):
        t[f"lstm.{d}.weight"] = rng.standard_normal((4 * h, n_in + h)) * (1.0 / np.sqrt(n_in + h))
    t["dense.hidden.weight"] = rng.standard_normal((cfg.dense.hidden, cfg.dense_in)) * np.sqrt(2.0 / cfg.dense_in)
    t["dense.out.weight"] = np.zeros((cfg.dense.n_classes, cfg.dense.hidden))
    return {k: v.astype(np.float32) for k, v in t.items()}


def hidden_features(engine: FloatEngine, segments) -> np.ndarray:
    """Hidden-layer activations for every window after warm-up."""
    rows = []

    def grab(site, value):
        if site == "dense.hidden":
            rows.append(np.asarray(value, dtype=np.float64))

    clf = Classifier(engine)
    for seg in segments:
        clf.push(seg)
        if clf.buffer.warm:
            h_f, h_r = engine.seq_learn(clf.buffer.details())
            engine.dense_head(*clf.buffer.latest(), h_f, h_r, observe=grab)
    return np.array(rows)


def fit_output_layer(features: np.ndarray, labels, n_classes: int, ridge: float = 1e-2) -> np.ndarray:
    """Ridge regression onto centred one-hot targets; returns (n_classes, hidden)."""
    y = np.eye(n_classes)[np.asarray(labels, dtype=np.int64)] - 1.0 / n_classes
    scale = features.std() or 1.0
    x = features / scale
    gram = x.T @ x + ridge * len(x) * np.eye(x.shape[1])
    w = np.linalg.solve(gram, x.T @ y).T / scale
    # sharpen so softmax probabilities are confident
    return w * 8.0


def build_fixture(cfg: ModelConfig | None = None, n_train_windows: int = 600) -> WeightBundle:
    cfg = cfg or reference_config()
    tensors = initial_weights(cfg)
    bundle = WeightBundle(tensors, {"config_hash": cfg.config_hash(), "quantized": False,
                                    "fixture_seed": FIXTURE_SEED, "train_seed": TRAIN_SEED})
    engine = FloatEngine(cfg, bundle)
    segs, truth = windows_of(synthetic_recording(TRAIN_SEED, n_train_windows, cfg.segment_s), cfg.segment_s)
    feats = hidden_features(engine, segs)
    labels = [int(s) for s in truth[cfg.seq_len - 1:]]
    w2 = fit_output_layer(feats, labels, len(SleepStage))
    tensors["dense.out.weight"] = w2.astype(np.float32)
    return WeightBundle(tensors, bundle.meta)
