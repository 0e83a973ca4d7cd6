"""Static resource model: parameters, multiplications, working memory, cycles."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from typing import Optional

from .config import ModelConfig, PathConfig

BLOCKS = ("cnn_shape", "cnn_detail", "lstm", "dense")
BLOCK_LABELS = {
    "cnn_shape": "CNN-shape",
    "cnn_detail": "CNN-detail",
    "lstm": "LSTM",
    "dense": "Residual & dense",
}
LSTM_ELEMENTWISE_MULTS = 3  # f*c, i*g, o*tanh(c)


def _path_params(path: PathConfig) -> int:
    return sum(spec.n_params for spec in path.layers)


def _lstm_params(cfg: ModelConfig) -> int:
    dirs = 2 if cfg.lstm.bidirectional else 1
    h, i = cfg.lstm.hidden_size, cfg.lstm.input_size
    n = dirs * 4 * h * (i + h)
    if cfg.lstm.bias:
        n += dirs * 4 * h
    return n


def _dense_params(cfg: ModelConfig) -> int:
    d = cfg.dense
    n = cfg.dense_in * d.hidden + d.hidden * d.n_classes
    if d.bias:
        n += d.hidden + d.n_classes
    return n


def count_params(cfg: ModelConfig) -> dict[str, int]:
    return {
        "cnn_shape": _path_params(cfg.shape_path),
        "cnn_detail": _path_params(cfg.detail_path),
        "lstm": _lstm_params(cfg),
        "dense": _dense_params(cfg),
    }


def _path_macs(path: PathConfig, n_samples: int, segment_s: int) -> int:
    frames = path.frame_counts(n_samples, segment_s)
    return sum(spec.fan_in * spec.out_channels * t for spec, (t, _) in zip(path.layers, frames))


def count_macs(cfg: ModelConfig, segment_length: Optional[int] = None) -> dict[str, int]:
    """Multiplications per classified segment."""
    if segment_length is None:
        segment_length = cfg.segment_samples
    if segment_length % cfg.sample_rate:
        raise ValueError("segment length must be a whole number of seconds")
    seg_s = segment_length // cfg.sample_rate
    if seg_s != cfg.segment_s:
        cfg = cfg.with_segment(seg_s)
    dirs = 2 if cfg.lstm.bidirectional else 1
    steps = cfg.lstm_steps
    lstm = steps * _lstm_params(cfg) + steps * dirs * LSTM_ELEMENTWISE_MULTS * cfg.lstm.hidden_size
    return {
        "cnn_shape": _path_macs(cfg.shape_path, segment_length, seg_s),
        "cnn_detail": _path_macs(cfg.detail_path, segment_length, seg_s),
        "lstm": lstm,
        "dense": _dense_params(cfg),
    }


def ping_pong_words(channels: int, frames: int) -> int:
    """Two live buffers of one layer output."""
    return 2 * channels * frames


def _path_memory(path: PathConfig, n_samples: int, segment_s: int) -> int:
    # pooling is fused into the conv engine and the raw input streams in,
    # so the buffers hold post-pool layer outputs only
    frames = path.frame_counts(n_samples, segment_s)
    return max(ping_pong_words(spec.out_channels, stored) for spec, (_, stored) in zip(path.layers, frames))


def count_memory_words(cfg: ModelConfig) -> dict[str, Optional[int]]:
    """Ping-pong activation buffer words per block; weights stream from flash."""
    n = cfg.segment_samples
    return {
        "cnn_shape": _path_memory(cfg.shape_path, n, cfg.segment_s),
        "cnn_detail": _path_memory(cfg.detail_path, n, cfg.segment_s),
        "lstm": ping_pong_words(cfg.lstm.input_size, cfg.lstm_steps),
        "dense": None,
    }


def estimate_cycles(mac_total: int, parallel_kernels: int = 4, clock_hz: float = 20e6):
    """Lower-bound dataflow estimate: ``(cycles, seconds)``."""
    if mac_total < 0 or parallel_kernels < 1 or clock_hz <= 0:
        raise ValueError("invalid cycle-estimate inputs")
    cycles = -(-int(mac_total) // int(parallel_kernels))
    return cycles, cycles / clock_hz


@dataclass
class ResourceReport:
    config_name: str
    segment_samples: int
    params: dict
    mult_ops: dict
    memory_words: dict
    parallel_kernels: int
    clock_hz: float
    cycles: int
    seconds: float

    @property
    def total_params(self) -> int:
        return sum(self.params.values())

    @property
    def total_mult_ops(self) -> int:
        return sum(self.mult_ops.values())

    @property
    def total_memory_words(self) -> int:
        return sum(v for v in self.memory_words.values() if v is not None)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["totals"] = {
            "params": self.total_params,
            "mult_ops": self.total_mult_ops,
            "memory_words": self.total_memory_words,
        }
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def to_table(self) -> str:
        rows = [("", "Parameters", "Multiplication Operation", "Memory Required")]
        for b in BLOCKS:
            mem = self.memory_words[b]
            rows.append((BLOCK_LABELS[b], str(self.params[b]), str(self.mult_ops[b]),
                         "-" if mem is None else str(mem)))
        rows.append(("Total", str(self.total_params), str(self.total_mult_ops),
                     str(self.total_memory_words)))
        widths = [max(len(r[i]) for r in rows) for i in range(4)]
        lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows]
        lines.insert(1, "  ".join("-" * w for w in widths))
        lines.insert(len(lines) - 1, "  ".join("-" * w for w in widths))
        lines.append("")
        lines.append(f"cycles @ {self.parallel_kernels} kernels: {self.cycles}  "
                     f"({self.seconds:.4f} s at {self.clock_hz / 1e6:g} MHz)")
        return "\n".join(lines) + "\n"


def resource_report(cfg: ModelConfig, segment_length: Optional[int] = None,
                    parallel_kernels: int = 4, clock_hz: float = 20e6) -> ResourceReport:
    if segment_length is None:
        segment_length = cfg.segment_samples
    seg_s = segment_length // cfg.sample_rate
    if seg_s != cfg.segment_s:
        cfg = cfg.with_segment(seg_s)
    macs = count_macs(cfg, segment_length)
    cycles, seconds = estimate_cycles(sum(macs.values()), parallel_kernels, clock_hz)
    return ResourceReport(
        config_name=cfg.name,
        segment_samples=segment_length,
        params=count_params(cfg),
        mult_ops=macs,
        memory_words=count_memory_words(cfg),
        parallel_kernels=parallel_kernels,
        clock_hz=clock_hz,
        cycles=cycles,
        seconds=seconds,
    )


def virtual_latency_s(cfg: ModelConfig, parallel_kernels: int = 4, clock_hz: float = 20e6) -> float:
    return estimate_cycles(sum(count_macs(cfg).values()), parallel_kernels, clock_hz)[1]


__all__ = [
    "ResourceReport",
    "count_macs",
    "count_memory_words",
    "ping_pong_words",
    "count_params",
    "estimate_cycles",
    "resource_report",
    "virtual_latency_s",
]
