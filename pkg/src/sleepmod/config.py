"""Model geometry: the dual-path CNN, BiLSTM and dense head."""
from __future__ import annotations

import enum
import hashlib
import json
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

from .fixedpoint import check_accumulator_headroom
from .tensor import ConvLayerSpec, pool_output_length


class SleepStage(enum.IntEnum):
    W = 0
    N1 = 1
    N2 = 2
    N3 = 3
    REM = 4

    @classmethod
    def parse(cls, value) -> "SleepStage":
        if isinstance(value, SleepStage):
            return value
        if isinstance(value, (int, np.integer)):
            return cls(int(value))
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValueError(f"unknown sleep stage {value!r}") from None


class ConfigError(ValueError):
    """Raised for inconsistent or malformed model configurations."""


@dataclass(frozen=True)
class PoolSpec:
    after_layer: int  # 1-based; the pool is fused into that layer's output
    window: int
    stride: int


@dataclass(frozen=True)
class PathConfig:
    layers: tuple[ConvLayerSpec, ...]
    pools: dict  # segment seconds -> PoolSpec
    dropout_after: tuple[int, ...] = ()

    def pool(self, segment_s: int) -> PoolSpec:
        try:
            return self.pools[segment_s]
        except KeyError:
            raise ConfigError(f"no pooling configured for {segment_s}-s segments") from None

    def frame_counts(self, n_samples: int, segment_s: int) -> list[tuple[int, int]]:
        """Per layer ``(conv_frames, stored_frames)``; stored is post-pool."""
        pool = self.pool(segment_s)
        counts = []
        length = n_samples
        for i, spec in enumerate(self.layers, start=1):
            t = spec.output_length(length)
            if t < 1:
                raise ConfigError(f"layer {i} produces no output for length {length}")
            stored = t
            if i == pool.after_layer:
                if pool.window > t:
                    raise ConfigError(f"pool window {pool.window} exceeds {t} frames")
                stored = pool_output_length(t, pool.window, pool.stride)
            counts.append((t, stored))
            length = stored
        return counts

    @property
    def out_channels(self) -> int:
        return self.layers[-1].out_channels


@dataclass(frozen=True)
class LstmConfig:
    input_size: int
    hidden_size: int
    bidirectional: bool = True
    bias: bool = False


@dataclass(frozen=True)
class DenseConfig:
    r_shape: int
    r_detail: int
    hidden: int
    n_classes: int = 5
    bias: bool = False


@dataclass(frozen=True)
class ModelConfig:
    shape_path: PathConfig
    detail_path: PathConfig
    lstm: LstmConfig
    dense: DenseConfig
    sample_rate: int = 256
    segment_s: int = 20
    seq_len: int = 3
    frames_per_segment: int = 5
    name: str = "custom"

    @property
    def segment_samples(self) -> int:
        return self.sample_rate * self.segment_s

    @property
    def lstm_steps(self) -> int:
        return self.seq_len * self.frames_per_segment

    @property
    def dense_in(self) -> int:
        dirs = 2 if self.lstm.bidirectional else 1
        return self.dense.r_shape + self.dense.r_detail + dirs * self.lstm.hidden_size

    def with_segment(self, segment_s: int) -> "ModelConfig":
        cfg = ModelConfig(**{**self.__dict__, "segment_s": segment_s})
        cfg.validate()
        return cfg

    def validate(self) -> None:
        if self.dense.n_classes != len(SleepStage):
            raise ConfigError("classifier must emit exactly 5 classes")
        if not self.lstm.bidirectional:
            raise ConfigError("the sequential learner is bidirectional")
        for pname, path in (("shape", self.shape_path), ("detail", self.detail_path)):
            if len(path.layers) != 4:
                raise ConfigError(f"{pname} path must have four conv layers")
            if path.layers[0].in_channels != 1:
                raise ConfigError(f"{pname} path takes a single EEG channel")
            for a, b in zip(path.layers, path.layers[1:]):
                if a.out_channels != b.in_channels:
                    raise ConfigError(f"{pname} path channel mismatch {a} -> {b}")
            for i, spec in enumerate(path.layers, start=1):
                check_accumulator_headroom(spec.fan_in, f"{pname}.conv{i}")
            frames = path.frame_counts(self.segment_samples, self.segment_s)
            if pname == "detail" and frames[-1][1] != self.frames_per_segment:
                raise ConfigError(
                    f"detail path yields {frames[-1][1]} frames, expected {self.frames_per_segment}")
        if self.detail_path.out_channels != self.lstm.input_size:
            raise ConfigError("LSTM input size must equal detail-path channels")
        shape_flat = self.shape_path.out_channels * self.shape_path.frame_counts(
            self.segment_samples, self.segment_s)[-1][1]
        detail_flat = self.detail_path.out_channels * self.frames_per_segment
        if shape_flat < self.dense.r_shape or detail_flat < self.dense.r_detail:
            raise ConfigError("residual pooling lengths exceed feature sizes")
        check_accumulator_headroom(self.lstm.input_size + self.lstm.hidden_size, "lstm")
        check_accumulator_headroom(self.dense_in, "dense.hidden")
        check_accumulator_headroom(self.dense.hidden, "dense.out")

    def to_dict(self) -> dict:
        def path(p: PathConfig) -> dict:
            return {
                "layers": [asdict(s) for s in p.layers],
                "pools": {str(k): asdict(v) for k, v in sorted(p.pools.items())},
                "dropout_after": list(p.dropout_after),
            }

        return {
            "name": self.name,
            "sample_rate": self.sample_rate,
            "segment_s": self.segment_s,
            "seq_len": self.seq_len,
            "frames_per_segment": self.frames_per_segment,
            "shape_path": path(self.shape_path),
            "detail_path": path(self.detail_path),
            "lstm": asdict(self.lstm),
            "dense": asdict(self.dense),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        try:
            def path(p: dict) -> PathConfig:
                return PathConfig(
                    layers=tuple(ConvLayerSpec(**s) for s in p["layers"]),
                    pools={int(k): PoolSpec(**v) for k, v in p["pools"].items()},
                    dropout_after=tuple(p.get("dropout_after", ())),
                )

            cfg = cls(
                shape_path=path(d["shape_path"]),
                detail_path=path(d["detail_path"]),
                lstm=LstmConfig(**d["lstm"]),
                dense=DenseConfig(**d["dense"]),
                sample_rate=int(d.get("sample_rate", 256)),
                segment_s=int(d.get("segment_s", 20)),
                seq_len=int(d.get("seq_len", 3)),
                frames_per_segment=int(d.get("frames_per_segment", 5)),
                name=d.get("name", "custom"),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"invalid model config: {exc}") from exc
        cfg.validate()
        return cfg

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        """Hash of the geometry; the segment length is excluded because one
        weight set serves both 20-s and 30-s inputs."""
        d = self.to_dict()
        d.pop("segment_s")
        blob = json.dumps(d, sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def load_config(path: Union[str, Path]) -> ModelConfig:
    with open(path, encoding="utf-8") as fh:
        return ModelConfig.from_dict(json.load(fh))


def reference_config_path() -> Path:
    return Path(str(resources.files("sleepmod") / "data" / "reference_config.json"))


def reference_config(segment_s: int = 20) -> ModelConfig:
    cfg = load_config(reference_config_path())
    return cfg if segment_s == cfg.segment_s else cfg.with_segment(segment_s)
