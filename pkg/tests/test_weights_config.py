import json
import struct

import numpy as np
import pytest

from sleepmod.config import ConfigError, ModelConfig, SleepStage, load_config, reference_config
from sleepmod.tensor import QuantTensor
from sleepmod.weights import (
    WeightBundle,
    WeightFormatError,
    expected_shapes,
    from_bytes,
    load_bundle,
    save_bundle,
    to_bytes,
)


def _small_bundle(rng):
    return WeightBundle(
        {"a": rng.standard_normal((3, 4)).astype(np.float32), "b": np.zeros(2, dtype=np.float32)},
        {"config_hash": "x", "note": "ü"},
    )


def test_slpw_roundtrip_float(tmp_path, rng):
    b = _small_bundle(rng)
    save_bundle(b, tmp_path / "w.slpw")
    back = load_bundle(tmp_path / "w.slpw")
    assert back.meta == b.meta and set(back.tensors) == {"a", "b"}
    np.testing.assert_array_equal(back["a"], b["a"])
    assert to_bytes(back) == to_bytes(b)


def test_slpw_roundtrip_quantized(quant_bundles):
    qb = quant_bundles["minmax"]
    back = from_bytes(to_bytes(qb))
    assert back.quantized and back.act_scales() == qb.act_scales()
    for name, t in qb.tensors.items():
        assert isinstance(back[name], QuantTensor)
        np.testing.assert_array_equal(back[name].data, t.data)
        assert back[name].scale == t.scale


def test_slpw_errors(rng):
    blob = to_bytes(_small_bundle(rng))
    with pytest.raises(WeightFormatError, match="SLPW"):
        from_bytes(b"XXXX" + blob[4:])
    with pytest.raises(WeightFormatError, match="truncated"):
        from_bytes(blob[:-3])
    with pytest.raises(WeightFormatError, match="trailing"):
        from_bytes(blob + b"\0")
    with pytest.raises(WeightFormatError, match="version"):
        from_bytes(blob[:4] + struct.pack("<H", 9) + blob[6:])


def test_bundle_validate(cfg, float_bundle):
    float_bundle.validate(cfg)
    float_bundle.validate(reference_config(30))
    tensors = dict(float_bundle.tensors)
    tensors["dense.out.weight"] = np.zeros((4, 1024))
    with pytest.raises(WeightFormatError, match="shape"):
        WeightBundle(tensors, dict(float_bundle.meta)).validate(cfg)
    del tensors["dense.out.weight"]
    with pytest.raises(WeightFormatError, match="missing"):
        WeightBundle(tensors, dict(float_bundle.meta)).validate(cfg)
    with pytest.raises(WeightFormatError, match="config"):
        WeightBundle(dict(float_bundle.tensors), {"config_hash": "deadbeef"}).validate(cfg)


def test_expected_shapes_count_params(cfg):
    total = sum(int(np.prod(s)) for s in expected_shapes(cfg).values())
    assert total == 1277952


def test_reference_config_geometry():
    cfg = reference_config()
    assert [l.kernel_size for l in cfg.shape_path.layers] == [512, 32, 32, 32]
    assert [l.stride for l in cfg.shape_path.layers] == [4, 1, 1, 4]
    assert [l.kernel_size for l in cfg.detail_path.layers] == [128, 22, 22, 22]
    assert [l.stride for l in cfg.detail_path.layers] == [16, 1, 5, 3]
    for seg in (20, 30):
        c = reference_config(seg)
        assert c.detail_path.frame_counts(c.segment_samples, seg)[-1][1] == 5
        assert c.segment_samples == seg * 256
    assert cfg.dense_in == 363 and cfg.lstm_steps == 15


def test_config_roundtrip_and_hash(tmp_path):
    cfg = reference_config()
    p = tmp_path / "c.json"
    p.write_text(json.dumps(cfg.to_dict()))
    assert load_config(p) == cfg
    assert ModelConfig.from_dict(json.loads(cfg.canonical_json())).canonical_json() == cfg.canonical_json()
    assert reference_config(30).config_hash() == cfg.config_hash()


def test_config_errors():
    d = reference_config().to_dict()
    bad = json.loads(json.dumps(d))
    del bad["lstm"]
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["dense"]["n_classes"] = 4
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["detail_path"]["layers"][3]["stride"] = 1
    with pytest.raises(ConfigError, match="frames"):
        ModelConfig.from_dict(bad)
    bad = json.loads(json.dumps(d))
    bad["shape_path"]["layers"][1]["in_channels"] = 32
    with pytest.raises(ConfigError):
        ModelConfig.from_dict(bad)
    with pytest.raises(ConfigError):
        reference_config().with_segment(25)


def test_sleep_stage_parse():
    assert SleepStage.parse("n3") == SleepStage.N3
    assert SleepStage.parse(np.int64(4)) == SleepStage.REM
    assert SleepStage.parse(SleepStage.W) == SleepStage.W
    with pytest.raises(ValueError):
        SleepStage.parse("N4")
