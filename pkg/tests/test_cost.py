import json
from dataclasses import replace

import numpy as np
import pytest

from oracles import recount
from sleepmod.config import ConvLayerSpec, reference_config
from sleepmod.cost import (
    count_macs,
    count_memory_words,
    count_params,
    estimate_cycles,
    ping_pong_words,
    resource_report,
    virtual_latency_s,
)


def test_reference_totals():
    cfg = reference_config()
    assert sum(count_params(cfg).values()) == 1277952
    assert sum(count_macs(cfg).values()) == 69004544
    assert estimate_cycles(69004544) == (17251136, pytest.approx(0.8625568))
    assert virtual_latency_s(cfg) < 1.0


def test_thirty_second_segment():
    cfg = reference_config()
    assert sum(count_macs(cfg, 30 * 256).values()) == 91999488
    assert sum(count_macs(reference_config(30)).values()) == 91999488
    # parameters do not depend on the segment length
    assert count_params(reference_config(30)) == count_params(cfg)
    with pytest.raises(ValueError):
        count_macs(cfg, 5000)


def test_matches_recount_oracle_reference():
    for seg in (20, 30):
        cfg = reference_config(seg)
        want = recount(cfg, cfg.segment_samples)
        assert count_params(cfg) == want["params"]
        assert count_macs(cfg) == want["macs"]


def _random_config(rng, base):
    def path(p):
        c = int(rng.choice([16, 32, 48]))
        layers = []
        for i, spec in enumerate(p.layers):
            layers.append(replace(spec, in_channels=1 if i == 0 else c, out_channels=c,
                                  kernel_size=int(rng.integers(spec.kernel_size // 2 + 1, spec.kernel_size + 3))))
        return replace(p, layers=tuple(layers)), c

    shape, _ = path(base.shape_path)
    detail, c = path(base.detail_path)
    lstm = replace(base.lstm, input_size=c, hidden_size=int(rng.choice([16, 32, 64])))
    dense = replace(base.dense, hidden=int(rng.integers(16, 256)))
    cfg = replace(base, shape_path=shape, detail_path=detail, lstm=lstm, dense=dense)
    cfg.validate()
    return cfg


def test_matches_recount_oracle_random_configs(rng):
    base = reference_config()
    for _ in range(30):
        cfg = _random_config(rng, base)
        want = recount(cfg, cfg.segment_samples)
        assert count_params(cfg) == want["params"]
        assert count_macs(cfg) == want["macs"]


def test_dense_macs_equal_params_and_lstm_decomposition():
    cfg = reference_config()
    assert count_macs(cfg)["dense"] == count_params(cfg)["dense"] == 376832
    assert count_macs(cfg)["lstm"] == 15 * count_params(cfg)["lstm"] + 15 * 2 * 3 * 128


def test_memory_words():
    assert ping_pong_words(64, 10) == 1280
    mem = count_memory_words(reference_config())
    assert mem["cnn_detail"] == 7936 and mem["lstm"] == 1920 and mem["dense"] is None
    assert mem["cnn_shape"] == ping_pong_words(64, 47)


def test_estimate_cycles_examples():
    assert estimate_cycles(4, 4)[0] == 1
    assert estimate_cycles(5, 4)[0] == 2
    assert estimate_cycles(0) == (0, 0.0)
    counts = [estimate_cycles(m)[0] for m in range(0, 200)]
    assert counts == sorted(counts)
    for bad in ((-1,), (10, 0), (10, 4, 0.0)):
        with pytest.raises(ValueError):
            estimate_cycles(*bad)


def test_report_table_and_json_agree():
    rep = resource_report(reference_config())
    d = json.loads(rep.to_json())
    assert d["totals"] == {"params": 1277952, "mult_ops": 69004544, "memory_words": rep.total_memory_words}
    assert d["cycles"] == 17251136
    table = rep.to_table()
    assert "1277952" in table and "69004544" in table and "17251136" in table
    assert rep.to_json() == resource_report(reference_config()).to_json()


def test_conv_layer_spec_fan_in():
    assert ConvLayerSpec(64, 64, 32).fan_in == 2048
    assert np.isclose(ConvLayerSpec(1, 64, 512, 4).output_length(5120), 1280)
