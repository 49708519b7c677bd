import dataclasses

import pytest
from hypothesis import given, strategies as st

from ianus.config import (MODEL_PRESETS, ConfigError, HardwareConfig, default_hardware, derive_peaks,
                          dump_config, get_model, parse_config, validate_hardware)


def test_peaks_match_table_values():
    p = derive_peaks(default_hardware())
    # 128 x 64 PEs x 4 MACs x 2 flops x 0.7 GHz = 45.8752 TFLOPS, quoted as 45.875
    assert p.mu_flops_per_core == 128 * 64 * 4 * 2 * 700e6
    assert round(p.mu_flops_per_core / 1e12, 3) == 45.875
    assert round(p.mu_flops_total / 1e12) == 184
    assert p.pim_flops_per_chip == pytest.approx(1.024e12, rel=1e-12)
    assert p.internal_bw == pytest.approx(4096e9, rel=1e-12)
    assert p.external_bw == pytest.approx(256e9, rel=1e-12)


def test_modes_split_channels():
    uni = default_hardware("unified")
    part = default_hardware("partitioned")
    plain = default_hardware("plain")
    assert uni.pim_channels() == tuple(range(8))
    assert set(part.pim_channels()) | set(part.normal_channels()) == set(range(8))
    assert not set(part.pim_channels()) & set(part.normal_channels())
    assert plain.pim_channels() == ()


def test_presets_validate_and_aliases_resolve():
    for name in MODEL_PRESETS:
        m = get_model(name)
        assert m.embedding_dim == m.head_dim * m.num_heads
    assert get_model("XL").name == "gpt2-xl"
    assert get_model("2.5B", 64, 8).input_tokens == 64


def test_unknown_model_is_rejected():
    with pytest.raises(ConfigError, match="unknown model"):
        get_model("gpt-9000")


def test_parse_errors_name_the_line():
    with pytest.raises(ConfigError, match="line"):
        parse_config("hardware:\n  num_cores: [1,\n")
    with pytest.raises(ConfigError, match="unknown top-level"):
        parse_config("gpu: {}\n")


def test_invalid_hardware_is_rejected():
    with pytest.raises(ConfigError):
        validate_hardware(dataclasses.replace(HardwareConfig(), num_cores=0))


@given(cores=st.integers(1, 8), chunk=st.sampled_from([64 * 1024, 256 * 1024, 1 << 20]),
       mode=st.sampled_from(["unified", "partitioned", "plain"]))
def test_config_text_round_trip(cores, chunk, mode):
    hw = default_hardware(mode, num_cores=cores, dma_chunk_bytes=chunk)
    m = get_model("gpt2-m", 64, 4)
    hw2, m2 = parse_config(dump_config(hw, m))
    assert hw2 == hw and m2 == m
