"""Run configuration, weight files and the momentum optimizer."""

import struct
import zlib
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from densefpn.config import (
    ConfigError,
    OptimizerConfig,
    desk_profile,
    load_config,
    full_profile,
    parse_config,
    serialize_config,
)
from densefpn.detector import build_detector
from densefpn.optim import MomentumSGD, sgd_momentum_step
from densefpn.params import ParamSet
from densefpn.weights import (
    ChecksumError,
    VersionError,
    WeightFileError,
    decode_weights,
    encode_weights,
    load_weights,
    save_weights,
)


class TestConfig:
    @pytest.mark.parametrize("profile", [desk_profile, full_profile])
    def test_round_trip(self, profile):
        cfg = profile()
        assert parse_config(serialize_config(cfg), base=cfg) == cfg
        # against a different base the text alone pins every field
        other = full_profile() if profile is desk_profile else desk_profile()
        assert parse_config(serialize_config(cfg), base=other) == cfg

    def test_full_profile_values(self):
        p = full_profile()
        assert p.optimizer.lr_schedule == ((70000, 0.00125), (15000, 0.000125))
        assert (p.optimizer.momentum, p.optimizer.weight_decay) == (0.9, 0.0001)
        assert p.input.short_side == 800
        assert p.detector.anchors.base_sizes == (16, 32, 64, 128, 256)
        assert p.detector.fusion.out_channels == 256 and p.detector.cascade.num_stages == 3

    def test_overrides_and_comments(self, tmp_path):
        f = tmp_path / "c.cfg"
        f.write_text("# toy\nfusion.mode = add   # sum\ncascade.lambda = 2\nrun.seed = 7\n")
        cfg = load_config(f)
        assert cfg.detector.fusion.fusion_mode == "add"
        assert cfg.detector.cascade.lam == 2.0 and cfg.seed == 7

    @pytest.mark.parametrize("text", [
        "nonsense.key = 1",
        "fusion.out_channels = many",
        "fusion.dense_to_p2 = maybe",
        "no equals sign",
        "optimizer.momentum = 1.0",
        "input.flip_probability = 1.5",
        "optimizer.lr_schedule = 10:-0.1",
        "cascade.iou_thresholds = 0.5,0.6",
        "fusion.mode = mean",
    ])
    def test_errors(self, text):
        with pytest.raises(ConfigError):
            parse_config(text)

    @given(st.floats(1e-6, 1.0), st.floats(0.0, 0.99), st.integers(1, 10_000), st.booleans())
    @settings(max_examples=40, deadline=None)
    def test_round_trip_random(self, lr, mom, n, p2):
        base = desk_profile()
        cfg = replace(base, optimizer=OptimizerConfig(((n, lr),), mom, 1e-4),
                      detector=replace(base.detector, fusion=replace(base.detector.fusion, dense_to_p2=p2)))
        assert parse_config(serialize_config(cfg)) == cfg


@pytest.fixture
def small_params():
    p = ParamSet()
    rng = np.random.default_rng(0)
    p.add("a.weight", rng.standard_normal((3, 2, 3, 3)))
    p.add("a.bias", rng.standard_normal(3))
    p.add("b", rng.standard_normal((5,)))
    return p


class TestWeights:
    def test_round_trip_bit_exact(self, tmp_path):
        params = build_detector(desk_profile().detector, 0)
        save_weights(params, tmp_path / "w.bin")
        fresh = build_detector(desk_profile().detector, 1)
        load_weights(tmp_path / "w.bin", fresh)
        for name in params:
            assert params[name].data.tobytes() == fresh[name].data.tobytes()

    def test_truncated(self, small_params):
        raw = encode_weights(small_params)
        with pytest.raises(ChecksumError):
            decode_weights(raw[:-7])

    def test_corrupt_byte(self, small_params):
        raw = bytearray(encode_weights(small_params))
        raw[40] ^= 0xFF
        with pytest.raises(ChecksumError):
            decode_weights(bytes(raw))

    def test_version(self, small_params):
        body = bytearray(encode_weights(small_params)[:-4])
        body[8:12] = struct.pack("<I", 99)
        raw = bytes(body) + struct.pack("<I", zlib.crc32(bytes(body)))
        with pytest.raises(VersionError):
            decode_weights(raw)

    def test_bad_magic(self):
        with pytest.raises(WeightFileError):
            decode_weights(b"NOTAFILE" + bytes(20))

    def test_unknown_name_listed(self, small_params, tmp_path):
        extra = ParamSet()
        for name, p in small_params.items():
            extra.add(name, p.data)
        extra.add("stray.tensor", np.zeros(2))
        save_weights(extra, tmp_path / "w.bin")
        with pytest.raises(WeightFileError, match="stray.tensor"):
            load_weights(tmp_path / "w.bin", small_params)

    def test_missing_name(self, small_params, tmp_path):
        partial = ParamSet()
        partial.add("b", small_params["b"].data)
        save_weights(partial, tmp_path / "w.bin")
        with pytest.raises(WeightFileError, match="a.bias"):
            load_weights(tmp_path / "w.bin", small_params)

    def test_shape_mismatch(self, small_params, tmp_path):
        other = ParamSet()
        for name, p in small_params.items():
            other.add(name, np.zeros(7) if name == "b" else p.data)
        save_weights(other, tmp_path / "w.bin")
        with pytest.raises(ValueError):
            load_weights(tmp_path / "w.bin", small_params)


class TestOptimizer:
    def test_plain_gradient_descent(self, small_params):
        before = {n: p.data.copy() for n, p in small_params.items()}
        for p in small_params.values():
            p.grad = np.ones_like(p.data)
        sgd_momentum_step(small_params, {}, 0.1, 0.0, 0.0)
        for n, p in small_params.items():
            np.testing.assert_allclose(p.data, before[n] - 0.1)

    def test_zero_grad_zero_velocity(self, small_params):
        before = {n: p.data.copy() for n, p in small_params.items()}
        for p in small_params.values():
            p.grad = np.zeros_like(p.data)
        sgd_momentum_step(small_params, {}, 0.1, 0.9, 0.0)
        for n, p in small_params.items():
            np.testing.assert_array_equal(p.data, before[n])

    def test_scalar_recurrence(self):
        params = ParamSet()
        p = params.add("x", np.array([2.0]), np.float64)
        lr, m, wd = 0.1, 0.9, 0.01
        vel = {}
        # grad of 0.5 * x^2 is x
        x, v = 2.0, 0.0
        for _ in range(2):
            p.grad = p.data.copy()
            sgd_momentum_step(params, vel, lr, m, wd)
            v = m * v + x + wd * x
            x = x - lr * v
        assert p.data[0] == x
        # v1 = 2.02, x1 = 1.798; v2 = 0.9*2.02 + 1.01*1.798
        assert x == pytest.approx(1.798 - 0.1 * (0.9 * 2.02 + 1.01 * 1.798), rel=1e-12)

    def test_missing_grad(self, small_params):
        with pytest.raises(ValueError, match="no gradient"):
            sgd_momentum_step(small_params, {}, 0.1, 0.9, 0.0)

    def test_schedule(self, small_params):
        opt = MomentumSGD(small_params, ((3, 0.1), (2, 0.01)))
        assert [opt.lr_at(i) for i in range(7)] == [0.1, 0.1, 0.1, 0.01, 0.01, 0.01, 0.01]
