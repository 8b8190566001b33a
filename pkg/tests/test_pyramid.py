"""FPN baseline, dense fusion and the ablation switches."""

import numpy as np
import pytest

from densefpn import Tensor, ops
from densefpn.backbone import BackboneConfig, BackboneFeatures, backbone_forward, build_backbone
from densefpn.pyramid import (
    ABLATION_CONFIGS,
    FusionConfig,
    build_fpn_params,
    dmffpn_forward,
    fpn_baseline,
    fpn_param_count,
    fusion_input_channels,
    make_p6,
)
from densefpn.tensor import ShapeError

BB = BackboneConfig((8, 8, 16, 16))


def features(seed, size=64, dtype=np.float32):
    rng = np.random.default_rng(seed)
    params = build_backbone(BB, seed, dtype)
    img = Tensor(rng.uniform(0, 1, (1, 3, size, size)).astype(dtype))
    return backbone_forward(img, params, BB)


def shared_params(seed, out=8):
    """Parameter superset covering every configuration (concat and add differ only in fuse width)."""
    full = build_fpn_params(BB.stage_channels, FusionConfig(out_channels=out), seed)
    add = build_fpn_params(BB.stage_channels, FusionConfig(fusion_mode="add", out_channels=out), seed)
    return full, add


class TestConfig:
    def test_ablation_rows(self):
        rows = {(kw["dense_to_p2"], kw["dense_to_p3"], kw["fusion_mode"]) for kw in ABLATION_CONFIGS.values()}
        assert rows == {(False, True, "concat"), (True, False, "concat"), (True, True, "concat"),
                        (True, True, "add")}

    def test_invalid(self):
        with pytest.raises(ValueError):
            FusionConfig(out_channels=0)
        with pytest.raises(ValueError):
            FusionConfig(fusion_mode="sum")

    def test_fusion_widths(self):
        cat = FusionConfig()
        add = FusionConfig(fusion_mode="add")
        assert fusion_input_channels(2, cat) == 1024
        assert fusion_input_channels(3, cat) == 768
        assert fusion_input_channels(2, add) == 256
        assert fusion_input_channels(3, add) == 256

    @pytest.mark.parametrize("name", list(ABLATION_CONFIGS))
    def test_param_count_matches_closed_form(self, name):
        cfg = FusionConfig(**ABLATION_CONFIGS[name])
        chans = (256, 512, 1024, 2048)
        assert build_fpn_params(chans, cfg, 0).count() == fpn_param_count(chans, cfg)

    def test_param_counts_distinct(self):
        counts = {fpn_param_count((16, 32, 64, 128), FusionConfig(**kw)) for kw in ABLATION_CONFIGS.values()}
        assert len(counts) == 4


class TestBaseline:
    def test_extents_and_channels(self):
        p = fpn_baseline(features(0), shared_params(0)[0])
        assert [t.shape[2] for t in p.levels()] == [16, 8, 4, 2]
        assert {t.shape[1] for t in p.levels()} == {8}
        assert p.p6 is None

    def test_zero_in_zero_out(self):
        zero = BackboneFeatures(*[Tensor(np.zeros((1, c, s, s), np.float32))
                                  for c, s in zip(BB.stage_channels, (16, 8, 4, 2))])
        params = shared_params(0)[0]
        for name, p in params.items():
            p.assign(np.zeros(p.shape))
        for t in fpn_baseline(zero, params, add_p6=True).levels():
            assert not t.data.any()

    def test_p5_formula(self):
        feats = features(1)
        params = shared_params(1)[0]
        conv = lambda x, n: ops.conv2d(x, params[f"{n}.weight"], params[f"{n}.bias"])
        expected = conv(conv(feats.c5, "fpn.lateral.c5"), "fpn.output.p5")
        np.testing.assert_array_equal(fpn_baseline(feats, params).p5.data, expected.data)

    def test_p4_uses_pre_smoothing_top_down(self):
        feats = features(2)
        params = shared_params(2)[0]
        conv = lambda x, n: ops.conv2d(x, params[f"{n}.weight"], params[f"{n}.bias"])
        merged = ops.add(conv(feats.c4, "fpn.lateral.c4"),
                         ops.bilinear_upsample(conv(feats.c5, "fpn.lateral.c5"), 2))
        np.testing.assert_array_equal(fpn_baseline(feats, params).p4.data,
                                      conv(merged, "fpn.output.p4").data)


class TestDenseFusion:
    @pytest.mark.parametrize("seed", range(5))
    def test_toggles_off_equals_baseline(self, seed):
        feats = features(seed)
        params = shared_params(seed)[0]
        off = FusionConfig(False, False, "concat", out_channels=8, add_p6=False)
        got = dmffpn_forward(feats, off, params)
        ref = fpn_baseline(feats, params)
        for a, b in zip(got.levels(), ref.levels()):
            np.testing.assert_array_equal(a.data, b.data)

    def test_upper_levels_stable_and_locality(self):
        feats = features(3)
        cat, add = shared_params(3)
        ref = fpn_baseline(feats, cat)
        for name, kw in ABLATION_CONFIGS.items():
            cfg = FusionConfig(out_channels=8, add_p6=False, **kw)
            out = dmffpn_forward(feats, cfg, add if cfg.fusion_mode == "add" else cat)
            np.testing.assert_array_equal(out.p4.data, ref.p4.data)
            np.testing.assert_array_equal(out.p5.data, ref.p5.data)
            for lvl, flag in ((2, cfg.dense_to_p2), (3, cfg.dense_to_p3)):
                same = np.array_equal(getattr(out, f"p{lvl}").data, getattr(ref, f"p{lvl}").data)
                assert same != flag, (name, lvl)

    def test_concat_is_figure_wiring(self):
        feats = features(4)
        params = shared_params(4)[0]
        cfg = FusionConfig(True, False, "concat", out_channels=8, add_p6=False)
        conv = lambda x, n: ops.conv2d(x, params[f"{n}.weight"], params[f"{n}.bias"])
        base = fpn_baseline(feats, params)
        terms = [ops.bilinear_upsample(conv(c, f"dense.p2.from_c{j}"), 2 ** (j - 2))
                 for j, c in zip((3, 4, 5), (feats.c3, feats.c4, feats.c5))]
        merged = ops.concat_channels(terms + [base.p2])
        assert merged.shape[1] == 4 * 8
        expected = conv(merged, "dense.p2.fuse")
        np.testing.assert_array_equal(dmffpn_forward(feats, cfg, params).p2.data, expected.data)

    def test_add_mode_sums(self):
        feats = features(5)
        params = shared_params(5)[1]
        cfg = FusionConfig(False, True, "add", out_channels=8, add_p6=False)
        conv = lambda x, n: ops.conv2d(x, params[f"{n}.weight"], params[f"{n}.bias"])
        base = fpn_baseline(feats, params)
        total = base.p3.data.copy()
        for j, c in zip((4, 5), (feats.c4, feats.c5)):
            total = total + ops.bilinear_upsample(conv(c, f"dense.p3.from_c{j}"), 2 ** (j - 3)).data
        expected = conv(Tensor(total), "dense.p3.fuse").data
        np.testing.assert_allclose(dmffpn_forward(feats, cfg, params).p3.data, expected, rtol=1e-5, atol=1e-6)

    def test_channel_invariant(self):
        feats = features(6)
        cat, add = shared_params(6)
        for kw in ABLATION_CONFIGS.values():
            cfg = FusionConfig(out_channels=8, **kw)
            out = dmffpn_forward(feats, cfg, add if cfg.fusion_mode == "add" else cat)
            assert {t.shape[1] for t in out.levels()} == {8}
            assert out.p6.shape[2:] == (1, 1)

    def test_mode_param_mismatch(self):
        feats = features(7)
        cat, _ = shared_params(7)
        with pytest.raises(ShapeError, match="input channels"):
            dmffpn_forward(feats, FusionConfig(fusion_mode="add", out_channels=8), cat)

    def test_missing_fusion_params(self):
        feats = features(7)
        plain = build_fpn_params(BB.stage_channels, FusionConfig(False, False, out_channels=8), 0)
        with pytest.raises(KeyError):
            dmffpn_forward(feats, FusionConfig(out_channels=8), plain)

    def test_backbone_channel_mismatch(self):
        feats = features(8)
        wrong = build_fpn_params((4, 4, 4, 4), FusionConfig(out_channels=8), 0)
        with pytest.raises(ShapeError):
            fpn_baseline(feats, wrong)


class TestP6:
    def test_halves(self):
        assert make_p6(Tensor(np.zeros((1, 3, 2, 2)))).shape == (1, 3, 1, 1)

    def test_constant(self):
        np.testing.assert_array_equal(make_p6(Tensor(np.full((1, 2, 4, 4), 3.0))).data, 3.0)

    def test_odd_rejected(self):
        with pytest.raises(ShapeError):
            make_p6(Tensor(np.zeros((1, 1, 3, 3))))
