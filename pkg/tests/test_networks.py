import numpy as np
import pytest

from anisoseg import attention as A
from anisoseg import networks as N
from anisoseg import tensor as T
from anisoseg.tensor import Tensor, grad_check


def toy_cfg(**kw):
    base = dict(levels=3, base_channels=4, slices=4, num_classes=3)
    base.update(kw)
    return N.BackboneConfig(**base)


class TestConvBlock:
    def test_spatial_size_preserved(self):
        rng = np.random.default_rng(0)
        blk = N.init_conv_block(2, 5, rng)
        out = N.conv_block(Tensor(rng.standard_normal((3, 2, 8, 8))), blk)
        assert out.shape == (3, 5, 8, 8)

    def test_zero_input_deterministic(self):
        rng = np.random.default_rng(1)
        blk = N.init_conv_block(1, 3, rng)
        a = N.conv_block(Tensor(np.zeros((2, 1, 4, 4))), blk)
        b = N.conv_block(Tensor(np.zeros((2, 1, 4, 4))), blk)
        assert np.array_equal(a.data, b.data)

    def test_grad_check_tiny_input(self):
        rng = np.random.default_rng(2)
        blk = N.init_conv_block(1, 2, rng)
        x = Tensor(rng.standard_normal((2, 1, 4, 4)), requires_grad=True)
        err = grad_check(
            lambda t: T.reduce_sum(T.sigmoid(N.conv_block(t, blk))), x,
            eps=1e-6)
        assert err < 1e-4


class TestEncoder:
    def test_halving_spatial_sizes(self):
        cfg = toy_cfg(levels=4, slices=4)
        model = N.SegNet(cfg, rng=np.random.default_rng(3))
        feats = model.encode(Tensor(np.random.default_rng(4)
                                    .standard_normal((4, 1, 32, 32))))
        assert len(feats) == 4
        assert [f.shape[2] for f in feats] == [32, 16, 8, 4]
        assert [f.shape[1] for f in feats] == [4, 8, 16, 32]

    def test_outputs_finite(self):
        cfg = toy_cfg()
        model = N.SegNet(cfg, rng=np.random.default_rng(5))
        feats = model.encode(Tensor(np.random.default_rng(6)
                                    .standard_normal((4, 1, 16, 16))))
        for f in feats:
            assert np.all(np.isfinite(f.data))

    def test_non_divisible_rejected(self):
        model = N.SegNet(toy_cfg(), rng=np.random.default_rng(7))
        with pytest.raises(T.ShapeError):
            model.encode(Tensor(np.zeros((4, 1, 18, 18))))

    def test_wrong_slice_count_rejected(self):
        model = N.SegNet(toy_cfg(), rng=np.random.default_rng(8))
        with pytest.raises(T.ShapeError):
            model.encode(Tensor(np.zeros((5, 1, 16, 16))))


class TestUnetForward:
    def test_output_shape(self):
        cfg = N.BackboneConfig(levels=4, base_channels=8, slices=8,
                               num_classes=3)
        model = N.SegNet(cfg, rng=np.random.default_rng(9))
        x = Tensor(np.random.default_rng(10).standard_normal((8, 1, 32, 32)))
        logits, records = model.forward(x, mode="eval")
        assert logits.shape == (8, 3, 32, 32)
        assert len(records) == 4

    def test_eval_mode_deterministic(self):
        model = N.SegNet(toy_cfg(), rng=np.random.default_rng(11))
        x = Tensor(np.random.default_rng(12).standard_normal((4, 1, 16, 16)))
        a, _ = model.forward(x, mode="eval")
        b, _ = model.forward(x, mode="eval")
        assert np.array_equal(a.data, b.data)

    def test_disabled_csam_equals_plain_unet(self):
        cfg = toy_cfg(csam_enabled=[False, False, False])
        model = N.SegNet(cfg, rng=np.random.default_rng(13))
        x = Tensor(np.random.default_rng(14).standard_normal((4, 1, 16, 16)))
        gated, _ = model.forward(x, mode="eval")
        plain = model.forward_plain(x)
        assert np.array_equal(gated.data, plain.data)

    def test_grad_check_toy(self):
        cfg = N.BackboneConfig(levels=3, base_channels=2, slices=2,
                               num_classes=2, rank=2)
        model = N.SegNet(cfg, rng=np.random.default_rng(15))
        rng = np.random.default_rng(16)
        x = Tensor(rng.standard_normal((2, 1, 8, 8)), requires_grad=True)
        noise = [(rng.standard_normal(2), rng.standard_normal(2))
                 for _ in range(3)]

        def f(t):
            logits, _ = model.forward(t, mode="train", noise=noise)
            return T.reduce_sum(T.sigmoid(logits))

        assert grad_check(f, x, max_coords=24, rng=rng) < 1e-4


class TestUnetppForward:
    def test_node_set_for_three_levels(self):
        cfg = toy_cfg(wiring="unetpp")
        model = N.SegNet(cfg, rng=np.random.default_rng(17))
        assert set(model.decoder) == {(0, 1), (0, 2), (1, 1)}

    def test_output_shape_matches_unet(self):
        rng_x = np.random.default_rng(18)
        x = Tensor(rng_x.standard_normal((4, 1, 16, 16)))
        a = N.SegNet(toy_cfg(), rng=np.random.default_rng(19))
        b = N.SegNet(toy_cfg(wiring="unetpp"), rng=np.random.default_rng(19))
        la, _ = a.forward(x, mode="eval")
        lb, _ = b.forward(x, mode="eval")
        assert la.shape == lb.shape

    def test_disabled_csam_equals_plain_unetpp(self):
        cfg = toy_cfg(wiring="unetpp", csam_enabled=[False] * 3)
        model = N.SegNet(cfg, rng=np.random.default_rng(20))
        x = Tensor(np.random.default_rng(21).standard_normal((4, 1, 16, 16)))
        gated, _ = model.forward(x, mode="eval")
        plain = model.forward_plain(x)
        assert np.array_equal(gated.data, plain.data)


class TestParameterAccounting:
    def test_csam_delta_equals_formula(self):
        cfg_on = toy_cfg()
        cfg_off = toy_cfg(csam_enabled=[False] * 3)
        on = N.SegNet(cfg_on, rng=np.random.default_rng(22))
        off = N.SegNet(cfg_off, rng=np.random.default_rng(22))
        delta = on.parameter_count() - off.parameter_count()
        assert delta == N.expected_csam_total(cfg_on)
        assert delta == on.csam_parameter_count()

    def test_default_overhead_below_two_percent(self):
        cfg = N.BackboneConfig()  # default desk-scale configuration
        model = N.SegNet(cfg, rng=np.random.default_rng(23))
        overhead = model.csam_parameter_count() / model.backbone_parameter_count()
        assert overhead < 0.02


class TestPipelineTaxonomy:
    def test_pure_2d_not_2p5d(self):
        assert not N.is_2p5d(N.PipelineConfig())

    def test_stack_form(self):
        assert N.is_2p5d(N.PipelineConfig(f_pre="stack", n_neighbors=1))

    def test_mid_attention_form(self):
        assert N.is_2p5d(N.PipelineConfig(f_mid="csam"))

    def test_post_attention_form(self):
        assert N.is_2p5d(N.PipelineConfig(f_post="slice_attention"))

    def test_general_form_multiple_stages(self):
        assert N.is_2p5d(N.PipelineConfig(f_pre="stack", f_mid="csam",
                                          f_post="slice_attention"))


class TestFPreStack:
    def test_boundary_replication(self):
        x = Tensor(np.arange(3.0).reshape(3, 1, 1, 1))
        out = N.f_pre_stack(x, 1)
        assert out.shape == (3, 3, 1, 1)
        # slice 0 sees [replicated 0, itself, slice 1]
        assert list(out.data[0, :, 0, 0]) == [0.0, 0.0, 1.0]
        assert list(out.data[2, :, 0, 0]) == [1.0, 2.0, 2.0]

    def test_middle_channel_is_original(self):
        rng = np.random.default_rng(24)
        x = Tensor(rng.standard_normal((5, 2, 3, 3)))
        out = N.f_pre_stack(x, 1)
        np.testing.assert_array_equal(out.data[:, 2:4], x.data)

    def test_zero_neighbors_rejected(self):
        with pytest.raises(ValueError):
            N.f_pre_stack(Tensor(np.zeros((3, 1, 2, 2))), 0)

    def test_too_many_neighbors_rejected(self):
        with pytest.raises(ValueError):
            N.f_pre_stack(Tensor(np.zeros((3, 1, 2, 2))), 3)


class TestFPostSliceAttention:
    def test_zero_weight_eval_halves_logits(self):
        gate = A.init_slice_gate(4, 2, 2.0, np.random.default_rng(25))
        for _, t in gate.tensors():
            t.data = np.zeros_like(t.data)
        logits = Tensor(np.random.default_rng(26).standard_normal((4, 3, 6, 6)))
        out, _, _, _ = N.f_post_slice_attention(logits, gate, "eval")
        np.testing.assert_array_equal(out.data, 0.5 * logits.data)

    def test_shape_preserved_and_gate_identity(self):
        rng = np.random.default_rng(27)
        gate = A.init_slice_gate(4, 2, 2.0, rng)
        logits = Tensor(rng.standard_normal((4, 3, 6, 6)))
        out, m_slice, _, _ = N.f_post_slice_attention(logits, gate, "eval")
        assert out.shape == logits.shape
        np.testing.assert_array_equal(out.data, m_slice.data * logits.data)


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        cfg = toy_cfg(wiring="unetpp")
        model = N.SegNet(cfg, rng=np.random.default_rng(28))
        path = tmp_path / "model.ckpt"
        N.save_checkpoint(model, path)
        loaded = N.load_checkpoint(path)
        for (na, ta), (nb, tb) in zip(model.named_parameters(),
                                      loaded.named_parameters()):
            assert na == nb
            assert np.array_equal(ta.data, tb.data)
        x = Tensor(np.random.default_rng(29).standard_normal((4, 1, 16, 16)))
        la, _ = model.forward(x, mode="eval")
        lb, _ = loaded.forward(x, mode="eval")
        assert np.array_equal(la.data, lb.data)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 32)
        with pytest.raises(N.CheckpointError):
            N.load_checkpoint(p)

    def test_truncated(self, tmp_path):
        cfg = toy_cfg()
        model = N.SegNet(cfg, rng=np.random.default_rng(30))
        p = tmp_path / "model.ckpt"
        N.save_checkpoint(model, p)
        raw = p.read_bytes()
        p.write_bytes(raw[:len(raw) // 2])
        with pytest.raises(N.CheckpointError):
            N.load_checkpoint(p)
