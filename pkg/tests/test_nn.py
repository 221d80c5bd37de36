import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from remem import tensor as T
from remem.distill import kd_loss
from remem.errors import ParameterError, ShapeError
from remem.nn import (LoraConfig, ReMemConfig, VitConfig, VitModel, effective_weight, forward, lora_forward,
                      patchify, predict)
from remem.tensor import Tensor

TINY = VitConfig(image_size=8, patch_size=4, channels=3, d_embed=8, d_mlp=16, n_heads=2, n_layers=2, n_classes=3)


def images(n=4, cfg=TINY, seed=0):
    return np.random.default_rng(seed).random((n, cfg.channels, cfg.image_size, cfg.image_size)).astype(np.float32)


def silence_blocks(model):
    """Zero every attention and MLP output projection so each sublayer outputs 0."""
    for l in range(model.config.n_layers):
        for name in ("attn.o.w", "attn.o.b", "mlp.w2", "mlp.b2"):
            model[f"layers.{l}.{name}"].data[...] = 0


class TestConfig:
    def test_defaults_are_valid(self):
        c = VitConfig()
        assert c.n_tokens == c.n_patches + 1

    @pytest.mark.parametrize("kw", [{"patch_size": 3}, {"n_heads": 3}, {"d_embed": 0}])
    def test_invalid(self, kw):
        with pytest.raises(ParameterError):
            VitConfig(**kw)

    def test_remem_ranges(self):
        with pytest.raises(ParameterError):
            ReMemConfig(alpha_mlp=1.2).validate(4)
        with pytest.raises(ParameterError):
            ReMemConfig(prune_mlp_top_k=5).validate(4)


class TestForward:
    def test_shapes(self):
        m = VitModel(TINY, seed=0)
        out = forward(m, None, images(5))
        assert out.logits.shape == (5, 3)
        assert out.cls_embedding.shape == (5, 8)
        assert [a.shape for a in out.mlp_activations] == [(5, 5, 16)] * 2

    def test_bad_image_shape(self):
        with pytest.raises(ShapeError):
            forward(VitModel(TINY), None, np.zeros((2, 3, 9, 9)))

    def test_seed_determinism(self):
        a = predict(VitModel(TINY, seed=3), None, images())
        b = predict(VitModel(TINY, seed=3), None, images())
        assert np.array_equal(a, b)

    def test_alpha_one_bit_equals_baseline(self):
        m = VitModel(TINY, seed=1)
        x = images(6)
        base = forward(m, None, x)
        same = forward(m, ReMemConfig(1.0, 1.0, 0, 0), x)
        assert np.array_equal(base.logits.data, same.logits.data)
        assert np.array_equal(base.cls_embedding.data, same.cls_embedding.data)

    def test_activations_nonnegative(self):
        out = forward(VitModel(TINY, seed=2), None, images())
        assert all((a.data >= 0).all() for a in out.mlp_activations)

    def test_patchify_row_major(self):
        x = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
        p = patchify(x, 2)
        assert p.shape == (1, 4, 8)
        # top-right patch, channel 0 then channel 1
        assert p[0, 1].tolist() == [2, 3, 6, 7, 18, 19, 22, 23]

    def test_batch_independence(self):
        m = VitModel(TINY, seed=4)
        x = images(6)
        whole = predict(m, None, x)
        parts = predict(m, None, x, batch_size=4)
        np.testing.assert_allclose(whole, parts, rtol=1e-6, atol=1e-6)


class TestReweighting:
    @pytest.mark.parametrize("alpha", [0.5, 0.8, 0.9, 1.0])
    def test_silenced_blocks_scale_residual(self, alpha):
        with T.precision64():
            m = VitModel(TINY, seed=0, dtype=np.float64)
            silence_blocks(m)
            x = images()
            base = forward(m, None, x).residual_cls.data
            out = forward(m, ReMemConfig(alpha, alpha), x).residual_cls.data
        L = TINY.n_layers
        np.testing.assert_allclose(out, base * (2 - alpha) ** (2 * L), rtol=1e-12)

    @pytest.mark.parametrize("layer", [1, 2, 3, 4])
    def test_effective_weight_of_single_mlp_output(self, layer):
        # only the MLP of `layer` writes a constant c; the residual picks it up
        # scaled by alpha (2 - alpha)^(L - layer)
        cfg = VitConfig(image_size=8, patch_size=4, d_embed=8, d_mlp=16, n_heads=2, n_layers=4, n_classes=3)
        alpha = 0.8
        with T.precision64():
            m = VitModel(cfg, seed=0, dtype=np.float64)
            silence_blocks(m)
            c = np.linspace(-1, 1, 8)
            m[f"layers.{layer - 1}.mlp.b2"].data[...] = c
            x = images(3, cfg)
            on = forward(m, ReMemConfig(alpha_mlp=alpha), x).residual_cls.data
            m[f"layers.{layer - 1}.mlp.b2"].data[...] = 0
            off = forward(m, ReMemConfig(alpha_mlp=alpha), x).residual_cls.data
        np.testing.assert_allclose(on - off, np.broadcast_to(c * effective_weight(alpha, layer, 4), on.shape),
                                   rtol=1e-10, atol=1e-12)

    def test_effective_weight_values(self):
        assert effective_weight(0.8, 12, 12) == 0.8
        assert abs(effective_weight(0.8, 1, 12) - 0.8 * 1.2 ** 11) < 1e-12
        assert effective_weight(1.0, 3, 12) == 1.0
        with pytest.raises(ParameterError):
            effective_weight(0.8, 0, 12)

    @settings(max_examples=30, deadline=None)
    @given(st.floats(0.0, 1.0), st.integers(1, 11))
    def test_effective_weight_grows_toward_bottom(self, alpha, layer):
        assert effective_weight(alpha, layer, 12) >= effective_weight(alpha, layer + 1, 12) - 1e-15


class TestPruning:
    def test_pruned_mlp_has_no_activations(self):
        out = forward(VitModel(TINY), ReMemConfig(prune_mlp_top_k=1), images())
        assert out.mlp_activations[0] is not None and out.mlp_activations[1] is None

    def test_pruned_block_equals_zeroed_block(self):
        m = VitModel(TINY, seed=5)
        x = images()
        pruned = forward(m, ReMemConfig(prune_mlp_top_k=1, prune_attn_top_k=2), x).logits.data
        z = m.copy()
        for name in ("layers.1.mlp.w2", "layers.1.mlp.b2", "layers.0.attn.o.w", "layers.0.attn.o.b",
                     "layers.1.attn.o.w", "layers.1.attn.o.b"):
            z[name].data[...] = 0
        np.testing.assert_allclose(pruned, forward(z, None, x).logits.data, rtol=1e-6, atol=1e-7)

    def test_pruning_ignores_alpha(self):
        # a pruned block keeps a plain identity residual even when alpha < 1
        m = VitModel(TINY, seed=5)
        x = images()
        a = forward(m, ReMemConfig(alpha_mlp=0.5, prune_mlp_top_k=2), x).logits.data
        b = forward(m, ReMemConfig(alpha_mlp=1.0, prune_mlp_top_k=2), x).logits.data
        assert np.array_equal(a, b)


class TestLora:
    def test_zero_b_is_identity(self):
        m = VitModel(TINY, seed=0)
        x = images()
        before = predict(m, None, x)
        m.attach_lora(LoraConfig(rank=4, alpha=8), seed=1)
        assert np.array_equal(before, predict(m, None, x))

    def test_only_factors_train(self):
        m = VitModel(TINY, seed=0)
        m.attach_lora(LoraConfig(rank=2), seed=1)
        names = {p.name for p in m.parameters()}
        assert names and all(".lora_" in n for n in names)
        assert len(names) == 2 * 2 * TINY.n_layers

    def test_merge_preserves_outputs(self):
        m = VitModel(TINY, seed=0)
        m.attach_lora(LoraConfig(rank=4, alpha=8), seed=1)
        rng = np.random.default_rng(2)
        for p in m.parameters():
            p.data = rng.normal(0, 0.1, p.shape).astype(p.data.dtype)
        x = images()
        before = predict(m, None, x)
        m.merge_lora()
        np.testing.assert_allclose(predict(m, None, x), before, rtol=1e-4, atol=1e-5)

    def test_lora_forward_formula(self):
        rng = np.random.default_rng(0)
        x, w, b = rng.normal(size=(3, 5)), rng.normal(size=(5, 4)), rng.normal(size=4)
        a, bb = rng.normal(size=(2, 5)), rng.normal(size=(4, 2))
        with T.precision64():
            out = lora_forward(Tensor(x), Tensor(w), Tensor(b), Tensor(a), Tensor(bb), 1.5).data
        np.testing.assert_allclose(out, x @ w + b + 1.5 * (x @ a.T) @ bb.T, rtol=1e-12)

    def test_rank_bounds(self):
        with pytest.raises(ParameterError):
            VitModel(TINY).attach_lora(LoraConfig(rank=9))

    def test_lora_shapes(self):
        with pytest.raises(ShapeError):
            lora_forward(Tensor(np.ones((1, 5))), Tensor(np.ones((5, 4))), None,
                         Tensor(np.ones((2, 4))), Tensor(np.ones((4, 2))), 1.0)


def test_full_vit_with_kd_loss_gradcheck():
    rng = np.random.default_rng(0)
    with T.precision64():
        m = VitModel(TINY, seed=0, dtype=np.float64)
        for p in m.parameters():  # move off the init so every path carries gradient
            p.data = p.data + rng.normal(0, 0.1, p.shape)
        x = rng.random((2, 3, 8, 8))
        teacher = rng.normal(size=(2, 3))
        y = np.array([0, 2])
        remem = ReMemConfig(alpha_mlp=0.8, alpha_attn=0.9)
        err = T.grad_check(lambda: kd_loss(forward(m, remem, x).logits, teacher, y, 0.3, 2.0), m.parameters())
    assert err < 1e-4
