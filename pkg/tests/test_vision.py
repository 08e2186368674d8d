import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hiresvlm.errors import ConfigurationError, InputError
from hiresvlm.tensor import MulLedger, Rng, Tensor, backward, finite_difference_grad, sum_
from hiresvlm.vision import (
    EncoderNorms,
    LoraAdapter,
    LoraLayer,
    VisionEncoder,
    VisionTransformer,
    VitGeometry,
    encode,
    lora_apply,
    resize_bilinear,
    split_image,
    vit_forward,
)

TOY = VitGeometry(base_resolution=28, patch_size=14, d_vit=16, layers=2, heads=2, target_resolution=56)


def random_image(size, seed=0, channels=3):
    return Rng(seed).uniform((size, size, channels))


def perturb_adapter(adapter, rng, std=0.1):
    for layer in adapter.layers.values():
        layer.B.data = rng.normal(layer.B.shape, std=std)


class TestGeometry:
    def test_672_config(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=8, layers=1, heads=1, target_resolution=672)
        assert g.tokens_per_image == 257
        assert g.num_subimages == 10
        assert g.total_tokens == 2570
        assert g.full_resolution_tokens == 2305
        assert (g.full_resolution_tokens - 1) // (g.num_subimages - 1) + 1 == g.tokens_per_image

    @pytest.mark.parametrize("base,patch,k", [(28, 14, 2), (28, 7, 3), (42, 14, 2), (56, 14, 4), (224, 14, 3), (224, 14, 2)])
    def test_token_arithmetic_sweep(self, base, patch, k):
        g = VitGeometry(base_resolution=base, patch_size=patch, target_resolution=k * base, d_vit=4, heads=1)
        assert g.total_tokens == (k * k + 1) * ((base // patch) ** 2 + 1)
        n = g.full_resolution_tokens
        assert (n - 1) % (g.num_subimages - 1) == 0
        assert (n - 1) // (g.num_subimages - 1) + 1 == g.tokens_per_image

    def test_invalid(self):
        with pytest.raises(ConfigurationError):
            VitGeometry(base_resolution=30, patch_size=14)
        with pytest.raises(ConfigurationError):
            VitGeometry(base_resolution=28, patch_size=14, target_resolution=70)


class TestSplit:
    def test_672_gives_nine_locals(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=8, heads=1, target_resolution=672)
        views = split_image(random_image(672), g)
        assert views.global_view.shape == (224, 224, 3)
        assert len(views.locals) == 9

    def test_single_image_mode(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=8, heads=1, target_resolution=224)
        img = random_image(224)
        views = split_image(img, g)
        assert views.locals == []
        np.testing.assert_array_equal(views.global_view, img)

    def test_448_reference_tiler(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=8, heads=1, target_resolution=448)
        img = random_image(448, seed=5)
        views = split_image(img, g)
        assert len(views.locals) == 4
        for idx, tile in enumerate(views.locals):
            r, c = divmod(idx, 2)
            np.testing.assert_array_equal(tile, img[224 * r:224 * r + 224, 224 * c:224 * c + 224])

    def test_errors(self):
        with pytest.raises(InputError):
            split_image(np.zeros((0, 10, 3)), TOY)
        with pytest.raises(InputError):
            split_image(np.zeros((20, 20, 3)), TOY)

    def test_bilinear_downscale_by_two_averages_blocks(self):
        img = random_image(8, seed=2)
        out = resize_bilinear(img, 4, 4)
        ref = img.reshape(4, 2, 4, 2, 3).mean(axis=(1, 3))
        np.testing.assert_allclose(out, ref, rtol=1e-14)

    def test_bilinear_constant(self):
        out = resize_bilinear(np.full((5, 7, 3), 0.25), 11, 3)
        np.testing.assert_allclose(out, 0.25)


class TestLora:
    def test_zero_b_is_frozen_output(self):
        rng = Rng(0)
        x = Tensor(rng.normal((3, 4)))
        W, b = Tensor(rng.normal((4, 5))), Tensor(rng.normal(5))
        layer = LoraLayer(Tensor(rng.normal((4, 2))), Tensor(np.zeros((2, 5))), 16.0, 0.05)
        frozen = lora_apply(x, W, b, None)
        np.testing.assert_array_equal(lora_apply(x, W, b, layer).data, frozen.data)

    def test_dense_oracle(self):
        layer = LoraLayer(Tensor([[1.0], [0.0]]), Tensor([[0.0, 1.0]]), alpha=2.0, dropout_p=0.0)
        out = lora_apply(Tensor([[1.0, 0.0]]), Tensor(np.eye(2)), None, layer)
        np.testing.assert_array_equal(out.data, [[1.0, 2.0]])

    def test_train_vs_eval_without_dropout(self):
        rng = Rng(1)
        x = Tensor(rng.normal((3, 4)))
        W = Tensor(rng.normal((4, 4)))
        layer = LoraLayer(Tensor(rng.normal((4, 2))), Tensor(rng.normal((2, 4))), 16.0, 0.0)
        a = lora_apply(x, W, None, layer, train_mode=False)
        b = lora_apply(x, W, None, layer, train_mode=True, rng=Rng(9))
        np.testing.assert_array_equal(a.data, b.data)

    def test_dropout_only_on_branch(self):
        rng = Rng(1)
        x = Tensor(rng.normal((50, 4)))
        W = Tensor(rng.normal((4, 4)))
        layer = LoraLayer(Tensor(rng.normal((4, 2))), Tensor(np.zeros((2, 4))), 16.0, 0.5)
        out = lora_apply(x, W, None, layer, train_mode=True, rng=Rng(3))
        np.testing.assert_array_equal(out.data, (x.data @ W.data))

    def test_rank_zero(self):
        with pytest.raises(ConfigurationError):
            LoraAdapter.create(TOY, Rng(0), rank=0)
        layer = LoraLayer(Tensor(np.zeros((2, 0))), Tensor(np.zeros((0, 2))))
        with pytest.raises(ConfigurationError):
            lora_apply(Tensor(np.ones((1, 2))), Tensor(np.eye(2)), None, layer)

    def test_adapter_defaults(self):
        ad = LoraAdapter.create(TOY, Rng(0))
        assert (ad.rank, ad.alpha, ad.dropout_p) == (8, 16.0, 0.05)
        for layer in ad.layers.values():
            assert not layer.B.data.any()
            assert layer.scale == 2.0


class TestVit:
    def test_224_gives_257_tokens(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=8, layers=1, heads=1, target_resolution=224)
        vit = VisionTransformer(g, Rng(0))
        assert vit_forward(vit, random_image(224), None).shape == (257, 8)

    def test_zero_b_matches_frozen(self):
        vit = VisionTransformer(TOY, Rng(0))
        ad = LoraAdapter.create(TOY, Rng(1))
        img = random_image(28)
        np.testing.assert_array_equal(vit_forward(vit, img, ad).data, vit_forward(vit, img, None).data)

    def test_toy_ledger(self):
        g = VitGeometry(base_resolution=28, patch_size=14, d_vit=8, layers=1, heads=2, target_resolution=28)
        vit = VisionTransformer(g, Rng(0))
        led = MulLedger()
        vit_forward(vit, random_image(28), LoraAdapter.create(g, Rng(1)), led)
        assert led["projection"] == 4 * 5 * 64 == 1280
        assert led["attention_scores"] == 8 * 5 * 5
        assert led["attention_values"] == 8 * 5 * 5
        assert led["feedforward"] == 8 * 5 * 64

    def test_resolution_mismatch(self):
        vit = VisionTransformer(TOY, Rng(0))
        with pytest.raises(InputError):
            vit_forward(vit, random_image(56), None)

    def test_frozen_weights_untouched(self):
        enc = VisionEncoder.create(TOY, Rng(0))
        perturb_adapter(enc.global_adapter, Rng(5))
        before = {k: v.checksum() for k, v in enc.frozen_parameters().items()}
        for _ in range(3):
            backward(sum_(enc.encode(random_image(40), train_mode=True, rng=Rng(2)).tokens))
        assert before == {k: v.checksum() for k, v in enc.frozen_parameters().items()}
        assert all(v.grad is None for v in enc.frozen_parameters().values())


class TestEncode:
    def test_672_token_count(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=4, layers=1, heads=1, target_resolution=672)
        enc = VisionEncoder.create(g, Rng(0))
        out = enc.encode(random_image(672))
        assert len(out) == 2570
        assert out.counts == (257, 2313)

    def test_448_token_count(self):
        g = VitGeometry(base_resolution=224, patch_size=14, d_vit=4, layers=1, heads=1, target_resolution=448)
        out = VisionEncoder.create(g, Rng(0)).encode(random_image(448))
        assert len(out) == 1285

    def test_origin_order(self):
        out = VisionEncoder.create(TOY, Rng(0)).encode(random_image(56))
        n = TOY.tokens_per_image
        expected = np.concatenate([np.full(n, -1)] + [np.full(n, i) for i in range(4)])
        np.testing.assert_array_equal(out.origin, expected)

    def test_identical_tiles_identical_blocks(self):
        tile = random_image(28, seed=3)
        img = np.concatenate([np.concatenate([tile, tile], 1)] * 2, 0)
        enc = VisionEncoder.create(TOY, Rng(0))
        perturb_adapter(enc.local_adapter, Rng(1))
        tokens = enc.encode(img).tokens.data
        n = TOY.tokens_per_image
        blocks = [tokens[n * (i + 1):n * (i + 2)] for i in range(4)]
        for b in blocks[1:]:
            np.testing.assert_array_equal(b, blocks[0])

    def test_adapter_independence(self):
        img = random_image(56, seed=4)
        enc = VisionEncoder.create(TOY, Rng(0))
        perturb_adapter(enc.global_adapter, Rng(1))
        perturb_adapter(enc.local_adapter, Rng(2))
        n = TOY.tokens_per_image
        base = enc.encode(img).tokens.data
        perturb_adapter(enc.local_adapter, Rng(3))
        changed = enc.encode(img).tokens.data
        np.testing.assert_array_equal(base[:n], changed[:n])
        assert not np.array_equal(base[n:], changed[n:])
        perturb_adapter(enc.global_adapter, Rng(4))
        again = enc.encode(img).tokens.data
        np.testing.assert_array_equal(changed[n:], again[n:])

    def test_zero_init_neutrality(self):
        img = random_image(56, seed=6)
        enc = VisionEncoder.create(TOY, Rng(0))
        enc.norms.global_gain.data = np.full(TOY.d_vit, 1.5)
        enc.norms.local_bias.data = np.full(TOY.d_vit, -0.3)
        from hiresvlm.tensor import layer_norm

        views = split_image(img, TOY)
        ref = [layer_norm(vit_forward(enc.vit, views.global_view, None), enc.norms.global_gain, enc.norms.global_bias).data]
        ref += [layer_norm(vit_forward(enc.vit, t, None), enc.norms.local_gain, enc.norms.local_bias).data for t in views.locals]
        np.testing.assert_array_equal(enc.encode(img).tokens.data, np.concatenate(ref))

    def test_ledger_attention_per_subimage(self):
        led = MulLedger()
        VisionEncoder.create(TOY, Rng(0)).encode(random_image(56), led)
        n = TOY.tokens_per_image
        assert led["attention_scores"] == TOY.num_subimages * TOY.layers * TOY.d_vit * n * n

    def test_pos_embed_mismatch(self):
        enc = VisionEncoder.create(TOY, Rng(0))
        with pytest.raises(ConfigurationError):
            encode(random_image(56), TOY, enc.global_adapter, enc.local_adapter, enc.norms,
                   Tensor(np.zeros((3, TOY.d_vit))), enc.vit)

    def test_adapter_geometry_mismatch(self):
        enc = VisionEncoder.create(TOY, Rng(0))
        other = LoraAdapter.create(VitGeometry(d_vit=8, heads=2), Rng(0))
        with pytest.raises(ConfigurationError):
            encode(random_image(56), TOY, other, enc.local_adapter, enc.norms, enc.pos_embed, enc.vit)

    def test_gradients_reach_encoder_parameters(self):
        enc = VisionEncoder.create(TOY, Rng(0))
        perturb_adapter(enc.global_adapter, Rng(1))
        perturb_adapter(enc.local_adapter, Rng(2))
        enc.pos_embed.data = Rng(3).normal(enc.pos_embed.shape, std=0.1)
        img = random_image(56, seed=8)
        w = Rng(4).normal((TOY.total_tokens, TOY.d_vit))

        def f(_=None):
            t = enc.encode(img).tokens
            return sum_(t * Tensor(w) * t)

        backward(f())
        params = enc.trainable_parameters()
        for name in ("lora.global.layers.0.q.A", "lora.local.layers.1.fc2.B", "lora.local.patch.A",
                     "norm.global.g", "norm.local.b", "pos_embed"):
            p = params[name]
            idx = [tuple(int(i) for i in np.unravel_index(j, p.shape)) for j in range(0, p.size, max(1, p.size // 7))]
            fd = finite_difference_grad(f, p, 1e-5, idx)
            got = np.array([p.grad[i] for i in idx])
            want = np.array([fd[i] for i in idx])
            assert np.linalg.norm(got - want) <= 1e-6 * max(np.linalg.norm(want), 1e-12), name


@settings(max_examples=20, deadline=None)
@given(st.sampled_from([7, 14]), st.integers(1, 4), st.integers(1, 4))
def test_token_arithmetic_property(patch, per_side, k):
    base = patch * per_side
    g = VitGeometry(base_resolution=base, patch_size=patch, target_resolution=k * base, d_vit=2, heads=1)
    expected_p = 1 if k == 1 else k * k + 1
    assert g.total_tokens == expected_p * (per_side**2 + 1)
