import numpy as np
import pytest

from colodiff.denoiser import (
    VARIANTS,
    Denoiser,
    DenoiserConfig,
    attention_with_injection,
    load_denoiser,
    patchify,
    patchify_array,
    unpatchify,
    unpatchify_array,
    variant_config,
)
from colodiff.diffusion import linear_schedule
from colodiff.errors import DimensionError, ParameterError
from colodiff.numerics import Tensor, gradient_pairs, ops, precision, relative_error
from colodiff.trainer import OptimizerState, training_step

TINY = DenoiserConfig(dim=16, heads=2, depth=2, cond_dim=8, mlp_ratio=2)


def perturb(model: Denoiser, scale=0.2, seed=0):
    """Move every parameter (including the zero-initialized ones) off zero."""
    rng = np.random.default_rng(seed)
    for _, p in model.params.items():
        p.data = (p.data + scale * rng.standard_normal(p.shape)).astype(p.dtype)
    return model


def latent(rng, b=2, f=3, c=4, h=4, w=4):
    return rng.standard_normal((b, f, c, h, w)).astype(np.float32)


class TestPatchify:
    @pytest.mark.parametrize("hw,p,expected", [(2, 2, 1), (8, 4, 4), (8, 2, 16)])
    def test_patch_count(self, hw, p, expected):
        x = np.zeros((3, 4, hw, hw), np.float32)
        assert patchify_array(x, p).shape == (3, expected, 4 * p * p)

    def test_indivisible(self):
        with pytest.raises(ParameterError):
            patchify_array(np.zeros((1, 4, 6, 6), np.float32), 4)

    def test_array_round_trip_bit_exact(self):
        x = latent(np.random.default_rng(0), h=8, w=6)
        tokens = patchify_array(x, 2)
        assert np.array_equal(unpatchify_array(tokens, 2, 4, 8, 6), x)

    def test_round_trip_with_identity_projection(self):
        x = latent(np.random.default_rng(1))
        d = 4 * 2 * 2
        video = patchify(x, 2, Tensor(np.eye(d, dtype=np.float32)), Tensor(np.zeros(d, np.float32)))
        assert np.array_equal(unpatchify(video).data, x)

    def test_patch_contents(self):
        x = np.arange(2 * 4 * 4, dtype=np.float32).reshape(1, 2, 4, 4)
        tokens = patchify_array(x, 2)
        # second patch (row 0, col 1), channel 0 block
        np.testing.assert_array_equal(tokens[0, 1, :4], [2, 3, 6, 7])


class TestAttention:
    def weights(self, rng, d):
        w = {}
        for m in ("q", "k", "v", "o"):
            w[f"w{m}"] = Tensor(rng.standard_normal((d, d)).astype(np.float32) / np.sqrt(d))
            w[f"b{m}"] = Tensor(rng.standard_normal(d).astype(np.float32) * 0.1)
        return w

    def test_zero_injection_is_plain_attention(self):
        rng = np.random.default_rng(0)
        x = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
        emb = Tensor(rng.standard_normal((2, 5, 8)).astype(np.float32))
        w = self.weights(rng, 8)
        plain = attention_with_injection(x, None, None, 2, w).data
        injected = attention_with_injection(x, emb, Tensor(np.zeros(1, np.float32)), 2, w).data
        assert np.array_equal(plain, injected)

    def test_single_token(self):
        rng = np.random.default_rng(1)
        x = Tensor(rng.standard_normal((3, 1, 8)).astype(np.float32))
        emb = Tensor(rng.standard_normal((3, 1, 8)).astype(np.float32))
        lam = Tensor(np.array([0.7], np.float32))
        w = self.weights(rng, 8)
        out, att = attention_with_injection(x, emb, lam, 4, w, return_weights=True)
        assert np.all(att.data == 1.0)
        v = x.data @ w["wv"].data + w["bv"].data + 0.7 * emb.data
        np.testing.assert_allclose(out.data, v @ w["wo"].data + w["bo"].data, rtol=1e-5, atol=1e-6)

    def test_weight_rows_sum_to_one(self):
        rng = np.random.default_rng(2)
        x = Tensor(rng.standard_normal((2, 3, 7, 8)).astype(np.float32))
        _, att = attention_with_injection(x, None, None, 2, self.weights(rng, 8), return_weights=True)
        np.testing.assert_allclose(att.data.sum(axis=-1), 1.0, atol=1e-6)

    def test_head_mismatch(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ParameterError):
            attention_with_injection(Tensor(np.zeros((1, 2, 6), np.float32)), None, None, 4, self.weights(rng, 6))


class TestIdentityAtInit:
    @pytest.mark.parametrize("block", ["spatial_block", "timestream_block"])
    @pytest.mark.parametrize("frames", [1, 3])
    def test_block_is_identity(self, block, frames):
        model = Denoiser(TINY)
        rng = np.random.default_rng(0)
        z = latent(rng, f=frames)
        video = model.patchify(z)
        cond = model.condition([0, 2], [5, 200], video.tokens)
        out = getattr(model, block)(video.tokens, cond, "blocks.0.a")
        assert out.shape == video.tokens.shape
        assert np.array_equal(out.data, video.tokens.data)

    def test_output_independent_of_condition(self):
        model = Denoiser(TINY)
        z = latent(np.random.default_rng(1))
        a = model(z, [1, 250], [0, 1])
        b = model(z, [77, 3], [2, 2])
        assert a.shape == z.shape
        assert np.array_equal(a, b)

    @pytest.mark.parametrize("variant", sorted(VARIANTS))
    def test_every_variant(self, variant):
        model = Denoiser(variant_config(TINY, variant))
        z = latent(np.random.default_rng(2))
        assert np.array_equal(model(z, 10, [0, 1]), model(z, 240, [2, 0]))

    def test_zero_embedder_gives_zero_embedding(self):
        model = Denoiser(TINY)
        for name in ("embed.fc2.w", "embed.fc2.b"):
            model.params[name].data[...] = 0
        assert not np.any(model.embed_noisy(Tensor(np.zeros((1, 2, 4, 16), np.float32))).data)

    def test_embedding_shape(self):
        model = Denoiser(TINY)
        tokens = Tensor(np.random.default_rng(3).standard_normal((2, 3, 4, 16)).astype(np.float32))
        assert model.embed_noisy(tokens).shape == tokens.shape


class TestStructure:
    def test_interleaving_trace(self):
        model = Denoiser(DenoiserConfig(dim=16, heads=2, depth=4, cond_dim=8))
        model.trace = []
        model(latent(np.random.default_rng(0), b=1), 3, [0])
        assert model.trace == ["spatial", "timestream"] * 4

    def test_spatial_only_trace(self):
        model = Denoiser(variant_config(TINY, "spatial_only"))
        model.trace = []
        model(latent(np.random.default_rng(0), b=1), 3, [0])
        assert model.trace == ["spatial"] * 4

    def test_parameter_count_depends_only_on_geometry(self):
        a = Denoiser(DenoiserConfig(seed=0)).parameter_count()
        b = Denoiser(DenoiserConfig(seed=9)).parameter_count()
        assert a == b == Denoiser(variant_config(DenoiserConfig(), "spatial_only")).parameter_count()

    def test_prototype_table(self):
        model = Denoiser(TINY)
        assert model.params["prototypes"].shape == (TINY.num_classes, TINY.cond_dim)
        assert model.params["prototypes"].requires_grad

    def test_onehot_encoding(self):
        model = Denoiser(variant_config(TINY, "onehot"))
        np.testing.assert_array_equal(model.class_encoding([0, 2]).data, np.eye(3, 8)[[0, 2]])

    def test_invalid_label(self):
        model = Denoiser(TINY)
        with pytest.raises(ParameterError):
            model(latent(np.random.default_rng(0), b=1), 3, [3])

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            Denoiser(TINY)(latent(np.random.default_rng(0), c=3), 3, [0, 1])

    def test_unknown_variant(self):
        with pytest.raises(ParameterError):
            variant_config(TINY, "bogus")

    def test_shared_names_give_identical_init(self):
        a = Denoiser(variant_config(TINY, "content_aware"))
        b = Denoiser(variant_config(TINY, "spatial_only"))
        for name, p in a.params.items():
            assert np.array_equal(p.data, b.params[name].data)

    def test_save_load(self, tmp_path):
        model = perturb(Denoiser(TINY))
        model.save(tmp_path / "ckpt")
        again = load_denoiser(tmp_path / "ckpt")
        z = latent(np.random.default_rng(4))
        assert np.array_equal(model(z, 9, [0, 1]), again(z, 9, [0, 1]))


class TestEquivariance:
    """With positional encodings off, attention cannot tell positions apart."""

    def setup_method(self):
        self.model = perturb(Denoiser(TINY, pos_embed=False), seed=5)
        rng = np.random.default_rng(6)
        self.z = latent(rng, f=4, h=6, w=6)

    def run_block(self, z, block):
        video = self.model.patchify(z)
        cond = self.model.condition([0, 1], [20, 100], video.tokens)
        return getattr(self.model, block)(video.tokens, cond, "blocks.0.b").data

    def test_spatial_patch_permutation(self):
        perm = np.random.default_rng(7).permutation(9)
        out = self.run_block(self.z, "spatial_block")
        tokens = patchify_array(self.z, 2)[:, :, perm]
        permuted = unpatchify_array(tokens, 2, 4, 6, 6)
        out_p = self.run_block(permuted, "spatial_block")
        np.testing.assert_allclose(out_p, out[:, :, perm], rtol=1e-5, atol=1e-5)

    def test_temporal_frame_permutation(self):
        perm = np.array([2, 0, 3, 1])
        out = self.run_block(self.z, "timestream_block")
        out_p = self.run_block(self.z[:, perm], "timestream_block")
        np.testing.assert_allclose(out_p, out[:, perm], rtol=1e-5, atol=1e-5)

    def test_full_network_patch_permutation(self):
        perm = np.random.default_rng(8).permutation(9)
        out = self.model(self.z, [20, 100], [0, 1])
        permuted = unpatchify_array(patchify_array(self.z, 2)[:, :, perm], 2, 4, 6, 6)
        out_p = self.model(permuted, [20, 100], [0, 1])
        expected = unpatchify_array(patchify_array(out, 2)[:, :, perm], 2, 4, 6, 6)
        np.testing.assert_allclose(out_p, expected, rtol=1e-4, atol=1e-5)

    def test_timestream_shares_weights_across_locations(self):
        z = self.z.copy()
        tokens = patchify_array(z, 2)
        tokens[:, :, 4] = tokens[:, :, 0]  # two locations with the same frame sequence
        out = self.run_block(unpatchify_array(tokens, 2, 4, 6, 6), "timestream_block")
        np.testing.assert_allclose(out[:, :, 4], out[:, :, 0], rtol=1e-6, atol=1e-6)


class TestGradients:
    def test_full_network_finite_differences(self):
        cfg = DenoiserConfig(latent_channels=2, patch=2, dim=8, heads=2, depth=1, cond_dim=6, mlp_ratio=2)
        model = Denoiser(cfg)
        model.params.cast(np.float64)
        perturb(model, scale=0.3, seed=11)
        rng = np.random.default_rng(12)
        z = rng.standard_normal((2, 2, 2, 2, 2))  # 2 frames, 1 patch per frame
        target = rng.standard_normal(z.shape)
        with precision(np.float64):
            params = [p for _, p in model.params.items()]
            for name, p in model.params.items():
                p.name = name
            pairs = gradient_pairs(lambda: ops.mse(model.forward(z, [30, 170], [0, 2]), target), params)
        analytic = np.concatenate([a.ravel() for a, _ in pairs.values()])
        numeric = np.concatenate([n.ravel() for _, n in pairs.values()])
        assert relative_error(analytic, numeric) < 1e-4
        # per tensor, measured against the overall gradient scale (key biases have exactly zero gradient)
        scale = np.linalg.norm(numeric)
        for name, (a, n) in pairs.items():
            assert np.linalg.norm(a - n) / max(np.linalg.norm(n), 1e-3 * scale) < 1e-4, name

    def test_embedder_receives_gradient(self):
        """Zero-init head, gates and lambdas open one per update, then the embedder trains."""
        model = Denoiser(TINY)
        sched = linear_schedule()
        rng = np.random.default_rng(0)
        opt = OptimizerState(lr=1e-3)
        batch = (latent(rng, b=4), np.array([0, 1, 2, 0]))
        for _ in range(4):
            training_step(model, batch, sched, rng, opt)
        for name in ("embed.fc1.w", "embed.fc2.w"):
            assert np.abs(model.params[name].grad).max() > 0
