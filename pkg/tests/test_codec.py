import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from colodiff.codec import decode, encode, fit_codec, load_codec, psnr
from colodiff.errors import ParameterError


def reconstruction_mse(videos, codec):
    return float(np.mean((decode(encode(videos, codec), codec, clamp=False) - videos) ** 2))


class TestFit:
    def test_shapes(self, small_codec):
        assert small_codec.channels == 4
        assert small_codec.encoder.shape == (4, 48)
        assert small_codec.decoder.shape == (48, 4)

    def test_orthonormal_directions(self, small_codec):
        np.testing.assert_allclose(small_codec.encoder @ small_codec.decoder, np.eye(4), atol=1e-10)

    def test_normalized_latent_statistics(self, small_dataset, small_split, small_codec):
        train, _ = small_split
        z = encode(small_dataset.videos[train], small_codec).astype(np.float64)
        per_channel = np.moveaxis(z, 2, 0).reshape(4, -1)
        np.testing.assert_allclose(per_channel.mean(axis=1), 0.0, atol=1e-4)
        np.testing.assert_allclose(per_channel.std(axis=1), 1.0, rtol=1e-3)

    def test_constant_color_frames(self):
        rng = np.random.default_rng(0)
        colors = rng.uniform(0.1, 0.9, size=(12, 1, 3, 1, 1))
        videos = np.broadcast_to(colors, (12, 2, 3, 8, 8)).astype(np.float32)
        codec = fit_codec(videos, q=4, channels=4)
        assert reconstruction_mse(videos, codec) < 1e-10
        # leading direction is (up to sign) a constant-per-color-channel patch
        lead = codec.encoder[0].reshape(3, 16)
        np.testing.assert_allclose(lead, lead[:, :1] * np.ones((1, 16)), atol=1e-8)

    def test_error_non_increasing_in_channels(self, small_dataset, small_split):
        train, val = small_split
        errors = [reconstruction_mse(small_dataset.videos[val], fit_codec(small_dataset.videos[train], 4, c))
                  for c in (1, 2, 4, 8)]
        assert all(a >= b for a, b in zip(errors, errors[1:]))

    def test_matches_brute_force_pca(self):
        rng = np.random.default_rng(1)
        videos = rng.uniform(size=(6, 2, 3, 4, 4)).astype(np.float32)
        codec = fit_codec(videos, q=4, channels=3)
        flat = videos.reshape(12, 48)  # 4x4 frames: one patch per frame, same channel-major layout
        _, s, vt = np.linalg.svd(flat - flat.mean(axis=0), full_matrices=False)
        np.testing.assert_allclose(np.abs(codec.encoder @ vt[:3].T), np.eye(3), atol=1e-6)
        np.testing.assert_allclose(codec.eigenvalues, s[:3] ** 2 / 12, rtol=1e-6)

    def test_rank_deficient_floor(self):
        videos = np.full((3, 2, 3, 4, 4), 0.5, np.float32)
        codec = fit_codec(videos, q=4, channels=2)
        assert np.all(codec.eigenvalues >= 1e-8)
        assert np.all(np.isfinite(encode(videos, codec)))

    @pytest.mark.parametrize("channels", [0, 49])
    def test_invalid_channels(self, channels, small_dataset):
        with pytest.raises(ParameterError):
            fit_codec(small_dataset.videos[:2], 4, channels)


class TestEncodeDecode:
    def test_latent_shape(self, small_codec):
        assert encode(np.zeros((8, 3, 32, 32), np.float32), small_codec).shape == (8, 4, 8, 8)

    def test_extent_mismatch(self, small_codec):
        with pytest.raises(ParameterError):
            encode(np.zeros((2, 3, 30, 30), np.float32), small_codec)
        with pytest.raises(ParameterError):
            decode(np.zeros((2, 3, 8, 8), np.float32), small_codec)

    def test_mean_video_is_origin(self, small_codec):
        mean = small_codec.mean_video(8, 32, 32)
        np.testing.assert_allclose(encode(mean, small_codec), 0.0, atol=1e-6)
        np.testing.assert_allclose(decode(np.zeros((8, 4, 8, 8)), small_codec, clamp=False), mean, atol=1e-6)

    def test_idempotent(self, small_dataset, small_codec):
        x = small_dataset.videos[:10]
        z = encode(x, small_codec)
        again = encode(decode(z, small_codec, clamp=False), small_codec)
        assert np.abs(again - z).max() < 1e-5

    def test_clamp(self, small_codec):
        out = decode(np.full((2, 4, 8, 8), 50.0, np.float32), small_codec)
        assert out.min() >= 0.0 and out.max() <= 1.0
        raw = decode(np.full((2, 4, 8, 8), 50.0, np.float32), small_codec, clamp=False)
        assert raw.max() > 1.0 or raw.min() < 0.0

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=25, deadline=None)
    def test_linear_about_mean(self, a):
        # the fixture is session scoped, so build a local codec once per process
        codec = _codec()
        x = _clip()
        mean = codec.mean_video(*x.shape[:1], 32, 32)
        mixed = a * x + (1 - a) * mean
        np.testing.assert_allclose(encode(mixed, codec), a * encode(x, codec), atol=2e-4)

    def test_heldout_psnr(self, small_dataset, small_split, small_codec):
        _, val = small_split
        x = small_dataset.videos[val]
        assert psnr(x, decode(encode(x, small_codec), small_codec)) >= 25.0

    def test_save_load(self, small_codec, tmp_path, small_dataset):
        small_codec.save(tmp_path / "codec")
        again = load_codec(tmp_path / "codec")
        x = small_dataset.videos[:2]
        np.testing.assert_allclose(encode(x, again), encode(x, small_codec), atol=1e-5)


_CACHE = {}


def _codec():
    if "codec" not in _CACHE:
        from colodiff.synthdata import generate_dataset

        ds = generate_dataset(10, seed=9)
        _CACHE["codec"] = fit_codec(ds.videos, 4, 4)
        _CACHE["clip"] = ds.videos[0]
    return _CACHE["codec"]


def _clip():
    _codec()
    return _CACHE["clip"]


class TestPSNR:
    def test_identical(self):
        assert psnr(np.ones(4), np.ones(4)) == float("inf")

    def test_known_value(self):
        assert psnr(np.zeros(4), np.full(4, 0.1)) == pytest.approx(20.0)
