import itertools
from dataclasses import asdict, replace

import numpy as np
import pytest

from colodiff.errors import ParameterError
from colodiff.synthdata import (
    ToyClassSpec,
    default_classes,
    generate_dataset,
    load_dataset,
    quadrant,
    render_clip,
    temporal_smoothness,
)


class TestClasses:
    def test_pairwise_differences(self):
        fields = ("shape", "radius", "texture_band", "speed", "oscillation", "period", "background", "foreground")
        for a, b in itertools.combinations(default_classes(), 2):
            differing = [f for f in fields if getattr(a, f) != getattr(b, f)]
            assert len(differing) >= 2

    def test_round_trip_dict(self):
        spec = default_classes()[1]
        assert ToyClassSpec.from_dict(asdict(spec)) == spec

    def test_unknown_shape(self):
        with pytest.raises(ParameterError):
            replace(default_classes()[0], shape="star")


class TestGenerate:
    def test_deterministic(self):
        a = generate_dataset(4, seed=11)
        b = generate_dataset(4, seed=11)
        assert a.videos.tobytes() == b.videos.tobytes()
        assert np.array_equal(a.labels, b.labels)

    def test_seed_matters(self):
        assert not np.array_equal(generate_dataset(2, seed=1).videos, generate_dataset(2, seed=2).videos)

    def test_balance_and_shape(self, small_dataset):
        assert small_dataset.videos.shape == (120, 8, 3, 32, 32)
        assert np.bincount(small_dataset.labels).tolist() == [40, 40, 40]

    def test_range(self, small_dataset):
        assert small_dataset.videos.min() >= 0.0 and small_dataset.videos.max() <= 1.0

    def test_static_motion_law(self):
        spec = replace(default_classes()[0], speed=(0.0, 0.0), oscillation=0.0)
        video, centers = render_clip(spec, 6, 32, np.random.default_rng(0))
        assert all(np.array_equal(video[0], f) for f in video[1:])
        assert temporal_smoothness(video) == 0.0

    def test_max_step(self, small_dataset):
        classes = default_classes()
        steps = np.linalg.norm(np.diff(small_dataset.centers, axis=1), axis=-1)
        for c, spec in enumerate(classes):
            assert steps[small_dataset.labels == c].max() <= spec.max_step() + 1e-4

    def test_object_stays_inside(self, small_dataset):
        assert small_dataset.centers.min() > 0 and small_dataset.centers.max() < 32

    @pytest.mark.parametrize("kwargs", [{"n_per_class": 0}, {"n_per_class": 2, "size": 30}, {"n_per_class": 2, "frames": 0}])
    def test_invalid(self, kwargs):
        with pytest.raises(ParameterError):
            generate_dataset(**kwargs)

    def test_split_is_stratified_and_disjoint(self, small_dataset):
        train, val = small_dataset.split(0.25, seed=0)
        assert not set(train) & set(val)
        assert len(train) + len(val) == len(small_dataset)
        assert np.bincount(small_dataset.labels[val]).tolist() == [10, 10, 10]

    def test_save_load(self, tmp_path):
        ds = generate_dataset(2, seed=5)
        ds.save(tmp_path / "d")
        again = load_dataset(tmp_path / "d")
        assert np.array_equal(again.videos, ds.videos)
        assert np.array_equal(again.labels, ds.labels)
        assert again.classes == ds.classes
        assert again.clip_seeds == ds.clip_seeds

    def test_index_reproducible(self, tmp_path):
        generate_dataset(2, seed=5).save(tmp_path / "a")
        generate_dataset(2, seed=5).save(tmp_path / "b")
        for name in ("index.json", "videos.cdt", "centers.cdt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


class TestSmoothness:
    def test_shuffle_is_rougher(self, small_dataset):
        order = [0, 4, 1, 5, 2, 6, 3, 7]
        for clip in small_dataset.videos[:30]:
            assert temporal_smoothness(clip[order]) >= temporal_smoothness(clip)

    def test_noise_reference(self, small_dataset):
        noise = np.random.default_rng(0).uniform(size=(8, 3, 32, 32))
        real = np.mean([temporal_smoothness(c) for c in small_dataset.videos])
        # independent uniform frames: E|u - v| = 1/3
        assert temporal_smoothness(noise) == pytest.approx(1 / 3, rel=0.01)
        assert real < 0.1 * temporal_smoothness(noise)

    def test_needs_two_frames(self):
        with pytest.raises(ParameterError):
            temporal_smoothness(np.zeros((1, 3, 4, 4)))


def test_quadrant():
    centers = np.array([[3.0, 3.0], [3.0, 20.0], [20.0, 3.0], [20.0, 20.0]])
    assert quadrant(centers, 32).tolist() == [0, 1, 2, 3]
