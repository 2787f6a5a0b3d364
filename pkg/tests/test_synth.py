import numpy as np
import pytest

from segstack import load_dataset, synth
from segstack.errors import ConfigError


class TestGenerateDataset:
    def test_pairs_are_loadable(self, tmp_path):
        stats = synth.generate_dataset(tmp_path / "d", 10, 48, 40, 3, seed=7)
        data = load_dataset(tmp_path / "d", 3)
        assert len(data) == 10
        assert data.channels == 1
        assert data.items[0][0].height == 40 and data.items[0][0].width == 48
        assert stats["class_count"] == 3

    def test_byte_identical_regeneration(self, tmp_path):
        synth.generate_dataset(tmp_path / "a", 5, 32, 32, 3, seed=21)
        synth.generate_dataset(tmp_path / "b", 5, 32, 32, 3, seed=21)
        for sub in ("images", "masks"):
            for pa in sorted((tmp_path / "a" / sub).iterdir()):
                pb = tmp_path / "b" / sub / pa.name
                assert pa.read_bytes() == pb.read_bytes()

    def test_different_seed_differs(self, tmp_path):
        synth.generate_dataset(tmp_path / "a", 3, 32, 32, 2, seed=1)
        synth.generate_dataset(tmp_path / "b", 3, 32, 32, 2, seed=2)
        files_a = sorted((tmp_path / "a" / "images").iterdir())
        files_b = sorted((tmp_path / "b" / "images").iterdir())
        assert any(pa.read_bytes() != pb.read_bytes() for pa, pb in zip(files_a, files_b))

    def test_class_frequencies_at_least_five_percent(self, tmp_path):
        for seed in (0, 11, 99):
            stats = synth.generate_dataset(tmp_path / f"s{seed}", 8, 32, 32, 3, seed=seed)
            assert min(stats["class_fractions"]) >= synth.MIN_CLASS_FRACTION

    def test_masks_consistent_with_measurement(self, tmp_path):
        stats = synth.generate_dataset(tmp_path / "d", 6, 32, 32, 3, seed=4)
        data = load_dataset(tmp_path / "d", 3)
        counts = np.zeros(3, dtype=np.int64)
        for _, mask in data.items:
            counts += np.bincount(mask.labels.reshape(-1), minlength=3)
        fractions = counts / counts.sum()
        assert np.allclose(fractions, stats["class_fractions"], atol=1e-12)

    def test_invalid_arguments(self, tmp_path):
        with pytest.raises(ConfigError):
            synth.generate_dataset(tmp_path, 0, 32, 32, 3, seed=0)
        with pytest.raises(ConfigError):
            synth.generate_dataset(tmp_path, 5, 32, 32, 1, seed=0)
