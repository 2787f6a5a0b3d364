"""Both kernel implementations against naive oracles and each other."""

import numpy as np
import pytest

from segstack import _ext
from segstack._ext import _fallback

IMPLEMENTATIONS = [("fallback", _fallback)]
if _ext.HAVE_COMPILED:
    from segstack._ext import _core
    IMPLEMENTATIONS.append(("compiled", _core))


def naive_patch_moments(data, radius):
    """Literal per-pixel loop; the oracle for both implementations."""
    c, h, w = data.shape
    mean = np.zeros((c, h, w))
    var = np.zeros((c, h, w))
    for ch in range(c):
        for i in range(h):
            for j in range(w):
                vals = []
                for di in range(-radius, radius + 1):
                    for dj in range(-radius, radius + 1):
                        ii = min(max(i + di, 0), h - 1)
                        jj = min(max(j + dj, 0), w - 1)
                        vals.append(float(data[ch, ii, jj]))
                vals = np.array(vals)
                mean[ch, i, j] = vals.mean()
                var[ch, i, j] = vals.var()
    return mean, var


def naive_directed(a, b):
    return float(np.mean([np.sqrt(((b - p) ** 2).sum(axis=1)).min() for p in a]))


@pytest.mark.parametrize("name,impl", IMPLEMENTATIONS)
class TestPatchMoments:
    def test_matches_naive_oracle(self, name, impl):
        rng = np.random.default_rng(10)
        for radius in (0, 1, 2):
            data = rng.random((2, 7, 9), dtype=np.float32)
            mean, var = impl.patch_moments(data, radius)
            oracle_mean, oracle_var = naive_patch_moments(data, radius)
            assert np.allclose(mean, oracle_mean, atol=1e-6)
            assert np.allclose(var, oracle_var, atol=1e-6)

    def test_constant_image(self, name, impl):
        data = np.full((1, 5, 5), 0.25, dtype=np.float32)
        mean, var = impl.patch_moments(data, 2)
        assert np.allclose(mean, 0.25, atol=1e-7)
        assert np.allclose(var, 0.0, atol=1e-7)

    def test_radius_zero_is_identity(self, name, impl):
        rng = np.random.default_rng(11)
        data = rng.random((3, 4, 5), dtype=np.float32)
        mean, var = impl.patch_moments(data, 0)
        assert np.array_equal(mean, data)
        assert var.max() == 0.0


@pytest.mark.parametrize("name,impl", IMPLEMENTATIONS)
class TestDirectedDistance:
    def test_hand_cases(self, name, impl):
        a = np.array([[0.0, 0.0]])
        b = np.array([[3.0, 4.0]])
        assert impl.directed_avg_distance(a, b) == pytest.approx(5.0, abs=1e-12)
        a2 = np.array([[0.0, 0.0], [0.0, 2.0]])
        b2 = np.array([[0.0, 0.0]])
        assert impl.directed_avg_distance(a2, b2) == pytest.approx(1.0, abs=1e-12)
        assert impl.directed_avg_distance(b2, a2) == pytest.approx(0.0, abs=1e-12)

    def test_matches_naive_oracle(self, name, impl):
        rng = np.random.default_rng(12)
        for _ in range(10):
            a = rng.integers(0, 40, (int(rng.integers(1, 50)), 2)).astype(np.float64)
            b = rng.integers(0, 40, (int(rng.integers(1, 50)), 2)).astype(np.float64)
            got = impl.directed_avg_distance(np.ascontiguousarray(a), np.ascontiguousarray(b))
            assert got == pytest.approx(naive_directed(a, b), abs=1e-9)

    def test_empty_input_rejected(self, name, impl):
        empty = np.empty((0, 2), dtype=np.float64)
        point = np.array([[1.0, 1.0]])
        with pytest.raises(ValueError):
            impl.directed_avg_distance(empty, point)


@pytest.mark.skipif(not _ext.HAVE_COMPILED, reason="compiled extension not built")
class TestCompiledAgainstFallback:
    def test_patch_moments_agree(self):
        from segstack._ext import _core
        rng = np.random.default_rng(13)
        data = rng.random((4, 33, 29), dtype=np.float32)
        for radius in (0, 1, 3):
            m1, v1 = _core.patch_moments(data, radius)
            m2, v2 = _fallback.patch_moments(data, radius)
            assert np.allclose(m1, m2, atol=1e-6)
            assert np.allclose(v1, v2, atol=1e-6)

    def test_bucketed_path_agrees_with_fallback(self):
        # Point counts above the bucket threshold exercise the grid search.
        from segstack._ext import _core
        rng = np.random.default_rng(14)
        b = rng.integers(0, 400, (int(_core.BUCKET_THRESHOLD * 1.5), 2)).astype(np.float64)
        a = rng.integers(0, 400, (500, 2)).astype(np.float64)
        got = _core.directed_avg_distance(np.ascontiguousarray(a), np.ascontiguousarray(b))
        want = _fallback.directed_avg_distance(a, b)
        assert got == pytest.approx(want, abs=1e-9)

    def test_bucketed_handles_queries_far_from_targets(self):
        from segstack._ext import _core
        rng = np.random.default_rng(15)
        b = np.stack([rng.integers(0, 30, 5000), rng.integers(0, 30, 5000)], axis=1).astype(np.float64)
        a = np.array([[500.0, 500.0], [0.0, 0.0]])
        got = _core.directed_avg_distance(np.ascontiguousarray(a), np.ascontiguousarray(b))
        want = _fallback.directed_avg_distance(a, b)
        assert got == pytest.approx(want, abs=1e-9)
