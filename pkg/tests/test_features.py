import numpy as np
import pytest

from conftest import constant_met
from footprint_uq.domain import Release, ValidationError
from footprint_uq.features import (DEFAULT_STATICS, FeatureSpec, FeatureTensor,
                                   apply_normalizer, extract_features, fit_normalizer,
                                   read_features, write_features)


class TestFeatureSpec:
    def test_default_channel_count_is_47(self):
        spec = FeatureSpec()
        assert spec.channels == 2 * 7 * 3 + 5 == 47

    def test_channel_hash_tracks_layout(self):
        a = FeatureSpec()
        b = FeatureSpec(lags=(0.0, -6.0))
        assert a.channel_hash() != b.channel_hash()
        assert a.channel_hash() == FeatureSpec().channel_hash()

    def test_unknown_static_rejected(self):
        with pytest.raises(ValidationError):
            FeatureSpec(statics=("terrain", "mystery"))


class TestExtractFeatures:
    def test_constant_wind_constant_channels(self, grid):
        met = constant_met(grid, 4.0, -1.5, levels=(100.0, 1000.0))
        spec = FeatureSpec(levels=(100.0, 1000.0), lags=(0.0, -6.0), side=20)
        release = Release(0, 9.0, 9.0, 50.0, 50.0)
        t = extract_features(release, met, spec)
        n_wind = 2 * 2 * 2
        for ch in range(n_wind):
            vals = t.values[:, :, ch][t.values[:, :, ch] != 0]
            assert np.allclose(vals, vals[0])

    def test_release_cell_indicator_single_one(self, met, grid):
        spec = FeatureSpec(side=50)
        release = Release(0, 9.0, 9.0, 50.0, 50.0)
        t = extract_features(release, met, spec)
        ch = spec.channel_names().index("static:release_cell")
        ind = t.values[:, :, ch]
        assert np.count_nonzero(ind) == 1
        assert ind[25, 25] == 1.0

    def test_out_of_domain_cells_all_zero(self, met, grid):
        release = Release(0, 0.0, 0.0, 50.0, 50.0)  # corner: patch mostly off-grid
        t = extract_features(release, met, FeatureSpec(side=50))
        assert not t.values[:24, :, :].any()
        assert not t.values[:, :24, :].any()

    def test_deterministic(self, met):
        release = Release(0, 9.0, 9.0, 50.0, 50.0)
        a = extract_features(release, met, FeatureSpec())
        b = extract_features(release, met, FeatureSpec())
        assert np.array_equal(a.values, b.values)

    def test_outside_release_rejected(self, met):
        with pytest.raises(ValidationError):
            extract_features(Release(0, -9.0, 9.0, 0.0, 0.0), met, FeatureSpec())


def tensor_from(values, release_id=0):
    return FeatureTensor(values, Release(release_id, 1.0, 1.0, 0.0, 0.0), 12345)


class TestNormalizer:
    def make_tensors(self, n=4, side=6, c=3, seed=0):
        rng = np.random.default_rng(seed)
        return [tensor_from(rng.normal(2.0, 3.0, (side, side, c)), k) for k in range(n)]

    def test_train_pool_standardized(self):
        tensors = self.make_tensors()
        norm = fit_normalizer(tensors)
        pooled = np.concatenate([apply_normalizer(t, norm).values.reshape(-1, 3)
                                 for t in tensors])
        assert np.all(np.abs(pooled.mean(axis=0)) < 1e-10)
        assert np.all(np.abs(pooled.std(axis=0) - 1) < 1e-6)

    def test_constant_channel_passes_through(self):
        tensors = self.make_tensors()
        flagged = [tensor_from(np.concatenate(
            [t.values[:, :, :2], np.full((6, 6, 1), 7.0)], axis=2), k)
            for k, t in enumerate(tensors)]
        norm = fit_normalizer(flagged)
        assert norm.degenerate[2] and not norm.degenerate[0]
        out = apply_normalizer(flagged[0], norm)
        assert np.all(out.values[:, :, 2] == 7.0)

    def test_order_independent(self):
        tensors = self.make_tensors()
        a = fit_normalizer(tensors)
        b = fit_normalizer(tensors[::-1])
        assert np.allclose(a.mean, b.mean, rtol=1e-12)
        assert np.allclose(a.std, b.std, rtol=1e-12)

    def test_apply_identities(self):
        tensors = self.make_tensors()
        norm = fit_normalizer(tensors)
        x = tensor_from(np.broadcast_to(norm.mean, (6, 6, 3)).copy())
        assert np.allclose(apply_normalizer(x, norm).values, 0.0)
        y = tensor_from(np.broadcast_to(norm.mean + norm.std, (6, 6, 3)).copy())
        assert np.allclose(apply_normalizer(y, norm).values, 1.0)

    def test_needs_two_tensors(self):
        with pytest.raises(ValidationError):
            fit_normalizer(self.make_tensors(n=1))

    def test_channel_mismatch_rejected(self):
        norm = fit_normalizer(self.make_tensors())
        bad = tensor_from(np.zeros((6, 6, 5)))
        with pytest.raises(ValidationError):
            apply_normalizer(bad, norm)

    def test_refit_on_other_split_differs(self):
        train = self.make_tensors(seed=0)
        val = self.make_tensors(seed=9)
        assert not np.allclose(fit_normalizer(train).mean, fit_normalizer(val).mean)


class TestFtr1:
    def test_roundtrip(self, tmp_path, met):
        release = Release(3, 9.0, 9.0, 50.0, 50.0)
        t = extract_features(release, met, FeatureSpec())
        path = tmp_path / "x.ftr"
        write_features(path, t, config_hash=1)
        back = read_features(path, release)
        assert back.channel_hash == t.channel_hash
        assert np.allclose(back.values, t.values, rtol=1e-6, atol=1e-6)
        assert path.read_bytes()[:4] == b"FTR1"

    def test_wrong_release_rejected(self, tmp_path, met):
        release = Release(3, 9.0, 9.0, 50.0, 50.0)
        t = extract_features(release, met, FeatureSpec())
        write_features(tmp_path / "x.ftr", t)
        with pytest.raises(Exception, match="release"):
            read_features(tmp_path / "x.ftr", Release(4, 9.0, 9.0, 50.0, 50.0))
