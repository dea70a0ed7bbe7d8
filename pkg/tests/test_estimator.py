"""The sklearn-facing estimator: params protocol, fit/predict/score."""

import numpy as np
import pytest
from sklearn.base import clone
from sklearn.exceptions import NotFittedError

from unweather.estimator import WeatherRestorer
from unweather.prior import DegradationDescriptor
from unweather.synthdata import apply_degradation, gen_clean
from unweather.validation import ValidationError

FAST = dict(channels=6, experts=4, top_k=2, prior_tokens=4, prior_width=16,
            levels=1, steps=40, batch_size=2, crop=16, seed=0)


def stack(n=6, side=16):
    clean, degraded, descs = [], [], []
    for i in range(n):
        img = gen_clean(i, size=(side, side)).astype(np.float32)
        d = DegradationDescriptor(types=("rain", "snow")[i % 2:][:1],
                                  severity=("moderate", "heavy")[i % 2],
                                  coverage=0.9, seed=i)
        clean.append(img)
        degraded.append(apply_degradation(img, d).astype(np.float32))
        descs.append(d)
    return np.stack(degraded), np.stack(clean), descs


class TestSklearnProtocol:
    def test_get_params_roundtrip(self):
        est = WeatherRestorer(**FAST)
        params = est.get_params()
        assert params["channels"] == 6
        est2 = WeatherRestorer(**params)
        assert est2.get_params() == params

    def test_set_params(self):
        est = WeatherRestorer().set_params(top_k=3, experts=8)
        assert est.top_k == 3 and est.experts == 8

    def test_clone(self):
        est = WeatherRestorer(**FAST)
        twin = clone(est)
        assert twin.get_params() == est.get_params()

    def test_predict_before_fit_raises(self):
        X, _, descs = stack(2)
        with pytest.raises(NotFittedError):
            WeatherRestorer(**FAST).predict(X, descriptors=descs)


class TestFitPredict:
    def test_fit_predict_shapes_and_gain(self):
        X, y, descs = stack()
        est = WeatherRestorer(**FAST).fit(X, y, descriptors=descs)
        out = est.predict(X, descriptors=descs)
        assert out.shape == X.shape
        assert np.all(out >= 0) and np.all(out <= 1)
        first = np.mean([r["total"] for r in est.loss_log_[:5]])
        last = np.mean([r["total"] for r in est.loss_log_[-5:]])
        assert last < first

    def test_score_is_mean_psnr(self):
        X, y, descs = stack(4)
        est = WeatherRestorer(**FAST).fit(X, y, descriptors=descs)
        score = est.score(X, y, descriptors=descs)
        assert np.isfinite(score) and score > 0

    def test_transform_matches_predict(self):
        X, y, descs = stack(2)
        est = WeatherRestorer(**FAST).fit(X, y, descriptors=descs)
        assert np.array_equal(est.transform(X, descriptors=descs),
                              est.predict(X, descriptors=descs))

    def test_descriptor_lines_accepted(self):
        X, y, descs = stack(2)
        lines = [d.to_line() for d in descs]
        est = WeatherRestorer(**FAST).fit(X, y, descriptors=lines)
        out = est.predict(X, descriptors=lines)
        assert out.shape == X.shape

    def test_mismatched_shapes_rejected(self):
        X, y, _ = stack(2)
        with pytest.raises(ValidationError):
            WeatherRestorer(**FAST).fit(X, y[:, :8])

    def test_descriptor_count_mismatch(self):
        X, y, descs = stack(3)
        with pytest.raises(ValidationError):
            WeatherRestorer(**FAST).fit(X, y, descriptors=descs[:2])


class TestPersistence:
    def test_save_load_predict_identical(self, tmp_path):
        X, y, descs = stack(2)
        est = WeatherRestorer(**FAST).fit(X, y, descriptors=descs)
        path = tmp_path / "model.ldrc"
        est.save(path)
        loaded = WeatherRestorer.load(path)
        assert loaded.get_params()["channels"] == 6
        assert np.array_equal(loaded.predict(X, descriptors=descs),
                              est.predict(X, descriptors=descs))
