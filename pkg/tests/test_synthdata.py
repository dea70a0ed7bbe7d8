"""Procedural data generation: determinism, monotonicity, manifests."""

import numpy as np
import pytest

from unweather.losses import psnr
from unweather.prior import DegradationDescriptor
from unweather.synthdata import (
    HAZE_TRANSMISSION,
    apply_degradation,
    build_dataset,
    gen_clean,
    load_manifest,
    load_pairs,
    load_png,
    plan_samples,
    save_png,
)
from unweather.validation import ValidationError


class TestGenClean:
    def test_deterministic(self):
        assert np.array_equal(gen_clean(7), gen_clean(7))

    def test_value_range(self):
        img = gen_clean(3)
        assert img.min() >= 0.0 and img.max() <= 1.0
        assert img.shape == (64, 64, 3)

    def test_distinct_seeds_differ(self):
        a, b = gen_clean(0), gen_clean(1)
        assert np.sqrt(np.mean((a - b) ** 2)) > 0.01

    def test_custom_size(self):
        assert gen_clean(0, size=(32, 48)).shape == (32, 48, 3)


class TestApplyDegradation:
    def test_none_is_identity(self):
        clean = gen_clean(0)
        d = DegradationDescriptor(types=("none",), severity="heavy", seed=5)
        assert np.array_equal(apply_degradation(clean, d), clean)

    def test_zero_coverage_is_identity(self):
        clean = gen_clean(1)
        for t in ("rain", "snow", "haze", "raindrop"):
            d = DegradationDescriptor(types=(t,), severity="heavy", coverage=0.0, seed=5)
            assert np.array_equal(apply_degradation(clean, d), clean), t

    def test_deterministic(self):
        clean = gen_clean(2)
        d = DegradationDescriptor(types=("rain", "haze"), severity="moderate",
                                  coverage=0.8, seed=9)
        assert np.array_equal(apply_degradation(clean, d), apply_degradation(clean, d))

    @pytest.mark.parametrize("weather", ["rain", "snow", "haze", "raindrop"])
    def test_severity_monotone_psnr(self, weather):
        clean = gen_clean(10)
        values = []
        for sev in ("slight", "moderate", "heavy"):
            d = DegradationDescriptor(types=(weather,), severity=sev, coverage=0.9, seed=4)
            values.append(psnr(apply_degradation(clean, d), clean))
        assert values[0] > values[1] > values[2]

    def test_output_clamped(self):
        clean = gen_clean(11)
        d = DegradationDescriptor(types=("snow",), severity="heavy", seed=2)
        out = apply_degradation(clean, d)
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_haze_never_exceeds_airlight_or_clean(self):
        clean = gen_clean(12)
        d = DegradationDescriptor(types=("haze",), severity="heavy", seed=3)
        out = apply_degradation(clean, d)
        assert 0 < HAZE_TRANSMISSION["heavy"] <= 1
        assert np.all(out <= np.maximum(clean, 0.95) + 1e-12)

    def test_degradation_actually_degrades(self):
        clean = gen_clean(13)
        for t in ("rain", "snow", "haze", "raindrop"):
            d = DegradationDescriptor(types=(t,), severity="heavy", coverage=1.0, seed=6)
            assert psnr(apply_degradation(clean, d), clean) < 99.0

    def test_mixed_composes_in_order(self):
        clean = gen_clean(14)
        d_rh = DegradationDescriptor(types=("rain", "haze"), severity="moderate", seed=7)
        step = apply_degradation(clean, DegradationDescriptor(types=("rain",),
                                 severity="moderate", seed=7))
        both = apply_degradation(clean, d_rh)
        haze_then = apply_degradation(step, DegradationDescriptor(types=("haze",),
                                      severity="moderate", seed=7))
        assert np.array_equal(both, haze_then)


class TestDataset:
    def test_stratification_exact(self):
        plan = plan_samples(30, ["rain", "snow", "haze"], [1 / 3, 1 / 3, 1 / 3], seed=0)
        per_type = {}
        for d in plan:
            per_type[d.types[0]] = per_type.get(d.types[0], 0) + 1
        assert per_type == {"rain": 10, "snow": 10, "haze": 10}

    def test_build_and_load_roundtrip(self, tmp_path):
        manifest_path = build_dataset(6, ["rain", "snow"], [0.4, 0.3, 0.3], seed=1,
                                      out_dir=tmp_path, size=(32, 32))
        manifest = load_manifest(manifest_path)
        assert len(manifest) == 6
        pairs = load_pairs(manifest)
        assert pairs[0][0].shape == (32, 32, 3)

    def test_rebuild_identical_bytes(self, tmp_path):
        a = build_dataset(4, ["rain"], [1, 0, 0], seed=2, out_dir=tmp_path / "a", size=(32, 32))
        b = build_dataset(4, ["rain"], [1, 0, 0], seed=2, out_dir=tmp_path / "b", size=(32, 32))
        assert a.read_text() == b.read_text()
        for rec_a, rec_b in zip(load_manifest(a).records, load_manifest(b).records):
            assert rec_a.degraded_path.read_bytes() == rec_b.degraded_path.read_bytes()

    def test_holdout_ids_disjoint(self, tmp_path):
        build_dataset(6, ["rain"], [1 / 3, 1 / 3, 1 / 3], seed=3, out_dir=tmp_path,
                      size=(32, 32), holdout=3)
        train = load_manifest(tmp_path / "manifest.txt")
        held = load_manifest(tmp_path / "manifest_holdout.txt")
        train_ids = {r.sample_id for r in train.records}
        held_ids = {r.sample_id for r in held.records}
        assert not train_ids & held_ids
        assert len(held) == 3

    def test_manifest_validates_files(self, tmp_path):
        manifest_path = build_dataset(2, ["snow"], [1, 0, 0], seed=4,
                                      out_dir=tmp_path, size=(32, 32))
        load_manifest(manifest_path).records[0].clean_path.unlink()
        with pytest.raises(ValidationError, match="missing file"):
            load_manifest(manifest_path)

    def test_manifest_seed_header(self, tmp_path):
        manifest_path = build_dataset(2, ["haze"], [1, 0, 0], seed=77,
                                      out_dir=tmp_path, size=(32, 32))
        assert manifest_path.read_text().splitlines()[0] == "# seed=77"
        assert load_manifest(manifest_path).seed == 77


def test_png_quantization_roundtrip(tmp_path):
    img = gen_clean(20, size=(32, 32))
    path = tmp_path / "img.png"
    save_png(path, img)
    back = load_png(path)
    assert back.dtype == np.float32
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-6
    # a second write of the loaded image is a fixed point
    save_png(path, back)
    assert np.array_equal(load_png(path), back)
