"""Procedural clean images, weather degradations, and dataset building.

Every random choice derives from an explicit seed (the descriptor's for
degradations, the sample's for clean scenes); there is no ambient RNG, so
rebuilding a dataset reproduces it byte for byte.

Severity is monotone by construction: each degradation draws the full
"heavy" population of streaks / discs / blobs from one seeded stream and
uses a severity-dependent prefix of it, so a heavier setting adds energy
on top of the lighter one and PSNR strictly drops.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .prior import SEVERITIES, WEATHER_TYPES, DegradationDescriptor
from .validation import ValidationError, check_probability_vector, check_positive_int

# streak / disc / blob counts (haze: transmission) per severity
RAIN_COUNTS = {"slight": 20, "moderate": 60, "heavy": 150}
SNOW_COUNTS = {"slight": 30, "moderate": 100, "heavy": 250}
HAZE_TRANSMISSION = {"slight": 0.8, "moderate": 0.6, "heavy": 0.35}
RAINDROP_COUNTS = {"slight": 3, "moderate": 8, "heavy": 16}

_CLEAN_TAG = 11
_MASK_TAG = 101
_TYPE_TAGS = {"rain": 21, "snow": 22, "haze": 23, "raindrop": 24}
_SAMPLE_TAG = 7919


def save_png(path, img: np.ndarray) -> None:
    """Quantize a [0, 1] float image to 8-bit RGB and write it."""
    arr = np.clip(np.asarray(img), 0.0, 1.0)
    Image.fromarray((arr * 255.0).round().astype(np.uint8)).save(path, format="PNG")


def load_png(path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32)
    return arr / 255.0


def _bilinear_upsample(small: np.ndarray, height: int, width: int) -> np.ndarray:
    sh, sw = small.shape[:2]
    yi = np.linspace(0.0, sh - 1.0, height)
    xi = np.linspace(0.0, sw - 1.0, width)
    y0 = np.clip(np.floor(yi).astype(int), 0, sh - 2)
    x0 = np.clip(np.floor(xi).astype(int), 0, sw - 2)
    fy = (yi - y0)[:, None]
    fx = (xi - x0)[None, :]
    if small.ndim == 3:
        fy = fy[..., None]
        fx = fx[..., None]
    a = small[y0][:, x0]
    b = small[y0][:, x0 + 1]
    c = small[y0 + 1][:, x0]
    d = small[y0 + 1][:, x0 + 1]
    return a * (1 - fy) * (1 - fx) + b * (1 - fy) * fx + c * fy * (1 - fx) + d * fy * fx


def gen_clean(seed: int, size=(64, 64)) -> np.ndarray:
    """Seeded procedural scene: color gradients, shapes, mild texture noise."""
    height, width = size
    rng = np.random.default_rng([int(seed), _CLEAN_TAG])
    img = _bilinear_upsample(rng.uniform(0.15, 0.85, size=(4, 4, 3)), height, width)
    yy, xx = np.mgrid[0:height, 0:width]
    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0.05, 0.95, size=3)
        alpha = rng.uniform(0.5, 0.95)
        if rng.random() < 0.5:  # rectangle
            y0, x0 = rng.integers(0, height - 4), rng.integers(0, width - 4)
            hh = int(rng.integers(height // 8, height // 2))
            ww = int(rng.integers(width // 8, width // 2))
            mask = (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)
        else:  # circle
            cy, cx = rng.integers(0, height), rng.integers(0, width)
            r = int(rng.integers(max(2, height // 10), height // 3))
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
        img[mask] = (1 - alpha) * img[mask] + alpha * color
    img += rng.normal(0.0, 0.015, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def _coverage_mask(d: DegradationDescriptor, shape) -> np.ndarray:
    """Smooth random region covering the requested fraction of the image."""
    height, width = shape
    if d.coverage >= 1.0:
        return np.ones((height, width))
    if d.coverage <= 0.0:
        return np.zeros((height, width))
    rng = np.random.default_rng([d.seed, _MASK_TAG])
    field = _bilinear_upsample(rng.standard_normal((8, 8)), height, width)
    threshold = np.quantile(field, 1.0 - d.coverage)
    return (field >= threshold).astype(np.float64)


def _box_blur(img: np.ndarray, radius: int = 2) -> np.ndarray:
    k = 2 * radius + 1
    pad = np.pad(img, ((radius, radius), (radius, radius), (0, 0)), mode="edge")
    win = np.lib.stride_tricks.sliding_window_view(pad, (k, k), axis=(0, 1))
    return win.mean(axis=(-2, -1))


def _rain_layer(shape, rng, count: int) -> np.ndarray:
    height, width = shape
    layer = np.zeros((height, width))
    angle = rng.uniform(-0.5, 0.5)  # radians off vertical, shared per image
    starts_y = rng.uniform(-10, height, size=RAIN_COUNTS["heavy"])
    starts_x = rng.uniform(0, width, size=RAIN_COUNTS["heavy"])
    lengths = rng.uniform(8, 18, size=RAIN_COUNTS["heavy"])
    opacities = rng.uniform(0.25, 0.55, size=RAIN_COUNTS["heavy"])
    jitters = rng.uniform(-0.1, 0.1, size=RAIN_COUNTS["heavy"])
    for i in range(count):
        t = np.arange(0.0, lengths[i], 0.5)
        ys = np.round(starts_y[i] + t * np.cos(angle + jitters[i])).astype(int)
        xs = np.round(starts_x[i] + t * np.sin(angle + jitters[i])).astype(int)
        keep = (ys >= 0) & (ys < height) & (xs >= 0) & (xs < width)
        np.add.at(layer, (ys[keep], xs[keep]), opacities[i] * 0.5)
    return np.clip(layer, 0.0, 1.0)


def _snow_layer(shape, rng, count: int) -> np.ndarray:
    height, width = shape
    layer = np.zeros((height, width))
    cy = rng.uniform(0, height, size=SNOW_COUNTS["heavy"])
    cx = rng.uniform(0, width, size=SNOW_COUNTS["heavy"])
    radii = rng.uniform(0.8, 2.6, size=SNOW_COUNTS["heavy"])
    opacities = rng.uniform(0.35, 0.85, size=SNOW_COUNTS["heavy"])
    yy, xx = np.mgrid[0:height, 0:width]
    for i in range(count):
        d2 = (yy - cy[i]) ** 2 + (xx - cx[i]) ** 2
        disc = np.maximum(0.0, 1.0 - d2 / (radii[i] ** 2))
        layer += opacities[i] * disc
    return np.clip(layer, 0.0, 1.0)


def _apply_rain(img, d, mask):
    rng = np.random.default_rng([d.seed, _TYPE_TAGS["rain"]])
    layer = _rain_layer(img.shape[:2], rng, RAIN_COUNTS[d.severity]) * mask
    streak_color = np.array([0.92, 0.94, 1.0])
    return np.clip(img + layer[:, :, None] * streak_color, 0.0, 1.0)


def _apply_snow(img, d, mask):
    rng = np.random.default_rng([d.seed, _TYPE_TAGS["snow"]])
    layer = _snow_layer(img.shape[:2], rng, SNOW_COUNTS[d.severity]) * mask
    return np.clip(img + layer[:, :, None] * np.array([1.0, 1.0, 1.0]), 0.0, 1.0)


def _apply_haze(img, d, mask):
    # veil: img * t + A * (1 - t), masked; t in (0, 1]
    rng = np.random.default_rng([d.seed, _TYPE_TAGS["haze"]])
    airlight = rng.uniform(0.85, 0.95)
    t = HAZE_TRANSMISSION[d.severity]
    t_map = 1.0 - mask * (1.0 - t)
    return np.clip(img * t_map[:, :, None] + airlight * (1.0 - t_map)[:, :, None], 0.0, 1.0)


def _apply_raindrop(img, d, mask):
    rng = np.random.default_rng([d.seed, _TYPE_TAGS["raindrop"]])
    height, width = img.shape[:2]
    count = RAINDROP_COUNTS[d.severity]
    cy = rng.uniform(4, height - 4, size=RAINDROP_COUNTS["heavy"])
    cx = rng.uniform(4, width - 4, size=RAINDROP_COUNTS["heavy"])
    radii = rng.uniform(3.0, 7.5, size=RAINDROP_COUNTS["heavy"])
    blurred = np.clip(_box_blur(img, 3) * 1.18 + 0.06, 0.0, 1.0)
    yy, xx = np.mgrid[0:height, 0:width]
    blob = np.zeros((height, width))
    for i in range(count):
        blob = np.maximum(blob, ((yy - cy[i]) ** 2 + (xx - cx[i]) ** 2 <= radii[i] ** 2) * 1.0)
    blob = blob * mask
    return img * (1.0 - blob[:, :, None]) + blurred * blob[:, :, None]


_APPLIERS = {"rain": _apply_rain, "snow": _apply_snow, "haze": _apply_haze,
             "raindrop": _apply_raindrop}


def apply_degradation(clean: np.ndarray, d: DegradationDescriptor) -> np.ndarray:
    """Degrade a clean [0, 1] image per the descriptor; types compose in order."""
    if not isinstance(d, DegradationDescriptor):
        raise ValidationError("apply_degradation: expected a DegradationDescriptor")
    img = np.asarray(clean, dtype=np.float64).copy()
    if d.types == ("none",):
        return img
    mask = _coverage_mask(d, img.shape[:2])
    for t in d.types:
        img = _APPLIERS[t](img, d, mask)
    return img


@dataclass
class ManifestRecord:
    sample_id: int
    descriptor: DegradationDescriptor
    clean_path: Path
    degraded_path: Path


@dataclass
class DatasetManifest:
    seed: int
    records: list[ManifestRecord]

    def __len__(self):
        return len(self.records)


def _exact_counts(total: int, mix: np.ndarray) -> list[int]:
    """Largest-remainder apportionment; counts sum to total."""
    raw = mix * total
    counts = np.floor(raw).astype(int)
    remainder = total - counts.sum()
    order = np.argsort(-(raw - counts), kind="stable")
    for i in range(remainder):
        counts[order[i]] += 1
    return counts.tolist()


def plan_samples(count: int, types: list[str], severity_mix, seed: int,
                 first_id: int = 0) -> list[DegradationDescriptor]:
    """Stratified (type, severity) assignment with per-sample derived seeds."""
    check_positive_int(count, "count")
    for t in types:
        if t not in WEATHER_TYPES:
            raise ValidationError(f"plan_samples: unknown type {t!r}")
    severity_mix = check_probability_vector(severity_mix, "severity_mix")
    if severity_mix.size != len(SEVERITIES):
        raise ValidationError("severity_mix must have three entries (slight, moderate, heavy)")
    type_counts = _exact_counts(count, np.full(len(types), 1.0 / len(types)))
    descriptors = []
    sample_id = first_id
    for t, n_type in zip(types, type_counts):
        for sev, n_sev in zip(SEVERITIES, _exact_counts(n_type, severity_mix)):
            for _ in range(n_sev):
                rng = np.random.default_rng([seed, _SAMPLE_TAG, sample_id])
                coverage = 1.0 if t == "none" else round(float(rng.uniform(0.6, 1.0)), 3)
                descriptors.append(
                    DegradationDescriptor(
                        types=(t,), severity=sev, coverage=coverage,
                        seed=int(rng.integers(0, 2 ** 63)),
                    )
                )
                sample_id += 1
    return descriptors


def _write_samples(descriptors, seed, out_dir: Path, size, first_id: int):
    records = []
    for offset, d in enumerate(descriptors):
        sample_id = first_id + offset
        rng = np.random.default_rng([seed, _SAMPLE_TAG, sample_id, 2])
        clean = gen_clean(int(rng.integers(0, 2 ** 63)), size=size)
        degraded = apply_degradation(clean, d)
        clean_path = out_dir / f"clean_{sample_id:05d}.png"
        degraded_path = out_dir / f"degraded_{sample_id:05d}.png"
        save_png(clean_path, clean)
        save_png(degraded_path, degraded)
        records.append(ManifestRecord(sample_id, d, clean_path, degraded_path))
    return records


def _manifest_text(seed, records, out_dir: Path) -> str:
    lines = [f"# seed={seed}"]
    for r in records:
        lines.append(
            f"{r.sample_id}\t{r.descriptor.to_line()}\t"
            f"{r.clean_path.relative_to(out_dir)}\t{r.degraded_path.relative_to(out_dir)}"
        )
    return "\n".join(lines) + "\n"


def build_dataset(count: int, types: list[str], severity_mix, seed: int, out_dir,
                  size=(64, 64), holdout: int = 0) -> Path:
    """Write PNG pairs and a manifest; returns the manifest path.

    ``holdout`` extra samples go to ``manifest_holdout.txt`` with ids
    disjoint from the training ids.
    """
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    descriptors = plan_samples(count, types, severity_mix, seed, first_id=0)
    records = _write_samples(descriptors, seed, out_dir, size, first_id=0)
    manifest_path = out_dir / "manifest.txt"
    manifest_path.write_text(_manifest_text(seed, records, out_dir), encoding="utf-8")
    if holdout:
        held = plan_samples(holdout, types, severity_mix, seed + 1, first_id=count)
        held_records = _write_samples(held, seed, out_dir, size, first_id=count)
        (out_dir / "manifest_holdout.txt").write_text(
            _manifest_text(seed, held_records, out_dir), encoding="utf-8"
        )
    return manifest_path


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("# seed="):
        raise ValidationError(f"{path}: manifest must start with '# seed=<u64>'")
    seed = int(lines[0].split("=", 1)[1])
    records = []
    seen = set()
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split("\t")
        if len(parts) != 4:
            raise ValidationError(f"{path}:{lineno}: expected 4 tab-separated fields")
        sample_id = int(parts[0])
        if sample_id in seen:
            raise ValidationError(f"{path}:{lineno}: duplicate sample id {sample_id}")
        seen.add(sample_id)
        clean_path = path.parent / parts[2]
        degraded_path = path.parent / parts[3]
        for p in (clean_path, degraded_path):
            if not p.exists():
                raise ValidationError(f"{path}:{lineno}: missing file {p}")
        records.append(
            ManifestRecord(sample_id, DegradationDescriptor.from_line(parts[1]),
                           clean_path, degraded_path)
        )
    return DatasetManifest(seed=seed, records=records)


def load_pairs(manifest: DatasetManifest):
    """Load every (clean, degraded, descriptor) triple into memory."""
    return [
        (load_png(r.clean_path), load_png(r.degraded_path), r.descriptor)
        for r in manifest.records
    ]
