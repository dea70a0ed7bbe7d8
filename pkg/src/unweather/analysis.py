"""Diagnostics on trained models: usage, regions, zero-out, stratified eval.

All operations are read-only over checkpoints and datasets, evaluate with
the tape disabled, and write deterministic bytes (CSV floats via repr,
PNGs drawn with Pillow), so identical seeds reproduce identical files.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image, ImageDraw

from . import tensor as T
from .losses import psnr, ssim
from .model import ModelState, forward
from .prior import SEVERITIES
from .synthdata import DatasetManifest, load_png, save_png
from .validation import ConfigurationError, ValidationError

CHART_BAR_W = 18
CHART_BAR_GAP = 4
CHART_ROW_H = 90


def _csv_write(path, header, rows) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        for row in rows:
            writer.writerow([repr(v) if isinstance(v, float) else v for v in row])


def _type_label(descriptor) -> str:
    return "+".join(descriptor.types)


def _iter_samples(manifest: DatasetManifest):
    for record in manifest.records:
        yield record, load_png(record.clean_path), load_png(record.degraded_path)


# ---------------------------------------------------------------- usage

def expert_usage(state: ModelState, manifest: DatasetManifest):
    """Fraction of (pixel, slot) selections routed to each expert, per type.

    Returns (ordered type list, rows array of shape n_types x N); every row
    sums to 1.
    """
    n = state.config.experts
    counts: dict[str, np.ndarray] = {}
    with T.no_grad():
        for record, _, degraded in _iter_samples(manifest):
            _, diag = forward(degraded, record.descriptor, state)
            label = _type_label(record.descriptor)
            row = counts.setdefault(label, np.zeros(n, dtype=np.int64))
            for block in diag.blocks:
                idx, freq = np.unique(block.selection.indices, return_counts=True)
                row[idx] += freq
    types = sorted(counts)
    rows = np.stack([counts[t] / counts[t].sum() for t in types])
    return types, rows


def write_usage_outputs(types, rows, out_dir) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    n = rows.shape[1]
    csv_path = out_dir / "expert_usage.csv"
    _csv_write(csv_path, ["type"] + [f"expert_{i}" for i in range(n)],
               [[t] + [float(v) for v in row] for t, row in zip(types, rows)])
    png_path = out_dir / "expert_usage.png"
    _draw_usage_chart(types, rows, png_path)
    return csv_path, png_path


def _draw_usage_chart(types, rows, path) -> None:
    n = rows.shape[1]
    width = 60 + n * (CHART_BAR_W + CHART_BAR_GAP) + 20
    height = len(types) * CHART_ROW_H + 10
    img = Image.new("RGB", (width, height), (255, 255, 255))
    draw = ImageDraw.Draw(img)
    peak = max(rows.max(), 1e-9)
    for r, (label, row) in enumerate(zip(types, rows)):
        base_y = (r + 1) * CHART_ROW_H
        draw.text((4, base_y - CHART_ROW_H + 6), label, fill=(0, 0, 0))
        draw.line([(58, base_y), (width - 10, base_y)], fill=(0, 0, 0))
        for i, value in enumerate(row):
            x0 = 60 + i * (CHART_BAR_W + CHART_BAR_GAP)
            bar = int(round((CHART_ROW_H - 24) * value / peak))
            if bar >= 1:
                draw.rectangle([x0, base_y - bar, x0 + CHART_BAR_W - 1, base_y - 1],
                               fill=(70, 110, 180))
    img.save(path, format="PNG")


# ---------------------------------------------------------------- regions

@dataclass
class RegionHit:
    rank: int
    sample_id: int
    score: float
    y: int
    x: int
    patch_path: str


def expert_regions(state: ModelState, manifest: DatasetManifest, expert_id: int,
                   top: int, out_dir, patch: int = 16):
    """Input patches whose pixels score highest for one expert."""
    cfg = state.config
    if not 0 <= expert_id < cfg.experts:
        raise ValidationError(f"expert_regions: expert id {expert_id} outside [0, {cfg.experts})")
    if top < 0:
        raise ValidationError("expert_regions: top must be nonnegative")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    factor = 2 ** cfg.levels
    hits = []
    with T.no_grad():
        for record, _, degraded in _iter_samples(manifest):
            _, diag = forward(degraded, record.descriptor, state)
            scores = diag.scores.data[..., expert_id]
            # descending, ties to the lowest position (same rule as top-k)
            flat = np.argsort(-scores, axis=None, kind="stable")[: max(top, 1)]
            for pos in flat:
                by, bx = np.unravel_index(pos, scores.shape)
                hits.append((float(scores[by, bx]), record.sample_id, int(by), int(bx),
                             degraded))
    hits.sort(key=lambda h: (-h[0], h[1], h[2], h[3]))
    results = []
    for rank, (score, sample_id, by, bx, degraded) in enumerate(hits[:top]):
        side = degraded.shape[0]
        cy = min(max(by * factor + factor // 2, patch // 2), side - patch // 2)
        cx = min(max(bx * factor + factor // 2, patch // 2), degraded.shape[1] - patch // 2)
        crop = degraded[cy - patch // 2 : cy + patch // 2, cx - patch // 2 : cx + patch // 2]
        patch_path = out_dir / f"expert{expert_id}_rank{rank:03d}.png"
        save_png(patch_path, crop)
        results.append(RegionHit(rank, sample_id, score, cy, cx, patch_path.name))
    _csv_write(out_dir / f"expert{expert_id}_regions.csv",
               ["rank", "sample_id", "score", "center_y", "center_x", "patch"],
               [[r.rank, r.sample_id, r.score, r.y, r.x, r.patch_path] for r in results])
    return results


# ---------------------------------------------------------------- zero-out

def channel_activity(state: ModelState, manifest: DatasetManifest) -> np.ndarray:
    """Mean L2 norm of each bottleneck output channel over the dataset."""
    c = state.config.channels
    total = np.zeros(c)
    count = 0
    with T.no_grad():
        for record, _, degraded in _iter_samples(manifest):
            _, diag = forward(degraded, record.descriptor, state)
            act = diag.aggregated.data
            total += np.sqrt((act ** 2).mean(axis=(0, 1)))
            count += 1
    return total / count


def zero_out(state: ModelState, manifest: DatasetManifest, fractions):
    """Restored PSNR after zeroing the least-active bottleneck channels.

    fraction == 0 must reproduce the baseline bit for bit, so no mask is
    applied at all in that case.
    """
    c = state.config.channels
    order = np.argsort(channel_activity(state, manifest), kind="stable")
    rows = []
    with T.no_grad():
        baselines, cleans = [], []
        for record, clean, degraded in _iter_samples(manifest):
            out, _ = forward(degraded, record.descriptor, state)
            baselines.append(out.data)
            cleans.append(clean)
        base_psnr = float(np.mean([psnr(b, c_) for b, c_ in zip(baselines, cleans)]))
        for fraction in fractions:
            fraction = float(fraction)
            if not 0.0 <= fraction <= 1.0:
                raise ValidationError(f"zero_out: fraction {fraction} outside [0, 1]")
            n_zero = int(round(fraction * c))
            if n_zero == 0:
                rows.append((fraction, 0, base_psnr, base_psnr, 0.0))
                continue
            mask = np.ones(c)
            mask[order[:n_zero]] = 0.0
            values = []
            for (record, clean, degraded), _ in zip(_iter_samples(manifest), baselines):
                out, _ = forward(degraded, record.descriptor, state, bottleneck_mask=mask)
                values.append(psnr(out.data, clean))
            masked = float(np.mean(values))
            rows.append((fraction, n_zero, masked, base_psnr, masked - base_psnr))
    return rows


def write_zero_out_csv(rows, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "zero_out.csv"
    _csv_write(path, ["fraction", "channels_zeroed", "psnr_masked", "psnr_baseline", "delta"],
               [list(r) for r in rows])
    return path


# ---------------------------------------------------------------- eval

def evaluate_samples(state: ModelState, manifest: DatasetManifest):
    """Per-sample restoration metrics (the eval CLI's row source)."""
    rows = []
    with T.no_grad():
        for record, clean, degraded in _iter_samples(manifest):
            out, _ = forward(degraded, record.descriptor, state)
            rows.append({
                "sample_id": record.sample_id,
                "type": _type_label(record.descriptor),
                "severity": record.descriptor.severity,
                "psnr_degraded": psnr(degraded, clean),
                "psnr_restored": psnr(out.data, clean),
                "ssim_degraded": ssim(degraded, clean),
                "ssim_restored": ssim(out.data, clean),
            })
    return rows


def severity_table(sample_rows):
    """Mean metrics per (type, severity) cell; empty cells are absent."""
    cells: dict[tuple[str, str], list[dict]] = {}
    for row in sample_rows:
        cells.setdefault((row["type"], row["severity"]), []).append(row)
    table = []
    for (wtype, severity) in sorted(cells, key=lambda k: (k[0], SEVERITIES.index(k[1]))):
        group = cells[(wtype, severity)]
        table.append({
            "type": wtype,
            "severity": severity,
            "count": len(group),
            "psnr_degraded": float(np.mean([g["psnr_degraded"] for g in group])),
            "psnr_restored": float(np.mean([g["psnr_restored"] for g in group])),
            "ssim_degraded": float(np.mean([g["ssim_degraded"] for g in group])),
            "ssim_restored": float(np.mean([g["ssim_restored"] for g in group])),
        })
    return table


def type_table(sample_rows):
    """Mean metrics per weather type (severities pooled)."""
    groups: dict[str, list[dict]] = {}
    for row in sample_rows:
        groups.setdefault(row["type"], []).append(row)
    table = []
    for wtype in sorted(groups):
        group = groups[wtype]
        table.append({
            "type": wtype,
            "count": len(group),
            "psnr_degraded": float(np.mean([g["psnr_degraded"] for g in group])),
            "psnr_restored": float(np.mean([g["psnr_restored"] for g in group])),
            "ssim_degraded": float(np.mean([g["ssim_degraded"] for g in group])),
            "ssim_restored": float(np.mean([g["ssim_restored"] for g in group])),
        })
    return table


def write_type_csv(table, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "type_eval.csv"
    _csv_write(path,
               ["type", "count", "psnr_degraded", "psnr_restored",
                "ssim_degraded", "ssim_restored"],
               [[t["type"], t["count"], t["psnr_degraded"], t["psnr_restored"],
                 t["ssim_degraded"], t["ssim_restored"]] for t in table])
    return path


def write_severity_csv(table, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "severity_eval.csv"
    _csv_write(path,
               ["type", "severity", "count", "psnr_degraded", "psnr_restored",
                "ssim_degraded", "ssim_restored"],
               [[t["type"], t["severity"], t["count"], t["psnr_degraded"],
                 t["psnr_restored"], t["ssim_degraded"], t["ssim_restored"]]
                for t in table])
    return path


# ---------------------------------------------------------------- ablation

def routing_ablation(pixel_ckpt, global_ckpt, manifest: DatasetManifest):
    """Side-by-side metrics for pixel-wise vs whole-image routing.

    Distinct checkpoints must carry the routing mode their slot claims.
    Passing the same file in both slots is allowed (a self-comparison with
    zero difference by construction).
    """
    same_file = Path(pixel_ckpt).resolve() == Path(global_ckpt).resolve()
    state_pixel, _, _ = ModelState.load(pixel_ckpt)
    if same_file:
        state_global = state_pixel
    else:
        state_global, _, _ = ModelState.load(global_ckpt)
        if state_pixel.config.routing != "pixel":
            raise ConfigurationError(
                f"{pixel_ckpt}: expected routing mode 'pixel', got "
                f"{state_pixel.config.routing!r}"
            )
        if state_global.config.routing != "global":
            raise ConfigurationError(
                f"{global_ckpt}: expected routing mode 'global', got "
                f"{state_global.config.routing!r}"
            )
    out = {}
    for mode, state in (("pixel", state_pixel), ("global", state_global)):
        rows = evaluate_samples(state, manifest)
        out[mode] = {
            "psnr": float(np.mean([r["psnr_restored"] for r in rows])),
            "ssim": float(np.mean([r["ssim_restored"] for r in rows])),
        }
    out["delta"] = {
        "psnr": out["pixel"]["psnr"] - out["global"]["psnr"],
        "ssim": out["pixel"]["ssim"] - out["global"]["ssim"],
    }
    return out


def write_ablation_csv(result, out_dir) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / "routing_ablation.csv"
    _csv_write(path, ["mode", "psnr", "ssim"],
               [["pixel", result["pixel"]["psnr"], result["pixel"]["ssim"]],
                ["global", result["global"]["psnr"], result["global"]["ssim"]],
                ["delta", result["delta"]["psnr"], result["delta"]["ssim"]]])
    return path


# ---------------------------------------------------------------- rendering

def heatmap_montage(tensor: np.ndarray, path, cell_gap: int = 2) -> None:
    """Tile per-channel heatmaps of an H x W x C tensor into one PNG."""
    h, w, c = tensor.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows_n = int(np.ceil(c / cols))
    canvas = np.zeros((rows_n * (h + cell_gap), cols * (w + cell_gap)))
    for i in range(c):
        chan = tensor[:, :, i]
        lo, hi = chan.min(), chan.max()
        norm = (chan - lo) / (hi - lo) if hi > lo else np.zeros_like(chan)
        r, col = divmod(i, cols)
        canvas[r * (h + cell_gap) : r * (h + cell_gap) + h,
               col * (w + cell_gap) : col * (w + cell_gap) + w] = norm
    gray = (canvas * 255.0).round().astype(np.uint8)
    Image.fromarray(gray, mode="L").save(path, format="PNG")
