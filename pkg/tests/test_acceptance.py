"""Acceptance suite: one test per criterion, one printed line per criterion.

Run with ``pytest tests/test_acceptance.py -v -s``.  The desk-scale
training criterion trains the default recipe once (a few minutes) and
shares the result with the analysis-validity criterion.
"""

import time

import numpy as np
import pytest

from _oracles import conv2d_loop_oracle
from unweather import tensor as T
from unweather.analysis import (
    evaluate_samples,
    expert_usage,
    severity_table,
    zero_out,
)
from unweather.cli import main as cli_main
from unweather.degradation_map import attention_rows as dmm_rows
from unweather.degradation_map import measure_degradation_map
from unweather.aggregation import attention_pool, attention_rows as rfa_rows
from unweather.experts import (
    count_expert_flops,
    dense_mixture,
    expert_convolve,
    select_topk,
)
from unweather.gradcheck import check_model_gradients, run_operation_checks
from unweather.losses import charbonnier, psnr, ssim, total_loss
from unweather.model import ModelConfig, forward, init_state
from unweather.prior import DegradationDescriptor
from unweather.synthdata import build_dataset, load_manifest
from unweather.trainer import AdamState, TrainConfig, adam_step, cosine_lr, train


def report(num: int, name: str, ok: bool, detail: str = ""):
    print(f"\n[criterion {num:02d}] {name}: {'PASS' if ok else 'FAIL'}"
          + (f"  ({detail})" if detail else ""))
    assert ok, f"criterion {num:02d} {name}: {detail}"


# ------------------------------------------------------------------ fixtures

@pytest.fixture(scope="session")
def desk_run(tmp_path_factory):
    """The default desk recipe: 64x64, 3 types, 2000 steps, seed 0."""
    root = tmp_path_factory.mktemp("desk")
    start = time.time()
    manifest = load_manifest(build_dataset(
        48, ["rain", "snow", "haze"], [1 / 3, 1 / 3, 1 / 3],
        seed=0, out_dir=root / "data", size=(64, 64), holdout=12))
    holdout = load_manifest(root / "data" / "manifest_holdout.txt")
    result = train(ModelConfig(seed=0), TrainConfig(seed=0), manifest,
                   out_dir=root / "run")
    minutes = (time.time() - start) / 60
    return {
        "state": result.state,
        "ckpt": result.final_checkpoint,
        "train_manifest": manifest,
        "holdout": holdout,
        "loss_rows": result.loss_rows,
        "minutes": minutes,
        "root": root,
    }


# ------------------------------------------------------------------ criteria

def test_criterion_01_gradient_suite():
    start = time.time()
    ops = run_operation_checks()
    model = check_model_gradients()
    elapsed = time.time() - start
    worst = max([r.max_rel_error for r in ops.results] + [model.max_rel_error])
    total = model.checked + model.excluded
    exclusion_ok = model.excluded < 0.01 * total
    ok = ops.passed and model.passed and exclusion_ok and elapsed < 120
    report(1, "gradient suite", ok,
           f"max rel {worst:.2e} <= 1e-4, excluded {model.excluded}/{total}, "
           f"{elapsed:.0f}s < 120s")


def test_criterion_02_sparse_dense_equivalence():
    start = time.time()
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, c, h, w = 6, 4, 6, 5
        x = T.Tensor(rng.standard_normal((h, w, c)), dtype=np.float64)
        filters = T.Tensor(rng.standard_normal((n, 3, 3, c, c)) * 0.5, dtype=np.float64)
        scores = T.softmax_lastdim(T.Tensor(rng.standard_normal((h, w, n)), dtype=np.float64))
        sel = select_topk(scores, n)  # K = N
        sparse = expert_convolve(x, filters, sel).data
        dense = dense_mixture(x, filters, scores).data
        worst = max(worst, float(np.max(np.abs(sparse - dense))))
    # K < N: unselected filters must be bitwise irrelevant
    rng = np.random.default_rng(0)
    n, c, h, w = 12, 3, 3, 3
    x = T.Tensor(rng.standard_normal((h, w, c)), dtype=np.float64)
    filters = T.Tensor(rng.standard_normal((n, 3, 3, c, c)) * 0.5, dtype=np.float64)
    scores = T.softmax_lastdim(T.Tensor(rng.standard_normal((h, w, n)), dtype=np.float64))
    sel = select_topk(scores, 2)
    baseline = expert_convolve(x, filters, sel).data
    unselected = sorted(set(range(n)) - set(np.unique(sel.indices)))
    perturbed = filters.data.copy()
    for u in unselected:
        perturbed[u] += 1e6
    shifted = expert_convolve(x, T.Tensor(perturbed, dtype=np.float64), sel).data
    bitwise = np.array_equal(baseline, shifted)
    elapsed = time.time() - start
    ok = worst < 1e-10 and bitwise and bool(unselected) and elapsed < 30
    report(2, "sparse/dense equivalence", ok,
           f"max |sparse-dense| {worst:.2e} < 1e-10 over 20 instances, "
           f"{len(unselected)} unselected filters bitwise-inert, {elapsed:.1f}s < 30s")


def test_criterion_03_convolution_oracle():
    start = time.time()
    worst = 0.0
    rng = np.random.default_rng(7)
    for _ in range(50):
        h, w = rng.integers(3, 11, size=2)
        cin, cout = rng.integers(1, 5, size=2)
        k = int(rng.choice([1, 3, 5]))
        stride = int(rng.choice([1, 2]))
        x = rng.standard_normal((h, w, cin))
        f = rng.standard_normal((k, k, cin, cout))
        ours = T.conv2d(T.Tensor(x, dtype=np.float64),
                        T.Tensor(f, dtype=np.float64), stride=stride).data
        worst = max(worst, float(np.max(np.abs(ours - conv2d_loop_oracle(x, f, stride)))))
    elapsed = time.time() - start
    ok = worst < 1e-12 and elapsed < 30
    report(3, "convolution oracle", ok,
           f"max deviation {worst:.2e} < 1e-12 over 50 shapes, {elapsed:.1f}s < 30s")


def test_criterion_04_attention_contracts():
    rng = np.random.default_rng(11)
    c, l, h, w = 8, 5, 4, 4
    dmm_params = {f"dmm.w{x}": T.Tensor(rng.standard_normal((c, c)) * 0.5,
                                        dtype=np.float64) for x in "qkv"}
    feats = T.Tensor(rng.standard_normal((h, w, c)), dtype=np.float64)
    prior = T.Tensor(rng.standard_normal((l, c)), dtype=np.float64)
    rows = dmm_rows(feats, prior, dmm_params)
    dmm_sum_ok = bool(np.allclose(rows.sum(axis=1), 1.0, atol=1e-6))
    m = measure_degradation_map(feats, prior, dmm_params).data
    perm = rng.permutation(l)
    m_perm = measure_degradation_map(feats, T.Tensor(prior.data[perm]), dmm_params).data
    perm_ok = float(np.max(np.abs(m - m_perm))) <= 1e-12
    v = prior.data @ dmm_params["dmm.wv"].data
    hull_dmm = bool(np.all(m >= v.min(axis=0) - 1e-9) and np.all(m <= v.max(axis=0) + 1e-9))

    rfa_params = {f"rfa.w{x}": T.Tensor(rng.standard_normal((c, c)) * 0.5,
                                        dtype=np.float64) for x in "qkv"}
    x_int = T.Tensor(rng.standard_normal((h, w, c)), dtype=np.float64)
    deg = T.Tensor(rng.standard_normal((h, w, c)), dtype=np.float64)
    rrows = rfa_rows(deg, x_int, rfa_params)
    rfa_sum_ok = bool(np.allclose(rrows.sum(axis=1), 1.0, atol=1e-6))
    pooled = attention_pool(deg, x_int, rfa_params).data
    v2 = x_int.data.reshape(-1, c) @ rfa_params["rfa.wv"].data
    hull_rfa = bool(np.all(pooled >= v2.min(axis=0) - 1e-9)
                    and np.all(pooled <= v2.max(axis=0) + 1e-9))
    ok = dmm_sum_ok and rfa_sum_ok and perm_ok and hull_dmm and hull_rfa
    report(4, "attention contracts", ok,
           "row sums 1 +/- 1e-6, permutation invariance <= 1e-12, hulls within 1e-9")


def test_criterion_05_loss_metric_anchors():
    img = np.random.default_rng(3).uniform(0, 1, size=(16, 16, 3))
    char = charbonnier(T.Tensor(img, dtype=np.float64), img).item()
    char_ok = char == 1e-4
    _, rep = total_loss(T.Tensor(img, dtype=np.float64), img, lam=0.05)
    total_ok = rep.total == 1.05e-4
    p = psnr(np.full((8, 8, 3), 0.5), np.full((8, 8, 3), 0.6))
    psnr_ok = abs(p - 20.0) <= 1e-6
    s = ssim(img, img)
    ssim_ok = abs(s - 1.0) <= 1e-9
    ok = char_ok and total_ok and psnr_ok and ssim_ok
    report(5, "loss/metric anchors", ok,
           f"char(I,I)={char!r} (==1e-4), total={rep.total!r} (==1.05e-4), "
           f"psnr={p:.9f} (20 +/- 1e-6), ssim={s!r} (1 +/- 1e-9)")


def test_criterion_06_flop_accounting_and_walltime():
    rng = np.random.default_rng(0)
    n, c, side, k_sel = 16, 32, 32, 2
    filters = T.Tensor(rng.standard_normal((n, 3, 3, c, c)).astype(np.float32) * 0.1)
    x = T.Tensor(rng.standard_normal((side, side, c)).astype(np.float32))
    scores = T.softmax_lastdim(
        T.Tensor(rng.standard_normal((side, side, n)).astype(np.float32)))
    sel = select_topk(scores, k_sel)
    rep = count_expert_flops(sel, filters)
    ratio_ok = rep.ratio == k_sel / n

    def median_ms(fn, reps=21):
        times = []
        for _ in range(reps):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        return float(np.median(times)) / 1e6

    with T.no_grad():
        sparse_ms = median_ms(lambda: expert_convolve(x, filters, sel))
        dense_ms = median_ms(lambda: dense_mixture(x, filters, scores))
    ok = ratio_ok and sparse_ms < dense_ms
    report(6, "flop accounting & wall-clock", ok,
           f"mac ratio {rep.ratio} == {k_sel}/{n}; "
           f"sparse {sparse_ms:.2f} ms < dense {dense_ms:.2f} ms (median of 21)")


def test_criterion_07_desk_scale_training(desk_run):
    rows = evaluate_samples(desk_run["state"], desk_run["holdout"])
    mean_deg = float(np.mean([r["psnr_degraded"] for r in rows]))
    mean_res = float(np.mean([r["psnr_restored"] for r in rows]))
    ssim_deg = float(np.mean([r["ssim_degraded"] for r in rows]))
    ssim_res = float(np.mean([r["ssim_restored"] for r in rows]))
    totals = [r["total"] for r in desk_run["loss_rows"]]
    loss_drops = np.mean(totals[190:210]) < np.mean(totals[:20])
    ok = (mean_res >= mean_deg + 3.0 and ssim_res > ssim_deg
          and loss_drops and desk_run["minutes"] <= 30)
    report(7, "desk-scale training efficacy", ok,
           f"held-out psnr {mean_deg:.2f} -> {mean_res:.2f} dB "
           f"(gain {mean_res - mean_deg:+.2f}, need >= +3); "
           f"ssim {ssim_deg:.4f} -> {ssim_res:.4f}; "
           f"loss(200) < loss(0) on 20-step means; "
           f"{desk_run['minutes']:.1f} min <= 30 min")


def test_criterion_08_schedule_optimizer_anchors(tmp_path):
    cfg = TrainConfig()
    endpoints_ok = cosine_lr(0, cfg) == 2e-4 and cosine_lr(cfg.total_steps, cfg) == 1e-6

    tiny = ModelConfig(channels=6, experts=4, top_k=2, prior_tokens=4,
                       prior_width=16, levels=1, seed=0)
    state = init_state(tiny)
    before = {k: p.data.copy() for k, p in state.named_parameters()}
    opt = AdamState.for_model(state)
    for _ in range(3):
        for _, p in state.named_parameters():
            p.grad = np.zeros_like(p.data)
        adam_step(state, opt, lr=1e-3)
    fixed_point_ok = all(np.array_equal(p.data, before[k])
                         for k, p in state.named_parameters())

    # mid-run checkpoint, resume, compare bitwise with the uninterrupted run
    pairs = _tiny_pairs()
    tcfg = TrainConfig(batch_size=2, total_steps=8, crop=16, seed=1, checkpoint_every=4)
    full = train(tiny, tcfg, pairs, out_dir=tmp_path / "full")
    resumed = train(tiny, tcfg, pairs, out_dir=tmp_path / "resumed",
                    resume=tmp_path / "full" / "step_4.ldrc")
    resume_ok = (tmp_path / "full" / "step_8.ldrc").read_bytes() == \
                (tmp_path / "resumed" / "step_8.ldrc").read_bytes()
    ok = endpoints_ok and fixed_point_ok and resume_ok
    report(8, "schedule/optimizer anchors", ok,
           "cosine endpoints exact, adam zero-grad fixed point, resume bitwise")


def _tiny_pairs(n=6, side=16):
    from unweather.synthdata import apply_degradation, gen_clean
    pairs = []
    for i in range(n):
        clean = gen_clean(i, size=(side, side)).astype(np.float32)
        d = DegradationDescriptor(types=(("rain", "snow")[i % 2],),
                                  severity=("slight", "moderate", "heavy")[i % 3],
                                  coverage=0.9, seed=i)
        pairs.append((clean, apply_degradation(clean, d).astype(np.float32), d))
    return pairs


def test_criterion_09_determinism(tmp_path):
    data_dir = tmp_path / "data"
    cli_main(["gen-data", "--out", str(data_dir), "--count", "6",
              "--types", "rain,snow", "--severity-mix", "0.4,0.3,0.3",
              "--size", "32", "--seed", "3"])
    manifest = str(data_dir / "manifest.txt")
    train_args = ["--data", manifest,
                  "--set", "channels=6", "--set", "experts=4", "--set", "top_k=2",
                  "--set", "prior_tokens=4", "--set", "prior_width=16",
                  "--set", "levels=1", "--set", "total_steps=6",
                  "--set", "batch_size=2", "--set", "crop=32",
                  "--set", "checkpoint_every=6", "--quiet"]
    assert cli_main(["train", "--out", str(tmp_path / "t1")] + train_args) == 0
    assert cli_main(["train", "--out", str(tmp_path / "t2")] + train_args) == 0
    train_ok = (
        (tmp_path / "t1" / "step_6.ldrc").read_bytes()
        == (tmp_path / "t2" / "step_6.ldrc").read_bytes()
        and (tmp_path / "t1" / "loss_log.csv").read_bytes()
        == (tmp_path / "t2" / "loss_log.csv").read_bytes()
    )
    ckpt = str(tmp_path / "t1" / "step_6.ldrc")

    # train a whole-image-routing twin for the ablation command
    assert cli_main(["train", "--out", str(tmp_path / "tg"), "--set", "routing=global"]
                    + train_args) == 0
    gckpt = str(tmp_path / "tg" / "step_6.ldrc")

    argsets = {
        "eval": ["eval", "--ckpt", ckpt, "--data", manifest, "--by-severity",
                 "--by-type"],
        "usage": ["usage", "--ckpt", ckpt, "--data", manifest],
        "regions": ["regions", "--ckpt", ckpt, "--data", manifest,
                    "--expert", "0", "--top", "3"],
        "zero-out": ["zero-out", "--ckpt", ckpt, "--data", manifest,
                     "--fractions", "0,0.5,1.0"],
        "ablate-routing": ["ablate-routing", "--ckpt-pixel", ckpt,
                           "--ckpt-global", gckpt, "--data", manifest],
    }
    analysis_ok = True
    mismatches = []
    for name, args in argsets.items():
        outs = []
        for run in ("a", "b"):
            out = tmp_path / f"{name}-{run}"
            if name == "eval":
                code = cli_main(args + ["--out", str(out / "metrics.csv")])
            else:
                code = cli_main(args + ["--out", str(out)])
            assert code == 0, name
            blobs = {p.name: p.read_bytes() for p in sorted(out.rglob("*")) if p.is_file()}
            outs.append(blobs)
        if outs[0] != outs[1]:
            analysis_ok = False
            mismatches.append(name)
    ok = train_ok and analysis_ok
    report(9, "determinism", ok,
           "train + eval/usage/regions/zero-out/ablate byte-identical across runs"
           + (f"; mismatches: {mismatches}" if mismatches else ""))


def test_criterion_10_analysis_validity(desk_run):
    state = desk_run["state"]
    holdout = desk_run["holdout"]
    types, rows = expert_usage(state, holdout)
    usage_ok = bool(np.allclose(rows.sum(axis=1), 1.0, atol=1e-6))

    zrows = zero_out(state, holdout, [0.0, 0.5, 1.0])
    zero_neutral_ok = zrows[0][2] == zrows[0][3] and zrows[0][4] == 0.0
    # mask of all ones must also be bitwise neutral through the mask path
    record = holdout.records[0]
    from unweather.synthdata import load_png
    degraded = load_png(record.degraded_path)
    with T.no_grad():
        base, _ = forward(degraded, record.descriptor, state)
        masked, _ = forward(degraded, record.descriptor, state,
                            bottleneck_mask=np.ones(state.config.channels))
    mask_ok = np.array_equal(base.data, masked.data)
    fractions_ok = [r[0] for r in zrows] == [0.0, 0.5, 1.0]

    table = severity_table(evaluate_samples(state, holdout))
    counts_ok = sum(cell["count"] for cell in table) == len(holdout)

    # specialization is reported, not asserted (toy scale is not guaranteed)
    ratios = []
    for col in rows.T:
        nz = col[col > 0]
        if len(nz) and col.max() > 0:
            ratios.append(col.max() / max(col.min(), 1e-9))
    best = max(ratios) if ratios else float("nan")
    ok = usage_ok and zero_neutral_ok and mask_ok and fractions_ok and counts_ok
    report(10, "analysis validity", ok,
           f"usage rows normalized; zero_out(0) neutral; cells sum to {len(holdout)}; "
           f"specialization observed: max between-type usage ratio {best:.2f} "
           f"(>= 1.5 expected, logged only)")
