"""Command-line entry point.

One binary, subcommand style.  Exit codes: 0 success, 1 usage error,
2 runtime failure, 3 gradient-check failure.  ``--threads 1`` pins the
BLAS thread pools so runs are bit-reproducible.
"""

from __future__ import annotations

import argparse
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .validation import ConfigurationError, UnweatherError


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; the contract here is exit 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"error: {message}\n")
        sys.exit(1)


def _build_parser() -> _Parser:
    parser = _Parser(prog="unweather",
                     description="Descriptor-driven all-in-one weather restoration")
    parser.add_argument("--version", action="store_true", help="print build metadata and exit")
    parser.add_argument("--threads", type=int, default=None,
                        help="limit BLAS thread pools (1 = deterministic)")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a synthetic weather dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--types", default="rain,snow,haze",
                   help="comma-separated weather types")
    p.add_argument("--severity-mix", default="0.34,0.33,0.33",
                   help="slight,moderate,heavy fractions")
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--holdout", type=int, default=0,
                   help="extra held-out samples with disjoint ids")

    p = sub.add_parser("train", help="train a restoration model")
    p.add_argument("--config", default=None, help="key = value config file")
    p.add_argument("--data", required=True, help="dataset manifest")
    p.add_argument("--out", required=True, help="checkpoint/log directory")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                   help="override a config key (flags win over the file)")
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("eval", help="restore a dataset and emit metric tables")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True, help="per-sample CSV path")
    p.add_argument("--by-severity", action="store_true")
    p.add_argument("--by-type", action="store_true")

    p = sub.add_parser("bench", help="sparse vs dense expert dispatch benchmark")
    p.add_argument("--ckpt", default=None, help="take the expert bank from a checkpoint")
    p.add_argument("--n", type=int, default=16, help="expert count")
    p.add_argument("--k", type=int, default=2, help="experts per pixel")
    p.add_argument("--size", type=int, default=32, help="feature map side")
    p.add_argument("--c", type=int, default=32, help="channel width")
    p.add_argument("--repeat", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="CSV path")

    p = sub.add_parser("inspect", help="dump intermediate tensors for one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="input PNG")
    p.add_argument("--descriptor", required=True,
                   help="e.g. types=rain;severity=heavy;coverage=0.8;seed=1")
    p.add_argument("--dump", required=True, help="output directory")

    p = sub.add_parser("usage", help="expert usage frequencies per weather type")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("regions", help="image patches that most activate an expert")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--expert", type=int, required=True)
    p.add_argument("--top", type=int, default=8)
    p.add_argument("--out", required=True)

    p = sub.add_parser("zero-out", help="psnr impact of zeroing inactive channels")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--fractions", default="0,0.25,0.5,0.75,1.0")
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate-routing", help="pixel-wise vs whole-image routing")
    p.add_argument("--ckpt-pixel", required=True)
    p.add_argument("--ckpt-global", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--module", default=None,
                   help="restrict to one check name (e.g. conv2d, end_to_end_model)")

    return parser


def _typed(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ConfigurationError(f"expected a boolean, got {value!r}")
    return target_type(value)


def _split_config(pairs: dict[str, str]):
    """Route key=value settings to ModelConfig / TrainConfig kwargs."""
    from .model import ModelConfig
    from .trainer import TrainConfig

    model_fields = {f.name: f.type for f in fields(ModelConfig)}
    train_fields = {f.name: f.type for f in fields(TrainConfig)}
    model_types = {"channels": int, "experts": int, "top_k": int, "kernel_size": int,
                   "prior_tokens": int, "prior_width": int, "vocab_seed": int,
                   "levels": int, "restore_blocks": int, "seed": int, "routing": str,
                   "scaled_attention": bool, "rfa_residual": bool,
                   "renormalize_topk": bool, "dtype": str}
    train_types = {"batch_size": int, "total_steps": int, "lr_start": float,
                   "lr_end": float, "edge_weight": float, "crop": int, "seed": int,
                   "checkpoint_every": int, "loss_reduction": str}
    model_kwargs, train_kwargs = {}, {}
    for key, raw in pairs.items():
        if key in model_fields:
            model_kwargs[key] = _typed(raw, model_types[key])
            if key == "seed":
                train_kwargs.setdefault("seed", _typed(raw, int))
        elif key in train_fields:
            train_kwargs[key] = _typed(raw, train_types[key])
        else:
            raise ConfigurationError(f"unknown config key {key!r}")
    return model_kwargs, train_kwargs


def _cmd_gen_data(args) -> int:
    from .synthdata import build_dataset

    types = [t.strip() for t in args.types.split(",") if t.strip()]
    mix = [float(v) for v in args.severity_mix.split(",")]
    manifest = build_dataset(args.count, types, mix, seed=args.seed,
                             out_dir=args.out, size=(args.size, args.size),
                             holdout=args.holdout)
    print(f"wrote {manifest}")
    if args.holdout:
        print(f"wrote {Path(args.out) / 'manifest_holdout.txt'}")
    return 0


def _cmd_train(args) -> int:
    from .model import ModelConfig, parse_config_lines
    from .synthdata import load_manifest
    from .trainer import TrainConfig, train

    raw = {}
    if args.config:
        raw.update(parse_config_lines(Path(args.config).read_text(encoding="utf-8")))
    for item in args.set:
        if "=" not in item:
            raise ConfigurationError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        raw[key.strip()] = value.strip()
    model_kwargs, train_kwargs = _split_config(raw)
    model_cfg = ModelConfig(**model_kwargs)
    train_cfg = TrainConfig(**train_kwargs)
    manifest = load_manifest(args.data)

    start = time.time()

    def progress(step, row):
        if not args.quiet and (step % 100 == 0 or step + 1 == train_cfg.total_steps):
            print(f"step {step:6d}  lr {row['lr']:.3e}  total {row['total']:.5f}  "
                  f"({time.time() - start:.0f}s)")

    result = train(model_cfg, train_cfg, manifest, out_dir=args.out,
                   resume=args.resume, progress=progress)
    print(f"final checkpoint: {result.final_checkpoint}")
    print(f"loss log: {result.log_path}")
    return 0


def _cmd_eval(args) -> int:
    import csv

    from .analysis import (
        evaluate_samples,
        severity_table,
        type_table,
        write_severity_csv,
        write_type_csv,
    )
    from .model import ModelState
    from .synthdata import load_manifest

    state, _, _ = ModelState.load(args.ckpt)
    manifest = load_manifest(args.data)
    rows = evaluate_samples(state, manifest)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["sample_id", "type", "severity", "psnr_degraded",
                         "psnr_restored", "ssim_restored"])
        for r in rows:
            writer.writerow([r["sample_id"], r["type"], r["severity"],
                             repr(r["psnr_degraded"]), repr(r["psnr_restored"]),
                             repr(r["ssim_restored"])])
    print(f"wrote {out}")
    if args.by_severity:
        path = write_severity_csv(severity_table(rows), out.parent)
        print(f"wrote {path}")
    if args.by_type:
        path = write_type_csv(type_table(rows), out.parent)
        print(f"wrote {path}")
    mean_restored = float(np.mean([r["psnr_restored"] for r in rows]))
    mean_degraded = float(np.mean([r["psnr_degraded"] for r in rows]))
    print(f"mean psnr: degraded {mean_degraded:.3f} dB -> restored {mean_restored:.3f} dB")
    return 0


def _cmd_bench(args) -> int:
    import csv

    from . import tensor as T
    from .experts import count_expert_flops, dense_mixture, expert_convolve, select_topk
    from .model import ModelState

    rng = np.random.default_rng(args.seed)
    if args.ckpt:
        state, _, _ = ModelState.load(args.ckpt)
        filters = state.params["block0.experts.filters"]
        n, k = state.config.experts, state.config.kernel_size
        c = state.config.channels
        top_k = args.k or state.config.top_k
    else:
        n, c, k, top_k = args.n, args.c, 3, args.k
        filters = T.Tensor(rng.standard_normal((n, k, k, c, c)).astype(np.float32) * 0.1)
    side = args.size
    x = T.Tensor(rng.standard_normal((side, side, c)).astype(np.float32))
    scores = T.softmax_lastdim(
        T.Tensor(rng.standard_normal((side, side, n)).astype(np.float32)))
    sel = select_topk(scores, top_k)
    report = count_expert_flops(sel, filters)

    def median_ns(fn):
        times = []
        for _ in range(max(args.repeat, 1)):
            t0 = time.perf_counter_ns()
            fn()
            times.append(time.perf_counter_ns() - t0)
        return int(np.median(times))

    with T.no_grad():
        sparse_out = expert_convolve(x, filters, sel)
        dense_out = dense_mixture(x, filters, scores)
        wall_sparse = median_ns(lambda: expert_convolve(x, filters, sel))
        wall_dense = median_ns(lambda: dense_mixture(x, filters, scores))
    del sparse_out, dense_out

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["N", "K", "H", "W", "C", "sparse_macs", "dense_macs",
                         "ratio", "wall_ns_sparse", "wall_ns_dense"])
        writer.writerow([n, top_k, side, side, c, report.sparse_macs,
                         report.dense_macs, repr(report.ratio), wall_sparse, wall_dense])
    print(f"wrote {out}")
    print(f"macs sparse/dense = {report.sparse_macs}/{report.dense_macs} "
          f"(ratio {report.ratio:g}); wall ns sparse/dense = {wall_sparse}/{wall_dense}")
    return 0


def _cmd_inspect(args) -> int:
    from . import tensor as T
    from .analysis import heatmap_montage
    from .model import ModelState, forward
    from .prior import DegradationDescriptor
    from .serialization import save_tensor
    from .synthdata import load_png, save_png

    state, _, _ = ModelState.load(args.ckpt)
    img = load_png(args.image)
    descriptor = DegradationDescriptor.from_line(args.descriptor)
    dump = Path(args.dump)
    dump.mkdir(parents=True, exist_ok=True)
    with T.no_grad():
        restored, diag = forward(img, descriptor, state)
    print(diag.prompt)
    tensors = {
        "features": diag.features.data,
        "degradation_map": diag.deg_map.data,
        "scores": diag.scores.data,
        "intermediate": diag.intermediate.data,
        "aggregated": diag.aggregated.data,
    }
    for name, arr in tensors.items():
        save_tensor(dump / f"{name}.ldrt", arr)
        heatmap_montage(arr, dump / f"{name}.png")
    save_png(dump / "restored.png", restored.data)
    save_png(dump / "input.png", img)
    print(f"wrote {len(tensors) * 2 + 2} files under {dump}")
    return 0


def _cmd_usage(args) -> int:
    from .analysis import expert_usage, write_usage_outputs
    from .model import ModelState
    from .synthdata import load_manifest

    state, _, _ = ModelState.load(args.ckpt)
    types, rows = expert_usage(state, load_manifest(args.data))
    csv_path, png_path = write_usage_outputs(types, rows, args.out)
    print(f"wrote {csv_path}")
    print(f"wrote {png_path}")
    return 0


def _cmd_regions(args) -> int:
    from .analysis import expert_regions
    from .model import ModelState
    from .synthdata import load_manifest

    state, _, _ = ModelState.load(args.ckpt)
    hits = expert_regions(state, load_manifest(args.data), args.expert, args.top,
                          args.out)
    print(f"wrote {len(hits)} patches under {args.out}")
    return 0


def _cmd_zero_out(args) -> int:
    from .analysis import write_zero_out_csv, zero_out
    from .model import ModelState
    from .synthdata import load_manifest

    state, _, _ = ModelState.load(args.ckpt)
    fractions = [float(v) for v in args.fractions.split(",")]
    rows = zero_out(state, load_manifest(args.data), fractions)
    path = write_zero_out_csv(rows, args.out)
    for fraction, n_zero, masked, baseline, delta in rows:
        print(f"fraction {fraction:g}: zeroed {n_zero} channels, "
              f"psnr {masked:.3f} dB (baseline {baseline:.3f}, delta {delta:+.3f})")
    print(f"wrote {path}")
    return 0


def _cmd_ablate(args) -> int:
    from .analysis import routing_ablation, write_ablation_csv
    from .synthdata import load_manifest

    result = routing_ablation(args.ckpt_pixel, args.ckpt_global,
                              load_manifest(args.data))
    path = write_ablation_csv(result, args.out)
    print(f"pixel  : psnr {result['pixel']['psnr']:.3f} ssim {result['pixel']['ssim']:.4f}")
    print(f"global : psnr {result['global']['psnr']:.3f} ssim {result['global']['ssim']:.4f}")
    print(f"delta  : psnr {result['delta']['psnr']:+.3f} ssim {result['delta']['ssim']:+.4f}")
    print(f"wrote {path}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import check_model_gradients, run_full_suite, run_operation_checks

    if args.module == "end_to_end_model":
        report_results = [check_model_gradients()]
    elif args.module:
        ops = run_operation_checks()
        report_results = [r for r in ops.results if r.name == args.module]
        if not report_results:
            known = sorted(r.name for r in ops.results) + ["end_to_end_model"]
            raise ConfigurationError(
                f"unknown check {args.module!r}; known: {', '.join(known)}"
            )
    else:
        report_results = run_full_suite().results
    failed = False
    for result in report_results:
        print(result)
        failed = failed or not result.passed
    return 3 if failed else 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval": _cmd_eval,
    "bench": _cmd_bench,
    "inspect": _cmd_inspect,
    "usage": _cmd_usage,
    "regions": _cmd_regions,
    "zero-out": _cmd_zero_out,
    "ablate-routing": _cmd_ablate,
    "gradcheck": _cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = _build_parser()
    args = parser.parse_args(argv)
    if args.version:
        print(f"unweather {__version__} (python {sys.version.split()[0]}, "
              f"numpy {np.__version__})")
        return 0
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 1
    limiter = None
    if args.threads is not None:
        from threadpoolctl import threadpool_limits
        limiter = threadpool_limits(limits=max(1, args.threads))  # noqa: F841 held until exit
    try:
        return _COMMANDS[args.command](args)
    except UnweatherError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
