"""Encoder-decoder backbone with the restoration block at the bottleneck.

The forward pass: descriptor -> prior tokens -> trainable projection;
image -> strided conv encoder; at the bottleneck one (or more) restoration
blocks run degradation-map measurement, sparse top-K expert convolution,
and map-guided aggregation; a nearest-upsample decoder with additive skip
connections and a sigmoid head produces the restored image.

All parameters live in a flat name -> Tensor mapping (the checkpoint key
space).  Initialization is uniform in +-1/sqrt(fan_in), biases zero, drawn
from a single seeded generator so a config fully determines the weights.
"""

from __future__ import annotations

from contextlib import contextmanager
from dataclasses import dataclass, field, fields

import numpy as np

from . import tensor as T
from .aggregation import MAX_ATTENTION_TOKENS, aggregate
from .degradation_map import measure_degradation_map
from .experts import (
    FlopReport,
    Selection,
    count_expert_flops,
    expert_convolve,
    pool_map,
    score_map,
    select_topk,
)
from .prior import (
    DEFAULT_TOKENS,
    DEFAULT_VL_WIDTH,
    DEFAULT_VOCAB_SEED,
    DegradationDescriptor,
    format_prompt,
    project_prior,
    stub_vl_encode,
)
from .serialization import load_checkpoint, save_checkpoint
from .validation import (
    ConfigurationError,
    ContractError,
    UnweatherError,
    as_image,
)

ROUTING_MODES = ("pixel", "global")


@dataclass(frozen=True)
class ModelConfig:
    channels: int = 32            # feature width C throughout the model
    experts: int = 16             # expert bank size N
    top_k: int = 2                # experts executed per pixel
    kernel_size: int = 3
    prior_tokens: int = DEFAULT_TOKENS
    prior_width: int = DEFAULT_VL_WIDTH
    vocab_seed: int = DEFAULT_VOCAB_SEED
    levels: int = 2               # stride-2 encoder stages
    restore_blocks: int = 1
    seed: int = 0
    routing: str = "pixel"        # "pixel" or "global" (whole-image ablation mode)
    scaled_attention: bool = False
    rfa_residual: bool = True
    renormalize_topk: bool = False
    dtype: str = "float32"        # "float64" for verification runs

    def __post_init__(self):
        for name in ("channels", "experts", "top_k", "kernel_size", "prior_tokens",
                     "prior_width", "levels", "restore_blocks"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise ConfigurationError(f"config.{name}: expected a positive integer, got {value!r}")
        if self.top_k > self.experts:
            raise ConfigurationError(
                f"config: top_k ({self.top_k}) must not exceed experts ({self.experts})"
            )
        if self.kernel_size % 2 == 0:
            raise ConfigurationError(f"config: kernel_size must be odd, got {self.kernel_size}")
        if self.prior_tokens < 2:
            raise ConfigurationError("config: prior_tokens must be at least 2")
        if self.routing not in ROUTING_MODES:
            raise ConfigurationError(f"config: routing must be one of {ROUTING_MODES}")
        if self.dtype not in ("float32", "float64"):
            raise ConfigurationError(f"config: dtype must be float32 or float64, got {self.dtype}")

    @property
    def np_dtype(self):
        return np.float64 if self.dtype == "float64" else np.float32

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "ModelConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"config: unknown keys {sorted(unknown)}")
        return cls(**data)


@dataclass
class ModelState:
    """All trainable parameters plus the configuration that shaped them."""

    config: ModelConfig
    params: dict[str, T.Tensor]

    def named_parameters(self):
        return self.params.items()

    def check_finite(self) -> None:
        for name, p in self.params.items():
            if not np.all(np.isfinite(p.data)):
                raise ContractError(f"parameter {name} contains non-finite values")

    def save(self, path, extra_tensors: dict[str, np.ndarray] | None = None,
             extra_meta: dict | None = None) -> None:
        tensors = {name: p.data for name, p in self.params.items()}
        if extra_tensors:
            tensors.update(extra_tensors)
        meta = {"config": self.config.to_dict()}
        if extra_meta:
            meta.update(extra_meta)
        save_checkpoint(path, tensors, meta=meta)

    @classmethod
    def load(cls, path):
        """Returns (state, extra tensor dict, meta dict)."""
        tensors, meta = load_checkpoint(path)
        if meta is None or "config" not in meta:
            raise ConfigurationError(f"{path}: checkpoint has no embedded model config")
        config = ModelConfig.from_dict(meta["config"])
        expected = set(parameter_shapes(config))
        params, extra = {}, {}
        for name, arr in tensors.items():
            if name in expected:
                params[name] = T.Tensor(arr.astype(config.np_dtype), requires_grad=True)
            else:
                extra[name] = arr
        missing = expected - set(params)
        if missing:
            raise ConfigurationError(f"{path}: checkpoint missing parameters {sorted(missing)}")
        return cls(config=config, params=params), extra, meta


def parameter_shapes(cfg: ModelConfig) -> dict[str, tuple]:
    """The full parameter name space and shapes for a configuration."""
    c, n, k = cfg.channels, cfg.experts, cfg.kernel_size
    shapes = {
        "enc.stem.w": (3, 3, 3, c),
        "enc.stem.b": (c,),
        "prior.w1": (cfg.prior_width, c),
        "prior.b1": (c,),
        "prior.w2": (c, c),
        "prior.b2": (c,),
        "dec.head.w": (3, 3, c, 3),
        "dec.head.b": (3,),
    }
    for i in range(cfg.levels):
        shapes[f"enc.down{i}.w"] = (3, 3, c, c)
        shapes[f"enc.down{i}.b"] = (c,)
        shapes[f"dec.up{i}.w"] = (3, 3, c, c)
        shapes[f"dec.up{i}.b"] = (c,)
    for b in range(cfg.restore_blocks):
        p = f"block{b}"
        shapes[f"{p}.dmm.wq"] = (c, c)
        shapes[f"{p}.dmm.wk"] = (c, c)
        shapes[f"{p}.dmm.wv"] = (c, c)
        shapes[f"{p}.score.w1"] = (c, c)
        shapes[f"{p}.score.b1"] = (c,)
        shapes[f"{p}.score.w2"] = (c, n)
        shapes[f"{p}.score.b2"] = (n,)
        shapes[f"{p}.experts.filters"] = (n, k, k, c, c)
        shapes[f"{p}.rfa.wq"] = (c, c)
        shapes[f"{p}.rfa.wk"] = (c, c)
        shapes[f"{p}.rfa.wv"] = (c, c)
        shapes[f"{p}.rfa.ffn1.w"] = (3, 3, c, 2 * c)
        shapes[f"{p}.rfa.ffn1.b"] = (2 * c,)
        shapes[f"{p}.rfa.ffn2.w"] = (3, 3, 2 * c, c)
        shapes[f"{p}.rfa.ffn2.b"] = (c,)
    return shapes


def _fan_in(name: str, shape: tuple) -> int:
    if len(shape) == 1:          # biases
        return 0
    if len(shape) == 2:          # projection matrix (in, out)
        return shape[0]
    if len(shape) == 4:          # conv filter (k, k, cin, cout)
        return shape[0] * shape[1] * shape[2]
    if len(shape) == 5:          # expert bank (n, k, k, cin, cout)
        return shape[1] * shape[2] * shape[3]
    raise ConfigurationError(f"no fan-in rule for parameter {name} with shape {shape}")


def init_state(cfg: ModelConfig) -> ModelState:
    """Seeded uniform +-1/sqrt(fan_in) weights, zero biases."""
    rng = np.random.default_rng(cfg.seed)
    params = {}
    for name, shape in parameter_shapes(cfg).items():
        fan = _fan_in(name, shape)
        if fan == 0:
            data = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan)
            data = rng.uniform(-bound, bound, size=shape)
        params[name] = T.Tensor(data.astype(cfg.np_dtype), requires_grad=True)
    return ModelState(config=cfg, params=params)


@contextmanager
def _stage(name: str):
    """Re-raise package errors with the pipeline stage prepended."""
    try:
        yield
    except UnweatherError as exc:
        raise type(exc)(f"stage '{name}': {exc}") from exc


@dataclass
class BlockDiagnostics:
    deg_map: T.Tensor
    scores: T.Tensor
    selection: Selection
    intermediate: T.Tensor
    aggregated: T.Tensor
    flops: FlopReport


@dataclass
class Diagnostics:
    """Intermediate results of one forward pass, for inspection and analysis."""

    prompt: str
    prior_text: np.ndarray
    prior_emb: T.Tensor
    features: T.Tensor
    blocks: list[BlockDiagnostics] = field(default_factory=list)

    # single-block conveniences (the default configuration)
    @property
    def deg_map(self):
        return self.blocks[-1].deg_map

    @property
    def scores(self):
        return self.blocks[-1].scores

    @property
    def selection(self):
        return self.blocks[-1].selection

    @property
    def intermediate(self):
        return self.blocks[-1].intermediate

    @property
    def aggregated(self):
        return self.blocks[-1].aggregated


def check_geometry(cfg: ModelConfig, height: int, width: int) -> None:
    factor = 2 ** cfg.levels
    if height % factor or width % factor:
        raise ConfigurationError(
            f"image size {height}x{width} not divisible by 2^levels = {factor}"
        )
    tokens = (height // factor) * (width // factor)
    if tokens > MAX_ATTENTION_TOKENS:
        raise ConfigurationError(
            f"bottleneck would hold {tokens} tokens; the aggregation block is "
            f"quadratic in tokens and is capped at {MAX_ATTENTION_TOKENS}"
        )


def encode(img: T.Tensor, state: ModelState):
    """Stem conv then stride-2 conv + relu per level; returns (features, skips)."""
    cfg = state.config
    check_geometry(cfg, img.shape[0], img.shape[1])
    p = state.params
    feat = T.conv2d(img, p["enc.stem.w"], bias=p["enc.stem.b"])
    skips = [feat]
    for i in range(cfg.levels):
        feat = T.relu(T.conv2d(feat, p[f"enc.down{i}.w"], bias=p[f"enc.down{i}.b"], stride=2))
        if i < cfg.levels - 1:
            skips.append(feat)
    return feat, skips


def decode(feat: T.Tensor, skips, state: ModelState) -> T.Tensor:
    """Upsample + conv + relu + additive skip per level, sigmoid head."""
    cfg = state.config
    p = state.params
    for i in range(cfg.levels):
        feat = T.relu(T.conv2d(T.upsample2x(feat), p[f"dec.up{i}.w"], bias=p[f"dec.up{i}.b"]))
        skip = skips[cfg.levels - 1 - i]
        if skip.shape != feat.shape:
            raise ContractError(
                f"decoder level {i}: skip shape {skip.shape} does not match {feat.shape}"
            )
        feat = T.add(feat, skip)
    return T.sigmoid(T.conv2d(feat, p["dec.head.w"], bias=p["dec.head.b"]))


def restoration_block(feat: T.Tensor, prior_emb: T.Tensor, state: ModelState,
                      block: int) -> tuple[T.Tensor, BlockDiagnostics]:
    cfg = state.config
    prefix = f"block{block}"
    with _stage("degradation-map"):
        deg_map = measure_degradation_map(
            feat, prior_emb, state.params, prefix=f"{prefix}.dmm", scaled=cfg.scaled_attention
        )
    with _stage("expert-selection"):
        score_input = pool_map(deg_map) if cfg.routing == "global" else deg_map
        scores = score_map(score_input, state.params, prefix=f"{prefix}.score")
        sel = select_topk(scores, cfg.top_k, renormalize=cfg.renormalize_topk)
    with _stage("expert-convolution"):
        filters = state.params[f"{prefix}.experts.filters"]
        x_int = expert_convolve(feat, filters, sel)
        flops = count_expert_flops(sel, filters, spatial=feat.shape[:2])
    with _stage("aggregation"):
        agg = aggregate(
            deg_map, x_int, state.params, prefix=f"{prefix}.rfa",
            residual=cfg.rfa_residual, scaled=cfg.scaled_attention,
        )
    diag = BlockDiagnostics(
        deg_map=deg_map, scores=scores, selection=sel,
        intermediate=x_int, aggregated=agg, flops=flops,
    )
    return agg, diag


def forward(img, descriptor: DegradationDescriptor, state: ModelState,
            bottleneck_mask: np.ndarray | None = None):
    """Full restoration pass; returns (restored image Tensor, Diagnostics).

    ``bottleneck_mask``, when given, is a per-channel 0/1 vector applied to
    the aggregated bottleneck feature before decoding (the channel zero-out
    experiment).
    """
    cfg = state.config
    if not isinstance(img, T.Tensor):
        img = T.Tensor(as_image(img).astype(cfg.np_dtype))
    with _stage("prior"):
        prompt = format_prompt(descriptor)
        prior_text = stub_vl_encode(
            descriptor, vocab_seed=cfg.vocab_seed,
            tokens=cfg.prior_tokens, width=cfg.prior_width,
        )
        prior_emb = project_prior(prior_text, state.params)
    with _stage("encode"):
        feat, skips = encode(img, state)
    diag = Diagnostics(prompt=prompt, prior_text=prior_text, prior_emb=prior_emb, features=feat)
    for b in range(cfg.restore_blocks):
        feat, block_diag = restoration_block(feat, prior_emb, state, b)
        diag.blocks.append(block_diag)
    if bottleneck_mask is not None:
        mask = np.broadcast_to(
            np.asarray(bottleneck_mask, dtype=feat.data.dtype), feat.shape
        ).copy()
        feat = T.mul(feat, T.Tensor(mask))
    with _stage("decode"):
        restored = decode(feat, skips, state)
    return restored, diag


def parse_config_lines(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines; '#' starts a comment; blank lines skipped."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"config line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        key = key.strip()
        if key in out:
            raise ConfigurationError(f"config line {lineno}: duplicate key {key!r}")
        out[key] = value.strip()
    return out
