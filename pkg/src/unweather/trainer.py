"""Training loop: Adam, cosine learning-rate decay, checkpoints, resume.

Everything random in the loop (shuffling, crop offsets) is a pure function
of (seed, step), never of carried generator state, so resuming from a
checkpoint continues bit-for-bit where an uninterrupted run would be.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import tensor as T
from .losses import total_loss
from .model import ModelConfig, ModelState, forward, init_state
from .synthdata import DatasetManifest, load_pairs
from .validation import ConfigurationError, ContractError, TrainingAborted

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

_SHUFFLE_TAG = 333
_CROP_TAG = 444


@dataclass(frozen=True)
class TrainConfig:
    batch_size: int = 4
    total_steps: int = 2000
    lr_start: float = 2e-4
    lr_end: float = 1e-6
    edge_weight: float = 0.05    # balance between charbonnier and edge terms
    crop: int = 64
    seed: int = 0
    checkpoint_every: int = 500
    loss_reduction: str = "mean"

    def __post_init__(self):
        if self.total_steps < 1:
            raise ConfigurationError("train config: total_steps must be >= 1")
        if self.batch_size < 1 or self.checkpoint_every < 1 or self.crop < 1:
            raise ConfigurationError("train config: batch_size, checkpoint_every, crop must be >= 1")
        if not (self.lr_start > self.lr_end > 0):
            raise ConfigurationError(
                f"train config: need lr_start > lr_end > 0, got {self.lr_start}, {self.lr_end}"
            )

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"train config: unknown keys {sorted(unknown)}")
        return cls(**data)


def cosine_lr(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from lr_start (step 0) to lr_end (step total_steps)."""
    if not 0 <= step <= cfg.total_steps:
        raise ContractError(f"cosine_lr: step {step} outside [0, {cfg.total_steps}]")
    span = cfg.lr_start - cfg.lr_end
    return cfg.lr_end + 0.5 * span * (1.0 + np.cos(np.pi * step / cfg.total_steps))


@dataclass
class AdamState:
    """First/second moment buffers mirroring the parameters, plus step count."""

    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0

    @classmethod
    def for_model(cls, state: ModelState) -> "AdamState":
        m = {name: np.zeros_like(p.data) for name, p in state.named_parameters()}
        v = {name: np.zeros_like(p.data) for name, p in state.named_parameters()}
        return cls(m=m, v=v, t=0)

    def to_tensors(self) -> dict[str, np.ndarray]:
        out = {f"adam.m:{k}": arr for k, arr in self.m.items()}
        out.update({f"adam.v:{k}": arr for k, arr in self.v.items()})
        return out

    @classmethod
    def from_tensors(cls, extra: dict[str, np.ndarray], state: ModelState, t: int) -> "AdamState":
        opt = cls.for_model(state)
        opt.t = t
        for name in opt.m:
            key_m, key_v = f"adam.m:{name}", f"adam.v:{name}"
            if key_m not in extra or key_v not in extra:
                raise ConfigurationError(f"checkpoint missing optimizer buffers for {name}")
            opt.m[name] = extra[key_m].astype(opt.m[name].dtype)
            opt.v[name] = extra[key_v].astype(opt.v[name].dtype)
        return opt


def adam_step(state: ModelState, opt: AdamState, lr: float,
              beta1: float = ADAM_BETA1, beta2: float = ADAM_BETA2,
              eps: float = ADAM_EPS) -> None:
    """Bias-corrected Adam update, in place; missing gradients count as zero."""
    opt.t += 1
    bc1 = 1.0 - beta1 ** opt.t
    bc2 = 1.0 - beta2 ** opt.t
    for name, p in state.named_parameters():
        g = p.grad
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ContractError(f"adam_step: gradient shape mismatch for {name}")
        m = opt.m[name]
        v = opt.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * (g * g)
        p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + eps)


def batch_indices(seed: int, step: int, batch_size: int, n: int) -> list[int]:
    """Epoch-shuffled sample indices for one step, derived from (seed, step)."""
    out = []
    cursor = step * batch_size
    while len(out) < batch_size:
        epoch, offset = divmod(cursor, n)
        perm = np.random.default_rng([seed, _SHUFFLE_TAG, epoch]).permutation(n)
        take = min(batch_size - len(out), n - offset)
        out.extend(int(i) for i in perm[offset : offset + take])
        cursor += take
    return out


def crop_offsets(seed: int, step: int, count: int, max_y: int, max_x: int):
    rng = np.random.default_rng([seed, _CROP_TAG, step])
    return [(int(rng.integers(0, max_y + 1)), int(rng.integers(0, max_x + 1)))
            for _ in range(count)]


@dataclass
class TrainResult:
    state: ModelState
    opt: AdamState
    loss_rows: list[dict]
    final_checkpoint: Path | None
    log_path: Path | None


def _resolve_pairs(data):
    if isinstance(data, DatasetManifest):
        return load_pairs(data)
    return list(data)


def _write_loss_log(path: Path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "lr", "char", "edge", "total"])
        for row in rows:
            writer.writerow([row["step"], repr(row["lr"]), repr(row["char"]),
                             repr(row["edge"]), repr(row["total"])])


def train(model_cfg: ModelConfig, train_cfg: TrainConfig, data, out_dir=None,
          resume=None, progress=None) -> TrainResult:
    """Run the full loop; returns the final state and the loss log.

    ``data`` is a DatasetManifest or an in-memory list of (clean, degraded,
    descriptor) triples.  ``out_dir``, when given, receives ``loss_log.csv``
    and ``step_<n>.ldrc`` checkpoints.  ``resume`` continues from a
    checkpoint written by this function.
    """
    pairs = _resolve_pairs(data)
    if not pairs:
        raise ConfigurationError("train: empty dataset")
    height, width = pairs[0][0].shape[:2]
    crop = train_cfg.crop
    if crop > height or crop > width:
        raise ConfigurationError(f"train: crop {crop} exceeds image size {height}x{width}")
    if crop % (2 ** model_cfg.levels):
        raise ConfigurationError(
            f"train: crop {crop} not divisible by 2^levels = {2 ** model_cfg.levels}"
        )

    if resume is not None:
        state, extra, meta = ModelState.load(resume)
        if state.config != model_cfg:
            raise ConfigurationError("resume: checkpoint config differs from requested config")
        start_step = int(meta.get("step", 0))
        opt = AdamState.from_tensors(extra, state, t=start_step)
    else:
        state = init_state(model_cfg)
        opt = AdamState.for_model(state)
        start_step = 0

    out_path = Path(out_dir) if out_dir is not None else None
    if out_path is not None:
        out_path.mkdir(parents=True, exist_ok=True)

    def save(step: int) -> Path:
        ckpt = out_path / f"step_{step}.ldrc"
        state.save(ckpt, extra_tensors=opt.to_tensors(),
                   extra_meta={"step": step, "train_config": train_cfg.to_dict()})
        return ckpt

    loss_rows = []
    final_ckpt = None
    for step in range(start_step, train_cfg.total_steps):
        lr = cosine_lr(step, train_cfg)
        T.reset_tape()
        for _, p in state.named_parameters():
            p.zero_grad()
        idx = batch_indices(train_cfg.seed, step, train_cfg.batch_size, len(pairs))
        offsets = crop_offsets(train_cfg.seed, step, len(idx), height - crop, width - crop)
        batch_total = None
        char_sum = edge_sum = total_sum = 0.0
        for (i, (oy, ox)) in zip(idx, offsets):
            clean, degraded, descriptor = pairs[i]
            clean_c = clean[oy : oy + crop, ox : ox + crop]
            degraded_c = degraded[oy : oy + crop, ox : ox + crop]
            restored, _ = forward(degraded_c, descriptor, state)
            loss_t, report = total_loss(restored, clean_c.astype(state.config.np_dtype),
                                        lam=train_cfg.edge_weight,
                                        reduction=train_cfg.loss_reduction)
            batch_total = loss_t if batch_total is None else T.add(batch_total, loss_t)
            char_sum += report.char
            edge_sum += report.edge
            total_sum += report.total
        batch_loss = T.scalar_mul(batch_total, 1.0 / len(idx))
        if not np.isfinite(batch_loss.item()):
            raise TrainingAborted(step, "non-finite loss; last checkpoint retained")
        T.backward(batch_loss)
        adam_step(state, opt, lr)
        T.reset_tape()
        loss_rows.append({
            "step": step, "lr": lr,
            "char": char_sum / len(idx),
            "edge": edge_sum / len(idx),
            "total": total_sum / len(idx),
        })
        done = step + 1
        if out_path is not None and (done % train_cfg.checkpoint_every == 0
                                     or done == train_cfg.total_steps):
            state.check_finite()
            final_ckpt = save(done)
        if progress is not None:
            progress(step, loss_rows[-1])

    log_path = None
    if out_path is not None:
        log_path = out_path / "loss_log.csv"
        _write_loss_log(log_path, loss_rows)
        if final_ckpt is None:
            final_ckpt = save(train_cfg.total_steps)
    return TrainResult(state=state, opt=opt, loss_rows=loss_rows,
                       final_checkpoint=final_ckpt, log_path=log_path)
