"""Degradation descriptors and their embedding path.

A real deployment would ask a large vision-language model what is wrong
with the picture; here a :class:`DegradationDescriptor` plays that role and
:func:`stub_vl_encode` turns it into a deterministic token matrix drawn
from a seeded vocabulary table.  The matrix is then projected into the
restoration model's channel width by a small trainable MLP
(:func:`project_prior`), which is the only learned part of this module.

Composition rule for mixed weather: the first ``tokens - 1`` rows are the
mean of the per-type vocabulary blocks for the descriptor's severity, and
the final row is a shared direction scaled by the coverage fraction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .validation import DimensionError, ValidationError, check_unit_interval

WEATHER_TYPES = ("rain", "snow", "haze", "raindrop", "none")
SEVERITIES = ("slight", "moderate", "heavy")

DEFAULT_TOKENS = 8        # rows in the prior matrix
DEFAULT_VL_WIDTH = 256    # channel width of the stub embedding
DEFAULT_VOCAB_SEED = 1234


@dataclass(frozen=True)
class DegradationDescriptor:
    """What is wrong with the image: weather type(s), severity, extent, seed."""

    types: tuple[str, ...]
    severity: str
    coverage: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if isinstance(self.types, str):
            object.__setattr__(self, "types", (self.types,))
        else:
            object.__setattr__(self, "types", tuple(self.types))
        if not self.types:
            raise ValidationError("descriptor: types must be nonempty")
        for t in self.types:
            if t not in WEATHER_TYPES:
                raise ValidationError(f"descriptor: unknown weather type {t!r}")
        if len(set(self.types)) != len(self.types):
            raise ValidationError(f"descriptor: duplicate types in {self.types}")
        if "none" in self.types and len(self.types) > 1:
            raise ValidationError("descriptor: 'none' cannot co-occur with other types")
        if self.severity not in SEVERITIES:
            raise ValidationError(f"descriptor: unknown severity {self.severity!r}")
        check_unit_interval(self.coverage, "descriptor.coverage")
        if not (0 <= int(self.seed) < 2 ** 64):
            raise ValidationError(f"descriptor.seed: expected u64, got {self.seed!r}")
        object.__setattr__(self, "coverage", float(self.coverage))
        object.__setattr__(self, "seed", int(self.seed))

    def to_line(self) -> str:
        """One-line form used in manifests and CLI flags."""
        return (
            f"types={'+'.join(self.types)};severity={self.severity};"
            f"coverage={self.coverage:g};seed={self.seed}"
        )

    @classmethod
    def from_line(cls, line: str) -> "DegradationDescriptor":
        fields = {}
        for part in line.strip().split(";"):
            if not part:
                continue
            if "=" not in part:
                raise ValidationError(f"descriptor line: malformed field {part!r} in {line!r}")
            key, value = part.split("=", 1)
            fields[key.strip()] = value.strip()
        unknown = set(fields) - {"types", "severity", "coverage", "seed"}
        if unknown:
            raise ValidationError(f"descriptor line: unknown keys {sorted(unknown)}")
        try:
            return cls(
                types=tuple(fields["types"].split("+")),
                severity=fields["severity"],
                coverage=float(fields.get("coverage", 1.0)),
                seed=int(fields.get("seed", 0)),
            )
        except KeyError as exc:
            raise ValidationError(f"descriptor line: missing field {exc} in {line!r}") from exc


def format_prompt(d: DegradationDescriptor) -> str:
    """Human-readable question/answer pair documenting what the stub encodes.

    Logged for inspection only; the stub encoder never parses it.
    """
    question = (
        "Please describe the type of weather, intensity, and obscured areas in the picture."
    )
    if d.types == ("none",):
        answer = "The picture shows no weather degradation; nothing is obscured."
    else:
        kinds = " and ".join(d.types)
        answer = (
            f"The type of weather in the picture is {kinds}; the intensity is "
            f"{d.severity}, and about {round(d.coverage * 100)}% of the area is obscured."
        )
    return f"Q: {question}\nA: {answer}"


def _vocab_row(vocab_seed: int, type_name: str, severity: str, row: int, width: int) -> np.ndarray:
    key = [
        int(vocab_seed),
        WEATHER_TYPES.index(type_name),
        SEVERITIES.index(severity),
        row,
    ]
    return np.random.default_rng(key).standard_normal(width)


def _coverage_row(vocab_seed: int, width: int) -> np.ndarray:
    return np.random.default_rng([int(vocab_seed), 10_007]).standard_normal(width)


def stub_vl_encode(
    d: DegradationDescriptor,
    vocab_seed: int = DEFAULT_VOCAB_SEED,
    tokens: int = DEFAULT_TOKENS,
    width: int = DEFAULT_VL_WIDTH,
) -> np.ndarray:
    """Deterministic descriptor embedding: a ``tokens x width`` float64 matrix.

    Pure function of (descriptor, vocab_seed, dims); identical across
    processes.  The descriptor's image seed does not participate: two
    images with the same weather get the same prior.
    """
    if tokens < 2:
        raise ValidationError(f"stub_vl_encode: need at least 2 tokens, got {tokens}")
    out = np.zeros((tokens, width), dtype=np.float64)
    for row in range(tokens - 1):
        block = [_vocab_row(vocab_seed, t, d.severity, row, width) for t in d.types]
        out[row] = np.mean(block, axis=0)
    out[tokens - 1] = d.coverage * _coverage_row(vocab_seed, width)
    return out


def project_prior(prior_text: np.ndarray | T.Tensor, params: dict[str, T.Tensor]) -> T.Tensor:
    """Row-wise two-layer MLP mapping the stub embedding into model width.

    params: w1 (width x C), b1 (C), w2 (C x C), b2 (C).  Gradients flow to
    all four.
    """
    w1, b1, w2, b2 = params["prior.w1"], params["prior.b1"], params["prior.w2"], params["prior.b2"]
    if isinstance(prior_text, T.Tensor):
        p = prior_text
    else:
        p = T.Tensor(np.asarray(prior_text, dtype=w1.dtype))
    if p.data.ndim != 2 or p.shape[1] != w1.shape[0]:
        raise DimensionError(
            f"project_prior: prior width {p.shape} does not match projection {w1.shape}"
        )
    hidden = T.relu(T.add_lastdim(T.matmul(p, w1), b1))
    return T.add_lastdim(T.matmul(hidden, w2), b2)
