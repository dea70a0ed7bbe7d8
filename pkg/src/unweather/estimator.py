"""Scikit-learn style estimator wrapping the restoration pipeline.

``WeatherRestorer`` follows the sklearn contract: constructor arguments are
stored verbatim (so ``get_params`` / ``set_params`` / ``clone`` work), all
learned state lands in trailing-underscore attributes during ``fit``, and
``predict`` / ``transform`` / ``score`` operate on image stacks.

    >>> model = WeatherRestorer(steps=200, crop=32)
    >>> model.fit(degraded_stack, clean_stack, descriptors=descs)
    >>> restored = model.predict(degraded_stack, descriptors=descs)
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.exceptions import NotFittedError

from . import tensor as T
from .losses import psnr
from .model import ModelConfig, ModelState, forward
from .prior import DegradationDescriptor
from .trainer import TrainConfig, train
from .validation import ValidationError, as_image_stack

_NO_WEATHER = DegradationDescriptor(types=("none",), severity="slight", coverage=1.0, seed=0)


class WeatherRestorer(BaseEstimator):
    """All-in-one weather restoration model with descriptor conditioning.

    fit(X, y): X are degraded images (n, H, W, 3) in [0, 1], y the matching
    clean images.  ``descriptors`` tells the model what is wrong with each
    image (a DegradationDescriptor, a manifest-style line, or None for "no
    weather").
    """

    def __init__(self, channels=32, experts=16, top_k=2, prior_tokens=8,
                 prior_width=256, levels=2, restore_blocks=1, routing="pixel",
                 scaled_attention=False, rfa_residual=True, renormalize_topk=False,
                 steps=2000, batch_size=4, lr_start=2e-4, lr_end=1e-6,
                 edge_weight=0.05, crop=64, checkpoint_every=500, seed=0,
                 out_dir=None):
        self.channels = channels
        self.experts = experts
        self.top_k = top_k
        self.prior_tokens = prior_tokens
        self.prior_width = prior_width
        self.levels = levels
        self.restore_blocks = restore_blocks
        self.routing = routing
        self.scaled_attention = scaled_attention
        self.rfa_residual = rfa_residual
        self.renormalize_topk = renormalize_topk
        self.steps = steps
        self.batch_size = batch_size
        self.lr_start = lr_start
        self.lr_end = lr_end
        self.edge_weight = edge_weight
        self.crop = crop
        self.checkpoint_every = checkpoint_every
        self.seed = seed
        self.out_dir = out_dir

    # ------------------------------------------------------------ config

    def _model_config(self) -> ModelConfig:
        return ModelConfig(
            channels=self.channels, experts=self.experts, top_k=self.top_k,
            prior_tokens=self.prior_tokens, prior_width=self.prior_width,
            levels=self.levels, restore_blocks=self.restore_blocks, routing=self.routing,
            scaled_attention=self.scaled_attention, rfa_residual=self.rfa_residual,
            renormalize_topk=self.renormalize_topk, seed=self.seed,
        )

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            batch_size=self.batch_size, total_steps=self.steps,
            lr_start=self.lr_start, lr_end=self.lr_end,
            edge_weight=self.edge_weight, crop=self.crop,
            seed=self.seed, checkpoint_every=self.checkpoint_every,
        )

    @staticmethod
    def _descriptors(descriptors, n: int) -> list[DegradationDescriptor]:
        if descriptors is None:
            return [_NO_WEATHER] * n
        if len(descriptors) != n:
            raise ValidationError(
                f"descriptors: expected {n} entries to match the image stack, "
                f"got {len(descriptors)}"
            )
        out = []
        for d in descriptors:
            if isinstance(d, DegradationDescriptor):
                out.append(d)
            elif isinstance(d, str):
                out.append(DegradationDescriptor.from_line(d))
            else:
                raise ValidationError(f"descriptors: cannot interpret {d!r}")
        return out

    # ------------------------------------------------------------ sklearn API

    def fit(self, X, y, descriptors=None):
        X = as_image_stack(X, "X")
        y = as_image_stack(y, "y")
        if X.shape != y.shape:
            raise ValidationError(f"fit: X shape {X.shape} and y shape {y.shape} disagree")
        descs = self._descriptors(descriptors, X.shape[0])
        pairs = [(y[i].astype(np.float32), X[i].astype(np.float32), descs[i])
                 for i in range(X.shape[0])]
        result = train(self._model_config(), self._train_config(), pairs,
                       out_dir=self.out_dir)
        self.state_ = result.state
        self.loss_log_ = result.loss_rows
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        return self

    def _require_fitted(self) -> ModelState:
        state = getattr(self, "state_", None)
        if state is None:
            raise NotFittedError(
                "This WeatherRestorer instance is not fitted yet; call fit or load first."
            )
        return state

    def predict(self, X, descriptors=None) -> np.ndarray:
        state = self._require_fitted()
        X = as_image_stack(X, "X")
        descs = self._descriptors(descriptors, X.shape[0])
        out = np.empty_like(X, dtype=np.float32)
        with T.no_grad():
            for i in range(X.shape[0]):
                restored, _ = forward(X[i].astype(np.float32), descs[i], state)
                out[i] = restored.data
        return out

    def transform(self, X, descriptors=None) -> np.ndarray:
        return self.predict(X, descriptors=descriptors)

    def score(self, X, y, descriptors=None) -> float:
        """Mean restored PSNR (dB) against the clean references."""
        y = as_image_stack(y, "y")
        restored = self.predict(X, descriptors=descriptors)
        return float(np.mean([psnr(restored[i], y[i]) for i in range(y.shape[0])]))

    # ------------------------------------------------------------ persistence

    def save(self, path) -> None:
        self._require_fitted().save(path)

    @classmethod
    def load(cls, path) -> "WeatherRestorer":
        state, _, _ = ModelState.load(path)
        cfg = state.config
        est = cls(channels=cfg.channels, experts=cfg.experts, top_k=cfg.top_k,
                  prior_tokens=cfg.prior_tokens, prior_width=cfg.prior_width,
                  levels=cfg.levels, restore_blocks=cfg.restore_blocks, routing=cfg.routing,
                  scaled_attention=cfg.scaled_attention, rfa_residual=cfg.rfa_residual,
                  renormalize_topk=cfg.renormalize_topk, seed=cfg.seed)
        est.state_ = state
        return est
