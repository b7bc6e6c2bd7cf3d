"""scikit-learn compatible front end.

:class:`LAGAEmbedder` learns from labelled images with ``fit(X, y)`` and maps
images to retrieval embeddings with ``transform(X)``, so it drops into
pipelines, ``clone`` and ``get_params``/``set_params`` like any transformer.
"""

from __future__ import annotations

from typing import Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.preprocessing import LabelEncoder
from sklearn.utils.validation import check_is_fitted

from .config import BRANCHES, AugConfig, Config, EvalConfig, LossConfig, ModelConfig, TrainConfig
from .errors import ShapeError


def check_images(X, size: Optional[Tuple[int, int]] = None) -> np.ndarray:
    """Validate a batch of ``3 x H x W`` float images and return it as float64."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 4 or X.shape[1] != 3:
        raise ShapeError(f"expected an array of shape (n_samples, 3, H, W), got {X.shape}")
    if len(X) == 0:
        raise ValueError("found an empty image batch")
    if not np.all(np.isfinite(X)):
        raise ValueError("images contain NaN or infinite values")
    if size is not None and X.shape[2:] != tuple(size):
        raise ShapeError(f"expected images of size {tuple(size)}, got {X.shape[2:]}")
    return X


class LAGAEmbedder(TransformerMixin, BaseEstimator):
    """Multi-branch attention embedder.

    Parameters mirror the model, loss and schedule configs. After ``fit``,
    ``model_`` holds the trained network, ``classes_`` the original labels,
    and ``history_`` the per-epoch losses.
    """

    def __init__(
        self,
        branches: Sequence[str] = BRANCHES,
        trunk_widths: Sequence[int] = (16, 32, 64),
        branch_channels: int = 128,
        reduction_width: int = 64,
        n_stripes: int = 3,
        leaky_slope: float = 0.01,
        dropout: float = 0.5,
        beta: float = 0.1,
        margin: float = 1.2,
        epsilon: float = 0.1,
        P: int = 5,
        K: int = 4,
        epochs: int = 30,
        base_lr: float = 8e-4,
        weight_decay: float = 5e-4,
        backbone_lr_divisor: float = 10.0,
        augment: bool = True,
        flip_average: bool = True,
        random_state: int = 0,
    ):
        self.branches = branches
        self.trunk_widths = trunk_widths
        self.branch_channels = branch_channels
        self.reduction_width = reduction_width
        self.n_stripes = n_stripes
        self.leaky_slope = leaky_slope
        self.dropout = dropout
        self.beta = beta
        self.margin = margin
        self.epsilon = epsilon
        self.P = P
        self.K = K
        self.epochs = epochs
        self.base_lr = base_lr
        self.weight_decay = weight_decay
        self.backbone_lr_divisor = backbone_lr_divisor
        self.augment = augment
        self.flip_average = flip_average
        self.random_state = random_state

    def _config(self, height: int, width: int, n_classes: int) -> Config:
        trunk = tuple(self.trunk_widths)
        return Config(
            model=ModelConfig(
                trunk_widths=trunk,
                trunk_strides=(2,) * len(trunk),
                branch_channels=self.branch_channels,
                reduction_width=self.reduction_width,
                input_height=height,
                input_width=width,
                n_stripes=self.n_stripes,
                leaky_slope=self.leaky_slope,
                dropout=self.dropout,
                n_classes=n_classes,
                branches=tuple(self.branches),
                seed=self.random_state,
            ),
            loss=LossConfig(beta=self.beta, margin=self.margin, epsilon=self.epsilon, P=self.P, K=self.K),
            train=TrainConfig(
                epochs=self.epochs,
                base_lr=self.base_lr,
                warmup_epochs=min(10, self.epochs),
                weight_decay=self.weight_decay,
                backbone_lr_divisor=self.backbone_lr_divisor,
                seed=self.random_state,
            ),
            aug=AugConfig(enabled=self.augment),
            eval=EvalConfig(flip_average=self.flip_average),
        )

    def fit(self, X, y):
        from .model import LAGANet
        from .training import Trainer

        X = check_images(X)
        y = np.asarray(y)
        if y.shape != (len(X),):
            raise ShapeError(f"y must have shape ({len(X)},), got {y.shape}")
        encoder = LabelEncoder().fit(y)
        labels = encoder.transform(y)
        self.config_ = self._config(X.shape[2], X.shape[3], len(encoder.classes_))
        self.model_ = LAGANet(self.config_.model)
        trainer = Trainer(self.model_, self.config_.loss, self.config_.train, self.config_.aug)
        self.history_ = trainer.fit(X, labels)
        self.classes_ = encoder.classes_
        self.input_size_ = (X.shape[2], X.shape[3])
        self.n_features_out_ = len(self.model_.head) * self.branch_channels
        return self

    def transform(self, X):
        from .evaluation import embed_images

        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        return embed_images(self.model_, X, self.config_)

    def predict(self, X):
        """Identity predicted by the averaged classifier heads."""
        from .augment import augment
        from .tensor import no_grad, softmax_rows

        check_is_fitted(self, "model_")
        X = check_images(X, self.input_size_)
        prepped = np.stack([augment(img, self.config_.aug, self.input_size_, None, "eval") for img in X])
        self.model_.eval()
        with no_grad():
            out = self.model_(prepped)
        probs = sum(softmax_rows(z).data for z in out.logits.values())
        return self.classes_[np.argmax(probs, axis=1)]
