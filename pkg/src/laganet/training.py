"""Learning-rate schedule, Adam with coupled L2, and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from . import checkpoint
from .augment import augment
from .config import AugConfig, Config, LossConfig, ModelConfig, TrainConfig
from .data import Manifest
from .errors import NumericInputError, TrainingError, UsageError
from .losses import total_loss
from .model import LAGANet
from .nn import Parameter
from .sampling import pk_sample

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("epoch", "lr", "loss_total", "loss_xent", "loss_triplet")


def lr_at(epoch: int, cfg: TrainConfig) -> float:
    """Linear warmup from ``warmup_start_lr`` (epoch 1) to ``base_lr`` (epoch
    ``warmup_epochs``), then step decay at the epochs listed in ``cfg.decay``."""
    if not 1 <= epoch <= cfg.epochs:
        raise UsageError(f"epoch must lie in [1, {cfg.epochs}], got {epoch}")
    if epoch <= cfg.warmup_epochs:
        if cfg.warmup_epochs == 1:
            return cfg.base_lr
        t = (epoch - 1) / (cfg.warmup_epochs - 1)
        return cfg.warmup_start_lr + (cfg.base_lr - cfg.warmup_start_lr) * t
    rate = cfg.base_lr
    for start in sorted(cfg.decay):
        if epoch >= start:
            rate = cfg.decay[start]
    return rate


class Adam:
    """Adam with bias correction and L2 weight decay added to the gradient.

    ``lr_scale`` maps parameter names to a multiplier on the step size; the
    backbone group uses ``1 / backbone_lr_divisor``.
    """

    def __init__(
        self,
        params: Sequence[Tuple[str, Parameter]],
        weight_decay: float = 0.0,
        betas: Tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        lr_scale: Optional[Dict[str, float]] = None,
    ):
        self.params = list(params)
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.lr_scale = lr_scale or {}
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.v = {n: np.zeros_like(p.data) for n, p in self.params}

    def step(self, lr: float) -> None:
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m, v = self.m[name], self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            step = lr * self.lr_scale.get(name, 1.0)
            p.data -= step * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {"optim.step": np.array(float(self.t))}
        for name, _ in self.params:
            state[f"optim.m.{name}"] = self.m[name].copy()
            state[f"optim.v.{name}"] = self.v[name].copy()
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        self.t = int(state["optim.step"])
        for name, _ in self.params:
            self.m[name][...] = state[f"optim.m.{name}"]
            self.v[name][...] = state[f"optim.v.{name}"]


def adam_step(params, grads, state: Optional[dict], lr: float, weight_decay: float = 0.0,
              betas=(0.9, 0.999), eps: float = 1e-8):
    """Functional Adam step on plain arrays; returns ``(new_params, new_state)``."""
    state = state or {"t": 0, "m": [np.zeros_like(p) for p in params], "v": [np.zeros_like(p) for p in params]}
    t = state["t"] + 1
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params, grads, state["m"], state["v"]):
        g = g + weight_decay * p
        m = betas[0] * m + (1 - betas[0]) * g
        v = betas[1] * v + (1 - betas[1]) * g * g
        mhat = m / (1 - betas[0] ** t)
        vhat = v / (1 - betas[1] ** t)
        new_p.append(p - lr * mhat / (np.sqrt(vhat) + eps))
        new_m.append(m)
        new_v.append(v)
    return new_p, {"t": t, "m": new_m, "v": new_v}


def make_optimizer(model: LAGANet, cfg: TrainConfig) -> Adam:
    backbone = set(model.backbone_parameter_names())
    scale = {n: 1.0 / cfg.backbone_lr_divisor for n in backbone}
    return Adam(
        list(model.named_parameters()),
        weight_decay=cfg.weight_decay,
        betas=(cfg.adam_beta1, cfg.adam_beta2),
        eps=cfg.adam_eps,
        lr_scale=scale,
    )


@dataclass
class EpochLog:
    epoch: int
    lr: float
    loss_total: float
    loss_xent: float
    loss_triplet: float

    def row(self) -> List[str]:
        return [str(self.epoch), repr(self.lr), repr(self.loss_total), repr(self.loss_xent), repr(self.loss_triplet)]


class Trainer:
    """Runs PK-batched epochs over in-memory images.

    Randomness for iteration ``it`` of epoch ``e`` comes from a generator
    seeded with ``(seed, e, it)``, so a run resumed from a checkpoint at an
    epoch boundary replays the remaining epochs exactly.
    """

    def __init__(self, model: LAGANet, loss_cfg: LossConfig, train_cfg: TrainConfig, aug_cfg: AugConfig):
        loss_cfg.validate()
        train_cfg.validate()
        aug_cfg.validate()
        self.model = model
        self.loss_cfg = loss_cfg
        self.train_cfg = train_cfg
        self.aug_cfg = aug_cfg
        self.optimizer = make_optimizer(model, train_cfg)
        self.epoch = 0

    def run_epoch(self, images: np.ndarray, labels: np.ndarray) -> EpochLog:
        cfg, lc = self.train_cfg, self.loss_cfg
        epoch = self.epoch + 1
        lr = lr_at(epoch, cfg)
        n_batch = lc.P * lc.K
        iters = len(images) // n_batch
        if iters < 1:
            raise TrainingError(f"{len(images)} training images cannot fill a batch of {n_batch}")
        size = (self.model.cfg.input_height, self.model.cfg.input_width)
        totals = np.zeros(3)
        self.model.train()
        for it in range(iters):
            rng = np.random.default_rng([cfg.seed, epoch, it])
            idx = pk_sample(labels, lc.P, lc.K, rng)
            batch = np.stack([augment(images[i], self.aug_cfg, size, rng, "train") for i in idx])
            try:
                out = self.model(batch, rng)
                loss = total_loss(out.logits, out.reduced, labels[idx], lc, n_heads=len(self.model.head))
            except NumericInputError as exc:
                raise TrainingError(f"non-finite values at epoch {epoch}, iteration {it}: {exc}") from exc
            value = float(loss.total.data)
            if not math.isfinite(value):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch}, iteration {it}: xent={loss.xent}, triplet={loss.triplet}"
                )
            self.model.zero_grad()
            loss.total.backward()
            self.optimizer.step(lr)
            totals += (value, loss.xent, loss.triplet)
        self.epoch = epoch
        mean = totals / iters
        return EpochLog(epoch, lr, float(mean[0]), float(mean[1]), float(mean[2]))

    def fit(self, images, labels, epochs: Optional[int] = None,
            callback: Optional[Callable[[EpochLog], None]] = None) -> List[EpochLog]:
        images = np.asarray(images, dtype=np.float64)
        labels = np.asarray(labels, dtype=np.int64)
        last = self.train_cfg.epochs if epochs is None else min(self.train_cfg.epochs, self.epoch + epochs)
        history = []
        while self.epoch < last:
            entry = self.run_epoch(images, labels)
            log.info("epoch %d lr %.3g loss %.4f", entry.epoch, entry.lr, entry.loss_total)
            history.append(entry)
            if callback is not None:
                callback(entry)
        return history

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = self.model.state_dict()
        state.update(self.optimizer.state_dict())
        state["train.epoch"] = np.array(float(self.epoch))
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray]) -> None:
        model_state = {k: v for k, v in state.items() if not k.startswith(("optim.", "train."))}
        self.model.load_state_dict(model_state)
        if "optim.step" in state:
            self.optimizer.load_state_dict(state)
        self.epoch = int(state.get("train.epoch", 0))


def model_config_for(manifest: Manifest, cfg: ModelConfig) -> ModelConfig:
    from dataclasses import replace

    return cfg if cfg.n_classes > 0 else replace(cfg, n_classes=manifest.n_train_classes)


def write_metrics(path, history: Sequence[EpochLog], append: bool = False) -> None:
    path = Path(path)
    new = not append or not path.exists()
    with path.open("a" if append else "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if new:
            writer.writerow(METRIC_COLUMNS)
        for entry in history:
            writer.writerow(entry.row())


def train(
    manifest: Manifest,
    cfg: Config,
    out: Optional[str] = None,
    log_path: Optional[str] = None,
    resume: Optional[str] = None,
    epochs: Optional[int] = None,
) -> Tuple[Trainer, List[EpochLog]]:
    """Train on the manifest's ``train`` split; optionally write checkpoint and metrics."""
    train_rows = manifest.split("train")
    if not train_rows:
        raise TrainingError("manifest has no train rows")
    model = LAGANet(model_config_for(manifest, cfg.model))
    trainer = Trainer(model, cfg.loss, cfg.train, cfg.aug)
    if resume is not None:
        trainer.load_state_dict(checkpoint.load(resume))
    images = manifest.load_images("train")
    labels = np.array([s.identity for s in train_rows])
    history = trainer.fit(images, labels, epochs=epochs)
    if out is not None:
        checkpoint.save(out, trainer.state_dict())
    if log_path is not None:
        write_metrics(log_path, history, append=resume is not None)
    return trainer, history
