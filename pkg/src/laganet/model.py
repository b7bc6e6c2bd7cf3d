"""Shared trunk, four-branch head and embedding extraction.

The trunk plays the role of a backbone up to its third stage; each branch
owns an independent copy of the final stage with stride 1. The spatial
branch wraps its final stage with SAM-RPE modules (``sam.s3``/``sam.s4``),
the channel branch with CAM modules (``cam.c3``/``cam.c4``). Every pooled
vector feeds its own reduction + classifier head.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, List, Optional

import numpy as np

from . import tensor as T
from .attention import CAM, SamRpe
from .config import ModelConfig
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, ConvBlock, Linear, Module
from .tensor import Tensor, no_grad

BRANCH_HEAD = {"spatial": "s", "channel": "c", "global": "g"}


def head_names(cfg: ModelConfig) -> List[str]:
    """Head keys in the fixed concatenation order ``s, c, g, p1..pn``."""
    names = [BRANCH_HEAD[b] for b in ("spatial", "channel", "global") if b in cfg.branches]
    if "local" in cfg.branches:
        names += [f"p{i + 1}" for i in range(cfg.n_stripes)]
    return names


def gap(t: Tensor) -> Tensor:
    """Global average pooling ``N x D x H x W -> N x D``."""
    return T.mean(t, axis=(2, 3))


def stripe_pool(t: Tensor, n: int) -> List[Tensor]:
    """Average-pool ``n`` equal horizontal bands, top band first."""
    h = t.shape[2]
    if h % n:
        raise ConfigError(f"feature-map height {h} is not divisible into {n} stripes")
    band = h // n
    return [gap(t[:, :, i * band : (i + 1) * band, :]) for i in range(n)]


class ReduceHead(Module):
    """FC -> BN -> LeakyReLU -> dropout (training only)."""

    def __init__(self, d: int, r: int, rng: np.random.Generator, slope: float, p: float):
        super().__init__()
        self.fc = Linear(d, r, rng, bias=False)
        self.bn = BatchNorm(r)
        self.slope = slope
        self.p = p

    def forward(self, v: Tensor, rng: Optional[np.random.Generator] = None) -> Tensor:
        y = T.leaky_relu(self.bn(self.fc(v)), self.slope)
        return T.dropout(y, self.p, self.training, rng)


class Head(Module):
    def __init__(self, d: int, r: int, n_classes: int, rng: np.random.Generator, slope: float, p: float):
        super().__init__()
        self.reduce = ReduceHead(d, r, rng, slope, p)
        self.classifier = Linear(r, n_classes, rng)

    def classify(self, f: Tensor) -> Tensor:
        return self.classifier(f)


class Trunk(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        super().__init__()
        c_in = 3
        for i, (c, s) in enumerate(zip(cfg.trunk_widths, cfg.trunk_strides)):
            setattr(self, "stem" if i == 0 else f"stage{i + 1}", ConvBlock(c_in, c, rng, stride=s))
            c_in = c
        self.n_stages = len(cfg.trunk_widths)

    def forward(self, x: Tensor) -> Tensor:
        x = self.stem(x)
        for i in range(2, self.n_stages + 1):
            x = getattr(self, f"stage{i}")(x)
        return x


class Branch(Module):
    def __init__(self, c_in: int, d: int, rng: np.random.Generator):
        super().__init__()
        self.stage4 = ConvBlock(c_in, d, rng, stride=1)

    def forward(self, x: Tensor) -> Tensor:
        return self.stage4(x)


@dataclass
class ModelOutput:
    maps: Dict[str, Tensor]  # branch name -> N x D x H_f x W_f
    pooled: Dict[str, Tensor]  # head -> N x D
    reduced: Dict[str, Tensor]  # head -> N x R
    logits: Dict[str, Tensor]  # head -> N x n_classes


class LAGANet(Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        cfg.validate()
        if cfg.n_classes < 1:
            raise ConfigError("n_classes must be set before building the model")
        self.cfg = cfg
        rng = np.random.default_rng(cfg.seed)
        c3, d = cfg.trunk_widths[-1], cfg.branch_channels
        hf, wf = cfg.feature_height, cfg.feature_width
        self.trunk = Trunk(cfg, rng)
        self.branch = {}
        for name in ("spatial", "channel", "global", "local"):
            if name in cfg.branches:
                self.branch[name] = Branch(c3, d, rng)
        if cfg.share_branch_init:
            first = next(iter(self.branch.values())).state_dict()
            for b in self.branch.values():
                b.load_state_dict(first)
        self.sam = {}
        if "spatial" in cfg.branches:
            self.sam["s3"] = SamRpe(c3, hf, wf, rng)
            self.sam["s4"] = SamRpe(d, hf, wf, rng)
        self.cam = {}
        if "channel" in cfg.branches:
            self.cam["c3"] = CAM()
            self.cam["c4"] = CAM()
        self.head = {
            name: Head(d, cfg.reduction_width, cfg.n_classes, rng, cfg.leaky_slope, cfg.dropout)
            for name in head_names(cfg)
        }

    @property
    def head_names(self) -> List[str]:
        return list(self.head)

    def _check_input(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        want = (3, self.cfg.input_height, self.cfg.input_width)
        if x.ndim != 4 or x.shape[1:] != want:
            raise ShapeError(f"expected images of shape N x {want}, got {x.shape}")
        return x

    def forward_branches(self, x) -> Dict[str, Tensor]:
        x = self._check_input(x)
        base = self.trunk(x)
        maps = {}
        for name, branch in self.branch.items():
            if name == "spatial":
                maps[name] = self.sam["s4"](branch(self.sam["s3"](base)))
            elif name == "channel":
                maps[name] = self.cam["c4"](branch(self.cam["c3"](base)))
            else:
                maps[name] = branch(base)
        return maps

    def pool(self, maps: Dict[str, Tensor]) -> Dict[str, Tensor]:
        pooled = {}
        for name in ("spatial", "channel", "global"):
            if name in maps:
                pooled[BRANCH_HEAD[name]] = gap(maps[name])
        if "local" in maps:
            for i, v in enumerate(stripe_pool(maps["local"], self.cfg.n_stripes)):
                pooled[f"p{i + 1}"] = v
        return pooled

    def forward(self, x, rng: Optional[np.random.Generator] = None) -> ModelOutput:
        maps = self.forward_branches(x)
        pooled = self.pool(maps)
        reduced, logits = {}, {}
        for name, head in self.head.items():
            reduced[name] = head.reduce(pooled[name], rng)
            logits[name] = head.classify(reduced[name])
        return ModelOutput(maps, pooled, reduced, logits)

    def backbone_parameter_names(self) -> List[str]:
        """Parameters of the backbone analog (trunk and branch final stages)."""
        return [n for n, _ in self.named_parameters() if n.startswith(("trunk.", "branch."))]

    def test_embedding(self, x) -> np.ndarray:
        """Concatenated pre-reduction pooled vectors, ``N x (n_heads * D)``, eval mode."""
        was_training = self.training
        self.eval()
        try:
            with no_grad():
                pooled = self.pool(self.forward_branches(x))
            return np.concatenate([pooled[n].data for n in self.head_names], axis=1)
        finally:
            self.train(was_training)

    def flip_average(self, x) -> np.ndarray:
        """Mean of the embeddings of the images and their horizontal mirrors."""
        x = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
        return (self.test_embedding(x) + self.test_embedding(x[..., ::-1])) / 2.0

    def embed(self, x, batch_size: int = 64, flip: bool = True) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        fn = self.flip_average if flip else self.test_embedding
        return np.concatenate([fn(x[i : i + batch_size]) for i in range(0, len(x), batch_size)], axis=0)
