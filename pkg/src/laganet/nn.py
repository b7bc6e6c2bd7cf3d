"""Parameter containers and the small set of layers the network is built from."""

from __future__ import annotations

from typing import Dict, Iterator, Optional, Tuple

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    def __init__(self, data, name: Optional[str] = None):
        super().__init__(data, requires_grad=True, name=name)


class Module:
    """Minimal module tree.

    Parameters, sub-modules and ``dict``s of sub-modules assigned as
    attributes are discovered in assignment order; their dotted attribute
    paths are the names used in checkpoints. Non-differentiable state (batch
    norm running moments) lives in ``_buffers``.
    """

    training = True

    def __init__(self):
        self._buffers: Dict[str, np.ndarray] = {}

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _children(self) -> Iterator[Tuple[str, object]]:
        for key, value in vars(self).items():
            if key.startswith("_"):
                continue
            if isinstance(value, (Parameter, Module)):
                yield key, value
            elif isinstance(value, dict):
                for k, v in value.items():
                    if isinstance(v, (Parameter, Module)):
                        yield f"{key}.{k}", v

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Parameter]]:
        for key, value in self._children():
            if isinstance(value, Parameter):
                yield prefix + key, value
            else:
                yield from value.named_parameters(prefix + key + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self, prefix: str = "") -> Iterator[Tuple[str, np.ndarray]]:
        for key, buf in self._buffers.items():
            yield prefix + key, buf
        for key, value in self._children():
            if isinstance(value, Module):
                yield from value.named_buffers(prefix + key + ".")

    def modules(self) -> Iterator["Module"]:
        yield self
        for _, value in self._children():
            if isinstance(value, Module):
                yield from value.modules()

    def train(self, mode: bool = True) -> "Module":
        for m in self.modules():
            m.training = mode
        return self

    def eval(self) -> "Module":
        return self.train(False)

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.grad = None

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: p.data.copy() for name, p in self.named_parameters()}
        state.update({name: b.copy() for name, b in self.named_buffers()})
        return state

    def load_state_dict(self, state: Dict[str, np.ndarray], strict: bool = True) -> None:
        from .errors import ConfigError

        own = dict(self.named_parameters())
        bufs = dict(self.named_buffers())
        if strict:
            missing = (set(own) | set(bufs)) - set(state)
            if missing:
                raise ConfigError(f"checkpoint is missing entries: {sorted(missing)[:5]}")
        for name, value in state.items():
            target = own[name].data if name in own else bufs.get(name)
            if target is None:
                if strict:
                    raise ConfigError(f"unexpected checkpoint entry {name!r}")
                continue
            if target.shape != np.shape(value):
                raise ConfigError(f"shape mismatch for {name!r}: model {target.shape}, checkpoint {np.shape(value)}")
            target[...] = value


def kaiming_normal(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    return rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)


class Linear(Module):
    """``y = x @ w + b`` with ``w`` stored as ``in x out``."""

    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.w = Parameter(kaiming_normal(rng, (n_in, n_out), n_in))
        if bias:
            self.b = Parameter(np.zeros(n_out))

    def forward(self, x: Tensor) -> Tensor:
        y = x @ self.w
        return y + self.b if hasattr(self, "b") else y


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        super().__init__()
        self.gain = Parameter(np.ones(channels))
        self.bias = Parameter(np.zeros(channels))
        self._buffers["running_mean"] = np.zeros(channels)
        self._buffers["running_var"] = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def forward(self, x: Tensor) -> Tensor:
        return T.batch_norm(
            x,
            self.gain,
            self.bias,
            self._buffers["running_mean"],
            self._buffers["running_var"],
            training=self.training,
            momentum=self.momentum,
            eps=self.eps,
        )


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator, stride: int = 1, bias: bool = False):
        super().__init__()
        self.w = Parameter(kaiming_normal(rng, (c_out, c_in, k, k), c_in * k * k))
        if bias:
            self.b = Parameter(np.zeros(c_out))
        self.stride = stride
        self.padding = k // 2

    def forward(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, getattr(self, "b", None), stride=self.stride, padding=self.padding)


class ConvBlock(Module):
    """Conv (no bias) -> batch norm -> ReLU."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, stride: int = 1, k: int = 3):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, k, rng, stride=stride)
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(self.conv(x)))


class PointwiseBlock(Module):
    """1x1 projection -> batch norm -> ReLU; the bias is dropped because BN absorbs it."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator):
        super().__init__()
        self.w = Parameter(kaiming_normal(rng, (c_out, c_in), c_in))
        self.bn = BatchNorm(c_out)

    def forward(self, x: Tensor) -> Tensor:
        return T.relu(self.bn(T.pointwise_conv(x, self.w)))
