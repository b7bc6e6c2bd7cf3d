"""Channel attention (CAM) and spatial attention with relative positional
encodings (SAM-RPE).

Both modules operate on batched feature maps ``N x C x H x W`` and are gated
by a learnable scalar ``gamma`` that starts at exactly zero, so a freshly
built module is the identity map.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ConfigError, ShapeError
from .nn import BatchNorm, Module, Parameter, PointwiseBlock
from .tensor import Tensor


@dataclass(frozen=True)
class ReindexMask:
    axis: str
    matrix: np.ndarray  # HW x (2L - 1), entries in {0, 1}


def build_reindex(axis: str, height: int, width: int) -> ReindexMask:
    """Re-indexing mask mapping grid positions to rows of a relative-shift table.

    Grid position ``(h, i)`` (row ``h``, column ``i``) occupies mask row
    ``h * width + i``. For the height axis the shift is ``i - h`` and the
    table has ``2 * height - 1`` rows; for the width axis the roles of the
    two indices are exchanged (shift ``h - i``, ``2 * width - 1`` rows).
    Shifts outside the table leave the row all-zero.
    """
    if height < 1 or width < 1:
        raise ConfigError(f"grid must be at least 1x1, got {height}x{width}")
    if axis not in ("height", "width"):
        raise ConfigError(f"axis must be 'height' or 'width', got {axis!r}")
    length = height if axis == "height" else width
    m = np.zeros((height * width, 2 * length - 1))
    for h in range(height):
        for i in range(width):
            r = i - h if axis == "height" else h - i
            if abs(r) <= length - 1:
                m[h * width + i, r + length - 1] = 1.0
    return ReindexMask(axis, m)


def rel_pos_term(mask: ReindexMask, table: Tensor, q: Tensor, v: Tensor, height: int, width: int) -> Tensor:
    """Positional attention output ``V (P Q)`` with ``P = mask @ table``.

    ``q`` is ``[N x] d_k x HW`` and ``v`` is ``[N x] C x HW``; the result is
    reshaped to ``[N x] C x H x W``. The positional logits are not normalised.
    """
    hw = height * width
    if mask.matrix.shape != (hw, table.shape[0]):
        raise ShapeError(f"mask {mask.matrix.shape} does not fit table {table.shape} on a {height}x{width} grid")
    if q.shape[-2] != table.shape[1] or q.shape[-1] != hw or v.shape[-1] != hw:
        raise ShapeError(f"rel_pos_term dimension mismatch: table {table.shape}, q {q.shape}, v {v.shape}")
    p = T.matmul(Tensor(mask.matrix), table)
    out = T.matmul(v, T.matmul(p, q))
    return out.reshape(out.shape[:-1] + (height, width))


def channel_attention_map(k: Tensor, q: Tensor) -> Tensor:
    return T.softmax_rows(T.matmul(k, q.swapaxes(-1, -2)))


def cam_forward(e: Tensor, gamma: Tensor) -> Tensor:
    """``gamma * (A_c V) + E`` with ``K = Q = V = E`` flattened to ``C x HW``."""
    n, c, h, w = e.shape
    flat = e.reshape(n, c, h * w)
    a_c = channel_attention_map(flat, flat)
    return gamma * T.matmul(a_c, flat).reshape(n, c, h, w) + e


class CAM(Module):
    def __init__(self):
        super().__init__()
        self.gamma = Parameter(0.0)

    def forward(self, e: Tensor) -> Tensor:
        return cam_forward(e, self.gamma)

    def attention_map(self, e: Tensor) -> Tensor:
        n, c, h, w = e.shape
        flat = e.reshape(n, c, h * w)
        return channel_attention_map(flat, flat)


class SamRpe(Module):
    """Spatial self-attention plus height and width relative-position terms.

    Keys and queries are projected to ``C // 8`` channels, values keep ``C``.
    The tables are sized for a fixed ``height x width`` grid.
    """

    def __init__(self, channels: int, height: int, width: int, rng: np.random.Generator, table_std: float = 0.01):
        super().__init__()
        if channels % 8:
            raise ConfigError(f"SAM-RPE needs channels divisible by 8 (key width d_k = C/8), got C={channels}")
        d_k = channels // 8
        self.w_k = PointwiseBlock(channels, d_k, rng)
        self.w_q = PointwiseBlock(channels, d_k, rng)
        self.w_v = PointwiseBlock(channels, channels, rng)
        self.r_h = Parameter(rng.normal(0.0, table_std, size=(2 * height - 1, d_k)))
        self.r_w = Parameter(rng.normal(0.0, table_std, size=(2 * width - 1, d_k)))
        self.bn_h = BatchNorm(channels)
        self.bn_w = BatchNorm(channels)
        self.gamma = Parameter(0.0)
        self.channels, self.height, self.width, self.d_k = channels, height, width, d_k
        self._mask_h = build_reindex("height", height, width)
        self._mask_w = build_reindex("width", height, width)

    def _project(self, e: Tensor):
        n = e.shape[0]
        hw = self.height * self.width
        k = self.w_k(e).reshape(n, self.d_k, hw)
        q = self.w_q(e).reshape(n, self.d_k, hw)
        v = self.w_v(e).reshape(n, self.channels, hw)
        return k, q, v

    def attention_map(self, e: Tensor) -> Tensor:
        k, q, _ = self._project(e)
        return T.softmax_rows(T.matmul(k.swapaxes(-1, -2), q))

    def content_term(self, e: Tensor) -> Tensor:
        n = e.shape[0]
        k, q, v = self._project(e)
        a_s = T.softmax_rows(T.matmul(k.swapaxes(-1, -2), q))
        return T.matmul(v, a_s).reshape(n, self.channels, self.height, self.width)

    def forward(self, e: Tensor) -> Tensor:
        n, c, h, w = e.shape
        if (c, h, w) != (self.channels, self.height, self.width):
            raise ShapeError(f"SAM-RPE built for {self.channels}x{self.height}x{self.width}, got {c}x{h}x{w}")
        k, q, v = self._project(e)
        a_s = T.softmax_rows(T.matmul(k.swapaxes(-1, -2), q))
        content = T.matmul(v, a_s).reshape(n, c, h, w)
        e_h = rel_pos_term(self._mask_h, self.r_h, q, v, h, w)
        e_w = rel_pos_term(self._mask_w, self.r_w, q, v, h, w)
        return self.gamma * (content + self.bn_h(e_h) + self.bn_w(e_w)) + e
