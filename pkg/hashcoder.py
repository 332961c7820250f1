"""Discriminative hash heads: features -> relaxed codes in (-1, 1)^q -> {-1, +1}^q."""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from errors import DimensionError
from numkernel import (
    AffineParams, DualTensor, affine_backward, affine_forward, relu_backward, relu_forward,
    tanh_backward, tanh_forward,
)


@dataclass
class ImageHashCache:
    flat: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray
    code: np.ndarray
    grid_shape: Tuple[int, ...]


@dataclass
class TextHashCache:
    features: np.ndarray
    code: np.ndarray


class ImageHashHead:
    """Flattened grid -> affine + relu (d_h) -> affine (q) -> tanh."""

    def __init__(self, grid_shape: Tuple[int, int, int], hidden: int, q: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.grid_shape = tuple(grid_shape)
        self.fc1 = AffineParams.uniform(rng, hidden, int(np.prod(grid_shape)))
        self.fc2 = AffineParams.uniform(rng, q, hidden)

    @property
    def q(self) -> int:
        return self.fc2.n_out

    def tensors(self) -> Dict[str, DualTensor]:
        return {**self.fc1.tensors("image_hash.fc1"), **self.fc2.tensors("image_hash.fc2")}

    def forward(self, grids: np.ndarray) -> Tuple[np.ndarray, ImageHashCache]:
        if grids.shape[1:] != self.grid_shape:
            raise DimensionError(f"Hash head expects grids of shape {self.grid_shape}, got {grids.shape[1:]}")
        flat = grids.reshape(grids.shape[0], -1)
        hidden_pre = affine_forward(flat, self.fc1)
        hidden = relu_forward(hidden_pre)
        code = tanh_forward(affine_forward(hidden, self.fc2))
        return code, ImageHashCache(flat, hidden_pre, hidden, code, grids.shape)

    def backward(self, grad_code: np.ndarray, cache: ImageHashCache) -> np.ndarray:
        grad_out = tanh_backward(cache.code, grad_code)
        grad_hidden, grads = affine_backward(cache.hidden, self.fc2, grad_out)
        self.fc2.accumulate(grads)
        grad_pre = relu_backward(cache.hidden_pre, grad_hidden)
        grad_flat, grads = affine_backward(cache.flat, self.fc1, grad_pre)
        self.fc1.accumulate(grads)
        return grad_flat.reshape(cache.grid_shape)


class TextHashHead:
    """Affine C_T -> q followed by tanh."""

    def __init__(self, features: int, q: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.fc = AffineParams.uniform(rng, q, features)

    @property
    def q(self) -> int:
        return self.fc.n_out

    def tensors(self) -> Dict[str, DualTensor]:
        return self.fc.tensors("text_hash.fc")

    def forward(self, features: np.ndarray) -> Tuple[np.ndarray, TextHashCache]:
        code = tanh_forward(affine_forward(features, self.fc))
        return code, TextHashCache(features, code)

    def backward(self, grad_code: np.ndarray, cache: TextHashCache) -> np.ndarray:
        grad_out = tanh_backward(cache.code, grad_code)
        grad_features, grads = affine_backward(cache.features, self.fc, grad_out)
        self.fc.accumulate(grads)
        return grad_features


HashHead = Union[ImageHashHead, TextHashHead]


def hash_image(f: np.ndarray, head: ImageHashHead) -> np.ndarray:
    """Relaxed code for one grid (H, W, C) or a batch of grids."""
    single = f.ndim == 3
    code, _ = head.forward(f[None] if single else f)
    return code[0] if single else code


def hash_text(f: np.ndarray, head: TextHashHead) -> np.ndarray:
    """Relaxed code for one feature vector or a batch."""
    single = f.ndim == 1
    code, _ = head.forward(f[None] if single else f)
    return code[0] if single else code


def binarize(code: np.ndarray) -> np.ndarray:
    """Sign with ties at 0 mapped to +1; returns int8 in {-1, +1}."""
    return np.where(np.asarray(code) >= 0, 1, -1).astype(np.int8)


def to_display_bits(bits: np.ndarray) -> np.ndarray:
    """{-1, +1} -> {0, 1} via (1 + b) / 2."""
    return ((np.asarray(bits, dtype=np.int16) + 1) // 2).astype(np.uint8)
