"""
Generative attention for both modalities.

A one-layer projection maps features to a pre-mask m, a softmax over the grid (or the
feature vector) turns m into a distribution p, and an inclusive threshold at alpha
turns p into a binary mask z. The mask splits features into a foreground
(z * f) and a background ((1 - z) * f). The threshold is trained with the
straight-through estimator: the cotangent reaching p is the cotangent computed at z.
"""

from dataclasses import dataclass
from typing import Dict, Optional, Union

import numpy as np

from errors import DimensionError, ValidationError
from numkernel import (
    AffineParams, DualTensor, affine_backward, affine_forward, grid_softmax_backward,
    grid_softmax_forward, relu_backward, relu_forward, threshold_ste_backward, threshold_ste_forward,
)


@dataclass
class AttentionMask:
    m: np.ndarray
    p: np.ndarray
    z: np.ndarray
    alpha: float
    grid_ndim: int = 2

    @property
    def occupancy(self) -> np.ndarray:
        """Foreground fraction per instance."""
        lead = self.z.shape[:self.z.ndim - self.grid_ndim]
        return self.z.reshape(lead + (-1,)).mean(axis=-1)


@dataclass
class SplitFeatures:
    foreground: np.ndarray
    background: np.ndarray


@dataclass
class AttentionCache:
    features: np.ndarray
    mask: AttentionMask
    pre_relu: Optional[np.ndarray] = None


@dataclass
class AttentionGrads:
    grad_features: np.ndarray
    grad_z: np.ndarray
    grad_p: np.ndarray


def split(f: np.ndarray, z: np.ndarray) -> SplitFeatures:
    """Foreground z*f and background (1-z)*f; z broadcasts over a trailing channel axis."""
    zb = z[..., None] if z.ndim == f.ndim - 1 else z
    if zb.shape[:-1] != f.shape[:-1] or zb.shape[-1] not in (1, f.shape[-1]):
        raise DimensionError(f"Mask of shape {z.shape} cannot gate features of shape {f.shape}")
    return SplitFeatures(foreground=zb * f, background=(1.0 - zb) * f)


def _gate_gradients(features: np.ndarray, z: np.ndarray, grad_fg: np.ndarray, grad_bg: np.ndarray):
    channel_axis = z.ndim == features.ndim - 1
    zb = z[..., None] if channel_axis else z
    direct = zb * grad_fg + (1.0 - zb) * grad_bg
    grad_z = features * (grad_fg - grad_bg)
    if channel_axis:
        grad_z = grad_z.sum(axis=-1)
    return direct, grad_z


class ImageAttention:
    """1x1 projection C -> 1 per grid cell, grid softmax, threshold at 1/(H*W)."""

    def __init__(self, channels: int, alpha: Optional[float] = None, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if alpha is not None and alpha <= 0:
            raise ValidationError(f"Image mask alpha must be positive, got {alpha}")
        self.alpha = alpha
        self.proj = AffineParams.uniform(rng, 1, channels)

    def tensors(self) -> Dict[str, DualTensor]:
        return self.proj.tensors("image_mask.proj")

    def alpha_for(self, height: int, width: int) -> float:
        return self.alpha if self.alpha is not None else 1.0 / (height * width)

    def forward(self, f: np.ndarray, binarize: bool = True):
        """f (B, H, W, C) -> (mask, split, cache)."""
        if f.ndim != 4:
            raise DimensionError(f"Image features must be (B, H, W, C), got {f.shape}")
        alpha = self.alpha_for(f.shape[1], f.shape[2])
        m = affine_forward(f, self.proj)[..., 0]
        p = grid_softmax_forward(m, grid_ndim=2)
        z = threshold_ste_forward(p, alpha) if binarize else p
        mask = AttentionMask(m=m, p=p, z=z, alpha=alpha)
        return mask, split(f, z), AttentionCache(features=f, mask=mask)

    def backward(self, grad_fg: np.ndarray, grad_bg: np.ndarray, cache: AttentionCache,
                 through_mask: bool = True) -> AttentionGrads:
        direct, grad_z = _gate_gradients(cache.features, cache.mask.z, grad_fg, grad_bg)
        grad_p = threshold_ste_backward(grad_z)
        if not through_mask:
            return AttentionGrads(direct, grad_z, grad_p)
        grad_m = grid_softmax_backward(cache.mask.p, grad_p, grid_ndim=2)
        grad_f, grads = affine_backward(cache.features, self.proj, grad_m[..., None])
        self.proj.accumulate(grads)
        return AttentionGrads(direct + grad_f, grad_z, grad_p)


class TextAttention:
    """Fully-connected C_T -> C_T with relu, softmax over the vector, threshold at 1/C_T."""

    def __init__(self, features: int, alpha: Optional[float] = None, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        if alpha is not None and alpha <= 0:
            raise ValidationError(f"Text mask alpha must be positive, got {alpha}")
        self.alpha = alpha
        self.proj = AffineParams.uniform(rng, features, features)

    def tensors(self) -> Dict[str, DualTensor]:
        return self.proj.tensors("text_mask.proj")

    def alpha_for(self, length: int) -> float:
        return self.alpha if self.alpha is not None else 1.0 / length

    def forward(self, f: np.ndarray, binarize: bool = True):
        """f (B, C_T) -> (mask, split, cache)."""
        if f.ndim != 2:
            raise DimensionError(f"Text features must be (B, C_T), got {f.shape}")
        alpha = self.alpha_for(f.shape[1])
        pre = affine_forward(f, self.proj)
        m = relu_forward(pre)
        p = grid_softmax_forward(m, grid_ndim=1)
        z = threshold_ste_forward(p, alpha) if binarize else p
        mask = AttentionMask(m=m, p=p, z=z, alpha=alpha, grid_ndim=1)
        return mask, split(f, z), AttentionCache(features=f, mask=mask, pre_relu=pre)

    def backward(self, grad_fg: np.ndarray, grad_bg: np.ndarray, cache: AttentionCache,
                 through_mask: bool = True) -> AttentionGrads:
        direct, grad_z = _gate_gradients(cache.features, cache.mask.z, grad_fg, grad_bg)
        grad_p = threshold_ste_backward(grad_z)
        if not through_mask:
            return AttentionGrads(direct, grad_z, grad_p)
        grad_m = grid_softmax_backward(cache.mask.p, grad_p, grid_ndim=1)
        grad_pre = relu_backward(cache.pre_relu, grad_m)
        grad_f, grads = affine_backward(cache.features, self.proj, grad_pre)
        self.proj.accumulate(grads)
        return AttentionGrads(direct + grad_f, grad_z, grad_p)


Attention = Union[ImageAttention, TextAttention]


def image_mask(f: np.ndarray, attention: ImageAttention) -> AttentionMask:
    """Mask for one feature grid (H, W, C) or a batch."""
    single = f.ndim == 3
    mask, _, _ = attention.forward(f[None] if single else f)
    if single:
        return AttentionMask(m=mask.m[0], p=mask.p[0], z=mask.z[0], alpha=mask.alpha)
    return mask


def text_mask(f: np.ndarray, attention: TextAttention) -> AttentionMask:
    """Mask for one feature vector (C_T,) or a batch."""
    single = f.ndim == 1
    mask, _, _ = attention.forward(f[None] if single else f)
    if single:
        return AttentionMask(m=mask.m[0], p=mask.p[0], z=mask.z[0], alpha=mask.alpha, grid_ndim=1)
    return mask


def attention_backward(attention: Attention, grad_fg: np.ndarray, grad_bg: np.ndarray,
                       cache: Optional[AttentionCache], through_mask: bool = True) -> AttentionGrads:
    """Backward through split, threshold (straight-through), softmax and projection."""
    if cache is None:
        raise ValidationError("attention_backward needs the cache of a forward pass")
    return attention.backward(grad_fg, grad_bg, cache, through_mask=through_mask)
