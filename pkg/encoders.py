"""Feature learning for both modalities: image grids -> feature maps, BOW -> feature vectors."""

from dataclasses import dataclass
from typing import Dict, Optional, Tuple, Union

import numpy as np

from errors import ConfigError, DimensionError
from numkernel import (
    AffineParams, DualTensor, affine_backward, affine_forward, relu_backward, relu_forward,
)


@dataclass
class ImageEncoderCache:
    patches: np.ndarray
    projected: np.ndarray
    hidden_pre: np.ndarray


@dataclass
class TextEncoderCache:
    bow: np.ndarray
    hidden_pre: np.ndarray
    hidden: np.ndarray


class ImageEncoder:
    """Patch embedding followed by a per-cell affine + relu.

    Each non-overlapping P x P x C0 patch becomes one cell of an H x W x C grid.
    """

    def __init__(self, image_shape: Tuple[int, int, int], patch_size: int, channels: int,
                 rng: Optional[np.random.Generator] = None):
        h0, w0, c0 = image_shape
        if patch_size <= 0 or h0 % patch_size or w0 % patch_size:
            raise ConfigError(f"Patch size {patch_size} does not divide image size {h0}x{w0}", key="patch_size")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.image_shape = (h0, w0, c0)
        self.patch_size = patch_size
        self.channels = channels
        self.patch_proj = AffineParams.uniform(rng, channels, patch_size * patch_size * c0)
        self.hidden = AffineParams.uniform(rng, channels, channels)

    @property
    def grid_shape(self) -> Tuple[int, int, int]:
        h0, w0, _ = self.image_shape
        return h0 // self.patch_size, w0 // self.patch_size, self.channels

    def tensors(self) -> Dict[str, DualTensor]:
        return {**self.patch_proj.tensors("image_encoder.patch"), **self.hidden.tensors("image_encoder.hidden")}

    def _patchify(self, images: np.ndarray) -> np.ndarray:
        if images.shape[1:] != self.image_shape:
            raise DimensionError(f"Image batch has shape {images.shape[1:]}, expected {self.image_shape}")
        b = images.shape[0]
        h0, w0, c0 = self.image_shape
        p = self.patch_size
        h, w = h0 // p, w0 // p
        x = images.reshape(b, h, p, w, p, c0).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, h, w, p * p * c0)

    def _unpatchify(self, grad_patches: np.ndarray) -> np.ndarray:
        b = grad_patches.shape[0]
        h0, w0, c0 = self.image_shape
        p = self.patch_size
        h, w = h0 // p, w0 // p
        x = grad_patches.reshape(b, h, w, p, p, c0).transpose(0, 1, 3, 2, 4, 5)
        return x.reshape(b, h0, w0, c0)

    def forward(self, images: np.ndarray) -> Tuple[np.ndarray, ImageEncoderCache]:
        """Batch (B, H0, W0, C0) -> feature grids (B, H, W, C)."""
        patches = self._patchify(np.asarray(images, dtype=np.float64))
        projected = affine_forward(patches, self.patch_proj)
        hidden_pre = affine_forward(projected, self.hidden)
        return relu_forward(hidden_pre), ImageEncoderCache(patches, projected, hidden_pre)

    def backward(self, grad_grid: np.ndarray, cache: ImageEncoderCache) -> np.ndarray:
        """Accumulate parameter gradients; return the gradient wrt the images."""
        grad_pre = relu_backward(cache.hidden_pre, grad_grid)
        grad_projected, grads = affine_backward(cache.projected, self.hidden, grad_pre)
        self.hidden.accumulate(grads)
        grad_patches, grads = affine_backward(cache.patches, self.patch_proj, grad_projected)
        self.patch_proj.accumulate(grads)
        return self._unpatchify(grad_patches)


class TextEncoder:
    """Two fully-connected stages over bag-of-words counts: V -> hidden -> C_T."""

    def __init__(self, vocab: int, hidden: int, features: int, rng: Optional[np.random.Generator] = None):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.vocab = vocab
        self.fc1 = AffineParams.uniform(rng, hidden, vocab)
        self.fc2 = AffineParams.uniform(rng, features, hidden)

    @property
    def features(self) -> int:
        return self.fc2.n_out

    def tensors(self) -> Dict[str, DualTensor]:
        return {**self.fc1.tensors("text_encoder.fc1"), **self.fc2.tensors("text_encoder.fc2")}

    def forward(self, bows: np.ndarray) -> Tuple[np.ndarray, TextEncoderCache]:
        """Batch (B, V) -> feature vectors (B, C_T)."""
        bows = np.asarray(bows, dtype=np.float64)
        if bows.ndim != 2 or bows.shape[1] != self.vocab:
            raise DimensionError(f"BOW batch has shape {bows.shape}, expected (B, {self.vocab})")
        hidden_pre = affine_forward(bows, self.fc1)
        hidden = relu_forward(hidden_pre)
        return affine_forward(hidden, self.fc2), TextEncoderCache(bows, hidden_pre, hidden)

    def backward(self, grad_features: np.ndarray, cache: TextEncoderCache) -> np.ndarray:
        grad_hidden, grads = affine_backward(cache.hidden, self.fc2, grad_features)
        self.fc2.accumulate(grads)
        grad_pre = relu_backward(cache.hidden_pre, grad_hidden)
        grad_bow, grads = affine_backward(cache.bow, self.fc1, grad_pre)
        self.fc1.accumulate(grads)
        return grad_bow


Encoder = Union[ImageEncoder, TextEncoder]
EncoderCache = Union[ImageEncoderCache, TextEncoderCache]


def encode_image(img: np.ndarray, encoder: ImageEncoder) -> np.ndarray:
    """Encode one image (H0, W0, C0) or a batch into feature grids."""
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return encoder.forward(img[None])[0][0]
    return encoder.forward(img)[0]


def encode_text(txt: np.ndarray, encoder: TextEncoder) -> np.ndarray:
    """Encode one BOW vector (V,) or a batch into feature vectors."""
    txt = np.asarray(txt, dtype=np.float64)
    if txt.ndim == 1:
        return encoder.forward(txt[None])[0][0]
    return encoder.forward(txt)[0]


def encoder_backward(encoder: Encoder, grad_out: np.ndarray, cache: EncoderCache) -> np.ndarray:
    """Chain the backward rules of either encoder; gradients accumulate into its tensors."""
    return encoder.backward(grad_out, cache)
