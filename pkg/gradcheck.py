"""Finite-difference verification of every backward pass, from single ops up to the composed objective."""

from typing import Callable, Dict, Iterable, Optional, Tuple

import numpy as np

import numkernel as nk
from attention import ImageAttention, TextAttention
from encoders import ImageEncoder, TextEncoder
from errors import NumericError, ValidationError
from hashcoder import ImageHashHead, TextHashHead
from losses import CODE_TABLES, full_objective, sample_all_directions, triplet_terms
from models import GradcheckEntry, GradcheckReport, LossConfig
from trainer import HashingModel, ModelSpec

# small shapes keep central differences cheap: 4 x 4 grids, 3 channels, 8-bit codes
GRID = 4
CHANNELS = 3
PATCH = 2
Q = 8
VOCAB = 12
TEXT_HIDDEN = 6
TEXT_FEATURES = 5
HASH_HIDDEN = 10
BATCH = 3

# points whose relu pre-activations or hinge arguments lie closer than this to 0 are redrawn
KINK_MARGIN = 1e-3
MAX_DRAWS_PER_SAMPLE = 50

CheckFn = Callable[[np.random.Generator], Tuple[Callable, np.ndarray, float]]


def _away_from_zero(rng: np.random.Generator, shape) -> np.ndarray:
    """Uniform magnitudes in [0.1, 2] with random signs, so relu kinks are never straddled."""
    return rng.choice([-1.0, 1.0], size=shape) * rng.uniform(0.1, 2.0, size=shape)


def _probe(rng: np.random.Generator, shape) -> np.ndarray:
    """Random cotangent turning a vector-valued op into a scalar."""
    return rng.normal(size=shape)


def _kink_distance(*arrays: np.ndarray) -> float:
    return float(min((np.abs(a).min(initial=np.inf) for a in arrays), default=np.inf))


# --- Op-level checks ---
def _affine_input(rng):
    params = nk.AffineParams.uniform(rng, 4, 5)
    w = _probe(rng, (BATCH, 4))

    def f(x):
        grad_x, _ = nk.affine_backward(x, params, w)
        return float((nk.affine_forward(x, params) * w).sum()), grad_x
    return f, rng.normal(size=(BATCH, 5)), np.inf


def _affine_weight(rng):
    x = rng.normal(size=(BATCH, 5))
    bias = rng.normal(size=4)
    w = _probe(rng, (BATCH, 4))

    def f(weight):
        params = nk.AffineParams(weight, bias)
        _, (grad_w, _) = nk.affine_backward(x, params, w)
        return float((nk.affine_forward(x, params) * w).sum()), grad_w
    return f, rng.normal(size=(4, 5)), np.inf


def _relu(rng):
    w = _probe(rng, (BATCH, 6))
    x = _away_from_zero(rng, (BATCH, 6))

    def f(v):
        return float((nk.relu_forward(v) * w).sum()), nk.relu_backward(v, w)
    return f, x, _kink_distance(x)


def _tanh(rng):
    w = _probe(rng, (BATCH, 6))

    def f(x):
        y = nk.tanh_forward(x)
        return float((y * w).sum()), nk.tanh_backward(y, w)
    return f, rng.normal(size=(BATCH, 6)), np.inf


def _grid_softmax(rng):
    w = _probe(rng, (BATCH, GRID, GRID))

    def f(m):
        p = nk.grid_softmax_forward(m, grid_ndim=2)
        return float((p * w).sum()), nk.grid_softmax_backward(p, w, grid_ndim=2)
    return f, rng.normal(size=(BATCH, GRID, GRID)), np.inf


# --- Component checks ---
def _image_encoder(rng):
    encoder = ImageEncoder((GRID * PATCH, GRID * PATCH, CHANNELS), PATCH, CHANNELS, rng)
    w = _probe(rng, (BATCH,) + encoder.grid_shape)
    images = rng.uniform(0.0, 1.0, size=(BATCH,) + encoder.image_shape)

    def f(x):
        out, cache = encoder.forward(x)
        return float((out * w).sum()), encoder.backward(w, cache)
    return f, images, _kink_distance(encoder.forward(images)[1].hidden_pre)


def _text_encoder(rng):
    encoder = TextEncoder(VOCAB, TEXT_HIDDEN, TEXT_FEATURES, rng)
    w = _probe(rng, (BATCH, TEXT_FEATURES))
    bows = rng.uniform(0.0, 3.0, size=(BATCH, VOCAB))

    def f(x):
        out, cache = encoder.forward(x)
        return float((out * w).sum()), encoder.backward(w, cache)
    return f, bows, _kink_distance(encoder.forward(bows)[1].hidden_pre)


def _image_attention(rng):
    attention = ImageAttention(CHANNELS, rng=rng)
    w_fg = _probe(rng, (BATCH, GRID, GRID, CHANNELS))
    w_bg = _probe(rng, (BATCH, GRID, GRID, CHANNELS))

    def f(features):
        _, parts, cache = attention.forward(features, binarize=False)
        value = float((parts.foreground * w_fg).sum() + (parts.background * w_bg).sum())
        return value, attention.backward(w_fg, w_bg, cache, through_mask=True).grad_features
    return f, rng.normal(size=(BATCH, GRID, GRID, CHANNELS)), np.inf


def _text_attention(rng):
    attention = TextAttention(TEXT_FEATURES, rng=rng)
    w_fg = _probe(rng, (BATCH, TEXT_FEATURES))
    w_bg = _probe(rng, (BATCH, TEXT_FEATURES))
    features = rng.normal(size=(BATCH, TEXT_FEATURES))

    def f(x):
        _, parts, cache = attention.forward(x, binarize=False)
        value = float((parts.foreground * w_fg).sum() + (parts.background * w_bg).sum())
        return value, attention.backward(w_fg, w_bg, cache, through_mask=True).grad_features
    return f, features, _kink_distance(attention.forward(features)[2].pre_relu)


def _image_hash(rng):
    head = ImageHashHead((GRID, GRID, CHANNELS), HASH_HIDDEN, Q, rng)
    w = _probe(rng, (BATCH, Q))
    grids = rng.normal(size=(BATCH, GRID, GRID, CHANNELS))

    def f(x):
        code, cache = head.forward(x)
        return float((code * w).sum()), head.backward(w, cache)
    return f, grids, _kink_distance(head.forward(grids)[1].hidden_pre)


def _text_hash(rng):
    head = TextHashHead(TEXT_FEATURES, Q, rng)
    w = _probe(rng, (BATCH, Q))

    def f(features):
        code, cache = head.forward(features)
        return float((code * w).sum()), head.backward(w, cache)
    return f, rng.normal(size=(BATCH, TEXT_FEATURES)), np.inf


def _hinge_arguments(anchors, positives, negatives, cfg: LossConfig) -> np.ndarray:
    """margin + d(a, p) - d(a, n) per row, recomputed independently of the loss module."""
    def dist(diff):
        sq = (diff * diff).sum(axis=-1)
        return sq if cfg.distance == "squared" else np.sqrt(sq)
    return cfg.margin + dist(anchors - positives) - dist(anchors - negatives)


def _triplet(distance: str):
    def make(rng):
        cfg = LossConfig(margin=Q / 4.0, distance=distance)
        codes = rng.uniform(-0.9, 0.9, size=(3, BATCH, Q))

        def f(x):
            losses, ga, gp, gn = triplet_terms(x[0], x[1], x[2], cfg)
            return float(losses.sum()), np.stack([ga, gp, gn])
        return f, codes, _kink_distance(_hinge_arguments(codes[0], codes[1], codes[2], cfg))
    return make


def _composed(tensor_name: str):
    """Full objective of a whole model wrt one parameter tensor, threshold replaced by the identity."""
    def make(rng):
        spec = ModelSpec(image_shape=(GRID * PATCH, GRID * PATCH, CHANNELS), vocab=VOCAB,
                         feature_channels=CHANNELS, patch_size=PATCH, text_hidden=TEXT_HIDDEN,
                         text_features=TEXT_FEATURES, hash_hidden=HASH_HIDDEN, q=Q)
        model = HashingModel(spec, seed=int(rng.integers(2 ** 31)))
        batch = 4
        images = rng.uniform(0.0, 1.0, size=(batch,) + spec.image_shape)
        bows = rng.uniform(0.0, 3.0, size=(batch, VOCAB))
        similarity = np.eye(batch, dtype=bool)
        similarity[0, 1] = similarity[1, 0] = similarity[2, 3] = similarity[3, 2] = True
        triplets = sample_all_directions(similarity, 2, rng)
        cfg = LossConfig(margin=Q / 4.0)
        tensor = model.tensors()[tensor_name]

        def f(value):
            tensor.value[...] = value
            model.zero_grad()
            cache = model.forward(images, bows, binarize=False)
            result = full_objective(cache.codes, triplets, cfg)
            model.backward(result.grads, cache, through_mask=True, into_encoders=True)
            return result.total, tensor.grad.copy()

        cache = model.forward(images, bows, binarize=False)
        hinges = []
        for direction, batch_triplets in triplets.items():
            anchor_name, db_name = CODE_TABLES[direction]
            a, d = cache.codes.table(anchor_name), cache.codes.table(db_name)
            hinges.append(_hinge_arguments(a[batch_triplets.anchors], d[batch_triplets.positives],
                                           d[batch_triplets.negatives], cfg))
        kink = _kink_distance(
            cache.image_encoder.hidden_pre, cache.text_encoder.hidden_pre, cache.text_attention.pre_relu,
            cache.image_hash_fg.hidden_pre, cache.image_hash_bg.hidden_pre, *hinges)
        return f, tensor.value.copy(), kink
    return make


SUITE: Dict[str, CheckFn] = {
    "affine.input": _affine_input,
    "affine.weight": _affine_weight,
    "relu": _relu,
    "tanh": _tanh,
    "grid_softmax": _grid_softmax,
    "image_encoder": _image_encoder,
    "text_encoder": _text_encoder,
    "image_attention": _image_attention,
    "text_attention": _text_attention,
    "image_hash": _image_hash,
    "text_hash": _text_hash,
    "triplet.squared": _triplet("squared"),
    "triplet.euclidean": _triplet("euclidean"),
    "objective.image_mask": _composed("image_mask.proj.weight"),
    "objective.text_mask": _composed("text_mask.proj.bias"),
    "objective.image_encoder": _composed("image_encoder.hidden.bias"),
    "objective.text_hash": _composed("text_hash.fc.bias"),
}


def check_one(name: str, samples: int = 20, tol: float = 1e-4, seed: int = 0) -> GradcheckEntry:
    """Worst relative error of one entry over `samples` random points away from kinks."""
    rng = np.random.default_rng([seed, sorted(SUITE).index(name)])
    worst = 0.0
    checked = draws = 0
    while checked < samples:
        draws += 1
        if draws > MAX_DRAWS_PER_SAMPLE * samples:
            raise NumericError(f"Gradient check '{name}' could not draw {samples} points away from kinks")
        f, x, kink = SUITE[name](rng)
        if kink < KINK_MARGIN:
            continue
        report = nk.finite_diff_check(f, x, tol=tol)
        worst = max(worst, report.max_rel_err)
        checked += 1
    return GradcheckEntry(name=name, max_rel_err=worst, samples=samples, passed=worst <= tol)


def run_gradcheck(seed: int = 0, tol: float = 1e-4, samples: int = 20,
                  only: Optional[Iterable[str]] = None, verbose: bool = False) -> GradcheckReport:
    names = list(SUITE) if only is None else list(only)
    unknown = [name for name in names if name not in SUITE]
    if unknown:
        raise ValidationError(f"Unknown gradient checks: {', '.join(unknown)} (have: {', '.join(SUITE)})")
    entries = []
    for name in names:
        entry = check_one(name, samples, tol, seed)
        if verbose:
            mark = "✅" if entry.passed else "❌"
            print(f"{mark} {name:<26} max rel-err {entry.max_rel_err:.3e}")
        entries.append(entry)
    return GradcheckReport(tol=tol, seed=seed, entries=entries)
