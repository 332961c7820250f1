"""
Alternating adversarial training.

Encoders and hash heads (E, D) minimize the full objective with masks held fixed;
the attention generators (G) maximize the adversarial terms with E and D frozen.
The loop runs `d_steps_per_g_step` D-phase steps for every G-phase step.
"""

import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

import numpy as np
import pandas as pd

from attention import AttentionCache, AttentionGrads, ImageAttention, TextAttention
from config import settings
from data import PairedDataset
from encoders import ImageEncoder, ImageEncoderCache, TextEncoder, TextEncoderCache
from errors import CorruptDataError, DimensionError, DivergenceError, NotFoundError, ValidationError, VersionError
from hashcoder import ImageHashCache, ImageHashHead, TextHashCache, TextHashHead
from losses import BatchCodes, LossResult, adversarial_loss, full_objective, sample_all_directions
from models import ADVERSARIAL_DIRECTIONS, ALL_DIRECTIONS, TrainConfig, TrainLogRecord
from numkernel import DualTensor

CHECKPOINT_MAGIC = "xmh-checkpoint"
CHECKPOINT_VERSION = 1
LOG_COLUMNS = ["epoch", "step", "phase"] + [d.log_key for d in ALL_DIRECTIONS] + \
              ["occupancy_image", "occupancy_text", "lr"]


# --- Model ---
@dataclass(frozen=True)
class ModelSpec:
    """Architecture of a HashingModel; recoverable from a checkpoint header."""
    image_shape: Tuple[int, int, int]
    vocab: int
    feature_channels: int = 32
    patch_size: int = 2
    text_hidden: int = 128
    text_features: int = 64
    hash_hidden: int = 256
    q: int = 16
    image_alpha: Optional[float] = None
    text_alpha: Optional[float] = None

    @classmethod
    def from_config(cls, cfg: TrainConfig, image_shape: Tuple[int, int, int], vocab: int) -> "ModelSpec":
        return cls(image_shape=tuple(int(v) for v in image_shape), vocab=int(vocab),
                   feature_channels=cfg.feature_channels, patch_size=cfg.patch_size,
                   text_hidden=cfg.text_hidden, text_features=cfg.text_features,
                   hash_hidden=cfg.hash_hidden, q=cfg.q,
                   image_alpha=cfg.image_alpha, text_alpha=cfg.text_alpha)

    def to_header(self) -> str:
        fields = {
            "image": "x".join(str(v) for v in self.image_shape), "vocab": self.vocab,
            "feature_channels": self.feature_channels, "patch_size": self.patch_size,
            "text_hidden": self.text_hidden, "text_features": self.text_features,
            "hash_hidden": self.hash_hidden, "q": self.q,
            "image_alpha": "" if self.image_alpha is None else repr(self.image_alpha),
            "text_alpha": "" if self.text_alpha is None else repr(self.text_alpha),
        }
        return ",".join(f"{k}={v}" for k, v in fields.items())

    @classmethod
    def from_header(cls, text: str) -> "ModelSpec":
        try:
            raw = dict(item.split("=", 1) for item in text.split(","))
            return cls(
                image_shape=tuple(int(v) for v in raw["image"].split("x")), vocab=int(raw["vocab"]),
                feature_channels=int(raw["feature_channels"]), patch_size=int(raw["patch_size"]),
                text_hidden=int(raw["text_hidden"]), text_features=int(raw["text_features"]),
                hash_hidden=int(raw["hash_hidden"]), q=int(raw["q"]),
                image_alpha=float(raw["image_alpha"]) if raw["image_alpha"] else None,
                text_alpha=float(raw["text_alpha"]) if raw["text_alpha"] else None,
            )
        except (KeyError, ValueError) as e:
            raise CorruptDataError(f"Checkpoint header has an unreadable architecture field: {e}") from e


@dataclass
class ForwardCache:
    image_encoder: ImageEncoderCache
    text_encoder: TextEncoderCache
    image_attention: AttentionCache
    text_attention: AttentionCache
    image_hash_fg: ImageHashCache
    image_hash_bg: ImageHashCache
    text_hash_fg: TextHashCache
    text_hash_bg: TextHashCache
    codes: BatchCodes

    @property
    def image_occupancy(self) -> np.ndarray:
        return self.image_attention.mask.occupancy

    @property
    def text_occupancy(self) -> np.ndarray:
        return self.text_attention.mask.occupancy


@dataclass
class BackwardResult:
    image_attention: AttentionGrads
    text_attention: AttentionGrads


class HashingModel:
    """E^I, E^T, G^I, G^T, D^I, D^T wired together.

    One hash head per modality is applied to both the foreground and the background split.
    """

    def __init__(self, spec: ModelSpec, seed: int = 7):
        self.spec = spec
        rng = np.random.default_rng(seed)
        self.image_encoder = ImageEncoder(spec.image_shape, spec.patch_size, spec.feature_channels, rng)
        self.text_encoder = TextEncoder(spec.vocab, spec.text_hidden, spec.text_features, rng)
        self.image_attention = ImageAttention(spec.feature_channels, spec.image_alpha, rng)
        self.text_attention = TextAttention(spec.text_features, spec.text_alpha, rng)
        self.image_hash = ImageHashHead(self.image_encoder.grid_shape, spec.hash_hidden, spec.q, rng)
        self.text_hash = TextHashHead(spec.text_features, spec.q, rng)

    @property
    def q(self) -> int:
        return self.spec.q

    def encoder_discriminator_tensors(self) -> Dict[str, DualTensor]:
        return {**self.image_encoder.tensors(), **self.text_encoder.tensors(),
                **self.image_hash.tensors(), **self.text_hash.tensors()}

    def generator_tensors(self) -> Dict[str, DualTensor]:
        return {**self.image_attention.tensors(), **self.text_attention.tensors()}

    def tensors(self) -> Dict[str, DualTensor]:
        return {**self.encoder_discriminator_tensors(), **self.generator_tensors()}

    def zero_grad(self) -> None:
        for tensor in self.tensors().values():
            tensor.zero_grad()

    def forward(self, images: np.ndarray, bows: np.ndarray, binarize: bool = True) -> ForwardCache:
        f_img, enc_img = self.image_encoder.forward(images)
        f_txt, enc_txt = self.text_encoder.forward(bows)
        _, split_img, att_img = self.image_attention.forward(f_img, binarize=binarize)
        _, split_txt, att_txt = self.text_attention.forward(f_txt, binarize=binarize)
        h_img, hc_img = self.image_hash.forward(split_img.foreground)
        hb_img, hcb_img = self.image_hash.forward(split_img.background)
        h_txt, hc_txt = self.text_hash.forward(split_txt.foreground)
        hb_txt, hcb_txt = self.text_hash.forward(split_txt.background)
        codes = BatchCodes(image=h_img, text=h_txt, image_bg=hb_img, text_bg=hb_txt)
        return ForwardCache(enc_img, enc_txt, att_img, att_txt, hc_img, hcb_img, hc_txt, hcb_txt, codes)

    def backward(self, grads: BatchCodes, cache: ForwardCache, through_mask: bool,
                 into_encoders: bool = True) -> BackwardResult:
        """Backpropagate code gradients; parameter gradients accumulate in place."""
        g_fg_img = self.image_hash.backward(grads.image, cache.image_hash_fg)
        g_bg_img = self.image_hash.backward(grads.image_bg, cache.image_hash_bg)
        g_fg_txt = self.text_hash.backward(grads.text, cache.text_hash_fg)
        g_bg_txt = self.text_hash.backward(grads.text_bg, cache.text_hash_bg)
        att_img = self.image_attention.backward(g_fg_img, g_bg_img, cache.image_attention, through_mask)
        att_txt = self.text_attention.backward(g_fg_txt, g_bg_txt, cache.text_attention, through_mask)
        if into_encoders:
            self.image_encoder.backward(att_img.grad_features, cache.image_encoder)
            self.text_encoder.backward(att_txt.grad_features, cache.text_encoder)
        return BackwardResult(att_img, att_txt)

    def encode_image_branch(self, images: np.ndarray):
        """Test-time image path: (foreground codes, background codes, masks)."""
        f, _ = self.image_encoder.forward(images)
        mask, parts, _ = self.image_attention.forward(f)
        return self.image_hash.forward(parts.foreground)[0], self.image_hash.forward(parts.background)[0], mask

    def encode_text_branch(self, bows: np.ndarray):
        """Test-time text path: (foreground codes, background codes, masks)."""
        f, _ = self.text_encoder.forward(bows)
        mask, parts, _ = self.text_attention.forward(f)
        return self.text_hash.forward(parts.foreground)[0], self.text_hash.forward(parts.background)[0], mask


# --- ADAM ---
@dataclass
class AdamState:
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)
    t: int = 0


def adam_update(params: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], state: AdamState, lr: float,
                maximize: bool = False, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8
                ) -> Dict[str, np.ndarray]:
    """One bias-corrected ADAM step, in place; `maximize` ascends instead of descending."""
    state.t += 1
    bc1 = 1.0 - beta1 ** state.t
    bc2 = 1.0 - beta2 ** state.t
    for name, value in params.items():
        g = grads[name]
        if g.shape != value.shape:
            raise DimensionError(f"Gradient for '{name}' has shape {g.shape}, parameter has {value.shape}")
        if maximize:
            g = -g
        if name not in state.m:
            state.m[name] = np.zeros_like(value)
            state.v[name] = np.zeros_like(value)
        state.m[name] *= beta1
        state.m[name] += (1.0 - beta1) * g
        state.v[name] *= beta2
        state.v[name] += (1.0 - beta2) * (g * g)
        m_hat = state.m[name] / bc1
        v_hat = state.v[name] / bc2
        value -= lr * m_hat / (np.sqrt(v_hat) + eps)
    return params


class Adam:
    """ADAM over a named group of DualTensors."""

    def __init__(self, beta1: float = 0.5, beta2: float = 0.999, eps: float = 1e-8):
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.state = AdamState()

    def step(self, tensors: Dict[str, DualTensor], lr: float, maximize: bool = False) -> None:
        params = {name: t.value for name, t in tensors.items()}
        grads = {name: t.grad for name, t in tensors.items()}
        adam_update(params, grads, self.state, lr, maximize, self.beta1, self.beta2, self.eps)


# --- Steps ---
@dataclass
class Batch:
    images: np.ndarray
    bows: np.ndarray
    similarity: np.ndarray   # (B, B) bool


class AlternatingTrainer:
    """Owns the model, both optimizers and the triplet-sampling stream."""

    def __init__(self, model: HashingModel, cfg: TrainConfig, rng: Optional[np.random.Generator] = None):
        self.model = model
        self.cfg = cfg
        self.loss_cfg = cfg.loss_config()
        self.rng = rng if rng is not None else np.random.default_rng(cfg.seed + 1)
        self.ed_optimizer = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.g_optimizer = Adam(cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps)
        self.last_empty = (0, 0)

    def _record(self, phase: str, epoch: int, step: int, result: LossResult, cache: ForwardCache,
                lr: float) -> TrainLogRecord:
        values = {d.log_key: result.components.get(d, 0.0) for d in ALL_DIRECTIONS}
        if not all(np.isfinite(v) for v in values.values()):
            raise DivergenceError(f"Non-finite loss in {phase}-step {step} (epoch {epoch}): {values}")
        self.last_empty = (int((cache.image_occupancy == 0).sum()), int((cache.text_occupancy == 0).sum()))
        return TrainLogRecord(
            epoch=epoch, step=step, phase=phase, **values,
            occupancy_image=float(cache.image_occupancy.mean()),
            occupancy_text=float(cache.text_occupancy.mean()), lr=lr,
        )

    def d_step(self, batch: Batch, lr: float, epoch: int = 1, step: int = 0) -> TrainLogRecord:
        """Minimize the full objective over E and D; masks are constants."""
        self.model.zero_grad()
        cache = self.model.forward(batch.images, batch.bows)
        triplets = sample_all_directions(batch.similarity, self.cfg.triplets_per_anchor, self.rng)
        result = full_objective(cache.codes, triplets, self.loss_cfg)
        record = self._record("D", epoch, step, result, cache, lr)
        self.model.backward(result.grads, cache, through_mask=False, into_encoders=True)
        self.ed_optimizer.step(self.model.encoder_discriminator_tensors(), lr)
        return record

    def g_step(self, batch: Batch, epoch: int = 1, step: int = 0) -> TrainLogRecord:
        """Maximize the adversarial terms over G; anchors and E, D are constants."""
        self.model.zero_grad()
        cache = self.model.forward(batch.images, batch.bows)
        triplets = sample_all_directions(batch.similarity, self.cfg.triplets_per_anchor, self.rng,
                                         ADVERSARIAL_DIRECTIONS)
        result = adversarial_loss(cache.codes, triplets, self.loss_cfg)
        lr = self.cfg.g_lr_at(epoch)
        record = self._record("G", epoch, step, result, cache, lr)
        grads = BatchCodes(image=np.zeros_like(cache.codes.image), text=np.zeros_like(cache.codes.text),
                           image_bg=result.grads.image_bg, text_bg=result.grads.text_bg)
        self.model.backward(grads, cache, through_mask=True, into_encoders=False)
        self.g_optimizer.step(self.model.generator_tensors(), lr, maximize=True)
        return record

    def phase_of(self, step: int) -> str:
        k = self.cfg.d_steps_per_g_step
        return "G" if step % (k + 1) == k else "D"


# --- Checkpoints ---
def save_checkpoint(model: HashingModel, path: Union[str, Path]) -> Path:
    """Header line with architecture and tensor shapes, then a little-endian float64 stream."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors = model.tensors()
    shapes = ";".join(f"{name}:{'x'.join(str(d) for d in t.shape)}" for name, t in tensors.items())
    header = f"{CHECKPOINT_MAGIC}\t{CHECKPOINT_VERSION}\t{model.spec.to_header()}\t{shapes}\n"
    payload = np.concatenate([t.value.reshape(-1) for t in tensors.values()]).astype("<f8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(payload.tobytes())
    os.replace(tmp, path)
    return path


def load_checkpoint(path: Union[str, Path]) -> HashingModel:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Checkpoint '{path}' not found")
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8", errors="replace").rstrip("\n")
        payload = np.frombuffer(fh.read(), dtype="<f8")
    parts = header.split("\t")
    if len(parts) != 4 or parts[0] != CHECKPOINT_MAGIC:
        raise CorruptDataError(f"'{path}' is not a checkpoint file")
    if parts[1] != str(CHECKPOINT_VERSION):
        raise VersionError(f"Checkpoint version {parts[1]} is not supported (expected {CHECKPOINT_VERSION})")

    model = HashingModel(ModelSpec.from_header(parts[2]))
    tensors = model.tensors()
    listed = [item.split(":", 1) for item in parts[3].split(";")]
    if [name for name, _ in listed] != list(tensors):
        raise CorruptDataError(f"Checkpoint '{path}' lists tensors that do not match its architecture")
    offset = 0
    for name, dims in listed:
        shape = tuple(int(d) for d in dims.split("x"))
        if shape != tensors[name].shape:
            raise CorruptDataError(f"Tensor '{name}' has shape {shape}, architecture expects {tensors[name].shape}")
        size = int(np.prod(shape))
        if offset + size > payload.size:
            raise CorruptDataError(f"Checkpoint '{path}' is truncated at tensor '{name}'")
        tensors[name].value[...] = payload[offset:offset + size].reshape(shape)
        offset += size
    if offset != payload.size:
        raise CorruptDataError(f"Checkpoint '{path}' has {payload.size - offset} trailing values")
    return model


# --- Training loop ---
@dataclass
class TrainResult:
    model: HashingModel
    records: List[TrainLogRecord]
    checkpoints: List[Path]
    log_path: Optional[Path] = None


def _write_log(records: List[TrainLogRecord], path: Path, first: bool) -> None:
    frame = pd.DataFrame([r.model_dump() for r in records], columns=LOG_COLUMNS)
    frame.to_csv(path, sep="\t", index=False, header=first, mode="w" if first else "a")


def _print_epoch(epoch: int, records: List[TrainLogRecord], empty_image: int, empty_text: int) -> None:
    d_records = [r for r in records if r.phase == "D"]
    g_records = [r for r in records if r.phase == "G"]
    cross = np.mean([r.f_t2i + r.f_i2t + r.f_i2i + r.f_t2t for r in d_records]) if d_records else 0.0
    adv = np.mean([r.adversarial for r in records]) if records else 0.0
    occ_i = np.mean([r.occupancy_image for r in records]) if records else 0.0
    occ_t = np.mean([r.occupancy_text for r in records]) if records else 0.0
    lr = d_records[0].lr if d_records else 0.0
    print(f"✅ epoch {epoch}: cross={cross:.4f} adv={adv:.4f} "
          f"occ(I)={occ_i:.3f} occ(T)={occ_t:.3f} lr={lr:g} "
          f"[{len(d_records)} D / {len(g_records)} G]")
    if empty_image or empty_text:
        print(f"⚠️ epoch {epoch}: {empty_image} empty image foregrounds, {empty_text} empty text foregrounds")


def iterate_batches(dataset: PairedDataset, indices: np.ndarray, batch_size: int, rng: np.random.Generator):
    """Shuffle the given instances and yield aligned batches; a trailing singleton is dropped."""
    similarity = dataset.similarity()
    order = rng.permutation(indices)
    for start in range(0, len(order), batch_size):
        chunk = order[start:start + batch_size]
        if len(chunk) < 2:
            continue
        yield Batch(dataset.images[chunk].astype(np.float64), dataset.bows[chunk].astype(np.float64),
                    similarity.dense(chunk, chunk))


def train(dataset: PairedDataset, cfg: TrainConfig, out_dir: Optional[Union[str, Path]] = None,
          verbose: Optional[bool] = None) -> TrainResult:
    """Run `cfg.epochs` epochs of the D/G alternation on the train split."""
    verbose = settings.XMH_VERBOSE if verbose is None else verbose
    train_idx = dataset.split("train")
    if len(train_idx) < 2:
        raise ValidationError("Training split must hold at least two instances")

    model = HashingModel(ModelSpec.from_config(cfg, dataset.image_shape, dataset.vocab), seed=cfg.seed)
    trainer = AlternatingTrainer(model, cfg, np.random.default_rng(cfg.seed + 1))
    batch_rng = np.random.default_rng(cfg.seed + 2)
    out = Path(out_dir) if out_dir is not None else None
    log_path = out / "train.log" if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        pd.DataFrame(columns=LOG_COLUMNS).to_csv(log_path, sep="\t", index=False)

    records: List[TrainLogRecord] = []
    checkpoints: List[Path] = []
    if cfg.epochs == 0 and out is not None:
        checkpoints.append(save_checkpoint(model, out / "checkpoint-epoch000.ckpt"))

    if verbose:
        print(f"🔄 Training q={cfg.q} on {len(train_idx)} pairs for {cfg.epochs} epochs")
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        epoch_records = []
        empty_image = empty_text = 0
        for batch in iterate_batches(dataset, train_idx, cfg.batch_size, batch_rng):
            try:
                if trainer.phase_of(step) == "G":
                    record = trainer.g_step(batch, epoch, step)
                else:
                    record = trainer.d_step(batch, lr, epoch, step)
            except DivergenceError:
                if out is not None:
                    save_checkpoint(model, out / f"diverged-step{step:06d}.ckpt")
                    _write_log(epoch_records, log_path, first=False)
                if verbose:
                    print(f"❌ Training diverged at step {step}; diagnostic checkpoint written")
                raise
            empty_image += trainer.last_empty[0]
            empty_text += trainer.last_empty[1]
            epoch_records.append(record)
            step += 1
        records.extend(epoch_records)
        if out is not None:
            _write_log(epoch_records, log_path, first=False)
            if epoch % cfg.checkpoint_every == 0 or epoch == cfg.epochs:
                checkpoints.append(save_checkpoint(model, out / f"checkpoint-epoch{epoch:03d}.ckpt"))
        if verbose and (epoch % settings.XMH_LOG_EVERY == 0 or epoch == cfg.epochs):
            _print_epoch(epoch, epoch_records, empty_image, empty_text)

    return TrainResult(model, records, checkpoints, log_path)
