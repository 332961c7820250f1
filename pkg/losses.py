"""
Triplet ranking objective.

Four retrieval terms keep foreground codes similarity-preserving across and within
modalities; two adversarial terms rank background codes of one modality against
foreground anchors of the other. All terms share one hinge:
max{0, margin + d(a, p) - d(a, n)}.
"""

from dataclasses import dataclass, field
from typing import Dict, Iterable, Optional, Tuple

import numpy as np

from errors import DimensionError, ValidationError
from models import ADVERSARIAL_DIRECTIONS, RETRIEVAL_DIRECTIONS, Direction, LossConfig

# Code tables: which relaxed codes act as anchors / database for each direction
CODE_TABLES: Dict[Direction, Tuple[str, str]] = {
    Direction.T2I: ("text", "image"),
    Direction.I2T: ("image", "text"),
    Direction.I2I: ("image", "image"),
    Direction.T2T: ("text", "text"),
    Direction.T2IB: ("text", "image_bg"),
    Direction.I2TB: ("image", "text_bg"),
}


@dataclass
class TripletBatch:
    """Index triples (anchor, positive, negative) into the batch, for one direction."""
    direction: Direction
    anchors: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    positives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    negatives: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return int(self.anchors.shape[0])

    def triples(self) -> Iterable[Tuple[int, int, int]]:
        return zip(self.anchors.tolist(), self.positives.tolist(), self.negatives.tolist())


@dataclass
class BatchCodes:
    """Relaxed code tables of one batch, each (B, q). Background tables are optional."""
    image: np.ndarray
    text: np.ndarray
    image_bg: Optional[np.ndarray] = None
    text_bg: Optional[np.ndarray] = None

    def table(self, name: str) -> np.ndarray:
        codes = getattr(self, name)
        if codes is None:
            raise ValidationError(f"Code table '{name}' is required but missing")
        return codes

    def zeros_like(self) -> "BatchCodes":
        return BatchCodes(**{name: None if getattr(self, name) is None else np.zeros_like(getattr(self, name))
                             for name in ("image", "text", "image_bg", "text_bg")})


@dataclass
class LossResult:
    """Per-direction loss values and gradients wrt every code table."""
    components: Dict[Direction, float]
    grads: BatchCodes

    @property
    def total(self) -> float:
        return float(sum(self.components.values()))


# --- Distances ---
def _distance(diff: np.ndarray, cfg: LossConfig) -> Tuple[np.ndarray, np.ndarray]:
    """Row-wise distance and its gradient wrt diff."""
    sq = np.einsum("ij,ij->i", diff, diff)
    if cfg.distance == "squared":
        return sq, 2.0 * diff
    norm = np.sqrt(sq)
    safe = np.where(norm > 0, norm, 1.0)
    # subgradient 0 at a zero difference
    return norm, np.where(norm[:, None] > 0, diff / safe[:, None], 0.0)


def triplet_terms(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray, cfg: LossConfig):
    """Vectorized hinge over aligned rows; returns (losses, grad_a, grad_p, grad_n)."""
    if not (anchors.shape == positives.shape == negatives.shape) or anchors.ndim != 2:
        raise DimensionError(
            f"Triplet operands must share one (N, q) shape: {anchors.shape}, {positives.shape}, {negatives.shape}")
    d_ap, g_ap = _distance(anchors - positives, cfg)
    d_an, g_an = _distance(anchors - negatives, cfg)
    hinge = cfg.margin + d_ap - d_an
    active = (hinge > 0).astype(anchors.dtype)[:, None]
    losses = np.maximum(hinge, 0.0)
    grad_a = active * (g_ap - g_an)
    grad_p = -active * g_ap
    grad_n = active * g_an
    return losses, grad_a, grad_p, grad_n


def triplet_hinge(anchor: np.ndarray, pos: np.ndarray, neg: np.ndarray, cfg: LossConfig):
    """Single-triple hinge; returns (loss, grad_anchor, grad_pos, grad_neg)."""
    anchor, pos, neg = (np.asarray(v, dtype=np.float64) for v in (anchor, pos, neg))
    if not (anchor.shape == pos.shape == neg.shape) or anchor.ndim != 1:
        raise DimensionError(f"Triplet codes must have equal length: {anchor.shape}, {pos.shape}, {neg.shape}")
    losses, ga, gp, gn = triplet_terms(anchor[None], pos[None], neg[None], cfg)
    return float(losses[0]), ga[0], gp[0], gn[0]


def _accumulate_direction(codes: BatchCodes, grads: BatchCodes, batch: TripletBatch, cfg: LossConfig) -> float:
    anchor_name, db_name = CODE_TABLES[batch.direction]
    if len(batch) == 0:
        return 0.0
    anchor_table = codes.table(anchor_name)
    db_table = codes.table(db_name)
    weight = cfg.weight(batch.direction)
    losses, ga, gp, gn = triplet_terms(
        anchor_table[batch.anchors], db_table[batch.positives], db_table[batch.negatives], cfg)
    np.add.at(grads.table(anchor_name), batch.anchors, weight * ga)
    db_grad = grads.table(db_name)
    np.add.at(db_grad, batch.positives, weight * gp)
    np.add.at(db_grad, batch.negatives, weight * gn)
    return weight * float(losses.sum())


def _directional_loss(codes: BatchCodes, triplets: Dict[Direction, TripletBatch], cfg: LossConfig,
                      directions: Tuple[Direction, ...]) -> LossResult:
    grads = codes.zeros_like()
    components = {}
    for direction in directions:
        batch = triplets.get(direction, TripletBatch(direction))
        if batch.direction != direction:
            raise ValidationError(f"Triplets tagged {batch.direction.value} passed for {direction.value}")
        components[direction] = _accumulate_direction(codes, grads, batch, cfg)
    return LossResult(components, grads)


def cross_modal_loss(codes: BatchCodes, triplets: Dict[Direction, TripletBatch], cfg: LossConfig) -> LossResult:
    """F_{T->I} + F_{I->T} + F_{I->I} + F_{T->T} over foreground codes."""
    return _directional_loss(codes, triplets, cfg, RETRIEVAL_DIRECTIONS)


def adversarial_loss(codes: BatchCodes, triplets: Dict[Direction, TripletBatch], cfg: LossConfig) -> LossResult:
    """F_{T->I^} + F_{I->T^}: foreground anchors ranked against background codes."""
    codes.table("image_bg")
    codes.table("text_bg")
    return _directional_loss(codes, triplets, cfg, ADVERSARIAL_DIRECTIONS)


def full_objective(codes: BatchCodes, triplets: Dict[Direction, TripletBatch], cfg: LossConfig) -> LossResult:
    """Cross-modal plus adversarial terms with the configured weights."""
    return _directional_loss(codes, triplets, cfg, RETRIEVAL_DIRECTIONS + ADVERSARIAL_DIRECTIONS)


# --- Triplet mining ---
def sample_triplets(similarity: np.ndarray, count: int, rng: np.random.Generator,
                    direction: Direction, batch: Optional[np.ndarray] = None) -> TripletBatch:
    """Mine up to `count` (positive, negative) pairs per anchor inside a batch.

    `similarity` is the binary (B, B) relevance among the batch's instances (rows are
    anchors, columns database items). Anchors lacking an in-batch positive or negative
    are skipped. Intra-modal directions never use the anchor itself as its positive.
    """
    S = np.asarray(similarity).astype(bool)
    if batch is not None:
        S = S[np.ix_(batch, batch)]
    if S.ndim != 2 or S.shape[0] != S.shape[1] or S.shape[0] == 0:
        raise ValidationError(f"Similarity block must be a non-empty square matrix, got {S.shape}")
    if count <= 0:
        raise ValidationError(f"Per-anchor triplet count must be positive, got {count}")

    anchors, positives, negatives = [], [], []
    for a in range(S.shape[0]):
        row = S[a].copy()
        neg = np.flatnonzero(~row)
        if direction.is_intra_modal:
            row[a] = False
        pos = np.flatnonzero(row)
        if pos.size == 0 or neg.size == 0:
            continue
        n_pairs = min(count, pos.size * neg.size)
        picks = rng.choice(pos.size * neg.size, size=n_pairs, replace=False)
        pi, ni = np.divmod(picks, neg.size)
        anchors.append(np.full(n_pairs, a, dtype=np.int64))
        positives.append(pos[pi])
        negatives.append(neg[ni])

    if not anchors:
        return TripletBatch(direction)
    return TripletBatch(direction, np.concatenate(anchors), np.concatenate(positives).astype(np.int64),
                        np.concatenate(negatives).astype(np.int64))


def sample_all_directions(similarity: np.ndarray, count: int, rng: np.random.Generator,
                          directions: Tuple[Direction, ...] = RETRIEVAL_DIRECTIONS + ADVERSARIAL_DIRECTIONS
                          ) -> Dict[Direction, TripletBatch]:
    """One independently drawn TripletBatch per direction, in a fixed order."""
    return {direction: sample_triplets(similarity, count, rng, direction) for direction in directions}
