"""
Hamming-space retrieval and its evaluation.

Binary codes are stored bit-packed; distances come from XOR plus a byte popcount table.
Rankings sort by (distance, database id) so ties are deterministic.
"""

from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from errors import CorruptDataError, DimensionError, NotFoundError, ValidationError, VersionError
from hashcoder import binarize, to_display_bits
from models import Direction, EvalReport

if TYPE_CHECKING:
    from trainer import HashingModel

CODES_MAGIC = "xmh-codes"
CODES_VERSION = 1
DEFAULT_PR_GRID = np.linspace(0.0, 1.0, 11)
_POPCOUNT = np.array([bin(i).count("1") for i in range(256)], dtype=np.uint8)


def pack_codes(bits: np.ndarray) -> np.ndarray:
    """{-1, +1} (N, q) -> packed uint8 (N, ceil(q / 8)); +1 maps to a set bit."""
    bits = np.asarray(bits)
    if bits.ndim != 2:
        raise DimensionError(f"Codes must be (N, q), got {bits.shape}")
    if bits.size and not np.isin(bits, (-1, 1)).all():
        raise ValidationError("Binary codes may only hold -1 and +1")
    return np.packbits(bits > 0, axis=1)


def unpack_codes(packed: np.ndarray, q: int) -> np.ndarray:
    """Inverse of pack_codes."""
    bits = np.unpackbits(packed, axis=1, count=q)
    return np.where(bits > 0, 1, -1).astype(np.int8)


@dataclass
class CodeDatabase:
    """Packed binary codes of one modality with their instance ids."""
    modality: str
    q: int
    ids: np.ndarray
    packed: np.ndarray

    @classmethod
    def from_codes(cls, modality: str, codes: np.ndarray, ids: Optional[Sequence[int]] = None) -> "CodeDatabase":
        """Binarize relaxed or ±1 codes and pack them."""
        codes = np.asarray(codes)
        bits = codes if codes.dtype == np.int8 else binarize(codes)
        ids = np.arange(len(bits), dtype=np.int64) if ids is None else np.asarray(ids, dtype=np.int64)
        if len(ids) != len(bits):
            raise DimensionError(f"{len(ids)} ids for {len(bits)} codes")
        return cls(modality, int(bits.shape[1]), ids, pack_codes(bits))

    def __len__(self) -> int:
        return int(self.ids.shape[0])

    @property
    def bits(self) -> np.ndarray:
        return unpack_codes(self.packed, self.q)

    def hamming(self, query_packed: np.ndarray) -> np.ndarray:
        """Hamming distances from one packed query to every stored code."""
        if query_packed.shape != self.packed.shape[1:]:
            raise DimensionError(f"Packed query has {query_packed.shape[0]} bytes, database has {self.packed.shape[1]}")
        return _POPCOUNT[np.bitwise_xor(self.packed, query_packed)].sum(axis=1, dtype=np.int64)


def hamming_distance(a: np.ndarray, b: np.ndarray) -> int:
    """Bit disagreements between two {-1, +1} codes."""
    a, b = np.asarray(a), np.asarray(b)
    if a.shape != b.shape:
        raise DimensionError(f"Codes differ in length: {a.shape} vs {b.shape}")
    return int(np.count_nonzero(a != b))


@dataclass
class RetrievalResult:
    ids: np.ndarray        # database ids, nearest first
    distances: np.ndarray  # Hamming distances aligned with ids

    def __len__(self) -> int:
        return int(self.ids.shape[0])


def hamming_rank(query_bits: np.ndarray, database: CodeDatabase, k: Optional[int] = None) -> RetrievalResult:
    """Rank the database by Hamming distance to one ±1 query code; ties go to the smaller id."""
    query_bits = np.asarray(query_bits)
    if query_bits.shape != (database.q,):
        raise DimensionError(f"Query has {query_bits.shape} bits, database codes have {database.q}")
    distances = database.hamming(pack_codes(query_bits[None])[0])
    order = np.lexsort((database.ids, distances))
    if k is not None:
        order = order[:max(int(k), 0)]
    return RetrievalResult(database.ids[order], distances[order])


# --- Metrics ---
def average_precision(relevant: np.ndarray, k: Optional[int] = None) -> float:
    """AP of a ranked relevance vector, optionally truncated at k.

    Precision is averaged over the ranks of relevant items retrieved; zero relevant gives 0.
    """
    flags = np.asarray(relevant, dtype=bool)
    if k is not None:
        flags = flags[:k]
    hits = np.flatnonzero(flags)
    if hits.size == 0:
        return 0.0
    precision_at_hits = np.arange(1, hits.size + 1) / (hits + 1)
    return float(precision_at_hits.mean())


def pr_curve(relevant: np.ndarray, grid: np.ndarray = DEFAULT_PR_GRID) -> Optional[np.ndarray]:
    """Interpolated precision at each recall level: max precision at recall >= r.

    Returns None when nothing is relevant.
    """
    flags = np.asarray(relevant, dtype=bool)
    total = int(flags.sum())
    if total == 0:
        return None
    tp = np.cumsum(flags)
    precision = tp / np.arange(1, flags.size + 1)
    recall = tp / total
    # running max from the tail gives max precision at recall >= recall[i]
    tail_max = np.maximum.accumulate(precision[::-1])[::-1]
    # grid levels such as 0.30000000000000004 must still match recall 3/10
    idx = np.searchsorted(recall, np.asarray(grid) - 1e-12, side="left")
    return np.where(idx < flags.size, tail_max[np.minimum(idx, flags.size - 1)], 0.0)


def mean_pr_curve(relevance_rows: Sequence[np.ndarray], grid: np.ndarray = DEFAULT_PR_GRID) -> np.ndarray:
    """PR curve averaged over queries that have at least one relevant item."""
    curves = [c for c in (pr_curve(row, grid) for row in relevance_rows) if c is not None]
    if not curves:
        return np.zeros(len(grid))
    return np.mean(curves, axis=0)


def evaluate(query_codes: np.ndarray, db: CodeDatabase, relevance: np.ndarray, direction: Direction,
             map_at: Optional[int] = None, grid: np.ndarray = DEFAULT_PR_GRID,
             codes: str = "foreground") -> EvalReport:
    """MAP (optionally @K) and mean interpolated PR for one retrieval direction.

    `relevance` is the (n_queries, n_db) binary matrix aligned with db.ids order.
    """
    query_bits = np.asarray(query_codes)
    query_bits = query_bits if query_bits.dtype == np.int8 else binarize(query_bits)
    relevance = np.asarray(relevance, dtype=bool)
    if relevance.shape != (len(query_bits), len(db)):
        raise DimensionError(f"Relevance is {relevance.shape}, expected ({len(query_bits)}, {len(db)})")
    position = {int(i): p for p, i in enumerate(db.ids)}

    aps: List[float] = []
    rows = []
    for qi, bits in enumerate(query_bits):
        ranked = hamming_rank(bits, db)
        flags = relevance[qi, [position[int(i)] for i in ranked.ids]]
        aps.append(average_precision(flags, map_at))
        rows.append(flags)
    curve = mean_pr_curve(rows, grid)
    return EvalReport(
        direction=direction, q=db.q, map=float(np.mean(aps)) if aps else 0.0, map_at=map_at, ap=aps,
        pr=[(float(r), float(p)) for r, p in zip(grid, curve)],
        n_queries=len(query_bits), n_db=len(db), codes=codes,
    )


# --- Code files ---
def save_code_database(db: CodeDatabase, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    header = f"{CODES_MAGIC}\t{CODES_VERSION}\t{db.modality}\t{db.q}\t{len(db)}\n"
    with open(path, "wb") as fh:
        fh.write(header.encode("utf-8"))
        fh.write(np.ascontiguousarray(db.packed, dtype=np.uint8).tobytes())
        fh.write(db.ids.astype("<i8").tobytes())
    return path


def load_code_database(path: Union[str, Path]) -> CodeDatabase:
    path = Path(path)
    if not path.is_file():
        raise NotFoundError(f"Code file '{path}' not found")
    with open(path, "rb") as fh:
        header = fh.readline().decode("utf-8", errors="replace").rstrip("\n").split("\t")
        body = fh.read()
    if len(header) != 5 or header[0] != CODES_MAGIC:
        raise CorruptDataError(f"'{path}' is not a code file")
    if header[1] != str(CODES_VERSION):
        raise VersionError(f"Code file version {header[1]} is not supported (expected {CODES_VERSION})")
    try:
        modality, q, count = header[2], int(header[3]), int(header[4])
    except ValueError as e:
        raise CorruptDataError(f"Code file header is unreadable: {e}") from e
    width = (q + 7) // 8
    if len(body) != count * width + count * 8:
        raise CorruptDataError(f"Code file '{path}' holds {len(body)} bytes, expected {count * (width + 8)}")
    packed = np.frombuffer(body[:count * width], dtype=np.uint8).reshape(count, width).copy()
    ids = np.frombuffer(body[count * width:], dtype="<i8").astype(np.int64)
    return CodeDatabase(modality, q, ids, packed)


def write_code_text(db: CodeDatabase, path: Union[str, Path]) -> Path:
    """One line per code: id, q and the 0/1 bit string."""
    bits = to_display_bits(db.bits)
    frame = pd.DataFrame({
        "id": db.ids,
        "q": db.q,
        "bits": ["".join(map(str, row)) for row in bits],
    })
    frame.to_csv(path, sep="\t", index=False, header=False)
    return Path(path)


def write_relaxed_codes(ids: np.ndarray, relaxed: np.ndarray, path: Union[str, Path]) -> Path:
    frame = pd.DataFrame(relaxed, columns=[f"h{j}" for j in range(relaxed.shape[1])])
    frame.insert(0, "id", np.asarray(ids, dtype=np.int64))
    frame.to_csv(path, index=False, float_format="%.10g")
    return Path(path)


def write_mask_dump(ids: np.ndarray, masks: np.ndarray, alpha: float, path: Union[str, Path]) -> Path:
    """Binary masks as `id alpha H W bits` lines; text masks use H = 1."""
    masks = np.asarray(masks)
    grid = masks.reshape(masks.shape[0], 1, -1) if masks.ndim == 2 else masks
    frame = pd.DataFrame({
        "id": np.asarray(ids, dtype=np.int64),
        "alpha": alpha,
        "H": grid.shape[1],
        "W": grid.shape[2],
        "bits": ["".join(str(int(v)) for v in row.reshape(-1)) for row in grid],
    })
    frame.to_csv(path, sep="\t", index=False, header=False, float_format="%.10g")
    return Path(path)


def write_retrieval(query_ids: Sequence[int], results: Sequence[RetrievalResult], path: Union[str, Path]) -> Path:
    rows = [(int(qid), rank, int(db_id), int(dist))
            for qid, result in zip(query_ids, results)
            for rank, (db_id, dist) in enumerate(zip(result.ids, result.distances), 1)]
    pd.DataFrame(rows, columns=["query_id", "rank", "db_id", "distance"]).to_csv(path, sep="\t", index=False)
    return Path(path)


def write_eval_outputs(reports: Sequence[EvalReport], out_dir: Union[str, Path]) -> Dict[str, Path]:
    """metrics.tsv, one pr-<direction>.csv per report, and summary.txt."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metric_rows = []
    paths = {}
    for report in reports:
        name = report.direction.value if report.codes == "foreground" else f"{report.direction.value}-bg"
        metric = "map" if report.map_at is None else f"map@{report.map_at}"
        metric_rows.append((metric, name, report.q, report.map))
        pr_path = out / f"pr-{name}.csv"
        pd.DataFrame(report.pr, columns=["recall", "precision"]).to_csv(pr_path, index=False, float_format="%.6f")
        paths[f"pr-{name}"] = pr_path
    metrics_path = out / "metrics.tsv"
    pd.DataFrame(metric_rows, columns=["metric", "direction", "q", "value"]).to_csv(
        metrics_path, sep="\t", index=False, float_format="%.6f")
    summary_path = out / "summary.txt"
    summary_path.write_text(format_summary(reports), encoding="utf-8")
    paths.update({"metrics": metrics_path, "summary": summary_path})
    return paths


def format_summary(reports: Sequence[EvalReport]) -> str:
    lines = []
    for r in reports:
        metric = "MAP" if r.map_at is None else f"MAP@{r.map_at}"
        lines.append(f"{r.direction.value:<5} {r.codes:<10} q={r.q:<3} {metric}={r.map:.4f} "
                     f"({r.n_queries} queries, {r.n_db} database)")
    return "\n".join(lines) + "\n"


# --- Test-time encoding ---
@dataclass
class EncodedCorpus:
    """Foreground codes of one modality plus optional diagnostics."""
    database: CodeDatabase
    relaxed: np.ndarray
    masks: np.ndarray
    alpha: float
    background: Optional[CodeDatabase] = None
    background_relaxed: Optional[np.ndarray] = None


def encode_corpus(model: "HashingModel", instances: np.ndarray, ids: Sequence[int], modality: str,
                  with_background: bool = False, batch_size: int = 256) -> EncodedCorpus:
    """Encode, mask, split and hash each instance; only the foreground code enters the database."""
    if modality not in ("image", "text"):
        raise ValidationError(f"Unknown modality '{modality}' (expected image or text)")
    instances = np.asarray(instances, dtype=np.float64)
    ids = np.asarray(ids, dtype=np.int64)
    if len(ids) != len(instances):
        raise DimensionError(f"{len(ids)} ids for {len(instances)} instances")
    branch = model.encode_image_branch if modality == "image" else model.encode_text_branch
    q = model.q
    fg_parts, bg_parts, mask_parts = [], [], []
    alpha = 0.0
    for start in range(0, len(instances), batch_size):
        fg, bg, mask = branch(instances[start:start + batch_size])
        fg_parts.append(fg)
        bg_parts.append(bg)
        mask_parts.append(mask.z.astype(np.uint8))
        alpha = mask.alpha
    if fg_parts:
        relaxed = np.concatenate(fg_parts)
        relaxed_bg = np.concatenate(bg_parts)
        masks = np.concatenate(mask_parts)
    else:
        relaxed = relaxed_bg = np.zeros((0, q))
        grid = model.image_encoder.grid_shape[:2] if modality == "image" else (model.spec.text_features,)
        masks = np.zeros((0,) + tuple(grid), dtype=np.uint8)
        alpha = (model.image_attention.alpha_for(*grid) if modality == "image"
                 else model.text_attention.alpha_for(grid[0]))
    database = CodeDatabase.from_codes(modality, relaxed, ids) if len(ids) else \
        CodeDatabase(modality, q, ids, np.zeros((0, (q + 7) // 8), dtype=np.uint8))
    background = None
    if with_background:
        background = CodeDatabase.from_codes(f"{modality}_bg", relaxed_bg, ids) if len(ids) else \
            CodeDatabase(f"{modality}_bg", q, ids, np.zeros((0, (q + 7) // 8), dtype=np.uint8))
    return EncodedCorpus(database, relaxed, masks, alpha, background, relaxed_bg if with_background else None)
