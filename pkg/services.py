from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from config import dump_train_config, load_train_config, settings
from data import PairedDataset, generate_synthetic, load_dataset, make_splits, random_rectangle_mask, save_dataset
from errors import ValidationError
from gradcheck import run_gradcheck
from models import RETRIEVAL_DIRECTIONS, Direction, EvalReport, GradcheckReport, MaskSummary, TrainConfig
from retrieval import (
    CodeDatabase, encode_corpus, evaluate, hamming_rank, load_code_database, save_code_database,
    write_code_text, write_eval_outputs, write_mask_dump, write_relaxed_codes, write_retrieval,
)
from trainer import HashingModel, TrainResult, load_checkpoint, train

PathLike = Union[str, Path]


def _say(message: str) -> None:
    if settings.XMH_VERBOSE:
        print(message)


def _modality_inputs(dataset: PairedDataset, modality: str, indices: np.ndarray) -> np.ndarray:
    if modality == "image":
        return dataset.images[indices]
    if modality == "text":
        return dataset.bows[indices]
    raise ValidationError(f"Unknown modality '{modality}' (expected image or text)")


class DatasetService:
    """Service for generating and loading the synthetic paired corpus."""

    @staticmethod
    def generate(out: PathLike, n: int = 2400, classes: int = 4, vocab: int = 256, noise: float = 0.1,
                 seed: int = 7, n_test: int = 200, n_train: int = 1000, image_size: int = 16,
                 grid_size: int = 8, force: bool = False) -> Path:
        """Generate, split and save a dataset directory."""
        dataset = generate_synthetic(n, classes, image_size=image_size, grid_size=grid_size, vocab=vocab,
                                     noise=noise, seed=seed)
        dataset.splits = make_splits(n, n_test, n_train, seed)
        path = save_dataset(dataset, out, force=force)
        _say(f"✅ Wrote {n} pairs ({classes} classes, V={vocab}) to {path}")
        return path

    @staticmethod
    def load(path: PathLike) -> PairedDataset:
        return load_dataset(path)


class TrainingService:
    """Service for running the alternating optimization from files."""

    @staticmethod
    def train(data_path: PathLike, config_path: Optional[PathLike], out: PathLike,
              overrides: Optional[Dict] = None) -> TrainResult:
        dataset = load_dataset(data_path)
        cfg = load_train_config(config_path) if config_path else TrainConfig()
        if overrides:
            cfg = TrainConfig(**{**cfg.model_dump(), **overrides})
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        dump_train_config(cfg, out / "config.txt")
        result = train(dataset, cfg, out)
        _say(f"✅ Training finished: {len(result.records)} steps, {len(result.checkpoints)} checkpoints in {out}")
        return result


class EncodingService:
    """Service for turning a corpus split into code files."""

    @staticmethod
    def encode(data_path: PathLike, checkpoint: PathLike, split: str, modality: str, out: PathLike,
               dump_masks: bool = False, with_background: bool = False, dump_relaxed: bool = False,
               q: Optional[int] = None) -> Dict[str, Path]:
        dataset = load_dataset(data_path)
        model = load_checkpoint(checkpoint)
        if q is not None and q != model.q:
            raise ValidationError(f"Requested q={q} but checkpoint '{checkpoint}' produces {model.q}-bit codes")
        indices = dataset.split(split)
        encoded = encode_corpus(model, _modality_inputs(dataset, modality, indices), indices, modality,
                                with_background=with_background)

        out = Path(out)
        paths = {"codes": save_code_database(encoded.database, out)}
        paths["codes_text"] = write_code_text(encoded.database, out.with_name(out.name + ".txt"))
        if with_background:
            bg_path = out.with_name(out.name + ".bg")
            paths["background"] = save_code_database(encoded.background, bg_path)
        if dump_masks:
            paths["masks"] = write_mask_dump(indices, encoded.masks, encoded.alpha,
                                             out.with_name(out.name + ".masks"))
        if dump_relaxed:
            paths["relaxed"] = write_relaxed_codes(indices, encoded.relaxed, out.with_name(out.name + ".relaxed.csv"))
        _say(f"✅ Encoded {len(indices)} {modality} instances of split '{split}' into {model.q}-bit codes")
        return paths


class RetrievalService:
    """Service for ranking query codes against a code database."""

    @staticmethod
    def retrieve(queries_path: PathLike, db_path: PathLike, out: PathLike, top_k: Optional[int] = 100) -> Path:
        queries = load_code_database(queries_path)
        db = load_code_database(db_path)
        if queries.q != db.q:
            raise ValidationError(f"Query codes have {queries.q} bits, database codes have {db.q}")
        results = [hamming_rank(bits, db, k=top_k) for bits in queries.bits]
        path = write_retrieval(queries.ids, results, out)
        _say(f"✅ Ranked {len(queries)} queries against {len(db)} codes -> {path}")
        return path


class EvaluationService:
    """Service for MAP / PR evaluation of code files and of in-memory models."""

    @staticmethod
    def resolve_direction(direction: Direction, query_modality: str, db_modality: str) -> str:
        """Check modalities against the direction; returns which codes the database holds."""
        base_db = db_modality[:-3] if db_modality.endswith("_bg") else db_modality
        if query_modality != direction.query_modality:
            raise ValidationError(
                f"Direction {direction.value} needs {direction.query_modality} queries, got {query_modality} codes")
        if base_db != direction.db_modality:
            raise ValidationError(
                f"Direction {direction.value} needs a {direction.db_modality} database, got {db_modality} codes")
        if direction.is_adversarial and not db_modality.endswith("_bg"):
            raise ValidationError(f"Direction {direction.value} ranks background codes; encode with --with-background")
        return "background" if db_modality.endswith("_bg") else "foreground"

    @staticmethod
    def evaluate_files(queries_path: PathLike, db_path: PathLike, data_path: PathLike, direction: Direction,
                       map_at: Optional[int] = None, out: Optional[PathLike] = None) -> EvalReport:
        queries = load_code_database(queries_path)
        db = load_code_database(db_path)
        if queries.q != db.q:
            raise ValidationError(f"Query codes have {queries.q} bits, database codes have {db.q}")
        codes = EvaluationService.resolve_direction(direction, queries.modality, db.modality)
        dataset = load_dataset(data_path)
        if max(queries.ids.max(initial=-1), db.ids.max(initial=-1)) >= dataset.n:
            raise ValidationError(f"Code ids exceed the {dataset.n} instances of dataset '{data_path}'")
        relevance = dataset.similarity().dense(queries.ids, db.ids)
        report = evaluate(queries.bits, db, relevance, direction, map_at=map_at, codes=codes)
        if out is not None:
            write_eval_outputs([report], out)
        _say(f"🎯 {direction.value} ({codes}) q={report.q}: MAP={report.map:.4f}")
        return report

    @staticmethod
    def evaluate_model(model: HashingModel, dataset: PairedDataset,
                       directions: Sequence[Direction] = RETRIEVAL_DIRECTIONS, with_background: bool = True,
                       map_at: Optional[int] = None) -> List[EvalReport]:
        """Queries from the test split against the retrieval split, for each direction."""
        test_idx, db_idx = dataset.split("test"), dataset.split("retrieval")
        encoded = {}
        for modality in ("image", "text"):
            encoded[("query", modality)] = encode_corpus(
                model, _modality_inputs(dataset, modality, test_idx), test_idx, modality)
            encoded[("db", modality)] = encode_corpus(
                model, _modality_inputs(dataset, modality, db_idx), db_idx, modality, with_background=with_background)
        relevance = dataset.similarity().dense(test_idx, db_idx)

        reports = []
        for direction in directions:
            queries = encoded[("query", direction.query_modality)].database
            db_corpus = encoded[("db", direction.db_modality)]
            reports.append(evaluate(queries.bits, db_corpus.database, relevance, direction, map_at=map_at))
            if with_background and not direction.is_intra_modal:
                reports.append(evaluate(queries.bits, db_corpus.background, relevance, direction,
                                        map_at=map_at, codes="background"))
        return reports


class DiagnosticsService:
    """Service for mask statistics and gradient verification."""

    @staticmethod
    def mask_iou(learned: np.ndarray, planted: np.ndarray) -> np.ndarray:
        """Per-instance IoU of two binary mask stacks; two empty masks score 1."""
        learned = np.asarray(learned, dtype=bool)
        planted = np.asarray(planted, dtype=bool)
        axes = tuple(range(1, learned.ndim))
        inter = (learned & planted).sum(axis=axes)
        union = (learned | planted).sum(axis=axes)
        return np.where(union > 0, inter / np.maximum(union, 1), 1.0)

    @staticmethod
    def baseline_iou(planted: np.ndarray, samples: int = 1000, seed: int = 7) -> float:
        """Monte-Carlo IoU of random 25-50% rectangles against the planted masks."""
        planted = np.asarray(planted)
        if len(planted) == 0:
            return 0.0
        rng = np.random.default_rng(seed)
        grid = planted.shape[1]
        picks = rng.integers(0, len(planted), size=samples)
        guesses = np.stack([random_rectangle_mask(grid, rng) for _ in range(samples)])
        return float(DiagnosticsService.mask_iou(guesses, planted[picks]).mean())

    @staticmethod
    def mask_stats(data_path: PathLike, checkpoint: PathLike, split: str = "test",
                   out: Optional[PathLike] = None, baseline_samples: int = 1000) -> Tuple[MaskSummary, pd.DataFrame]:
        dataset = load_dataset(data_path)
        model = load_checkpoint(checkpoint)
        indices = dataset.split(split)
        image = encode_corpus(model, dataset.images[indices], indices, "image")
        text = encode_corpus(model, dataset.bows[indices], indices, "text")

        occupancy_image = image.masks.reshape(len(indices), -1).mean(axis=1) if len(indices) else np.zeros(0)
        occupancy_text = text.masks.reshape(len(indices), -1).mean(axis=1) if len(indices) else np.zeros(0)
        frame = pd.DataFrame({"id": indices, "occupancy_image": occupancy_image, "occupancy_text": occupancy_text})

        mean_iou = baseline = None
        if dataset.masks is None:
            _say("⚠️ Dataset carries no planted masks; IoU omitted")
        elif dataset.masks.shape[1:] != image.masks.shape[1:]:
            _say(f"⚠️ Planted masks are {dataset.masks.shape[1:]} but learned masks are {image.masks.shape[1:]}; "
                 f"IoU omitted")
        else:
            planted = dataset.masks[indices]
            frame["iou"] = DiagnosticsService.mask_iou(image.masks, planted)
            mean_iou = float(frame["iou"].mean()) if len(frame) else 0.0
            baseline = DiagnosticsService.baseline_iou(planted, baseline_samples, seed=settings.XMH_DEFAULT_SEED)

        summary = MaskSummary(
            split=split, count=len(indices),
            mean_occupancy_image=float(occupancy_image.mean()) if len(indices) else 0.0,
            mean_occupancy_text=float(occupancy_text.mean()) if len(indices) else 0.0,
            mean_iou=mean_iou, baseline_iou=baseline,
            empty_image_masks=int((occupancy_image == 0).sum()), empty_text_masks=int((occupancy_text == 0).sum()),
        )
        if out is not None:
            frame.to_csv(out, index=False, float_format="%.6f")
        if mean_iou is not None:
            _say(f"🎯 Mask IoU {mean_iou:.4f} vs random-rectangle baseline {baseline:.4f}")
        return summary, frame

    @staticmethod
    def gradcheck(seed: int = 0, tol: float = 1e-4, samples: int = 20) -> GradcheckReport:
        return run_gradcheck(seed=seed, tol=tol, samples=samples, verbose=settings.XMH_VERBOSE)


class SweepService:
    """Service for the code-length comparison: one model per q, nothing else changed."""

    @staticmethod
    def sweep(data_path: PathLike, config_path: Optional[PathLike], out: PathLike,
              lengths: Sequence[int] = (16, 32, 64), map_at: Optional[int] = None) -> pd.DataFrame:
        dataset = load_dataset(data_path)
        base = load_train_config(config_path) if config_path else TrainConfig()
        out = Path(out)
        rows = []
        for q in lengths:
            cfg = TrainConfig(**{**base.model_dump(), "q": q})
            run_dir = out / f"q{q}"
            _say(f"🔄 Sweep: training q={q}")
            result = train(dataset, cfg, run_dir)
            reports = EvaluationService.evaluate_model(result.model, dataset, map_at=map_at)
            write_eval_outputs(reports, run_dir / "eval")
            rows.extend((q, r.direction.value, r.codes, r.map) for r in reports)
        table = pd.DataFrame(rows, columns=["q", "direction", "codes", "map"])
        out.mkdir(parents=True, exist_ok=True)
        table.to_csv(out / "sweep.tsv", sep="\t", index=False, float_format="%.6f")
        return table


# Global service instances
dataset_service = DatasetService()
training_service = TrainingService()
encoding_service = EncodingService()
retrieval_service = RetrievalService()
evaluation_service = EvaluationService()
diagnostics_service = DiagnosticsService()
sweep_service = SweepService()
