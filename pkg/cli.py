"""
Command-line surface.

Every subcommand wraps one service call. Library errors are turned into exit codes here
and nowhere else: 1 validation, 2 numeric failure, 3 storage.
"""

import argparse
from typing import List, Optional

from config import settings
from errors import NumericError, StorageError, ValidationError, XMHError
from models import ALL_DIRECTIONS, Direction
from services import (
    dataset_service, diagnostics_service, encoding_service, evaluation_service, retrieval_service,
    sweep_service, training_service,
)


class CommandParser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting, so bad flags map to exit code 1."""

    def error(self, message):
        raise ValidationError(f"{self.prog}: {message}")


def _positive_int(text: str) -> int:
    value = int(text)
    if value <= 0:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = CommandParser(prog="xmhash", description="Attention-aware adversarial cross-modal hashing")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=CommandParser)

    p = sub.add_parser("gen-data", help="generate a synthetic planted-foreground dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_positive_int, default=2400)
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--vocab", type=_positive_int, default=256)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=settings.XMH_DEFAULT_SEED)
    p.add_argument("--test", type=_positive_int, default=200)
    p.add_argument("--train", type=_positive_int, default=1000)
    p.add_argument("--image-size", type=_positive_int, default=16)
    p.add_argument("--grid-size", type=_positive_int, default=8)
    p.add_argument("--force", action="store_true")

    p = sub.add_parser("train", help="run alternating training")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)

    p = sub.add_parser("encode", help="encode a split into a code database")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "retrieval"])
    p.add_argument("--modality", required=True, choices=["image", "text"])
    p.add_argument("--out", required=True)
    p.add_argument("--q", type=_positive_int)
    p.add_argument("--dump-masks", action="store_true")
    p.add_argument("--with-background", action="store_true")
    p.add_argument("--dump-relaxed", action="store_true")

    p = sub.add_parser("retrieve", help="rank query codes against a code database")
    p.add_argument("--queries", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=_positive_int, default=100)

    p = sub.add_parser("eval", help="MAP and PR curve for one direction")
    p.add_argument("--queries", required=True)
    p.add_argument("--db", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--direction", required=True, choices=[d.value for d in ALL_DIRECTIONS])
    p.add_argument("--map-at", type=_positive_int)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gradcheck", help="finite-difference verification suite")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--samples", type=_positive_int, default=20)

    p = sub.add_parser("mask-stats", help="mask occupancy and IoU against planted masks")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "test", "retrieval"])
    p.add_argument("--out", required=True)
    p.add_argument("--baseline-samples", type=_positive_int, default=1000)

    p = sub.add_parser("sweep", help="train and evaluate one model per code length")
    p.add_argument("--data", required=True)
    p.add_argument("--config")
    p.add_argument("--out", required=True)
    p.add_argument("--lengths", type=_positive_int, nargs="+", default=[16, 32, 64])
    p.add_argument("--map-at", type=_positive_int)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.command == "gen-data":
        dataset_service.generate(args.out, n=args.n, classes=args.classes, vocab=args.vocab, noise=args.noise,
                                 seed=args.seed, n_test=args.test, n_train=args.train,
                                 image_size=args.image_size, grid_size=args.grid_size, force=args.force)
    elif args.command == "train":
        training_service.train(args.data, args.config, args.out)
    elif args.command == "encode":
        encoding_service.encode(args.data, args.checkpoint, args.split, args.modality, args.out,
                                dump_masks=args.dump_masks, with_background=args.with_background,
                                dump_relaxed=args.dump_relaxed, q=args.q)
    elif args.command == "retrieve":
        retrieval_service.retrieve(args.queries, args.db, args.out, top_k=args.top_k)
    elif args.command == "eval":
        evaluation_service.evaluate_files(args.queries, args.db, args.data, Direction(args.direction),
                                          map_at=args.map_at, out=args.out)
    elif args.command == "gradcheck":
        report = diagnostics_service.gradcheck(seed=args.seed, tol=args.tol, samples=args.samples)
        if not report.passed:
            failed = ", ".join(e.name for e in report.entries if not e.passed)
            raise NumericError(f"Gradient check failed for: {failed}")
    elif args.command == "mask-stats":
        diagnostics_service.mask_stats(args.data, args.checkpoint, args.split, args.out,
                                       baseline_samples=args.baseline_samples)
    elif args.command == "sweep":
        table = sweep_service.sweep(args.data, args.config, args.out, lengths=args.lengths, map_at=args.map_at)
        if settings.XMH_VERBOSE:
            print(table.to_string(index=False))
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    try:
        return run(build_parser().parse_args(argv))
    except XMHError as e:
        print(f"❌ {e}")
        return e.exit_code
    except OSError as e:
        print(f"❌ I/O error: {e}")
        return StorageError.exit_code
