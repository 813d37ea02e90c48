"""Command-line entry point for MaskDNA."""
import argparse
import logging
import sys
from typing import List, Optional

from pydantic import ValidationError

from src import __version__
from src.cli.commands import ABLATION_AXES, COMMANDS, UsageError
from src.config import CORPUS_SIZE, CORPUS_TOKENS, DEFAULT_EMBEDDER_K, LOG_LEVEL
from src.ml.model import GradientCheckError
from src.ml.sampler import ScheduleKind, Strategy
from src.ml.seqio import FastaParseError, VocabularyError
from src.ml.train import TrainingDivergedError

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2


def _add_sampler_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--strategy", choices=[s.value for s in Strategy], help="Position selection strategy")
    parser.add_argument("--temp", dest="temperature", type=float, help="Sampling temperature (default 1.1)")
    parser.add_argument("--steps", dest="sampling_steps", type=int, help="Reverse steps T (default 50)")
    parser.add_argument("--schedule", choices=[s.value for s in ScheduleKind], help="Unmask schedule")


def _add_length_flags(parser: argparse.ArgumentParser) -> None:
    group = parser.add_mutually_exclusive_group()
    group.add_argument("--len", type=int, help="Sequence length in bases (a multiple of k)")
    group.add_argument("--tokens", type=int, help="Sequence length in tokens")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="Flat key=value run-config file; flags override its values")
    common.add_argument("--seed", type=int, help="Seed for every random stream (default 0)")
    common.add_argument("--out", help="Output path")
    common.add_argument("--skip-n-records", action="store_true", default=None, help="Drop FASTA records containing N")
    common.add_argument("--log-level", default=LOG_LEVEL, help="Logging level")

    parser = argparse.ArgumentParser(prog="maskdna", description="Masked discrete diffusion for DNA sequences")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", parents=[common], help="Write a k-mer vocabulary file")
    p.add_argument("--k", type=int, help="k-mer width (1, 3, 6 or 9)")

    p = sub.add_parser("make-corpus", parents=[common], help="Write the synthetic motif corpus as FASTA")
    p.add_argument("--k", type=int)
    p.add_argument("--n", type=int, default=CORPUS_SIZE, help="Number of sequences")
    p.add_argument("--tokens", type=int, default=CORPUS_TOKENS, help="Tokens per sequence")
    p.add_argument("--motif-fraction", type=float, default=1.0, help="Share of sequences carrying the motif")
    p.add_argument("--held-out", help="Also write the last 10%% of the corpus here and leave it out of --out")

    p = sub.add_parser("train", parents=[common], help="Train the transformer mask predictor")
    p.add_argument("--corpus", help="Training FASTA")
    p.add_argument("--log", help="Training log (JSONL), defaults next to the checkpoint")
    p.add_argument("--k", type=int)
    p.add_argument("--steps", type=int, help="Optimizer steps")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", dest="peak_lr", type=float, help="Peak learning rate")
    p.add_argument("--precision", choices=["float64", "float32"])
    p.add_argument("--layers", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--model-dim", type=int)
    p.add_argument("--ff-dim", type=int)
    p.add_argument("--max-len", type=int)
    p.add_argument("--tie-embeddings", action="store_true", default=None)
    p.add_argument("--log-every", type=int)

    p = sub.add_parser("sample", parents=[common], help="Generate sequences from a checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=10, help="Number of sequences")
    _add_length_flags(p)
    _add_sampler_flags(p)
    p.add_argument("--trajectory", help="Write per-step trajectories (JSONL) here")

    p = sub.add_parser("eval", parents=[common], help="Score generated sequences")
    p.add_argument("--generated", required=True)
    p.add_argument("--train", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--embedder-k", type=int, default=DEFAULT_EMBEDDER_K)

    p = sub.add_parser("ablate", parents=[common], help="Sweep one sampler setting")
    p.add_argument("--checkpoint")
    p.add_argument("--axis", required=True, choices=ABLATION_AXES)
    p.add_argument("--values", required=True, help="Comma-separated values")
    p.add_argument("--n", type=int, default=50, help="Sequences per value")
    p.add_argument("--train", required=True)
    p.add_argument("--reference", required=True)
    p.add_argument("--embedder-k", type=int, default=DEFAULT_EMBEDDER_K)
    _add_length_flags(p)
    _add_sampler_flags(p)

    p = sub.add_parser("gradcheck", parents=[common], help="Finite-difference check of the backward pass")
    p.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)

    p = sub.add_parser("fit-head", parents=[common], help="Fit a linear head on mean-pooled embeddings")
    p.add_argument("--checkpoint")
    p.add_argument("--n", type=int, default=200, help="Labelled sequences")
    p.add_argument("--held-out-fraction", type=float, default=0.25)
    _add_length_flags(p)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code in (0, None) else EXIT_USAGE

    logging.basicConfig(
        level=args.log_level.upper(),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
        force=True,
    )

    try:
        return COMMANDS[args.command](args)
    except (UsageError, ValidationError, VocabularyError, FastaParseError, FileNotFoundError) as exc:
        logger.error(f"{args.command}: {exc}")
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (TrainingDivergedError, GradientCheckError) as exc:
        logger.error(f"{args.command} failed: {exc}")
        return EXIT_FAILURE
    except Exception as exc:
        logger.error(f"Unhandled exception: {str(exc)}", exc_info=True)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
