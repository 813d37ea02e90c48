"""Command implementations: one function per subcommand."""
import csv
import json
import logging
from argparse import Namespace
from pathlib import Path
from typing import Iterable, List, Optional, Sequence

import numpy as np

from src.cli.models import Provenance, RunConfig, load_run_config, provenance_for
from src.config import CORPUS_TOKENS, OUTPUT_DIR
from src.ml.head import fit_linear_head
from src.ml.metrics import KmerSpectrumEmbedder, evaluate
from src.ml.model import (
    GradientCheckError,
    TransformerPredictor,
    extract_embeddings,
    gradient_check,
    load_checkpoint,
    mean_pool,
    save_checkpoint,
)
from src.ml.sampler import SamplerConfig, ScheduleKind, StepRecord, Strategy, generate_many
from src.ml.seqio import NucleotideSequence, TokenSequence, build_vocab, detokenize, load_fasta, tokenize, write_fasta
from src.ml.train import SyntheticMotifCorpus, train

logger = logging.getLogger(__name__)

ABLATION_AXES = ("steps", "temp", "strategy", "schedule")


class UsageError(ValueError):
    """Raised for invalid command-line input; maps to exit code 2."""


def resolve_config(args: Namespace, **extra) -> RunConfig:
    """Merge the run-config file with explicit flags (flags win)."""
    overrides = {name: getattr(args, name) for name in RunConfig.model_fields if getattr(args, name, None) is not None}
    overrides.update({key: value for key, value in extra.items() if value is not None})
    return load_run_config(getattr(args, "config", None), overrides)


def _out_path(value: Optional[str], default: str) -> Path:
    path = Path(value) if value else OUTPUT_DIR / default
    path.parent.mkdir(parents=True, exist_ok=True)
    return path


def write_json(path: Optional[Path], payload: dict) -> None:
    text = json.dumps(payload, indent=2, sort_keys=False)
    if path is None:
        print(text)
        return
    path.write_text(text + "\n")
    logger.info(f"Report written to {path}")


def write_jsonl(path: Path, provenance: Provenance, records: Iterable[dict]) -> None:
    with path.open("w", newline="\n") as fh:
        fh.write(json.dumps({"provenance": provenance.model_dump()}) + "\n")
        for record in records:
            fh.write(json.dumps(record) + "\n")


def _load_sequences(path: str, skip_n_records: bool, label: str) -> List[NucleotideSequence]:
    records = load_fasta(path, skip_n_records=skip_n_records)
    if not records:
        raise UsageError(f"{label} FASTA {path} contains no sequences")
    return [seq for _, seq in records]


# ---------------------------------------------------------------------------


def cmd_build_vocab(args: Namespace) -> int:
    """Write the k-mer vocabulary file."""
    cfg = resolve_config(args)
    vocab = build_vocab(cfg.k)
    vocab.save(_out_path(cfg.out, f"vocab_k{cfg.k}.txt"))
    return 0


def cmd_make_corpus(args: Namespace) -> int:
    """Write the synthetic motif corpus as FASTA, optionally split into train and held-out files."""
    cfg = resolve_config(args)
    corpus = SyntheticMotifCorpus(
        num_sequences=args.n,
        num_tokens=args.tokens,
        k=cfg.k,
        seed=cfg.seed,
        motif_fraction=args.motif_fraction,
    )
    provenance = provenance_for("make-corpus", cfg)
    comments = provenance.comment_lines() + [f"k={cfg.k} tokens={args.tokens} motif_fraction={args.motif_fraction}"]
    records = corpus.records()
    out = _out_path(cfg.out, "corpus.fa")
    if args.held_out:
        n_held = len(corpus.split()[1])
        write_fasta(records[:-n_held], out, comments=comments)
        write_fasta(records[-n_held:], _out_path(args.held_out, "held_out.fa"), comments=comments)
        logger.info(f"Wrote {len(records) - n_held} train records to {out} and {n_held} held-out records to {args.held_out}")
    else:
        write_fasta(records, out, comments=comments)
        logger.info(f"Wrote {len(records)} records to {out}")
    return 0


def cmd_train(args: Namespace) -> int:
    """Train the transformer on a FASTA corpus; write the checkpoint and a JSONL log."""
    cfg = resolve_config(args)
    if not cfg.corpus:
        raise UsageError("train needs --corpus")
    model_cfg = cfg.transformer_config()
    vocab = build_vocab(cfg.k)

    sequences = [s for s in _load_sequences(cfg.corpus, cfg.skip_n_records, "corpus") if len(s) >= cfg.k]
    if not sequences:
        raise UsageError(f"no corpus sequence is at least k={cfg.k} bases long")
    tokens = [tokenize(s, vocab) for s in sequences]
    length = min(min(len(t) for t in tokens), model_cfg.max_len)
    if any(len(t) != length for t in tokens):
        logger.warning(f"Truncating corpus sequences to a common length of {length} tokens")
        tokens = [TokenSequence(t.ids[:length], vocab_k=t.vocab_k) for t in tokens]

    params, log = train(tokens, model_cfg, cfg.train_config())

    checkpoint = _out_path(cfg.out or cfg.checkpoint, "model.d3md")
    save_checkpoint(checkpoint, params, model_cfg)
    log_path = Path(args.log) if args.log else checkpoint.with_suffix(".log.jsonl")
    write_jsonl(log_path, provenance_for("train", cfg), log)
    logger.info(f"Training log written to {log_path}")
    return 0


def _sample_length(args: Namespace, k: int, max_len: int) -> int:
    if args.len is not None and args.tokens is not None:
        raise UsageError("give either --len (bases) or --tokens, not both")
    if args.len is not None:
        if args.len < k or args.len % k:
            raise UsageError(f"--len {args.len} is not a positive multiple of k={k}")
        length = args.len // k
    else:
        length = args.tokens if args.tokens is not None else min(CORPUS_TOKENS, max_len)
    if not 1 <= length <= max_len:
        raise UsageError(f"token length {length} outside [1, {max_len}]")
    return length


def _load_predictor(cfg: RunConfig):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    params, model_cfg = load_checkpoint(cfg.checkpoint)
    vocab = build_vocab(model_cfg.k)
    return TransformerPredictor(params, model_cfg), vocab


def _generate_bases(pred, vocab, count: int, length: int, sampler_cfg: SamplerConfig, trajectories=None) -> List[NucleotideSequence]:
    tokens = generate_many(pred, count, length, sampler_cfg, vocab, trajectories)
    return [detokenize(t, vocab) for t in tokens]


def cmd_sample(args: Namespace) -> int:
    """Generate sequences from a checkpoint and write them as FASTA."""
    cfg = resolve_config(args)
    pred, vocab = _load_predictor(cfg)
    cfg = cfg.model_copy(update={"k": vocab.k})
    sampler_cfg = cfg.sampler_config()
    length = _sample_length(args, vocab.k, pred.config.max_len)

    trajectories: Optional[List[List[StepRecord]]] = [] if args.trajectory else None
    sequences = _generate_bases(pred, vocab, args.n, length, sampler_cfg, trajectories)

    provenance = provenance_for("sample", cfg, sampler_cfg.seed)
    comments = provenance.comment_lines() + [
        f"strategy={sampler_cfg.strategy.value} temperature={sampler_cfg.temperature} "
        f"steps={sampler_cfg.steps} schedule={sampler_cfg.schedule.value} tokens={length}"
    ]
    out = _out_path(cfg.out, "generated.fa")
    records = [(f"gen_{sampler_cfg.seed}_{i}", s) for i, s in enumerate(sequences)]
    write_fasta(records, out, comments=comments)
    logger.info(f"Wrote {len(records)} sequences to {out}")

    if trajectories is not None:
        rows = (
            {"sequence": i, **record.to_dict()}
            for i, trajectory in enumerate(trajectories)
            for record in trajectory
        )
        write_jsonl(Path(args.trajectory), provenance, rows)
        logger.info(f"Trajectories written to {args.trajectory}")
    return 0


def cmd_eval(args: Namespace) -> int:
    """Score generated sequences against training and reference FASTA files."""
    cfg = resolve_config(args)
    generated = _load_sequences(args.generated, cfg.skip_n_records, "generated")
    training = _load_sequences(args.train, cfg.skip_n_records, "train")
    reference = _load_sequences(args.reference, cfg.skip_n_records, "reference")
    if len(generated) < 2 or len(reference) < 2:
        raise UsageError("generated and reference sets need at least two sequences each")

    report = evaluate(generated, training, reference, KmerSpectrumEmbedder(args.embedder_k))
    report = report.model_copy(update={"provenance": provenance_for("eval", cfg).model_dump()})
    write_json(Path(cfg.out) if cfg.out else None, report.model_dump(mode="json"))
    return 0


def _ablation_configs(axis: str, values: Sequence[str], base: SamplerConfig) -> List[SamplerConfig]:
    field = {"steps": "steps", "temp": "temperature", "strategy": "strategy", "schedule": "schedule"}[axis]
    parse = {"steps": int, "temp": float, "strategy": Strategy, "schedule": ScheduleKind}[axis]
    configs = []
    for raw in values:
        try:
            value = parse(raw)
        except ValueError as exc:
            raise UsageError(f"invalid value {raw!r} for axis {axis}: {exc}") from exc
        configs.append(SamplerConfig(**{**base.model_dump(), field: value}))
    return configs


def cmd_ablate(args: Namespace) -> int:
    """Sweep one sampler axis with fixed seeds; one CSV row of metrics per value."""
    cfg = resolve_config(args)
    if args.axis not in ABLATION_AXES:
        raise UsageError(f"unknown axis {args.axis!r}; expected one of {', '.join(ABLATION_AXES)}")
    pred, vocab = _load_predictor(cfg)
    cfg = cfg.model_copy(update={"k": vocab.k})
    length = _sample_length(args, vocab.k, pred.config.max_len)
    training = _load_sequences(args.train, cfg.skip_n_records, "train")
    reference = _load_sequences(args.reference, cfg.skip_n_records, "reference")
    embedder = KmerSpectrumEmbedder(args.embedder_k)

    values = [v.strip() for v in args.values.split(",") if v.strip()]
    if not values:
        raise UsageError("--values is empty")
    configs = _ablation_configs(args.axis, values, cfg.sampler_config())

    out = _out_path(cfg.out, f"ablate_{args.axis}.csv")
    fields = ["axis", "value", "diversity", "novelty", "gc_ratio_mean", "gc_undefined_count", "frechet"]
    with out.open("w", newline="") as fh:
        provenance = provenance_for("ablate", cfg)
        fh.write("# " + json.dumps(provenance.model_dump()) + "\n")
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for sampler_cfg, value in zip(configs, values):
            logger.info(f"Ablation {args.axis}={value}")
            generated = _generate_bases(pred, vocab, args.n, length, sampler_cfg)
            report = evaluate(generated, training, reference, embedder)
            writer.writerow({
                "axis": args.axis,
                "value": value,
                **{name: getattr(report, name) for name in fields[2:]},
            })
    logger.info(f"Ablation table written to {out}")
    return 0


def cmd_gradcheck(args: Namespace) -> int:
    """Compare analytic and finite-difference gradients; fails with the worst coordinate."""
    cfg = resolve_config(args)
    report = gradient_check(cfg.seed, corrupt=args.corrupt_gradient)
    write_json(Path(cfg.out) if cfg.out else None, {**report.to_dict(), "provenance": provenance_for("gradcheck", cfg).model_dump()})
    if not report.passed:
        raise GradientCheckError(
            f"max relative error {report.max_error:.3e} >= {report.tolerance:g} at "
            f"{report.worst_param}{list(report.worst_index)} "
            f"(analytic {report.worst_analytic:.6e}, numeric {report.worst_numeric:.6e})"
        )
    logger.info("Gradient check passed")
    return 0


def cmd_fit_head(args: Namespace) -> int:
    """Fit a linear head on mean-pooled embeddings for motif presence and report MCC."""
    cfg = resolve_config(args)
    pred, vocab = _load_predictor(cfg)
    cfg = cfg.model_copy(update={"k": vocab.k})
    length = _sample_length(args, vocab.k, pred.config.max_len)

    corpus = SyntheticMotifCorpus(num_sequences=args.n, num_tokens=length, k=vocab.k, seed=cfg.seed, motif_fraction=0.5)
    features = np.stack([mean_pool(extract_embeddings(x, pred.params, pred.config)) for x in corpus.tokens()])
    result = fit_linear_head(features, corpus.labels.astype(np.int64), seed=cfg.seed, held_out_fraction=args.held_out_fraction)

    write_json(Path(cfg.out) if cfg.out else None, {
        "train_mcc": result.train_mcc,
        "held_out_mcc": result.held_out_mcc,
        "n_train": result.n_train,
        "n_held_out": result.n_held_out,
        "steps": result.steps,
        "converged": result.converged,
        "provenance": provenance_for("fit-head", cfg).model_dump(),
    })
    return 0


COMMANDS = {
    "build-vocab": cmd_build_vocab,
    "make-corpus": cmd_make_corpus,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
    "fit-head": cmd_fit_head,
}


