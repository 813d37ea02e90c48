"""Training for the tiny transformer mask predictor."""
import logging
import math
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
import torch
import torch.nn as nn
import torch.optim as optim
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.config import (
    BETAS,
    CLIP_NORM,
    CORPUS_SIZE,
    CORPUS_TOKENS,
    DEFAULT_BATCH_SIZE,
    DEFAULT_SEED,
    DEFAULT_TRAIN_STEPS,
    PEAK_LR,
    WARMUP_FRACTION,
    WEIGHT_DECAY,
)
from src.ml.diffusion import forward_mask, masked_cross_entropy, sample_time
from src.ml.model import Params, TinyTransformerConfig, backward, forward, init_params, is_norm
from src.ml.rng import Stream, stream
from src.ml.seqio import NUCLEOTIDES, NucleotideSequence, TokenSequence, build_vocab, tokenize

logger = logging.getLogger(__name__)

MOTIF = "GGATCCGGATCC"
MARKOV_STAY = 0.85


class TrainingDivergedError(RuntimeError):
    """Raised when the training loss becomes non-finite."""

    def __init__(self, step: int, loss: float):
        self.step = step
        self.loss = loss
        super().__init__(f"training diverged at step {step}: loss = {loss}")


class TrainConfig(BaseModel):
    """Optimizer recipe and loop settings."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    steps: int = DEFAULT_TRAIN_STEPS
    batch_size: int = Field(DEFAULT_BATCH_SIZE, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0)
    peak_lr: float = Field(PEAK_LR, gt=0)
    beta1: float = Field(BETAS[0], ge=0, lt=1)
    beta2: float = Field(BETAS[1], ge=0, lt=1)
    eps: float = Field(1e-8, gt=0)
    weight_decay: float = Field(WEIGHT_DECAY, ge=0)
    clip_norm: float = Field(CLIP_NORM, gt=0)
    warmup_fraction: float = Field(WARMUP_FRACTION, ge=0, le=1)
    precision: str = "float64"
    log_every: int = Field(100, ge=1)

    @field_validator("steps")
    @classmethod
    def check_steps(cls, v: int) -> int:
        if v < 1:
            raise ValueError("steps must be >= 1")
        return v

    @field_validator("precision")
    @classmethod
    def check_precision(cls, v: str) -> str:
        if v not in ("float64", "float32"):
            raise ValueError(f"precision must be float64 or float32, got {v!r}")
        return v

    @property
    def dtype(self):
        return np.dtype(self.precision)

    @property
    def warmup_steps(self) -> int:
        return int(math.ceil(self.warmup_fraction * self.steps))


def warmup_cosine(cfg: TrainConfig) -> Callable[[int], float]:
    """LR multiplier: linear warmup from 0 to 1, then cosine decay to 0 at ``cfg.steps``."""
    warmup = cfg.warmup_steps
    total = cfg.steps

    def lr_lambda(step: int) -> float:
        if step < warmup:
            return step / warmup
        progress = (step - warmup) / max(1, total - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(progress, 1.0)))

    return lr_lambda


def decays(name: str) -> bool:
    """Decoupled weight decay applies to projection matrices only."""
    return not (is_norm(name) or name == "embedding")


class ParamOptimizer:
    """
    torch AdamW, warmup/cosine LambdaLR and global-norm clipping over numpy parameters.

    The tensors share memory with the arrays in ``params``, so every optimizer
    step updates those arrays in place.
    """

    def __init__(self, params: Params, cfg: TrainConfig):
        self.params = params
        self.clip_norm = cfg.clip_norm
        self.tensors: Dict[str, torch.Tensor] = {
            name: torch.from_numpy(p).requires_grad_() for name, p in params.items()
        }

        groups = [
            {"params": [t for name, t in self.tensors.items() if decays(name)], "weight_decay": cfg.weight_decay},
            {"params": [t for name, t in self.tensors.items() if not decays(name)], "weight_decay": 0.0},
        ]
        self.optimizer = optim.AdamW(
            [g for g in groups if g["params"]],
            lr=cfg.peak_lr,
            betas=(cfg.beta1, cfg.beta2),
            eps=cfg.eps,
        )
        self.scheduler = optim.lr_scheduler.LambdaLR(self.optimizer, warmup_cosine(cfg))

    @property
    def lr(self) -> float:
        """Learning rate the next ``step`` will use."""
        return self.optimizer.param_groups[0]["lr"]

    def step(self, grads: Params) -> float:
        """
        Clip ``grads`` to the global norm limit and take one AdamW step.

        Returns:
            The pre-clip global gradient norm; when it is not finite no update is made
        """
        for name, t in self.tensors.items():
            t.grad = torch.from_numpy(np.array(grads[name], dtype=self.params[name].dtype))
        grad_norm = float(nn.utils.clip_grad_norm_(list(self.tensors.values()), self.clip_norm))
        if not math.isfinite(grad_norm):
            return grad_norm
        self.optimizer.step()
        self.scheduler.step()
        return grad_norm


def _check_corpus(corpus: Sequence[TokenSequence], model_cfg: TinyTransformerConfig) -> np.ndarray:
    if not corpus:
        raise ValueError("training corpus is empty")
    lengths = {len(x) for x in corpus}
    if len(lengths) != 1:
        raise ValueError(f"training sequences must share one token length, got {sorted(lengths)}")
    length = lengths.pop()
    if length > model_cfg.max_len:
        raise ValueError(f"token length {length} exceeds max_len {model_cfg.max_len}")
    if any(x.vocab_k != model_cfg.k for x in corpus):
        raise ValueError(f"corpus tokenization does not match the model vocabulary (k={model_cfg.k})")
    return np.stack([x.ids for x in corpus])


def batch_loss(
    params: Params,
    model_cfg: TinyTransformerConfig,
    x0: np.ndarray,
    rng: np.random.Generator,
    with_grads: bool = True,
) -> Tuple[float, Optional[Params]]:
    """Mean masked diffusion loss of a batch of clean sequences and, optionally, its gradients."""
    vocab_k = model_cfg.k
    states = []
    times = np.empty(len(x0))
    for i, ids in enumerate(x0):
        times[i] = sample_time(rng)
        states.append(forward_mask(TokenSequence(ids, vocab_k=vocab_k), times[i], rng))
    masked_ids = np.stack([s.ids for s in states])
    flags = np.stack([s.mask_flags for s in states])

    log_probs, cache = forward(params, model_cfg, masked_ids, return_cache=True)
    losses, grad_lp = masked_cross_entropy(log_probs, flags, x0, 1.0 / times)
    loss = float(losses.mean())
    if not with_grads:
        return loss, None
    return loss, backward(params, model_cfg, cache, grad_lp / len(x0))


def train(
    corpus: Sequence[TokenSequence],
    model_cfg: TinyTransformerConfig,
    train_cfg: TrainConfig,
    initial_params: Optional[Params] = None,
) -> Tuple[Params, List[Dict[str, float]]]:
    """
    Train the transformer on the masked diffusion objective.

    Args:
        corpus: Clean sequences of equal token length
        model_cfg: Architecture
        train_cfg: Optimizer recipe, step count and seed
        initial_params: Start from these instead of a fresh initialization

    Returns:
        Tuple of (final parameters, per-step log of {step, lr, loss, grad_norm})

    Raises:
        ValueError: On an empty or ragged corpus
        TrainingDivergedError: If the loss becomes NaN or infinite
    """
    data = _check_corpus(corpus, model_cfg)
    seed = train_cfg.seed
    if initial_params is None:
        params = init_params(model_cfg, stream(seed, Stream.INIT), dtype=train_cfg.dtype)
    else:
        params = {name: p.astype(train_cfg.dtype) for name, p in initial_params.items()}
    optimizer = ParamOptimizer(params, train_cfg)

    logger.info(
        f"Training {model_cfg.layers}x{model_cfg.model_dim} transformer on {len(data)} sequences "
        f"of {data.shape[1]} tokens for {train_cfg.steps} steps (seed={seed})"
    )
    log: List[Dict[str, float]] = []
    for step in range(train_cfg.steps):
        batch_idx = stream(seed, Stream.BATCH, step).integers(0, len(data), size=train_cfg.batch_size)
        loss, grads = batch_loss(params, model_cfg, data[batch_idx], stream(seed, Stream.MASK, step))
        if not np.isfinite(loss):
            raise TrainingDivergedError(step + 1, loss)

        lr = optimizer.lr
        grad_norm = optimizer.step(grads)
        if not np.isfinite(grad_norm):
            raise TrainingDivergedError(step + 1, loss)

        log.append({"step": step + 1, "lr": lr, "loss": loss, "grad_norm": grad_norm})
        if (step + 1) % train_cfg.log_every == 0 or step == 0:
            logger.info(f"Step [{step + 1}/{train_cfg.steps}] loss {loss:.4f}, lr {lr:.3e}, grad norm {grad_norm:.3f}")

    logger.info(f"Training complete, final loss {log[-1]['loss']:.4f}")
    return params, log


def evaluate_loss(
    params: Params,
    model_cfg: TinyTransformerConfig,
    corpus: Sequence[TokenSequence],
    seed: int = DEFAULT_SEED,
    repeats: int = 4,
    batch_size: int = 32,
) -> float:
    """Monte-Carlo masked diffusion loss over ``corpus`` with a fixed evaluation stream."""
    data = _check_corpus(corpus, model_cfg)
    total, count = 0.0, 0
    for r in range(repeats):
        for start in range(0, len(data), batch_size):
            chunk = data[start:start + batch_size]
            loss, _ = batch_loss(params, model_cfg, chunk, stream(seed, Stream.EVAL, r, start), with_grads=False)
            total += loss * len(chunk)
            count += len(chunk)
    return total / count


class SyntheticMotifCorpus:
    """Synthetic DNA with a planted palindromic motif.

    Background bases follow a first-order Markov chain that steps to the
    cyclic successor (A->C->G->T->A) with probability 0.85 and to each other
    base with probability 0.05. ``MOTIF`` (its own reverse complement) is
    written at a uniformly chosen k-aligned offset in a ``motif_fraction``
    share of the sequences.
    """

    def __init__(
        self,
        num_sequences: int = CORPUS_SIZE,
        num_tokens: int = CORPUS_TOKENS,
        k: int = 6,
        seed: int = DEFAULT_SEED,
        motif_fraction: float = 1.0,
    ):
        """
        Generate the corpus.

        Args:
            num_sequences: Number of sequences
            num_tokens: Token length of each sequence
            k: k-mer width; sequences are num_tokens * k bases
            seed: Corpus seed
            motif_fraction: Share of sequences that carry the motif
        """
        if num_sequences < 1 or num_tokens < 1:
            raise ValueError("corpus needs at least one sequence of at least one token")
        self.k = k
        self.num_tokens = num_tokens
        self.length = num_tokens * k
        if self.length < len(MOTIF):
            raise ValueError(f"sequences of {self.length} bases cannot hold the {len(MOTIF)}-bp motif")
        self.seed = seed

        rng = stream(seed, Stream.CORPUS)
        codes = self._markov_background(num_sequences, rng)
        self.labels = rng.random(num_sequences) < motif_fraction
        offsets = np.arange(0, self.length - len(MOTIF) + 1, k)
        motif_codes = np.array([NUCLEOTIDES.index(b) for b in MOTIF])
        for i in np.flatnonzero(self.labels):
            start = offsets[rng.integers(len(offsets))]
            codes[i, start:start + len(MOTIF)] = motif_codes

        alphabet = np.array(list(NUCLEOTIDES))
        self.sequences = [NucleotideSequence("".join(alphabet[row])) for row in codes]
        logger.info(f"Generated {num_sequences} synthetic sequences of {self.length} bp ({int(self.labels.sum())} with motif)")

    def _markov_background(self, n: int, rng: np.random.Generator) -> np.ndarray:
        codes = np.empty((n, self.length), dtype=np.int64)
        codes[:, 0] = rng.integers(0, 4, size=n)
        other = (1.0 - MARKOV_STAY) / 3
        for pos in range(1, self.length):
            u = rng.random(n)
            successor = (codes[:, pos - 1] + 1) % 4
            # fall through to one of the three remaining bases in cyclic order
            jump = np.minimum(((u - MARKOV_STAY) // other).astype(np.int64), 2) + 1
            codes[:, pos] = np.where(u < MARKOV_STAY, successor, (successor + jump) % 4)
        return codes

    def __len__(self) -> int:
        return len(self.sequences)

    def records(self, prefix: str = "syn") -> List[Tuple[str, NucleotideSequence]]:
        return [
            (f"{prefix}_{i} motif={int(label)}", seq)
            for i, (seq, label) in enumerate(zip(self.sequences, self.labels))
        ]

    def split(self, held_out_fraction: float = 0.1) -> Tuple[List[NucleotideSequence], List[NucleotideSequence]]:
        """Train / held-out split; the held-out part is the last ``held_out_fraction`` of the corpus."""
        n_held = max(1, int(round(held_out_fraction * len(self.sequences))))
        return self.sequences[:-n_held], self.sequences[-n_held:]

    def tokens(self, sequences: Optional[Sequence[NucleotideSequence]] = None) -> List[TokenSequence]:
        vocab = build_vocab(self.k)
        return [tokenize(s, vocab) for s in (self.sequences if sequences is None else sequences)]


def contains_motif(seq: NucleotideSequence) -> bool:
    return MOTIF in seq.bases
