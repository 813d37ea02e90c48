"""Iterative unmasking sampler.

Generation starts from an all-[M] sequence. At every step the predictor is
evaluated, tokens are drawn from its temperature-scaled rows (restricted to
k-mer ids), and a schedule-determined number of masked positions is committed,
chosen by a confidence strategy. P2 instead re-ranks every position each step
and may send committed tokens back to [M].
"""
import logging
from dataclasses import asdict, dataclass, field
from enum import Enum
from typing import List, Optional, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field
from scipy.special import entr, softmax

from src.config import DEFAULT_SAMPLING_STEPS, DEFAULT_SEED, DEFAULT_STRATEGY, DEFAULT_TEMPERATURE
from src.ml.diffusion import MaskedState, check_log_probs
from src.ml.model import MaskPredictor
from src.ml.rng import Stream, stream
from src.ml.seqio import SPECIAL_TOKENS, TokenSequence, Vocabulary

logger = logging.getLogger(__name__)


class Strategy(str, Enum):
    RANDOM = "random"
    MASKGIT = "maskgit"
    ENTROPY = "entropy"
    TOPKM = "topkm"
    P2 = "p2"


class ScheduleKind(str, Enum):
    LINEAR = "linear"
    COSINE = "cosine"


class SamplerConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    strategy: Strategy = Strategy(DEFAULT_STRATEGY)
    temperature: float = Field(DEFAULT_TEMPERATURE, gt=0)
    steps: int = Field(DEFAULT_SAMPLING_STEPS, ge=1)
    seed: int = Field(DEFAULT_SEED, ge=0)
    schedule: ScheduleKind = ScheduleKind.LINEAR


@dataclass(frozen=True)
class UnmaskSchedule:
    steps: int
    length: int
    kind: ScheduleKind
    counts: Tuple[int, ...]

    @property
    def cumulative(self) -> Tuple[int, ...]:
        return tuple(int(c) for c in np.cumsum(self.counts))


def make_schedule(steps: int, length: int, kind: ScheduleKind = ScheduleKind.LINEAR) -> UnmaskSchedule:
    """
    Per-step reveal counts summing to ``length``.

    Linear splits as evenly as possible with the remainder going to the
    earliest steps. Cosine rounds the cumulative target
    L * (1 - cos(pi * s / T)) / 2 half-up at each step and closes at L on the
    final step.
    """
    if steps < 1 or length < 1:
        raise ValueError(f"schedule needs steps >= 1 and length >= 1, got T={steps}, L={length}")
    kind = ScheduleKind(kind)
    if kind is ScheduleKind.LINEAR:
        base, remainder = divmod(length, steps)
        counts = [base + 1] * remainder + [base] * (steps - remainder)
    else:
        s = np.arange(1, steps + 1)
        cumulative = np.floor(length * (1.0 - np.cos(np.pi * s / steps)) / 2.0 + 0.5).astype(np.int64)
        cumulative[-1] = length
        counts = np.diff(cumulative, prepend=0).tolist()
    return UnmaskSchedule(steps=steps, length=length, kind=kind, counts=tuple(int(c) for c in counts))


def apply_temperature(logits: np.ndarray, temperature: float) -> np.ndarray:
    """softmax(logits / temperature) along the last axis."""
    if temperature <= 0:
        raise ValueError(f"temperature must be positive, got {temperature}")
    return softmax(np.asarray(logits) / temperature, axis=-1)


def token_distributions(log_probs: np.ndarray, temperature: float, num_kmers: int) -> np.ndarray:
    """Temperature-scaled rows restricted to k-mer ids; special tokens get no mass."""
    return apply_temperature(log_probs[..., :num_kmers], temperature)


def sample_tokens(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """One inverse-CDF draw per row."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(len(probs))[:, None] * cdf[:, -1:]
    return np.minimum((cdf <= u).sum(axis=-1), probs.shape[-1] - 1)


def confidences(
    strategy: Strategy,
    probs: np.ndarray,
    sampled: np.ndarray,
    rng: np.random.Generator,
) -> np.ndarray:
    """Per-row confidence scores; higher means commit earlier."""
    strategy = Strategy(strategy)
    if strategy is Strategy.RANDOM:
        return rng.random(len(probs))
    if strategy is Strategy.MASKGIT:
        return probs[np.arange(len(probs)), sampled]
    if strategy is Strategy.ENTROPY:
        return -entr(probs).sum(axis=-1)
    if strategy is Strategy.TOPKM:
        top2 = np.partition(probs, -2, axis=-1)[:, -2:]
        return top2[:, 1] - top2[:, 0]
    return probs.max(axis=-1)


def rank(conf: np.ndarray) -> np.ndarray:
    """Indices by descending confidence; ties keep the lower index first."""
    return np.argsort(-conf, kind="stable")


def select_positions(
    strategy: Strategy,
    probs: np.ndarray,
    sampled: np.ndarray,
    masked: np.ndarray,
    n: int,
    rng: np.random.Generator,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Choose ``n`` of the masked positions to commit.

    Args:
        strategy: Confidence rule
        probs: Token distributions, one row per masked position
        sampled: Token drawn for each masked position
        masked: Masked positions in ascending order
        n: Number of positions to commit
        rng: Stream for the random strategy

    Returns:
        Tuple of (row indices into ``masked`` of the chosen positions, confidences of all rows)

    Raises:
        ValueError: If n exceeds the number of masked positions
    """
    if n > len(masked):
        raise ValueError(f"cannot unmask {n} positions, only {len(masked)} are masked")
    conf = confidences(strategy, probs, sampled, rng)
    chosen = np.sort(rank(conf)[:n])
    return chosen, conf


@dataclass
class StepRecord:
    """One reverse step: the masked set before it and what it committed or re-masked."""

    step: int
    masked_before: List[int]
    unmasked: List[int]
    tokens: List[int]
    confidences: List[float]
    remasked: List[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _num_kmers(pred: MaskPredictor) -> int:
    return pred.vocab_size - len(SPECIAL_TOKENS)


def sample_step(
    state: MaskedState,
    pred: MaskPredictor,
    cfg: SamplerConfig,
    n: int,
    rng: np.random.Generator,
    step: int = 0,
) -> Tuple[MaskedState, StepRecord]:
    """
    Commit ``n`` masked positions.

    Chosen positions take tokens drawn from the temperature-scaled predictor
    rows; the remaining masked positions stay [M]; every other position is
    copied unchanged.
    """
    masked = state.masked_positions
    if n > len(masked):
        raise ValueError(f"cannot unmask {n} positions, only {len(masked)} are masked")
    if n == 0:
        return state, StepRecord(step, masked.tolist(), [], [], [])

    log_probs = check_log_probs(pred.log_probs(state), len(state))
    probs = token_distributions(log_probs[masked], cfg.temperature, _num_kmers(pred))
    sampled = sample_tokens(probs, rng)
    chosen, conf = select_positions(cfg.strategy, probs, sampled, masked, n, rng)

    ids = state.ids.copy()
    ids[masked[chosen]] = sampled[chosen]
    record = StepRecord(
        step=step,
        masked_before=masked.tolist(),
        unmasked=masked[chosen].tolist(),
        tokens=sampled[chosen].tolist(),
        confidences=conf[chosen].tolist(),
    )
    return state.replace(ids), record


def p2_step(
    state: MaskedState,
    pred: MaskPredictor,
    cfg: SamplerConfig,
    keep: int,
    rng: np.random.Generator,
    step: int = 0,
) -> Tuple[MaskedState, StepRecord]:
    """
    Re-rank every position and keep the ``keep`` most confident unmasked.

    Confidence is the maximum temperature-scaled probability of each row.
    Kept masked positions receive a freshly drawn token, kept unmasked ones
    retain their token, and every other position becomes [M].
    """
    length = len(state)
    if not 0 <= keep <= length:
        raise ValueError(f"keep count {keep} outside [0, {length}]")
    masked_flags = state.mask_flags

    log_probs = check_log_probs(pred.log_probs(state), length)
    probs = token_distributions(log_probs, cfg.temperature, _num_kmers(pred))
    sampled = sample_tokens(probs, rng)
    conf = confidences(Strategy.P2, probs, sampled, rng)
    kept = np.sort(rank(conf)[:keep])

    ids = np.full(length, state.mask_id, dtype=np.int64)
    ids[kept] = np.where(masked_flags[kept], sampled[kept], state.ids[kept])
    fresh = kept[masked_flags[kept]]
    keep_flags = np.zeros(length, dtype=bool)
    keep_flags[kept] = True
    record = StepRecord(
        step=step,
        masked_before=np.flatnonzero(masked_flags).tolist(),
        unmasked=fresh.tolist(),
        tokens=sampled[fresh].tolist(),
        confidences=conf[fresh].tolist(),
        remasked=np.flatnonzero(~masked_flags & ~keep_flags).tolist(),
    )
    return state.replace(ids), record


def generate(
    pred: MaskPredictor,
    length: int,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    rng: np.random.Generator,
    trajectory: Optional[List[StepRecord]] = None,
) -> TokenSequence:
    """
    Generate one clean sequence of ``length`` tokens.

    Args:
        pred: Mask predictor over ``vocab``
        length: Token length
        cfg: Strategy, temperature, step count and schedule
        vocab: Vocabulary of the predictor
        rng: Stream for token draws and random confidences
        trajectory: If given, a StepRecord per step is appended to it

    Returns:
        TokenSequence with no [M] and no special tokens
    """
    if length < 1:
        raise ValueError(f"length must be >= 1, got {length}")
    if pred.vocab_size != vocab.size:
        raise ValueError(f"predictor vocabulary size {pred.vocab_size} does not match vocabulary size {vocab.size}")

    schedule = make_schedule(cfg.steps, length, cfg.schedule)
    state = MaskedState.fully_masked(length, vocab.mask_id)
    if cfg.strategy is Strategy.P2:
        for step, keep in enumerate(schedule.cumulative, start=1):
            state, record = p2_step(state, pred, cfg, keep, rng, step)
            if trajectory is not None:
                trajectory.append(record)
    else:
        for step, n in enumerate(schedule.counts, start=1):
            state, record = sample_step(state, pred, cfg, n, rng, step)
            if trajectory is not None:
                trajectory.append(record)

    if not state.is_clean():
        raise RuntimeError(f"generation ended with {state.num_masked} masked positions")
    return TokenSequence(state.ids, vocab_k=vocab.k)


def generate_many(
    pred: MaskPredictor,
    count: int,
    length: int,
    cfg: SamplerConfig,
    vocab: Vocabulary,
    trajectories: Optional[List[List[StepRecord]]] = None,
) -> List[TokenSequence]:
    """Generate ``count`` sequences; sequence i draws from its own stream (cfg.seed, i)."""
    outputs = []
    for index in range(count):
        trajectory = [] if trajectories is not None else None
        outputs.append(generate(pred, length, cfg, vocab, stream(cfg.seed, Stream.SAMPLE, index), trajectory))
        if trajectories is not None:
            trajectories.append(trajectory)
        if (index + 1) % 50 == 0:
            logger.info(f"Generated {index + 1}/{count} sequences")
    logger.info(
        f"Generated {count} sequences of {length} tokens "
        f"(strategy={cfg.strategy.value}, temperature={cfg.temperature}, steps={cfg.steps}, schedule={cfg.schedule.value})"
    )
    return outputs
