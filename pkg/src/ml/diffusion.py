"""Forward masking process and the masked diffusion training objective.

A clean token sequence x0 is corrupted by replacing each position with [M]
independently with probability t. The mask predictor is trained with the
1/t-weighted cross-entropy on masked positions only, which upper-bounds the
negative log-likelihood of the model distribution defined by iterative
unmasking. ``enumerate_model_distribution`` computes that distribution exactly
for tiny instances so the bound can be checked.
"""
import itertools
import logging
from dataclasses import dataclass
from functools import lru_cache
from typing import TYPE_CHECKING, Sequence, Tuple

import numpy as np
from scipy.special import logsumexp

from src.ml.seqio import TokenSequence, Vocabulary, mask_id_for

if TYPE_CHECKING:
    from src.ml.model import MaskPredictor

logger = logging.getLogger(__name__)

T_MIN = 1e-3
PROB_FLOOR = 1e-12
LOG_PROB_FLOOR = float(np.log(PROB_FLOOR))
MAX_ENUMERATION = 10 ** 5
ROW_TOLERANCE = 1e-6
ROW_TOLERANCE_32 = 1e-4


class PredictorError(ValueError):
    """Raised when a predictor output violates its contract."""


@dataclass(frozen=True, eq=False)
class MaskedState:
    """A partially masked token sequence x_t.

    ``t`` is the diffusion time when the state comes from the forward process;
    during generation it tracks the fraction of positions still masked.
    """

    ids: np.ndarray
    mask_id: int
    t: float

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        if ids.ndim != 1 or ids.size == 0:
            raise ValueError(f"masked state needs a non-empty 1-d id array, got shape {ids.shape}")
        if not 0.0 <= self.t <= 1.0:
            raise ValueError(f"t must lie in [0, 1], got {self.t}")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def fully_masked(cls, length: int, mask_id: int) -> "MaskedState":
        return cls(ids=np.full(length, mask_id, dtype=np.int64), mask_id=mask_id, t=1.0)

    def __len__(self) -> int:
        return int(self.ids.size)

    @property
    def mask_flags(self) -> np.ndarray:
        return self.ids == self.mask_id

    @property
    def masked_positions(self) -> np.ndarray:
        return np.flatnonzero(self.mask_flags)

    @property
    def num_masked(self) -> int:
        return int(self.mask_flags.sum())

    def is_clean(self) -> bool:
        return self.num_masked == 0

    def replace(self, ids: np.ndarray) -> "MaskedState":
        """New state with ``ids``; t becomes the masked fraction."""
        ids = np.asarray(ids, dtype=np.int64)
        return MaskedState(ids=ids, mask_id=self.mask_id, t=float(np.mean(ids == self.mask_id)))


@dataclass(frozen=True)
class LossValue:
    """Batch-mean Monte-Carlo estimate of the masked diffusion loss (nats per sequence)."""

    value: float
    masked_count: int
    per_sequence: np.ndarray

    @property
    def std_error(self) -> float:
        n = self.per_sequence.size
        if n < 2:
            return float("nan")
        return float(self.per_sequence.std(ddof=1) / np.sqrt(n))


def check_time(t: float) -> float:
    """Validate a diffusion time, which must lie in (0, 1]."""
    t = float(t)
    if not np.isfinite(t) or not 0.0 < t <= 1.0:
        raise ValueError(f"diffusion time must lie in (0, 1], got {t}")
    return t


def sample_time(rng: np.random.Generator) -> float:
    """Draw t ~ Uniform(T_MIN, 1] so the 1/t weight stays bounded."""
    return 1.0 - rng.random() * (1.0 - T_MIN)


def forward_mask(x0: TokenSequence, t: float, rng: np.random.Generator) -> MaskedState:
    """
    Mask each position of ``x0`` independently with probability ``t``.

    A draw that masks nothing is rejected and redrawn, so every returned state
    has at least one [M].
    """
    t = check_time(t)
    mask_id = mask_id_for(x0.vocab_k)
    while True:
        flags = rng.random(len(x0)) < t
        if flags.any():
            break
    return MaskedState(ids=np.where(flags, mask_id, x0.ids), mask_id=mask_id, t=t)


def check_log_probs(log_probs: np.ndarray, length: int) -> np.ndarray:
    """Validate an L x V log-probability grid from a predictor."""
    log_probs = np.asarray(log_probs)
    if log_probs.ndim != 2 or log_probs.shape[0] != length:
        raise PredictorError(f"predictor returned shape {log_probs.shape}, expected ({length}, V)")
    if np.isnan(log_probs).any():
        raise PredictorError("predictor returned NaN log-probabilities")
    drift = np.abs(logsumexp(log_probs.astype(np.float64), axis=-1))
    tolerance = ROW_TOLERANCE if log_probs.dtype == np.float64 else ROW_TOLERANCE_32
    if drift.max() > tolerance:
        raise PredictorError(f"predictor rows are not normalized (max |log Z| = {drift.max():.3g})")
    return log_probs


def masked_cross_entropy(
    log_probs: np.ndarray,
    masked: np.ndarray,
    targets: np.ndarray,
    weights: np.ndarray,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Weighted cross-entropy on masked positions and its gradient.

    Args:
        log_probs: (B, L, V) predictor output
        masked: (B, L) boolean mask indicator
        targets: (B, L) clean token ids
        weights: (B,) per-sequence weights, 1/t for the diffusion loss

    Returns:
        Tuple of (per-sequence losses (B,), gradient w.r.t. log_probs (B, L, V)).
        Log-probabilities below the floor are clamped and get zero gradient.
    """
    batch, length, _ = log_probs.shape
    b_idx, l_idx = np.nonzero(masked)
    picked = log_probs[b_idx, l_idx, targets[b_idx, l_idx]]
    clamped = np.maximum(picked, LOG_PROB_FLOOR)

    losses = np.zeros(batch, dtype=np.float64)
    np.add.at(losses, b_idx, -clamped * weights[b_idx])

    grad = np.zeros_like(log_probs)
    live = picked > LOG_PROB_FLOOR
    grad[b_idx[live], l_idx[live], targets[b_idx[live], l_idx[live]]] = -weights[b_idx[live]]
    return losses, grad


def diffusion_loss(
    pred: "MaskPredictor",
    batch: Sequence[TokenSequence],
    rng: np.random.Generator,
) -> LossValue:
    """
    Monte-Carlo estimate of the masked diffusion loss.

    For each sequence, draws one t and one mask pattern, evaluates the
    predictor on the masked state and accumulates
    -(1/t) * sum over masked i of log p(x0_i | x_t). Returns the batch mean.

    Raises:
        ValueError: If the batch is empty or lengths differ
        PredictorError: If the predictor output has the wrong shape or rows
            that are not distributions
    """
    if not batch:
        raise ValueError("diffusion_loss needs a non-empty batch")
    lengths = {len(x0) for x0 in batch}
    if len(lengths) != 1:
        raise ValueError(f"all sequences in a batch must share one token length, got {sorted(lengths)}")

    per_sequence = np.empty(len(batch), dtype=np.float64)
    masked_count = 0
    for i, x0 in enumerate(batch):
        t = sample_time(rng)
        state = forward_mask(x0, t, rng)
        log_probs = check_log_probs(pred.log_probs(state), len(x0))
        losses, _ = masked_cross_entropy(
            log_probs[None], state.mask_flags[None], x0.ids[None], np.array([1.0 / t])
        )
        per_sequence[i] = losses[0]
        masked_count += state.num_masked

    return LossValue(value=float(per_sequence.mean()), masked_count=masked_count, per_sequence=per_sequence)


def sequence_index(ids: Sequence[int], num_tokens: int) -> int:
    """Position of a token sequence in the lexicographic enumeration of num_tokens^L."""
    index = 0
    for token_id in ids:
        index = index * num_tokens + int(token_id)
    return index


def enumerate_model_distribution(pred: "MaskPredictor", length: int, vocab: Vocabulary) -> np.ndarray:
    """
    Exact model distribution p(x0) of one-token-per-step random-order unmasking.

    p(x0) averages, uniformly over all unmasking orders, the product of the
    predictor's conditionals along the order. Conditionals are restricted to
    k-mer ids and renormalized, exactly as the sampler does at temperature 1.
    The order average is computed recursively: from a state with masked set M,
    the next position is uniform over M.

    Args:
        pred: Deterministic mask predictor
        length: Token length L
        vocab: Vocabulary whose k-mers are enumerated

    Returns:
        Array of size num_kmers^L indexed by ``sequence_index``

    Raises:
        ValueError: If num_kmers^L exceeds MAX_ENUMERATION
        PredictorError: If the table does not sum to 1 within 1e-10
    """
    num_tokens = vocab.num_kmers
    if num_tokens ** length > MAX_ENUMERATION:
        raise ValueError(f"{num_tokens}^{length} sequences exceed the enumeration limit {MAX_ENUMERATION}")
    mask_id = vocab.mask_id
    full = (1 << length) - 1
    rows_cache = {}

    def conditionals(ids: Tuple[int, ...]) -> np.ndarray:
        if ids not in rows_cache:
            state = MaskedState(ids=np.array(ids), mask_id=mask_id, t=ids.count(mask_id) / length)
            log_probs = check_log_probs(pred.log_probs(state), length)
            probs = np.exp(log_probs[:, :num_tokens])
            rows_cache[ids] = probs / probs.sum(axis=1, keepdims=True)
        return rows_cache[ids]

    table = np.empty(num_tokens ** length, dtype=np.float64)
    for index, x0 in enumerate(itertools.product(range(num_tokens), repeat=length)):

        @lru_cache(maxsize=None)
        def prob_from(revealed: int) -> float:
            if revealed == full:
                return 1.0
            ids = tuple(x0[i] if revealed >> i & 1 else mask_id for i in range(length))
            rows = conditionals(ids)
            masked = [i for i in range(length) if not revealed >> i & 1]
            total = sum(rows[i, x0[i]] * prob_from(revealed | 1 << i) for i in masked)
            return total / len(masked)

        table[index] = prob_from(0)

    total = table.sum()
    if abs(total - 1.0) > 1e-10:
        raise PredictorError(f"enumerated distribution sums to {total!r}")
    logger.debug(f"Enumerated {table.size} sequences with {len(rows_cache)} predictor calls")
    return table


def exact_nll(table: np.ndarray, corpus: Sequence[TokenSequence], num_tokens: int) -> float:
    """Mean negative log-likelihood of ``corpus`` under an enumerated distribution."""
    probs = np.array([table[sequence_index(x.ids, num_tokens)] for x in corpus])
    return float(-np.mean(np.log(np.maximum(probs, PROB_FLOOR))))
