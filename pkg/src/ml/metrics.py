"""Generation-quality metrics: edit-distance diversity and novelty, GC ratio, Fréchet distance, MCC."""
import logging
import math
from abc import ABC, abstractmethod
from collections import defaultdict
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict, Field

from src.config import DEFAULT_EMBEDDER_K
from src.ml.seqio import NucleotideSequence

logger = logging.getLogger(__name__)

SeqLike = Union[NucleotideSequence, str]

JITTER = 1e-6
SINGULAR_EIGENVALUE = 1e-10


def _codes(s: SeqLike) -> np.ndarray:
    return np.frombuffer(str(s).encode("ascii"), dtype=np.uint8).astype(np.int16)


# ---------------------------------------------------------------------------
# edit distance


def levenshtein(a: SeqLike, b: SeqLike) -> int:
    """
    Unit-cost edit distance with two DP rows over the shorter sequence.

    Each row is computed in one vectorized pass: substitutions and deletions
    come from the previous row, insertions propagate along the row as a
    running minimum of ``row[j] - j``.
    """
    a, b = _codes(a), _codes(b)
    if len(a) < len(b):
        a, b = b, a
    if len(b) == 0:
        return len(a)
    steps = np.arange(len(b) + 1)
    previous = steps.copy()
    for i, symbol in enumerate(a, start=1):
        current = np.empty_like(previous)
        current[0] = i
        current[1:] = np.minimum(previous[1:] + 1, previous[:-1] + (b != symbol))
        previous = np.minimum.accumulate(current - steps) + steps
    return int(previous[-1])


def _distances_same_length(a: np.ndarray, others: np.ndarray) -> np.ndarray:
    """Edit distance from ``a`` to every row of ``others`` (all rows share one length)."""
    n, m = others.shape
    if len(a) == 0:
        return np.full(n, m)
    if m == 0:
        return np.full(n, len(a))
    steps = np.arange(m + 1)
    previous = np.broadcast_to(steps, (n, m + 1)).copy()
    current = np.empty_like(previous)
    for i, symbol in enumerate(a, start=1):
        current[:, 0] = i
        np.minimum(previous[:, 1:] + 1, previous[:, :-1] + (others != symbol), out=current[:, 1:])
        previous = np.minimum.accumulate(current - steps, axis=1) + steps
    return previous[:, -1]


def edit_distances(a: SeqLike, others: Sequence[SeqLike]) -> np.ndarray:
    """Edit distances from ``a`` to each of ``others``, in order."""
    a_codes = _codes(a)
    out = np.empty(len(others), dtype=np.int64)
    groups: Dict[int, List[int]] = defaultdict(list)
    for j, other in enumerate(others):
        groups[len(str(other))].append(j)
    for _, idx in groups.items():
        block = np.stack([_codes(others[j]) for j in idx])
        out[idx] = _distances_same_length(a_codes, block)
    return out


def diversity(sequences: Sequence[SeqLike]) -> float:
    """Mean pairwise edit distance: 2 / (N (N-1)) * sum over i<j of d(x_i, x_j)."""
    n = len(sequences)
    if n < 2:
        raise ValueError(f"diversity needs at least 2 sequences, got {n}")
    total = 0
    for i in range(n - 1):
        total += int(edit_distances(sequences[i], sequences[i + 1:]).sum())
    return 2.0 * total / (n * (n - 1))


def novelty(generated: Sequence[SeqLike], training: Sequence[SeqLike]) -> float:
    """Mean over generated sequences of the edit distance to the nearest training sequence."""
    if not generated or not training:
        raise ValueError("novelty needs non-empty generated and training sets")
    return float(np.mean([edit_distances(g, training).min() for g in generated]))


def gc_ratio(s: SeqLike) -> Optional[float]:
    """count(G) / count(C); None when the sequence has no C."""
    bases = str(s)
    c = bases.count("C")
    if c == 0:
        return None
    return bases.count("G") / c


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True)
class GaussianStats:
    mean: np.ndarray
    cov: np.ndarray
    n: int

    @property
    def dim(self) -> int:
        return int(self.mean.size)


def fit_gaussian(vectors: Sequence[np.ndarray]) -> GaussianStats:
    """Sample mean and unbiased, symmetrized covariance of at least two vectors."""
    x = np.asarray(vectors, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if len(x) < 2:
        raise ValueError(f"fit_gaussian needs at least 2 vectors, got {len(x)}")
    cov = np.atleast_2d(np.cov(x, rowvar=False, ddof=1))
    return GaussianStats(mean=x.mean(axis=0), cov=(cov + cov.T) / 2, n=len(x))


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    eigenvalues, eigenvectors = np.linalg.eigh(matrix)
    return (eigenvectors * np.sqrt(np.maximum(eigenvalues, 0.0))) @ eigenvectors.T


def frechet_distance(a: GaussianStats, b: GaussianStats) -> float:
    """
    Fréchet distance between two Gaussians.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), where the trace of
    the square root is taken from the eigenvalues of the symmetric matrix
    sqrt(S_a) S_b sqrt(S_a), clamped at 0. When either covariance has an
    eigenvalue below 1e-10, 1e-6 * I is added to both.

    Raises:
        ValueError: On dimension mismatch or non-finite statistics
    """
    if a.dim != b.dim or a.cov.shape != b.cov.shape:
        raise ValueError(f"dimension mismatch: {a.dim} vs {b.dim}")
    for stats in (a, b):
        if not (np.all(np.isfinite(stats.mean)) and np.all(np.isfinite(stats.cov))):
            raise ValueError("Gaussian statistics contain non-finite values")

    cov_a, cov_b = a.cov, b.cov
    smallest = min(np.linalg.eigvalsh(cov_a).min(), np.linalg.eigvalsh(cov_b).min())
    if smallest < SINGULAR_EIGENVALUE:
        offset = JITTER * np.eye(a.dim)
        cov_a, cov_b = cov_a + offset, cov_b + offset

    root_a = _psd_sqrt(cov_a)
    product = root_a @ cov_b @ root_a
    product = (product + product.T) / 2
    trace_root = float(np.sqrt(np.maximum(np.linalg.eigvalsh(product), 0.0)).sum())

    diff = a.mean - b.mean
    distance = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_root)
    return max(distance, 0.0)


# ---------------------------------------------------------------------------
# embedders


def kmer_embed(s: SeqLike, k: int = DEFAULT_EMBEDDER_K) -> np.ndarray:
    """Normalized counts of overlapping k-mers, indexed lexicographically (A<C<G<T)."""
    seq = s if isinstance(s, NucleotideSequence) else NucleotideSequence(str(s))
    if len(seq) < k:
        raise ValueError(f"sequence of length {len(seq)} is shorter than k={k}")
    windows = sliding_window_view(seq.codes(), k)
    index = windows @ (4 ** np.arange(k - 1, -1, -1, dtype=np.int64))
    counts = np.bincount(index, minlength=4 ** k).astype(np.float64)
    return counts / counts.sum()


class Embedder(ABC):
    """Maps a nucleotide sequence to a fixed-dimension vector."""

    name: str
    k: Optional[int] = None

    @property
    @abstractmethod
    def dim(self) -> int:
        ...

    @abstractmethod
    def embed(self, seq: SeqLike) -> np.ndarray:
        ...

    def embed_many(self, seqs: Sequence[SeqLike]) -> np.ndarray:
        return np.stack([self.embed(s) for s in seqs])

    def describe(self) -> dict:
        return {"name": self.name, "k": self.k, "dim": self.dim}


class KmerSpectrumEmbedder(Embedder):
    name = "kmer_spectrum"

    def __init__(self, k: int = DEFAULT_EMBEDDER_K):
        if k < 1:
            raise ValueError(f"embedder k must be >= 1, got {k}")
        self.k = k

    @property
    def dim(self) -> int:
        return 4 ** self.k

    def embed(self, seq: SeqLike) -> np.ndarray:
        return kmer_embed(seq, self.k)


# ---------------------------------------------------------------------------
# classification


def mcc(tp: int, tn: int, fp: int, fn: int) -> float:
    """Matthews correlation coefficient; 0 when any marginal is empty."""
    counts = (tp, tn, fp, fn)
    if any(int(c) != c or c < 0 for c in counts):
        raise ValueError(f"confusion counts must be non-negative integers, got {counts}")
    tp, tn, fp, fn = (int(c) for c in counts)
    denominator = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
    if denominator == 0:
        return 0.0
    value = (tp * tn - fp * fn) / math.sqrt(denominator)
    return min(1.0, max(-1.0, value))


# ---------------------------------------------------------------------------
# report


class EmbedderInfo(BaseModel):
    name: str
    k: Optional[int] = None
    dim: int


class MetricsReport(BaseModel):
    """Evaluation report for one generated set."""

    model_config = ConfigDict(extra="forbid")

    diversity: float = Field(..., ge=0)
    novelty: float = Field(..., ge=0)
    gc_ratio_mean: Optional[float] = Field(None, ge=0)
    gc_undefined_count: int = Field(..., ge=0)
    frechet: float = Field(..., ge=-1e-9)
    n_generated: int = Field(..., ge=1)
    n_train: int = Field(..., ge=1)
    n_reference: int = Field(..., ge=1)
    embedder: EmbedderInfo
    provenance: Optional[dict] = None


def evaluate(
    generated: Sequence[SeqLike],
    train: Sequence[SeqLike],
    reference: Sequence[SeqLike],
    embedder: Optional[Embedder] = None,
) -> MetricsReport:
    """
    Score a generated set against training and reference sets.

    Args:
        generated: Generated sequences (at least two)
        train: Training sequences, for novelty
        reference: Held-out reference sequences (at least two), for Fréchet distance
        embedder: Embedding for Fréchet distance, 4-mer spectrum by default

    Returns:
        MetricsReport; GC ratio is averaged over sequences where it is defined
    """
    embedder = embedder or KmerSpectrumEmbedder()
    for label, group in (("generated", generated), ("train", train), ("reference", reference)):
        if not group:
            raise ValueError(f"{label} set is empty")

    logger.info(f"Evaluating {len(generated)} generated sequences against {len(train)} train / {len(reference)} reference")
    ratios = [gc_ratio(s) for s in generated]
    defined = [r for r in ratios if r is not None]
    fd = frechet_distance(fit_gaussian(embedder.embed_many(generated)), fit_gaussian(embedder.embed_many(reference)))

    return MetricsReport(
        diversity=diversity(generated),
        novelty=novelty(generated, train),
        gc_ratio_mean=float(np.mean(defined)) if defined else None,
        gc_undefined_count=len(ratios) - len(defined),
        frechet=fd,
        n_generated=len(generated),
        n_train=len(train),
        n_reference=len(reference),
        embedder=EmbedderInfo(**embedder.describe()),
    )
