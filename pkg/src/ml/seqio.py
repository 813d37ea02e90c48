"""FASTA ingestion, k-mer vocabularies and tokenization for DNA sequences."""
import io
import itertools
import logging
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

logger = logging.getLogger(__name__)

NUCLEOTIDES = "ACGT"
SPECIAL_TOKENS = ("[M]", "[PAD]", "[CLS]", "[BOS]", "[EOS]", "[UNK]", "[SEP]", "[RES1]", "[RES2]")
SUPPORTED_K = (1, 3, 6, 9)

# A=0, C=1, G=2, T=3; everything else maps to 255
_BASE_CODES = np.full(256, 255, dtype=np.uint8)
for _code, _base in enumerate(NUCLEOTIDES):
    _BASE_CODES[ord(_base)] = _code


class FastaParseError(ValueError):
    """Raised for malformed FASTA input."""

    def __init__(self, message: str, line_number: Optional[int] = None):
        self.line_number = line_number
        if line_number is not None:
            message = f"line {line_number}: {message}"
        super().__init__(message)


class VocabularyError(ValueError):
    """Raised for unsupported or malformed vocabularies."""


class DetokenizeError(ValueError):
    """Raised when a token id cannot be decoded back to bases."""

    def __init__(self, message: str, position: int):
        self.position = position
        super().__init__(message)


@dataclass(frozen=True)
class NucleotideSequence:
    """A validated, uppercase DNA string over {A, C, G, T}."""

    bases: str

    def __post_init__(self):
        if len(self.bases) == 0:
            raise ValueError("nucleotide sequence must contain at least one base")
        bad = set(self.bases) - set(NUCLEOTIDES)
        if bad:
            raise ValueError(f"invalid bases {sorted(bad)}; expected only {NUCLEOTIDES}")

    def __len__(self) -> int:
        return len(self.bases)

    def __str__(self) -> str:
        return self.bases

    def codes(self) -> np.ndarray:
        """Bases as integer codes 0..3 in A<C<G<T order."""
        return _BASE_CODES[np.frombuffer(self.bases.encode("ascii"), dtype=np.uint8)].astype(np.int64)


def kmer_count(k: int) -> int:
    return 4 ** k


def mask_id_for(k: int) -> int:
    """Id of the [M] token: the first id after the k-mer block."""
    return kmer_count(k)


def pad_id_for(k: int) -> int:
    return kmer_count(k) + 1


def vocab_size_for(k: int) -> int:
    return kmer_count(k) + len(SPECIAL_TOKENS)


def k_from_vocab_size(vocab_size: int) -> int:
    """Recover k from a vocabulary size of the form 4^k + 9."""
    for k in SUPPORTED_K:
        if vocab_size_for(k) == vocab_size:
            return k
    raise VocabularyError(f"vocabulary size {vocab_size} does not match any supported k {SUPPORTED_K}")


@dataclass(frozen=True)
class Vocabulary:
    """Bijection between k-mers/special tokens and contiguous ids.

    K-mers take ids ``0 .. 4^k - 1`` in lexicographic A<C<G<T order; the nine
    special tokens follow in the fixed order of ``SPECIAL_TOKENS``.
    """

    k: int
    token_to_id: Dict[str, int] = field(repr=False)
    id_to_token: Tuple[str, ...] = field(repr=False)

    @property
    def size(self) -> int:
        return len(self.id_to_token)

    def __len__(self) -> int:
        return self.size

    @property
    def num_kmers(self) -> int:
        return kmer_count(self.k)

    @property
    def mask_id(self) -> int:
        return self.token_to_id["[M]"]

    @property
    def pad_id(self) -> int:
        return self.token_to_id["[PAD]"]

    @property
    def special_ids(self) -> Dict[str, int]:
        return {tok: self.token_to_id[tok] for tok in SPECIAL_TOKENS}

    def is_special(self, token_id: int) -> bool:
        return token_id >= self.num_kmers

    def save(self, path: Union[str, Path]) -> None:
        """Write the plain-text format: ``k=<k>`` then ``<token>\\t<id>`` sorted by id."""
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="ascii", newline="\n") as fh:
            fh.write(f"k={self.k}\n")
            for token_id, token in enumerate(self.id_to_token):
                fh.write(f"{token}\t{token_id}\n")
        logger.info(f"Vocabulary (k={self.k}, size={self.size}) written to {path}")

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Vocabulary":
        with Path(path).open(encoding="ascii") as fh:
            header = fh.readline().strip()
            if not header.startswith("k="):
                raise VocabularyError(f"missing 'k=' header in {path}")
            k = int(header[2:])
            expected = build_vocab(k)
            for line in fh:
                token, token_id = line.rstrip("\n").split("\t")
                if expected.token_to_id.get(token) != int(token_id):
                    raise VocabularyError(f"entry {token!r}\t{token_id} disagrees with the canonical k={k} vocabulary")
        return expected


@lru_cache(maxsize=None)
def build_vocab(k: int) -> Vocabulary:
    """Build the k-mer vocabulary of size 4^k + 9.

    Args:
        k: k-mer width, one of 1, 3, 6, 9

    Returns:
        Deterministic Vocabulary with lexicographic k-mer ids

    Raises:
        VocabularyError: If k is not supported
    """
    if k not in SUPPORTED_K:
        raise VocabularyError(f"unsupported k={k}; expected one of {SUPPORTED_K}")
    kmers = ["".join(p) for p in itertools.product(NUCLEOTIDES, repeat=k)]
    id_to_token = tuple(kmers) + SPECIAL_TOKENS
    token_to_id = {tok: i for i, tok in enumerate(id_to_token)}
    return Vocabulary(k=k, token_to_id=token_to_id, id_to_token=id_to_token)


@dataclass(frozen=True, eq=False)
class TokenSequence:
    """A clean (fully unmasked) tokenized sequence."""

    ids: np.ndarray
    vocab_k: int

    def __post_init__(self):
        ids = np.array(self.ids, dtype=np.int64)
        if ids.ndim != 1:
            raise ValueError(f"token ids must be one-dimensional, got shape {ids.shape}")
        size = vocab_size_for(self.vocab_k)
        if ids.size and (ids.min() < 0 or ids.max() >= size):
            raise ValueError(f"token id out of bounds for vocabulary of size {size}")
        if np.any(ids == mask_id_for(self.vocab_k)):
            raise ValueError("clean token sequence must not contain the [M] id")
        ids.setflags(write=False)
        object.__setattr__(self, "ids", ids)

    def __len__(self) -> int:
        return int(self.ids.size)

    def __eq__(self, other) -> bool:
        if not isinstance(other, TokenSequence):
            return NotImplemented
        return self.vocab_k == other.vocab_k and np.array_equal(self.ids, other.ids)

    def __hash__(self) -> int:
        return hash((self.vocab_k, self.ids.tobytes()))


def _iter_lines(raw: Union[bytes, str, io.IOBase]) -> Iterable[str]:
    if isinstance(raw, bytes):
        raw = raw.decode("ascii", errors="replace")
    if isinstance(raw, str):
        return raw.splitlines()
    return (line.decode("ascii", errors="replace") if isinstance(line, bytes) else line for line in raw)


def parse_fasta(
    raw: Union[bytes, str, io.IOBase],
    skip_n_records: bool = False,
) -> List[Tuple[str, NucleotideSequence]]:
    """
    Parse FASTA text into (header, sequence) records in file order.

    Lines starting with ';' are comments. Sequence lines are concatenated and
    uppercased; blank lines and surrounding whitespace are ignored.

    Args:
        raw: FASTA content as bytes, str or a readable stream
        skip_n_records: Drop records containing 'N' instead of failing

    Returns:
        List of (header, NucleotideSequence)

    Raises:
        FastaParseError: On invalid symbols, empty records or data before a header
    """
    records: List[Tuple[str, NucleotideSequence]] = []
    header: Optional[str] = None
    header_line = 0
    chunks: List[str] = []
    has_n = False
    skipped = 0

    def flush():
        nonlocal skipped
        if header is None:
            return
        if not chunks:
            raise FastaParseError(f"record {header!r} has no sequence", header_line)
        if has_n:
            skipped += 1
            return
        records.append((header, NucleotideSequence("".join(chunks))))

    for line_number, line in enumerate(_iter_lines(raw), start=1):
        line = line.strip()
        if not line or line.startswith(";"):
            continue
        if line.startswith(">"):
            flush()
            header = line[1:].strip()
            header_line = line_number
            chunks = []
            has_n = False
            continue
        if header is None:
            raise FastaParseError("sequence data before the first '>' header", line_number)
        line = "".join(line.split()).upper()
        bad = set(line) - set(NUCLEOTIDES)
        if bad - {"N"}:
            raise FastaParseError(f"invalid symbol(s) {sorted(bad - {'N'})}", line_number)
        if "N" in bad:
            if not skip_n_records:
                raise FastaParseError("ambiguous base 'N' (use skip_n_records to drop such records)", line_number)
            has_n = True
        chunks.append(line)
    flush()

    if skipped:
        logger.info(f"Skipped {skipped} FASTA record(s) containing 'N'")
    return records


def load_fasta(path: Union[str, Path], skip_n_records: bool = False) -> List[Tuple[str, NucleotideSequence]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"FASTA file not found: {path}")
    with path.open("rb") as fh:
        return parse_fasta(fh.read(), skip_n_records=skip_n_records)


def write_fasta(
    records: Sequence[Tuple[str, Union[NucleotideSequence, str]]],
    path: Union[str, Path],
    comments: Sequence[str] = (),
    width: int = 80,
) -> None:
    """Write records as FASTA, prefixed by ';' comment lines."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="ascii", newline="\n") as fh:
        for comment in comments:
            fh.write(f"; {comment}\n")
        for header, seq in records:
            bases = str(seq)
            fh.write(f">{header}\n")
            for start in range(0, len(bases), width):
                fh.write(bases[start:start + width] + "\n")


def tokenize(seq: NucleotideSequence, vocab: Vocabulary) -> TokenSequence:
    """
    Tile a sequence with non-overlapping k-mers.

    A trailing remainder shorter than k is dropped.

    Raises:
        ValueError: If the sequence is shorter than k
    """
    k = vocab.k
    if len(seq) < k:
        raise ValueError(f"sequence of length {len(seq)} is shorter than k={k}")
    n_tokens = len(seq) // k
    codes = seq.codes()[: n_tokens * k].reshape(n_tokens, k)
    # lexicographic A<C<G<T order is the base-4 value of the k-mer
    weights = 4 ** np.arange(k - 1, -1, -1, dtype=np.int64)
    return TokenSequence(ids=codes @ weights, vocab_k=k)


def detokenize(toks: Union[TokenSequence, Sequence[int]], vocab: Vocabulary) -> NucleotideSequence:
    """
    Map k-mer ids back to bases.

    Raises:
        DetokenizeError: If any id is a special token (position is reported)
    """
    ids = toks.ids if isinstance(toks, TokenSequence) else np.asarray(toks, dtype=np.int64)
    for position, token_id in enumerate(ids):
        if token_id < 0 or token_id >= vocab.num_kmers:
            token = vocab.id_to_token[token_id] if 0 <= token_id < vocab.size else str(token_id)
            raise DetokenizeError(f"token {token} at position {position} is not a k-mer", position)
    return NucleotideSequence("".join(vocab.id_to_token[i] for i in ids))
