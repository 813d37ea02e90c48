"""Mask predictors: the interface, an exact tabular oracle and a tiny bidirectional transformer.

The transformer is written directly in numpy with hand-derived backward
passes: pre-norm RMSNorm blocks, multi-head bidirectional attention with
rotary position embeddings, and a SwiGLU feed-forward. Parameters are plain
``{name: ndarray}`` dicts in declaration order.
"""
import itertools
import logging
import struct
from abc import ABC, abstractmethod
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, model_validator
from scipy.special import expit, log_softmax, softmax
from scipy.stats import truncnorm

from src.ml.diffusion import MaskedState, PredictorError, forward_mask, masked_cross_entropy
from src.ml.rng import Stream, stream
from src.ml.seqio import TokenSequence, Vocabulary, build_vocab, k_from_vocab_size, vocab_size_for

logger = logging.getLogger(__name__)

Params = Dict[str, np.ndarray]

NORM_EPS = 1e-6
INIT_STD = 0.02
TABULAR_ALPHA = 1e-9
CHECKPOINT_MAGIC = b"D3MD"
CHECKPOINT_VERSION = 1


class MaskPredictor(ABC):
    """Maps a masked state of length L to an L x V grid of log-probabilities.

    Output must be a deterministic function of the state; every row must
    exponentiate to a distribution over the full vocabulary.
    """

    vocab_size: int

    @abstractmethod
    def log_probs(self, state: MaskedState) -> np.ndarray:
        """Return the (L, V) log-probability grid for ``state``."""

    def __call__(self, state: MaskedState) -> np.ndarray:
        return self.log_probs(state)


class TabularPredictor(MaskPredictor):
    """Exact conditional-count predictor for enumerable (L, V) instances.

    Rows at masked positions are the smoothed empirical distribution of the
    token given the unmasked context; rows at unmasked positions are the
    smoothed point mass on the observed token. Contexts never seen in the
    corpus give uniform masked rows.
    """

    def __init__(self, length: int, vocab: Vocabulary, table: Dict[bytes, np.ndarray], alpha: float = TABULAR_ALPHA):
        self.length = length
        self.vocab = vocab
        self.vocab_size = vocab.size
        self.alpha = alpha
        self.table = table

    def _smooth(self, counts: np.ndarray) -> np.ndarray:
        counts = counts + self.alpha
        return counts / counts.sum(axis=-1, keepdims=True)

    def log_probs(self, state: MaskedState) -> np.ndarray:
        if len(state) != self.length:
            raise PredictorError(f"tabular predictor covers length {self.length}, got {len(state)}")
        ids = state.ids
        if np.any((ids >= self.vocab.num_kmers) & (ids != self.vocab.mask_id)):
            raise PredictorError("tabular predictor only accepts k-mer ids and [M]")
        counts = self.table.get(ids.tobytes())
        if counts is None:
            counts = np.zeros((self.length, self.vocab_size))
            unmasked = np.flatnonzero(~state.mask_flags)
            counts[unmasked, ids[unmasked]] = 1.0
            counts[state.mask_flags, : self.vocab.num_kmers] = 1.0
        return np.log(self._smooth(counts))


def fit_tabular(corpus: Sequence[TokenSequence], length: int, vocab: Vocabulary) -> TabularPredictor:
    """
    Build the optimal predictor for the masked diffusion loss by exact counting.

    Args:
        corpus: Sequences of token length ``length``
        length: L
        vocab: Vocabulary of the corpus

    Returns:
        TabularPredictor whose masked rows are empirical conditionals

    Raises:
        ValueError: If the instance is not enumerable or a sequence has the wrong length
    """
    if vocab.num_kmers ** length > 10 ** 5:
        raise ValueError(f"{vocab.num_kmers}^{length} states are not enumerable")
    for x in corpus:
        if len(x) != length or x.vocab_k != vocab.k:
            raise ValueError(f"corpus sequence of length {len(x)} (k={x.vocab_k}) does not match L={length}, k={vocab.k}")
    if not corpus:
        raise ValueError("fit_tabular needs a non-empty corpus")

    data = np.stack([x.ids for x in corpus])
    table: Dict[bytes, np.ndarray] = {}
    for pattern in itertools.product((False, True), repeat=length):
        masked = np.array(pattern)
        if not masked.any():
            continue
        contexts = np.where(masked, vocab.mask_id, data)
        groups = defaultdict(list)
        for row, context in enumerate(contexts):
            groups[context.tobytes()].append(row)
        for key, rows in groups.items():
            counts = np.zeros((length, vocab.size))
            context = contexts[rows[0]]
            unmasked = np.flatnonzero(~masked)
            counts[unmasked, context[unmasked]] = 1.0
            for i in np.flatnonzero(masked):
                for token_id, n in Counter(data[rows, i].tolist()).items():
                    counts[i, token_id] = n
            table[key] = counts

    logger.info(f"Fitted tabular predictor over {len(table)} observed contexts (L={length}, k={vocab.k})")
    return TabularPredictor(length=length, vocab=vocab, table=table)


class TinyTransformerConfig(BaseModel):
    """Architecture of the bidirectional mask predictor."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    layers: int = Field(2, ge=1)
    heads: int = Field(4, ge=1)
    model_dim: int = Field(64, ge=2)
    ff_dim: int = Field(171, ge=1)
    vocab_size: int = Field(vocab_size_for(6), ge=13)
    max_len: int = Field(256, ge=1)
    rope_base: float = Field(10000.0, gt=0)
    tie_embeddings: bool = False
    use_rope: bool = True

    @model_validator(mode="after")
    def check_shapes(self):
        if self.model_dim % self.heads:
            raise ValueError(f"model_dim {self.model_dim} is not divisible by heads {self.heads}")
        if self.use_rope and (self.model_dim // self.heads) % 2:
            raise ValueError("rotary embeddings need an even head dimension")
        k_from_vocab_size(self.vocab_size)
        return self

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    @property
    def k(self) -> int:
        return k_from_vocab_size(self.vocab_size)


def param_shapes(config: TinyTransformerConfig) -> Dict[str, Tuple[int, ...]]:
    """Parameter names and shapes in declaration (checkpoint) order."""
    d, ff = config.model_dim, config.ff_dim
    shapes = {"embedding": (config.vocab_size, d)}
    for layer in range(config.layers):
        p = f"layers.{layer}."
        shapes[p + "attn_norm"] = (d,)
        for name in ("wq", "wk", "wv", "wo"):
            shapes[p + name] = (d, d)
        shapes[p + "ffn_norm"] = (d,)
        shapes[p + "w_gate"] = (d, ff)
        shapes[p + "w_up"] = (d, ff)
        shapes[p + "w_down"] = (ff, d)
    shapes["final_norm"] = (d,)
    if not config.tie_embeddings:
        shapes["output"] = (d, config.vocab_size)
    return shapes


def is_norm(name: str) -> bool:
    return name.endswith("norm")


def init_params(
    config: TinyTransformerConfig,
    rng: np.random.Generator,
    std: float = INIT_STD,
    dtype=np.float64,
) -> Params:
    """Truncated-normal (±2 std) weights, unit norm scales."""
    params: Params = {}
    for name, shape in param_shapes(config).items():
        if is_norm(name):
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = truncnorm.rvs(-2.0, 2.0, scale=std, size=shape, random_state=rng).astype(dtype)
    return params


# ---------------------------------------------------------------------------
# building blocks


def _rms_norm(x: np.ndarray, scale: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    r = 1.0 / np.sqrt(np.mean(x * x, axis=-1, keepdims=True) + NORM_EPS)
    return x * r * scale, r


def _rms_norm_backward(dy: np.ndarray, x: np.ndarray, r: np.ndarray, scale: np.ndarray):
    dscale = np.sum(dy * x * r, axis=tuple(range(dy.ndim - 1)))
    u = dy * scale
    dx = r * u - x * r ** 3 * np.mean(u * x, axis=-1, keepdims=True)
    return dx, dscale


def rope_tables(length: int, head_dim: int, base: float, dtype=np.float64) -> Tuple[np.ndarray, np.ndarray]:
    half = head_dim // 2
    inv_freq = base ** (-np.arange(half, dtype=np.float64) / half)
    angles = np.arange(length, dtype=np.float64)[:, None] * inv_freq[None, :]
    return np.cos(angles).astype(dtype), np.sin(angles).astype(dtype)


def _rope(x: np.ndarray, cos: np.ndarray, sin: np.ndarray, inverse: bool = False) -> np.ndarray:
    half = x.shape[-1] // 2
    x1, x2 = x[..., :half], x[..., half:]
    if inverse:
        sin = -sin
    return np.concatenate([x1 * cos - x2 * sin, x1 * sin + x2 * cos], axis=-1)


def _split_heads(x: np.ndarray, heads: int) -> np.ndarray:
    b, length, d = x.shape
    return x.reshape(b, length, heads, d // heads).transpose(0, 2, 1, 3)


def _merge_heads(x: np.ndarray) -> np.ndarray:
    b, h, length, hd = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, length, h * hd)


@dataclass
class ForwardCache:
    """Activations kept by ``forward`` for ``backward``."""

    ids: np.ndarray
    cos: Optional[np.ndarray]
    sin: Optional[np.ndarray]
    layers: List[dict] = field(default_factory=list)
    final_x: Optional[np.ndarray] = None
    final_r: Optional[np.ndarray] = None
    hidden: Optional[np.ndarray] = None
    log_probs: Optional[np.ndarray] = None


def _as_batch(ids: np.ndarray, config: TinyTransformerConfig) -> np.ndarray:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim == 1:
        ids = ids[None]
    if ids.ndim != 2:
        raise PredictorError(f"expected token ids of shape (L,) or (B, L), got {ids.shape}")
    if ids.shape[1] > config.max_len:
        raise PredictorError(f"sequence length {ids.shape[1]} exceeds max_len {config.max_len}")
    if ids.min() < 0 or ids.max() >= config.vocab_size:
        raise PredictorError(f"token id outside vocabulary of size {config.vocab_size}")
    return ids


def _encode(params: Params, config: TinyTransformerConfig, ids: np.ndarray) -> ForwardCache:
    """Run the transformer trunk up to the final norm."""
    batch, length = ids.shape
    dtype = params["embedding"].dtype
    cos = sin = None
    if config.use_rope:
        cos, sin = rope_tables(length, config.head_dim, config.rope_base, dtype)
    cache = ForwardCache(ids=ids, cos=cos, sin=sin)
    scale = 1.0 / np.sqrt(config.head_dim)

    x = params["embedding"][ids]
    for layer in range(config.layers):
        p = f"layers.{layer}."
        lc = {"x_in": x}
        h, lc["r1"] = _rms_norm(x, params[p + "attn_norm"])
        q = _split_heads(h @ params[p + "wq"], config.heads)
        k = _split_heads(h @ params[p + "wk"], config.heads)
        v = _split_heads(h @ params[p + "wv"], config.heads)
        if config.use_rope:
            q, k = _rope(q, cos, sin), _rope(k, cos, sin)
        # bidirectional: no causal mask
        attn = softmax(q @ k.swapaxes(-1, -2) * scale, axis=-1)
        merged = _merge_heads(attn @ v)
        x = x + merged @ params[p + "wo"]
        lc.update(h=h, q=q, k=k, v=v, attn=attn, merged=merged, x_mid=x)

        h2, lc["r2"] = _rms_norm(x, params[p + "ffn_norm"])
        gate = h2 @ params[p + "w_gate"]
        up = h2 @ params[p + "w_up"]
        sig = expit(gate)
        act = gate * sig * up
        x = x + act @ params[p + "w_down"]
        lc.update(h2=h2, gate=gate, up=up, sig=sig, act=act)
        cache.layers.append(lc)

    cache.final_x = x
    cache.hidden, cache.final_r = _rms_norm(x, params["final_norm"])
    return cache


def _output_matrix(params: Params, config: TinyTransformerConfig) -> np.ndarray:
    return params["embedding"].T if config.tie_embeddings else params["output"]


def forward(params: Params, config: TinyTransformerConfig, ids: np.ndarray, return_cache: bool = False):
    """
    Compute log-probabilities for every position of a (batch of) masked state(s).

    Args:
        params: Model parameters
        config: Architecture
        ids: Token ids, shape (L,) or (B, L)
        return_cache: Also return the activation cache needed by ``backward``

    Returns:
        Log-probabilities of shape (L, V) or (B, L, V), plus the cache if requested
    """
    single = np.ndim(ids) == 1
    ids = _as_batch(ids, config)
    cache = _encode(params, config, ids)
    log_probs = log_softmax(cache.hidden @ _output_matrix(params, config), axis=-1)
    cache.log_probs = log_probs
    out = log_probs[0] if single else log_probs
    return (out, cache) if return_cache else out


def backward(
    params: Params,
    config: TinyTransformerConfig,
    cache: Optional[ForwardCache],
    grad_log_probs: np.ndarray,
) -> Params:
    """
    Reverse-mode gradients of a scalar loss w.r.t. all parameters.

    Args:
        params: Parameters used in the cached forward pass
        config: Architecture
        cache: Activation cache from ``forward(..., return_cache=True)``
        grad_log_probs: dLoss/d(log-probabilities), same shape as the forward output

    Returns:
        Gradients keyed like ``params``

    Raises:
        PredictorError: If the cache is missing
    """
    if cache is None or cache.log_probs is None:
        raise PredictorError("backward needs the activation cache from forward(..., return_cache=True)")
    g = np.asarray(grad_log_probs)
    if g.ndim == 2:
        g = g[None]
    if g.shape != cache.log_probs.shape:
        raise PredictorError(f"upstream gradient shape {g.shape} does not match output {cache.log_probs.shape}")

    grads: Params = {name: np.zeros_like(value) for name, value in params.items()}
    scale = 1.0 / np.sqrt(config.head_dim)
    probs = np.exp(cache.log_probs)
    dlogits = g - probs * g.sum(axis=-1, keepdims=True)

    if config.tie_embeddings:
        grads["embedding"] += np.einsum("blv,bld->vd", dlogits, cache.hidden)
        dhidden = dlogits @ params["embedding"]
    else:
        grads["output"] = np.einsum("bld,blv->dv", cache.hidden, dlogits)
        dhidden = dlogits @ params["output"].T
    dx, grads["final_norm"] = _rms_norm_backward(dhidden, cache.final_x, cache.final_r, params["final_norm"])

    for layer in reversed(range(config.layers)):
        p = f"layers.{layer}."
        lc = cache.layers[layer]

        # feed-forward
        grads[p + "w_down"] = np.einsum("blf,bld->fd", lc["act"], dx)
        dact = dx @ params[p + "w_down"].T
        silu = lc["gate"] * lc["sig"]
        dgate = dact * lc["up"] * lc["sig"] * (1.0 + lc["gate"] * (1.0 - lc["sig"]))
        dup = dact * silu
        grads[p + "w_gate"] = np.einsum("bld,blf->df", lc["h2"], dgate)
        grads[p + "w_up"] = np.einsum("bld,blf->df", lc["h2"], dup)
        dh2 = dgate @ params[p + "w_gate"].T + dup @ params[p + "w_up"].T
        dnorm, grads[p + "ffn_norm"] = _rms_norm_backward(dh2, lc["x_mid"], lc["r2"], params[p + "ffn_norm"])
        dx = dx + dnorm

        # attention
        grads[p + "wo"] = np.einsum("bld,ble->de", lc["merged"], dx)
        dout = _split_heads(dx @ params[p + "wo"].T, config.heads)
        attn = lc["attn"]
        dattn = dout @ lc["v"].swapaxes(-1, -2)
        dv = attn.swapaxes(-1, -2) @ dout
        dscores = attn * (dattn - np.sum(dattn * attn, axis=-1, keepdims=True)) * scale
        dq = dscores @ lc["k"]
        dk = dscores.swapaxes(-1, -2) @ lc["q"]
        if config.use_rope:
            dq = _rope(dq, cache.cos, cache.sin, inverse=True)
            dk = _rope(dk, cache.cos, cache.sin, inverse=True)
        dq, dk, dv = _merge_heads(dq), _merge_heads(dk), _merge_heads(dv)
        h = lc["h"]
        grads[p + "wq"] = np.einsum("bld,ble->de", h, dq)
        grads[p + "wk"] = np.einsum("bld,ble->de", h, dk)
        grads[p + "wv"] = np.einsum("bld,ble->de", h, dv)
        dh = dq @ params[p + "wq"].T + dk @ params[p + "wk"].T + dv @ params[p + "wv"].T
        dnorm, grads[p + "attn_norm"] = _rms_norm_backward(dh, lc["x_in"], lc["r1"], params[p + "attn_norm"])
        dx = dx + dnorm

    d = config.model_dim
    np.add.at(grads["embedding"], cache.ids.reshape(-1), dx.reshape(-1, d))
    return grads


class TransformerPredictor(MaskPredictor):
    """MaskPredictor backed by the tiny transformer."""

    def __init__(self, params: Params, config: TinyTransformerConfig):
        self.params = params
        self.config = config
        self.vocab_size = config.vocab_size

    def log_probs(self, state: MaskedState) -> np.ndarray:
        return forward(self.params, self.config, state.ids)


def extract_embeddings(x: TokenSequence, params: Params, config: TinyTransformerConfig) -> np.ndarray:
    """Final-layer hidden states (after the final norm, before the output projection), shape (L, d)."""
    cache = _encode(params, config, _as_batch(x.ids, config))
    return cache.hidden[0]


def mean_pool(hidden: np.ndarray) -> np.ndarray:
    return hidden.mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoints

_CONFIG_STRUCT = struct.Struct("<6qd2B")


def save_checkpoint(path: Union[str, Path], params: Params, config: TinyTransformerConfig) -> None:
    """
    Save parameters in the versioned little-endian binary format.

    Layout: magic, u32 version, config block, u32 tensor count, then for each
    tensor in declaration order a u32 rank, u64 dims and float64 data.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    shapes = param_shapes(config)
    with path.open("wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(_CONFIG_STRUCT.pack(
            config.layers, config.heads, config.model_dim, config.ff_dim,
            config.vocab_size, config.max_len, config.rope_base,
            int(config.tie_embeddings), int(config.use_rope),
        ))
        fh.write(struct.pack("<I", len(shapes)))
        for name, shape in shapes.items():
            tensor = params[name]
            if tensor.shape != shape:
                raise ValueError(f"parameter {name} has shape {tensor.shape}, expected {shape}")
            fh.write(struct.pack("<I", tensor.ndim))
            fh.write(struct.pack(f"<{tensor.ndim}Q", *tensor.shape))
            fh.write(np.ascontiguousarray(tensor, dtype="<f8").tobytes())
    logger.info(f"Checkpoint saved to {path}")


def load_checkpoint(path: Union[str, Path], dtype=np.float64) -> Tuple[Params, TinyTransformerConfig]:
    """Load a checkpoint written by ``save_checkpoint``."""
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path} is not a checkpoint (bad magic)")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    offset = 8
    fields = _CONFIG_STRUCT.unpack_from(data, offset)
    offset += _CONFIG_STRUCT.size
    config = TinyTransformerConfig(
        layers=fields[0], heads=fields[1], model_dim=fields[2], ff_dim=fields[3],
        vocab_size=fields[4], max_len=fields[5], rope_base=fields[6],
        tie_embeddings=bool(fields[7]), use_rope=bool(fields[8]),
    )
    (count,) = struct.unpack_from("<I", data, offset)
    offset += 4
    shapes = param_shapes(config)
    if count != len(shapes):
        raise ValueError(f"checkpoint holds {count} tensors, config expects {len(shapes)}")

    params: Params = {}
    for name, expected in shapes.items():
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        shape = struct.unpack_from(f"<{ndim}Q", data, offset)
        offset += 8 * ndim
        if tuple(shape) != expected:
            raise ValueError(f"tensor {name} has shape {shape}, expected {expected}")
        size = int(np.prod(shape))
        params[name] = np.frombuffer(data, dtype="<f8", count=size, offset=offset).reshape(shape).astype(dtype)
        offset += 8 * size
    logger.info(f"Checkpoint loaded from {path}")
    return params, config


# ---------------------------------------------------------------------------
# gradient check

GRADCHECK_STEP = 1e-5
GRADCHECK_TOLERANCE = 1e-4
GRADCHECK_FLOOR = 1e-4


class GradientCheckError(RuntimeError):
    """Raised when analytic and numerical gradients disagree."""


@dataclass
class GradientCheckReport:
    group_errors: Dict[str, float]
    worst_param: str
    worst_index: Tuple[int, ...]
    worst_analytic: float
    worst_numeric: float
    max_error: float
    tolerance: float = GRADCHECK_TOLERANCE

    @property
    def passed(self) -> bool:
        return self.max_error < self.tolerance

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "max_relative_error": self.max_error,
            "tolerance": self.tolerance,
            "worst": {
                "param": self.worst_param,
                "index": list(self.worst_index),
                "analytic": self.worst_analytic,
                "numeric": self.worst_numeric,
            },
            "groups": self.group_errors,
        }


def gradcheck_config() -> TinyTransformerConfig:
    return TinyTransformerConfig(layers=2, heads=2, model_dim=16, ff_dim=43, vocab_size=vocab_size_for(1), max_len=16)


def gradient_check(
    seed: int,
    config: Optional[TinyTransformerConfig] = None,
    num_states: int = 5,
    coords_per_group: int = 50,
    length: int = 8,
    t: float = 0.5,
    corrupt: bool = False,
) -> GradientCheckReport:
    """
    Compare ``backward`` against central finite differences at 64-bit precision.

    Random parameters (normal, std 0.3) and random masked states are drawn
    from ``seed``. The relative error of a coordinate is
    |a - n| / max(|a|, |n|, GRADCHECK_FLOOR).

    Args:
        seed: Seed for parameters, states and coordinate choice
        config: Architecture, defaults to ``gradcheck_config()``
        num_states: Masked states checked
        coords_per_group: Coordinates sampled per parameter tensor
        length: Token length of each state
        t: Masking probability (the loss weight is 1/t)
        corrupt: Perturb one analytic gradient group (negative control)

    Returns:
        GradientCheckReport with per-tensor maxima and the worst coordinate
    """
    config = config or gradcheck_config()
    rng = stream(seed, Stream.GRADCHECK)
    params = {
        name: (1.0 + 0.3 * rng.standard_normal(shape) if is_norm(name) else 0.3 * rng.standard_normal(shape))
        for name, shape in param_shapes(config).items()
    }
    vocab = build_vocab(config.k)

    group_errors = {name: 0.0 for name in params}
    worst = ("", (), 0.0, 0.0, -1.0)
    for _ in range(num_states):
        x0 = TokenSequence(rng.integers(0, vocab.num_kmers, size=length), vocab_k=config.k)
        state = forward_mask(x0, t, rng)
        weights = np.array([1.0 / state.t])

        def loss_at(p: Params) -> float:
            log_probs = forward(p, config, state.ids[None])
            losses, _ = masked_cross_entropy(log_probs, state.mask_flags[None], x0.ids[None], weights)
            return float(losses.sum())

        log_probs, cache = forward(params, config, state.ids[None], return_cache=True)
        _, grad_lp = masked_cross_entropy(log_probs, state.mask_flags[None], x0.ids[None], weights)
        grads = backward(params, config, cache, grad_lp)
        if corrupt:
            grads["layers.0.wq"] = grads["layers.0.wq"] + 1e-2

        for name, tensor in params.items():
            n = min(coords_per_group, tensor.size)
            for flat in rng.choice(tensor.size, size=n, replace=False):
                index = np.unravel_index(flat, tensor.shape)
                original = tensor[index]
                tensor[index] = original + GRADCHECK_STEP
                plus = loss_at(params)
                tensor[index] = original - GRADCHECK_STEP
                minus = loss_at(params)
                tensor[index] = original
                numeric = (plus - minus) / (2 * GRADCHECK_STEP)
                analytic = float(grads[name][index])
                error = abs(analytic - numeric) / max(abs(analytic), abs(numeric), GRADCHECK_FLOOR)
                group_errors[name] = max(group_errors[name], error)
                if error > worst[4]:
                    worst = (name, tuple(int(i) for i in index), analytic, numeric, error)

    report = GradientCheckReport(
        group_errors=group_errors,
        worst_param=worst[0],
        worst_index=worst[1],
        worst_analytic=worst[2],
        worst_numeric=worst[3],
        max_error=worst[4],
    )
    logger.info(f"Gradient check max relative error {report.max_error:.3e} at {report.worst_param}{list(report.worst_index)}")
    return report
