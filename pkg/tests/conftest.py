"""Shared fixtures."""
import numpy as np
import pytest
from scipy.special import log_softmax

from src.ml.diffusion import MaskedState
from src.ml.model import MaskPredictor, TinyTransformerConfig, init_params, is_norm
from src.ml.rng import Stream, stream
from src.ml.seqio import TokenSequence, build_vocab, vocab_size_for


class RowPredictor(MaskPredictor):
    """Returns rows computed by a plain function of the state."""

    def __init__(self, vocab_size, fn):
        self.vocab_size = vocab_size
        self.fn = fn

    def log_probs(self, state: MaskedState) -> np.ndarray:
        return self.fn(state)


@pytest.fixture
def vocab1():
    return build_vocab(1)


@pytest.fixture
def toy_corpus():
    """Fixed 16-point corpus of 2-token sequences over the 1-mer vocabulary."""
    pairs = [(0, 0)] * 5 + [(0, 3)] * 3 + [(1, 2)] * 4 + [(2, 2)] * 2 + [(3, 1)] * 2
    return [TokenSequence(np.array(p), vocab_k=1) for p in pairs]


@pytest.fixture
def make_predictor():
    """Factory: wrap ``fn(state) -> (L, V) log-probs`` as a MaskPredictor."""
    def factory(fn, vocab_size=vocab_size_for(1)):
        return RowPredictor(vocab_size, fn)
    return factory


@pytest.fixture
def uniform_predictor(make_predictor):
    v = vocab_size_for(1)
    return make_predictor(lambda state: np.full((len(state), v), -np.log(v)))


@pytest.fixture
def rows_to_log_probs():
    """Turn probability rows over k-mers into full-vocabulary log-probabilities."""
    def convert(rows, vocab_size=vocab_size_for(1)):
        rows = np.asarray(rows, dtype=np.float64)
        full = np.zeros((rows.shape[0], vocab_size))
        full[:, : rows.shape[1]] = rows
        with np.errstate(divide="ignore"):
            return np.log(full / full.sum(axis=1, keepdims=True))
    return convert


@pytest.fixture
def tiny_config():
    return TinyTransformerConfig(layers=1, heads=2, model_dim=16, ff_dim=32, vocab_size=vocab_size_for(1), max_len=32)


@pytest.fixture
def tiny_params(tiny_config):
    rng = stream(0, Stream.INIT)
    # larger than the training init so outputs visibly depend on the input
    return {name: p if is_norm(name) else p * 10 for name, p in init_params(tiny_config, rng).items()}


@pytest.fixture
def random_log_probs():
    def make(length, vocab_size, seed=0):
        rng = np.random.default_rng(seed)
        return log_softmax(rng.standard_normal((length, vocab_size)), axis=-1)
    return make
