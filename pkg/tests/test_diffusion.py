"""Tests for the forward masking process, the training loss and the enumeration oracle."""
import numpy as np
import pytest
from scipy.special import log_softmax
from scipy.stats import chisquare

from src.ml.diffusion import (
    MaskedState,
    PredictorError,
    check_log_probs,
    diffusion_loss,
    enumerate_model_distribution,
    exact_nll,
    forward_mask,
    masked_cross_entropy,
    sample_time,
    sequence_index,
)
from src.ml.model import fit_tabular
from src.ml.rng import Stream, stream
from src.ml.seqio import TokenSequence, build_vocab


def _x0(length, seed=0):
    rng = np.random.default_rng(seed)
    return TokenSequence(rng.integers(0, 4, size=length), vocab_k=1)


def test_full_masking_at_t1():
    x0 = _x0(50)
    state = forward_mask(x0, 1.0, stream(0, Stream.MASK))
    assert state.mask_flags.all()
    assert state.t == 1.0


def test_at_least_one_mask_for_tiny_t():
    """A draw that masks nothing is redrawn."""
    x0 = _x0(5)
    rng = stream(1, Stream.MASK)
    for _ in range(50):
        assert forward_mask(x0, 1e-6, rng).num_masked >= 1


def test_unmasked_positions_keep_tokens():
    x0 = _x0(100)
    state = forward_mask(x0, 0.5, stream(2, Stream.MASK))
    keep = ~state.mask_flags
    assert np.array_equal(state.ids[keep], x0.ids[keep])
    assert np.all(state.ids[state.mask_flags] == build_vocab(1).mask_id)


def test_invalid_time():
    x0 = _x0(4)
    for t in (0.0, -0.1, 1.5, float("nan")):
        with pytest.raises(ValueError):
            forward_mask(x0, t, stream(0, Stream.MASK))


def test_mask_count_is_binomial():
    """Masked counts at L=1000, t=0.3 average to L*t."""
    x0 = _x0(1000)
    rng = stream(3, Stream.MASK)
    counts = np.array([forward_mask(x0, 0.3, rng).num_masked for _ in range(400)])
    sd = np.sqrt(1000 * 0.3 * 0.7)
    assert abs(counts.mean() - 300) < 4 * sd / np.sqrt(len(counts))
    assert np.all(np.abs(counts - 300) < 6 * sd)


@pytest.mark.parametrize("t", [0.1, 0.5, 0.9])
def test_per_position_mask_frequency(t):
    """Per-position mask frequencies fit Bernoulli(t) (chi-square, p > 0.01)."""
    print(f"\n=== Testing mask frequencies at t={t} ===")
    length, draws = 1000, 100_000
    x0 = _x0(length)
    rng = stream(4, Stream.MASK, int(t * 10))
    counts = np.zeros(length)
    for _ in range(draws):
        counts += forward_mask(x0, t, rng).mask_flags
    observed = np.concatenate([counts, draws - counts])
    expected = np.concatenate([np.full(length, draws * t), np.full(length, draws * (1 - t))])
    result = chisquare(observed, expected, ddof=length - 1)
    print(f"t={t}: chi2={result.statistic:.1f}, p={result.pvalue:.3f}")
    assert result.pvalue > 0.01
    print("✅ Mask frequencies passed")


def test_sample_time_range():
    rng = stream(0, Stream.MASK)
    times = np.array([sample_time(rng) for _ in range(10_000)])
    assert times.min() >= 1e-3
    assert times.max() <= 1.0


def test_perfect_predictor_has_zero_loss(make_predictor):
    x0 = _x0(6)

    def point_mass(state):
        with np.errstate(divide="ignore"):
            return np.log(np.eye(13)[x0.ids])

    loss = diffusion_loss(make_predictor(point_mass), [x0] * 4, stream(0, Stream.MASK))
    assert loss.value == 0.0
    assert loss.masked_count >= 4


def test_uniform_predictor_single_position(uniform_predictor):
    """One masked position contributes (1/t) log V."""
    x0 = _x0(1)
    loss = diffusion_loss(uniform_predictor, [x0], stream(5, Stream.MASK))
    t = sample_time(stream(5, Stream.MASK))
    assert loss.masked_count == 1
    assert loss.value == pytest.approx(np.log(13) / t, rel=1e-12)


def test_loss_is_non_negative(random_log_probs, make_predictor):
    pred = make_predictor(lambda state: random_log_probs(len(state), 13, seed=int(state.ids.sum())))
    batch = [_x0(8, seed=s) for s in range(16)]
    assert diffusion_loss(pred, batch, stream(6, Stream.MASK)).value >= 0


def test_loss_is_deterministic(uniform_predictor):
    batch = [_x0(8, seed=s) for s in range(8)]
    a = diffusion_loss(uniform_predictor, batch, stream(7, Stream.MASK))
    b = diffusion_loss(uniform_predictor, batch, stream(7, Stream.MASK))
    assert a.value == b.value
    assert np.array_equal(a.per_sequence, b.per_sequence)


def test_loss_ignores_unmasked_rows(toy_corpus, vocab1, make_predictor):
    """Replacing rows at unmasked positions leaves the loss bit-identical."""
    tabular = fit_tabular(toy_corpus, 2, vocab1)

    def blanked(state):
        rows = tabular.log_probs(state).copy()
        rows[~state.mask_flags] = log_softmax(np.zeros(13))
        return rows

    a = diffusion_loss(tabular, toy_corpus, stream(8, Stream.MASK))
    b = diffusion_loss(make_predictor(blanked), toy_corpus, stream(8, Stream.MASK))
    assert a.value == b.value


def test_loss_validates_batch(uniform_predictor):
    with pytest.raises(ValueError):
        diffusion_loss(uniform_predictor, [], stream(0, Stream.MASK))
    with pytest.raises(ValueError):
        diffusion_loss(uniform_predictor, [_x0(3), _x0(4)], stream(0, Stream.MASK))


def test_loss_rejects_bad_predictor_output(make_predictor):
    short = make_predictor(lambda state: np.full((len(state) - 1, 13), -np.log(13)))
    with pytest.raises(PredictorError):
        diffusion_loss(short, [_x0(4)], stream(0, Stream.MASK))
    unnormalized = make_predictor(lambda state: np.zeros((len(state), 13)))
    with pytest.raises(PredictorError):
        diffusion_loss(unnormalized, [_x0(4)], stream(0, Stream.MASK))


def test_check_log_probs_rejects_nan():
    rows = log_softmax(np.zeros((2, 13)), axis=-1)
    rows[1, 3] = np.nan
    with pytest.raises(PredictorError):
        check_log_probs(rows, 2)


def test_cross_entropy_floor_and_gradient():
    """Clamped entries contribute -log(1e-12) and zero gradient."""
    log_probs = np.log(np.array([[[0.5, 0.5 - 1e-20, 1e-20, 0.0]]]).clip(1e-300))
    masked = np.array([[True]])
    losses, grad = masked_cross_entropy(log_probs, masked, np.array([[2]]), np.array([2.0]))
    assert losses[0] == pytest.approx(-2 * np.log(1e-12))
    assert not grad.any()
    losses, grad = masked_cross_entropy(log_probs, masked, np.array([[0]]), np.array([2.0]))
    assert losses[0] == pytest.approx(2 * np.log(2))
    assert grad[0, 0, 0] == -2.0


def test_cross_entropy_unmasked_contributes_nothing(random_log_probs):
    log_probs = random_log_probs(5, 13)[None]
    losses, grad = masked_cross_entropy(log_probs, np.zeros((1, 5), bool), np.zeros((1, 5), int), np.ones(1))
    assert losses[0] == 0.0
    assert not grad.any()


def test_enumeration_single_position(vocab1, make_predictor, rows_to_log_probs):
    """L=1: the distribution is the fully masked row restricted to k-mers."""
    row = rows_to_log_probs([[0.1, 0.2, 0.3, 0.4]])
    table = enumerate_model_distribution(make_predictor(lambda state: row), 1, vocab1)
    assert np.allclose(table, [0.1, 0.2, 0.3, 0.4], rtol=0, atol=1e-12)


def test_enumeration_uniform(vocab1, uniform_predictor):
    table = enumerate_model_distribution(uniform_predictor, 2, vocab1)
    assert np.allclose(table, 1 / 16, rtol=0, atol=1e-12)


def test_enumeration_sums_to_one(vocab1, toy_corpus):
    table = enumerate_model_distribution(fit_tabular(toy_corpus, 2, vocab1), 2, vocab1)
    assert abs(table.sum() - 1.0) <= 1e-10
    assert np.all(table >= 0)


def test_enumeration_refuses_large_instances(uniform_predictor, vocab1):
    with pytest.raises(ValueError):
        enumerate_model_distribution(uniform_predictor, 9, vocab1)


def test_sequence_index_is_lexicographic():
    assert sequence_index([0, 0], 4) == 0
    assert sequence_index([1, 2], 4) == 6
    assert sequence_index([3, 3], 4) == 15


def test_loss_upper_bounds_exact_nll(toy_corpus, vocab1):
    """The Monte-Carlo masked diffusion loss is at least the exact NLL (within 3 standard errors)."""
    print("\n=== Testing loss bound ===")
    tabular = fit_tabular(toy_corpus, 2, vocab1)
    table = enumerate_model_distribution(tabular, 2, vocab1)
    nll = exact_nll(table, toy_corpus, vocab1.num_kmers)

    batch = toy_corpus * (100_000 // len(toy_corpus))
    loss = diffusion_loss(tabular, batch, stream(9, Stream.MASK))
    print(f"loss {loss.value:.4f} +- {loss.std_error:.4f}, exact NLL {nll:.4f}")
    assert loss.value >= nll - 3 * loss.std_error
    print("✅ Loss bound passed")


def test_masked_state_invariants():
    state = MaskedState(ids=np.array([4, 0, 4]), mask_id=4, t=0.5)
    assert state.masked_positions.tolist() == [0, 2]
    assert state.num_masked == 2
    nxt = state.replace(np.array([1, 0, 4]))
    assert nxt.t == pytest.approx(1 / 3)
    assert MaskedState.fully_masked(3, 4).t == 1.0
    with pytest.raises(ValueError):
        MaskedState(ids=np.array([], dtype=int), mask_id=4, t=0.5)
