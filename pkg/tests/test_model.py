"""Tests for the tabular oracle and the numpy transformer."""
import numpy as np
import pytest
from pydantic import ValidationError

from src.ml.diffusion import MaskedState, PredictorError, diffusion_loss, enumerate_model_distribution, sequence_index
from src.ml.model import (
    CHECKPOINT_MAGIC,
    TinyTransformerConfig,
    TransformerPredictor,
    backward,
    extract_embeddings,
    fit_tabular,
    forward,
    gradcheck_config,
    gradient_check,
    init_params,
    load_checkpoint,
    mean_pool,
    param_shapes,
    save_checkpoint,
)
from src.ml.rng import Stream, stream
from src.ml.seqio import TokenSequence


def _state(ids, mask_id=4):
    ids = np.asarray(ids)
    return MaskedState(ids=ids, mask_id=mask_id, t=max(np.mean(ids == mask_id), 1e-3))


class TestTabular:
    def test_fully_masked_marginals(self, toy_corpus, vocab1):
        """Both positions masked: each row is the empirical marginal."""
        pred = fit_tabular(toy_corpus, 2, vocab1)
        probs = np.exp(pred.log_probs(_state([4, 4])))
        assert np.allclose(probs[0, :4], [8 / 16, 4 / 16, 2 / 16, 2 / 16], atol=1e-8)
        assert np.allclose(probs[1, :4], [5 / 16, 2 / 16, 6 / 16, 3 / 16], atol=1e-8)

    def test_conditional_given_context(self, toy_corpus, vocab1):
        pred = fit_tabular(toy_corpus, 2, vocab1)
        probs = np.exp(pred.log_probs(_state([0, 4])))
        assert np.allclose(probs[1, :4], [5 / 8, 0, 0, 3 / 8], atol=1e-8)
        # unmasked position carries a point mass on its token
        assert probs[0, 0] == pytest.approx(1.0, abs=1e-7)

    def test_unseen_context_is_uniform_over_kmers(self, vocab1):
        corpus = [TokenSequence(np.array([0, 0]), vocab_k=1)]
        pred = fit_tabular(corpus, 2, vocab1)
        probs = np.exp(pred.log_probs(_state([3, 4])))
        assert np.allclose(probs[1, :4], 0.25, atol=1e-8)

    def test_recovers_empirical_distribution(self, toy_corpus, vocab1):
        """With consistent conditionals the sampler's distribution is the data distribution."""
        table = enumerate_model_distribution(fit_tabular(toy_corpus, 2, vocab1), 2, vocab1)
        expected = np.zeros(16)
        for x in toy_corpus:
            expected[sequence_index(x.ids, 4)] += 1 / 16
        assert np.allclose(table, expected, atol=1e-6)

    def test_beats_uniform_loss(self, toy_corpus, vocab1, uniform_predictor):
        tabular = fit_tabular(toy_corpus, 2, vocab1)
        a = diffusion_loss(tabular, toy_corpus * 50, stream(0, Stream.MASK))
        b = diffusion_loss(uniform_predictor, toy_corpus * 50, stream(0, Stream.MASK))
        assert a.value < b.value

    def test_rejects_bad_instances(self, toy_corpus, vocab1):
        with pytest.raises(ValueError):
            fit_tabular(toy_corpus, 9, vocab1)
        with pytest.raises(ValueError):
            fit_tabular(toy_corpus, 3, vocab1)
        pred = fit_tabular(toy_corpus, 2, vocab1)
        with pytest.raises(PredictorError):
            pred.log_probs(_state([4, 4, 4]))


class TestConfig:
    def test_defaults(self):
        config = TinyTransformerConfig()
        assert config.head_dim == 16
        assert config.k == 6

    @pytest.mark.parametrize("overrides", [
        {"model_dim": 18, "heads": 4},
        {"model_dim": 12, "heads": 4},
        {"vocab_size": 14},
        {"layers": 0},
        {"unknown": 1},
    ])
    def test_rejects_invalid(self, overrides):
        with pytest.raises(ValidationError):
            TinyTransformerConfig(**overrides)

    def test_odd_head_dim_allowed_without_rope(self):
        config = TinyTransformerConfig(model_dim=12, heads=4, use_rope=False)
        assert config.head_dim == 3

    def test_tied_embeddings_drop_output_matrix(self, tiny_config):
        tied = tiny_config.model_copy(update={"tie_embeddings": True})
        assert "output" in param_shapes(tiny_config)
        assert "output" not in param_shapes(tied)


def test_init_params(tiny_config):
    params = init_params(tiny_config, stream(0, Stream.INIT))
    again = init_params(tiny_config, stream(0, Stream.INIT))
    assert list(params) == list(param_shapes(tiny_config))
    for name, value in params.items():
        assert value.shape == param_shapes(tiny_config)[name]
        assert np.array_equal(value, again[name])
    assert np.all(params["final_norm"] == 1.0)
    assert np.abs(params["embedding"]).max() <= 0.04
    assert 0.01 < params["embedding"].std() < 0.02


class TestForward:
    def test_rows_are_distributions(self, tiny_config, tiny_params):
        ids = np.array([0, 1, 4, 2, 3, 4])
        log_probs = forward(tiny_params, tiny_config, ids)
        assert log_probs.shape == (6, 13)
        assert np.allclose(np.exp(log_probs).sum(axis=1), 1.0, atol=1e-12)

    def test_batched_matches_single(self, tiny_config, tiny_params):
        batch = np.array([[0, 1, 4, 2], [4, 4, 3, 3]])
        out = forward(tiny_params, tiny_config, batch)
        assert out.shape == (2, 4, 13)
        assert np.allclose(out[1], forward(tiny_params, tiny_config, batch[1]), atol=1e-12)

    def test_is_bidirectional(self, tiny_config, tiny_params):
        """Changing the last token moves the first row."""
        a = forward(tiny_params, tiny_config, np.array([4, 1, 2, 0]))
        b = forward(tiny_params, tiny_config, np.array([4, 1, 2, 3]))
        assert not np.allclose(a[0], b[0])

    def test_permutation_equivariant_without_rope(self, tiny_config):
        config = tiny_config.model_copy(update={"use_rope": False})
        params = {k: v * 10 for k, v in init_params(config, stream(1, Stream.INIT)).items()}
        ids = np.array([0, 1, 4, 2, 3])
        perm = np.array([4, 2, 0, 3, 1])
        assert np.allclose(forward(params, config, ids[perm]), forward(params, config, ids)[perm], atol=1e-10)

    def test_fully_masked_rows_are_identical(self, tiny_config, tiny_params):
        out = forward(tiny_params, tiny_config, np.full(5, 4))
        assert np.allclose(out, out[0], atol=1e-12)

    def test_float32_mode(self, tiny_config, tiny_params):
        params32 = {k: v.astype(np.float32) for k, v in tiny_params.items()}
        ids = np.array([0, 1, 4, 2])
        out = forward(params32, tiny_config, ids)
        assert out.dtype == np.float32
        assert np.allclose(out, forward(tiny_params, tiny_config, ids), atol=1e-4)

    def test_rejects_bad_inputs(self, tiny_config, tiny_params):
        with pytest.raises(PredictorError):
            forward(tiny_params, tiny_config, np.zeros(33, dtype=int))
        with pytest.raises(PredictorError):
            forward(tiny_params, tiny_config, np.array([0, 13]))

    def test_predictor_wrapper(self, tiny_config, tiny_params):
        pred = TransformerPredictor(tiny_params, tiny_config)
        state = _state([0, 4, 4, 1])
        assert pred.vocab_size == 13
        assert np.array_equal(pred(state), forward(tiny_params, tiny_config, state.ids))


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self, tiny_config, tiny_params):
        out, cache = forward(tiny_params, tiny_config, np.array([0, 4, 2]), return_cache=True)
        grads = backward(tiny_params, tiny_config, cache, np.zeros_like(out))
        assert set(grads) == set(tiny_params)
        assert all(not g.any() for g in grads.values())

    def test_requires_cache(self, tiny_config, tiny_params):
        with pytest.raises(PredictorError):
            backward(tiny_params, tiny_config, None, np.zeros((3, 13)))

    def test_gradient_check_passes(self):
        print("\n=== Testing gradient check ===")
        report = gradient_check(seed=0)
        print(report.to_dict())
        assert report.passed
        assert report.max_error < 1e-4
        assert set(report.group_errors) == set(param_shapes(gradcheck_config()))
        print("✅ Gradient check passed")

    def test_gradient_check_catches_corruption(self):
        """Negative control: a perturbed gradient group must fail."""
        report = gradient_check(seed=0, num_states=1, coords_per_group=10, corrupt=True)
        assert not report.passed
        assert report.worst_param == "layers.0.wq"

    def test_gradient_check_tied_embeddings(self):
        config = gradcheck_config().model_copy(update={"tie_embeddings": True})
        report = gradient_check(seed=1, config=config, num_states=2, coords_per_group=20)
        assert report.passed
        assert "output" not in report.group_errors


class TestCheckpoint:
    def test_round_trip(self, tmp_path, tiny_config, tiny_params):
        path = tmp_path / "model.d3md"
        save_checkpoint(path, tiny_params, tiny_config)
        params, config = load_checkpoint(path)
        assert config == tiny_config
        assert list(params) == list(tiny_params)
        for name in params:
            assert np.array_equal(params[name], tiny_params[name])

    def test_layout_header(self, tmp_path, tiny_config, tiny_params):
        path = tmp_path / "model.d3md"
        save_checkpoint(path, tiny_params, tiny_config)
        data = path.read_bytes()
        assert data[:4] == CHECKPOINT_MAGIC == b"D3MD"
        assert data[4:8] == (1).to_bytes(4, "little")

    def test_float32_params_saved_as_float64(self, tmp_path, tiny_config, tiny_params):
        params32 = {k: v.astype(np.float32) for k, v in tiny_params.items()}
        save_checkpoint(tmp_path / "m.d3md", params32, tiny_config)
        params, _ = load_checkpoint(tmp_path / "m.d3md")
        assert params["embedding"].dtype == np.float64
        assert np.array_equal(params["embedding"], params32["embedding"].astype(np.float64))

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "junk.bin"
        path.write_bytes(b"NOPE" + bytes(64))
        with pytest.raises(ValueError, match="magic"):
            load_checkpoint(path)

    def test_shape_mismatch_refused(self, tmp_path, tiny_config, tiny_params):
        params = dict(tiny_params, final_norm=np.ones(3))
        with pytest.raises(ValueError):
            save_checkpoint(tmp_path / "m.d3md", params, tiny_config)


class TestEmbeddings:
    def test_shape(self, tiny_config, tiny_params):
        x = TokenSequence(np.array([0, 1, 2, 3, 0]), vocab_k=1)
        hidden = extract_embeddings(x, tiny_params, tiny_config)
        assert hidden.shape == (5, 16)
        assert mean_pool(hidden).shape == (16,)

    def test_single_token_pool_is_the_row(self, tiny_config, tiny_params):
        hidden = extract_embeddings(TokenSequence(np.array([2]), vocab_k=1), tiny_params, tiny_config)
        assert np.array_equal(mean_pool(hidden), hidden[0])

    def test_order_sensitive(self, tiny_config, tiny_params):
        """Rotary positions make the pooled embedding depend on token order."""
        a = extract_embeddings(TokenSequence(np.array([0, 0, 1, 3]), vocab_k=1), tiny_params, tiny_config)
        b = extract_embeddings(TokenSequence(np.array([3, 1, 0, 0]), vocab_k=1), tiny_params, tiny_config)
        assert not np.allclose(a, b[::-1])
        assert not np.allclose(mean_pool(a), mean_pool(b))
