import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dgvae.model import (
    DGVAE,
    ModelConfig,
    decode,
    encode,
    kl_term,
    prototype_assign,
    reconstruction_loglik,
    reparameterize,
    res_gcn,
)
from dgvae.numerics import SparseMatrix, Tensor, gradcheck
from dgvae.numerics import tensor as T


def small_model(seed=0, n_items=8, n_words=10, k=3, d=4, graph=None):
    return DGVAE(ModelConfig(n_prototypes=k, latent_dim=d), n_items, n_words, graph, seed=seed)


# -- prototype_assign --------------------------------------------------------

def test_assign_closed_form():
    h = np.array([[1.0, 0.0]])
    m = np.eye(2)
    a = prototype_assign(h, m, tau=1.0)
    np.testing.assert_allclose(a.logits.data, [[1.0, 0.0]])
    np.testing.assert_allclose(a.probs.data, [[0.7310585786300049, 0.2689414213699951]], rtol=1e-12)


def test_assign_zero_row_is_uniform():
    a = prototype_assign(np.zeros((1, 4)), np.random.default_rng(0).normal(size=(3, 4)), tau=0.1)
    np.testing.assert_allclose(a.probs.data, [[1 / 3] * 3], rtol=1e-12)


def test_assign_small_tau_sharpens():
    h = np.array([[0.6, 0.2]])
    m = np.eye(2)
    assert prototype_assign(h, m, 0.1).probs.data.max() > prototype_assign(h, m, 1.0).probs.data.max()


def test_assign_rejects_nonpositive_tau():
    with pytest.raises(ValueError):
        prototype_assign(np.ones((1, 2)), np.eye(2), 0.0)


@given(st.integers(0, 10_000))
@settings(max_examples=30, deadline=None)
def test_assign_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    a = prototype_assign(rng.normal(size=(7, 5)) * 3, rng.normal(size=(4, 5)) * 3, 0.1)
    assert np.all(a.probs.data >= 0)
    np.testing.assert_allclose(a.probs.data.sum(axis=1), 1.0, atol=1e-12)


# -- res_gcn -----------------------------------------------------------------

@pytest.mark.parametrize("layers", [0, 1, 2, 5])
def test_res_gcn_identity_doubles(layers):
    e = np.random.default_rng(layers).normal(size=(3, 4))
    np.testing.assert_array_equal(res_gcn(e, SparseMatrix.identity(4), layers).data, 2 * e)
    np.testing.assert_array_equal(res_gcn(e, None, layers).data, 2 * e)


def test_res_gcn_two_hops_of_swap():
    swap = SparseMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(res_gcn(np.array([[1.0, 0.0]]), swap, 2).data, [[2.0, 0.0]])
    np.testing.assert_array_equal(res_gcn(np.array([[1.0, 0.0]]), swap, 1).data, [[1.0, 1.0]])


def test_res_gcn_zero_layers_is_twice_input():
    s = SparseMatrix.from_dense(np.array([[0.0, 1.0], [1.0, 0.0]]))
    np.testing.assert_array_equal(res_gcn(np.array([[3.0, 1.0]]), s, 0).data, [[6.0, 2.0]])


# -- encode ------------------------------------------------------------------

def test_encode_mask_is_hadamard():
    # with no propagation, an identity MLP and bias 0 the first d outputs are
    # the normalized masked row
    cfg = ModelConfig(n_prototypes=2, latent_dim=3, gcn_layers=0)
    probs = np.full((3, 2), 0.5)
    assign = prototype_assign(np.zeros((3, 2)), np.zeros((2, 2)), 1.0)
    assert np.allclose(assign.probs.data, probs)
    w = Tensor(np.hstack([np.eye(3), np.zeros((3, 3))]))
    mu, sigma = encode(np.array([[1.0, 0.0, 1.0]]), assign, None, w, Tensor(np.zeros(6)), cfg)
    expected = np.array([0.5, 0.0, 0.5]) / np.linalg.norm([0.5, 0.0, 0.5])
    np.testing.assert_allclose(mu.data[0, 0], expected, rtol=1e-12)
    np.testing.assert_allclose(mu.data[1, 0], expected, rtol=1e-12)
    # b = 0 gives sigma = sigma0
    np.testing.assert_allclose(sigma.data, cfg.sigma0, rtol=1e-15)


def test_encode_empty_row_is_finite():
    model = small_model()
    mu, sigma = model.encode("item", np.zeros((2, 8)))
    assert np.all(np.isfinite(mu.data)) and np.all(sigma.data > 0)
    # zero bias and zero input give the degenerate zero mean
    np.testing.assert_array_equal(mu.data, 0.0)


def test_encode_dimension_mismatch():
    model = small_model()
    with pytest.raises(ValueError):
        model.encode("item", np.ones((1, 5)))


@given(st.integers(0, 10_000))
@settings(max_examples=25, deadline=None)
def test_mu_unit_norm_sigma_positive(seed):
    rng = np.random.default_rng(seed)
    graph = SparseMatrix.from_dense(np.abs(rng.normal(size=(8, 8))) * (rng.random((8, 8)) < 0.3))
    model = small_model(seed, graph=graph)
    rows = (rng.random((5, 8)) < 0.5).astype(float)
    rows[:, 0] = 1.0
    for branch, r in (("item", rows), ("word", rng.random((5, 10)))):
        mu, sigma = model.encode(branch, r)
        np.testing.assert_allclose(np.linalg.norm(mu.data, axis=-1), 1.0, atol=1e-12)
        assert np.all(sigma.data > 0)


# -- reparameterize ----------------------------------------------------------

def test_reparameterize_examples():
    mu = np.array([0.3, -0.2])
    assert np.array_equal(reparameterize(Tensor(mu), Tensor(np.ones(2)), np.zeros(2)).data, mu)
    assert reparameterize(Tensor(mu), Tensor(np.ones(2)), None).data is not None
    z = reparameterize(Tensor(np.zeros(2)), Tensor(np.ones(2)), np.array([1.0, -1.0]))
    np.testing.assert_array_equal(z.data, [1.0, -1.0])


def test_reparameterize_monte_carlo_mean():
    rng = np.random.default_rng(0)
    n = 100_000
    mu, sigma = 0.4, 0.7
    z = reparameterize(Tensor(np.full(n, mu)), Tensor(np.full(n, sigma)), rng.standard_normal(n)).data
    assert abs(z.mean() - mu) < 3 * sigma / math.sqrt(n)


# -- decode ------------------------------------------------------------------

def test_decode_single_prototype_identical_items_uniform():
    h = np.tile([[0.3, 0.4]], (4, 1))
    assign = prototype_assign(h, np.array([[1.0, 0.0]]), 0.1)
    log_pi = decode(np.array([[[0.2, -1.0]]]), assign, h, 0.1)
    np.testing.assert_allclose(np.exp(log_pi.data), [[0.25] * 4], rtol=1e-12)


def test_decode_argmax_at_aligned_item():
    rng = np.random.default_rng(1)
    h = rng.normal(size=(6, 3))
    assign = prototype_assign(h, rng.normal(size=(2, 3)), 0.1)
    z = np.stack([h[[4]], h[[4]]])  # (K=2, B=1, d)
    pi = np.exp(decode(z, assign, h, 0.1).data[0])
    assert int(np.argmax(pi)) == 4


@given(st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_decoder_rows_sum_to_one(seed):
    rng = np.random.default_rng(seed)
    h = rng.normal(size=(9, 4)) * rng.uniform(0.1, 5)
    assign = prototype_assign(h, rng.normal(size=(3, 4)) * 3, 0.1)
    log_pi = decode(rng.normal(size=(3, 5, 4)), assign, h, 0.1)
    np.testing.assert_allclose(np.exp(log_pi.data).sum(axis=1), 1.0, atol=1e-12)


# -- kl / likelihood ---------------------------------------------------------

def test_kl_examples():
    s0 = 0.1
    zero = kl_term(np.zeros((1, 1, 5)), np.full((1, 1, 5), s0), s0).data
    np.testing.assert_allclose(zero, [0.0], atol=1e-15)
    half = kl_term(np.full((1, 1, 4), s0), np.full((1, 1, 4), s0), s0).data
    np.testing.assert_allclose(half, [4 * 0.5], rtol=1e-12)


def test_kl_nonnegative_random_draws():
    rng = np.random.default_rng(2024)
    s0 = 0.1
    mu = rng.normal(scale=0.3, size=(1000, 1, 1, 6))
    sigma = np.exp(rng.normal(scale=1.0, size=(1000, 1, 1, 6))) * s0
    values = np.array([kl_term(mu[i], sigma[i], s0).data[0] for i in range(1000)])
    assert np.all(values >= 0)
    assert np.all(values > 0)  # random draws never hit the prior exactly


def test_kl_zero_only_at_prior():
    s0 = 0.3
    assert kl_term(np.zeros((1, 1, 2)), np.full((1, 1, 2), s0), s0).data[0] == 0.0
    assert kl_term(np.array([[[1e-3, 0.0]]]), np.full((1, 1, 2), s0), s0).data[0] > 0.0
    assert kl_term(np.zeros((1, 1, 2)), np.array([[[s0 * 1.01, s0]]]), s0).data[0] > 0.0


def test_reconstruction_examples():
    assert reconstruction_loglik(Tensor(np.log([[1.0, 1e-300]]).clip(-700)), np.array([[1.0, 0.0]])).data[0] == 0.0
    uniform = np.log(np.full((1, 4), 0.25))
    r = np.array([[0.0, 1.0, 0.0, 0.0]])
    np.testing.assert_allclose(reconstruction_loglik(uniform, r).data, [math.log(0.25)], rtol=1e-15)
    np.testing.assert_allclose(reconstruction_loglik(uniform, 2 * r).data, [2 * math.log(0.25)], rtol=1e-15)


def test_reconstruction_clamps_log_floor():
    out = reconstruction_loglik(np.array([[-1000.0]]), np.array([[1.0]])).data[0]
    assert out == pytest.approx(math.log(1e-12), rel=1e-15)


# -- model-level -------------------------------------------------------------

def test_epsilon_zero_gives_mean():
    model = small_model()
    rows = np.eye(8)[:3]
    eps = np.zeros((3, 3, 4))
    latent, _, _ = model.branch_forward("item", rows, eps)
    np.testing.assert_array_equal(latent.z.data, latent.mu.data)


def test_forward_deterministic():
    a, b = small_model(5), small_model(5)
    rows = np.eye(8)[:2]
    eps = np.random.default_rng(0).standard_normal((3, 2, 4))
    np.testing.assert_array_equal(a.branch_forward("item", rows, eps)[1].data,
                                  b.branch_forward("item", rows, eps)[1].data)


def test_prototypes_shared_between_branches():
    model = small_model()
    ia, wa = model.assignment("item"), model.assignment("word")
    assert ia.probs.shape == (8, 3) and wa.probs.shape == (10, 3)
    assert "proto" in model.params and "word_proto" not in model.params


def test_biases_zero_and_xavier_bounds():
    model = small_model(n_items=50, d=6)
    assert np.all(model.params["enc_item_b"].data == 0)
    bound = math.sqrt(6 / (50 + 6))
    assert np.abs(model.params["item_emb"].data).max() <= bound


def test_config_validation():
    for bad in (dict(n_prototypes=1), dict(latent_dim=0), dict(gcn_layers=-1), dict(tau=0.0), dict(sigma0=-1.0)):
        with pytest.raises(ValueError):
            ModelConfig(**bad).validate()


def test_branch_nelbo_gradcheck():
    rng = np.random.default_rng(3)
    graph = SparseMatrix.from_dense(np.abs(rng.normal(size=(8, 8))) * (rng.random((8, 8)) < 0.4))
    model = small_model(3, graph=graph)
    rows = (rng.random((4, 8)) < 0.5).astype(float)
    rows[:, 1] = 1.0
    eps = rng.standard_normal((3, 4, 4))

    def loss():
        latent, log_pi, _ = model.branch_forward("item", rows, eps)
        nelbo = reconstruction_loglik(log_pi, rows) * -1.0 + kl_term(latent.mu, latent.sigma, 0.1) * 0.1
        return T.tsum(nelbo)

    params = [model.params[n] for n in ("item_emb", "proto", "enc_item_w", "enc_item_b")]
    report = gradcheck(loss, params, tol=1e-4)
    assert report.passed, report.table()
