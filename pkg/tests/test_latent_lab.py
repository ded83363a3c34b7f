import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerojepa.errors import DimensionError
from aerojepa.latent_lab import (
    ConceptVector, TokenLift, concept_vector, concept_walk, decode_walk, disentanglement, interpolate_token_sets,
    latent_interpolate, lift_latent, numerical_slopes, pca_project,
)
from aerojepa.model import AeroJEPANet, ModelConfig, TokenSet, pool_latent
from aerojepa.probes import ProbeModel, ProbeSuite, fit_ridge
from aerojepa.synthgen import Conditions, DesignParams, make_case
from aerojepa.training import case_predictor


def cov_eig_pca(X, k):
    """Oracle: eigenvectors of the sample covariance, sign fixed by the largest-magnitude loading."""
    Xc = X - X.mean(axis=0)
    vals, vecs = np.linalg.eigh(np.cov(Xc, rowvar=False))
    order = np.argsort(vals)[::-1][:k]
    V = vecs[:, order]
    return Xc @ V, vals[order] / vals.sum()


def _align(P, Q):
    signs = np.sign(np.sum(P * Q, axis=0))
    return Q * signs


# -- PCA -------------------------------------------------------------------------------------------
def test_pca_matches_covariance_eigendecomposition():
    X = np.random.default_rng(0).normal(size=(40, 6)) @ np.diag([5, 3, 2, 1, 0.5, 0.1])
    P, ratio, _ = pca_project(X, 3)
    Q, r = cov_eig_pca(X, 3)
    np.testing.assert_allclose(P, _align(P, Q), atol=1e-8)
    np.testing.assert_allclose(ratio, r, atol=1e-8)


def test_points_on_a_line():
    t = np.linspace(-1, 1, 30)
    _, ratio, _ = pca_project(np.column_stack([t, 2 * t + 1]), 2)
    assert ratio[0] >= 0.999


def test_full_rank_projection_is_an_isometry():
    X = np.random.default_rng(1).normal(size=(12, 4))
    P, _, _ = pca_project(X, 4)
    d = lambda A: np.linalg.norm(A[:, None] - A[None], axis=-1)
    np.testing.assert_allclose(d(P), d(X), atol=1e-10)


def test_pca_permutation_invariant_up_to_sign():
    X = np.random.default_rng(2).normal(size=(25, 5))
    perm = np.random.default_rng(3).permutation(25)
    P, _, _ = pca_project(X, 2)
    Pp, _, _ = pca_project(X[perm], 2)
    np.testing.assert_allclose(np.abs(Pp), np.abs(P[perm]), atol=1e-10)


def test_pca_needs_enough_rows():
    with pytest.raises(ValueError):
        pca_project(np.zeros((1, 3)), 1)
    with pytest.raises(ValueError):
        pca_project(np.random.default_rng(0).normal(size=(2, 3)), 2)


# -- interpolation -------------------------------------------------------------------------------
def test_interpolation_endpoints_and_midpoint():
    rng = np.random.default_rng(4)
    a, b = rng.normal(size=5), rng.normal(size=5)
    path = latent_interpolate(a, b, [0.0, 1.0])
    assert path[0].tobytes() == a.tobytes() and path[1].tobytes() == b.tobytes()
    np.testing.assert_array_equal(latent_interpolate(a, a, [0.5])[0], a)
    with pytest.raises(DimensionError):
        latent_interpolate(a, b[:3], [0.5])


def test_affine_probe_linear_along_path():
    rng = np.random.default_rng(5)
    Z = rng.normal(size=(50, 4))
    m = fit_ridge(Z, Z @ [1.0, -2.0, 0.5, 0.0] + 0.1 * rng.normal(size=50))
    a, b = Z[0], Z[1]
    y = m.predict(latent_interpolate(a, b, np.linspace(0, 1, 11)))
    assert np.all(np.diff(y) > 0) or np.all(np.diff(y) < 0)
    np.testing.assert_allclose(np.diff(y, 2), 0.0, atol=1e-12)


def test_token_set_interpolation_keeps_shape():
    rng = np.random.default_rng(6)
    a = TokenSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
    b = TokenSet(rng.normal(size=(4, 3)), rng.normal(size=(4, 2)))
    path = interpolate_token_sets(a, b, [0.0, 0.5, 1.0])
    assert path[0].tokens.tobytes() == a.tokens.tobytes()
    np.testing.assert_allclose(path[1].centroids, 0.5 * (a.centroids + b.centroids))


# -- concept walks and disentanglement -------------------------------------------------------------
def _suite(W, sigma, family="context->design", names=("thickness", "camber")):
    d = W.shape[1]
    models = {n: ProbeModel(np.zeros(d), np.asarray(sigma, float), np.asarray(w, float), 0.1 * i, 1.0, 0.9, n)
              for i, (n, w) in enumerate(zip(names, W))}
    return ProbeSuite(family, "z_ctx", models)


def test_concept_vector_is_unit_norm():
    v = concept_vector(_suite(np.array([[3.0, 4.0, 0.0], [0.0, 1.0, 0.0]]), np.ones(3)), "thickness")
    assert abs(np.linalg.norm(v.direction) - 1.0) <= 1e-12
    with pytest.raises(ValueError):
        ConceptVector(np.array([1.0, 1.0]), "x")


def test_orthonormal_probes_give_identity():
    W = np.linalg.qr(np.random.default_rng(7).normal(size=(5, 5)))[0][:2]
    S = disentanglement(_suite(W, np.ones(5))).S
    np.testing.assert_allclose(S, np.eye(2), atol=1e-12)


def test_walk_at_zero_and_symmetry():
    rng = np.random.default_rng(8)
    suite = _suite(rng.normal(size=(2, 6)), rng.uniform(0.5, 2, 6))
    mu = rng.normal(size=6)
    v = concept_vector(suite, "camber")
    walk = concept_walk(mu, v, [-1.5, 0.0, 1.5])
    assert walk[1].tobytes() == mu.tobytes()
    y = suite.models["thickness"].predict(walk)
    assert (y[0] + y[2]) / 2 == pytest.approx(y[1], abs=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.integers(2, 4))
def test_closed_form_slopes_equal_walk_slopes(seed, K):
    rng = np.random.default_rng(seed)
    d = 7
    names = tuple(f"x{i}" for i in range(K))
    suite = _suite(rng.normal(size=(K, d)), rng.uniform(0.2, 3, d), names=names)
    sx = rng.uniform(0.5, 2.0, K)
    closed = disentanglement(suite, sigma_x=sx).S
    numeric = numerical_slopes(suite, rng.normal(size=d), sigma_x=sx, h=0.7)
    assert np.abs(closed - numeric).max() <= 1e-8 * max(1.0, np.abs(closed).max())


def test_walk_readout_affine_in_gamma():
    rng = np.random.default_rng(9)
    suite = _suite(rng.normal(size=(2, 5)), rng.uniform(0.5, 2, 5))
    g = np.linspace(-3, 3, 13)
    y = suite.models["camber"].predict(concept_walk(rng.normal(size=5), concept_vector(suite, "thickness"), g))
    np.testing.assert_allclose(np.diff(y, 2), 0.0, atol=1e-12)


def test_diagonal_dominance_flag():
    suite = _suite(np.array([[1.0, 0.1, 0.0], [0.05, 1.0, 0.0]]), np.ones(3))
    m = disentanglement(suite)
    assert m.diagonal_dominant()
    assert m.diagonal.shape == (2,) and m.off_diagonal.shape == (2,)


def test_disentanglement_needs_two_probes():
    with pytest.raises(ValueError):
        disentanglement(_suite(np.ones((1, 3)), np.ones(3), names=("thickness",)))


# -- token lifts -----------------------------------------------------------------------------------
def test_lift_reproduces_pooled_latent_exactly():
    rng = np.random.default_rng(10)
    sets = [TokenSet(rng.normal(size=(6, 4)), rng.normal(size=(6, 2))) for _ in range(20)]
    lift = TokenLift.fit(sets)
    for z in rng.normal(size=(5, 4)):
        np.testing.assert_allclose(pool_latent(lift(z)), z, atol=1e-13)
    shift = TokenLift.shift(sets[0])
    z = rng.normal(size=4)
    np.testing.assert_allclose(shift(z).tokens, lift_latent(z, sets[0]).tokens, atol=1e-14)


def test_lift_recovers_affine_token_family():
    rng = np.random.default_rng(11)
    base, B = rng.normal(size=(6, 4)), rng.normal(size=(4, 24))
    zs = rng.normal(size=(15, 4))
    sets = []
    for z in zs:
        t = base + (z @ B).reshape(6, 4)
        sets.append(TokenSet(t, np.zeros((6, 2))))
    lift = TokenLift.fit(sets)
    for s in sets:
        np.testing.assert_allclose(lift(pool_latent(s)).tokens, s.tokens, atol=1e-10)


# -- decoding along paths ------------------------------------------------------------------------
@pytest.fixture(scope="module")
def tiny():
    cfg = ModelConfig(n_tokens=8, token_dim=8, encoder_depth=1, predictor_depth=1, decoder_depth=1,
                      decoder_hidden=(16,))
    return AeroJEPANet(cfg, seed=0)


def test_walk_endpoints_match_direct_predictions(tiny):
    ca = make_case(DesignParams(0.1, 0.02), Conditions(0.05), 128)
    cb = make_case(DesignParams(0.2, 0.06), Conditions(0.05), 128)
    za, zb = tiny.encode_context(ca.geometry), tiny.encode_context(cb.geometry)
    path = interpolate_token_sets(za, zb, [0.0, 0.5, 1.0])
    res = decode_walk(tiny, path, [ca.conditions] * 3, [ca.field, ca.field, cb.field])
    direct_a = tiny.decode(case_predictor(tiny, ca, 128), ca.field.coords)
    direct_b = tiny.decode(case_predictor(tiny, cb, 128), cb.field.coords)
    assert np.abs(res.fields[0].features - direct_a).max() <= 1e-12
    assert np.abs(res.fields[2].features - direct_b).max() <= 1e-12
    assert res.cl.shape == (3,) and res.z_pred.shape == (3, 8)


def test_walk_argument_lengths_checked(tiny):
    c = make_case(DesignParams(0.1, 0.02), Conditions(0.05), 128)
    z = tiny.encode_context(c.geometry)
    with pytest.raises(ValueError):
        decode_walk(tiny, [z, z], [c.conditions] * 3, c.field)
