import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group
from sklearn.base import clone

from aerojepa.errors import DimensionError
from aerojepa.probes import (
    LAMBDA_GRID, ProbeModel, RidgeProbe, fit_ridge, fit_suites, fold_assignment, probe_predict, ridge_solve,
    standardization,
)
from aerojepa.training import LatentTable


def gd_ridge(Zs, yc, lam, iters=200_000):
    """Iterative oracle: gradient descent on 0.5|Zw - y|^2 + 0.5 lam |w|^2 with the optimal fixed step."""
    H = Zs.T @ Zs + lam * np.eye(Zs.shape[1])
    eig = np.linalg.eigvalsh(H)
    step = 2.0 / (eig[0] + eig[-1])
    w = np.zeros(Zs.shape[1])
    for _ in range(iters):
        g = H @ w - Zs.T @ yc
        if np.abs(g).max() < 1e-14:
            break
        w -= step * g
    return w


def linear_data(n=80, d=6, noise=0.0, seed=0):
    rng = np.random.default_rng(seed)
    Z = rng.normal(size=(n, d)) * rng.uniform(0.5, 3.0, d) + rng.normal(size=d)
    w = rng.normal(size=d)
    return Z, Z @ w + 0.7 + noise * rng.normal(size=n), w


# -- fitting ---------------------------------------------------------------------------------------
@pytest.mark.parametrize("lam", [1e-4, 1.0, 100.0])
def test_closed_form_matches_gradient_descent_oracle(lam):
    Z, y, _ = linear_data(noise=0.3)
    mu, sigma, active = standardization(Z)
    Zs, yc = (Z - mu) / sigma, y - y.mean()
    np.testing.assert_allclose(ridge_solve(Zs, yc, lam, active), gd_ridge(Zs, yc, lam), rtol=0, atol=1e-8)


def test_noiseless_linear_target_recovered():
    Z, y, w = linear_data()
    m = fit_ridge(Z, y)
    assert m.cv_r2 >= 0.999
    assert m.lam == LAMBDA_GRID[0]
    np.testing.assert_allclose(m.gradient(), w, rtol=1e-3)


def test_permuted_labels_give_chance_cv_score():
    Z, y, _ = linear_data(n=200, seed=1)
    y = np.random.default_rng(2).permutation(y)
    assert fit_ridge(Z, y).cv_r2 <= 0.1


def test_zero_variance_dimension_neutralised():
    Z, y, _ = linear_data(seed=3)
    Z[:, 2] = 4.2
    m = fit_ridge(Z, y)
    assert m.w[2] == 0.0 and m.sigma[2] == 1.0


def test_residuals_orthogonal_without_regularisation():
    Z, y, _ = linear_data(noise=0.5, seed=4)
    m = fit_ridge(Z, y, lambda_grid=(0.0,))
    r = y - m.predict(Z)
    Zs = (Z - m.mu) / m.sigma
    assert np.abs(Zs.T @ r).max() < 1e-9
    assert abs(r.sum()) < 1e-9


def test_rotation_leaves_unregularised_r2_unchanged():
    Z, y, _ = linear_data(n=120, noise=0.5, seed=5)
    R = ortho_group.rvs(Z.shape[1], random_state=6)
    a = fit_ridge(Z, y, lambda_grid=(0.0,))
    b = fit_ridge(Z @ R, y, lambda_grid=(0.0,))
    assert a.cv_r2 == pytest.approx(b.cv_r2, abs=1e-10)
    np.testing.assert_allclose(a.predict(Z), b.predict(Z @ R), atol=1e-10)


def test_rotation_changes_regularised_r2_only_slightly():
    Z, y, _ = linear_data(n=120, noise=0.5, seed=5)
    R = ortho_group.rvs(Z.shape[1], random_state=6)
    assert fit_ridge(Z, y).cv_r2 == pytest.approx(fit_ridge(Z @ R, y).cv_r2, abs=0.02)


def test_fit_argument_errors():
    Z, y, _ = linear_data(n=8)
    with pytest.raises(ValueError):
        fit_ridge(Z, y)
    Z, y, _ = linear_data()
    with pytest.raises(DimensionError):
        fit_ridge(Z, y[:-1])
    with pytest.raises(ValueError):
        fit_ridge(Z, y, lambda_grid=())


def test_folds_keep_groups_together():
    groups = np.repeat(np.arange(20), 3)
    f = fold_assignment(60, 5, groups, seed=1)
    for g in range(20):
        assert len(set(f[groups == g])) == 1
    assert sorted(np.bincount(f).tolist()) == [12] * 5
    with pytest.raises(ValueError):
        fold_assignment(6, 5, np.repeat([0, 1], 3))


# -- readout ---------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def model():
    Z, y, _ = linear_data(noise=0.2, seed=7)
    return fit_ridge(Z, y)


def test_prediction_at_mean_is_bias(model):
    assert model.predict(model.mu) == pytest.approx(model.b, abs=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 5), st.floats(-5, 5))
def test_prediction_is_affine_per_dimension(i, t):
    Z, y, _ = linear_data(noise=0.2, seed=7)
    m = fit_ridge(Z, y)
    e = np.zeros(m.dim)
    e[i] = 1.0
    delta = m.predict(m.mu + m.sigma * e * t) - m.predict(m.mu)
    assert delta == pytest.approx(m.w[i] * t, abs=1e-12)


def test_gradient_matches_finite_differences(model):
    g = model.gradient()
    z0 = model.mu + 0.3
    h = 1e-4
    fd = np.array([(model.predict(z0 + h * e) - model.predict(z0 - h * e)) / (2 * h) for e in np.eye(model.dim)])
    assert np.linalg.norm(fd - g) / np.linalg.norm(g) < 1e-10


def test_predict_dimension_checked(model):
    with pytest.raises(DimensionError):
        probe_predict(model, np.zeros(model.dim + 1))


def test_sklearn_wrapper_agrees_and_clones():
    Z, y, _ = linear_data(noise=0.2, seed=8)
    est = RidgeProbe().fit(Z, y)
    m = fit_ridge(Z, y)
    np.testing.assert_array_equal(est.predict(Z), m.predict(Z))
    assert est.alpha_ == m.lam and est.coef_.tobytes() == m.w.tobytes()
    assert clone(est).get_params() == est.get_params()


# -- suites ----------------------------------------------------------------------------------------
def synthetic_table(n_designs=60, per=2, d=8, seed=0):
    rng = np.random.default_rng(seed)
    design = np.column_stack([rng.uniform(0.05, 0.25, n_designs), rng.uniform(0.0, 0.08, n_designs)])
    mix = rng.normal(size=(2, d))
    rows = []
    for k in range(n_designs):
        zc = (design[k] - [0.15, 0.04]) / [0.06, 0.024] @ mix + 0.05 * rng.normal(size=d)
        for j in range(per):
            a = rng.uniform(-0.1, 0.3)
            cl = 6.5 * (a + 2 * design[k, 1])
            zp = zc + cl * np.linspace(-1, 1, d) + 0.02 * rng.normal(size=d)
            split = 0 if k < int(0.8 * n_designs) else (1 if k < int(0.9 * n_designs) else 2)
            rows.append((k * per + j, k, split, zc, zp, design[k], (a, 0.0), cl, 0.02 * design[k, 0] + 0.05 * cl**2))
    cols = list(zip(*rows))
    return LatentTable(
        case_id=np.array(cols[0]), design_id=np.array(cols[1]), split=np.array(cols[2]), z_ctx=np.array(cols[3]),
        z_pred=np.array(cols[4]), z_tgt=np.array(cols[4]), design=np.array(cols[5]),
        conditions=np.array(cols[6]), cl=np.array(cols[7]), cd=np.array(cols[8]),
    )


def test_suites_report_every_family():
    suites, rows = fit_suites(synthetic_table())
    assert set(suites) == {"context->design", "predicted->coeffs", "predicted->alpha", "context->alpha"}
    assert {(r["family"], r["target"]) for r in rows} >= {("context->design", "thickness"),
                                                          ("predicted->coeffs", "cl")}
    s = suites["predicted->coeffs"]
    assert s.models["cl"].mu.tobytes() == s.models["cd"].mu.tobytes()
    assert s.heldout_r2["cl"] > 0.95
    assert suites["context->design"].reliable() == ["thickness", "camber"]
    assert suites["context->alpha"].heldout_r2["alpha"] < 0.2


def test_heldout_rows_never_used_for_fitting():
    t = synthetic_table(seed=3)
    suites, _ = fit_suites(t)
    held = t.mask("val", "test")
    t2 = LatentTable(**t.arrays())
    t2.z_ctx = t.z_ctx.copy()
    t2.z_ctx[held] += 100.0
    t2.z_pred = t.z_pred.copy()
    t2.z_pred[held] *= -3.0
    suites2, _ = fit_suites(t2)
    for fam in suites:
        for k, m in suites[fam].models.items():
            assert m.w.tobytes() == suites2[fam].models[k].w.tobytes()


def test_missing_column_reported():
    t = synthetic_table()
    del_t = type("T", (), {k: v for k, v in t.arrays().items() if k != "cd"})()
    with pytest.raises(KeyError):
        fit_suites(del_t)


def test_probe_model_is_frozen(model):
    assert isinstance(model, ProbeModel)
    with pytest.raises(Exception):
        model.b = 0.0
