import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aerojepa.errors import DimensionError
from aerojepa.losses import (
    LossWeights, latent_loss, recon_loss, sigreg_loss, sigreg_null_threshold, sigreg_statistic, total_loss,
)
from aerojepa.numerics import Tensor, check_gradients


def _loop_mse(a, b):
    acc, n = 0.0, 0
    for x, y in zip(a.ravel().tolist(), b.ravel().tolist()):
        acc += (x - y) ** 2
        n += 1
    return acc / n


# -- latent and reconstruction -------------------------------------------------------------------
def test_latent_loss_examples():
    z = np.random.default_rng(0).normal(size=(3, 4, 5))
    assert float(latent_loss(z, z).data) == 0.0
    assert float(latent_loss(z + 1.0, z).data) == pytest.approx(1.0, abs=1e-15)


def test_latent_loss_matches_loop_oracle():
    rng = np.random.default_rng(1)
    a, b = rng.normal(size=(4, 32, 16)), rng.normal(size=(4, 32, 16))
    assert abs(float(latent_loss(a, b).data) - _loop_mse(a, b)) <= 1e-12


def test_recon_loss_examples_and_oracle():
    rng = np.random.default_rng(2)
    t = rng.normal(size=(2, 50, 1))
    assert float(recon_loss(t, t).data) == 0.0
    assert float(recon_loss(t + 0.3, t).data) == pytest.approx(0.09, abs=1e-15)
    p = rng.normal(size=t.shape)
    assert abs(float(recon_loss(p, t).data) - _loop_mse(p, t)) <= 1e-12


def test_shape_mismatch_rejected():
    with pytest.raises(DimensionError):
        latent_loss(np.zeros((2, 3)), np.zeros((3, 2)))
    with pytest.raises(DimensionError):
        recon_loss(np.zeros((5, 1)), np.zeros((4, 1)))


# -- SIGReg ----------------------------------------------------------------------------------------
@pytest.fixture(scope="module")
def threshold_16():
    return sigreg_null_threshold(10_000, 16, n_projections=64, trials=100, seed=11)


def test_gaussian_sample_below_null_threshold(threshold_16):
    z = np.random.default_rng(123).standard_normal((10_000, 16))
    assert sigreg_statistic(z, 64, seed=5) < threshold_16


def test_collapsed_batch_far_above_threshold(threshold_16):
    z = np.tile(np.random.default_rng(4).normal(size=16), (10_000, 1))
    assert sigreg_statistic(z, 64, seed=5) >= 10 * threshold_16


def test_scaled_sample_scores_worse():
    z = np.random.default_rng(5).standard_normal((2000, 8))
    assert sigreg_statistic(3 * z, 64, seed=1) > sigreg_statistic(z, 64, seed=1)


def test_sigreg_decreases_along_collapse_to_gaussian_path():
    steps = np.linspace(0.0, 1.0, 21)
    curves = []
    for seed in range(10):
        rng = np.random.default_rng(seed)
        g = rng.standard_normal((256, 16))
        c = np.tile(rng.normal(size=16), (256, 1))
        curves.append([sigreg_statistic((1 - s) * c + s * g, 64, seed=seed) for s in steps])
    mean = np.mean(curves, axis=0)
    assert np.sum(np.diff(mean) < 0) >= 18


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 10_000))
def test_sigreg_permutation_invariant(seed):
    rng = np.random.default_rng(seed)
    z = rng.normal(size=(20, 6))
    perm = rng.permutation(20)
    a = sigreg_statistic(z, 16, seed=seed)
    b = sigreg_statistic(z[perm], 16, seed=seed)
    assert a == pytest.approx(b, rel=1e-12, abs=1e-14)


def test_sigreg_token_input_flattens():
    z = np.random.default_rng(6).normal(size=(4, 8, 5))
    a = float(sigreg_loss(z, 8, seed=0).data)
    b = float(sigreg_loss(z.reshape(32, 5), 8, seed=0).data)
    assert a == b


def test_sigreg_needs_two_samples():
    with pytest.raises(ValueError):
        sigreg_loss(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        sigreg_loss(np.zeros((3, 4)), n_projections=0)


def test_sigreg_gradient():
    z = Tensor(np.random.default_rng(7).normal(size=(6, 4)), requires_grad=True)
    errs = check_gradients(lambda: sigreg_loss(z, 5, seed=3), {"z": z})
    assert errs["z"] < 1e-6


def test_mse_gradients():
    rng = np.random.default_rng(8)
    a = Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True)
    b = rng.normal(size=(2, 3, 4))
    errs = check_gradients(lambda: latent_loss(a, b) + recon_loss(a, b), {"a": a})
    assert errs["a"] < 1e-8


# -- combination -----------------------------------------------------------------------------------
def test_default_weights():
    w = LossWeights()
    assert (w.lambda_lat, w.lambda_rec, w.lambda_sig, w.workflow) == (1.0, 1.0, 0.01, "coupled")


def test_coupled_arithmetic():
    assert total_loss({"lat": 2.0, "rec": 3.0, "sig": 100.0}) == pytest.approx(6.0)


def test_decoupled_ignores_reconstruction():
    w = LossWeights(workflow="decoupled")
    assert total_loss({"lat": 2.0, "sig": 100.0}, w) == pytest.approx(3.0)
    assert total_loss({"lat": 2.0, "rec": 1e9, "sig": 100.0}, w) == pytest.approx(3.0)


def test_missing_part_rejected():
    with pytest.raises(ValueError):
        total_loss({"lat": 1.0, "sig": 1.0})
    with pytest.raises(ValueError):
        LossWeights(lambda_sig=-1.0)
    with pytest.raises(ValueError):
        LossWeights(workflow="joint")
