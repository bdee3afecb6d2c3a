import numpy as np
import pytest

from colloidsde.free_energy import (PotentialField, boundary_loop_residue,
                                    divergence_drift_ratio, divergence_sigma2,
                                    effective_potential)
from colloidsde.nn_esde import evaluation_grid


class LinearModel:
    """Drift -theta x with constant diagonal noise sigma."""

    def __init__(self, theta, sigma, scale_with_p=False):
        self.theta = theta
        self.sigma = sigma
        self.scale_with_p = scale_with_p

    def evaluate_batch(self, x, p):
        x = np.atleast_2d(np.asarray(x, float))
        factor = p if self.scale_with_p else 1.0
        nu = -self.theta * factor * x
        L = np.zeros((len(x), 2, 2))
        L[:, 0, 0] = L[:, 1, 1] = self.sigma
        return nu, L

    def drift_and_noise(self, x, p=0.0):
        nu, L = self.evaluate_batch(x, p)
        return nu[0], L[0]


class GradientFormModel:
    """Drift -(sigma^2/2) grad V for V = a x^2 + b y^2 + c x y."""

    def __init__(self, a, b, c, sigma):
        self.a, self.b, self.c = a, b, c
        self.sigma = sigma

    def potential(self, x):
        return (self.a * x[:, 0] ** 2 + self.b * x[:, 1] ** 2
                + self.c * x[:, 0] * x[:, 1])

    def evaluate_batch(self, x, p):
        x = np.atleast_2d(np.asarray(x, float))
        grad = np.column_stack([
            2 * self.a * x[:, 0] + self.c * x[:, 1],
            2 * self.b * x[:, 1] + self.c * x[:, 0],
        ])
        nu = -(self.sigma**2 / 2.0) * grad
        L = np.zeros((len(x), 2, 2))
        L[:, 0, 0] = L[:, 1, 1] = self.sigma
        return nu, L


class StateDependentNoise:
    """Anisotropic covariance varying linearly in space (for divergence)."""

    def evaluate_batch(self, x, p):
        x = np.atleast_2d(np.asarray(x, float))
        nu = np.zeros_like(x)
        L = np.zeros((len(x), 2, 2))
        L[:, 0, 0] = 1.0 + 0.3 * x[:, 0]
        L[:, 1, 0] = 0.2 * x[:, 1]
        L[:, 1, 1] = 0.5
        return nu, L


def grid20(extent=1.0):
    pts = np.linspace(-extent, extent, 20)
    xx, yy = np.meshgrid(pts, pts, indexing="ij")
    return np.column_stack([xx.ravel(), yy.ravel()])


# ---------------------------------------------------------------------------
# potentials
# ---------------------------------------------------------------------------

def test_zero_drift_constant_noise_gives_flat_potential():
    model = LinearModel(theta=0.0, sigma=0.7)
    field = effective_potential(model, grid20())
    assert np.allclose(field.values, 0.0, atol=1e-12)
    assert field.values[field.reference] == 0.0


def test_ou_landscape_matches_closed_form():
    theta, sigma = 1.3, 0.6
    model = LinearModel(theta, sigma)
    nodes = grid20()
    field = effective_potential(model, nodes)
    # closed-form line-integral oracle: G/kT = theta |x|^2 / sigma^2
    expected = theta * (field.nodes**2).sum(axis=1) / sigma**2
    ok = expected > 1e-12
    rel = np.abs(field.values[ok] - expected[ok]) / expected[ok]
    assert rel.max() <= 1e-3


def test_potential_linear_in_drift():
    nodes = grid20()
    base = effective_potential(LinearModel(1.0, 0.5), nodes)
    doubled = effective_potential(LinearModel(2.0, 0.5), nodes)
    assert np.allclose(doubled.values, 2.0 * base.values, atol=1e-10)


def test_substep_refinement_converged():
    model = LinearModel(1.0, 0.5)
    nodes = grid20()
    f200 = effective_potential(model, nodes, n_substeps=200)
    f400 = effective_potential(model, nodes, n_substeps=400)
    scale = np.abs(f200.values).max()
    assert np.abs(f400.values - f200.values).max() / scale <= 1e-4


def test_gradient_form_recovery_certifies_path_independence():
    sigma = 0.8
    model = GradientFormModel(a=1.1, b=0.7, c=0.4, sigma=sigma)
    nodes = grid20()
    field = effective_potential(model, nodes)
    expected = model.potential(field.nodes)
    scale = np.abs(expected).max()
    assert np.abs(field.values - expected).max() / scale <= 1e-2
    # conservative integrand: the boundary loop residue vanishes
    residue = boundary_loop_residue(model, nodes)
    assert abs(residue) <= 1e-10 * max(scale, 1.0)


def test_reference_node_is_origin_and_zero():
    model = LinearModel(1.0, 0.5)
    field = effective_potential(model, grid20())
    assert np.allclose(field.nodes[field.reference], 0.0)
    assert field.values[field.reference] == 0.0


def test_requires_origin_in_bounding_box():
    model = LinearModel(1.0, 0.5)
    nodes = grid20() + 5.0
    with pytest.raises(ValueError, match="origin"):
        effective_potential(model, nodes)


def test_potential_field_validation():
    with pytest.raises(ValueError):
        PotentialField(np.zeros((2, 2)), np.array([0.1, 0.0]), 0,
                       np.array([True, True]))


# ---------------------------------------------------------------------------
# covariance divergence
# ---------------------------------------------------------------------------

def test_divergence_constant_noise_is_zero():
    model = LinearModel(1.0, 0.5)
    div = divergence_sigma2(model, np.array([0.3, -0.4]), 0.0, step=1e-4)
    assert np.allclose(div, 0.0, atol=1e-10)


def test_divergence_matches_analytic_for_linear_noise():
    model = StateDependentNoise()
    x = np.array([0.4, -0.3])
    # analytic covariance: c11 = (1 + 0.3 x)^2, c12 = c21 = (1 + 0.3 x)(0.2 y),
    # c22 = (0.2 y)^2 + 0.25
    # div_1 = d c11/dx + d c12/dy = 2(1+0.3x)(0.3) + (1+0.3x)(0.2)
    # div_2 = d c21/dx + d c22/dy = 0.3 * 0.2 y + 2(0.2 y)(0.2)
    a = 1 + 0.3 * x[0]
    expected = np.array([
        2 * a * 0.3 + a * 0.2,
        0.3 * (0.2 * x[1]) + 2 * (0.2 * x[1]) * 0.2,
    ])
    div = divergence_sigma2(model, x, 0.0, step=1e-5)
    assert np.allclose(div, expected, rtol=1e-6, atol=1e-8)


def test_divergence_ratio_reported_small_for_constant_noise():
    model = LinearModel(1.0, 0.5)
    nodes = grid20()
    ratio = divergence_drift_ratio(model, nodes)
    assert ratio == pytest.approx(0.0, abs=1e-8)
    noisy = StateDependentNoise()
    assert not np.isfinite(divergence_drift_ratio(noisy, nodes)) or \
        divergence_drift_ratio(noisy, nodes) >= 0.0


def test_evaluation_grid_covers_bounding_box():
    pts = np.array([[-2.0, 1.0], [3.0, 4.0], [0.0, 0.0]])
    grid = evaluation_grid(pts, 20)
    assert grid.shape == (400, 2)
    assert grid[:, 0].min() == -2.0 and grid[:, 0].max() == 3.0
    assert grid[:, 1].min() == 0.0 and grid[:, 1].max() == 4.0
