import numpy as np
import pytest

from hermicop.copulas import ClassicalCopula, joint_density_normal_marginals, spearman_to_theta
from hermicop.quadrature import GridDensity, default_grid
from hermicop.smile import SmilePillars, build_curve


@pytest.fixture(scope="session")
def grid200():
    return default_grid()


@pytest.fixture(scope="session")
def classical_targets(grid200):
    """Joint densities with N(0,1) marginals at Spearman 0.6, one per family."""
    x1, x2 = grid200.mesh()
    out = {}
    for fam in ("clayton", "frank", "gumbel", "plackett"):
        th = spearman_to_theta(fam, 0.6)
        dens = joint_density_normal_marginals(ClassicalCopula(fam, th), x1, x2)
        out[fam] = GridDensity(grid200, dens, np.ones(grid200.shape), "absolute", {"theta": th})
    return out


@pytest.fixture(scope="session")
def flat_curves():
    cx = build_curve(SmilePillars.flat(0.10, 1.0, F=1.1, pair="EURUSD", tenor="1Y"))
    cy = build_curve(SmilePillars.flat(0.12, 1.0, F=0.009, pair="JPYUSD", tenor="1Y"))
    return cx, cy


@pytest.fixture(scope="session")
def smile_curves():
    """Modest, arbitrage-free straight smiles shared by calibration tests."""
    cx = build_curve(SmilePillars(1.0, 1.16, 0.995, 0.075, 0.077, 0.080, 0.080, 0.086,
                                  D_for=0.99, pair="EURUSD", tenor="1Y"))
    cy = build_curve(SmilePillars(1.0, 0.0088, 0.995, 0.085, 0.081, 0.092, 0.080, 0.101,
                                  D_for=0.9995, pair="JPYUSD", tenor="1Y"))
    return cx, cy


@pytest.fixture(scope="session")
def clayton_case_a(classical_targets):
    """Clayton case (a) n_max=4 expansion, raw and corrected."""
    from hermicop.copula_build import correct_expansion
    from hermicop.expansion import estimate_coefficients

    model = estimate_coefficients(classical_targets["clayton"], 0.0, 4, basis="cholesky")
    raw, corrected, report = correct_expansion(model, classical_targets["clayton"].grid)
    return model, raw, corrected, report
