import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from muse.energy import EnergyModel, ScoreBaseline
from muse.errors import SolverStalledError, StageDivergedError
from muse.gmm import GmmEnergy, GmmPrior, toy_prior
from muse.nn import Layer, MlpParams, spectral_normalize
from muse.operators import make_dense, make_dense_gaussian, make_identity, make_masked_dft
from muse.solvers import (
    MapProblem,
    MuseSchedule,
    RunTrace,
    SolveConfig,
    Stage,
    algorithm_select,
    conjugate_gradient,
    default_step_size,
    epnp_gd,
    epnp_mm,
    f_map_eval,
    grad_f_map,
    mm_update,
    muse_solve,
    pnp_ista,
    read_trace_csv,
    solve,
    surrogate_eval,
)

from oracles import central_difference


def quadratic_prior(dim=2):
    """Zero-net E1: E(x) = |x|^2 / 2, H(x) = x."""
    return EnergyModel("E1", MlpParams([Layer(np.zeros((dim, dim)), np.zeros(dim), "none")]), 1.0)


def quadratic_problem(b=(2.0, 0.0), eta=1.0, sigma=1.0):
    return MapProblem(make_identity(len(b)), np.array(b), eta**2, quadratic_prior(len(b)), sigma**2)


class ConstantEnergy:
    dim = 2

    def __init__(self, c):
        self.c = c

    def energy(self, x):
        return self.c

    def score(self, x):
        return np.zeros_like(x)


class NanEnergy(ConstantEnergy):
    def energy(self, x):
        return float("nan")


def test_f_map_quadratic_example():
    p = MapProblem(make_identity(2), np.array([3.0, 4.0]), 1.0, quadratic_prior(), 1.0)
    assert f_map_eval(p, np.array([3.0, 4.0])) == (12.5, 0.0, 12.5)


def test_f_map_constant_prior():
    p = MapProblem(make_identity(2), np.zeros(2), 1.0, ConstantEnergy(3.0), 0.25)
    assert f_map_eval(p, np.zeros(2))[0] == 12.0


def test_f_map_matches_raw_pieces(rng):
    op = make_dense_gaussian(5, 4, rng)
    prior = GmmEnergy(GmmPrior(np.full(2, 0.5), rng.standard_normal((2, 4)), np.full(2, 0.1)), 0.3)
    b, x = rng.standard_normal(5), rng.standard_normal(4)
    p = MapProblem(op, b, 0.04, prior, 0.09)
    r = op.scale * (op.matrix @ x) - b
    expected = 0.5 * (r @ r) / 0.04 + prior.energy(x) / 0.09
    assert_allclose(f_map_eval(p, x)[0], expected, rtol=1e-13)


def test_f_map_dimension_mismatch():
    with pytest.raises(ValueError):
        f_map_eval(quadratic_problem(), np.zeros(3))


def test_gradient_zero_at_quadratic_fixed_point():
    p = quadratic_problem(eta=0.5, sigma=2.0)
    x_star = 4.0 * np.array([2.0, 0.0]) / (4.0 + 0.25)
    assert np.linalg.norm(grad_f_map(p, x_star)) <= 1e-12


def test_gradient_zero_for_consistent_data(rng):
    op = make_dense_gaussian(3, 2, rng)
    x = rng.standard_normal(2)
    p = MapProblem(op, op.apply(x), 0.1, ConstantEnergy(1.0), 1.0)
    assert np.linalg.norm(grad_f_map(p, x)) <= 1e-12


def test_gradient_matches_finite_differences(rng):
    op = make_dense_gaussian(4, 2, rng)
    p = MapProblem(op, rng.standard_normal(4), 0.3, GmmEnergy(toy_prior(), 0.3), 0.09)
    f = lambda z: f_map_eval(p, z)[0]
    for _ in range(10):
        x, u = rng.uniform(-1.5, 1.5, 2), rng.standard_normal(2)
        fd = central_difference(f, x, u, h=1e-6)
        assert abs(grad_f_map(p, x) @ u - fd) <= 1e-6 * max(1.0, abs(fd))


def test_step_size_examples():
    assert default_step_size(1.0, 1.0, 1.0) == 0.5
    assert_allclose(default_step_size(1e-4, 0.0049, 1.0), 1.0 / (1e4 + 1 / 0.0049), rtol=1e-15)
    assert abs(default_step_size(1e-4, 0.0049, 1.0) / 9.8001e-5 - 1) < 1e-4
    steps = [default_step_size(1.0, 1.0, 10.0**k) for k in range(1, 7)]
    assert all(a > b for a, b in zip(steps, steps[1:]))
    with pytest.raises(ValueError):
        default_step_size(0.0, 1.0, 1.0)


@pytest.mark.parametrize("algorithm", ["gd", "mm"])
def test_quadratic_converges_to_closed_form(algorithm):
    tr = solve(quadratic_problem(), SolveConfig(algorithm=algorithm, epsilon=1e-14, max_iter=200), np.zeros(2))
    assert np.linalg.norm(tr.x - [1.0, 0.0]) <= 1e-6
    f = tr.f_values
    assert np.all(np.diff(f) <= 0)
    if algorithm == "mm":
        assert tr.iterations <= 3


def test_start_at_stationary_point():
    tr = epnp_gd(quadratic_problem(), SolveConfig(), np.array([1.0, 0.0]))
    assert tr.iterations <= 2 and tr.reason == "converged"


def test_gd_on_oracle_reaches_stationarity():
    prior = GmmEnergy(toy_prior(), 0.1)
    b = np.array([0.9, 1.05])
    p = MapProblem(make_identity(2), b, 0.01, prior, 0.01)
    tr = epnp_gd(p, SolveConfig(L=prior.curvature_bound(), epsilon=1e-15, max_iter=5000), b)
    # independent gradient: data term plus the analytic mixture score
    x = tr.x
    w = np.exp(-np.sum((x - prior.prior.means) ** 2, axis=1) / (2 * 0.02))
    w /= w.sum()
    score = (x - w @ prior.prior.means) / 0.02 * 0.01
    g = (x - b) / 0.01 + score / 0.01
    assert np.linalg.norm(g) < 1e-5


def test_mm_update_quadratic_one_step(rng):
    p = quadratic_problem()
    for _ in range(3):
        assert_allclose(mm_update(p, SolveConfig(algorithm="mm"), rng.standard_normal(2)), [1.0, 0.0], atol=1e-12)


def test_mm_update_matches_direct_solve(rng):
    op = make_dense(np.diag([3.0, 1.5]))
    prior = GmmEnergy(toy_prior(), 0.3)
    p = MapProblem(op, np.array([0.4, -0.2]), 0.05, prior, 0.09)
    x_n = rng.standard_normal(2)
    L = 2.0
    a = op.scale * np.diag([3.0, 1.5])
    m = a.T @ a / 0.05 + (L / 0.09) * np.eye(2)
    rhs = a.T @ p.b / 0.05 + (L * x_n - prior.score(x_n)) / 0.09
    assert_allclose(mm_update(p, SolveConfig(algorithm="mm", L=L), x_n), np.linalg.solve(m, rhs), atol=1e-10)


def test_cg_residual_contract(rng):
    m = rng.standard_normal((12, 12))
    m = m @ m.T + 12 * np.eye(12)
    rhs = rng.standard_normal(12)
    x, rel = conjugate_gradient(lambda v: m @ v, rhs, tol=1e-10)
    assert rel <= 1e-10
    assert np.linalg.norm(m @ x - rhs) / np.linalg.norm(rhs) <= 1e-10
    assert_allclose(x, np.linalg.solve(m, rhs), atol=1e-8)


def test_cg_stall_raises():
    m = np.diag(np.logspace(0, 8, 30))
    with pytest.raises(SolverStalledError):
        conjugate_gradient(lambda v: m @ v, np.ones(30), tol=1e-12, max_iter=3)


def test_cg_zero_rhs():
    x, rel = conjugate_gradient(lambda v: 2 * v, np.zeros(3))
    assert not x.any() and rel == 0.0


def test_surrogate_touches_and_is_tight_for_quadratics(rng):
    p = quadratic_problem()
    x_n = rng.standard_normal(2)
    assert abs(surrogate_eval(p, 1.0, x_n, x_n) - f_map_eval(p, x_n)[0]) <= 1e-12
    for _ in range(5):
        x = rng.standard_normal(2)
        assert abs(surrogate_eval(p, 1.0, x, x_n) - f_map_eval(p, x)[0]) <= 1e-12


def test_surrogate_majorizes_with_upper_bound(rng):
    prior = GmmEnergy(toy_prior(), 0.2)
    op = make_dense_gaussian(3, 2, rng)
    p = MapProblem(op, rng.standard_normal(3), 0.05, prior, 0.04)
    L = prior.curvature_bound()
    for _ in range(50):
        x_n, x = rng.uniform(-2, 2, (2, 2))
        assert surrogate_eval(p, L, x, x_n) >= f_map_eval(p, x)[0] - 1e-10


def test_mm_trace_sandwich():
    prior = GmmEnergy(toy_prior(), 0.2)
    b = np.array([0.3, 0.8])
    p = MapProblem(make_identity(2), b, 0.04, prior, 0.04)
    tr = epnp_mm(p, SolveConfig(algorithm="mm", L=prior.curvature_bound(), epsilon=1e-12, keep_iterates=True), b)
    for n in range(1, len(tr.records)):
        x_prev, x_new = tr.iterates[n - 1], tr.iterates[n]
        f_prev, f_new = f_map_eval(p, x_prev)[0], f_map_eval(p, x_new)[0]
        g_new = surrogate_eval(p, tr.records[n]["L"], x_new, x_prev)
        g_prev = surrogate_eval(p, tr.records[n]["L"], x_prev, x_prev)
        assert f_new <= g_new + 1e-10
        assert g_new <= g_prev + 1e-10
        assert abs(g_prev - f_prev) <= 1e-12 * max(1, abs(f_prev))


def test_algorithm_select_examples():
    op = make_identity(2)
    low = MapProblem(op, np.zeros(2), 0.01**2, ConstantEnergy(0), 0.07**2)
    high = MapProblem(op, np.zeros(2), 0.05**2, ConstantEnergy(0), 0.07**2)
    assert abs(1.0 * 0.01**2 / 0.07**2 - 0.0204) < 1e-4
    assert algorithm_select(low, 1.0) == "mm"
    assert abs(1.0 * 0.05**2 / 0.07**2 - 0.51) < 1e-2
    assert algorithm_select(high, 1.0) == "mm"
    p = MapProblem(op, np.zeros(2), 1.0, ConstantEnergy(0), 1.0)
    assert algorithm_select(p, 10.0) == "gd"
    assert algorithm_select(p, 10.0, threshold=20.0) == "mm"


def test_backtracking_guard_keeps_descent():
    # L far below the true curvature: raw GD steps overshoot, the guard halves them
    prior = GmmEnergy(toy_prior(), 0.1)
    b = np.array([0.5, 0.5])
    p = MapProblem(make_identity(2), b, 1.0, prior, 0.01)
    tr = epnp_gd(p, SolveConfig(L=1e-3, epsilon=1e-10, max_iter=500), b)
    assert tr.backtracks > 0
    assert np.all(np.diff(tr.f_values) <= 0)
    tr = epnp_mm(p, SolveConfig(algorithm="mm", L=1e-3, epsilon=1e-10, max_iter=500), b)
    assert tr.backtracks > 0
    assert np.all(np.diff(tr.f_values) <= 0)


def test_eta_zero_needs_explicit_weight():
    with pytest.raises(ValueError):
        MapProblem(make_identity(2), np.zeros(2), 0.0, ConstantEnergy(0), 1.0)
    p = MapProblem(make_identity(2), np.ones(2), 0.0, ConstantEnergy(0), 1.0, data_weight=1e6)
    assert f_map_eval(p, np.zeros(2))[1] == 1e6


def test_config_validation():
    with pytest.raises(ValueError):
        SolveConfig(algorithm="sgd")
    with pytest.raises(ValueError):
        SolveConfig(epsilon=0)
    with pytest.raises(ValueError):
        SolveConfig(max_iter=0)


def test_trace_csv_round_trip(tmp_path):
    tr = solve(quadratic_problem(), SolveConfig(algorithm="gd", epsilon=1e-10), np.zeros(2))
    tr.to_csv(tmp_path / "t.csv")
    header = (tmp_path / "t.csv").read_text().splitlines()[0]
    assert header == "iter,f_map,data_term,prior_term,grad_norm,elapsed_ms"
    back = read_trace_csv(tmp_path / "t.csv")
    assert_allclose(back["f_map"], tr.f_values, rtol=1e-8)
    assert_array_equal(back["iter"], np.arange(len(tr.records)))


def test_schedule_validation():
    m = quadratic_prior()
    with pytest.raises(ValueError):
        MuseSchedule([])
    with pytest.raises(ValueError):
        MuseSchedule([Stage(1, 0.1, 1e-5, m), Stage(1, 0.2, 1e-5, m)])
    s = MuseSchedule.from_sigmas([0.5, 0.1], [1e-5, 1e-5], [m, m], eta=0.01)
    assert [st.eta for st in s.stages] == [0.5, 0.01]
    s = MuseSchedule.from_sigmas([0.5, 0.1], [1e-5, 1e-5], [m, m], eta=0.3)
    assert s.stages[-1].eta == 0.1


def test_paper_schedule_is_valid():
    sigmas = [0.09, 0.07, 0.05, 0.03, 0.01, 0.005, 0.001]
    eps = [1e-5, 1e-5, 1e-4, 1e-4, 1e-4, 1e-3, 1e-3]
    s = MuseSchedule.from_sigmas(sigmas, eps, [quadratic_prior()] * 7)
    assert len(s.stages) == 7 and [st.eta for st in s.stages] == sigmas


def test_single_stage_muse_equals_direct_solve(rng):
    op = make_dense_gaussian(3, 2, rng)
    b = rng.standard_normal(3)
    prior = GmmEnergy(toy_prior(), 0.2)
    cfg = SolveConfig(algorithm="auto", L=prior.curvature_bound(), epsilon=1e-8)
    x, traces = muse_solve(MuseSchedule([Stage(0.2, 0.2, 1e-8, prior)]), op, b, cfg)
    direct = solve(MapProblem(op, b, 0.2**2, prior, 0.2**2), cfg, op.adjoint(b))
    assert_array_equal(x, direct.x)
    assert traces[0].iterations == direct.iterations


def test_muse_reports_diverged_stage():
    good, bad = quadratic_prior(), NanEnergy(0)
    s = MuseSchedule([Stage(1, 1.0, 1e-6, good), Stage(1, 0.5, 1e-6, bad)])
    with pytest.raises(StageDivergedError) as err:
        muse_solve(s, make_identity(2), np.ones(2), SolveConfig())
    assert err.value.stage == 1


def zero_score_c(dim=2):
    return ScoreBaseline("score-C", MlpParams([Layer(np.zeros((dim, dim)), np.zeros(dim), "none")]), 1.0)


def test_pnp_identity_denoiser_returns_data():
    b = np.array([0.5, -1.5])
    tr = pnp_ista(make_identity(2), b, 0.1, zero_score_c(), iters=20)
    assert_allclose(tr.x, b, atol=1e-12)


def test_pnp_default_iterations():
    tr = pnp_ista(make_identity(2), np.ones(2), 0.1, zero_score_c())
    assert tr.iterations == 500


def test_pnp_fixed_point():
    rng = np.random.default_rng(0)
    layers = [Layer(rng.standard_normal((8, 2)), np.zeros(8)), Layer(rng.standard_normal((2, 8)), np.zeros(2), "none")]
    net = spectral_normalize(MlpParams(layers), 500, rng)
    net = net.with_arrays([a * (0.5 if i == 2 else 1.0) for i, a in enumerate(net.arrays())])
    den = ScoreBaseline("score-C", net, 0.1)
    op, b, eta2, gamma = make_identity(2), np.array([0.7, -0.2]), 0.01, 0.005
    tr = pnp_ista(op, b, eta2, den, iters=2000, gamma=gamma, tol=1e-14)
    x = tr.x
    z = x - gamma * op.adjoint(op.apply(x) - b) / eta2
    assert np.linalg.norm(x - (z - den.score(z))) <= 1e-6
    assert "data_residual" in tr.records[-1] and "f_map" not in tr.records[-1]


def test_pnp_rejects_non_contractive():
    net = MlpParams([Layer(2 * np.eye(2), np.zeros(2), "none")])
    with pytest.raises(ValueError):
        pnp_ista(make_identity(2), np.ones(2), 0.1, ScoreBaseline("score-C", net, 1.0))
    with pytest.raises(ValueError):
        pnp_ista(make_identity(2), np.ones(2), 0.1, ScoreBaseline("score-U", net, 1.0))


def test_run_trace_iteration_count():
    tr = RunTrace()
    assert tr.iterations == 0
    tr.log(f_map=1.0)
    tr.log(f_map=0.5)
    assert tr.iterations == 1 and list(tr.f_values) == [1.0, 0.5]


def test_masked_dft_solve_descends():
    from muse.toy import multimodal_mri_instance

    inst = multimodal_mri_instance(0)
    prior = GmmEnergy(inst.prior, 0.05)
    p = MapProblem(inst.op, inst.b, inst.eta**2, prior, 0.05**2)
    for alg in ("gd", "mm"):
        tr = solve(p, SolveConfig(algorithm=alg, L=prior.curvature_bound(), max_iter=300), inst.op.adjoint(inst.b))
        f = tr.f_values
        assert np.all(f[1:] <= f[:-1] + 1e-12 * np.abs(f[:-1]))
        assert tr.backtracks == 0


def test_make_masked_dft_problem_dims():
    op = make_masked_dft((8, 1), np.array([1, 0, 1, 0, 1, 0, 1, 0], dtype=bool))
    with pytest.raises(ValueError):
        MapProblem(op, np.zeros(3), 1.0, ConstantEnergy(0), 1.0)
