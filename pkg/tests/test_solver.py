import logging
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from cartoondiff.diffusivity import BoundedStep, Linear, PeronaMalik, Proposed, RegularizedPower
from cartoondiff.errors import ConvergenceError, DominanceError, StabilityError
from cartoondiff.grid import ImageVolume, mean_grey
from cartoondiff.operators import TridiagonalSystem, assemble_axis_operator, half_point_diffusivities
from cartoondiff.solver import (
    Auto,
    FilterConfig,
    aos_step,
    explicit_limit,
    explicit_step,
    filter_run,
    newton_diagnostic,
    picard_iterate,
    semi_implicit_step_1d,
    thomas_solve,
)
from cartoondiff.stopping import settling_time
from oracles import dense_aos, random_tridiagonal
from synthetic import step_line

CATALOG = [Linear(), Proposed(0.01, 2.5), Proposed(0.002, 12), PeronaMalik(0.1), RegularizedPower(0.3, 2)]


def system_of(line, h, k, spec):
    return assemble_axis_operator(half_point_diffusivities(line, h, spec), h).system(k)


# --- Thomas ---------------------------------------------------------------------------

def test_thomas_identity():
    n = 6
    rhs = np.arange(n, dtype=float)
    sys = TridiagonalSystem(np.zeros(n - 1), np.ones(n), np.zeros(n - 1))
    assert np.array_equal(thomas_solve(sys, rhs), rhs)


def test_thomas_two_by_two():
    k = 0.5
    sys = TridiagonalSystem(np.array([-k]), np.array([1 + k, 1 + k]), np.array([-k]))
    assert thomas_solve(sys, [0.0, 1.0]) == pytest.approx([0.25, 0.75], abs=1e-15)


def test_thomas_single_unknown():
    sys = TridiagonalSystem(np.zeros(0), np.array([4.0]), np.zeros(0))
    assert thomas_solve(sys, [2.0]) == pytest.approx([0.5])


def test_thomas_random_vs_dense():
    rng = np.random.default_rng(0)
    for _ in range(200):
        n = int(rng.integers(1, 201))
        lo, d, up = random_tridiagonal(rng, n)
        sys = TridiagonalSystem(lo, d, up)
        rhs = rng.normal(size=n)
        ref = np.linalg.solve(sys.to_dense(), rhs)
        x = thomas_solve(sys, rhs)
        assert np.linalg.norm(x - ref) <= 1e-10 * max(np.linalg.norm(ref), 1e-300)
        assert np.linalg.norm(sys.matvec(x) - rhs) <= 1e-10 * np.linalg.norm(rhs)


def test_thomas_mmatrix_path_agrees_with_plain():
    rng = np.random.default_rng(1)
    for kappa in (1e-3, 1.0, 1e3):
        line = rng.random(50)
        sys = system_of(line, 1.0, kappa, Proposed(0.01, 3))
        plain = TridiagonalSystem(sys.lower, sys.diag, sys.upper, kappa)
        rhs = rng.random(50)
        assert np.allclose(thomas_solve(sys, rhs), thomas_solve(plain, rhs), rtol=1e-12, atol=1e-14)


def test_thomas_batched_matches_single():
    rng = np.random.default_rng(2)
    lines = rng.random((3, 4, 7))
    sys = system_of(lines, 1.0, 50.0, Proposed(0.02, 2))
    x = thomas_solve(sys, lines)
    one = system_of(lines[1, 2], 1.0, 50.0, Proposed(0.02, 2))
    assert np.array_equal(x[1, 2], thomas_solve(one, lines[1, 2]))


def test_thomas_dominance_violation():
    sys = TridiagonalSystem(np.array([2.0]), np.array([1.0, 1.0]), np.array([2.0]))
    with pytest.raises(DominanceError):
        thomas_solve(sys, [1.0, 1.0])


def test_thomas_zero_diagonal():
    sys = TridiagonalSystem(np.zeros(1), np.array([0.0, 1.0]), np.zeros(1))
    with pytest.raises(DominanceError):
        thomas_solve(sys, [1.0, 1.0])


def test_thomas_rhs_length():
    with pytest.raises(ValueError):
        thomas_solve(TridiagonalSystem(np.zeros(1), np.ones(2), np.zeros(1)), [1.0, 2.0, 3.0])


# --- semi-implicit and AOS steps ------------------------------------------------------------

def test_semi_implicit_examples():
    assert semi_implicit_step_1d([0.0, 1.0], 1.0, 0.5, Linear()) == pytest.approx([0.25, 0.75], abs=1e-15)
    flat = np.full(9, 0.4)
    assert np.allclose(semi_implicit_step_1d(flat, 1.0, 1e4, Proposed(0.01, 3)), flat, rtol=0, atol=1e-15)


def test_semi_implicit_small_k_is_linear_in_k():
    rng = np.random.default_rng(3)
    line = rng.random(20)
    spec = Proposed(0.02, 2.0)
    d1 = np.linalg.norm(semi_implicit_step_1d(line, 1.0, 1e-4, spec) - line)
    d2 = np.linalg.norm(semi_implicit_step_1d(line, 1.0, 2e-4, spec) - line)
    assert d2 / d1 == pytest.approx(2.0, rel=1e-3)


def test_aos_one_axis_equals_semi_implicit():
    rng = np.random.default_rng(4)
    line = rng.random(30)
    spec = Proposed(0.02, 3)
    cfg = FilterConfig(k=7.0, steps=1, diffusivity=spec)
    a = aos_step(ImageVolume(line, spacing=(0.7,)), cfg).data
    b = semi_implicit_step_1d(line, 0.7, 7.0, spec)
    assert np.max(np.abs(a - b)) <= 1e-12


def test_aos_skips_singleton_axes():
    rng = np.random.default_rng(5)
    line = rng.random(12)
    spec = Proposed(0.05, 2)
    cfg = FilterConfig(k=3.0, steps=1, diffusivity=spec)
    col = aos_step(ImageVolume(line[None, :, None]), cfg).data.ravel()
    assert np.max(np.abs(col - semi_implicit_step_1d(line, 1.0, 3.0, spec))) <= 1e-12
    one = ImageVolume(np.array([[0.3]]))
    assert aos_step(one, cfg).data[0, 0] == 0.3


def test_aos_constant_volume():
    v = ImageVolume(np.full((4, 5, 3), 0.7))
    out = aos_step(v, FilterConfig(k=1e5, steps=1, diffusivity=Proposed(0.01, 4)))
    assert np.allclose(out.data, 0.7, rtol=0, atol=1e-15)


def test_aos_4x4_linear_dense():
    rng = np.random.default_rng(6)
    u = rng.random((4, 4))
    out = aos_step(ImageVolume(u), FilterConfig(k=0.1, steps=1, diffusivity=Linear())).data
    ref = dense_aos(u, (1.0, 1.0), 0.1, lambda r: 1.0)
    assert np.max(np.abs(out - ref)) <= 1e-12


@pytest.mark.parametrize("spec", CATALOG)
def test_aos_dense_oracle_volumes(spec):
    rng = np.random.default_rng(7)
    for _ in range(8):
        dims = tuple(int(x) for x in rng.integers(1, [7, 7, 5]))
        spacing = tuple(float(x) for x in rng.uniform(0.5, 2.0, 3))
        k = float(rng.choice([0.1, 10.0, 1e3]))
        u = rng.random(dims)
        out = aos_step(ImageVolume(u, spacing), FilterConfig(k=k, steps=1, diffusivity=spec)).data
        ref = dense_aos(u, spacing, k, lambda r: float(spec.g(r)))
        assert np.max(np.abs(out - ref)) <= 1e-10


volumes = hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, min_side=1, max_side=8),
                     elements=st.floats(0.0, 1.0))


@settings(max_examples=80, deadline=None)
@given(volumes, st.sampled_from([1.0, 200.0, 8000.0, 1e6]), st.sampled_from(CATALOG))
def test_step_invariants(u, k, spec):
    v = ImageVolume(u)
    out = aos_step(v, FilterConfig(k=k, steps=1, diffusivity=spec))
    assert abs(mean_grey(out) - mean_grey(v)) <= 1e-10
    assert out.data.min() >= u.min() - 1e-10 and out.data.max() <= u.max() + 1e-10
    assert math.fsum(np.abs(out.flat)) <= math.fsum(np.abs(v.flat)) + 1e-12
    mu = mean_grey(v)
    assert np.linalg.norm(out.flat - mu) <= np.linalg.norm(v.flat - mu) + 1e-12


# --- Picard ---------------------------------------------------------------------------------

def test_picard_single_solve_is_semi_implicit():
    rng = np.random.default_rng(8)
    line = rng.random(25)
    spec = Proposed(0.01, 3)
    res = picard_iterate(line, FilterConfig(k=40.0, steps=1, diffusivity=spec), max_iter=1)
    assert np.array_equal(res.u, semi_implicit_step_1d(line, 1.0, 40.0, spec))
    assert res.iterations == 1 and res.converged


def test_picard_constant_is_fixed_point():
    res = picard_iterate(np.full(10, 0.2), FilterConfig(k=100.0, steps=1, diffusivity=Proposed(0.01, 2)),
                         max_iter=5)
    assert res.converged and res.iterations == 1 and res.residual <= 1e-15


def test_picard_l1_stability():
    rng = np.random.default_rng(9)
    for _ in range(20):
        line = rng.random(int(rng.integers(2, 40)))
        res = picard_iterate(line, FilterConfig(k=1e3, steps=1, diffusivity=Proposed(0.01, 3)), max_iter=10)
        assert max(res.l1_norms) <= math.fsum(np.abs(line)) + 1e-12


def test_picard_volume_and_convergence():
    rng = np.random.default_rng(10)
    v = ImageVolume(rng.random((6, 5)))
    cfg = FilterConfig(k=0.05, steps=1, diffusivity=Proposed(0.05, 2), picard_depth=50, picard_tol=1e-12)
    res = picard_iterate(v, cfg)
    assert isinstance(res.u, ImageVolume)
    assert res.converged and res.residual <= 1e-12


def test_picard_strict_non_convergence():
    line = step_line(32, noise=0.05)
    cfg = FilterConfig(k=1e4, steps=1, diffusivity=Proposed(0.005, 6), picard_tol=1e-14)
    res = picard_iterate(line, cfg, max_iter=2)
    assert not res.converged and res.residual > 0
    with pytest.raises(ConvergenceError) as info:
        picard_iterate(line, cfg, max_iter=2, strict=True)
    assert info.value.residual == res.residual


def test_picard_rejects_zero_iterations():
    with pytest.raises(ValueError):
        picard_iterate(np.zeros(3), FilterConfig(k=1.0), max_iter=0)


# --- explicit oracle ---------------------------------------------------------------------------

def test_explicit_examples():
    cfg = FilterConfig(k=0.25, steps=1, diffusivity=Linear())
    assert explicit_step(ImageVolume(np.array([0.0, 1.0])), cfg).data == pytest.approx([0.25, 0.75])
    flat = ImageVolume(np.full((3, 3), 0.5))
    assert np.array_equal(explicit_step(flat, cfg).data, flat.data)


def test_explicit_limit_and_rejection():
    v = ImageVolume(np.random.default_rng(0).random((5, 5)))
    assert explicit_limit(v, Linear()) == pytest.approx(0.25)
    with pytest.raises(StabilityError):
        explicit_step(v, FilterConfig(k=0.3, steps=1, diffusivity=Linear()))


def test_explicit_vs_semi_implicit_second_order():
    rng = np.random.default_rng(12)
    x = np.linspace(0, 1, 24)
    u = 0.5 + 0.3 * np.outer(np.sin(3 * x), np.cos(2 * x)) + 0.01 * rng.random((24, 24))
    v = ImageVolume(u)
    spec = Proposed(0.05, 2.5)
    gaps = []
    for k in (1e-4, 5e-5):
        cfg = FilterConfig(k=k, steps=1, diffusivity=spec)
        gaps.append(np.max(np.abs(explicit_step(v, cfg).data - aos_step(v, cfg).data)))
    assert gaps[0] <= 10 * 1e-8
    assert gaps[0] / gaps[1] == pytest.approx(4.0, rel=0.05)


# --- filter runs ---------------------------------------------------------------------------------

def test_config_validation():
    for kw in ({"k": 0}, {"k": -1}, {"k": math.inf}, {"k": 1, "steps": -1}, {"k": 1, "steps": 1.5},
               {"k": 1, "picard_depth": -1}, {"k": 1, "diffusivity": BoundedStep(0.1)}):
        with pytest.raises(ValueError):
            FilterConfig(**kw)


def test_filter_zero_steps_returns_input():
    v = ImageVolume(np.random.default_rng(0).random((5, 6)))
    out, diag = filter_run(v, FilterConfig(k=200.0, steps=0, diffusivity=Proposed(0.01, 2)))
    assert np.array_equal(out.data, v.data)
    assert diag.steps == 0 and len(diag.records) == 1


def test_filter_linear_settles():
    v = ImageVolume(np.random.default_rng(1).random((16, 16)))
    out, diag = filter_run(v, FilterConfig(k=50.0, steps=Auto(), diffusivity=Linear()))
    assert diag.settling.n == diag.steps
    assert diag.records[-1].rel_dist_to_mean <= 0.02
    assert all(r.rel_dist_to_mean > 0.02 for r in diag.records[:-1])


def test_filter_diagnostics_csv_and_callback():
    v = ImageVolume(np.random.default_rng(2).random((6, 6)))
    seen = []
    out, diag = filter_run(v, FilterConfig(k=5.0, steps=3, diffusivity=Proposed(0.02, 3)),
                           callback=lambda i, cur: seen.append(i))
    lines = diag.to_csv().splitlines()
    assert lines[0] == "step,mean,min,max,rel_dist_to_mean"
    assert len(lines) == 5 and seen == [1, 2, 3]
    step, mean, lo, hi, rel = lines[-1].split(",")
    assert int(step) == 3 and float(lo) == out.data.min() and float(hi) == out.data.max()
    assert [r.step for r in diag.records] == [0, 1, 2, 3]


def test_filter_picard_path_logs_non_convergence(caplog):
    v = ImageVolume(step_line(32, noise=0.05).reshape(4, 8))
    cfg = FilterConfig(k=1e4, steps=2, diffusivity=Proposed(0.005, 6), picard_depth=1, picard_tol=1e-14)
    with caplog.at_level(logging.WARNING):
        out, diag = filter_run(v, cfg)
    assert "Picard" in caplog.text
    assert abs(mean_grey(out) - mean_grey(v)) <= 1e-10


def test_filter_depth_zero_matches_repeated_steps():
    v = ImageVolume(np.random.default_rng(3).random((7, 5)))
    cfg = FilterConfig(k=20.0, steps=4, diffusivity=Proposed(0.01, 2.5))
    cur = v
    for _ in range(4):
        cur = aos_step(cur, cfg)
    assert np.array_equal(filter_run(v, cfg)[0].data, cur.data)


def _jump_and_ranges(u):
    half = u.size // 2
    return u[half] - u[half - 1], np.ptp(u[:half]), np.ptp(u[half:])


def test_step_example_jump_beats_linear():
    v = ImageVolume(step_line(64))
    prop = filter_run(v, FilterConfig(k=200.0, steps=40, diffusivity=Proposed(0.02, 4)))[0].data
    lin = filter_run(v, FilterConfig(k=200.0, steps=40, diffusivity=Linear()))[0].data
    assert _jump_and_ranges(prop)[0] > _jump_and_ranges(lin)[0]


@pytest.mark.xfail(strict=True, reason="with gamma fixed at 0.02, p=4 and k=200 the jump collapses "
                                       "within the first steps, so the plateaus are not flat")
def test_step_example_plateaus_flat():
    v = ImageVolume(step_line(64))
    prop = filter_run(v, FilterConfig(k=200.0, steps=40, diffusivity=Proposed(0.02, 4)))[0].data
    jump, left, right = _jump_and_ranges(prop)
    assert left < 0.01 * jump and right < 0.01 * jump


@pytest.mark.parametrize("p", [6, 8, 10])
def test_step_plateaus_flat_for_larger_p(p):
    v = ImageVolume(step_line(64))
    n = settling_time(v, 200.0).n
    prop = filter_run(v, FilterConfig(k=200.0, steps=n, diffusivity=Proposed(0.02, p)))[0].data
    jump, left, right = _jump_and_ranges(prop)
    assert left < 0.01 * jump and right < 0.01 * jump


# --- Newton diagnostic ------------------------------------------------------------------------

def test_newton_flat_line_matches_picard():
    line = np.linspace(0.3, 0.35, 12)
    rep = newton_diagnostic(line, 1.0, 1e3, Proposed(0.02, 4))
    assert rep.spd and rep.min_pivot > 0
    assert np.array_equal(rep.newton.to_dense(), rep.picard.to_dense())


def test_newton_linear_always_spd():
    rng = np.random.default_rng(13)
    for k in (1.0, 1e3, 1e6):
        assert newton_diagnostic(rng.random(20), 1.0, k, Linear()).spd


def test_newton_detects_indefinite_matrix():
    # squared slope 0.1 = 5 gamma sits on the enhancing branch
    line = np.array([0.0, np.sqrt(0.1)])
    spec = Proposed(0.02, 3)
    assert newton_diagnostic(line, 1.0, 0.1, spec).spd
    rep = newton_diagnostic(line, 1.0, 10.0, spec)
    assert not rep.spd and rep.min_pivot <= 0
    eig = np.linalg.eigvalsh(rep.newton.to_dense())
    assert eig.min() < 0


def test_newton_sweep_finds_breakdown():
    line = step_line(16)
    found = False
    for p in (2, 4, 8):
        for k in (1e2, 1e4, 1e6, 1e8):
            rep = newton_diagnostic(line, 1.0, k, Proposed(0.02, p))
            assert rep.spd == bool(np.linalg.eigvalsh(rep.newton.to_dense()).min() > 0)
            found |= not rep.spd
    assert found
