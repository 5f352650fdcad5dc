import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dissolution_uq.dns import (
    EPS_FLOOR,
    Core,
    FieldGrid,
    Geometry,
    ModelConstants,
    emit_synthetic_uct,
    make_geometry_1d,
    make_geometry_2d,
    read_field_binary,
    solve_dissolution,
    upscaled_porosity,
    write_field_binary,
    write_field_csv,
)
from dissolution_uq.errors import GeometryError

ONE_D = ModelConstants(21.3912, 2.4, beta=1.0)


# ---------------------------------------------------------------- geometry


def test_single_core_plateau():
    g = make_geometry_1d([Core(1.0, 2.0, 0.05)], nx=301)
    x = g.axes[0]
    inside = (x >= 1.0) & (x <= 2.0)
    assert np.all(g.eps0[inside] == 0.05)
    assert np.all(g.eps0[~inside] == 1.0)


def test_no_cores_is_all_fluid():
    g = make_geometry_1d([], nx=50)
    assert np.all(g.eps0 == 1.0)


def test_two_core_porosity_matches_area_fraction():
    # h = 0.1; core edges sit halfway between nodes so control volumes tile them exactly
    cores = [Core(0.45, 1.45, 0.05), Core(1.85, 2.65, 0.05)]
    g = make_geometry_1d(cores, extent=(0.0, 3.0), nx=31)
    solid_length = 1.0 + 0.8
    analytic = (3.0 - solid_length * (1 - 0.05)) / 3.0
    assert abs(upscaled_porosity(g) - analytic) < 1e-12


def test_overlapping_cores_rejected():
    with pytest.raises(GeometryError):
        make_geometry_1d([Core(0.5, 1.5), Core(1.2, 2.0)])
    with pytest.raises(GeometryError):
        make_geometry_1d([Core(0.5, 1.5), Core(1.6, 2.0)], ramp=0.2)


def test_core_porosity_below_floor_rejected():
    with pytest.raises(GeometryError):
        make_geometry_1d([Core(0.5, 1.5, 0.01)])


def test_ramp_is_monotone_between_plateaus():
    g = make_geometry_1d([Core(1.0, 2.0, 0.05)], nx=601, ramp=0.2)
    x, e = g.axes[0], g.eps0
    left = (x >= 0.8) & (x <= 1.0)
    assert np.all(np.diff(e[left]) <= 0)
    assert e.min() == pytest.approx(0.05) and e.max() == 1.0


def test_disk_area_fraction():
    g = make_geometry_2d(radius=0.5, shape=(400, 400), apertures=(), eps_inner=EPS_FLOOR)
    solid = (g.eps0 < 1).mean()
    assert solid == pytest.approx(np.pi * 0.25 / 4, rel=0.02)


def test_zero_radius_is_all_fluid():
    g = make_geometry_2d(radius=0.0, inner_radius=0.0, shape=(30, 30))
    assert np.all(g.eps0 == 1.0)


def test_apertures_remove_solid():
    full = make_geometry_2d(shape=(120, 120), apertures=())
    cut = make_geometry_2d(shape=(120, 120))
    assert (cut.eps0 < 1).sum() < (full.eps0 < 1).sum()


def test_two_porosity_levels():
    g = make_geometry_2d(shape=(80, 80), eps_inner=0.2, inner_radius=0.25)
    assert set(np.unique(g.eps0)) == {0.05, 0.2, 1.0}


def test_geometry_validation():
    x = np.linspace(0, 1, 5)
    with pytest.raises(GeometryError):
        Geometry((x,), 1.0, 10, np.full(4, 0.5))
    with pytest.raises(GeometryError):
        Geometry((x,), 1.0, 1, np.full(5, 0.5))
    with pytest.raises(GeometryError):
        Geometry((x,), 1.0, 10, np.full(5, 0.01))


# ---------------------------------------------------------------- solver


@pytest.fixture(scope="module")
def shipped_1d():
    return solve_dissolution(make_geometry_1d(), ONE_D)


def test_no_reaction_keeps_porosity_and_relaxes_concentration():
    g = make_geometry_1d([Core(1.0, 2.0, 0.2)], nx=61, nt=60, t_final=6.0)
    eps, conc = solve_dissolution(g, ModelConstants(0.0, 2.4))
    assert np.all(eps.values == g.eps0)
    # steady state of div(eps^2 grad(C/eps)) = 0 with C = 1 = eps on the boundary is C = eps
    np.testing.assert_allclose(conc.values[-1], g.eps0, atol=1e-6)


def test_all_fluid_stays_fluid():
    g = make_geometry_1d([], nx=40, nt=30, t_final=3.0)
    eps, conc = solve_dissolution(g, ONE_D)
    assert np.all(eps.values == 1.0)
    np.testing.assert_allclose(conc.values[-1], 1.0, atol=1e-12)


@pytest.mark.parametrize("uc,da", [(1.0, 21.3912), (0.03693, 155.9775), (1.0, 0.7)])
def test_well_mixed_limit_matches_ode(uc, da):
    x = np.linspace(0.0, 1.0, 3)
    g = Geometry((x,), 1.0, 101, np.full(3, 0.05))
    eps, _ = solve_dissolution(g, ModelConstants(da, 1.0, upsilon_C0=uc), hold_conc=1.0)
    exact = np.minimum(1.0, 0.05 + uc * da * eps.times)
    np.testing.assert_allclose(eps.values[:, 1], exact, atol=1e-6)


def test_monotone_and_bounded(shipped_1d):
    eps, conc = shipped_1d
    assert np.all(np.diff(eps.values, axis=0) >= 0)
    assert eps.values.min() >= EPS_FLOOR and eps.values.max() <= 1.0
    assert conc.values.min() >= 0.0 and conc.values.max() <= 1.0
    assert np.all(conc.values[:, [0, -1]] == 1.0)


def test_porosity_equation_residual(shipped_1d):
    eps, conc = shipped_1d
    e, c = eps.values, conc.values
    dt = eps.times[1] - eps.times[0]
    chi = e[:-1] < 1.0 - 1e-12
    pred = e[:-1] + dt * ONE_D.upsilon_C0 * ONE_D.Da2_star * c[1:] * chi
    unclipped = pred < 1.0
    assert np.max(np.abs(e[1:] - pred)[unclipped]) < 1e-10


def test_grid_refinement_changes_dissolved_fraction_little(shipped_1d):
    def dissolved(eps):
        phi = upscaled_porosity(eps)
        return (phi[-1] - phi[0]) / (1 - phi[0])

    fine = solve_dissolution(make_geometry_1d(nx=399, nt=479), ONE_D)[0]
    coarse = dissolved(shipped_1d[0])
    assert coarse > 0.05
    assert abs(dissolved(fine) - coarse) / coarse < 0.02


def test_small_2d_run_is_bounded():
    g = make_geometry_2d(shape=(24, 24), nt=12, t_final=0.2)
    eps, conc = solve_dissolution(g, ModelConstants(155.9775, 17.5, beta=0.5, upsilon_C0=0.03693))
    assert np.all(np.diff(eps.values, axis=0) >= 0)
    assert conc.values.min() >= 0 and conc.values.max() <= 1


# ---------------------------------------------------------------- imaging noise and files


def _field(values):
    values = np.asarray(values, dtype=float)
    return FieldGrid(values, (np.linspace(0, 1, values.shape[1]),), np.linspace(0, 1, values.shape[0]))


def test_noiseless_image_is_complement():
    eps = _field(np.random.default_rng(0).uniform(0.05, 1, (4, 9)))
    assert np.array_equal(emit_synthetic_uct(eps, 0.0).values, 1.0 - eps.values)
    assert np.all(emit_synthetic_uct(_field(np.ones((3, 5))), 0.0).values == 0.0)


def test_noise_amplitude():
    eps = _field(np.full((10, 10_000), 0.5))
    img = emit_synthetic_uct(eps, 0.03, seed=3).values
    assert np.std(img - 0.5) == pytest.approx(0.03, rel=0.05)
    assert np.array_equal(img, emit_synthetic_uct(eps, 0.03, seed=3).values)


def test_negative_noise_rejected():
    with pytest.raises(ValueError):
        emit_synthetic_uct(_field(np.ones((2, 2))), -0.1)


@settings(max_examples=25)
@given(st.integers(0, 2**31 - 1), st.floats(0.0, 0.3))
def test_image_in_unit_interval(seed, sigma):
    eps = _field(np.random.default_rng(seed).uniform(0.05, 1, (3, 20)))
    img = emit_synthetic_uct(eps, sigma, seed).values
    assert img.min() >= 0 and img.max() <= 1


def test_binary_and_csv_round_trip(tmp_path):
    g = make_geometry_2d(shape=(6, 5), nt=3)
    field = FieldGrid(np.random.default_rng(1).random((3, 6, 5)), g.axes, g.times, "eps")
    write_field_binary(tmp_path / "eps.bin", field)
    back = read_field_binary(tmp_path / "eps.bin")
    assert np.array_equal(back.values, field.values)
    assert np.array_equal(back.times, field.times)
    assert all(np.array_equal(a, b) for a, b in zip(back.axes, field.axes))
    paths = write_field_csv(tmp_path / "csv", field)
    assert len(paths) == 3
    data = np.loadtxt(paths[1], delimiter=",", skiprows=1)
    assert data.shape == (30, 4)
    np.testing.assert_array_equal(data[:, 3], field.values[1].ravel())
    np.testing.assert_array_equal(data[:, 2], field.times[1])


def test_upscaled_porosity_forms():
    field = _field(np.array([[0.0, 1.0, 1.0], [1.0, 1.0, 1.0]]))
    np.testing.assert_allclose(upscaled_porosity(field), [0.75, 1.0])
    assert upscaled_porosity(np.array([0.0, 1.0])) == 0.5
