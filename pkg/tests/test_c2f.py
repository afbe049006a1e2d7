import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ortho_group

from c2fdiff.c2f import (
    C2fPlan,
    RankCurve,
    c2f_sample,
    find_switch_time,
    pca_cut_index,
    rank_curve,
    renoise,
    select_switch_time,
    upsample,
)
from c2fdiff.metrics import CostModel
from c2fdiff.oracle import ResolutionFamily, blob_mixture, block_average, point_mass
from c2fdiff.rng import BatchRng
from c2fdiff.sampler import Trajectory, run_sampler
from c2fdiff.schedule import ContinuousSchedule, uniform_sequence

SCHED = ContinuousSchedule.linear()


def brute_force_cut_index(x, threshold):
    """Eigen-decomposition of the sample covariance, independent of the SVD path."""
    x = x.reshape(x.shape[0], -1)
    c = x - x.mean(0)
    vals = np.linalg.eigh(c.T @ c)[0][::-1]
    vals = np.clip(vals, 0, None)
    if vals.sum() == 0:
        return 1
    frac = np.cumsum(vals) / vals.sum()
    for k, f in enumerate(frac, start=1):
        if f >= threshold:
            return k
    return len(vals)


@pytest.mark.parametrize("kind", ["nearest", "bilinear"])
def test_upsample_constant(kind):
    x = np.full((2, 3, 4, 4), 0.25)
    out = upsample(x, 4, kind)
    assert out.shape == (2, 3, 16, 16)
    assert np.allclose(out, 0.25)


@pytest.mark.parametrize("kind", ["nearest", "bilinear"])
def test_upsample_single_pixel(kind):
    out = upsample(np.array([[[[1.5]]]]), 8, kind)
    assert out.shape == (1, 1, 8, 8) and np.all(out == 1.5)


def test_nearest_then_block_average_is_identity():
    x = np.random.default_rng(0).normal(size=(3, 2, 4, 5))
    assert np.allclose(block_average(upsample(x, 4), 4), x, atol=1e-15)


def test_bilinear_half_pixel_alignment():
    x = np.array([[[[0.0, 1.0]]]])
    out = upsample(x, 2, "bilinear")
    assert np.allclose(out[0, 0, 0], [0.0, 0.25, 0.75, 1.0])
    assert np.allclose(out[0, 0, 1], out[0, 0, 0])


def test_upsample_rejects_factor():
    with pytest.raises(ValueError):
        upsample(np.zeros((1, 1, 2, 2)), 3)
    with pytest.raises(ValueError):
        upsample(np.zeros((1, 1, 2, 2)), 2, "cubic")


class Zeros:
    def standard_normal(self, size):
        return np.zeros(size)


def test_renoise_zero_noise_and_range():
    x = np.random.default_rng(1).normal(size=(2, 1, 4, 4))
    a = SCHED.alpha_bar(565.0)
    assert np.allclose(renoise(x, 565.0, SCHED, Zeros()), np.sqrt(a) * x)
    for t in (0.0, 1000.5):
        with pytest.raises(ValueError):
            renoise(x, t, SCHED, Zeros())


def test_renoise_near_t_train_is_pure_noise():
    n = 10_000
    x = np.full((n, 1, 2, 2), 0.8)
    out = renoise(x, 1000.0, SCHED, BatchRng(3, n, "renoise")).reshape(n, -1)
    assert np.all(np.abs(out.mean(0)) < 5 / np.sqrt(n) + np.sqrt(SCHED.alpha_bar(1000.0)))
    assert np.all(np.abs(out.var(0) - 1.0) < 5 * np.sqrt(2 / n))


def test_renoise_marginal_and_reproducible():
    n = 10_000
    x0 = np.linspace(-1, 1, 4).reshape(1, 1, 2, 2)
    x = np.repeat(x0, n, axis=0)
    t = 420.0
    a = SCHED.alpha_bar(t)
    out = renoise(x, t, SCHED, BatchRng(8, n, "renoise")).reshape(n, -1)
    se = np.sqrt((1 - a) / n)
    assert np.all(np.abs(out.mean(0) - np.sqrt(a) * x0.ravel()) < 5 * se)
    assert np.all(np.abs(out.var(0, ddof=1) - (1 - a)) < 5 * (1 - a) * np.sqrt(2 / (n - 1)))
    again = renoise(x, t, SCHED, BatchRng(8, n, "renoise")).reshape(n, -1)
    assert np.array_equal(out, again)


def test_c2f_point_mass_end_to_end():
    mu = np.linspace(-0.9, 0.9, 64)
    fam = ResolutionFamily(point_mass(mu, (1, 8, 8)))
    plan = C2fPlan.uniform(4, 10, 5, 565.0, 1000)
    high, low = c2f_sample(fam, plan, "ddim", 16, SCHED, seed=0)
    rms = np.sqrt(np.mean((high.final.reshape(16, -1) - mu) ** 2))
    assert rms < 1e-3
    assert low.final.shape == (16, 1, 2, 2)


def test_c2f_without_low_stage_is_plain_sampling():
    fam = ResolutionFamily(blob_mixture(2, (1, 8, 8), seed=1))
    plan = C2fPlan(4, None, uniform_sequence(10, 1000, 0), 1000.0)
    high, low = c2f_sample(fam, plan, "ddim", 8, SCHED, seed=3)
    x = BatchRng(3, 8, "init").standard_normal((8, 1, 8, 8))
    plain = run_sampler(fam.denoiser(1, SCHED), "ddim", uniform_sequence(10, 1000, 0), x, SCHED)
    assert low is None
    assert np.array_equal(high.final, plain.final)


@pytest.mark.parametrize("kind", ["ddim", "dpm_solver_pp_2m", "ancestral"])
def test_c2f_deterministic_given_seed(kind):
    fam = ResolutionFamily(blob_mixture(2, (2, 8, 8), seed=2))
    if kind == "ancestral":
        plan = C2fPlan(2, uniform_sequence(1000, 1000, 0), uniform_sequence(300, 300, 0), 300.0)
    else:
        plan = C2fPlan.uniform(2, 6, 4, 500.0, 1000)
    a, _ = c2f_sample(fam, plan, kind, 4, SCHED, seed=11)
    b, _ = c2f_sample(fam, plan, kind, 4, SCHED, seed=11)
    assert np.array_equal(a.final, b.final)


def test_plan_invariants():
    with pytest.raises(ValueError):
        C2fPlan(4, None, uniform_sequence(5, 600, 0), 500.0)
    with pytest.raises(ValueError):
        C2fPlan(3, None, uniform_sequence(5, 400, 0), 500.0)
    with pytest.raises(ValueError):
        C2fPlan.uniform(4, 10, 5, 0.0, 1000)
    plan = C2fPlan.uniform(4, 10, 5, 565.0, 1000)
    assert (plan.t_c_steps, plan.t_f_steps) == (10, 5)


def test_low_stage_cost_is_high_cost_over_factor_squared():
    model = CostModel((32, 32), base_macs_per_step=6.1e9)
    for f in (2, 4, 8):
        assert model.cost((32 // f, 32 // f)) == pytest.approx(model.cost((32, 32)) / f**2, rel=0)


def test_cut_index_identical_rows():
    x = np.tile(np.array([0.1, 0.7, -0.3, 2.0]), (9, 1))
    assert pca_cut_index(x, 0.99) == 1


def test_cut_index_three_orthogonal_directions():
    e = np.eye(6)
    rows = np.vstack([e[0], -e[0], e[1], -e[1], e[2], -e[2]])
    assert pca_cut_index(rows, 0.99) == 3


def test_cut_index_two_rows():
    x = np.random.default_rng(0).normal(size=(2, 50))
    assert pca_cut_index(x, 0.99) == 1


def test_cut_index_matches_eigendecomposition():
    rng = np.random.default_rng(42)
    for _ in range(20):
        x = rng.normal(size=(64, 64)) * rng.uniform(0.1, 3, 64)
        assert pca_cut_index(x, 0.99) == brute_force_cut_index(x, 0.99)
        assert pca_cut_index(x, 0.5) == brute_force_cut_index(x, 0.5)


def test_cut_index_errors():
    with pytest.raises(ValueError):
        pca_cut_index(np.zeros((1, 4)))
    with pytest.raises(ValueError):
        pca_cut_index(np.zeros((3, 4)), 1.0)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_cut_index_invariances(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(12, 8)) * rng.uniform(0.05, 2, 8)
    k = pca_cut_index(x, 0.9)
    assert pca_cut_index(x[rng.permutation(12)], 0.9) == k
    q = ortho_group.rvs(8, random_state=seed)
    assert pca_cut_index(x @ q, 0.9) == k


def test_rank_curve_plumbing():
    snaps = [np.random.default_rng(i).normal(size=(5, 1, 2, 2)) for i in range(4)]
    traj = Trajectory(final=snaps[-1], times=[800.0, 600.0, 400.0, 200.0],
                      x_t_snapshots=snaps, x0_pred_snapshots=snaps)
    curve = rank_curve(traj)
    assert len(curve.times) == 4 and all(k >= 1 for k in curve.cut_indices)
    pair = Trajectory(final=snaps[0][:2], times=[5.0, 1.0],
                      x_t_snapshots=[s[:2] for s in snaps[:2]],
                      x0_pred_snapshots=[s[:2] for s in snaps[:2]])
    assert rank_curve(pair).cut_indices == (1, 1)
    with pytest.raises(ValueError):
        rank_curve(Trajectory(final=snaps[0]))


def test_rank_curve_point_mass_terminal_index():
    mu = np.linspace(-1, 1, 64)
    fam = ResolutionFamily(point_mass(mu, (1, 8, 8)))
    t_star, curve = select_switch_time(fam, 2, "ddim", 16, SCHED, seed=0, grid=20)
    assert curve.cut_indices[-1] == 1
    assert t_star in curve.times


def test_find_switch_time_examples():
    times = (900.0, 700.0, 500.0, 300.0, 100.0)
    assert find_switch_time(RankCurve(times, (5, 4, 3, 4, 6))) == 500.0
    assert find_switch_time(RankCurve(times, (3, 3, 3, 3, 3))) == 100.0
    assert find_switch_time(RankCurve(times, (2, 1, 1, 4, 5))) == 500.0
    with pytest.raises(ValueError):
        find_switch_time(RankCurve((), ()))


def test_rank_curve_csv_round_trip():
    curve = RankCurve((900.0, 456.5, 10.0), (3, 1, 2))
    text = curve.to_csv()
    assert text.splitlines()[0] == "time,cut_index"
    assert RankCurve.from_csv(text) == curve


def test_select_switch_time_on_mixture():
    fam = ResolutionFamily(blob_mixture(2, (1, 8, 8), seed=0))
    t_star, curve = select_switch_time(fam, 2, "ddim", 32, SCHED, seed=1, grid=50)
    assert len(curve.times) == 50
    assert t_star == find_switch_time(curve)
    assert 0 < t_star <= 1000
