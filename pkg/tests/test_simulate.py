import math

import numpy as np
import pytest

from nesslsi.models import make_scenario, normalize_kinetic
from nesslsi.simulate import (
    SdeSystem,
    SimConfig,
    SimulationBlowUp,
    em_path,
    harnack_pair,
    kinetic_coupled_pair,
    noise_normals,
    pair_to_csv_rows,
    rc_profile,
    reflection_pair,
    synchronous_pair,
)
from oracles import ou_transition, rk4_ode, scalar_radial_sde


def test_noise_per_path_stable_under_ensemble_size():
    big = noise_normals(7, 11, 0, (64, 3))
    small = noise_normals(7, 11, 0, (8, 3))
    np.testing.assert_array_equal(big[:8], small)


def test_sim_config_validation():
    with pytest.raises(ValueError):
        SimConfig(dt=0.0, t_final=1.0, seed=0)
    with pytest.raises(ValueError):
        SimConfig(dt=2.0, t_final=1.0, seed=0)
    assert SimConfig(dt=1e-3, t_final=1.0, seed=0).n_steps == 1000


def test_driftless_noiseless_path_is_constant():
    sys_ = SdeSystem(dim=2, drift=lambda x: np.zeros_like(x), noise_dim=2, noise_scale=0.0)
    cfg = SimConfig(dt=0.1, t_final=1.0, seed=0)
    traj = em_path(sys_, np.array([1.0, -2.0]), cfg, n_paths=3)
    np.testing.assert_array_equal(traj.states[-1], traj.states[0])


def test_em_path_deterministic(ou1):
    cfg = SimConfig(dt=1e-2, t_final=1.0, seed=123)
    a = em_path(ou1, np.array([1.0]), cfg, n_paths=16)
    b = em_path(ou1, np.array([1.0]), cfg, n_paths=16)
    np.testing.assert_array_equal(a.states, b.states)


def test_ou_terminal_variance_matches_closed_form(ou1):
    cfg = SimConfig(dt=1e-3, t_final=5.0, seed=31)
    traj = em_path(ou1, np.zeros(1), cfg, n_paths=30_000, record_every=cfg.n_steps)
    term = traj.terminal[:, 0]
    _, var = ou_transition(0.0, 5.0)
    sample_var = term.var(ddof=1)
    stderr = sample_var * math.sqrt(2.0 / (term.size - 1))
    assert abs(sample_var - var) < 3.0 * stderr + 2e-3   # O(dt) bias allowance


def test_em_weak_order_one_common_noise(ou1):
    """Terminal-mean error vs the closed form scales like O(dt).

    All three dt levels share one Brownian path (coarse increments are sums
    of fine ones), so mean differences across levels isolate the O(dt)
    discretization bias from the common Monte Carlo noise.
    """
    T, seed, n_paths = 1.0, 77, 10_000
    dts = [1e-2, 1e-3, 1e-4]
    fine = dts[-1]
    steps_fine = int(round(T / fine))
    ratios = [int(round(d / fine)) for d in dts]
    states = [np.full(n_paths, 1.0) for _ in dts]
    acc = [np.zeros(n_paths) for _ in dts]
    sq = math.sqrt(2.0) * math.sqrt(fine)
    for step in range(steps_fine):
        xi = sq * noise_normals(seed, step, 0, (n_paths,))
        for lev, ratio in enumerate(ratios):
            acc[lev] += xi
            if (step + 1) % ratio == 0:
                d = dts[lev]
                states[lev] = states[lev] - states[lev] * d + acc[lev]
                acc[lev] = np.zeros(n_paths)
    means = [s.mean() for s in states]
    diffs = [abs(means[0] - means[2]), abs(means[1] - means[2])]
    order = math.log(diffs[0] / diffs[1]) / math.log(dts[0] / dts[1])
    assert order >= 0.8


def test_synchronous_ou_difference_decays_exactly(ou1):
    cfg = SimConfig(dt=1e-3, t_final=1.0, seed=5)
    traj = synchronous_pair(ou1, np.array([1.0]), np.array([0.0]), cfg, n_paths=8)
    sep = traj.separation
    np.testing.assert_allclose(sep[-1], (1.0 - cfg.dt) ** cfg.n_steps, rtol=1e-12)
    assert abs(sep[-1, 0] - math.exp(-1.0)) / math.exp(-1.0) < 0.01


def test_synchronous_driftless_difference_constant():
    sys_ = SdeSystem(dim=1, drift=lambda x: np.zeros_like(x), noise_dim=1, noise_scale=1.0)
    cfg = SimConfig(dt=0.01, t_final=1.0, seed=2)
    traj = synchronous_pair(sys_, np.array([1.0]), np.array([0.25]), cfg, n_paths=4)
    np.testing.assert_allclose(traj.separation, 0.75, atol=1e-12)


def test_synchronous_double_well_matches_ode_oracle():
    # noise-free limit: the coupled pair reduces to two ODEs
    m = make_scenario("double-well")
    quiet = SdeSystem(dim=1, drift=m.drift, noise_dim=1, noise_scale=1e-8)
    cfg = SimConfig(dt=1e-4, t_final=1.0, seed=3)
    traj = synchronous_pair(quiet, np.array([1.1]), np.array([0.9]), cfg, n_paths=1)
    x_ode = rk4_ode(lambda x: x - x**3, np.array([1.1]), 1.0, 4000)
    y_ode = rk4_ode(lambda x: x - x**3, np.array([0.9]), 1.0, 4000)
    expected = abs(x_ode[0] - y_ode[0])
    got = traj.separation[-1, 0]
    assert abs(got - expected) / expected < 0.01


def test_reflection_equal_start_merges_immediately(ou1):
    cfg = SimConfig(dt=1e-2, t_final=0.5, seed=4)
    traj = reflection_pair(ou1, np.array([0.3]), np.array([0.3]), cfg, n_paths=4)
    np.testing.assert_array_equal(traj.merge_time, 0.0)
    np.testing.assert_array_equal(traj.z, traj.z_prime)


def test_reflection_survival_matches_scalar_oracle(ou1):
    """In d = 1 the reflection difference is the scalar SDE
    dr = -r dt + 2 sqrt(2) dW absorbed at zero."""
    cfg = SimConfig(dt=1e-3, t_final=2.0, seed=6)
    n = 20_000
    traj = reflection_pair(ou1, np.array([0.5]), np.array([-0.5]), cfg, n_paths=n,
                           record_every=100)
    merge_t = np.where(np.isnan(traj.merge_time), np.inf, traj.merge_time)
    check_times = np.array([0.5, 1.0, 2.0])
    surv_mc = [(merge_t > t).mean() for t in check_times]
    surv_oracle, _ = scalar_radial_sde(1.0, check_times, cfg.dt, n, seed=1234)
    for p_mc, p_or in zip(surv_mc, surv_oracle):
        se = math.sqrt(p_mc * (1 - p_mc) / n + p_or * (1 - p_or) / n)
        assert abs(p_mc - p_or) <= 3.0 * se


def test_reflection_d3_radial_mean_bound():
    m = make_scenario("ou", {"d": 3})
    cfg = SimConfig(dt=1e-3, t_final=2.0, seed=8)
    x0 = np.array([1.0, 0.0, 0.0])
    traj = reflection_pair(m, x0, np.zeros(3), cfg, n_paths=10_000, record_every=200)
    sep = traj.separation.mean(axis=1)
    bound = np.exp(-traj.times) * 1.0
    stderr = traj.separation.std(axis=1) / math.sqrt(10_000)
    assert np.all(sep <= bound * 1.02 + 3.0 * stderr)


def test_reflection_noise_is_norm_preserving():
    gen = np.random.default_rng(11)
    e = gen.standard_normal((100, 4))
    e /= np.linalg.norm(e, axis=1, keepdims=True)
    xi = gen.standard_normal((100, 4))
    refl = xi - 2.0 * e * np.sum(e * xi, axis=1, keepdims=True)
    np.testing.assert_allclose(
        np.linalg.norm(refl, axis=1), np.linalg.norm(xi, axis=1), atol=1e-12
    )


def test_merged_pairs_never_separate(ou1):
    cfg = SimConfig(dt=1e-3, t_final=3.0, seed=9)
    traj = reflection_pair(ou1, np.array([0.4]), np.array([-0.4]), cfg, n_paths=512,
                           record_every=50)
    merged = ~np.isnan(traj.merge_time)
    assert merged.mean() > 0.5
    for p in np.where(merged)[0][:64]:
        after = traj.times >= traj.merge_time[p]
        np.testing.assert_array_equal(traj.z[after, p], traj.z_prime[after, p])


def test_harnack_equal_start(ou1):
    cfg = SimConfig(dt=1e-2, t_final=1.0, seed=10)
    traj = harnack_pair(ou1, np.array([1.0]), np.array([1.0]), cfg, k_w=0.0, n_paths=4)
    np.testing.assert_array_equal(traj.merge_time, 0.0)
    np.testing.assert_allclose(np.exp(traj.girsanov_logw), 1.0)


def test_harnack_merges_by_horizon_and_weight_is_unbiased(ou1):
    cfg = SimConfig(dt=1e-3, t_final=1.0, seed=12)
    n = 20_000
    traj = harnack_pair(ou1, np.array([0.5]), np.array([-0.5]), cfg, k_w=0.0, n_paths=n)
    assert traj.merged.all()
    assert np.nanmax(traj.merge_time) <= cfg.t_final + cfg.dt
    w = np.exp(traj.girsanov_logw)
    assert abs(w.mean() - 1.0) <= 3.0 * w.std(ddof=1) / math.sqrt(n)


def test_harnack_radial_decrease_rate(ou1):
    # |delta| must decrease at rate at least |x-y|/T along every path
    cfg = SimConfig(dt=1e-3, t_final=1.0, seed=13)
    traj = harnack_pair(ou1, np.array([0.5]), np.array([-0.5]), cfg, k_w=0.0,
                        n_paths=64, record_every=10)
    sep = traj.separation
    alive = traj.times[:, None] < np.where(np.isnan(traj.merge_time), np.inf,
                                           traj.merge_time)[None, :]
    envelope = np.broadcast_to(1.0 - traj.times[:, None] / cfg.t_final, sep.shape)
    assert np.all(sep[alive] <= envelope[alive] + 1e-9)


def test_rc_profile_boundary_cases():
    r0, n = 3.0, 100.0
    assert rc_profile(r0 + 1.0 / n, 1.0, r0, n) <= 1e-13   # threshold, up to rounding
    assert rc_profile(3.5, 1.0, r0, n) == 0.0
    assert rc_profile(1.0, 1.0 / n, r0, n) == 0.0
    assert rc_profile(1.0, 2.0 / n, r0, n) == 1.0
    assert rc_profile(r0, 0.5, r0, n) == 1.0
    mid = rc_profile(r0 + 0.5 / n, 1.5 / n, r0, n)
    assert 0.0 < mid < 1.0
    # limiting profile
    assert rc_profile(2.0, 0.3, r0, math.inf) == 1.0
    assert rc_profile(3.1, 0.3, r0, math.inf) == 0.0


def test_kinetic_pair_equal_start_stays_identical(kinetic_bench):
    model, params, table = kinetic_bench
    norm = normalize_kinetic(model)
    cfg = SimConfig(dt=1e-3, t_final=0.5, seed=14, n_smooth=1000)
    z0 = np.array([1.0, 0.0, 0.0, 0.5])
    traj = kinetic_coupled_pair(norm, table, params, z0, z0, cfg, n_paths=4)
    np.testing.assert_array_equal(traj.z, traj.z_prime)
    np.testing.assert_allclose(traj.rc, 0.0)


def test_kinetic_pair_far_start_in_synchronous_regime(kinetic_bench):
    model, params, table = kinetic_bench
    norm = normalize_kinetic(model)
    cfg = SimConfig(dt=1e-3, t_final=0.02, seed=15, n_smooth=1000)
    z0 = np.array([4.0, 0.0, 0.0, 0.0])
    zp0 = np.array([-4.0, 0.0, 0.0, 0.0])   # r = theta*8 >> r0 + 1/n
    traj = kinetic_coupled_pair(norm, table, params, z0, zp0, cfg, n_paths=4)
    np.testing.assert_allclose(traj.rc[0], 0.0)
    np.testing.assert_allclose(traj.rc[-1], 0.0)


def test_kinetic_pair_rc_sc_identity(kinetic_bench):
    model, params, table = kinetic_bench
    norm = normalize_kinetic(model)
    cfg = SimConfig(dt=1e-3, t_final=1.0, seed=16, n_smooth=1000)
    z0 = np.array([1.5, 0.0, 0.0, 0.0])
    zp0 = np.array([0.0, 0.5, 0.0, 0.0])
    traj = kinetic_coupled_pair(norm, table, params, z0, zp0, cfg, n_paths=64,
                                record_every=50)
    assert traj.rc.max() > 0.0
    np.testing.assert_allclose(traj.rc**2 + traj.sc**2, 1.0, atol=1e-12)


def test_kinetic_pair_marginal_moments_match_independent_run(kinetic_bench):
    """The reassembled Brownian motion is again a Brownian motion, so the
    second copy's marginal law equals that of a plain simulation."""
    model, params, table = kinetic_bench
    norm = normalize_kinetic(model)
    cfg = SimConfig(dt=2e-3, t_final=2.0, seed=17, n_smooth=1000)
    z0 = np.array([1.5, 0.0, 0.0, 0.0])
    zp0 = np.array([0.0, 0.5, 0.5, -0.5])
    n = 4000
    traj = kinetic_coupled_pair(norm, table, params, z0, zp0, cfg, n_paths=n,
                                record_every=cfg.n_steps)
    coupled_term = traj.z_prime[-1]

    indep_cfg = SimConfig(dt=cfg.dt, t_final=cfg.t_final, seed=18_000, n_smooth=1000)
    sys_ = SdeSystem(dim=4, drift=norm.model.control_drift, noise_dim=2,
                     noise_scale=math.sqrt(2.0))
    indep_term = em_path(sys_, zp0, indep_cfg, n_paths=n,
                         record_every=indep_cfg.n_steps).terminal
    for k in range(4):
        for power in (1, 2):
            a, b = coupled_term[:, k] ** power, indep_term[:, k] ** power
            se = math.hypot(a.std(ddof=1), b.std(ddof=1)) / math.sqrt(n)
            assert abs(a.mean() - b.mean()) <= 3.0 * se + 1e-3


@pytest.mark.filterwarnings("ignore:overflow encountered")
def test_blow_up_detection():
    sys_ = SdeSystem(dim=1, drift=lambda x: x**3, noise_dim=1, noise_scale=0.0)
    cfg = SimConfig(dt=0.5, t_final=50.0, seed=19)
    with pytest.raises(SimulationBlowUp):
        em_path(sys_, np.array([3.0]), cfg, n_paths=2)


def test_pair_csv_rows(ou1):
    cfg = SimConfig(dt=0.1, t_final=0.3, seed=20)
    traj = reflection_pair(ou1, np.array([1.0]), np.array([0.0]), cfg, n_paths=2)
    rows = list(pair_to_csv_rows(traj))
    assert rows[0] == ["path_id", "step", "t", "z0", "zp0", "rc", "merged"]
    assert len(rows) == 1 + 2 * traj.times.size
