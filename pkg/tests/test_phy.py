"""Physical layer: pathloss, covariances, pilots, MMSE estimation, SE statistics."""
import numpy as np
import pytest

from cfmarl.phy import (
    ChannelRealization,
    CovarianceSet,
    NetworkGeometry,
    PathlossConfig,
    PilotAssignment,
    assign_pilots,
    build_covariance,
    compute_se,
    compute_sinr,
    distance,
    estimate_se_statistics,
    estimation_operator,
    mmse_estimate,
    pathloss,
    precode_mr,
    precode_rzf,
    sample_channels,
    SeStatistics,
)
from cfmarl.rng import RngStream


def toy_cov(beta, n=1):
    """Unit-scale covariance set from a (M, K) beta array, R = beta * I."""
    beta = np.atleast_2d(np.asarray(beta, dtype=float))
    r = beta[:, :, None, None] * np.eye(n)
    return CovarianceSet(r=r.astype(complex), beta=beta, model="uncorrelated")


# -- pathloss ------------------------------------------------------------------

def test_pathloss_default_profile_at_1km():
    assert np.isclose(pathloss(1000.0), 10 ** (-14.07), rtol=1e-12)


def test_pathloss_monotone():
    for cfg in (PathlossConfig(), PathlossConfig(model="cost231-wi")):
        d = np.linspace(1, 3000, 200)
        g = pathloss(d, cfg)
        assert np.all(np.diff(g) <= 0)


def test_pathloss_clamps_below_one_meter():
    assert pathloss(0.5) == pathloss(1.0)


# -- distance -------------------------------------------------------------------

def test_distance_345():
    geo = NetworkGeometry(np.array([[0.0, 0.0]]), np.array([[3.0, 4.0]]),
                          area=(0.0, 1000.0), wraparound=False)
    assert np.isclose(distance(geo, 0, 0), 5.0)


def test_distance_wraparound():
    geo = NetworkGeometry(np.array([[10.0, 0.0]]), np.array([[990.0, 0.0]]),
                          area=(0.0, 1000.0), wraparound=True)
    assert np.isclose(distance(geo, 0, 0), 20.0)


def test_distance_coincident():
    geo = NetworkGeometry(np.array([[5.0, 5.0]]), np.array([[5.0, 5.0]]),
                          area=(0.0, 10.0), wraparound=True)
    assert distance(geo, 0, 0) == 0.0


def test_wraparound_never_exceeds_euclidean():
    rng = np.random.default_rng(0)
    ap = rng.uniform(0, 1000, (5, 2))
    ue = rng.uniform(0, 1000, (4, 2))
    wrapped = NetworkGeometry(ap, ue, wraparound=True).distances()
    plain = NetworkGeometry(ap, ue, wraparound=False).distances()
    assert np.all(wrapped <= plain + 1e-12)


# -- covariance -------------------------------------------------------------------

def test_build_covariance_uncorrelated_definition():
    geo = NetworkGeometry(np.array([[0.0, 0.0]]), np.array([[100.0, 0.0]]),
                          wraparound=False)
    cov = build_covariance(geo, num_antennas=2)
    beta = pathloss(100.0)
    assert np.allclose(cov.r[0, 0], beta * np.eye(2))


@pytest.mark.parametrize("model", ["uncorrelated", "local-scattering"])
def test_covariance_trace_normalization(model):
    rng = np.random.default_rng(3)
    geo = NetworkGeometry(rng.uniform(0, 1000, (3, 2)), rng.uniform(0, 1000, (2, 2)))
    cov = build_covariance(geo, cov_model=model, num_antennas=4)
    traces = np.real(np.einsum("mkii->mk", cov.r)) / 4
    assert np.allclose(traces, cov.beta, rtol=1e-9)


def test_local_scattering_is_correlated_and_psd():
    geo = NetworkGeometry(np.array([[0.0, 0.0]]), np.array([[300.0, 200.0]]),
                          wraparound=False)
    cov = build_covariance(geo, cov_model="local-scattering", num_antennas=8)
    r = cov.r[0, 0]
    off = r - np.diag(np.diag(r))
    assert np.linalg.norm(off) > 0
    assert np.linalg.eigvalsh(r).min() >= -1e-10 * np.real(np.trace(r))


# -- pilots -----------------------------------------------------------------------

def test_pilots_full_orthogonal():
    pil = assign_pilots(6, 6)
    assert np.array_equal(pil.t, np.arange(6))
    assert all(np.array_equal(pil.cosets[k], [k]) for k in range(6))


def test_pilots_round_robin_cosets():
    pil = assign_pilots(4, 2)
    assert np.array_equal(pil.t, [0, 1, 0, 1])
    assert np.array_equal(pil.cosets[0], [0, 2])


def test_pilots_reflexive():
    pil = assign_pilots(7, 3)
    assert all(k in pil.cosets[k] for k in range(7))


# -- channel sampling ---------------------------------------------------------------

def test_zero_beta_gives_zero_channel():
    h = sample_channels(toy_cov([[0.0]]), RngStream(1))
    assert np.all(h == 0)


def test_channel_variance_matches_beta():
    cov = toy_cov([[2.0, 0.5]], n=2)
    h = sample_channels(cov, RngStream(2), size=100000)
    var = np.mean(np.abs(h) ** 2, axis=(0, 3))
    assert np.allclose(var, [[2.0, 0.5]], rtol=0.05)


def test_channels_uncorrelated_across_links():
    cov = toy_cov([[1.0, 1.0]], n=1)
    h = sample_channels(cov, RngStream(3), size=100000)
    x0 = h[:, 0, 0, 0]
    x1 = h[:, 0, 1, 0]
    rho = np.abs(np.mean(x0 * x1.conj()))
    assert rho < 0.02


# -- MMSE estimation -----------------------------------------------------------------

def test_mmse_perfect_estimation_limit():
    cov = toy_cov([[1.0, 1.0, 1.0]], n=2)
    pil = assign_pilots(3, 3)
    rng = RngStream(4)
    h = sample_channels(cov, rng)
    est = mmse_estimate(cov, pil, ChannelRealization(h), 1.0, 1e-12, rng)
    rel = np.linalg.norm(est.h_hat - h) / np.linalg.norm(h)
    assert rel < 1e-4


def test_error_covariance_matches_monte_carlo():
    # Two UEs sharing one pilot: the analytic error covariance must equal
    # the sample covariance of (h - h_hat).
    cov = toy_cov([[4.0, 1.0]], n=2)
    pil = assign_pilots(2, 1)
    op = estimation_operator(cov, pil, 0.1, 0.5)
    rng = RngStream(5)
    draws = 100000
    h = sample_channels(cov, rng, size=draws)
    y = op.project_pilots(h, rng)
    h_hat = op.estimate(y)
    err = h - h_hat
    for k in range(2):
        emp = np.einsum("di,dj->ij", err[:, 0, k], err[:, 0, k].conj()) / draws
        ref = op.err_cov[0, k]
        assert np.linalg.norm(emp - ref) < 0.05 * np.linalg.norm(ref)


def test_mmse_orthogonality():
    cov = toy_cov([[2.0, 1.0]], n=2)
    pil = assign_pilots(2, 1)
    op = estimation_operator(cov, pil, 0.1, 0.5)
    rng = RngStream(6)
    draws = 100000
    h = sample_channels(cov, rng, size=draws)
    h_hat = op.estimate(op.project_pilots(h, rng))
    err = h - h_hat
    for k in range(2):
        inner = np.mean(np.einsum("dn,dn->d", h_hat[:, 0, k].conj(), err[:, 0, k]))
        assert abs(inner) < 0.01 * 2 * cov.beta[0, k]


def test_pilot_contamination_increases_error():
    rng = np.random.default_rng(7)
    geo = NetworkGeometry(rng.uniform(0, 1000, (3, 2)), rng.uniform(0, 1000, (2, 2)))
    cov = build_covariance(geo, num_antennas=2)
    shared = estimation_operator(cov, assign_pilots(2, 1), 0.1, 1e-13)
    ortho = estimation_operator(cov, assign_pilots(2, 2), 0.1, 1e-13)
    tr_shared = np.real(np.einsum("mkii->", shared.err_cov))
    tr_ortho = np.real(np.einsum("mkii->", ortho.err_cov))
    assert tr_shared > tr_ortho


def test_estimate_energy_never_inflated():
    cov = toy_cov([[1.5]], n=2)
    pil = assign_pilots(1, 1)
    op = estimation_operator(cov, pil, 0.2, 0.3)
    rng = RngStream(8)
    draws = 30000
    h = sample_channels(cov, rng, size=draws)
    h_hat = op.estimate(op.project_pilots(h, rng))
    energy = np.abs(h_hat[:, 0, 0]) ** 2
    per_draw = energy.sum(axis=-1)
    stderr = per_draw.std() / np.sqrt(draws)
    assert per_draw.mean() <= np.real(np.trace(cov.r[0, 0])) + 3 * stderr


# -- precoding ------------------------------------------------------------------------

def test_mr_unit_norm():
    h_hat = np.array([[[[3.0, 4.0j]]]], dtype=complex)
    w = precode_mr(h_hat)
    assert np.isclose(np.linalg.norm(w), 1.0, atol=1e-12)


def test_mr_basis_vector():
    h_hat = np.zeros((1, 1, 3), dtype=complex)
    h_hat[0, 0, 0] = 2.5
    w = precode_mr(h_hat)
    assert np.allclose(w[0, 0], [1.0, 0.0, 0.0])


def test_mr_inner_product_real_positive():
    rng = np.random.default_rng(9)
    h_hat = rng.standard_normal((2, 3, 4)) + 1j * rng.standard_normal((2, 3, 4))
    w = precode_mr(h_hat)
    inner = np.einsum("mkn,mkn->mk", w.conj(), h_hat)
    assert np.allclose(inner.imag, 0.0, atol=1e-12)
    assert np.all(inner.real > 0)


def _cosine(a, b):
    return np.abs(np.vdot(a, b)) / (np.linalg.norm(a) * np.linalg.norm(b))


def test_rzf_single_ue_equals_mr():
    rng = np.random.default_rng(10)
    h_hat = rng.standard_normal((1, 1, 4)) + 1j * rng.standard_normal((1, 1, 4))
    w_rzf = precode_rzf(h_hat, 0.5, 0.1)
    w_mr = precode_mr(h_hat)
    assert _cosine(w_rzf[0, 0], w_mr[0, 0]) > 1 - 1e-9


def test_rzf_high_noise_limit_is_mr():
    rng = np.random.default_rng(11)
    h_hat = rng.standard_normal((1, 3, 4)) + 1j * rng.standard_normal((1, 3, 4))
    sigma2 = 1e6 * np.linalg.norm(h_hat) ** 2
    w_rzf = precode_rzf(h_hat, 1.0, sigma2)
    w_mr = precode_mr(h_hat)
    for k in range(3):
        assert _cosine(w_rzf[0, k], w_mr[0, k]) > 0.999


def test_rzf_orthogonal_estimates_equal_mr():
    h_hat = np.zeros((1, 2, 2), dtype=complex)
    h_hat[0, 0] = [2.0, 0.0]
    h_hat[0, 1] = [0.0, 1.0 + 1.0j]
    w_rzf = precode_rzf(h_hat, np.array([0.7, 0.3]), 0.2)
    w_mr = precode_mr(h_hat)
    for k in range(2):
        assert _cosine(w_rzf[0, k], w_mr[0, k]) > 1 - 1e-9


# -- SE statistics ----------------------------------------------------------------------

def test_se_statistics_scalar_oracle():
    # M = K = N = 1, no contamination, tiny noise. With MR the effective gain
    # is |h|, a Rayleigh amplitude: E|h| = sqrt(pi * beta / 4), E|h|^2 = beta.
    cov = toy_cov([[1.0]], n=1)
    pil = assign_pilots(1, 1)
    stats = estimate_se_statistics(cov, pil, 1.0, 1e-9, "mr", 100000, RngStream(12))
    assert abs(stats.a[0, 0] - np.sqrt(np.pi / 4)) < 3 * stats.a_stderr[0, 0] + 1e-4
    assert abs(stats.b[0, 0, 0, 0] - 1.0) < 3 * stats.b_stderr[0, 0, 0, 0] + 1e-4


def test_se_statistics_variance_nonnegative():
    cov = toy_cov([[1.0, 0.5], [0.3, 2.0]], n=2)
    pil = assign_pilots(2, 2)
    stats = estimate_se_statistics(cov, pil, 0.1, 0.05, "mr", 5000, RngStream(13))
    for k in range(2):
        for m in range(2):
            lhs = stats.b[k, k, m, m]
            rhs = stats.a[k, m] ** 2 - 3 * stats.b_stderr[k, k, m, m]
            assert lhs >= rhs


def test_se_statistics_seed_consistency():
    cov = toy_cov([[1.0, 0.5], [0.3, 2.0]], n=2)
    pil = assign_pilots(2, 2)
    s1 = estimate_se_statistics(cov, pil, 0.1, 0.05, "mr", 20000, RngStream(14))
    s2 = estimate_se_statistics(cov, pil, 0.1, 0.05, "mr", 20000, RngStream(15))
    tol_a = 3 * np.sqrt(s1.a_stderr**2 + s2.a_stderr**2)
    assert np.all(np.abs(s1.a - s2.a) <= tol_a + 1e-12)
    tol_b = 3 * np.sqrt(s1.b_stderr**2 + s2.b_stderr**2)
    assert np.all(np.abs(s1.b - s2.b) <= tol_b + 1e-12)


def test_se_statistics_b_symmetric_psd():
    cov = toy_cov([[1.0, 0.5], [0.3, 2.0]], n=2)
    pil = assign_pilots(2, 1)
    stats = estimate_se_statistics(cov, pil, 0.1, 0.05, "mr", 4000, RngStream(16))
    for k in range(2):
        for i in range(2):
            b = stats.b[k, i]
            assert np.allclose(b, b.T, atol=1e-12)
            assert np.linalg.eigvalsh(b).min() > -1e-10


# -- SINR / SE ---------------------------------------------------------------------------

def _stats(a, b):
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return SeStatistics(a=a, b=b, a_stderr=np.zeros_like(a),
                        b_stderr=np.zeros_like(b), mc_draws=1)


def test_sinr_zero_power():
    stats = _stats(np.ones((2, 3)), np.ones((2, 2, 3, 3)))
    assert np.allclose(compute_sinr(stats, np.zeros((2, 3)), 0.1), 0.0)


def test_sinr_scalar_formula():
    alpha, b, rho, sigma2 = 0.9, 1.3, 0.7, 0.2
    stats = _stats([[alpha]], [[[[b]]]])
    sinr = compute_sinr(stats, [[np.sqrt(rho)]], sigma2)
    expect = rho * alpha**2 / (rho * (b - alpha**2) + sigma2)
    assert np.isclose(sinr[0], expect)


def test_sinr_monotone_in_power_without_cross_terms():
    a = np.array([[0.8, 0.6]])
    b = np.zeros((1, 1, 2, 2))
    b[0, 0] = np.array([[0.9, 0.2], [0.2, 0.7]])
    stats = _stats(a, b)
    last = -1.0
    for c in [0.1, 0.5, 1.0, 2.0, 10.0]:
        sinr = compute_sinr(stats, np.sqrt(c) * np.ones((1, 2)), 0.3)[0]
        assert sinr >= last
        last = sinr


def test_sinr_rejects_negative_power():
    stats = _stats(np.ones((1, 1)), np.ones((1, 1, 1, 1)))
    with pytest.raises(ValueError):
        compute_sinr(stats, [[-0.1]], 0.1)


def test_se_values():
    assert compute_se(0.0, 50, 200) == 0.0
    assert np.isclose(compute_se(3.0, 50, 200), 1.5)
    assert compute_se(100.0, 200, 200) == 0.0


def test_beta_locality():
    cfg = PathlossConfig()
    assert pathloss(100.0, cfg) >= pathloss(200.0, cfg)
