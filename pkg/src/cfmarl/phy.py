"""Downlink physical layer: channels, pilot-based MMSE estimation, precoding,
and hardening-bound SINR/SE evaluation.

Geometry is planar. Large-scale gains come from a configurable pathloss law;
spatial covariances are either scaled identities ("uncorrelated") or a
local-scattering model on a half-wavelength ULA. SE statistics (the a_k
vectors and B_ki matrices of the hardening bound) are estimated by Monte
Carlo over joint channel + estimation realizations, with standard errors
reported so consumers can reason about the noise floor of the estimate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .linalg import psd_factor
from .rng import RngStream

log = logging.getLogger(__name__)


# -- pathloss ------------------------------------------------------------------

@dataclass
class PathlossConfig:
    """Large-scale fading law, linear gain as a function of distance.

    The default log-distance fit PL(dB) = 140.7 + 36.7 log10(d_km) is the
    standard urban profile used throughout the cell-free literature (a
    COST-231 Walfisch-Ikegami evaluation at 2 GHz). `model="cost231-wi"`
    evaluates the non-line-of-sight composite explicitly from its street
    geometry parameters instead.
    """

    model: str = "log-distance"
    intercept_db: float = 140.7
    slope_db: float = 36.7
    # COST-231-WI street geometry (used only by model="cost231-wi")
    freq_mhz: float = 2000.0
    base_height_m: float = 11.65
    mobile_height_m: float = 1.65
    roof_height_m: float = 10.0
    building_separation_m: float = 50.0
    street_width_m: float = 25.0
    min_distance_m: float = 1.0

    def loss_db(self, d_m):
        d_m = np.maximum(np.asarray(d_m, dtype=float), self.min_distance_m)
        if self.model == "log-distance":
            return self.intercept_db + self.slope_db * np.log10(d_m / 1000.0)
        if self.model == "cost231-wi":
            return self._cost231_wi_db(d_m)
        raise ValueError(f"unknown pathloss model {self.model!r}")

    def _cost231_wi_db(self, d_m):
        d_km = d_m / 1000.0
        f = self.freq_mhz
        dh_base = self.base_height_m - self.roof_height_m
        dh_mobile = self.roof_height_m - self.mobile_height_m
        l0 = 32.4 + 20 * np.log10(d_km) + 20 * np.log10(f)
        # rooftop-to-street diffraction, street orientation term at 90 deg
        lrts = (-16.9 - 10 * np.log10(self.street_width_m)
                + 10 * np.log10(f) + 20 * np.log10(max(dh_mobile, 0.1)) + 4.0)
        if dh_base > 0:
            lbsh = -18 * np.log10(1 + dh_base)
            ka = 54.0
            kd = 18.0
        else:
            lbsh = 0.0
            ka = 54.0 - 0.8 * dh_base
            kd = 18.0 - 15.0 * dh_base / max(self.roof_height_m, 1.0)
        kf = -4.0 + 1.5 * (f / 925.0 - 1.0)
        lmsd = (lbsh + ka + kd * np.log10(d_km) + kf * np.log10(f)
                - 9 * np.log10(self.building_separation_m))
        return l0 + np.maximum(lrts + lmsd, 0.0)


def pathloss(d_m, config: PathlossConfig | None = None):
    """Linear power gain at distance d_m (meters); inputs below 1 m clamp."""
    if config is None:
        config = PathlossConfig()
    return 10.0 ** (-config.loss_db(d_m) / 10.0)


# -- geometry -------------------------------------------------------------------

@dataclass
class NetworkGeometry:
    ap_positions: np.ndarray  # (M, 2) meters
    ue_positions: np.ndarray  # (K, 2) meters
    area: tuple = (0.0, 1000.0)
    wraparound: bool = True

    def __post_init__(self):
        self.ap_positions = np.asarray(self.ap_positions, dtype=float)
        self.ue_positions = np.asarray(self.ue_positions, dtype=float)
        lo, hi = self.area
        for name, pos in (("AP", self.ap_positions), ("UE", self.ue_positions)):
            if pos.size and (pos.min() < lo - 1e-9 or pos.max() > hi + 1e-9):
                raise ValueError(f"{name} positions outside area bounds {self.area}")

    @property
    def num_aps(self):
        return self.ap_positions.shape[0]

    @property
    def num_ues(self):
        return self.ue_positions.shape[0]

    def distances(self) -> np.ndarray:
        """(M, K) AP-UE distances, minimum over 9 images when wrapping."""
        return pairwise_distances(self.ap_positions, self.ue_positions,
                                  self.area, self.wraparound)


def pairwise_distances(a: np.ndarray, b: np.ndarray, area, wraparound: bool) -> np.ndarray:
    diff = a[:, None, :] - b[None, :, :]
    if wraparound:
        side = area[1] - area[0]
        diff = np.abs(diff)
        diff = np.minimum(diff, side - diff)
    return np.sqrt((diff**2).sum(axis=-1))


def distance(geometry: NetworkGeometry, m: int, k: int) -> float:
    return float(pairwise_distances(geometry.ap_positions[m:m + 1],
                                    geometry.ue_positions[k:k + 1],
                                    geometry.area, geometry.wraparound)[0, 0])


# -- covariance ------------------------------------------------------------------

@dataclass
class CovarianceSet:
    r: np.ndarray           # (M, K, N, N) Hermitian PSD
    beta: np.ndarray        # (M, K) linear gains, tr(R)/N
    model: str = "uncorrelated"
    _factors: np.ndarray | None = field(default=None, repr=False, compare=False)

    @property
    def num_antennas(self):
        return self.r.shape[-1]

    def factors(self) -> np.ndarray:
        """Cached per-(m,k) factors L with L L^H = R, for channel sampling."""
        if self._factors is None:
            m_count, k_count, n, _ = self.r.shape
            if self.model == "uncorrelated":
                eye = np.eye(n)
                self._factors = np.sqrt(self.beta)[:, :, None, None] * eye
            else:
                fac = np.empty_like(self.r)
                for mi in range(m_count):
                    for ki in range(k_count):
                        fac[mi, ki] = psd_factor(self.r[mi, ki])
                self._factors = fac
        return self._factors


def _local_scattering_matrix(n: int, nominal_angle: float, spread_deg: float,
                             spacing: float) -> np.ndarray:
    """ULA covariance under uniform angular spread, normalized to trace n."""
    half = np.deg2rad(spread_deg) / 2.0
    # Gauss-Legendre quadrature over the angle interval
    nodes, weights = np.polynomial.legendre.leggauss(64)
    phi = nominal_angle + half * nodes
    steer = np.exp(2j * np.pi * spacing * np.outer(np.arange(n), np.sin(phi)))
    r = (steer * (weights / 2.0)) @ steer.conj().T
    r = (r + r.conj().T) / 2.0
    return r * (n / np.real(np.trace(r)))


def build_covariance(geometry: NetworkGeometry, pathloss_config: PathlossConfig | None = None,
                     cov_model: str = "uncorrelated", num_antennas: int = 1,
                     angular_spread_deg: float = 20.0,
                     antenna_spacing: float = 0.5) -> CovarianceSet:
    """Per-(AP, UE) spatial covariances with trace(R)/N equal to the pathloss gain."""
    d = geometry.distances()
    beta = pathloss(d, pathloss_config)
    m_count, k_count = beta.shape
    n = num_antennas
    if cov_model == "uncorrelated":
        r = beta[:, :, None, None] * np.eye(n)
        return CovarianceSet(r=r.astype(complex), beta=beta, model=cov_model)
    if cov_model != "local-scattering":
        raise ValueError(f"unknown covariance model {cov_model!r}")
    r = np.empty((m_count, k_count, n, n), dtype=complex)
    diff = geometry.ue_positions[None, :, :] - geometry.ap_positions[:, None, :]
    angles = np.arctan2(diff[..., 1], diff[..., 0])
    for mi in range(m_count):
        for ki in range(k_count):
            r[mi, ki] = beta[mi, ki] * _local_scattering_matrix(
                n, angles[mi, ki], angular_spread_deg, antenna_spacing)
    return CovarianceSet(r=r, beta=beta, model=cov_model)


# -- pilots -----------------------------------------------------------------------

@dataclass
class PilotAssignment:
    tau_p: int
    t: np.ndarray                 # (K,) pilot index per UE, 0-based
    cosets: list                  # cosets[k]: indices of UEs sharing UE k's pilot

    @classmethod
    def round_robin(cls, num_ues: int, tau_p: int) -> "PilotAssignment":
        t = np.arange(num_ues) % tau_p
        cosets = [np.flatnonzero(t == t[k]) for k in range(num_ues)]
        return cls(tau_p=tau_p, t=t, cosets=cosets)


def assign_pilots(num_ues: int, tau_p: int, rng: RngStream | None = None) -> PilotAssignment:
    """Round-robin pilot assignment; deterministic, rng reserved for future use."""
    if tau_p < 1:
        raise ValueError("tau_p must be at least 1")
    return PilotAssignment.round_robin(num_ues, tau_p)


# -- channel sampling ---------------------------------------------------------------

@dataclass
class ChannelRealization:
    h: np.ndarray  # (M, K, N) complex


def sample_channels(cov: CovarianceSet, rng: RngStream, size: int | None = None) -> np.ndarray:
    """Correlated Rayleigh draws; (M,K,N) or (size,M,K,N) when size is given."""
    m_count, k_count, n, _ = cov.r.shape
    squeeze = size is None
    d = 1 if squeeze else size
    z = rng.complex_normal((d, m_count, k_count, n))
    fac = cov.factors()
    h = np.einsum("mkij,dmkj->dmki", fac, z)
    return h[0] if squeeze else h


# -- MMSE estimation ------------------------------------------------------------------

@dataclass
class ChannelEstimate:
    h_hat: np.ndarray    # (M, K, N)
    psi: np.ndarray      # (M, tau_p, N, N) received-pilot correlation matrices
    err_cov: np.ndarray  # (M, K, N, N) estimation-error covariances


@dataclass
class EstimationOperator:
    """Precomputed linear MMSE machinery for a fixed covariance set."""

    a: np.ndarray        # (M, K, N, N): h_hat = a[m,k] @ y[m, t_k]
    psi: np.ndarray      # (M, tau_p, N, N)
    err_cov: np.ndarray  # (M, K, N, N)
    pilots: PilotAssignment
    ue_powers: np.ndarray
    noise_power: float

    def project_pilots(self, h: np.ndarray, rng: RngStream) -> np.ndarray:
        """Noisy despread pilot observations y for channel draws h (..., M, K, N)."""
        pil = self.pilots
        scale = np.sqrt(self.ue_powers * pil.tau_p)
        shape = h.shape[:-3] + (h.shape[-3], pil.tau_p, h.shape[-1])
        y = np.zeros(shape, dtype=complex)
        for t in range(pil.tau_p):
            members = np.flatnonzero(pil.t == t)
            if members.size:
                y[..., t, :] = np.einsum("...jn,j->...n", h[..., members, :], scale[members])
        noise = np.sqrt(self.noise_power) * rng.complex_normal(shape)
        return y + noise

    def estimate(self, y: np.ndarray) -> np.ndarray:
        """MMSE estimates from pilot observations y (..., M, tau_p, N)."""
        y_per_ue = y[..., self.pilots.t, :]
        return np.einsum("mkij,...mkj->...mki", self.a, y_per_ue)


def estimation_operator(cov: CovarianceSet, pilots: PilotAssignment,
                        ue_powers, noise_power: float) -> EstimationOperator:
    m_count, k_count, n, _ = cov.r.shape
    p = np.broadcast_to(np.asarray(ue_powers, dtype=float), (k_count,))
    if np.any(p < 0) or noise_power <= 0:
        raise ValueError("UE powers must be nonnegative and noise power positive")
    psi = np.zeros((m_count, pilots.tau_p, n, n), dtype=complex)
    for t in range(pilots.tau_p):
        members = np.flatnonzero(pilots.t == t)
        for i in members:
            psi[:, t] += p[i] * pilots.tau_p * cov.r[:, i]
        psi[:, t] += noise_power * np.eye(n)
    psi_inv = np.linalg.inv(psi)
    scale = np.sqrt(p * pilots.tau_p)
    a = scale[None, :, None, None] * np.einsum("mkij,mkjl->mkil",
                                               cov.r, psi_inv[:, pilots.t])
    # C_mk = R - p tau_p R Psi^{-1} R (the sqrt(p tau_p) enters twice)
    err_cov = cov.r - scale[None, :, None, None] * np.einsum("mkij,mkjl->mkil", a, cov.r)
    return EstimationOperator(a=a, psi=psi, err_cov=err_cov, pilots=pilots,
                              ue_powers=p, noise_power=float(noise_power))


def mmse_estimate(cov: CovarianceSet, pilots: PilotAssignment, channels: ChannelRealization,
                  ue_powers, noise_power: float, rng: RngStream) -> ChannelEstimate:
    """Pilot transmission plus linear MMSE estimation for one realization."""
    op = estimation_operator(cov, pilots, ue_powers, noise_power)
    y = op.project_pilots(channels.h, rng)
    return ChannelEstimate(h_hat=op.estimate(y), psi=op.psi, err_cov=op.err_cov)


# -- precoding ------------------------------------------------------------------------

def _normalize(w: np.ndarray) -> np.ndarray:
    """Unit-norm per vector; zero vectors map to e_1 (flagged)."""
    norms = np.linalg.norm(w, axis=-1, keepdims=True)
    zero = norms[..., 0] == 0
    if np.any(zero):
        log.warning("zero precoder estimate for %d links; using unit basis vector",
                    int(zero.sum()))
        w = w.copy()
        w[zero] = 0.0
        w[zero, ..., 0] = 1.0
        norms = np.linalg.norm(w, axis=-1, keepdims=True)
    return w / norms


def precode_mr(h_hat: np.ndarray) -> np.ndarray:
    """Maximum-ratio precoders: estimates normalized to unit norm."""
    return _normalize(h_hat)


def precode_rzf(h_hat: np.ndarray, ue_powers, noise_power: float) -> np.ndarray:
    """Regularized zero-forcing, normalized to unit norm.

    h_hat is (..., M, K, N); the inverse is per AP over the antenna axis.
    """
    k_count = h_hat.shape[-2]
    n = h_hat.shape[-1]
    p = np.broadcast_to(np.asarray(ue_powers, dtype=float), (k_count,))
    gram = np.einsum("...kn,...km,k->...nm", h_hat, h_hat.conj(), p)
    gram = gram + noise_power * np.eye(n)
    sol = np.linalg.solve(gram[..., None, :, :],
                          h_hat[..., :, :, None])[..., 0]
    return _normalize(p[:, None] * sol)


# -- SE statistics ----------------------------------------------------------------------

@dataclass
class SeStatistics:
    a: np.ndarray          # (K, M) mean Re(h^H w) per serving AP
    b: np.ndarray          # (K, K, M, M) mean Re(h_mk^H w_mi w_m'i^H h_m'k)
    a_stderr: np.ndarray
    b_stderr: np.ndarray
    mc_draws: int


def estimate_se_statistics(cov: CovarianceSet, pilots: PilotAssignment, ue_powers,
                           noise_power: float, precoder: str, mc_draws: int,
                           rng: RngStream, chunk: int = 512) -> SeStatistics:
    """Monte-Carlo hardening-bound statistics over channel + estimation draws."""
    if mc_draws < 1:
        raise ValueError("mc_draws must be positive")
    m_count, k_count, n, _ = cov.r.shape
    op = estimation_operator(cov, pilots, ue_powers, noise_power)
    fac = cov.factors()
    a_sum = np.zeros((k_count, m_count))
    a_sq = np.zeros((k_count, m_count))
    b_sum = np.zeros((k_count, k_count, m_count, m_count))
    b_sq = np.zeros((k_count, k_count, m_count, m_count))
    done = 0
    while done < mc_draws:
        d = min(chunk, mc_draws - done)
        z = rng.complex_normal((d, m_count, k_count, n))
        h = np.einsum("mkij,dmkj->dmki", fac, z)
        y = op.project_pilots(h, rng)
        h_hat = op.estimate(y)
        if precoder == "mr":
            w = precode_mr(h_hat)
        elif precoder == "rzf":
            w = precode_rzf(h_hat, op.ue_powers, noise_power)
        else:
            raise ValueError(f"unknown precoder {precoder!r}")
        g = np.einsum("dmkn,dmin->dmki", h.conj(), w)
        diag = np.real(np.einsum("dmkk->dkm", g))
        a_sum += diag.sum(axis=0)
        a_sq += (diag**2).sum(axis=0)
        x = np.real(np.einsum("dmki,dpki->dkimp", g, g.conj()))
        b_sum += x.sum(axis=0)
        b_sq += (x**2).sum(axis=0)
        done += d
    a_mean = a_sum / mc_draws
    b_mean = b_sum / mc_draws
    a_var = np.maximum(a_sq / mc_draws - a_mean**2, 0.0)
    b_var = np.maximum(b_sq / mc_draws - b_mean**2, 0.0)
    return SeStatistics(a=a_mean, b=b_mean,
                        a_stderr=np.sqrt(a_var / mc_draws),
                        b_stderr=np.sqrt(b_var / mc_draws),
                        mc_draws=mc_draws)


def compute_sinr(stats: SeStatistics, mu: np.ndarray, noise_power: float) -> np.ndarray:
    """Effective hardening-bound SINR per UE for sqrt-power weights mu (K, M)."""
    mu = np.asarray(mu, dtype=float)
    if np.any(mu < 0):
        raise ValueError("power weights must be nonnegative")
    signal = np.einsum("km,km->k", stats.a, mu)
    interference = np.einsum("im,kimp,ip->k", mu, stats.b, mu)
    denom = interference - signal**2 + noise_power
    floor = noise_power / 2.0
    if np.any(denom < floor):
        log.warning("SINR denominator below noise floor for %d UEs; clamping "
                    "(Monte-Carlo noise guard)", int((denom < floor).sum()))
        denom = np.maximum(denom, floor)
    return signal**2 / denom


def compute_se(sinr, tau_p: int, tau_c: int) -> np.ndarray:
    """Achievable SE, bits/s/Hz, with the pilot-overhead prelog."""
    if tau_p > tau_c:
        raise ValueError("tau_p cannot exceed tau_c")
    sinr = np.asarray(sinr, dtype=float)
    if np.any(sinr < 0):
        raise ValueError("SINR must be nonnegative")
    return (1.0 - tau_p / tau_c) * np.log2(1.0 + sinr)
