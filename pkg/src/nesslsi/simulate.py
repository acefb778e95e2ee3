"""Euler-Maruyama discretization and coupling constructions.

Noise is drawn from a counter-based (Philox) stream keyed by
(seed, step, channel); within a step, path p consumes the fixed slice
[p*d, (p+1)*d) of the stream.  Trajectories are therefore bit-reproducible
from (seed, config, model) alone, per path, independently of ensemble size
or scheduling.

Couplings:

* synchronous: both copies share every Brownian increment,
* reflection:  the second copy sees noise mirrored across the separation
  direction until the pair merges, then synchronous,
* drifted (Harnack): same noise plus an extra inward drift xi * e on the
  second copy that forces merging by the horizon; the Girsanov log-weight
  of the added drift is recorded,
* kinetic reflection-synchronous: mixed noise rc/sc with rc^2 + sc^2 = 1,
  reflecting across the q = x + v separation direction, with smoothing
  index n controlling the thresholds.

Merging in discrete time is declared either when the separation falls below
merge_tol * (1 + initial separation), or when the signed radial coordinate
of the updated difference crosses zero (exact hits are almost surely missed
on a grid, crossings are not).  Merged pairs are advanced identically and
never separate.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .models import EllipticModel, KineticModel, NormalizedKineticModel
from .metric import MetricParams, MetricTable

__all__ = [
    "SimConfig",
    "Trajectory",
    "PairTrajectory",
    "SimulationBlowUp",
    "SdeSystem",
    "system_of",
    "noise_normals",
    "derive_seed",
    "em_path",
    "synchronous_pair",
    "reflection_pair",
    "harnack_pair",
    "kinetic_coupled_pair",
    "rc_profile",
    "pair_to_csv_rows",
]

_MASK64 = (1 << 64) - 1

CH_MAIN = 0
CH_AUX = 1
CH_INIT = 2


class SimulationBlowUp(FloatingPointError):
    """A state became non-finite during integration."""

    def __init__(self, step: int, t: float, n_bad: int):
        super().__init__(f"non-finite state at step {step} (t={t:g}) in {n_bad} path(s)")
        self.step = step
        self.t = t
        self.n_bad = n_bad


@dataclass(frozen=True)
class SimConfig:
    """Time grid, seed and coupling knobs shared by all simulators.

    ``n_smooth`` is the smoothing index of the kinetic coupling (math.inf
    for the limiting construction).  ``merge_tol`` is the base merge
    threshold, scaled by (1 + initial separation) per pair.
    """

    dt: float
    t_final: float
    seed: int
    merge_tol: float = 1e-8
    n_smooth: float = 1000

    def __post_init__(self):
        if self.dt <= 0 or self.t_final <= 0:
            raise ValueError("dt and t_final must be positive")
        if self.dt > self.t_final:
            raise ValueError("dt must not exceed t_final")
        if self.merge_tol <= 0:
            raise ValueError("merge_tol must be positive")

    @property
    def n_steps(self) -> int:
        return int(math.ceil(self.t_final / self.dt - 1e-12))


def derive_seed(seed: int, tag: str) -> int:
    """Stable 64-bit sub-seed for an estimator or replica stream."""
    digest = hashlib.blake2b(f"{seed}:{tag}".encode(), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def noise_normals(seed: int, step: int, channel: int, shape: tuple[int, ...]) -> np.ndarray:
    """Standard normals from the counter-based stream (seed, step, channel)."""
    key = np.array([seed & _MASK64, ((step << 3) | channel) & _MASK64], dtype=np.uint64)
    return np.random.Generator(np.random.Philox(key=key)).standard_normal(shape)


@dataclass(frozen=True)
class SdeSystem:
    """Constant-diffusion SDE: drift on R^dim, noise on the trailing
    ``noise_dim`` coordinates with scalar scale ``noise_scale``."""

    dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    noise_dim: int
    noise_scale: float


def system_of(model) -> SdeSystem:
    """Wrap a model as an SdeSystem (physical dynamics)."""
    if isinstance(model, EllipticModel):
        return SdeSystem(model.d, model.drift, model.d, model.sigma)
    if isinstance(model, NormalizedKineticModel):
        model = model.model
    if isinstance(model, KineticModel):
        return SdeSystem(
            2 * model.d, model.kinetic_drift, model.d, math.sqrt(2.0 * model.gamma)
        )
    if isinstance(model, SdeSystem):
        return model
    raise TypeError(f"unsupported model type {type(model).__name__}")


@dataclass
class Trajectory:
    times: np.ndarray           # (n_rec,)
    states: np.ndarray          # (n_rec, n_paths, dim)

    @property
    def terminal(self) -> np.ndarray:
        return self.states[-1]


@dataclass
class PairTrajectory:
    """Two coupled discretized paths with coupling-mode trace.

    ``rc``/``sc`` are the reflection/synchronous mixing weights where the
    coupling records them (rc = 1 pure reflection, 0 pure synchronous).
    ``merge_time`` is nan for pairs that never merged; after merging the two
    paths coincide exactly.  ``girsanov_logw`` is populated by the drifted
    coupling only.
    """

    times: np.ndarray                      # (n_rec,)
    z: np.ndarray                          # (n_rec, n_paths, dim)
    z_prime: np.ndarray                    # (n_rec, n_paths, dim)
    merge_time: np.ndarray                 # (n_paths,)
    rc: np.ndarray | None = None           # (n_rec, n_paths)
    sc: np.ndarray | None = None
    girsanov_logw: np.ndarray | None = None
    mode: str = ""

    @property
    def separation(self) -> np.ndarray:
        """|z - z'| per recorded time and path."""
        return np.linalg.norm(self.z - self.z_prime, axis=-1)

    @property
    def merged(self) -> np.ndarray:
        return ~np.isnan(self.merge_time)


def _as_batch(x0, n_paths: int, dim: int) -> np.ndarray:
    x0 = np.asarray(x0, dtype=float)
    if x0.ndim == 1:
        x0 = np.broadcast_to(x0, (n_paths, dim)).copy()
    if x0.shape != (n_paths, dim):
        raise ValueError(f"initial state must have shape ({n_paths},{dim}) or ({dim},)")
    return x0.copy()


def _record_index(n_steps: int, record_every: int) -> np.ndarray:
    idx = np.arange(0, n_steps + 1, record_every)
    if idx[-1] != n_steps:
        idx = np.append(idx, n_steps)
    return idx


def em_path(
    model,
    x0,
    cfg: SimConfig,
    n_paths: int = 1,
    record_every: int = 1,
    channel: int = CH_MAIN,
) -> Trajectory:
    """Euler-Maruyama ensemble: x <- x + drift(x) dt + scale sqrt(dt) xi.

    Kinetic models advance (x, v) with noise on the velocity block only.
    Aborts with :class:`SimulationBlowUp` on non-finite states.
    """
    sys_ = system_of(model)
    x = _as_batch(x0, n_paths, sys_.dim)
    cfg_steps = cfg.n_steps
    rec = _record_index(cfg_steps, record_every)
    out = np.empty((rec.size, n_paths, sys_.dim))
    out[0] = x
    rec_pos = 1
    sqdt = math.sqrt(cfg.dt)
    for step in range(cfg_steps):
        xi = noise_normals(cfg.seed, step, channel, (n_paths, sys_.noise_dim))
        x = x + sys_.drift(x) * cfg.dt
        x[:, sys_.dim - sys_.noise_dim :] += sys_.noise_scale * sqdt * xi
        if (step % 16 == 0 or step == cfg_steps - 1) and not np.all(np.isfinite(x)):
            bad = ~np.all(np.isfinite(x), axis=-1)
            raise SimulationBlowUp(step + 1, (step + 1) * cfg.dt, int(bad.sum()))
        if rec_pos < rec.size and step + 1 == rec[rec_pos]:
            out[rec_pos] = x
            rec_pos += 1
    return Trajectory(times=rec * cfg.dt, states=out)


def _merge_tol_effective(cfg: SimConfig, x0: np.ndarray, y0: np.ndarray) -> np.ndarray:
    return cfg.merge_tol * (1.0 + np.linalg.norm(x0 - y0, axis=-1))


def synchronous_pair(
    model, x0, y0, cfg: SimConfig, n_paths: int = 1, record_every: int = 1
) -> PairTrajectory:
    """Both copies driven by identical noise increments."""
    sys_ = system_of(model)
    x = _as_batch(x0, n_paths, sys_.dim)
    y = _as_batch(y0, n_paths, sys_.dim)
    tol = _merge_tol_effective(cfg, x, y)
    n_steps = cfg.n_steps
    rec = _record_index(n_steps, record_every)
    zs = np.empty((rec.size, n_paths, sys_.dim))
    zps = np.empty_like(zs)
    zs[0], zps[0] = x, y
    merge_time = np.full(n_paths, np.nan)
    merge_time[np.linalg.norm(x - y, axis=-1) <= tol] = 0.0
    y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
    rec_pos = 1
    sqdt = math.sqrt(cfg.dt)
    nd = sys_.dim - sys_.noise_dim
    for step in range(n_steps):
        xi = noise_normals(cfg.seed, step, CH_MAIN, (n_paths, sys_.noise_dim))
        noise = sys_.noise_scale * sqdt * xi
        x = x + sys_.drift(x) * cfg.dt
        x[:, nd:] += noise
        y = y + sys_.drift(y) * cfg.dt
        y[:, nd:] += noise
        active = np.isnan(merge_time)
        newly = active & (np.linalg.norm(x - y, axis=-1) <= tol)
        merge_time[newly] = (step + 1) * cfg.dt
        y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
        if step % 16 == 0 and not np.all(np.isfinite(x)):
            raise SimulationBlowUp(step + 1, (step + 1) * cfg.dt, int(np.sum(~np.isfinite(x))))
        if rec_pos < rec.size and step + 1 == rec[rec_pos]:
            zs[rec_pos], zps[rec_pos] = x, y
            rec_pos += 1
    return PairTrajectory(
        times=rec * cfg.dt, z=zs, z_prime=zps, merge_time=merge_time, mode="synchronous"
    )


def _unit_or_e1(delta: np.ndarray) -> np.ndarray:
    """delta/|delta| with the convention (1, 0, ..., 0) at delta = 0."""
    norm = np.linalg.norm(delta, axis=-1, keepdims=True)
    e = np.zeros_like(delta)
    e[..., 0] = 1.0
    safe = norm[..., 0] > 0.0
    e[safe] = delta[safe] / norm[safe]
    return e


def reflection_pair(
    model: EllipticModel, x0, y0, cfg: SimConfig, n_paths: int = 1, record_every: int = 1
) -> PairTrajectory:
    """Reflection coupling for an elliptic diffusion.

    The second copy is driven by (1 - 2 e e^T) dB with e the unit
    separation; the pair is declared merged when the signed radial
    coordinate of the updated difference crosses zero or the separation
    falls below the merge tolerance, and is advanced synchronously after.
    """
    if not isinstance(model, EllipticModel):
        raise TypeError("reflection coupling requires an elliptic model")
    d, sigma, b = model.d, model.sigma, model.drift
    x = _as_batch(x0, n_paths, d)
    y = _as_batch(y0, n_paths, d)
    tol = _merge_tol_effective(cfg, x, y)
    n_steps = cfg.n_steps
    rec = _record_index(n_steps, record_every)
    zs = np.empty((rec.size, n_paths, d))
    zps = np.empty_like(zs)
    zs[0], zps[0] = x, y
    rc_rec = np.empty((rec.size, n_paths))
    merge_time = np.full(n_paths, np.nan)
    merge_time[np.linalg.norm(x - y, axis=-1) <= tol] = 0.0
    y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
    rc_rec[0] = np.isnan(merge_time).astype(float)
    rec_pos = 1
    sqdt = math.sqrt(cfg.dt)
    for step in range(n_steps):
        active = np.isnan(merge_time)
        e = _unit_or_e1(x - y)
        dB = sqdt * noise_normals(cfg.seed, step, CH_MAIN, (n_paths, d))
        x_new = x + b(x) * cfg.dt + sigma * dB
        refl = dB - 2.0 * e * np.sum(e * dB, axis=-1, keepdims=True)
        y_new = np.where(
            active[:, None], y + b(y) * cfg.dt + sigma * refl, x_new
        )
        delta_new = x_new - y_new
        radial = np.sum(e * delta_new, axis=-1)
        newly = active & (
            (radial <= 0.0) | (np.linalg.norm(delta_new, axis=-1) <= tol)
        )
        merge_time[newly] = (step + 1) * cfg.dt
        x, y = x_new, y_new
        y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
        if step % 16 == 0 and not np.all(np.isfinite(x)):
            raise SimulationBlowUp(step + 1, (step + 1) * cfg.dt, int(np.sum(~np.isfinite(x))))
        if rec_pos < rec.size and step + 1 == rec[rec_pos]:
            zs[rec_pos], zps[rec_pos] = x, y
            rc_rec[rec_pos] = np.isnan(merge_time).astype(float)
            rec_pos += 1
    return PairTrajectory(
        times=rec * cfg.dt,
        z=zs,
        z_prime=zps,
        merge_time=merge_time,
        rc=rc_rec,
        sc=np.sqrt(1.0 - rc_rec**2),
        mode="reflection",
    )


def harnack_pair(
    model: EllipticModel,
    x0,
    y0,
    cfg: SimConfig,
    k_w: float,
    horizon: float | None = None,
    n_paths: int = 1,
    record_every: int = 1,
) -> PairTrajectory:
    """Synchronous coupling with an extra inward drift xi * e on the second
    copy, xi = k_w + |x0 - y0| / T, which forces merging by T.

    Records the Girsanov log-weight of the added drift,
    ln R = -(xi/sigma) int_0^tau e . dB - xi^2 tau / (2 sigma^2),
    so that averaging f(Y_T) R over paths estimates the semigroup applied
    at the second starting point.
    """
    if not isinstance(model, EllipticModel):
        raise TypeError("the drifted coupling requires an elliptic model")
    if k_w < 0:
        raise ValueError("k_w must be nonnegative")
    d, sigma, b = model.d, model.sigma, model.drift
    T = cfg.t_final if horizon is None else float(horizon)
    x = _as_batch(x0, n_paths, d)
    y = _as_batch(y0, n_paths, d)
    dist0 = np.linalg.norm(x - y, axis=-1)
    xi_drift = k_w + dist0 / T
    tol = _merge_tol_effective(cfg, x, y)
    # the radial part decreases by at least (xi - k_w) dt per unit time, so a
    # separation below that decrement crosses zero within the step
    cross_tol = np.maximum(tol, (xi_drift - k_w) * cfg.dt)
    n_steps = cfg.n_steps
    rec = _record_index(n_steps, record_every)
    zs = np.empty((rec.size, n_paths, d))
    zps = np.empty_like(zs)
    zs[0], zps[0] = x, y
    merge_time = np.full(n_paths, np.nan)
    merge_time[dist0 <= tol] = 0.0
    y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
    ito = np.zeros(n_paths)     # int e . dB up to merge
    tau = np.zeros(n_paths)
    rec_pos = 1
    sqdt = math.sqrt(cfg.dt)
    for step in range(n_steps):
        active = np.isnan(merge_time)
        e = _unit_or_e1(x - y)
        dB = sqdt * noise_normals(cfg.seed, step, CH_MAIN, (n_paths, d))
        x_new = x + b(x) * cfg.dt + sigma * dB
        y_new = np.where(
            active[:, None],
            y + b(y) * cfg.dt + sigma * dB + (xi_drift * cfg.dt)[:, None] * e,
            x_new,
        )
        ito[active] += np.sum(e * dB, axis=-1)[active]
        tau[active] = (step + 1) * cfg.dt
        delta_new = x_new - y_new
        radial = np.sum(e * delta_new, axis=-1)
        newly = active & (
            (radial <= 0.0) | (np.linalg.norm(delta_new, axis=-1) <= cross_tol)
        )
        merge_time[newly] = (step + 1) * cfg.dt
        x, y = x_new, y_new
        y[~np.isnan(merge_time)] = x[~np.isnan(merge_time)]
        if rec_pos < rec.size and step + 1 == rec[rec_pos]:
            zs[rec_pos], zps[rec_pos] = x, y
            rec_pos += 1
    logw = -(xi_drift / sigma) * ito - xi_drift**2 * tau / (2.0 * sigma**2)
    return PairTrajectory(
        times=rec * cfg.dt,
        z=zs,
        z_prime=zps,
        merge_time=merge_time,
        girsanov_logw=logw,
        mode="harnack",
    )


def rc_profile(r: np.ndarray, dq_norm: np.ndarray, r0: float, n_smooth: float) -> np.ndarray:
    """Reflection weight rc_n(r, |dq|): 0 when r >= r0 + 1/n or |dq| <= 1/n,
    1 when r <= r0 and |dq| >= 2/n, quarter-cosine ramps in between."""
    r = np.asarray(r, dtype=float)
    dq_norm = np.asarray(dq_norm, dtype=float)
    if math.isinf(n_smooth):
        return np.where((r <= r0) & (dq_norm > 0.0), 1.0, 0.0)
    u = np.clip((r - r0) * n_smooth, 0.0, 1.0)
    c = np.where(u >= 1.0, 0.0, np.cos(0.5 * np.pi * u))
    w = np.clip(dq_norm * n_smooth - 1.0, 0.0, 1.0)
    m = np.where(w >= 1.0, 1.0, np.sin(0.5 * np.pi * w))
    return c * m


def kinetic_coupled_pair(
    normalized: NormalizedKineticModel,
    table: MetricTable,
    params: MetricParams,
    z0,
    z0_prime,
    cfg: SimConfig,
    n_paths: int = 1,
    record_every: int = 1,
) -> PairTrajectory:
    """Reflection-synchronous coupling for a unit-friction kinetic diffusion.

    Both copies follow dX = V dt, dV = (-V - KX + g(X,V)) dt + sqrt(2) dB'.
    The second copy's Brownian is assembled from the main noise B and an
    independent B'' through the mixing weights rc/sc evaluated on
    (r, |dq|) = (theta |dx| + |dq|, |dx + dv|), reflecting across the unit
    q-separation.  The reassembled B' is again a Brownian motion, so the
    marginal law of the second copy is exact.
    """
    model = normalized.model
    if model.gamma != 1.0:
        raise ValueError("kinetic coupling runs on the normalized (gamma = 1) system")
    if not model.admissible:
        raise ValueError("model fails the admissibility condition 19 L2 <= min(1, k)")
    if not math.isinf(cfg.n_smooth) and cfg.n_smooth <= 0:
        raise ValueError("n_smooth must be positive")
    d = model.d
    theta, r0 = params.theta, params.r0
    z = _as_batch(z0, n_paths, 2 * d)
    zp = _as_batch(z0_prime, n_paths, 2 * d)
    n_steps = cfg.n_steps
    rec = _record_index(n_steps, record_every)
    zs = np.empty((rec.size, n_paths, 2 * d))
    zps = np.empty_like(zs)
    rc_rec = np.empty((rec.size, n_paths))
    zs[0], zps[0] = z, zp

    def weights(z_, zp_):
        dx = z_[:, :d] - zp_[:, :d]
        dq = dx + (z_[:, d:] - zp_[:, d:])
        dqn = np.linalg.norm(dq, axis=-1)
        r = theta * np.linalg.norm(dx, axis=-1) + dqn
        return rc_profile(r, dqn, r0, cfg.n_smooth), _unit_or_e1(dq)

    rc_rec[0], _ = weights(z, zp)
    rec_pos = 1
    sq2, sqdt = math.sqrt(2.0), math.sqrt(cfg.dt)
    for step in range(n_steps):
        rc, e = weights(z, zp)
        sc = np.sqrt(np.clip(1.0 - rc * rc, 0.0, 1.0))
        dB = sqdt * noise_normals(cfg.seed, step, CH_MAIN, (n_paths, d))
        dBpp = sqdt * noise_normals(cfg.seed, step, CH_AUX, (n_paths, d))
        rc_, sc_ = rc[:, None], sc[:, None]
        dB_rc = rc_ * dB + sc_ * dBpp
        dB_sc = sc_ * dB - rc_ * dBpp
        refl = dB_rc - 2.0 * e * np.sum(e * dB_rc, axis=-1, keepdims=True)
        z_new = z + model.control_drift(z) * cfg.dt
        z_new[:, d:] += sq2 * dB
        zp_new = zp + model.control_drift(zp) * cfg.dt
        zp_new[:, d:] += sq2 * (rc_ * refl + sc_ * dB_sc)
        z, zp = z_new, zp_new
        if step % 16 == 0 and not np.all(np.isfinite(z)):
            raise SimulationBlowUp(step + 1, (step + 1) * cfg.dt, int(np.sum(~np.isfinite(z))))
        if rec_pos < rec.size and step + 1 == rec[rec_pos]:
            zs[rec_pos], zps[rec_pos] = z, zp
            rc_rec[rec_pos], _ = weights(z, zp)
            rec_pos += 1
    return PairTrajectory(
        times=rec * cfg.dt,
        z=zs,
        z_prime=zps,
        merge_time=np.full(n_paths, np.nan),
        rc=rc_rec,
        sc=np.sqrt(1.0 - rc_rec**2),
        mode="kinetic",
    )


def pair_to_csv_rows(traj: PairTrajectory):
    """Yield CSV rows (path_id, step, t, z..., z'..., rc, merged)."""
    n_rec, n_paths, dim = traj.z.shape
    header = (
        ["path_id", "step", "t"]
        + [f"z{i}" for i in range(dim)]
        + [f"zp{i}" for i in range(dim)]
        + ["rc", "merged"]
    )
    yield header
    for p in range(n_paths):
        for i in range(n_rec):
            t = traj.times[i]
            merged = (not math.isnan(traj.merge_time[p])) and t >= traj.merge_time[p]
            rc = traj.rc[i, p] if traj.rc is not None else ""
            yield (
                [p, i, f"{t:.12g}"]
                + [f"{v:.17g}" for v in traj.z[i, p]]
                + [f"{v:.17g}" for v in traj.z_prime[i, p]]
                + [f"{rc:.12g}" if rc != "" else "", int(merged)]
            )
