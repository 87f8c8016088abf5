"""Global variational state and natural-gradient SVI updates.

q(pi_k) = Beta(a_k, b_k), q(gamma_obs) = Gamma(c, d), q(gamma_w) = Gamma(e, f)
and q(phi_k) = N(mu_k / tau_k, I / tau_k).  Every field is stored in the
coordinates where the SVI update is a convex combination: Beta pseudo-counts,
Gamma (shape, rate), Gaussian (precision, precision * mean).
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import digamma

from .checkpoint import read_checkpoint, write_checkpoint
from .model import GlobalSample, Hyperparameters

logger = logging.getLogger(__name__)

FLOOR = 1e-30


class DegenerateStateError(FloatingPointError):
    """A precision, shape or rate became non-positive or non-finite."""


@dataclass(frozen=True)
class GlobalVariationalState:
    a: np.ndarray
    b: np.ndarray
    c: float
    d: float
    e: float
    f: float
    tau: np.ndarray
    mu: np.ndarray

    @property
    def K(self) -> int:
        return self.a.shape[0]

    @property
    def D(self) -> int:
        return self.mu.shape[1]

    def as_tuple(self):
        return tuple(getattr(self, f.name) for f in fields(self))

    def allclose(self, other, rtol=1e-12, atol=0.0) -> bool:
        return all(np.allclose(x, y, rtol=rtol, atol=atol) for x, y in zip(self.as_tuple(), other.as_tuple()))

    def check(self) -> "GlobalVariationalState":
        for name in ("a", "b", "c", "d", "e", "f", "tau"):
            v = np.asarray(getattr(self, name))
            if not np.all(np.isfinite(v)) or np.any(v <= 0):
                raise DegenerateStateError(f"{name} must be positive and finite")
        if not np.all(np.isfinite(self.mu)):
            raise DegenerateStateError("mu must be finite")
        return self


@dataclass
class NaturalStats:
    """Per-datum (or summed) sufficient-statistic contributions.

    ``count`` records how many data rows were summed into this record.
    """

    z_sum: np.ndarray
    z_comp_sum: np.ndarray
    c_count: float
    d_stat: float
    e_count: float
    f_stat: float
    tau_stat: np.ndarray
    mu_stat: np.ndarray
    count: float = 1.0

    @classmethod
    def zeros(cls, K: int, D: int) -> "NaturalStats":
        return cls(np.zeros(K), np.zeros(K), 0.0, 0.0, 0.0, 0.0, np.zeros(K), np.zeros((K, D)), 0.0)

    def __add__(self, other: "NaturalStats") -> "NaturalStats":
        return NaturalStats(*(getattr(self, f.name) + getattr(other, f.name) for f in fields(self)))

    def scaled(self, s: float) -> "NaturalStats":
        return NaturalStats(*(getattr(self, f.name) * s for f in fields(self)))


def reduce_stats(batch) -> NaturalStats:
    if isinstance(batch, NaturalStats):
        return batch
    batch = list(batch)
    if not batch:
        raise ValueError("empty batch")
    total = batch[0]
    for s in batch[1:]:
        total = total + s
    return total


def prior_natural(hyper: Hyperparameters, D: int) -> GlobalVariationalState:
    K = hyper.K
    return GlobalVariationalState(
        a=np.full(K, hyper.beta_a),
        b=np.full(K, hyper.beta_b),
        c=hyper.c_prior,
        d=hyper.d_prior,
        e=hyper.e_prior,
        f=hyper.f_prior,
        tau=np.full(K, float(D)),
        mu=np.zeros((K, D)),
    )


def step_size(t: int, hyper: Hyperparameters | None = None, *, t0: float | None = None,
              zeta: float | None = None) -> float:
    """rho_t = (t + t0)^(-zeta); explicit ``t0``/``zeta`` override ``hyper``.

    The explicit form accepts schedules outside the Robbins-Monro range
    (e.g. zeta = 0.5) for comparison runs.
    """
    if t < 1:
        raise ValueError("iteration index starts at 1")
    t0 = hyper.t0 if t0 is None else t0
    zeta = hyper.zeta if zeta is None else zeta
    if t0 < 0 or zeta <= 0:
        raise ValueError("need t0 >= 0 and zeta > 0")
    return float((t + t0) ** (-zeta))


def _target(prior: GlobalVariationalState, stats: NaturalStats, scale: float) -> GlobalVariationalState:
    return GlobalVariationalState(
        a=prior.a + scale * stats.z_sum,
        b=prior.b + scale * stats.z_comp_sum,
        c=prior.c + scale * stats.c_count,
        d=prior.d + scale * stats.d_stat,
        e=prior.e + scale * stats.e_count,
        f=prior.f + scale * stats.f_stat,
        tau=prior.tau + scale * stats.tau_stat,
        mu=prior.mu + scale * stats.mu_stat,
    )


def _floor(state: GlobalVariationalState) -> GlobalVariationalState:
    values = {}
    for f in fields(state):
        v = getattr(state, f.name)
        if f.name != "mu" and np.any(np.asarray(v) < FLOOR):
            logger.warning("clamping %s at %g", f.name, FLOOR)
            v = np.maximum(v, FLOOR) if np.ndim(v) else max(float(v), FLOOR)
        values[f.name] = v
    return GlobalVariationalState(**values)


def svi_step(state: GlobalVariationalState, batch, N: int, rho: float,
             hyper: Hyperparameters) -> GlobalVariationalState:
    """lambda <- (1 - rho) lambda + rho (eta + N/|batch| sum_i eta_i)."""
    if not 0.0 <= rho <= 1.0:
        raise ValueError(f"rho must lie in [0, 1], got {rho}")
    stats = reduce_stats(batch)
    if stats.count <= 0:
        raise ValueError("batch must contain at least one datum")
    target = _target(prior_natural(hyper, state.D), stats, N / stats.count)
    new = GlobalVariationalState(*((1.0 - rho) * x + rho * y for x, y in zip(state.as_tuple(), target.as_tuple())))
    for name in ("a", "b", "c", "d", "e", "f", "tau"):
        v = np.asarray(getattr(new, name))
        if not np.all(np.isfinite(v)) or np.any(v < 0):
            raise DegenerateStateError(f"{name} left the positive orthant after an SVI step")
    if not np.all(np.isfinite(new.mu)):
        raise DegenerateStateError("mu is not finite after an SVI step")
    # underflow to exactly zero is floored rather than raised
    return _floor(new)


def full_batch_cavi_update(state: GlobalVariationalState, all_stats, N: int,
                           hyper: Hyperparameters) -> GlobalVariationalState:
    """Closed-form batch M-step; ``all_stats`` must cover all N rows."""
    stats = reduce_stats(all_stats)
    if stats.count != N:
        raise ValueError(f"full-batch update needs stats for all {N} rows, got {stats.count}")
    return svi_step(state, stats, N, 1.0, hyper)


@dataclass(frozen=True)
class Moments:
    """Expectations under q of the quantities the local updates consume."""

    logit: np.ndarray  # E[log pi - log(1 - pi)]
    gamma_obs: float
    gamma_w: float
    phi_mean: np.ndarray  # (K, D)
    phi_var: np.ndarray  # (K,), per-coordinate variance 1 / tau_k

    @property
    def phi_sq_norm(self) -> np.ndarray:
        """E[phi_k phi_k^T] = |mu_k|^2 / tau_k^2 + D / tau_k."""
        return np.sum(self.phi_mean ** 2, axis=1) + self.phi_mean.shape[1] * self.phi_var


def expected_global(state: GlobalVariationalState) -> Moments:
    return Moments(
        logit=digamma(state.a) - digamma(state.b),
        gamma_obs=state.c / state.d,
        gamma_w=state.e / state.f,
        phi_mean=state.mu / state.tau[:, None],
        phi_var=1.0 / state.tau,
    )


def sample_global(state: GlobalVariationalState, rng=None) -> GlobalSample:
    rng = np.random.default_rng(rng)
    pi = rng.beta(state.a, state.b)
    pi = np.clip(pi, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)
    sd = 1.0 / np.sqrt(state.tau)
    Phi = state.mu / state.tau[:, None] + sd[:, None] * rng.standard_normal(state.mu.shape)
    gamma_obs = rng.gamma(state.c, 1.0 / state.d)
    gamma_w = rng.gamma(state.e, 1.0 / state.f)
    return GlobalSample(pi, Phi, max(gamma_w, FLOOR), max(gamma_obs, FLOOR))


def random_init(hyper: Hyperparameters, D: int, rng=None) -> GlobalVariationalState:
    """Random starting point on the prior scale.

    Beta counts and Gamma parameters sit one unit above the prior; loading
    means are drawn so E[phi_kd] has variance 1/D.
    """
    rng = np.random.default_rng(rng)
    K = hyper.K
    return GlobalVariationalState(
        a=np.full(K, hyper.beta_a + 1.0),
        b=np.full(K, hyper.beta_b + 1.0),
        c=hyper.c_prior + 1.0,
        d=hyper.d_prior + 1.0,
        e=hyper.e_prior + 1.0,
        f=hyper.f_prior + 1.0,
        tau=np.full(K, float(D)),
        mu=np.sqrt(D) * rng.standard_normal((K, D)),
    )


def save_state(path, state: GlobalVariationalState, iteration: int = 0, seed=None, **extra) -> None:
    header = {"K": state.K, "D": state.D, "iteration": iteration, "seed": seed}
    header.update(extra)
    arrays = {f.name: getattr(state, f.name) for f in fields(state)}
    write_checkpoint(path, "svi", header, arrays)


def load_state(path):
    """Return ``(state, header)``."""
    kind, header, arrays = read_checkpoint(path)
    if kind != "svi":
        raise ValueError(f"{path}: expected an svi checkpoint, found {kind!r}")
    state = GlobalVariationalState(**{f.name: arrays[f.name] for f in fields(GlobalVariationalState)})
    if state.K != int(header["K"]) or state.D != int(header["D"]):
        raise ValueError(f"{path}: header dimensions disagree with the stored arrays")
    for name in ("c", "d", "e", "f"):
        object.__setattr__(state, name, float(getattr(state, name)))
    return state, header
