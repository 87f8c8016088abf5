"""Beta process factor analysis: hyperparameters, prior sampling, log joint.

The generative model for row ``i`` with a K-atom truncated beta process::

    pi_k    ~ Beta(a/K, b(K-1)/K)
    phi_k   ~ N(0, I/D)
    z_ik    ~ Bernoulli(pi_k)
    w_ik    ~ N(0, 1/gamma_w)
    y_i     = (z_i * w_i) Phi + eps_i,   eps_i ~ N(0, I/gamma_obs)

with Gamma(c', d') and Gamma(e', f') priors (shape, rate) on ``gamma_obs``
and ``gamma_w``.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import betaln, gammaln, xlogy

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True, kw_only=True)
class Hyperparameters:
    K: int
    a: float = 10.0
    b: float = 10.0
    c_prior: float = 1.0
    d_prior: float = 10.0
    e_prior: float = 1.0
    f_prior: float = 1.0
    t0: float = 0.0
    zeta: float = 0.75

    def __post_init__(self):
        for name in ("a", "b", "c_prior", "d_prior", "e_prior", "f_prior"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0, got {getattr(self, name)}")
        if int(self.K) != self.K or self.K < 2:
            # K=1 makes the second beta parameter b(K-1)/K zero
            raise ValueError(f"K must be an integer >= 2, got {self.K}")
        if self.t0 < 0:
            raise ValueError(f"t0 must be >= 0, got {self.t0}")
        if not 0.5 < self.zeta <= 1.0:
            raise ValueError(f"zeta must lie in (0.5, 1], got {self.zeta}")

    @property
    def beta_a(self) -> float:
        return self.a / self.K

    @property
    def beta_b(self) -> float:
        return self.b * (self.K - 1) / self.K

    def replace(self, **changes) -> "Hyperparameters":
        return replace(self, **changes)


@dataclass(frozen=True)
class GlobalSample:
    """One concrete draw of the global variables."""

    pi: np.ndarray
    Phi: np.ndarray
    gamma_w: float
    gamma_obs: float

    def __post_init__(self):
        pi = np.asarray(self.pi, dtype=float)
        Phi = np.atleast_2d(np.asarray(self.Phi, dtype=float))
        if pi.ndim != 1 or Phi.shape[0] != pi.shape[0]:
            raise ValueError(f"Phi rows ({Phi.shape[0]}) must match len(pi) ({pi.shape[0]})")
        if np.any((pi < 0) | (pi > 1)):
            raise ValueError("pi entries must lie in [0, 1]")
        if not (self.gamma_w > 0 and self.gamma_obs > 0):
            raise ValueError("precisions must be positive")
        object.__setattr__(self, "pi", pi)
        object.__setattr__(self, "Phi", Phi)
        object.__setattr__(self, "gamma_w", float(self.gamma_w))
        object.__setattr__(self, "gamma_obs", float(self.gamma_obs))

    @property
    def K(self) -> int:
        return self.pi.shape[0]

    @property
    def D(self) -> int:
        return self.Phi.shape[1]


@dataclass(frozen=True)
class LocalSample:
    z: np.ndarray
    w: np.ndarray


@dataclass
class Locals:
    """Local variables for N rows stored as two (N, K) arrays.

    Indexing yields a :class:`LocalSample` for a single row, so this behaves
    like a list of per-row samples without the per-row allocation.
    """

    Z: np.ndarray
    W: np.ndarray

    def __post_init__(self):
        self.Z = np.atleast_2d(np.asarray(self.Z, dtype=float))
        self.W = np.atleast_2d(np.asarray(self.W, dtype=float))
        if self.Z.shape != self.W.shape:
            raise ValueError("Z and W must have the same shape")
        if not np.all((self.Z == 0) | (self.Z == 1)):
            raise ValueError("Z entries must be 0 or 1")

    def __len__(self):
        return self.Z.shape[0]

    def __getitem__(self, i) -> LocalSample:
        return LocalSample(self.Z[i], self.W[i])

    @classmethod
    def from_samples(cls, samples) -> "Locals":
        samples = list(samples)
        return cls(np.array([s.z for s in samples]), np.array([s.w for s in samples]))

    @property
    def loadings(self) -> np.ndarray:
        return self.Z * self.W


@dataclass
class Dataset:
    """Data matrix with an observation mask (True = observed)."""

    Y: np.ndarray
    mask: np.ndarray = None
    row_ids: np.ndarray = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.Y = np.atleast_2d(np.asarray(self.Y, dtype=float))
        if self.mask is None:
            self.mask = np.ones(self.Y.shape, dtype=bool)
        self.mask = np.asarray(self.mask, dtype=bool)
        if self.mask.shape != self.Y.shape:
            raise ValueError(f"mask shape {self.mask.shape} != Y shape {self.Y.shape}")
        if self.row_ids is None:
            self.row_ids = np.arange(self.Y.shape[0])
        self.row_ids = np.asarray(self.row_ids)
        if self.row_ids.shape[0] != self.Y.shape[0]:
            raise ValueError("row_ids length must equal the number of rows")
        # unobserved cells carry no information; keep them finite
        self.Y = np.where(self.mask, self.Y, 0.0)

    @property
    def N(self) -> int:
        return self.Y.shape[0]

    @property
    def D(self) -> int:
        return self.Y.shape[1]

    def validate(self) -> "Dataset":
        empty = ~self.mask.any(axis=1)
        if np.any(empty):
            raise ValueError(f"{int(empty.sum())} rows have no observed entries, e.g. row {self.row_ids[empty][0]}")
        return self

    def subset(self, rows) -> "Dataset":
        rows = np.asarray(rows)
        return Dataset(self.Y[rows], self.mask[rows], self.row_ids[rows], dict(self.meta))


def sample_truncated_beta_process(hyper: Hyperparameters, rng=None) -> np.ndarray:
    rng = np.random.default_rng(rng)
    pi = rng.beta(hyper.beta_a, hyper.beta_b, size=hyper.K)
    # small first shape parameters underflow to exactly 0 in double precision
    return np.clip(pi, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)


def sample_generative(hyper: Hyperparameters, N: int, D: int, gamma_w: float = 1.0,
                      gamma_obs: float = 100.0, rng=None, pi=None):
    """Draw a synthetic dataset from the prior with fixed precisions.

    Returns ``(Dataset, GlobalSample, Locals)``; the last two are ground truth.
    ``pi`` overrides the beta process draw (e.g. all zeros for a noise-only set).
    """
    if N < 1 or D < 1:
        raise ValueError("N and D must be >= 1")
    rng = np.random.default_rng(rng)
    K = hyper.K
    if pi is None:
        pi = sample_truncated_beta_process(hyper, rng)
    pi = np.asarray(pi, dtype=float)
    Phi = rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D))
    Z = (rng.random((N, K)) < pi).astype(float)
    W = rng.normal(0.0, 1.0 / np.sqrt(gamma_w), size=(N, K))
    E = rng.normal(0.0, 1.0 / np.sqrt(gamma_obs), size=(N, D))
    Y = (Z * W) @ Phi + E
    beta = GlobalSample(pi, Phi, gamma_w, gamma_obs)
    return Dataset(Y), beta, Locals(Z, W)


def _gamma_logpdf(x, shape, rate):
    return shape * np.log(rate) - gammaln(shape) + (shape - 1.0) * np.log(x) - rate * x


def log_prior(beta: GlobalSample, hyper: Hyperparameters) -> float:
    a0, b0 = hyper.beta_a, hyper.beta_b
    pi, D = beta.pi, beta.D
    with np.errstate(divide="ignore"):
        lp = np.sum(xlogy(a0 - 1.0, pi) + xlogy(b0 - 1.0, 1.0 - pi) - betaln(a0, b0))
    lp += np.sum(0.5 * (np.log(D) - _LOG_2PI) - 0.5 * D * beta.Phi ** 2)
    lp += _gamma_logpdf(beta.gamma_obs, hyper.c_prior, hyper.d_prior)
    lp += _gamma_logpdf(beta.gamma_w, hyper.e_prior, hyper.f_prior)
    return float(lp)


def log_joint(beta: GlobalSample, psi, data: Dataset, hyper: Hyperparameters) -> float:
    """Exact log p(beta, psi, Y) with the likelihood over observed entries only."""
    if not isinstance(psi, Locals):
        psi = Locals.from_samples(psi) if len(psi) else Locals(np.zeros((0, beta.K)), np.zeros((0, beta.K)))
    if len(psi) != data.N:
        raise ValueError(f"{len(psi)} local samples for {data.N} rows")
    if data.N == 0:
        return log_prior(beta, hyper)

    with np.errstate(divide="ignore"):
        bern = xlogy(psi.Z, beta.pi) + xlogy(1.0 - psi.Z, 1.0 - beta.pi)
    if np.any(np.isneginf(bern)):
        return -np.inf
    gw, go = beta.gamma_w, beta.gamma_obs
    lw = np.sum(0.5 * (np.log(gw) - _LOG_2PI) - 0.5 * gw * psi.W ** 2)
    resid = (data.Y - psi.loadings @ beta.Phi)[data.mask]
    ly = resid.size * 0.5 * (np.log(go) - _LOG_2PI) - 0.5 * go * np.sum(resid ** 2)
    return float(log_prior(beta, hyper) + np.sum(bern) + lw + ly)
