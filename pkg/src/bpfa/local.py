"""Local (per-row) inference strategies.

Every strategy works on a :class:`LocalView` of the globals: a noise precision,
a weight precision, per-feature log-odds, a (K, D) loading matrix and an extra
per-coordinate loading variance.  Unstructured methods (MF-SVI, Mimno-SVI)
build the view from expectations under q(beta); structured methods (MF-SSVI,
Titsias-SSVI, Gibbs-SSVI) build it from one sampled beta, where the extra
variance is zero.  With that substitution the five local objectives share one
set of formulas.

All functions are vectorized over rows: ``Y`` and ``mask`` are (B, D) and the
returned :class:`NaturalStats` is summed over the B rows.
"""
from __future__ import annotations

import enum
import logging
from dataclasses import dataclass

import numpy as np
from scipy.special import expit

from .model import GlobalSample
from .variational import Moments, NaturalStats

logger = logging.getLogger(__name__)

THETA_EPS = 1e-10


class Strategy(str, enum.Enum):
    MF_SVI = "mf-svi"
    MF_SSVI = "mf-ssvi"
    TITSIAS_SSVI = "titsias-ssvi"
    MIMNO_SVI = "mimno-svi"
    GIBBS_SSVI = "gibbs-ssvi"

    @property
    def structured(self) -> bool:
        """Whether the local step conditions on a sampled beta."""
        return self in (Strategy.MF_SSVI, Strategy.TITSIAS_SSVI, Strategy.GIBBS_SSVI)

    @property
    def sampling(self) -> bool:
        return self in (Strategy.MIMNO_SVI, Strategy.GIBBS_SSVI)

    @classmethod
    def parse(cls, value) -> "Strategy":
        if isinstance(value, cls):
            return value
        text = str(value).strip()
        for s in cls:
            if text.lower() in (s.value, s.name.lower()):
                return s
        raise ValueError(f"unknown strategy {value!r}; choose from {[s.value for s in cls]}")


@dataclass(frozen=True)
class StrategyTag:
    strategy: Strategy
    burn_in: int = 3
    n_samples: int = 3
    blocked: bool = True
    random_scan: bool = False

    def __post_init__(self):
        object.__setattr__(self, "strategy", Strategy.parse(self.strategy))
        if self.burn_in < 0 or self.n_samples < 1:
            raise ValueError("burn_in must be >= 0 and n_samples >= 1")

    @property
    def label(self) -> str:
        return self.strategy.name


GIBBS_INITS = ("prior", "half", "empty")


@dataclass(frozen=True)
class LocalOptions:
    tol: float = 1e-8
    max_sweeps: int = 100
    # clamp every weight to this value (w is then not inferred)
    fix_w: float | None = None
    paper_literal_mu: bool = False
    record_trace: bool = False
    # Gibbs chain start for z: "half" draws Bernoulli(0.5), "prior" draws from the view's pi,
    # "empty" starts with every feature off
    gibbs_init: str = "empty"

    def __post_init__(self):
        if self.gibbs_init not in GIBBS_INITS:
            raise ValueError(f"gibbs_init must be one of {GIBBS_INITS}, got {self.gibbs_init!r}")


@dataclass(frozen=True)
class LocalView:
    gamma_obs: float
    gamma_w: float
    logit: np.ndarray
    Phi: np.ndarray
    phi_var: np.ndarray

    @property
    def K(self) -> int:
        return self.Phi.shape[0]

    @classmethod
    def from_moments(cls, m: Moments) -> "LocalView":
        return cls(float(m.gamma_obs), float(m.gamma_w), np.asarray(m.logit), np.asarray(m.phi_mean), np.asarray(m.phi_var))

    @classmethod
    def from_sample(cls, beta: GlobalSample) -> "LocalView":
        with np.errstate(divide="ignore"):
            logit = np.log(beta.pi) - np.log1p(-beta.pi)
        return cls(beta.gamma_obs, beta.gamma_w, logit, beta.Phi, np.zeros(beta.K))

    @classmethod
    def of(cls, source) -> "LocalView":
        if isinstance(source, LocalView):
            return source
        if isinstance(source, Moments):
            return cls.from_moments(source)
        if isinstance(source, GlobalSample):
            return cls.from_sample(source)
        raise TypeError(f"cannot build a local view from {type(source).__name__}")


@dataclass
class LocalVariationalParams:
    """q(z_ik) = Bernoulli(theta), q(w_ik | ...) = N(nu / kappa, 1 / kappa)."""

    theta: np.ndarray
    nu: np.ndarray
    kappa: np.ndarray
    converged: np.ndarray | None = None
    trace: np.ndarray | None = None

    def __post_init__(self):
        self.theta = np.clip(np.atleast_2d(np.asarray(self.theta, dtype=float)), THETA_EPS, 1.0 - THETA_EPS)
        self.nu = np.atleast_2d(np.asarray(self.nu, dtype=float))
        self.kappa = np.atleast_2d(np.asarray(self.kappa, dtype=float))
        if np.any(self.kappa <= 0):
            raise ValueError("kappa must be positive")

    @classmethod
    def initial(cls, B: int, K: int, gamma_w: float) -> "LocalVariationalParams":
        return cls(np.full((B, K), 0.5), np.zeros((B, K)), np.full((B, K), float(gamma_w)))

    @property
    def mean_w(self) -> np.ndarray:
        return self.nu / self.kappa

    @property
    def second_w(self) -> np.ndarray:
        return (self.nu / self.kappa) ** 2 + 1.0 / self.kappa

    def copy(self) -> "LocalVariationalParams":
        return LocalVariationalParams(self.theta.copy(), self.nu.copy(), self.kappa.copy())


@dataclass
class LocalChain:
    """Final state and summaries of a batch of local Gibbs chains."""

    z: np.ndarray
    w: np.ndarray
    z_mean: np.ndarray
    samples: list | None = None


def _prepare(Y, mask):
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if mask is None:
        mask = np.ones(Y.shape, dtype=bool)
    Mf = np.atleast_2d(np.asarray(mask)).astype(float)
    if Mf.shape != Y.shape:
        raise ValueError(f"mask shape {Mf.shape} != Y shape {Y.shape}")
    Ym = np.where(Mf > 0, Y, 0.0)
    return Ym, Mf


def _family(variant) -> str:
    s = Strategy.parse(variant)
    if s is Strategy.TITSIAS_SSVI:
        return "titsias"
    if s in (Strategy.MF_SVI, Strategy.MF_SSVI):
        return "mf"
    raise ValueError(f"{s.name} has no closed-form local ELBO")


def _gram_diag(view: LocalView, Mf):
    """Masked |phi_k|^2 and the same plus the loading variance term, (B, K) each."""
    Gphi = Mf @ (view.Phi ** 2).T
    Gkk = Gphi + Mf.sum(axis=1)[:, None] * view.phi_var[None, :]
    return Gphi, Gkk


def _moments_of(params: LocalVariationalParams, family: str, gamma_w: float, fix_w):
    """E[z], E[z w], E[z w^2] and E[w^2] under the local q."""
    theta = params.theta
    if fix_w is not None:
        m = np.full_like(theta, fix_w)
        s = m ** 2
        return theta, theta * m, theta * s, s
    m, s = params.mean_w, params.second_w
    ew2 = s if family == "mf" else theta * s + (1.0 - theta) / gamma_w
    return theta, theta * m, theta * s, ew2


def _stats(view: LocalView, Ym, Mf, ez, u, v, ew2, literal_mu=False) -> NaturalStats:
    """Sum over rows of the natural-parameter contributions.

    ``u`` = E[z w] and ``v`` = E[z w^2] per (row, feature); cross-feature
    moments are taken as u_j u_k, which is exact for factorized q and for a
    single Gibbs state alike.
    """
    B, D = Ym.shape
    Phi = view.Phi
    Dobs = Mf.sum(axis=1)
    Gphi = Mf @ (Phi ** 2).T
    r = (Ym - u @ Phi) * Mf
    d_stat = 0.5 * (np.sum(r ** 2) + np.sum((v - u ** 2) * Gphi) + np.sum(v * Dobs[:, None] * view.phi_var[None, :]))
    g = 1.0 if literal_mu else view.gamma_obs
    mu_stat = g * (u.T @ r + ((u ** 2).T @ Mf) * Phi)
    # isotropic q(phi_k): precision evidence is averaged over all D coordinates
    tau_stat = view.gamma_obs * ((Dobs / D) @ v)
    return NaturalStats(
        z_sum=ez.sum(axis=0),
        z_comp_sum=(1.0 - ez).sum(axis=0),
        c_count=0.5 * float(Dobs.sum()),
        d_stat=float(d_stat),
        e_count=0.5 * B * view.K,
        f_stat=0.5 * float(np.sum(ew2)),
        tau_stat=tau_stat,
        mu_stat=mu_stat,
        count=float(B),
    )


def stats_from_variational(params: LocalVariationalParams, view, Y, mask, variant,
                           opts: LocalOptions = LocalOptions()) -> NaturalStats:
    view = LocalView.of(view)
    Ym, Mf = _prepare(Y, mask)
    family = _family(variant)
    ez, u, v, ew2 = _moments_of(params, family, view.gamma_w, opts.fix_w)
    return _stats(view, Ym, Mf, ez, u, v, ew2, opts.paper_literal_mu)


def _entropy_bernoulli(theta):
    return -(theta * np.log(theta) + (1.0 - theta) * np.log1p(-theta))


def _weight_terms(params, family, gamma_w, fix_w):
    """Weight prior expectation plus weight entropy, per row."""
    if fix_w is not None:
        return np.zeros(params.theta.shape[0])
    theta, kappa, s = params.theta, params.kappa, params.second_w
    if family == "mf":
        return np.sum(-0.5 * gamma_w * s - 0.5 * np.log(kappa), axis=1)
    ew2 = theta * s + (1.0 - theta) / gamma_w
    ent = -0.5 * (theta * (np.log(kappa) - 1.0) + (1.0 - theta) * (np.log(gamma_w) - 1.0))
    return np.sum(-0.5 * gamma_w * ew2 + ent, axis=1)


def local_elbo(params: LocalVariationalParams, view, Y, mask, variant,
               opts: LocalOptions = LocalOptions()) -> np.ndarray:
    """Per-row local ELBO, constants dropped.

    Evaluated from the explicit (B, K, K) Gram form, independently of the
    residual bookkeeping used inside the optimizer.
    """
    view = LocalView.of(view)
    Ym, Mf = _prepare(Y, mask)
    family = _family(variant)
    ez, u, v, _ = _moments_of(params, family, view.gamma_w, opts.fix_w)
    G = np.einsum("bd,kd,jd->bkj", Mf, view.Phi, view.Phi)
    h = Ym @ view.Phi.T
    Gdiag = np.einsum("bkk->bk", G) + Mf.sum(axis=1)[:, None] * view.phi_var[None, :]
    cross = np.einsum("bk,bkj,bj->b", u, G, u) - np.einsum("bk,bk->b", u ** 2, np.einsum("bkk->bk", G))
    lik = view.gamma_obs * np.sum(u * h, axis=1) - 0.5 * view.gamma_obs * (np.sum(v * Gdiag, axis=1) + cross)
    prior_z = params.theta @ view.logit
    return lik + _weight_terms(params, family, view.gamma_w, opts.fix_w) + prior_z + _entropy_bernoulli(params.theta).sum(axis=1)


def local_elbo_grad(params: LocalVariationalParams, view, Y, mask, variant):
    """Analytic gradient of :func:`local_elbo` in (theta, nu, kappa)."""
    view = LocalView.of(view)
    Ym, Mf = _prepare(Y, mask)
    family = _family(variant)
    g, gw = view.gamma_obs, view.gamma_w
    theta, nu, kappa = params.theta, params.nu, params.kappa
    m, s = params.mean_w, params.second_w
    u = theta * m
    G = np.einsum("bd,kd,jd->bkj", Mf, view.Phi, view.Phi)
    Gphi = np.einsum("bkk->bk", G)
    Gdiag = Gphi + Mf.sum(axis=1)[:, None] * view.phi_var[None, :]
    # h - sum_{j != k} u_j G_jk
    ht = Ym @ view.Phi.T - (np.einsum("bkj,bj->bk", G, u) - Gphi * u)

    dm = g * theta * ht
    if family == "mf":
        ds = -0.5 * g * theta * Gdiag - 0.5 * gw
        dk_direct = -0.5 / kappa
        dtheta = g * m * ht - 0.5 * g * s * Gdiag
    else:
        ds = -0.5 * g * theta * Gdiag - 0.5 * gw * theta
        dk_direct = -0.5 * theta / kappa
        dtheta = g * m * ht - 0.5 * g * s * Gdiag - 0.5 * gw * s + 0.5 - 0.5 * np.log(kappa) + 0.5 * np.log(gw)
    dtheta = dtheta + view.logit[None, :] + np.log1p(-theta) - np.log(theta)
    dnu = dm / kappa + ds * 2.0 * nu / kappa ** 2
    dkappa = dm * (-nu / kappa ** 2) + ds * (-2.0 * nu ** 2 / kappa ** 3 - 1.0 / kappa ** 2) + dk_direct
    return dtheta, dnu, dkappa


def _fast_elbo(view, family, params, Ym, Mf, r, Gphi, Gkk, fix_w):
    """Per-row ELBO from the maintained residual; equals :func:`local_elbo`."""
    ez, u, v, _ = _moments_of(params, family, view.gamma_w, fix_w)
    y2 = np.sum(Ym ** 2, axis=1)
    lik = -0.5 * view.gamma_obs * (np.sum(r ** 2, axis=1) - y2 + np.sum(v * Gkk - u ** 2 * Gphi, axis=1))
    return lik + _weight_terms(params, family, view.gamma_w, fix_w) + params.theta @ view.logit + _entropy_bernoulli(params.theta).sum(axis=1)


def coordinate_ascent(view, Y, mask, variant, init: LocalVariationalParams | None = None,
                      opts: LocalOptions = LocalOptions()) -> LocalVariationalParams:
    """Cyclic closed-form coordinate ascent on the MF or Titsias local ELBO.

    Per feature the (nu, kappa) block is set to its exact maximizer given
    theta, then theta is set to its exact maximizer, so the ELBO cannot
    decrease.  Stops when every row's relative ELBO change falls below
    ``opts.tol`` or after ``opts.max_sweeps`` sweeps.
    """
    view = LocalView.of(view)
    Ym, Mf = _prepare(Y, mask)
    family = _family(variant)
    B, K = Ym.shape[0], view.K
    g, gw, Phi, fix_w = view.gamma_obs, view.gamma_w, view.Phi, opts.fix_w
    params = (init.copy() if init is not None else LocalVariationalParams.initial(B, K, gw))
    theta, nu, kappa = params.theta, params.nu, params.kappa
    Gphi, Gkk = _gram_diag(view, Mf)
    u = theta * (fix_w if fix_w is not None else nu / kappa)
    r = (Ym - u @ Phi) * Mf

    elbo = _fast_elbo(view, family, params, Ym, Mf, r, Gphi, Gkk, fix_w)
    trace = [elbo]
    converged = np.zeros(B, dtype=bool)
    for _ in range(opts.max_sweeps):
        # converged rows are frozen; the rest are swept on a compacted copy
        idx = np.flatnonzero(~converged)
        sub = LocalVariationalParams(theta[idx], nu[idx], kappa[idx])
        th, nu_a, ka = sub.theta, sub.nu, sub.kappa
        Ma, Gk, ua, ra = Mf[idx], Gkk[idx], u[idx], r[idx]
        for k in range(K):
            phk = Phi[k]
            rk = ra + ua[:, k : k + 1] * phk * Ma
            ht = rk @ phk
            G = Gk[:, k]
            if fix_w is None:
                if family == "mf":
                    kap = g * th[:, k] * G + gw
                    m = g * th[:, k] * ht / kap
                else:
                    kap = g * G + gw
                    m = g * ht / kap
                ka[:, k] = kap
                nu_a[:, k] = m * kap
                s = m ** 2 + 1.0 / kap
                x = g * m * ht - 0.5 * g * s * G
                if family == "titsias":
                    x += -0.5 * gw * s + 0.5 - 0.5 * np.log(kap) + 0.5 * np.log(gw)
            else:
                m = fix_w
                x = g * fix_w * ht - 0.5 * g * fix_w ** 2 * G
            th[:, k] = np.clip(expit(x + view.logit[k]), THETA_EPS, 1.0 - THETA_EPS)
            ua[:, k] = th[:, k] * m
            ra = rk - ua[:, k : k + 1] * phk * Ma
        theta[idx], nu[idx], kappa[idx], u[idx], r[idx] = th, nu_a, ka, ua, ra
        new = elbo.copy()
        new[idx] = _fast_elbo(view, family, sub, Ym[idx], Ma, ra, Gphi[idx], Gk, fix_w)
        converged[idx] = np.abs(new[idx] - elbo[idx]) <= opts.tol * np.maximum(np.abs(elbo[idx]), 1.0)
        elbo = new
        trace.append(elbo)
        if converged.all():
            break
    if not converged.all():
        logger.debug("local coordinate ascent: %d/%d rows unconverged", int((~converged).sum()), B)
    params.converged = converged
    if opts.record_trace:
        params.trace = np.array(trace).T
    return params


def _variational_local(variant, view_source, Y, mask, init, opts):
    view = LocalView.of(view_source)
    params = coordinate_ascent(view, Y, mask, variant, init, opts)
    return params, stats_from_variational(params, view, Y, mask, variant, opts)


def mf_svi_local(moments: Moments, Y, mask=None, init=None, opts: LocalOptions = LocalOptions()):
    return _variational_local(Strategy.MF_SVI, moments, Y, mask, init, opts)


def mf_ssvi_local(beta: GlobalSample, Y, mask=None, init=None, opts: LocalOptions = LocalOptions()):
    return _variational_local(Strategy.MF_SSVI, beta, Y, mask, init, opts)


def titsias_ssvi_local(beta: GlobalSample, Y, mask=None, init=None, opts: LocalOptions = LocalOptions()):
    return _variational_local(Strategy.TITSIAS_SSVI, beta, Y, mask, init, opts)


def gibbs_chain(view, Y, mask, tag: StrategyTag, rng, init=None,
                opts: LocalOptions = LocalOptions(), keep_samples=False, n_sweeps=None, with_stats=True):
    """Run B independent local Gibbs chains targeting exp(log q(z, w)).

    The target is quadratic in each w_k and linear in each z_k.  With
    ``tag.blocked`` each feature's (z_k, w_k) pair is drawn jointly: z_k from
    its conditional with w_k integrated out, then w_k given z_k.  Otherwise
    z_k is drawn given the current w_k (single-site).  Either way w_k given
    z_k = 0 is drawn from N(0, 1/gamma_w).

    Returns ``(stats, chain)`` where ``stats`` averages the natural-parameter
    contributions over the ``tag.n_samples`` states kept after burn-in.
    """
    view = LocalView.of(view)
    rng = np.random.default_rng(rng)
    Ym, Mf = _prepare(Y, mask)
    B, K = Ym.shape[0], view.K
    g, gw, Phi, fix_w = view.gamma_obs, view.gamma_w, view.Phi, opts.fix_w
    if init is None:
        p_on = {"prior": expit(view.logit), "half": 0.5, "empty": 0.0}[opts.gibbs_init]
        z = (rng.random((B, K)) < p_on).astype(float)
        w = rng.standard_normal((B, K)) / np.sqrt(gw)
    else:
        z, w = (np.array(x, dtype=float) for x in init)
    if fix_w is not None:
        w = np.full((B, K), float(fix_w))
    _, Gkk = _gram_diag(view, Mf)
    A = g * Gkk + gw
    log_ratio = 0.5 * (np.log(gw) - np.log(A))
    u = z * w
    r = (Ym - u @ Phi) * Mf

    total = None
    z_acc = np.zeros((B, K))
    samples = [] if keep_samples else None
    n_total = tag.burn_in + tag.n_samples if n_sweeps is None else n_sweeps
    n_keep = min(tag.n_samples, n_total)
    for sweep in range(n_total):
        order = rng.permutation(K) if tag.random_scan else range(K)
        for k in order:
            phk = Phi[k]
            rk = r + u[:, k : k + 1] * phk * Mf
            ht = rk @ phk
            unif = rng.random(B)
            noise = rng.standard_normal(B)
            if fix_w is not None:
                lo = view.logit[k] + g * fix_w * ht - 0.5 * g * fix_w ** 2 * Gkk[:, k]
            elif tag.blocked:
                lo = view.logit[k] + 0.5 * (g * ht) ** 2 / A[:, k] + log_ratio[:, k]
            else:
                lo = view.logit[k] + g * w[:, k] * ht - 0.5 * g * w[:, k] ** 2 * Gkk[:, k]
            zk = unif < expit(lo)
            if fix_w is None:
                w[:, k] = np.where(zk, g * ht / A[:, k] + noise / np.sqrt(A[:, k]), noise / np.sqrt(gw))
            z[:, k] = zk
            u[:, k] = z[:, k] * w[:, k]
            r = rk - u[:, k : k + 1] * phk * Mf
        if sweep >= n_total - n_keep:
            z_acc += z
            if keep_samples:
                samples.append((z.copy(), w.copy()))
            if with_stats:
                st = _stats(view, Ym, Mf, z, u, u ** 2, w ** 2, opts.paper_literal_mu)
                total = st if total is None else total + st
    if total is None:
        stats = None
    else:
        stats = total.scaled(1.0 / n_keep)
        stats.count = float(B)
    chain = LocalChain(z=z, w=w, z_mean=z_acc / max(n_keep, 1), samples=samples)
    return stats, chain


def mimno_gibbs_local(moments: Moments, Y, mask, tag: StrategyTag, rng, init=None,
                      opts: LocalOptions = LocalOptions(), keep_samples=False):
    return gibbs_chain(LocalView.from_moments(moments), Y, mask, tag, rng, init, opts, keep_samples)


def gibbs_ssvi_local(beta: GlobalSample, Y, mask, tag: StrategyTag, rng, init=None,
                     opts: LocalOptions = LocalOptions(), keep_samples=False):
    return gibbs_chain(LocalView.from_sample(beta), Y, mask, tag, rng, init, opts, keep_samples)


def infer_local(tag: StrategyTag, source, Y, mask, rng=None, opts: LocalOptions = LocalOptions(), init=None):
    """Dispatch to the local routine for ``tag.strategy``.

    ``source`` is a :class:`GlobalSample` for structured strategies and a
    :class:`Moments` record otherwise.  Returns ``(stats, result)`` where
    ``result`` is a :class:`LocalVariationalParams` or a :class:`LocalChain`.
    """
    s = tag.strategy
    if s.sampling:
        return gibbs_chain(source, Y, mask, tag, rng, init, opts)
    params, stats = _variational_local(s, source, Y, mask, init, opts)
    return stats, params


def draw_locals(result, view, variant, rng, fix_w=None):
    """One (z, w) draw per row from a local result."""
    if isinstance(result, LocalChain):
        return result.z.copy(), result.w.copy()
    view = LocalView.of(view)
    theta = result.theta
    z = (rng.random(theta.shape) < theta).astype(float)
    if fix_w is not None:
        return z, np.full(theta.shape, float(fix_w))
    slab = result.mean_w + rng.standard_normal(theta.shape) / np.sqrt(result.kappa)
    if _family(variant) == "titsias":
        spike = rng.standard_normal(theta.shape) / np.sqrt(view.gamma_w)
        return z, np.where(z > 0, slab, spike)
    return z, slab
