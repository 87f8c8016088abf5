"""Uncollapsed Gibbs sampler over all local and global variables.

One sweep updates every row's (z_i, w_i) with the same per-feature kernel as
the Gibbs-SSVI local step, then pi, Phi (one feature at a time, exact
per-coordinate Gaussian conditionals), gamma_obs and gamma_w.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .checkpoint import read_checkpoint, write_checkpoint
from .local import LocalView, StrategyTag, Strategy, gibbs_chain
from .model import Dataset, GlobalSample, Hyperparameters, Locals

_LOCAL_TAG = StrategyTag(Strategy.GIBBS_SSVI, burn_in=0, n_samples=1)


@dataclass
class ChainState:
    beta: GlobalSample
    psi: Locals
    iteration: int = 0

    def copy(self) -> "ChainState":
        b = self.beta
        beta = GlobalSample(b.pi.copy(), b.Phi.copy(), b.gamma_w, b.gamma_obs)
        return ChainState(beta, Locals(self.psi.Z.copy(), self.psi.W.copy()), self.iteration)


@dataclass
class ChainRun:
    states: list
    timings: list = field(default_factory=list)  # cumulative seconds after each iteration


def init_chain(data: Dataset, hyper: Hyperparameters, rng=None) -> ChainState:
    rng = np.random.default_rng(rng)
    K, D, N = hyper.K, data.D, data.N
    pi = np.clip(rng.beta(hyper.beta_a, hyper.beta_b, size=K), 1e-12, 1 - 1e-12)
    Phi = rng.normal(0.0, 1.0 / np.sqrt(D), size=(K, D))
    Z = (rng.random((N, K)) < pi).astype(float)
    W = rng.standard_normal((N, K))
    return ChainState(GlobalSample(pi, Phi, 1.0, 1.0), Locals(Z, W), 0)


def gibbs_iteration(state: ChainState, data: Dataset, hyper: Hyperparameters, rng) -> ChainState:
    """One full sweep; returns a new state."""
    rng = np.random.default_rng(rng)
    beta = state.beta
    K, N = beta.K, data.N
    Mf = data.mask.astype(float)
    Ym = data.Y * Mf

    _, chain = gibbs_chain(LocalView.from_sample(beta), Ym, data.mask, _LOCAL_TAG, rng,
                           init=(state.psi.Z, state.psi.W), n_sweeps=1, with_stats=False)
    Z, W = chain.z, chain.w
    U = Z * W

    nz = Z.sum(axis=0)
    pi = rng.beta(hyper.beta_a + nz, hyper.beta_b + N - nz)
    pi = np.clip(pi, np.finfo(float).tiny, 1.0 - np.finfo(float).epsneg)

    g = beta.gamma_obs
    Phi = beta.Phi.copy()
    D = data.D
    r = (Ym - U @ Phi) * Mf
    for k in range(K):
        uk = U[:, k]
        rk = r + uk[:, None] * Phi[k] * Mf
        prec = D + g * ((uk ** 2) @ Mf)
        lin = g * (uk @ rk)
        Phi[k] = lin / prec + rng.standard_normal(D) / np.sqrt(prec)
        r = rk - uk[:, None] * Phi[k] * Mf

    n_obs = Mf.sum()
    gamma_obs = rng.gamma(hyper.c_prior + 0.5 * n_obs, 1.0 / (hyper.d_prior + 0.5 * np.sum(r ** 2)))
    gamma_w = rng.gamma(hyper.e_prior + 0.5 * N * K, 1.0 / (hyper.f_prior + 0.5 * np.sum(W ** 2)))
    return ChainState(GlobalSample(pi, Phi, gamma_w, gamma_obs), Locals(Z, W), state.iteration + 1)


def run_chain(data: Dataset, hyper: Hyperparameters, iterations: int, thin: int = 1, rng=None,
              state: ChainState | None = None, seed=None) -> ChainRun:
    """Run ``iterations`` sweeps, keeping every ``thin``-th state.

    With ``seed`` given, sweep ``t`` draws from ``default_rng([seed, t])`` so a
    chain resumed from a checkpoint continues exactly; otherwise ``rng`` is used.
    """
    if iterations < 1 or thin < 1:
        raise ValueError("iterations and thin must be >= 1")
    rng = np.random.default_rng(rng if seed is None else [seed, 0])
    if state is None:
        state = init_chain(data, hyper, rng)
    run = ChainRun(states=[])
    start = time.perf_counter()
    for _ in range(iterations):
        step_rng = rng if seed is None else np.random.default_rng([seed, state.iteration + 1])
        state = gibbs_iteration(state, data, hyper, step_rng)
        run.timings.append(time.perf_counter() - start)
        if state.iteration % thin == 0:
            run.states.append(state)
    return run


def save_chain(path, state: ChainState, seed=None, **extra) -> None:
    b = state.beta
    header = {"K": b.K, "D": b.D, "N": len(state.psi), "iteration": state.iteration, "seed": seed}
    header.update(extra)
    arrays = {"pi": b.pi, "Phi": b.Phi, "gamma_w": b.gamma_w, "gamma_obs": b.gamma_obs,
              "Z": state.psi.Z, "W": state.psi.W}
    write_checkpoint(path, "chain", header, arrays)


def load_chain(path):
    kind, header, a = read_checkpoint(path)
    if kind != "chain":
        raise ValueError(f"{path}: expected a chain checkpoint, found {kind!r}")
    beta = GlobalSample(a["pi"], a["Phi"], float(a["gamma_w"]), float(a["gamma_obs"]))
    return ChainState(beta, Locals(a["Z"], a["W"]), int(header["iteration"])), header
