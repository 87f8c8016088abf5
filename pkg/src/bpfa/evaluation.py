"""Held-out predictive metrics and image reconstruction."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import logsumexp

from .gibbs_baseline import ChainState
from .local import LocalOptions, LocalView, Strategy, StrategyTag, coordinate_ascent, draw_locals, gibbs_chain
from .model import Dataset, GlobalSample
from .variational import GlobalVariationalState, expected_global, sample_global

_LOG_2PI = math.log(2.0 * math.pi)
CHUNK_ROWS = 2048


@dataclass
class MetricRecord:
    wall_clock_s: float | None
    epoch: int
    pred_loglik: float
    pred_mse: float
    psnr_db: float | None
    strategy: str
    seed: object

    def to_json(self) -> str:
        d = asdict(self)
        if d["psnr_db"] is not None and math.isinf(d["psnr_db"]):
            d["psnr_db"] = "inf"
        return json.dumps(d, sort_keys=False)

    @classmethod
    def from_json(cls, line: str) -> "MetricRecord":
        d = json.loads(line)
        if d.get("psnr_db") == "inf":
            d["psnr_db"] = math.inf
        return cls(**d)


@dataclass
class PredictiveResult:
    loglik: float
    mse: float | None
    mean_prediction: np.ndarray


def _draw_predictions(source, tag: StrategyTag, Y, mask, M, rng, opts, betas):
    """Yield (prediction (B, D), gamma_obs) for each of the M joint draws."""
    if isinstance(source, GlobalVariationalState):
        s = tag.strategy
        if s is Strategy.MF_SVI:
            view = LocalView.from_moments(expected_global(source))
            params = coordinate_ascent(view, Y, mask, s, opts=opts)
            for beta in betas:
                z, w = draw_locals(params, view, s, rng, opts.fix_w)
                yield (z * w) @ beta.Phi, beta.gamma_obs
        elif s is Strategy.MIMNO_SVI:
            view = LocalView.from_moments(expected_global(source))
            state = None
            for i, beta in enumerate(betas):
                n = tag.n_samples + (tag.burn_in if i == 0 else 0)
                _, chain = gibbs_chain(view, Y, mask, tag, rng, init=state, opts=opts, n_sweeps=n, with_stats=False)
                state = (chain.z, chain.w)
                yield (chain.z * chain.w) @ beta.Phi, beta.gamma_obs
        elif s is Strategy.GIBBS_SSVI:
            state = None
            for i, beta in enumerate(betas):
                n = tag.n_samples + (tag.burn_in if i == 0 else 0)
                _, chain = gibbs_chain(LocalView.from_sample(beta), Y, mask, tag, rng, init=state, opts=opts,
                                       n_sweeps=n, with_stats=False)
                state = (chain.z, chain.w)
                yield (chain.z * chain.w) @ beta.Phi, beta.gamma_obs
        else:
            params = None
            for beta in betas:
                view = LocalView.from_sample(beta)
                # start from the previous draw's optimum, as the Gibbs chains do
                params = coordinate_ascent(view, Y, mask, s, init=params, opts=opts)
                z, w = draw_locals(params, view, s, rng, opts.fix_w)
                yield (z * w) @ beta.Phi, beta.gamma_obs
    else:
        for st, rows in source:
            yield (st.psi.Z[rows] * st.psi.W[rows]) @ st.beta.Phi, st.beta.gamma_obs


def predictive(global_view, tag: StrategyTag | None, train: Dataset, test_mask, Y_test=None, M: int = 64,
               rng=None, opts: LocalOptions = LocalOptions(), require_observed=True) -> PredictiveResult:
    """Monte Carlo predictive log-likelihood and mean prediction.

    ``global_view`` is a fitted :class:`GlobalVariationalState` (locals for
    each row are re-inferred from that row's training entries with ``tag``)
    or a sequence of :class:`ChainState` from the baseline sampler, whose
    last M states are used directly.  Held-out cells are ``test_mask`` with
    values from ``Y_test`` (defaults to ``train.Y``).  The log-likelihood is
    sum_i log (1/M) sum_m N(y_i,test | (z_i w_i) Phi, I / gamma_obs), summed
    over rows that have at least one held-out cell.
    """
    if M < 1:
        raise ValueError("M must be >= 1")
    rng = np.random.default_rng(rng)
    test_mask = np.asarray(test_mask, dtype=bool)
    Y_test = train.Y if Y_test is None else np.asarray(Y_test, dtype=float)
    scored = test_mask.any(axis=1)
    if require_observed and np.any(scored & ~train.mask.any(axis=1)):
        raise ValueError("a test row has no observed training entries")

    chain_states = None
    betas = None
    if isinstance(global_view, GlobalVariationalState):
        betas = [sample_global(global_view, rng) for _ in range(M)]
    else:
        chain_states = list(global_view)
        if not chain_states or not isinstance(chain_states[0], ChainState):
            raise TypeError("global_view must be a GlobalVariationalState or a list of ChainState")
        chain_states = chain_states[-M:]
        M = len(chain_states)

    N, D = train.Y.shape
    ll_rows = np.zeros(N)
    mean_pred = np.zeros((N, D))
    for start in range(0, N, CHUNK_ROWS):
        rows = np.arange(start, min(start + CHUNK_ROWS, N))
        Y, mask, tm = train.Y[rows], train.mask[rows], test_mask[rows]
        yt = Y_test[rows]
        source = global_view if chain_states is None else [(st, rows) for st in chain_states]
        ll = np.zeros((M, rows.size))
        for m, (pred, g) in enumerate(_draw_predictions(source, tag, Y, mask, M, rng, opts, betas)):
            resid = np.where(tm, yt - pred, 0.0)
            ll[m] = 0.5 * tm.sum(axis=1) * (math.log(g) - _LOG_2PI) - 0.5 * g * np.sum(resid ** 2, axis=1)
            mean_pred[rows] += pred
        ll_rows[rows] = logsumexp(ll, axis=0) - math.log(M)
    mean_pred /= M
    loglik = float(np.sum(ll_rows[scored]))
    mse = predictive_mse(mean_pred, Y_test, test_mask) if test_mask.any() else None
    return PredictiveResult(loglik, mse, mean_pred)


def predictive_loglik(global_view, tag, train: Dataset, test_mask, Y_test=None, M=64, rng=None,
                      opts: LocalOptions = LocalOptions()) -> float:
    return predictive(global_view, tag, train, test_mask, Y_test, M, rng, opts).loglik


def predictive_mse(predictions, truth, entries) -> float:
    """Mean squared error over ``entries`` (a boolean mask or (n, 2) indices)."""
    predictions = np.asarray(predictions, dtype=float)
    truth = np.asarray(truth, dtype=float)
    entries = np.asarray(entries)
    if entries.dtype == bool:
        diff = (predictions - truth)[entries]
    else:
        if entries.size == 0:
            raise ValueError("no entries to score")
        diff = predictions[entries[:, 0], entries[:, 1]] - truth[entries[:, 0], entries[:, 1]]
    if diff.size == 0:
        raise ValueError("no entries to score")
    return float(np.mean(diff ** 2))


def psnr(original, reconstruction, max_value: float = 255.0) -> float:
    """20 log10(max_value / rmse); +inf when the reconstruction is exact."""
    original = np.asarray(getattr(original, "pixels", original), dtype=float)
    reconstruction = np.asarray(getattr(reconstruction, "pixels", reconstruction), dtype=float)
    if original.shape != reconstruction.shape:
        raise ValueError("images must have the same shape")
    if max_value <= 0:
        raise ValueError("max_value must be positive")
    rmse = math.sqrt(float(np.mean((original - reconstruction) ** 2)))
    if rmse == 0:
        return math.inf
    return 20.0 * math.log10(max_value / rmse)


def reconstruct_from_patches(patches, image_dims, patch: int = 8) -> np.ndarray:
    """Average overlapping raster-ordered patches back into an image."""
    H, W = image_dims
    gh, gw = H - patch + 1, W - patch + 1
    patches = np.asarray(patches, dtype=float)
    if gh < 1 or gw < 1 or patches.shape != (gh * gw, patch * patch):
        raise ValueError(f"expected {(max(gh, 0) * max(gw, 0), patch * patch)} patch matrix for a {H}x{W} image, "
                         f"got {patches.shape}")
    total = np.zeros((H, W))
    count = np.zeros((H, W))
    for a in range(patch):
        for b in range(patch):
            total[a:a + gh, b:b + gw] += patches[:, a * patch + b].reshape(gh, gw)
            count[a:a + gh, b:b + gw] += 1.0
    return total / count


def coverage_counts(image_dims, patch: int = 8) -> np.ndarray:
    H, W = image_dims
    gh, gw = H - patch + 1, W - patch + 1
    count = np.zeros((H, W))
    for a in range(patch):
        for b in range(patch):
            count[a:a + gh, b:b + gw] += 1.0
    return count
