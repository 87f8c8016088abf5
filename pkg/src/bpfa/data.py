"""Data preparation: standardization, image patches, masking, held-out splits,
warm-start initialization and file IO."""
from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .gibbs_baseline import run_chain
from .model import Dataset, Hyperparameters
from .variational import GlobalVariationalState, random_init

logger = logging.getLogger(__name__)


@dataclass
class Image:
    pixels: np.ndarray
    max_value: float = 255.0

    def __post_init__(self):
        self.pixels = np.asarray(self.pixels, dtype=float)
        if self.pixels.ndim != 2:
            raise ValueError("only single-channel images are supported")

    @property
    def shape(self):
        return self.pixels.shape


@dataclass
class StandardizationRecord:
    means: np.ndarray
    stds: np.ndarray

    def apply(self, Y):
        return (Y - self.means) / self.stds

    def invert(self, Y):
        return Y * self.stds + self.means


def standardize(Y, mask=None):
    """Per-column zero mean, unit variance over observed entries (divisor n)."""
    Y = np.asarray(Y, dtype=float)
    mask = np.ones(Y.shape, dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    counts = mask.sum(axis=0)
    if np.any(counts < 2):
        raise ValueError(f"columns {np.flatnonzero(counts < 2).tolist()} have fewer than 2 observed entries")
    Yz = np.where(mask, Y, 0.0)
    means = Yz.sum(axis=0) / counts
    var = (np.where(mask, Y - means, 0.0) ** 2).sum(axis=0) / counts
    stds = np.sqrt(var)
    flat = stds == 0
    if np.any(flat):
        logger.warning("columns %s have zero variance; using std 1", np.flatnonzero(flat).tolist())
        stds = np.where(flat, 1.0, stds)
    rec = StandardizationRecord(means, stds)
    return np.where(mask, rec.apply(Y), 0.0), rec


def destandardize(Y, record: StandardizationRecord):
    return record.invert(np.asarray(Y, dtype=float))


def patch_grid(shape, patch: int = 8):
    H, W = shape
    if H < patch or W < patch:
        raise ValueError(f"image {H}x{W} is smaller than the {patch}x{patch} patch")
    return H - patch + 1, W - patch + 1


def patchify(img, patch: int = 8, pixel_mask=None) -> Dataset:
    """Overlapping patches in raster order, each flattened row-major.

    A per-pixel mask is propagated by lookup so every patch cell that
    references pixel (r, c) shares its observation bit.
    """
    pixels = img.pixels if isinstance(img, Image) else np.asarray(img, dtype=float)
    gh, gw = patch_grid(pixels.shape, patch)
    Y = sliding_window_view(pixels, (patch, patch)).reshape(gh * gw, patch * patch)
    mask = None
    if pixel_mask is not None:
        pixel_mask = np.asarray(pixel_mask, dtype=bool)
        if pixel_mask.shape != pixels.shape:
            raise ValueError("pixel mask shape must match the image")
        mask = sliding_window_view(pixel_mask, (patch, patch)).reshape(gh * gw, patch * patch)
    meta = {"image_shape": pixels.shape, "patch": patch}
    return Dataset(Y.copy(), None if mask is None else mask.copy(), meta=meta)


def make_interpolation_mask(img, observe_fraction: float, rng=None) -> np.ndarray:
    """Exactly floor(fraction * H * W) observed pixels, uniformly at random."""
    if not 0 < observe_fraction <= 1:
        raise ValueError("observe_fraction must lie in (0, 1]")
    rng = np.random.default_rng(rng)
    H, W = img.shape
    n = int(np.floor(observe_fraction * H * W))
    flat = np.zeros(H * W, dtype=bool)
    flat[rng.choice(H * W, size=n, replace=False)] = True
    return flat.reshape(H, W)


def make_denoising_task(img: Image, observe_fraction: float = 0.5, noise_sd: float = 15.0, rng=None):
    """Observed pixels get N(0, noise_sd^2) noise in pixel units, clamped to range.

    Returns ``(corrupted Image, pixel mask)``; unobserved pixels are zeroed.
    """
    if noise_sd < 0:
        raise ValueError("noise_sd must be >= 0")
    rng = np.random.default_rng(rng)
    mask = make_interpolation_mask(img, observe_fraction, rng)
    noisy = img.pixels + noise_sd * rng.standard_normal(img.shape)
    noisy = np.clip(noisy, 0.0, img.max_value)
    return Image(np.where(mask, noisy, 0.0), img.max_value), mask


@dataclass
class HoldoutSpec:
    test_entries: np.ndarray  # (n, 2) of (row, col)
    fraction: float
    seed: object = None

    def test_mask(self, shape) -> np.ndarray:
        m = np.zeros(shape, dtype=bool)
        m[self.test_entries[:, 0], self.test_entries[:, 1]] = True
        return m


def holdout_entries(data: Dataset, fraction: float, rng=None, seed=None):
    """Move a uniform random ``fraction`` of observed entries to a test set.

    Rows left with no training entry hand one of their test entries back and
    a replacement is drawn uniformly from rows that can spare one.
    """
    if not 0 < fraction < 1:
        raise ValueError("fraction must lie in (0, 1)")
    rng = np.random.default_rng(rng if seed is None else seed)
    obs = np.flatnonzero(data.mask.ravel())
    n_test = int(round(fraction * obs.size))
    D = data.D
    row_counts = data.mask.sum(axis=1)
    if n_test > obs.size - np.count_nonzero(row_counts):
        raise ValueError("cannot hold out that many entries while every row keeps one")
    test = np.zeros(data.mask.size, dtype=bool)
    test[rng.choice(obs, size=n_test, replace=False)] = True
    train = data.mask.ravel() & ~test
    while True:
        left = train.reshape(data.mask.shape).sum(axis=1)
        bad = np.flatnonzero((left == 0) & (row_counts > 0))
        if bad.size == 0:
            break
        for i in bad:
            cells = np.flatnonzero(test[i * D:(i + 1) * D]) + i * D
            give_back = rng.choice(cells)
            test[give_back] = False
            train[give_back] = True
            left = train.reshape(data.mask.shape).sum(axis=1)
            spare_rows = left >= 2
            spare_rows[i] = False
            candidates = np.flatnonzero(train & np.repeat(spare_rows, D))
            if candidates.size == 0:
                raise ValueError("impossible split: no row can spare a training entry")
            take = rng.choice(candidates)
            train[take] = False
            test[take] = True
    entries = np.column_stack(np.unravel_index(np.flatnonzero(test), data.mask.shape))
    train_ds = Dataset(data.Y, train.reshape(data.mask.shape), data.row_ids, dict(data.meta))
    return train_ds, HoldoutSpec(entries, fraction, seed)


def gibbs_warm_start(data: Dataset, hyper: Hyperparameters, subset_size: int, iterations: int,
                     rng=None) -> GlobalVariationalState:
    """Initialize q(beta) from a short Gibbs run on a random row subset.

    The final chain state is moment-matched: q(pi_k) has mean pi_k with the
    pseudo-count mass of a full-data posterior, q(phi_k) is centred on the
    sampled phi_k with precision D plus the subset evidence scaled to N, and
    the Gamma factors have the sampled precisions as means with the shapes a
    full-data batch update would give.
    """
    rng = np.random.default_rng(rng)
    N, D, K = data.N, data.D, hyper.K
    if iterations == 0:
        return random_init(hyper, D, rng)
    if not 1 <= subset_size <= N:
        raise ValueError("subset_size must lie in [1, N]")
    rows = np.sort(rng.choice(N, size=subset_size, replace=False))
    sub = data.subset(rows)
    final = run_chain(sub, hyper, iterations, thin=iterations, rng=rng).states[-1]
    beta, psi = final.beta, final.psi
    scale = N / subset_size
    mass = hyper.beta_a + hyper.beta_b + N
    U = psi.Z * psi.W
    Dobs = sub.mask.sum(axis=1)
    tau = D + scale * beta.gamma_obs * ((Dobs / D) @ (U ** 2))
    c = hyper.c_prior + 0.5 * scale * sub.mask.sum()
    e = hyper.e_prior + 0.5 * N * K
    return GlobalVariationalState(
        a=beta.pi * mass,
        b=(1.0 - beta.pi) * mass,
        c=c,
        d=c / beta.gamma_obs,
        e=e,
        f=e / beta.gamma_w,
        tau=tau,
        mu=tau[:, None] * beta.Phi,
    ).check()


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*([^\s#]+)")


def read_image(path) -> Image:
    """Read a binary (P5) portable graymap with 8-bit samples."""
    raw = Path(path).read_bytes()
    if raw[:2] != b"P5":
        raise ValueError(f"{path}: not a binary graymap (magic {raw[:2]!r})")
    pos = 2
    values = []
    for _ in range(3):
        m = _PGM_TOKEN.match(raw, pos)
        if m is None:
            raise ValueError(f"{path}: malformed header")
        try:
            values.append(int(m.group(1)))
        except ValueError:
            raise ValueError(f"{path}: malformed header") from None
        pos = m.end()
    width, height, maxval = values
    if not 0 < maxval < 256:
        raise ValueError(f"{path}: only 8-bit graymaps are supported (maxval {maxval})")
    pos += 1  # single whitespace byte before the raster
    if len(raw) - pos < width * height:
        raise ValueError(f"{path}: raster shorter than {width}x{height}")
    pixels = np.frombuffer(raw, dtype=np.uint8, count=width * height, offset=pos)
    return Image(pixels.reshape(height, width).astype(float), float(maxval))


def write_image(path, img) -> None:
    pixels = img.pixels if isinstance(img, Image) else np.asarray(img)
    max_value = img.max_value if isinstance(img, Image) else 255
    data = np.clip(np.rint(pixels), 0, max_value).astype(np.uint8)
    H, W = data.shape
    Path(path).write_bytes(b"P5\n%d %d\n%d\n" % (W, H, int(max_value)) + data.tobytes())


def _delimiter(path):
    return "," if str(path).endswith(".csv") else None


def read_matrix(path, mask_path=None) -> Dataset:
    """Delimited text, one row per line; NaN marks a missing cell.

    An optional 0/1 mask file of the same shape further restricts which
    cells count as observed.
    """
    Y = np.loadtxt(path, delimiter=_delimiter(path), ndmin=2)
    mask = ~np.isnan(Y)
    if mask_path is not None:
        extra = read_mask(mask_path)
        if extra.shape != Y.shape:
            raise ValueError(f"mask shape {extra.shape} != matrix shape {Y.shape}")
        mask &= extra
    return Dataset(np.nan_to_num(Y), mask).validate()


def write_matrix(path, Y, mask=None) -> None:
    Y = np.asarray(Y, dtype=float)
    if mask is not None:
        Y = np.where(np.asarray(mask, dtype=bool), Y, np.nan)
    np.savetxt(path, Y, fmt="%.17g", delimiter="," if _delimiter(path) else " ")


def read_mask(path) -> np.ndarray:
    M = np.loadtxt(path, delimiter=_delimiter(path), ndmin=2)
    if not np.all((M == 0) | (M == 1)):
        raise ValueError(f"{path}: mask entries must be 0 or 1")
    return M.astype(bool)


def write_mask(path, mask) -> None:
    np.savetxt(path, np.asarray(mask, dtype=int), fmt="%d", delimiter="," if _delimiter(path) else " ")
