"""Stochastic low-field degradation of high-quality slices.

The degradation runs four steps on a fixed pixel grid:

1. contrast remap: gray-matter intensities are scaled by ``contrast_gain``;
2. resolution loss: ``k``-fold block averaging, then bicubic re-upsampling;
3. tissue-wise additive Gaussian noise with ``sigma = mean_signal / snr``
   (background borrows the gray-matter sigma);
4. clamping to [0, 1].

Noise is Gaussian, not Rician.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .config import DataConfig, SimulatorConfig
from .core import (
    DatasetManifest,
    ManifestRecord,
    Volume,
    as_image,
    center_fit,
    derive_seed,
    digest_of,
    iter_slices,
    make_rng,
    split_manifest,
    write_raw,
)

log = logging.getLogger(__name__)

BACKGROUND, GM, WM = 0, 1, 2


class SamplingError(RuntimeError):
    """Rejection sampling ran out of attempts."""


class EmptyTissueWarning(UserWarning):
    pass


@dataclass(frozen=True)
class DegradationParams:
    snr_wm: float
    snr_gm: float
    contrast_gain: float
    downsample_factor: int
    mahalanobis: float
    label: str = "ind"

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "DegradationParams":
        return cls(**d)


def mahalanobis(x, mean, cov) -> float:
    diff = np.asarray(x, dtype=np.float64) - np.asarray(mean, dtype=np.float64)
    return float(np.sqrt(diff @ np.linalg.solve(np.asarray(cov, dtype=np.float64), diff)))


def _draw(mean, cov, rng) -> np.ndarray:
    chol = np.linalg.cholesky(np.asarray(cov, dtype=np.float64))
    z = np.asarray(rng.standard_normal(3), dtype=np.float64)
    return np.asarray(mean, dtype=np.float64) + chol @ z


def sample_params_ind(cfg: SimulatorConfig, rng) -> DegradationParams:
    """Rejection-sample in-distribution parameters.

    Accepted draws lie inside the unit Mahalanobis ellipsoid of the reference
    Gaussian and keep white-matter SNR above gray-matter SNR.
    """
    for _ in range(cfg.max_attempts):
        x = _draw(cfg.ind_mean, cfg.ind_cov, rng)
        d = mahalanobis(x, cfg.ind_mean, cfg.ind_cov)
        if d < 1.0 and x[0] > x[1] and np.all(x > 0):
            return DegradationParams(float(x[0]), float(x[1]), float(x[2]), cfg.downsample_factor, d, "ind")
    raise SamplingError(f"no in-distribution draw accepted in {cfg.max_attempts} attempts")


def sample_params_ood(cfg: SimulatorConfig, rng) -> DegradationParams:
    """Rejection-sample out-of-distribution parameters from the shifted Gaussian.

    Only the Mahalanobis gate (>= 1, measured against the in-distribution
    reference) and positivity are enforced; SNR ordering may invert.
    """
    for _ in range(cfg.max_attempts):
        x = _draw(cfg.ood_mean, cfg.ood_cov, rng)
        d = mahalanobis(x, cfg.ind_mean, cfg.ind_cov)
        if d >= 1.0 and np.all(x > 0):
            return DegradationParams(float(x[0]), float(x[1]), float(x[2]), cfg.downsample_factor, d, "ood")
    raise SamplingError(f"no out-of-distribution draw accepted in {cfg.max_attempts} attempts")


# --------------------------------------------------------------------------
# resampling


def _cubic_kernel(s: np.ndarray, a: float = -0.5) -> np.ndarray:
    s = np.abs(s)
    out = np.zeros_like(s)
    m1 = s <= 1
    m2 = (s > 1) & (s < 2)
    out[m1] = (a + 2) * s[m1] ** 3 - (a + 3) * s[m1] ** 2 + 1
    out[m2] = a * s[m2] ** 3 - 5 * a * s[m2] ** 2 + 8 * a * s[m2] - 4 * a
    return out


@lru_cache(maxsize=64)
def _upsample_matrix(n_in: int, k: int) -> np.ndarray:
    """(n_in*k, n_in) cubic-convolution matrix, pixel-center aligned.

    Samples outside the grid are linearly extrapolated from the two nearest
    edge samples, so linear ramps are reproduced exactly up to the border.
    """
    n_out = n_in * k
    pos = (np.arange(n_out) + 0.5) / k - 0.5
    base = np.floor(pos).astype(int)
    mat = np.zeros((n_out, n_in))
    for tap in range(-1, 3):
        j = base + tap
        w = _cubic_kernel(pos - j)
        for row in range(n_out):
            jj, ww = j[row], w[row]
            if ww == 0.0:
                continue
            if n_in == 1:
                mat[row, 0] += ww
            elif jj < 0:
                # x[j] = x[0] + j * (x[1] - x[0])
                mat[row, 0] += ww * (1 - jj)
                mat[row, 1] += ww * jj
            elif jj >= n_in:
                e = jj - (n_in - 1)
                mat[row, n_in - 1] += ww * (1 + e)
                mat[row, n_in - 2] -= ww * e
            else:
                mat[row, jj] += ww
    mat.setflags(write=False)
    return mat


def block_average(x: np.ndarray, k: int) -> np.ndarray:
    c, h, w = x.shape
    if h % k or w % k:
        raise ValueError(f"spatial size {h}x{w} not divisible by downsample factor {k}")
    return x.reshape(c, h // k, k, w // k, k).mean(axis=(2, 4), dtype=np.float64)


def bicubic_upsample(x: np.ndarray, k: int) -> np.ndarray:
    """Upsample ``(C, h, w)`` by an integer factor with cubic convolution."""
    _, h, w = x.shape
    ah = _upsample_matrix(h, k)
    aw = _upsample_matrix(w, k)
    return np.einsum("ij,cjl,ml->cim", ah, np.asarray(x, dtype=np.float64), aw)


def resolution_loss(x: np.ndarray, k: int) -> np.ndarray:
    if k == 1:
        return np.asarray(x, dtype=np.float32).copy()
    return bicubic_upsample(block_average(x, k), k).astype(np.float32)


def interpolation_baseline(low: np.ndarray, k: int) -> np.ndarray:
    """Block-average by ``k`` and bicubic-upsample back; identity for ``k == 1``."""
    low = as_image(low, "low")
    if k == 1:
        return low.copy()
    return np.clip(resolution_loss(low, k), 0.0, 1.0)


# --------------------------------------------------------------------------
# degradation


def degrade(high, mask, p: DegradationParams, rng, info: dict | None = None) -> np.ndarray:
    """Apply the low-field degradation to a ``(1, H, W)`` image in [0, 1].

    ``mask`` holds labels {0: background, 1: GM, 2: WM}. Infinite SNR means a
    noiseless tissue. When a tissue class is empty its contrast and noise
    steps are skipped; skipped tissue names are appended to
    ``info["skipped"]`` and an :class:`EmptyTissueWarning` is issued.
    """
    high = as_image(high, "high")
    mask = np.asarray(mask)
    if mask.shape != high.shape[-2:]:
        raise ValueError(f"mask shape {mask.shape} does not match image {high.shape[-2:]}")
    skipped = []
    gm = mask == GM
    wm = mask == WM
    for name, region in (("gm", gm), ("wm", wm)):
        if not region.any():
            skipped.append(name)
    if skipped:
        warnings.warn(f"empty tissue classes skipped: {skipped}", EmptyTissueWarning, stacklevel=2)
    if info is not None:
        info.setdefault("skipped", []).extend(skipped)

    x = high.astype(np.float64)
    if "gm" not in skipped and p.contrast_gain != 1.0:
        x[:, gm] *= p.contrast_gain
        peak = x.max()
        if peak > 1.0:
            x /= peak

    x = resolution_loss(x, p.downsample_factor).astype(np.float64)

    noise = rng.standard_normal(x.shape)
    sigma = np.zeros(mask.shape)
    sig_gm = 0.0
    if "gm" not in skipped:
        sig_gm = _sigma(x[:, gm].mean(), p.snr_gm)
        sigma[gm] = sig_gm
    if "wm" not in skipped:
        sigma[wm] = _sigma(x[:, wm].mean(), p.snr_wm)
    sigma[mask == BACKGROUND] = sig_gm
    x = x + noise * sigma[None]
    return np.clip(x, 0.0, 1.0).astype(np.float32)


def _sigma(mean_signal: float, snr: float) -> float:
    if not np.isfinite(snr):
        return 0.0
    return float(max(mean_signal, 0.0) / snr)


# --------------------------------------------------------------------------
# phantoms and masks


def make_phantom(size: tuple[int, int], rng) -> tuple[np.ndarray, np.ndarray]:
    """A random ellipse 'brain' with a WM core, GM shell and deep GM nuclei.

    Returns the ``(1, H, W)`` image and its ``(H, W)`` label mask.
    """
    h, w = size
    if h < 32 or w < 32:
        raise ValueError("phantom size must be at least 32x32")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    yy = (yy + 0.5) / h * 2 - 1
    xx = (xx + 0.5) / w * 2 - 1

    cy, cx = rng.uniform(-0.08, 0.08, size=2)
    ay, ax = rng.uniform(0.62, 0.82), rng.uniform(0.5, 0.7)
    theta = rng.uniform(-0.35, 0.35)
    ct, st = np.cos(theta), np.sin(theta)
    u = ct * (xx - cx) + st * (yy - cy)
    v = -st * (xx - cx) + ct * (yy - cy)
    ang = np.arctan2(v / ay, u / ax)
    # radial wobble of the cortex
    lobes = rng.integers(3, 7)
    phase = rng.uniform(0, 2 * np.pi)
    r = np.sqrt((u / ax) ** 2 + (v / ay) ** 2)
    outer = 1.0 + 0.05 * np.sin(lobes * ang + phase)
    shell = rng.uniform(0.18, 0.28)
    gyri = rng.integers(8, 14)
    inner = (1.0 - shell) * (1.0 + 0.06 * np.sin(gyri * ang + rng.uniform(0, 2 * np.pi)))

    mask = np.zeros((h, w), dtype=np.uint8)
    mask[r < outer] = GM
    mask[r < inner] = WM
    for _ in range(rng.integers(1, 4)):
        ny, nx = rng.uniform(-0.3, 0.3, size=2)
        by, bx = rng.uniform(0.06, 0.14, size=2)
        blob = ((u / ax - nx) / bx) ** 2 + ((v / ay - ny) / by) ** 2 < 1
        mask[blob & (mask == WM)] = GM

    img = np.zeros((h, w))
    img[mask == GM] = 0.55
    img[mask == WM] = 0.75
    # smooth multiplicative bias field and mild band-limited texture
    c = rng.uniform(-0.05, 0.05, size=3)
    bias = 1.0 + c[0] * xx + c[1] * yy + c[2] * xx * yy
    coarse = rng.standard_normal((8, 8))
    tex = _smooth_field(coarse, h, w)
    img = img * bias * (1.0 + 0.02 * tex)
    img[mask == BACKGROUND] = 0.0
    return np.clip(img, 0.0, 1.0).astype(np.float32)[None], mask


def _smooth_field(coarse: np.ndarray, h: int, w: int) -> np.ndarray:
    from scipy.ndimage import zoom

    f = zoom(coarse, (h / coarse.shape[0], w / coarse.shape[1]), order=3, mode="reflect", grid_mode=True)
    return f[:h, :w]


def _otsu(values: np.ndarray) -> float:
    from skimage.filters import threshold_otsu

    return float(threshold_otsu(values))


def estimate_mask(high) -> np.ndarray:
    """Label an image as background / GM / WM from its intensities.

    Foreground is everything above 10% of the image maximum; an Otsu threshold
    over the foreground separates darker GM from brighter WM. Near-constant
    images come back as all background.
    """
    x = as_image(high, "high")[0].astype(np.float64)
    mask = np.zeros(x.shape, dtype=np.uint8)
    if x.max() - x.min() < 1e-6:
        return mask
    fg = x > 0.1 * x.max()
    vals = x[fg]
    if vals.size == 0:
        return mask
    if vals.max() - vals.min() < 1e-6:
        mask[fg] = WM
        return mask
    thr = _otsu(vals)
    mask[fg & (x <= thr)] = GM
    mask[fg & (x > thr)] = WM
    return mask


# --------------------------------------------------------------------------
# datasets


def _volume_slices(data: DataConfig, volumes: Sequence[Volume]) -> dict[str, list[np.ndarray]]:
    """Group usable, size-fitted slices by subject (one subject per volume)."""
    by_subject: dict[str, list[np.ndarray]] = {}
    for stem, _, sl in iter_slices(volumes):
        sl = center_fit(sl, (data.image_size, data.image_size))
        m = estimate_mask(sl)
        if (m != BACKGROUND).mean() < data.min_foreground:
            continue
        by_subject.setdefault(stem, []).append(sl)
    return by_subject


def build_dataset(
    cfg: SimulatorConfig,
    data: DataConfig,
    out_dir,
    seed: int,
    volumes: Sequence[Volume] | None = None,
) -> DatasetManifest:
    """Synthesize paired samples and write them with a manifest under ``out_dir``.

    Phantom sources make one subject per record. Volume sources assign whole
    subjects to the train pool, then the InD test set, then the OOD test set,
    so test subjects never appear in train/val.
    """
    cfg.validate()
    out_dir = Path(out_dir)
    (out_dir / "pixels").mkdir(parents=True, exist_ok=True)
    wanted = [("pool", data.train_pool), ("test_ind", data.test_ind), ("test_ood", data.test_ood)]

    jobs: list[tuple[str, str, np.ndarray | None, np.ndarray | None]] = []
    if volumes is None:
        idx = 0
        for split, n in wanted:
            for _ in range(n):
                jobs.append((split, f"phantom{idx:05d}", None, None))
                idx += 1
    else:
        by_subject = _volume_slices(data, volumes)
        subjects = sorted(by_subject)
        order = [subjects[i] for i in make_rng(seed, "subjects").permutation(len(subjects))]
        it = iter(order)
        for split, n in wanted:
            taken = 0
            while taken < n:
                subj = next(it, None)
                if subj is None:
                    break
                for k, sl in enumerate(by_subject[subj][: n - taken]):
                    jobs.append((split, f"{subj}_s{k:03d}", sl, estimate_mask(sl)))
                taken = sum(j[0] == split for j in jobs)
            if taken < n:
                log.warning("only %d of %d %s records available from volumes", taken, n, split)

    records = []
    for i, (split, subject, high, mask) in enumerate(jobs):
        rec_seed = derive_seed(seed, "record", i)
        rng = make_rng(rec_seed)
        if high is None:
            high, mask = make_phantom((data.image_size, data.image_size), rng)
        if split == "test_ood":
            p = sample_params_ood(cfg, rng)
        else:
            p = sample_params_ind(cfg, rng)
        low = degrade(high, mask, p, rng)
        hp, lp = f"pixels/{subject}_high.raw", f"pixels/{subject}_low.raw"
        write_raw(high, out_dir / hp)
        write_raw(low, out_dir / lp)
        records.append(ManifestRecord(subject, split, hp, lp, p.to_json(), rec_seed))

    manifest = DatasetManifest(records, seed, digest_of(asdict(cfg)), out_dir)
    manifest = split_manifest(manifest, (data.train_fraction, 1 - data.train_fraction), make_rng(seed, "split"))
    manifest.write(out_dir)
    return manifest
