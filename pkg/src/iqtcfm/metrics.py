"""Image quality metrics and evaluation reports.

PSNR is capped at 100 dB for identical images. SSIM uses an 11x11 Gaussian
window (sigma 1.5), K1=0.01, K2=0.03, data range 1 and averages over valid
window centers only. Aggregates use the population standard deviation.
"""

from __future__ import annotations

import csv
import importlib
import io
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .core import check_same_shape

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
ERROR_MAP_MAX = 0.25
PUBLISHED_PARAMS = 5_253_249

METHOD_TITLES = {"interpolation": "Interpolation", "external": "External", "cfm": "IQT-CFM"}
METRIC_ROWS = (("psnr", "PSNR↑"), ("ssim", "SSIM↑"), ("lpips", "LPIPS↓"), ("params", "Params↓"))


def psnr(ref, test, max_val: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB, capped at ``PSNR_CAP`` for zero error."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    check_same_shape(ref, test, "psnr inputs")
    mse = np.mean((ref - test) ** 2)
    if mse == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * np.log10(max_val**2 / mse)))


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size, dtype=np.float64) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    g /= g.sum()
    return g


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    from scipy.signal import convolve

    k = g[:, None] * g[None, :]
    return convolve(img, k, mode="valid", method="direct")


def ssim(ref, test, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03, data_range: float = 1.0) -> float:
    """Mean structural similarity of two single-channel images."""
    ref = np.asarray(ref, dtype=np.float64)
    test = np.asarray(test, dtype=np.float64)
    check_same_shape(ref, test, "ssim inputs")
    if ref.ndim == 3:
        if ref.shape[0] != 1:
            raise ValueError("ssim expects a single channel")
        ref, test = ref[0], test[0]
    if min(ref.shape) < window:
        raise ValueError(f"image {ref.shape} smaller than the {window}x{window} window")
    g = gaussian_window(window, sigma)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2
    mu_x = _filter_valid(ref, g)
    mu_y = _filter_valid(test, g)
    sxx = _filter_valid(ref * ref, g) - mu_x**2
    syy = _filter_valid(test * test, g) - mu_y**2
    sxy = _filter_valid(ref * test, g) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * sxy + c2)
    den = (mu_x**2 + mu_y**2 + c1) * (sxx + syy + c2)
    return float(np.mean(num / den))


def error_map(ref, test) -> np.ndarray:
    ref = np.asarray(ref, dtype=np.float32)
    test = np.asarray(test, dtype=np.float32)
    check_same_shape(ref, test, "error map inputs")
    return np.abs(ref - test)


def hot_colormap(values: np.ndarray, vmax: float = ERROR_MAP_MAX) -> np.ndarray:
    """Map ``values`` in [0, vmax] to RGB uint8: black -> red -> yellow -> white."""
    s = np.clip(np.asarray(values, dtype=np.float64) / vmax, 0.0, 1.0) * 3.0
    r = np.clip(s, 0, 1)
    g = np.clip(s - 1, 0, 1)
    b = np.clip(s - 2, 0, 1)
    return np.floor(np.stack([r, g, b], axis=-1) * 255 + 0.5).astype(np.uint8)


def save_error_png(err: np.ndarray, path) -> None:
    from PIL import Image

    e = np.asarray(err)
    if e.ndim == 3:
        e = e[0]
    Image.fromarray(hot_colormap(e)).save(path)


# --------------------------------------------------------------------------
# LPIPS plug-in


LpipsProvider = Callable[[np.ndarray, np.ndarray], float]


def resolve_provider(target: str) -> LpipsProvider | None:
    """Import ``"package.module:function"``; empty string means no provider."""
    if not target:
        return None
    mod, _, fn = target.partition(":")
    try:
        return getattr(importlib.import_module(mod), fn)
    except (ImportError, AttributeError) as exc:
        warnings.warn(f"LPIPS provider {target!r} unavailable: {exc}")
        return None


def lpips_plugin(ref, test, provider: LpipsProvider | None) -> float | None:
    """Score with an external perceptual metric; failures yield ``None`` and a warning."""
    if provider is None:
        return None
    try:
        value = float(provider(np.asarray(ref), np.asarray(test)))
    except Exception as exc:  # third-party scorer, never fatal
        warnings.warn(f"LPIPS provider failed: {exc}")
        return None
    if not math.isfinite(value):
        warnings.warn(f"LPIPS provider returned non-finite value {value}")
        return None
    return value


# --------------------------------------------------------------------------
# reports


@dataclass
class MetricResult:
    subject_id: str
    method: str
    psnr: float
    ssim: float
    lpips: float | None = None


@dataclass
class Aggregate:
    mean: float
    std: float
    n: int


def mean_std(values: Sequence[float]) -> Aggregate:
    a = np.asarray(values, dtype=np.float64)
    if a.size == 0:
        return Aggregate(float("nan"), float("nan"), 0)
    return Aggregate(float(a.mean()), float(a.std()), int(a.size))


@dataclass
class EvaluationReport:
    split: str
    results: list[MetricResult]
    methods: list[str]
    params: dict[str, int | None] = field(default_factory=dict)
    excluded: dict[str, list[str]] = field(default_factory=dict)
    config_digest: str = ""

    def aggregate(self, method: str, metric: str) -> Aggregate:
        vals = [getattr(r, metric) for r in self.results if r.method == method]
        vals = [v for v in vals if v is not None]
        return mean_std(vals)

    def n_images(self, method: str) -> int:
        return sum(r.method == method for r in self.results)

    # ---- per-image CSV

    def per_image_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["subject_id", "method", "psnr", "ssim", "lpips"])
        for r in self.results:
            w.writerow([r.subject_id, r.method, repr(r.psnr), repr(r.ssim), "" if r.lpips is None else repr(r.lpips)])
        return buf.getvalue()

    @classmethod
    def from_per_image_csv(cls, text: str, split: str, methods: Sequence[str], params=None, digest: str = "") -> "EvaluationReport":
        results = []
        for row in csv.DictReader(io.StringIO(text)):
            results.append(
                MetricResult(row["subject_id"], row["method"], float(row["psnr"]), float(row["ssim"]), float(row["lpips"]) if row["lpips"] else None)
            )
        return cls(split, results, list(methods), dict(params or {}), {}, digest)

    # ---- aggregate outputs

    def _cell(self, method: str, metric: str) -> str:
        if metric == "params":
            p = self.params.get(method)
            return "N/A" if p is None else f"{p:,}"
        agg = self.aggregate(method, metric)
        if agg.n == 0:
            return "n/a"
        digits = 2 if metric == "psnr" else 3
        return f"{agg.mean:.{digits}f}±{agg.std:.{digits + 1}f}"

    def aggregate_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["split", "method", "metric", "mean", "std", "n"])
        for m in self.methods:
            for metric, _ in METRIC_ROWS[:3]:
                agg = self.aggregate(m, metric)
                if agg.n == 0:
                    w.writerow([self.split, m, metric, "n/a", "n/a", 0])
                else:
                    w.writerow([self.split, m, metric, repr(agg.mean), repr(agg.std), agg.n])
            p = self.params.get(m)
            w.writerow([self.split, m, "params", "N/A" if p is None else p, "", ""])
        return buf.getvalue()

    def table(self) -> str:
        titles = [METHOD_TITLES.get(m, m) for m in self.methods]
        rows = [["Metric", *titles]]
        for metric, label in METRIC_ROWS:
            rows.append([label, *(self._cell(m, metric) for m in self.methods)])
        widths = [max(len(r[i]) for r in rows) for i in range(len(rows[0]))]
        lines = [f"{self.split} dataset"]
        for i, r in enumerate(rows):
            lines.append("  ".join(c.ljust(widths[0]) if j == 0 else c.rjust(widths[j]) for j, c in enumerate(r)))
            if i == 0:
                lines.append("-" * len(lines[-1]))
        lines.append("")
        n = ", ".join(f"{METHOD_TITLES.get(m, m)}={self.n_images(m)}" for m in self.methods)
        lines.append(f"images per method: {n}")
        for m, ids in self.excluded.items():
            if ids:
                lines.append(f"excluded ({METHOD_TITLES.get(m, m)}): {len(ids)} records: {', '.join(ids)}")
        capped = sum(r.psnr >= PSNR_CAP for r in self.results)
        if capped:
            lines.append(f"PSNR capped at {PSNR_CAP:g} dB (zero error) for {capped} images")
        lines.append("mean±std over images; std is the population standard deviation (divide by N).")
        lines.append(f"published reference parameter count for IQT-CFM: {PUBLISHED_PARAMS:,}")
        if self.config_digest:
            lines.append(f"config digest: {self.config_digest}")
        return "\n".join(lines) + "\n"

    def write(self, directory) -> dict[str, Path]:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        paths = {
            "per_image": directory / f"{self.split}_per_image.csv",
            "aggregate": directory / f"{self.split}_aggregate.csv",
            "table": directory / f"{self.split}_report.txt",
        }
        paths["per_image"].write_text(self.per_image_csv())
        paths["aggregate"].write_text(self.aggregate_csv())
        paths["table"].write_text(self.table())
        return paths


def evaluate(
    records: Sequence[tuple[str, np.ndarray]],
    reconstructions: Mapping[str, Mapping[str, np.ndarray]],
    split: str,
    params: Mapping[str, int | None] | None = None,
    lpips_provider: LpipsProvider | None = None,
    mask: Mapping[str, np.ndarray] | None = None,
    error_map_dir=None,
    config_digest: str = "",
) -> EvaluationReport:
    """Score each method's reconstructions against the ground truth.

    ``records`` is ``[(subject_id, high), ...]`` in manifest order and
    ``reconstructions[method][subject_id]`` the method's output. Records a
    method did not reconstruct are excluded from its aggregates and listed in
    the report. ``mask`` optionally restricts PSNR to a per-subject boolean
    region (SSIM stays whole-slice).
    """
    methods = list(reconstructions)
    results: list[MetricResult] = []
    excluded: dict[str, list[str]] = {m: [] for m in methods}
    if error_map_dir is not None:
        error_map_dir = Path(error_map_dir)
        error_map_dir.mkdir(parents=True, exist_ok=True)
    for sid, high in records:
        for m in methods:
            rec = reconstructions[m].get(sid)
            if rec is None or tuple(np.shape(rec)) != tuple(np.shape(high)):
                excluded[m].append(sid)
                continue
            if mask is not None and sid in mask:
                sel = np.broadcast_to(mask[sid], np.shape(high))
                p = psnr(np.asarray(high)[sel], np.asarray(rec)[sel])
            else:
                p = psnr(high, rec)
            results.append(MetricResult(sid, m, p, ssim(high, rec), lpips_plugin(high, rec, lpips_provider)))
            if error_map_dir is not None:
                save_error_png(error_map(high, rec), error_map_dir / f"{sid}_{m}_err.png")
    return EvaluationReport(split, results, methods, dict(params or {}), excluded, config_digest)
