"""Image quality metrics (SSIM, RMSE, PSNR) and evaluation reports.

All computations are float64 with a peak value of 1.0 unless stated.
SSIM uses non-overlapping 8x8 blocks with population (1/n) moments; rows
or columns that do not fill a whole block are ignored.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import FormatError, ShapeMismatch
from .fileio import load_image, read_manifest

SSIM_BLOCK = 8
IDENTICAL = "identical"
COLUMNS = ("id", "ssim", "rmse", "psnr_db")


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeMismatch(f"shapes differ: {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    a, b = _pair(a, b)
    return math.sqrt(float(np.mean((a - b) ** 2)))


def psnr(a, b, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; ``math.inf`` when the images are identical."""
    if peak <= 0:
        raise ValueError("peak must be positive")
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, peak: float = 1.0, block: int = SSIM_BLOCK) -> float:
    """Mean structural similarity over non-overlapping ``block x block`` tiles.

    Args:
        a, b: ``[1, H, W]`` or ``[H, W]`` images with ``H, W >= block``.
        peak: dynamic range; ``C1 = (0.01 peak)^2``, ``C2 = (0.03 peak)^2``.
    """
    a, b = _pair(a, b)
    if a.ndim == 3:
        if a.shape[0] != 1:
            raise ShapeMismatch(f"ssim takes single-channel images, got {a.shape}")
        a, b = a[0], b[0]
    if a.ndim != 2:
        raise ShapeMismatch(f"ssim takes 2-D images, got {a.shape}")
    h, w = a.shape
    if h < block or w < block:
        raise ShapeMismatch(f"image {h}x{w} smaller than the {block}x{block} SSIM window")
    nh, nw = h // block, w // block

    def tiles(x):
        x = x[: nh * block, : nw * block]
        return x.reshape(nh, block, nw, block).transpose(0, 2, 1, 3).reshape(nh, nw, -1)

    ta, tb = tiles(a), tiles(b)
    mu_a = ta.mean(axis=-1)
    mu_b = tb.mean(axis=-1)
    da = ta - mu_a[..., None]
    db = tb - mu_b[..., None]
    var_a = (da * da).mean(axis=-1)
    var_b = (db * db).mean(axis=-1)
    cov = (da * db).mean(axis=-1)
    c1 = (0.01 * peak) ** 2
    c2 = (0.03 * peak) ** 2
    num = (2.0 * (mu_a * mu_b) + c1) * (2.0 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# ---------------------------------------------------------------------------
# reports


@dataclass(frozen=True)
class ImageRecord:
    id: str
    ssim: float
    rmse: float
    psnr_db: float
    error: Optional[str] = None

    @property
    def ok(self) -> bool:
        return self.error is None


def score(id: str, image, reference) -> ImageRecord:
    return ImageRecord(id, ssim(image, reference), rmse(image, reference), psnr(image, reference))


@dataclass
class QualityReport:
    records: list = field(default_factory=list)
    metadata: dict = field(default_factory=dict)

    def _column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.records if r.ok], dtype=np.float64)

    def mean(self) -> Optional[dict]:
        """Per-metric mean over successful records, or None when there are none.

        PSNR of identical pairs is infinite, and so is its mean.
        """
        if not any(r.ok for r in self.records):
            return None
        return {k: float(np.mean(self._column(k))) for k in COLUMNS[1:]}

    def std(self) -> Optional[dict]:
        if not any(r.ok for r in self.records):
            return None
        out = {}
        for k in COLUMNS[1:]:
            col = self._column(k)
            out[k] = float(np.std(col)) if np.all(np.isfinite(col)) else math.nan
        return out

    @property
    def failures(self) -> list:
        return [r for r in self.records if not r.ok]


def _fmt(value: float) -> str:
    if math.isinf(value) and value > 0:
        return IDENTICAL
    return repr(float(value))


def report_lines(report: QualityReport, suffix: str = "") -> list[str]:
    """Record and footer lines (without header) for one report."""
    lines = []
    for r in report.records:
        rid = f"{r.id}{suffix}"
        if r.ok:
            lines.append(f"{rid}\t{_fmt(r.ssim)}\t{_fmt(r.rmse)}\t{_fmt(r.psnr_db)}")
        else:
            lines.append(f"{rid}\tnan\tnan\tnan")
    for tag, agg in (("#mean", report.mean()), ("#std", report.std())):
        label = f"{tag}{suffix}"
        if agg is None:
            lines.append(f"{label}\tabsent\tabsent\tabsent")
        else:
            lines.append(f"{label}\t" + "\t".join(_fmt(agg[k]) for k in COLUMNS[1:]))
    for r in report.failures:
        lines.append(f"#failed{suffix}\t{r.id}\t{r.error}")
    return lines


def format_report(report: QualityReport) -> str:
    """UTF-8 TSV: header, one line per record, ``#mean``/``#std`` footers."""
    return "\n".join(["\t".join(COLUMNS)] + report_lines(report)) + "\n"


def parse_report(text: str) -> dict:
    """Parse a report TSV back into ``{id: (ssim, rmse, psnr)}`` plus footers.

    Two-field ``#key<TAB>value`` metadata lines map to their string value.
    """
    lines = text.rstrip("\n").split("\n")
    if tuple(lines[0].split("\t")) != COLUMNS:
        raise FormatError("unexpected report header")
    out = {}
    for line in lines[1:]:
        fields = line.split("\t")
        if fields[0].startswith("#failed"):
            continue
        if fields[0].startswith("#") and len(fields) == 2:
            out[fields[0]] = fields[1]
            continue
        vals = tuple(math.inf if v == IDENTICAL else (math.nan if v == "absent" else float(v)) for v in fields[1:])
        out[fields[0]] = vals
    return out


# ---------------------------------------------------------------------------
# evaluation


@dataclass
class Evaluation:
    """Denoised-vs-clean and noisy-vs-clean reports over the same manifest."""

    denoised: QualityReport
    noisy: QualityReport

    def format(self) -> str:
        lines = ["\t".join(COLUMNS)]
        lines += report_lines(self.denoised, ":denoised")
        lines += report_lines(self.noisy, ":noisy")
        return "\n".join(lines) + "\n"


def worker_count() -> int:
    """Worker cap from ``RED_DENOISE_THREADS`` (default: processor count)."""
    raw = os.environ.get("RED_DENOISE_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError:
            pass
    return os.cpu_count() or 1


def evaluate(manifest, denoiser: Callable, metadata: Optional[dict] = None, workers: Optional[int] = None) -> Evaluation:
    """Score ``denoiser`` on every pair of ``manifest``.

    Args:
        manifest: path to a manifest file or a list of entries.
        denoiser: maps a ``[1,H,W]`` noisy image to a same-shape estimate.
        metadata: copied into both reports.
        workers: concurrent records; defaults to :func:`worker_count`.

    Per-record I/O or shape failures are recorded on that record, not raised.
    Records keep manifest order.
    """
    entries = read_manifest(manifest) if not isinstance(manifest, list) else manifest

    def one(entry):
        try:
            clean = load_image(entry.clean)
            noisy = load_image(entry.noisy)
            if clean.shape != noisy.shape:
                raise ShapeMismatch(f"clean {clean.shape} vs noisy {noisy.shape}")
            out = np.asarray(denoiser(noisy), dtype=np.float64)
            return score(entry.id, out, clean), score(entry.id, noisy, clean)
        except (OSError, ValueError) as exc:
            msg = f"{type(exc).__name__}: {exc}"
            bad = ImageRecord(entry.id, math.nan, math.nan, math.nan, msg)
            return bad, bad

    workers = workers or worker_count()
    if workers > 1 and len(entries) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, entries))
    else:
        results = [one(e) for e in entries]
    meta = dict(metadata or {})
    return Evaluation(
        QualityReport([r[0] for r in results], dict(meta, source="denoised")),
        QualityReport([r[1] for r in results], dict(meta, source="noisy")),
    )
