"""Frame metrics and the evaluation report.

SSIM and temporal consistency are computed exactly here; FID / LPIPS /
CLIP depend on pretrained networks and are pluggable: register an
evaluator or the report marks the column unavailable.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .latent_codec import PixelVideo

REPORT_COLUMNS = ("FID", "SSIM", "LPIPS", "Temporal", "CLIP")

_SSIM_K1 = 0.01
_SSIM_K2 = 0.03


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    xs = np.arange(size) - size // 2
    g = np.exp(-(xs**2) / (2.0 * sigma**2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Separable 'valid' correlation along both spatial axes."""
    k = len(kernel)
    h, w = img.shape
    tmp = np.zeros((h, w - k + 1))
    for i in range(k):
        tmp += kernel[i] * img[:, i : i + w - k + 1]
    out = np.zeros((h - k + 1, w - k + 1))
    for i in range(k):
        out += kernel[i] * tmp[i : i + h - k + 1]
    return out


def ssim(
    x: np.ndarray,
    y: np.ndarray,
    window_size: int = 11,
    sigma: float = 1.5,
    data_range: float = 1.0,
) -> float:
    """Windowed SSIM (Gaussian window, valid windows only), averaged over
    windows and channels."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ValueError(f"image shapes differ: {x.shape} vs {y.shape}")
    if x.ndim == 2:
        x, y = x[..., None], y[..., None]
    if x.shape[0] < window_size or x.shape[1] < window_size:
        raise ValueError(
            f"images ({x.shape[0]}x{x.shape[1]}) smaller than window {window_size}"
        )
    c1 = (_SSIM_K1 * data_range) ** 2
    c2 = (_SSIM_K2 * data_range) ** 2
    kernel = gaussian_window(window_size, sigma)
    values = []
    for ch in range(x.shape[2]):
        xc, yc = x[..., ch], y[..., ch]
        mu_x = _filter_valid(xc, kernel)
        mu_y = _filter_valid(yc, kernel)
        var_x = _filter_valid(xc * xc, kernel) - mu_x * mu_x
        var_y = _filter_valid(yc * yc, kernel) - mu_y * mu_y
        cov = _filter_valid(xc * yc, kernel) - mu_x * mu_y
        num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
        den = (mu_x * mu_x + mu_y * mu_y + c1) * (var_x + var_y + c2)
        values.append((num / den).mean())
    return float(np.mean(values))


def temporal_consistency(video) -> float:
    """Mean adjacent-frame SSIM across the clip."""
    frames = video.frames if isinstance(video, PixelVideo) else np.asarray(video)
    if frames.shape[0] < 2:
        raise ValueError(f"need at least 2 frames, got {frames.shape[0]}")
    pairs = [ssim(frames[t], frames[t + 1]) for t in range(frames.shape[0] - 1)]
    return float(np.mean(pairs))


@dataclass
class MetricReport:
    """Metric name -> value; None marks a metric without an evaluator."""

    values: dict = field(default_factory=dict)

    def __getitem__(self, name):
        return self.values.get(name)


_EVALUATORS: dict = {}


def register_evaluator(name: str, fn):
    """Plug in a pretrained-network metric (FID / LPIPS / CLIP)."""
    if name not in ("FID", "LPIPS", "CLIP"):
        raise ValueError(f"unknown pluggable metric {name!r}")
    _EVALUATORS[name] = fn


def clear_evaluators():
    _EVALUATORS.clear()


def report(generated: list, truth: list) -> MetricReport:
    """Score generated clips against ground truth clips (paired by index)."""
    if len(generated) != len(truth):
        raise ValueError(f"clip counts differ: {len(generated)} vs {len(truth)}")
    gen_frames = [g.frames if isinstance(g, PixelVideo) else np.asarray(g) for g in generated]
    truth_frames = [t.frames if isinstance(t, PixelVideo) else np.asarray(t) for t in truth]
    ssim_values = []
    for g, t in zip(gen_frames, truth_frames):
        if g.shape != t.shape:
            raise ValueError(f"clip shapes differ: {g.shape} vs {t.shape}")
        ssim_values.extend(ssim(g[k], t[k]) for k in range(g.shape[0]))
    values = {
        "SSIM": float(np.mean(ssim_values)),
        "Temporal": float(np.mean([temporal_consistency(g) for g in gen_frames])),
    }
    for name in ("FID", "LPIPS", "CLIP"):
        values[name] = _EVALUATORS[name](generated, truth) if name in _EVALUATORS else None
    return MetricReport(values=values)


def render_report(rep: MetricReport) -> str:
    """Fixed-column table; absent metrics print as n/a."""
    header = "  ".join(f"{c:>9}" for c in REPORT_COLUMNS)
    cells = []
    for c in REPORT_COLUMNS:
        v = rep[c]
        cells.append(f"{'n/a':>9}" if v is None else f"{v:>9.3f}")
    return header + "\n" + "  ".join(cells)


def parse_report(text: str) -> MetricReport:
    lines = [ln for ln in text.strip().splitlines() if ln.strip()]
    if len(lines) != 2:
        raise ValueError("report must have a header line and a value line")
    names = lines[0].split()
    if tuple(names) != REPORT_COLUMNS:
        raise ValueError(f"unexpected columns {names}")
    values = {}
    for name, cell in zip(names, lines[1].split()):
        values[name] = None if cell == "n/a" else float(cell)
    return MetricReport(values=values)
