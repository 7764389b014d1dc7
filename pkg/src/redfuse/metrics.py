"""Fusion quality metrics: EI, AG, SF, Qabf, VIFF, PSNR and a report container.

Images are 2-D arrays (or anything squeezable to 2-D) in [0, 1]. EI, AG and
SF are linear in intensity and accept ``scale=255`` for comparison with
numbers quoted on the 0..255 range; Qabf, PSNR and SSIM are scale-free and
VIFF always works on the 0..255 range internally.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import tensor as K

log = logging.getLogger(__name__)

QABF_CONSTANTS = {
    "gamma_g": 0.9994, "kappa_g": -15.0, "sigma_g": 0.5,
    "gamma_a": 0.9879, "kappa_a": -22.0, "sigma_a": 0.8,
}
VIFF_NOISE_VAR = 2.0
VIFF_EPS = 1e-10
VIFF_MAX_SCALES = 4
PSNR_CAP = 99.0
PSNR_REFERENCE = "pixelwise max of the two sources"
COLUMNS = ("EI", "AG", "SF", "Qabf", "VIFF", "PSNR", "SSIM")


def _img(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 2 and a.size == a.shape[-2] * a.shape[-1]:
        a = a.reshape(a.shape[-2:])
    if a.ndim != 2:
        raise K.ShapeError(f"metrics expect a single grayscale image, got shape {np.shape(x)}")
    return a


def _nchw(a: np.ndarray) -> np.ndarray:
    return a.reshape(1, 1, *a.shape)


def _same(*xs):
    shapes = {x.shape for x in xs}
    if len(shapes) != 1:
        raise K.ShapeError(f"metric inputs must share one shape, got {sorted(shapes)}")


def _at_least(a: np.ndarray, n: int, what: str):
    if min(a.shape) < n:
        raise K.ShapeError(f"{what} needs images of at least {n}x{n}, got {a.shape}")


def _sobel2d(a: np.ndarray):
    sx, sy = K.sobel(_nchw(a))
    return sx[0, 0], sy[0, 0]


def metric_ei(f, scale: float = 1.0) -> float:
    """Edge intensity: mean Sobel gradient magnitude (mirror boundary)."""
    a = _img(f) * scale
    _at_least(a, 3, "EI")
    sx, sy = _sobel2d(a)
    return float(np.mean(np.sqrt(sx * sx + sy * sy)))


def metric_ag(f, scale: float = 1.0) -> float:
    """Average gradient over the (H-1)(W-1) forward-difference positions."""
    a = _img(f) * scale
    _at_least(a, 2, "AG")
    dx = a[:-1, 1:] - a[:-1, :-1]
    dy = a[1:, :-1] - a[:-1, :-1]
    return float(np.mean(np.sqrt((dx * dx + dy * dy) / 2)))


def metric_sf(f, scale: float = 1.0) -> float:
    """Spatial frequency sqrt(RF^2 + CF^2) from mean squared first differences."""
    a = _img(f) * scale
    _at_least(a, 2, "SF")
    rf2 = np.mean(np.diff(a, axis=1) ** 2)
    cf2 = np.mean(np.diff(a, axis=0) ** 2)
    return float(np.sqrt(rf2 + cf2))


# --------------------------------------------------------------------------
# Qabf
# --------------------------------------------------------------------------


def _strength_orientation(a: np.ndarray):
    sx, sy = _sobel2d(a)
    g = np.sqrt(sx * sx + sy * sy)
    safe = np.where(sx == 0, 1.0, sx)
    alpha = np.where(sx == 0, np.pi / 2, np.arctan(sy / safe))
    return g, alpha


def _preservation(gs, als, gf, alf) -> np.ndarray:
    c = QABF_CONSTANTS
    hi, lo = np.maximum(gs, gf), np.minimum(gs, gf)
    G = np.where(hi == 0, 1.0, lo / np.where(hi == 0, 1.0, hi))
    A = 1 - np.abs(als - alf) / (np.pi / 2)
    qg = c["gamma_g"] / (1 + np.exp(c["kappa_g"] * (G - c["sigma_g"])))
    qa = c["gamma_a"] / (1 + np.exp(c["kappa_a"] * (A - c["sigma_a"])))
    return qg * qa


def qabf_identity_value() -> float:
    """Qabf of any image with nonzero gradients fused into itself."""
    return float(_preservation(np.ones(1), np.zeros(1), np.ones(1), np.zeros(1))[0])


def metric_qabf(a, b, f) -> float:
    """Xydeas-Petrovic edge preservation, source strengths as weights."""
    a, b, f = _img(a), _img(b), _img(f)
    _same(a, b, f)
    _at_least(a, 3, "Qabf")
    ga, ala = _strength_orientation(a)
    gb, alb = _strength_orientation(b)
    gf, alf = _strength_orientation(f)
    qa = _preservation(ga, ala, gf, alf)
    qb = _preservation(gb, alb, gf, alf)
    den = np.sum(ga + gb)
    if den == 0:
        log.warning("Qabf: both sources have zero gradient everywhere; reporting 0")
        return 0.0
    return float(np.sum(qa * ga + qb * gb) / den)


# --------------------------------------------------------------------------
# VIFF
# --------------------------------------------------------------------------


def viff_scales(shape) -> int:
    m = min(shape)
    if m >= 32:
        return VIFF_MAX_SCALES
    if m < 4:
        raise K.ShapeError(f"VIFF needs images of at least 4x4, got {tuple(shape)}")
    return min(VIFF_MAX_SCALES, int(math.floor(math.log2(m / 4))) + 1)


def _vif_terms(ref: np.ndarray, dist: np.ndarray, window: int):
    """Summed information terms (num, den) of pixel-domain VIF at one scale."""
    sigma = window / 5.0

    def blur(x):
        return K.gaussian_filter(_nchw(x), window, sigma)[0, 0]

    mu1, mu2 = blur(ref), blur(dist)
    s11 = np.maximum(blur(ref * ref) - mu1 * mu1, 0)
    s22 = np.maximum(blur(dist * dist) - mu2 * mu2, 0)
    s12 = blur(ref * dist) - mu1 * mu2

    flat = s11 < VIFF_EPS
    g = np.where(flat, 0.0, s12 / np.where(flat, 1.0, s11))
    sv = np.where(flat, s22, s22 - g * s12)
    s11 = np.where(flat, 0.0, s11)
    quiet = s22 < VIFF_EPS
    g = np.where(quiet, 0.0, g)
    sv = np.where(quiet, 0.0, sv)
    neg = g < 0
    sv = np.where(neg, s22, sv)
    g = np.where(neg, 0.0, g)
    sv = np.maximum(sv, 0.0)
    num = np.sum(np.log10(1 + g * g * s11 / (sv + VIFF_NOISE_VAR)))
    den = np.sum(np.log10(1 + s11 / VIFF_NOISE_VAR))
    return float(num), float(den)


def _pyramid_terms(ref: np.ndarray, dist: np.ndarray, n: int):
    terms = []
    for k in range(1, n + 1):
        window = 2 ** (n - k + 1) + 1
        if k > 1:
            ref = K.gaussian_filter(_nchw(ref), window, window / 5.0)[0, 0][::2, ::2]
            dist = K.gaussian_filter(_nchw(dist), window, window / 5.0)[0, 0][::2, ::2]
        terms.append(_vif_terms(ref, dist, window))
    return terms


def metric_viff(a, b, f) -> float:
    """Multi-scale VIF of each source against the fused image, pooled over both sources."""
    a, b, f = _img(a), _img(b), _img(f)
    _same(a, b, f)
    n = viff_scales(a.shape)
    ta = _pyramid_terms(a * 255.0, f * 255.0, n)
    tb = _pyramid_terms(b * 255.0, f * 255.0, n)
    num = sum(na + nb for (na, _), (nb, _) in zip(ta, tb))
    den = sum(da + db for (_, da), (_, db) in zip(ta, tb))
    if den == 0:
        log.warning("VIFF: sources carry no local variance; reporting 0")
        return 0.0
    return num / den


def metric_psnr(x, y) -> float:
    """10 log10(1 / MSE) for peak 1; identical images give the 99 dB cap."""
    x, y = _img(x), _img(y)
    _same(x, y)
    mse = float(np.mean((x - y) ** 2))
    if mse == 0:
        return PSNR_CAP
    return min(PSNR_CAP, 10 * math.log10(1.0 / mse))


# --------------------------------------------------------------------------
# report
# --------------------------------------------------------------------------


def evaluate_triple(name: str, vis, ir, fused, scale: float = 1.0) -> dict:
    from .objective import ssim_index

    v, i, f = _img(vis), _img(ir), _img(fused)
    _same(v, i, f)
    ssim = (ssim_index(_nchw(f), _nchw(v)) + ssim_index(_nchw(f), _nchw(i))) / 2
    return {
        "name": name,
        "EI": metric_ei(f, scale),
        "AG": metric_ag(f, scale),
        "SF": metric_sf(f, scale),
        "Qabf": metric_qabf(v, i, f),
        "VIFF": metric_viff(v, i, f),
        "PSNR": metric_psnr(f, np.maximum(v, i)),
        "SSIM": float(ssim),
    }


@dataclass
class MetricsReport:
    records: list = field(default_factory=list)
    scale: float = 1.0
    viff_scales: int | None = None

    def add(self, record: dict):
        bad = [k for k in COLUMNS if not math.isfinite(record[k])]
        if bad:
            raise FloatingPointError(f"{record['name']}: non-finite metrics {bad}")
        self.records.append(record)

    @property
    def means(self) -> dict:
        if not self.records:
            return {k: float("nan") for k in COLUMNS}
        return {k: sum(r[k] for r in self.records) / len(self.records) for k in COLUMNS}

    def to_dict(self) -> dict:
        return {
            "range": 255 if self.scale == 255 else 1,
            "psnr_reference": PSNR_REFERENCE,
            "viff_scales": self.viff_scales,
            "records": self.records,
            "mean": self.means,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    def to_table(self) -> str:
        rows = [(r["name"], *(r[k] for k in COLUMNS)) for r in self.records]
        rows.append(("mean", *(self.means[k] for k in COLUMNS)))
        width = max(len("name"), *(len(r[0]) for r in rows))
        lines = ["  ".join([f"{'name':<{width}}"] + [f"{k:>10}" for k in COLUMNS])]
        for r in rows:
            lines.append("  ".join([f"{r[0]:<{width}}"] + [f"{x:>10.6f}" for x in r[1:]]))
        return "\n".join(lines)
