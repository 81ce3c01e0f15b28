"""Full-reference (PSNR, SSIM) and no-reference (BRISQUE, PIQE) image quality.

Every metric takes normalized ``(3, H, W)`` images in ``[-1, 1]`` (numpy
arrays or torch tensors) and works internally in ``[0, 1]`` double precision.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage, optimize
from scipy.special import gammaln

log = logging.getLogger(__name__)

PSNR_CAP = 100.0
LUMA_WEIGHTS = (0.299, 0.587, 0.114)


class InsufficientStatisticsError(ValueError):
    """Raised when an image is too flat for a natural-scene-statistics fit."""


class InsufficientActivityError(ValueError):
    """Raised when PIQE finds no spatially active block."""


def _as_unit(img) -> np.ndarray:
    if hasattr(img, "detach"):
        img = img.detach().cpu().numpy()
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got shape {img.shape}")
    return (img + 1.0) * 0.5


def _pair(a, b):
    a, b = _as_unit(a), _as_unit(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def luminance(img01: np.ndarray) -> np.ndarray:
    """BT.601 luma of a ``(3, H, W)`` image in ``[0, 1]``."""
    r, g, b = LUMA_WEIGHTS
    return r * img01[0] + g * img01[1] + b * img01[2]


# --------------------------------------------------------------------------
# full reference
# --------------------------------------------------------------------------

def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on the ``[0, 1]`` scale, capped at 100."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return 10.0 * math.log10(1.0 / mse)


def _gaussian(x: np.ndarray, sigma: float, radius: int, mode: str) -> np.ndarray:
    return ndimage.gaussian_filter(x, sigma=sigma, truncate=radius / sigma, mode=mode)


def ssim(a, b, window: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean structural similarity of the BT.601 luminance channels.

    Gaussian ``window x window`` weighting; only positions where the window
    lies fully inside the image are averaged.
    """
    a, b = _pair(a, b)
    radius = window // 2
    if min(a.shape[1:]) < window:
        raise ValueError(f"image {a.shape[1:]} is smaller than the {window}x{window} SSIM window")
    x, y = luminance(a), luminance(b)
    c1, c2 = k1 ** 2, k2 ** 2

    def filt(v):
        return _gaussian(v, sigma, radius, "reflect")[radius:-radius or None, radius:-radius or None]

    mu_x, mu_y = filt(x), filt(y)
    var_x = filt(x * x) - mu_x ** 2
    var_y = filt(y * y) - mu_y ** 2
    cov = filt(x * y) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * cov + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (var_x + var_y + c2)
    return float(np.mean(num / den))


# --------------------------------------------------------------------------
# natural scene statistics
# --------------------------------------------------------------------------

def mscn_luma(luma: np.ndarray, sigma: float = 7 / 6, radius: int = 3, c: float = 1 / 255) -> np.ndarray:
    mu = _gaussian(luma, sigma, radius, "nearest")
    var = _gaussian(luma * luma, sigma, radius, "nearest") - mu * mu
    return (luma - mu) / (np.sqrt(np.abs(var)) + c)


def mscn(img) -> np.ndarray:
    """Mean-subtracted contrast-normalized luminance coefficients ``(H, W)``."""
    return mscn_luma(luminance(_as_unit(img)))


def _ggd_ratio(alpha):
    # Gamma(1/a) Gamma(3/a) / Gamma(2/a)^2, in log space
    return np.exp(gammaln(1 / alpha) + gammaln(3 / alpha) - 2 * gammaln(2 / alpha))


def _solve_shape(func, target: float, lo: float = 0.05, hi: float = 20.0) -> float:
    """Invert a monotone decreasing moment ratio on ``[lo, hi]`` (clamped)."""
    f_lo, f_hi = func(lo) - target, func(hi) - target
    if f_lo <= 0:
        return lo
    if f_hi >= 0:
        return hi
    return float(optimize.brentq(lambda a: func(a) - target, lo, hi, xtol=1e-10))


def fit_ggd(x: np.ndarray) -> tuple[float, float]:
    """Moment-matching fit of a zero-mean generalized Gaussian: ``(shape, variance)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    second = float(np.mean(x * x))
    first = float(np.mean(np.abs(x)))
    if second < 1e-12 or first < 1e-12:
        raise InsufficientStatisticsError("coefficients have (near-)zero variance")
    rho = second / first ** 2
    return _solve_shape(_ggd_ratio, rho), second


def _aggd_ratio(nu):
    return np.exp(2 * gammaln(2 / nu) - gammaln(1 / nu) - gammaln(3 / nu))


def fit_aggd(x: np.ndarray) -> tuple[float, float, float, float]:
    """Asymmetric generalized Gaussian fit: ``(shape, mean, left var, right var)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    left, right = x[x < 0], x[x > 0]
    if left.size == 0 or right.size == 0:
        raise InsufficientStatisticsError("pairwise products lack one of the two signs")
    left_var, right_var = float(np.mean(left ** 2)), float(np.mean(right ** 2))
    if left_var < 1e-12 or right_var < 1e-12:
        raise InsufficientStatisticsError("pairwise products have (near-)zero spread")
    gamma_hat = math.sqrt(left_var) / math.sqrt(right_var)
    r_hat = float(np.mean(np.abs(x))) ** 2 / float(np.mean(x * x))
    r_norm = r_hat * (gamma_hat ** 3 + 1) * (gamma_hat + 1) / (gamma_hat ** 2 + 1) ** 2
    # _aggd_ratio increases with nu; negate to reuse the decreasing solver
    nu = _solve_shape(lambda v: -_aggd_ratio(v), -r_norm, 0.05, 20.0)
    scale = math.exp(gammaln(2 / nu) - gammaln(1 / nu) + 0.5 * (gammaln(1 / nu) - gammaln(3 / nu)))
    eta = (math.sqrt(right_var) - math.sqrt(left_var)) * scale
    return nu, eta, left_var, right_var


# horizontal, vertical, main diagonal, anti-diagonal neighbours
_SHIFTS = ((0, 1), (1, 0), (1, 1), (1, -1))


def _pair_products(m: np.ndarray, dy: int, dx: int) -> np.ndarray:
    h, w = m.shape
    ys, xs = slice(0, h - dy), slice(max(0, -dx), w - max(0, dx))
    ys2, xs2 = slice(dy, h), slice(max(0, dx), w - max(0, -dx))
    return m[ys, xs] * m[ys2, xs2]


def _downscale(luma: np.ndarray) -> np.ndarray:
    h, w = luma.shape
    im = Image.fromarray(luma.astype(np.float32), mode="F")
    return np.asarray(im.resize((w // 2, h // 2), Image.BICUBIC), dtype=np.float64)


def brisque_features(img, scales: int = 2) -> np.ndarray:
    """36 natural-scene-statistics features (18 per scale).

    Per scale: GGD ``(shape, variance)`` of the MSCN field, then for each of
    four neighbour orientations the AGGD ``(shape, mean, left var, right
    var)`` of the pairwise MSCN products.
    """
    luma = luminance(_as_unit(img))
    if min(luma.shape) < 32:
        raise ValueError(f"BRISQUE needs at least 32x32 pixels, got {luma.shape}")
    feats = []
    for _ in range(scales):
        if float(np.std(luma)) < 1e-6:
            raise InsufficientStatisticsError("image is (near-)constant")
        m = mscn_luma(luma)
        feats.extend(fit_ggd(m))
        for dy, dx in _SHIFTS:
            feats.extend(fit_aggd(_pair_products(m, dy, dx)))
        luma = _downscale(luma)
    out = np.asarray(feats, dtype=np.float64)
    if not np.all(np.isfinite(out)):
        raise InsufficientStatisticsError("non-finite BRISQUE feature")
    return out


@dataclass
class BrisqueModel:
    """Support-vector regressor over (optionally range-scaled) features.

    ``score = sum_i dual_coef[i] * K(sv[i], f) + weights . f + intercept``
    with ``K`` an RBF kernel ``exp(-gamma |a - b|^2)``.  Features are first
    mapped from ``[feature_min, feature_max]`` to ``[-1, 1]`` when those are
    present.
    """

    intercept: float
    weights: np.ndarray | None = None
    support_vectors: np.ndarray | None = None
    dual_coef: np.ndarray | None = None
    gamma: float = 0.0
    feature_min: np.ndarray | None = None
    feature_max: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    FORMAT = "uniremoval-brisque-svr"

    def scale(self, f: np.ndarray) -> np.ndarray:
        if self.feature_min is None:
            return f
        span = np.where(self.feature_max > self.feature_min, self.feature_max - self.feature_min, 1.0)
        return 2.0 * (f - self.feature_min) / span - 1.0

    def predict(self, features) -> float:
        f = np.asarray(features, dtype=np.float64)
        if f.shape != (36,):
            raise ValueError(f"BRISQUE features must have length 36, got shape {f.shape}")
        f = self.scale(f)
        score = float(self.intercept)
        if self.weights is not None:
            score += float(self.weights @ f)
        if self.support_vectors is not None and len(self.support_vectors):
            d2 = np.sum((self.support_vectors - f) ** 2, axis=1)
            score += float(self.dual_coef @ np.exp(-self.gamma * d2))
        return score

    def to_json(self) -> dict:
        def arr(v):
            return None if v is None else np.asarray(v).tolist()
        return {"format": self.FORMAT, "version": 1, "intercept": self.intercept,
                "weights": arr(self.weights), "support_vectors": arr(self.support_vectors),
                "dual_coef": arr(self.dual_coef), "gamma": self.gamma,
                "feature_min": arr(self.feature_min), "feature_max": arr(self.feature_max),
                "meta": self.meta}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh)

    @classmethod
    def from_json(cls, data: Mapping) -> "BrisqueModel":
        if data.get("format") != cls.FORMAT:
            raise ValueError(f"not a BRISQUE scorer file (format={data.get('format')!r})")
        if data.get("version") != 1:
            raise ValueError(f"unsupported BRISQUE scorer version {data.get('version')!r}")

        def arr(key, ndim):
            v = data.get(key)
            if v is None:
                return None
            a = np.asarray(v, dtype=np.float64)
            if a.ndim != ndim:
                raise ValueError(f"scorer field {key!r} must be {ndim}-D")
            return a

        model = cls(float(data["intercept"]), arr("weights", 1), arr("support_vectors", 2),
                    arr("dual_coef", 1), float(data.get("gamma", 0.0)),
                    arr("feature_min", 1), arr("feature_max", 1), dict(data.get("meta") or {}))
        if model.weights is not None and model.weights.shape != (36,):
            raise ValueError("scorer weights must have length 36")
        if model.support_vectors is not None:
            if model.support_vectors.shape[1:] != (36,) or model.dual_coef is None \
                    or len(model.dual_coef) != len(model.support_vectors):
                raise ValueError("scorer support vectors / dual coefficients are inconsistent")
        return model

    @classmethod
    def load(cls, path) -> "BrisqueModel":
        path = Path(path)
        if not path.is_file():
            raise FileNotFoundError(f"BRISQUE scorer file not found: {path}")
        try:
            with open(path, "r", encoding="utf-8") as fh:
                data = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid BRISQUE scorer file {path}: {exc}") from exc
        return cls.from_json(data)


REFERENCE_MODEL = "brisque_desk_reference.json"


def reference_model_path() -> Path:
    return Path(str(resources.files("uniremoval") / "data" / REFERENCE_MODEL))


def brisque_score(features, model: BrisqueModel | str | Path | None = None) -> float:
    """Score BRISQUE features with a scorer (lower is better).

    The default scorer is the small desk-corpus reference model shipped with
    the package; its values are not comparable to published BRISQUE numbers.
    """
    if model is None:
        model = reference_model_path()
    if not isinstance(model, BrisqueModel):
        model = BrisqueModel.load(model)
    return model.predict(features)


def brisque(img, model=None) -> float:
    return brisque_score(brisque_features(img), model)


# --------------------------------------------------------------------------
# PIQE
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class PiqeConfig:
    block_size: int = 16
    activity_threshold: float = 0.1
    impaired_threshold: float = 0.1
    segment_size: int = 6
    c: float = 1.0


def _segments_impaired(edge: np.ndarray, size: int, threshold: float) -> bool:
    windows = np.lib.stride_tricks.sliding_window_view(edge, size)
    return bool(np.any(np.std(windows, axis=1, ddof=1) < threshold))


def _center_surround(block: np.ndarray) -> float:
    n = block.shape[1]
    c1 = (n + 1) // 2 - 1
    center = block[:, c1:c1 + 2].ravel()
    surround = np.delete(block, [c1, c1 + 1], axis=1).ravel()
    s_std = np.std(surround, ddof=1)
    if s_std == 0:
        return 0.0
    return float(np.std(center, ddof=1) / s_std)


def piqe_blocks(img, cfg: PiqeConfig = PiqeConfig()):
    """Per-block PIQE analysis: ``(distortion scores, active count)``."""
    luma = luminance(_as_unit(img))
    if min(luma.shape) < 64:
        raise ValueError(f"PIQE needs at least 64x64 pixels, got {luma.shape}")
    n = cfg.block_size
    h, w = luma.shape
    pad = ((0, (-h) % n), (0, (-w) % n))
    if pad[0][1] or pad[1][1]:
        luma = np.pad(luma, pad, mode="symmetric")
    norm = mscn_luma(luma)

    scores, active = [], 0
    for i in range(0, norm.shape[0], n):
        for j in range(0, norm.shape[1], n):
            block = norm[i:i + n, j:j + n]
            var = float(np.var(block, ddof=1))
            if var <= cfg.activity_threshold:
                continue
            active += 1
            edges = (block[0, :], block[:, -1], block[-1, :], block[:, 0])
            impaired = any(_segments_impaired(e, cfg.segment_size, cfg.impaired_threshold) for e in edges)
            sigma = math.sqrt(var)
            csd = _center_surround(block)
            beta = abs(sigma - csd) / max(sigma, csd)
            noisy = sigma > 2 * beta
            dist = (1.0 - var if impaired else 0.0) + (var if noisy else 0.0)
            scores.append(min(max(dist, 0.0), 1.0))
    return scores, active


def piqe(img, cfg: PiqeConfig = PiqeConfig()) -> float:
    """Perception-based quality score in ``[0, 100]`` (lower is better)."""
    scores, active = piqe_blocks(img, cfg)
    if active == 0:
        raise InsufficientActivityError("no spatially active blocks")
    return (sum(scores) + cfg.c) / (active + cfg.c) * 100.0


# --------------------------------------------------------------------------
# reports
# --------------------------------------------------------------------------

FULL_REFERENCE = ("psnr", "ssim")
NO_REFERENCE = ("piqe", "brisque")


@dataclass
class MetricReport:
    metrics: tuple[str, ...]
    rows: list[tuple[str, dict]] = field(default_factory=list)

    def add(self, name: str, values: Mapping[str, float]) -> None:
        self.rows.append((name, dict(values)))

    def aggregate(self) -> dict[str, float]:
        """Per-metric mean over the images where the metric is defined."""
        out = {}
        for m in self.metrics:
            vals = [r[m] for _, r in self.rows if math.isfinite(r[m])]
            out[m] = float(np.mean(vals)) if vals else float("nan")
        return out

    def undefined(self) -> dict[str, list[str]]:
        return {m: [n for n, r in self.rows if not math.isfinite(r[m])] for m in self.metrics}

    def write_csv(self, path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["image", *self.metrics])
            for name, values in self.rows:
                writer.writerow([name, *[repr(float(values[m])) for m in self.metrics]])
            agg = self.aggregate()
            writer.writerow(["MEAN", *[repr(agg[m]) for m in self.metrics]])


def evaluate_images(preds: Sequence[tuple[str, np.ndarray]], refs: Mapping[str, np.ndarray] | None,
                    metrics: Sequence[str], brisque_model=None) -> MetricReport:
    metrics = tuple(metrics)
    unknown = set(metrics) - set(FULL_REFERENCE) - set(NO_REFERENCE)
    if unknown:
        raise ValueError(f"unknown metrics: {sorted(unknown)}")
    if refs is None and any(m in FULL_REFERENCE for m in metrics):
        raise ValueError("full-reference metrics need reference images")
    if "brisque" in metrics and not isinstance(brisque_model, BrisqueModel):
        brisque_model = BrisqueModel.load(brisque_model or reference_model_path())
    fns: dict[str, Callable] = {"piqe": piqe, "brisque": lambda x: brisque(x, brisque_model)}
    report = MetricReport(metrics)
    for name, pred in preds:
        values = {}
        for m in metrics:
            if m in FULL_REFERENCE:
                ref = refs[name]
                values[m] = psnr(pred, ref) if m == "psnr" else ssim(pred, ref)
            else:
                try:
                    values[m] = fns[m](pred)
                except (InsufficientActivityError, InsufficientStatisticsError) as exc:
                    # the score is undefined for this image; keep going, exclude it from the mean
                    log.warning("%s undefined for %s: %s", m, name, exc)
                    values[m] = float("nan")
        report.add(name, values)
    return report
