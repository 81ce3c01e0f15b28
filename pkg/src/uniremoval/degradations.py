"""Seeded synthetic degradations (haze, rain, blur) and corpus generation.

All generators operate on ``[0, 1]`` images of shape ``(3, H, W)``; the
corpus builders read and write normalized PNGs through :mod:`imagedata`.
"""
from __future__ import annotations

import json
import math
import shutil
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

from .imagedata import (
    DEFAULT_KINDS,
    DegradationKind,
    denormalize,
    list_images,
    load_image,
    normalize,
    parse_kinds,
    save_image,
    worker_rng,
)


@dataclass(frozen=True)
class HazeParams:
    airlight: tuple[float, float, float]
    beta: float
    depth: np.ndarray  # (H, W) in [0, 1]

    def transmission(self) -> np.ndarray:
        return np.exp(-self.beta * np.asarray(self.depth, dtype=np.float64))


@dataclass(frozen=True)
class RainParams:
    density: float      # streaks per megapixel
    length: int         # pixels
    angle: float        # degrees from vertical, in [-45, 45]
    intensity: float    # [0, 1]


@dataclass(frozen=True)
class BlurKernel:
    weights: np.ndarray

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if w.ndim != 2 or w.shape[0] != w.shape[1]:
            raise ValueError(f"blur kernel must be square, got shape {w.shape}")
        if w.shape[0] % 2 == 0:
            raise ValueError(f"blur kernel size must be odd, got {w.shape[0]}")
        if np.any(w < 0):
            raise ValueError("blur kernel weights must be non-negative")
        if abs(w.sum() - 1.0) > 1e-6:
            raise ValueError(f"blur kernel must sum to 1, sums to {w.sum()}")
        object.__setattr__(self, "weights", w)

    @property
    def size(self) -> int:
        return self.weights.shape[0]

    @classmethod
    def delta(cls, size: int = 1) -> "BlurKernel":
        w = np.zeros((size, size))
        w[size // 2, size // 2] = 1.0
        return cls(w)

    @classmethod
    def motion(cls, length: float, angle: float, size: int | None = None) -> "BlurKernel":
        """Linear motion kernel of ``length`` pixels at ``angle`` degrees from horizontal."""
        return cls(line_kernel(length, angle, size))

    @classmethod
    def gaussian(cls, sigma: float, size: int | None = None) -> "BlurKernel":
        if size is None:
            size = 2 * int(math.ceil(3 * sigma)) + 1
        r = np.arange(size) - size // 2
        g = np.exp(-(r ** 2) / (2 * sigma ** 2))
        w = np.outer(g, g)
        return cls(w / w.sum())


def line_kernel(length: float, angle: float, size: int | None = None) -> np.ndarray:
    """Anti-aliased normalized line segment through the kernel centre."""
    if size is None:
        size = int(math.ceil(length))
        size += 1 - size % 2
    if size % 2 == 0:
        raise ValueError("line kernel size must be odd")
    kernel = np.zeros((size, size))
    c = size // 2
    theta = math.radians(angle)
    dx, dy = math.cos(theta), -math.sin(theta)
    n = max(2, int(math.ceil(length * 4)))
    for t in np.linspace(-(length - 1) / 2, (length - 1) / 2, n):
        x, y = c + t * dx, c + t * dy
        x0, y0 = int(math.floor(x)), int(math.floor(y))
        fx, fy = x - x0, y - y0
        for yy, xx, w in ((y0, x0, (1 - fx) * (1 - fy)), (y0, x0 + 1, fx * (1 - fy)),
                          (y0 + 1, x0, (1 - fx) * fy), (y0 + 1, x0 + 1, fx * fy)):
            if 0 <= yy < size and 0 <= xx < size:
                kernel[yy, xx] += w
    return kernel / kernel.sum()


def _check_unit_image(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float32)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected a (3, H, W) image, got {img.shape}")
    return img


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def synth_haze(clean: np.ndarray, p: HazeParams) -> np.ndarray:
    """Atmospheric scattering: ``I = J t + A (1 - t)`` with ``t = exp(-beta d)``."""
    clean = _check_unit_image(clean)
    depth = np.asarray(p.depth, dtype=np.float64)
    if depth.shape != clean.shape[1:]:
        raise ValueError(f"depth field {depth.shape} does not match image {clean.shape[1:]}")
    t = p.transmission()[None]
    airlight = np.asarray(p.airlight, dtype=np.float64).reshape(3, 1, 1)
    hazy = clean * t + airlight * (1.0 - t)
    return np.clip(hazy, 0.0, 1.0).astype(np.float32)


def rain_layer(shape: tuple[int, int], p: RainParams, rng: np.random.Generator) -> np.ndarray:
    h, w = shape
    layer = np.zeros((h, w))
    if p.density <= 0 or p.intensity <= 0:
        return layer
    count = max(1, int(round(p.density * h * w / 1e6)))
    ys = rng.integers(0, h, size=count)
    xs = rng.integers(0, w, size=count)
    layer[ys, xs] = rng.uniform(0.6, 1.0, size=count)
    # streak direction: angle measured from vertical
    kernel = line_kernel(max(1.0, float(p.length)), 90.0 - p.angle)
    layer = ndimage.convolve(layer, kernel * max(1.0, float(p.length)), mode="constant")
    return np.clip(layer, 0.0, 1.0) * p.intensity


def synth_rain(clean: np.ndarray, p: RainParams, rng: np.random.Generator) -> np.ndarray:
    """Additive streak layer: bright seeds smeared along the rain direction."""
    clean = _check_unit_image(clean)
    if p.density <= 0:
        return clean.copy()
    streaks = rain_layer(clean.shape[1:], p, rng)[None]
    return np.clip(clean + streaks, 0.0, 1.0).astype(np.float32)


def synth_blur(clean: np.ndarray, kernel: BlurKernel) -> np.ndarray:
    """Per-channel 2-D convolution with reflective borders."""
    clean = _check_unit_image(clean)
    if not isinstance(kernel, BlurKernel):
        kernel = BlurKernel(kernel)
    out = np.stack([ndimage.convolve(ch.astype(np.float64), kernel.weights, mode="reflect")
                    for ch in clean])
    return np.clip(out, 0.0, 1.0).astype(np.float32)


def make_depth_field(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Smooth depth in [0, 1]: a vertical ramp plus filtered low-frequency noise."""
    if h <= 0 or w <= 0:
        raise ValueError("depth field dimensions must be positive")
    ramp = np.linspace(0.0, 1.0, h)[:, None] * np.ones((1, w))
    noise = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=max(h, w) / 8, mode="reflect")
    noise /= max(np.abs(noise).max(), 1e-12)
    field = ndimage.gaussian_filter(0.75 * ramp + 0.25 * (noise + 1) / 2, sigma=2.0, mode="nearest")
    lo, hi = field.min(), field.max()
    if hi - lo < 1e-12:
        return np.zeros((h, w))
    return (field - lo) / (hi - lo)


def make_clean_image(h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """Procedural stand-in for a natural photo: gradients, textured shapes, edges."""
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.empty((3, h, w))
    base = rng.uniform(0.2, 0.8, size=3)
    grad = rng.uniform(-0.3, 0.3, size=(3, 2))
    for c in range(3):
        img[c] = base[c] + grad[c, 0] * (yy - 0.5) + grad[c, 1] * (xx - 0.5)
    low = ndimage.gaussian_filter(rng.standard_normal((3, h, w)), sigma=(0, h / 10, w / 10))
    img += 0.12 * low / max(np.abs(low).max(), 1e-12)

    for _ in range(int(rng.integers(4, 9))):
        color = rng.uniform(0.05, 0.95, size=3)
        cy, cx = rng.uniform(0, 1, size=2)
        ry, rx = rng.uniform(0.08, 0.35, size=2)
        if rng.random() < 0.5:
            mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        else:
            mask = (np.abs(yy - cy) <= ry) & (np.abs(xx - cx) <= rx)
        freq = rng.uniform(8, 30)
        phase = rng.uniform(0, 2 * np.pi)
        orient = rng.uniform(0, np.pi)
        stripes = np.sin(freq * (np.cos(orient) * xx + np.sin(orient) * yy) * 2 * np.pi / 4 + phase)
        texture = rng.uniform(0.0, 0.15) * stripes
        for c in range(3):
            img[c][mask] = color[c] + texture[mask]
    grain = ndimage.gaussian_filter(rng.standard_normal((h, w)), sigma=0.7)
    img += 0.03 * grain[None]
    return np.clip(img, 0.0, 1.0).astype(np.float32)


# --------------------------------------------------------------------------
# parameter sampling
# --------------------------------------------------------------------------

# "synthetic" ranges train teachers / the student; "real" ranges form a
# disjoint, shifted domain for the domain-adaptation stage.
PARAM_RANGES = {
    "synthetic": {
        "haze": {"beta": (0.6, 1.4), "airlight": (0.75, 1.0)},
        "rain": {"density": (8000.0, 16000.0), "length": (7, 13), "angle": (-20.0, 20.0),
                 "intensity": (0.5, 0.8)},
        "blur": {"length": (5.0, 9.0), "angle": (0.0, 180.0), "sigma": (0.0, 0.0)},
    },
    "real": {
        "haze": {"beta": (1.4, 2.2), "airlight": (0.6, 0.85)},
        "rain": {"density": (16000.0, 26000.0), "length": (12, 20), "angle": (20.0, 45.0),
                 "intensity": (0.6, 0.9)},
        "blur": {"length": (8.0, 12.0), "angle": (0.0, 180.0), "sigma": (0.5, 1.2)},
    },
}


def sample_params(kind: DegradationKind, shape: tuple[int, int], rng: np.random.Generator,
                  domain: str = "synthetic"):
    ranges = PARAM_RANGES[domain][kind.label]
    if kind is DegradationKind.HAZE:
        a = rng.uniform(*ranges["airlight"])
        tint = rng.uniform(-0.03, 0.03, size=3)
        airlight = tuple(float(np.clip(a + t, 0.6, 1.0)) for t in tint)
        return HazeParams(airlight, float(rng.uniform(*ranges["beta"])), make_depth_field(*shape, rng))
    if kind is DegradationKind.RAIN:
        angle = float(rng.uniform(*ranges["angle"]))
        if domain == "real" and rng.random() < 0.5:
            angle = -angle
        lo, hi = ranges["length"]
        return RainParams(float(rng.uniform(*ranges["density"])), int(rng.integers(lo, hi + 1)),
                          angle, float(rng.uniform(*ranges["intensity"])))
    if kind is DegradationKind.BLUR:
        kernel = line_kernel(float(rng.uniform(*ranges["length"])), float(rng.uniform(*ranges["angle"])))
        sigma = float(rng.uniform(*ranges["sigma"]))
        if sigma > 0:
            kernel = ndimage.gaussian_filter(np.pad(kernel, 3), sigma=sigma)
            kernel /= kernel.sum()
        return BlurKernel(kernel)
    raise ValueError(f"no generator for {kind!r}")


def degrade(clean01: np.ndarray, kind: DegradationKind, params, rng: np.random.Generator) -> np.ndarray:
    if kind is DegradationKind.HAZE:
        return synth_haze(clean01, params)
    if kind is DegradationKind.RAIN:
        return synth_rain(clean01, params, rng)
    if kind is DegradationKind.BLUR:
        return synth_blur(clean01, params)
    raise ValueError(f"no generator for {kind!r}")


def params_record(params) -> dict:
    if isinstance(params, HazeParams):
        return {"airlight": list(params.airlight), "beta": params.beta,
                "mean_transmission": float(params.transmission().mean())}
    if isinstance(params, RainParams):
        return asdict(params)
    if isinstance(params, BlurKernel):
        return {"size": params.size, "weights": np.round(params.weights, 8).tolist()}
    raise TypeError(type(params))


# --------------------------------------------------------------------------
# corpus builders
# --------------------------------------------------------------------------

def write_clean_corpus(out_dir, n: int, size: int, seed: int) -> list[Path]:
    """Write ``n`` procedural clean ``size x size`` images as PNG."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for i in range(n):
        img = make_clean_image(size, size, worker_rng(seed, i, 7))
        path = out_dir / f"img_{i:05d}.png"
        save_image(normalize(img), path)
        paths.append(path)
    return paths


def _manifest(out_dir: Path, records: list, kinds, seed: int, domain: str) -> dict:
    manifest = {"seed": seed, "domain": domain, "kinds": [k.label for k in kinds], "entries": records}
    with open(out_dir / "manifest.json", "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=1)
    return manifest


def _clean_inputs(clean_dir) -> list[Path]:
    paths = list_images(clean_dir)
    if not paths:
        raise ValueError(f"no clean images found in {clean_dir}")
    return paths


def build_synthetic_dataset(clean_dir, out_dir, kinds: Iterable = DEFAULT_KINDS, seed: int = 0,
                            domain: str = "synthetic") -> dict:
    """Write one degraded image per (clean image, kind) in the paired layout."""
    kinds = parse_kinds(kinds)
    clean_paths = _clean_inputs(clean_dir)
    out_dir = Path(out_dir)
    records = []
    for kind in kinds:
        (out_dir / kind.label / "degraded").mkdir(parents=True, exist_ok=True)
        (out_dir / kind.label / "clean").mkdir(parents=True, exist_ok=True)
        for i, src in enumerate(clean_paths):
            file_seed = int(np.random.SeedSequence([seed, int(kind), i]).generate_state(1)[0])
            rng = np.random.default_rng(file_seed)
            clean_norm = load_image(src)
            clean01 = denormalize(clean_norm)
            params = sample_params(kind, clean01.shape[1:], rng, domain)
            out = degrade(clean01, kind, params, rng)
            name = src.stem + ".png"
            degraded_path = out_dir / kind.label / "degraded" / name
            clean_path = out_dir / kind.label / "clean" / name
            save_image(normalize(out), degraded_path)
            save_image(clean_norm, clean_path)
            records.append({
                "clean": str(clean_path.relative_to(out_dir)),
                "degraded": str(degraded_path.relative_to(out_dir)),
                "kind": kind.label, "split": "paired",
                "params": params_record(params), "seed": file_seed,
            })
    return _manifest(out_dir, records, kinds, seed, domain)


def build_real_dataset(clean_dir, out_dir, kinds: Iterable = DEFAULT_KINDS, seed: int = 0,
                       domain: str = "real") -> dict:
    """Write an unpaired corpus: clean images are shuffled into ``k + 1``
    disjoint groups, the first kept as ``clear/`` and the rest degraded with
    the shifted parameter ranges into ``<kind>/real/``."""
    kinds = parse_kinds(kinds)
    clean_paths = _clean_inputs(clean_dir)
    if len(clean_paths) < len(kinds) + 1:
        raise ValueError(f"need at least {len(kinds) + 1} clean images for an unpaired corpus")
    out_dir = Path(out_dir)
    order = worker_rng(seed, 2000, 0).permutation(len(clean_paths))
    groups = np.array_split(order, len(kinds) + 1)
    records = []
    (out_dir / "clear").mkdir(parents=True, exist_ok=True)
    for i in groups[0]:
        src = clean_paths[int(i)]
        dst = out_dir / "clear" / (src.stem + ".png")
        save_image(load_image(src), dst)
        records.append({"clean": str(dst.relative_to(out_dir)), "degraded": None, "kind": None,
                        "split": "clear", "params": None, "seed": None})
    for kind, group in zip(kinds, groups[1:]):
        (out_dir / kind.label / "real").mkdir(parents=True, exist_ok=True)
        for i in group:
            src = clean_paths[int(i)]
            file_seed = int(np.random.SeedSequence([seed, int(kind), int(i), 1]).generate_state(1)[0])
            rng = np.random.default_rng(file_seed)
            clean01 = denormalize(load_image(src))
            params = sample_params(kind, clean01.shape[1:], rng, domain)
            out = degrade(clean01, kind, params, rng)
            dst = out_dir / kind.label / "real" / (src.stem + ".png")
            save_image(normalize(out), dst)
            records.append({"clean": None, "degraded": str(dst.relative_to(out_dir)), "kind": kind.label,
                            "split": "real", "params": params_record(params), "seed": file_seed})
    return _manifest(out_dir, records, kinds, seed, domain)


def reset_dir(path) -> None:
    path = Path(path)
    if path.exists():
        shutil.rmtree(path)
    path.mkdir(parents=True)
