"""Image-domain primitives: decoding, histograms, patches, augmentation.

Images are H x W x 3 float64 arrays with values in [0, 1]. Every function
here is pure given its inputs and RNG, so callers may parallelize across
images with per-image RNG streams.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import DegeneracyWarning, DimensionError

WHITE_BACKGROUND_MIN = 250.0 / 255.0
LUMA_WEIGHTS = np.array([0.299, 0.587, 0.114])
HIST_EPS = 1e-8


def check_image(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[2] != 3:
        raise DimensionError(f"expected H x W x 3 image, got shape {image.shape}")
    if image.shape[0] < 1 or image.shape[1] < 1:
        raise DimensionError("image must have at least one pixel")
    if image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


# -- file I/O -------------------------------------------------------------------


def load_image(path: str | Path, side: int | None = None) -> np.ndarray:
    """Decode a PPM (P6) or PNG file; optionally resize to ``side`` x ``side``."""
    path = Path(path)
    suffix = path.suffix.lower()
    if suffix == ".ppm":
        image = _read_ppm(path)
    elif suffix == ".png":
        from PIL import Image

        with Image.open(path) as im:
            rgb = np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0
        image = rgb
    else:
        raise ValueError(f"unsupported image format: {path.name} (expected .ppm or .png)")
    if side is not None:
        image = resize_bilinear(image, side)
    return image


def _read_ppm(path: Path) -> np.ndarray:
    blob = path.read_bytes()
    if not blob.startswith(b"P6"):
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    fields: list[int] = []
    pos = 2
    while len(fields) < 3:
        while pos < len(blob) and blob[pos:pos + 1].isspace():
            pos += 1
        if blob[pos:pos + 1] == b"#":
            while pos < len(blob) and blob[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(blob[start:pos]))
    pos += 1  # single whitespace after maxval
    width, height, maxval = fields
    if maxval != 255:
        raise ValueError(f"{path}: only maxval 255 PPM supported, got {maxval}")
    pixels = np.frombuffer(blob, dtype=np.uint8, count=width * height * 3, offset=pos)
    return pixels.reshape(height, width, 3).astype(np.float64) / 255.0


def save_ppm(path: str | Path, image: np.ndarray) -> None:
    image = check_image(image)
    h, w, _ = image.shape
    header = f"P6\n{w} {h}\n255\n".encode("ascii")
    body = np.round(image * 255.0).clip(0, 255).astype(np.uint8).tobytes()
    Path(path).write_bytes(header + body)


# -- resizing -------------------------------------------------------------------


def resize_bilinear(image: np.ndarray, side: int) -> np.ndarray:
    """Bilinear resample to side x side (half-pixel-center convention)."""
    image = check_image(image)
    if side < 1:
        raise DimensionError("target side must be >= 1")
    h, w, _ = image.shape
    if (h, w) == (side, side):
        return image.copy()

    def axis_coords(n_in: int, n_out: int):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(np.intp)
        hi = np.minimum(lo + 1, n_in - 1)
        frac = src - lo
        return lo, hi, frac

    y0, y1, fy = axis_coords(h, side)
    x0, x1, fx = axis_coords(w, side)
    top = image[y0][:, x0] * (1 - fx)[None, :, None] + image[y0][:, x1] * fx[None, :, None]
    bot = image[y1][:, x0] * (1 - fx)[None, :, None] + image[y1][:, x1] * fx[None, :, None]
    out = top * (1 - fy)[:, None, None] + bot * fy[:, None, None]
    return np.clip(out, 0.0, 1.0)


# -- color histograms -------------------------------------------------------------


@dataclass
class ColorHistogram:
    """Per-channel normalized n-bin histograms (rows: R, G, B)."""

    n_bins: int
    values: np.ndarray  # shape [3, n_bins], each row sums to 1
    degenerate: bool = False

    @property
    def h_r(self) -> np.ndarray:
        return self.values[0]

    @property
    def h_g(self) -> np.ndarray:
        return self.values[1]

    @property
    def h_b(self) -> np.ndarray:
        return self.values[2]


def compute_histogram(image: np.ndarray, n_bins: int = 10,
                      exclude_background: bool = True) -> ColorHistogram:
    """Normalized per-channel histogram over uniform bins on [0, 1].

    Bin l covers [l/n, (l+1)/n) with the final bin closed at 1.0. With
    ``exclude_background``, pixels whose min channel is >= 250/255 are
    dropped from all three channels. If every pixel is excluded the result
    is uniform and flagged degenerate.
    """
    image = check_image(image)
    if n_bins < 2:
        raise DimensionError("n_bins must be >= 2")
    flat = image.reshape(-1, 3)
    if exclude_background:
        keep = flat.min(axis=1) < WHITE_BACKGROUND_MIN
        flat = flat[keep]
    if flat.shape[0] == 0:
        warnings.warn("all pixels excluded as background; returning uniform histogram",
                      DegeneracyWarning, stacklevel=2)
        return ColorHistogram(n_bins, np.full((3, n_bins), 1.0 / n_bins), degenerate=True)
    bins = np.minimum((flat * n_bins).astype(np.intp), n_bins - 1)
    values = np.zeros((3, n_bins))
    for c in range(3):
        values[c] = np.bincount(bins[:, c], minlength=n_bins)
    values /= flat.shape[0]
    return ColorHistogram(n_bins, values)


def compute_histograms_batch(images: np.ndarray, n_bins: int = 10,
                             exclude_background: bool = True) -> np.ndarray:
    """Histogram targets for a [B, 3, S, S] stack; returns [B, 3, n_bins].

    Degenerate (all-background) images silently get the uniform fallback;
    per-image flags are only reported by :func:`compute_histogram`.
    """
    out = np.empty((images.shape[0], 3, n_bins))
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegeneracyWarning)
        for i, chw in enumerate(images):
            hist = compute_histogram(chw.transpose(1, 2, 0), n_bins, exclude_background)
            out[i] = hist.values
    return out


# -- shapeless local patches --------------------------------------------------------


@dataclass
class PatchSpec:
    """Square patch sampler config; ratios are fractions of image area."""

    area_ratio_range: tuple[float, float] = (0.05, 0.15)

    def __post_init__(self):
        lo, hi = self.area_ratio_range
        if not (0.0 < lo <= hi <= 1.0):
            raise ValueError(f"invalid area ratio range [{lo}, {hi}]")


def sample_shapeless_patch(image: np.ndarray, spec: PatchSpec, rng: np.random.Generator,
                           out_side: int | None = None) -> np.ndarray:
    """Crop a random square covering an area fraction drawn from the spec.

    Side length is max(2, floor(sqrt(r * w * h))), clamped to the image;
    the corner is uniform over valid positions. When ``out_side`` is given
    the crop is resized (bilinear) to that side.
    """
    image = check_image(image)
    h, w, _ = image.shape
    if h * w < 4:
        raise DimensionError("image too small to sample a patch")
    lo, hi = spec.area_ratio_range
    r = rng.uniform(lo, hi)
    side = max(2, int(np.floor(np.sqrt(r * w * h))))
    side = min(side, h, w)
    top = int(rng.integers(0, h - side + 1))
    left = int(rng.integers(0, w - side + 1))
    patch = image[top:top + side, left:left + side]
    if out_side is not None:
        patch = resize_bilinear(patch, out_side)
    return patch.copy() if out_side is None else patch


# -- augmentation pipeline ------------------------------------------------------------


@dataclass
class AugmentConfig:
    """Pipeline toggles: flip, square crop by area ratio, color distortion."""

    flip: bool = True
    crop_ratio_range: tuple[float, float] | None = (0.2, 1.0)
    color_distortion: bool = False
    jitter: float = 0.4
    grayscale_prob: float = 0.2


def to_grayscale(image: np.ndarray) -> np.ndarray:
    luma = image @ LUMA_WEIGHTS
    return np.repeat(luma[:, :, None], 3, axis=2)


def augment(image: np.ndarray, pipeline: AugmentConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply flip (p=0.5), random square crop, and optional color distortion.

    Color distortion is brightness/contrast/saturation jitter by factors in
    [1-j, 1+j] plus grayscale conversion with probability 0.2. Output is
    clamped to [0, 1]. With every stage disabled this is the identity.
    """
    image = check_image(image)
    if pipeline.flip and rng.random() < 0.5:
        image = image[:, ::-1, :]
    if pipeline.crop_ratio_range is not None:
        image = sample_shapeless_patch(image, PatchSpec(pipeline.crop_ratio_range), rng)
    if pipeline.color_distortion:
        j = pipeline.jitter
        brightness, contrast, saturation = 1.0 + rng.uniform(-j, j, size=3)
        image = image * brightness
        gray_mean = float((np.clip(image, 0.0, 1.0) @ LUMA_WEIGHTS).mean())
        image = (image - gray_mean) * contrast + gray_mean
        luma = np.clip(image, 0.0, 1.0) @ LUMA_WEIGHTS
        image = luma[:, :, None] + saturation * (image - luma[:, :, None])
        if rng.random() < pipeline.grayscale_prob:
            image = to_grayscale(np.clip(image, 0.0, 1.0))
    return np.clip(image, 0.0, 1.0)
