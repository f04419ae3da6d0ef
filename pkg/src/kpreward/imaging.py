"""Gray/RGB image helpers: netpbm I/O, appearance augmentation, pre-processing.

Images are plain float64 numpy arrays with values in [0, 1]; gray images are
(H, W) and RGB images are (H, W, 3). 8-bit quantization only happens on I/O.
"""

from __future__ import annotations

import os
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage


class ImageFormatError(ValueError):
    pass


def check_gray(img) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2 or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected a non-empty 2-D gray image, got shape {img.shape}")
    return img


# ---------------------------------------------------------------------------
# netpbm I/O

_MAGICS = {b"P2": (1, False), b"P5": (1, True), b"P6": (3, True)}


def _header_tokens(data: bytes, count: int):
    """Read ``count`` whitespace-separated header tokens, skipping comments.

    Returns the tokens and the offset just past the single whitespace byte
    following the last token.
    """
    tokens = []
    pos = 0
    n = len(data)
    while len(tokens) < count:
        while pos < n and data[pos:pos + 1].isspace():
            pos += 1
        if pos >= n:
            raise ImageFormatError(f"truncated header at byte offset {pos}")
        if data[pos:pos + 1] == b"#":
            while pos < n and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        tokens.append((data[start:pos], start))
    return tokens, pos + 1


def _parse_int(tok: bytes, offset: int) -> int:
    try:
        return int(tok)
    except ValueError:
        raise ImageFormatError(f"malformed header token {tok!r} at byte offset {offset}") from None


def decode_netpbm(data: bytes) -> np.ndarray:
    (magic, _), *_ = _header_tokens(data, 1)[0]
    if magic not in _MAGICS:
        raise ImageFormatError(f"unsupported magic {magic!r} at byte offset 0")
    channels, binary = _MAGICS[magic]
    tokens, body = _header_tokens(data, 4)
    width, height, maxval = (_parse_int(t, o) for t, o in tokens[1:])
    if width < 1 or height < 1:
        raise ImageFormatError(f"invalid dimensions at byte offset {tokens[1][1]}")
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} (only 255)")
    count = width * height * channels
    if binary:
        raw = data[body:body + count]
        if len(raw) != count:
            raise ImageFormatError(f"truncated pixel data at byte offset {body + len(raw)}")
        vals = np.frombuffer(raw, dtype=np.uint8)
    else:
        # P2 bodies may also carry comments
        text = b"\n".join(line.split(b"#", 1)[0] for line in data[tokens[3][1]:].splitlines())
        parts = text.split()[1:]
        if len(parts) < count:
            raise ImageFormatError(f"truncated pixel data: expected {count} values, found {len(parts)}")
        vals = np.array([int(v) for v in parts[:count]])
        if vals.min(initial=0) < 0 or vals.max(initial=0) > maxval:
            raise ImageFormatError("ASCII pixel value out of range")
    img = vals.astype(np.float64).reshape(height, width, channels) / 255.0
    return img[..., 0] if channels == 1 else img


def encode_netpbm(img, ascii_gray: bool = False) -> bytes:
    img = np.asarray(img, dtype=np.float64)
    q = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
    if img.ndim == 2:
        h, w = img.shape
        if ascii_gray:
            rows = "\n".join(" ".join(str(v) for v in row) for row in q)
            return f"P2\n{w} {h}\n255\n{rows}\n".encode("ascii")
        return f"P5\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
    if img.ndim == 3 and img.shape[2] == 3:
        h, w, _ = img.shape
        return f"P6\n{w} {h}\n255\n".encode("ascii") + q.tobytes()
    raise ValueError(f"cannot encode image of shape {img.shape}")


def load_image(path) -> np.ndarray:
    return decode_netpbm(Path(path).read_bytes())


def atomic_write_bytes(path, payload: bytes) -> None:
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save_image(img, path, ascii_gray: bool = False) -> None:
    atomic_write_bytes(path, encode_netpbm(img, ascii_gray=ascii_gray))


# ---------------------------------------------------------------------------
# augmentation

@dataclass(frozen=True)
class AugmentationConfig:
    noise: bool = True
    noise_sigma: tuple[float, float] = (0.0, 0.06)
    contrast: bool = True
    contrast_gain: tuple[float, float] = (0.5, 1.5)
    illumination: bool = True
    illumination_offset: tuple[float, float] = (-0.25, 0.25)
    gamma: bool = True
    gamma_range: tuple[float, float] = (0.5, 1.8)
    motion_blur: bool = True
    blur_lengths: tuple[int, ...] = (3, 5, 7, 9)
    blur_angle_deg: tuple[float, float] = (0.0, 180.0)
    invert: bool = True
    invert_prob: float = 0.5
    select_prob: float = 0.5

    def __post_init__(self):
        if self.noise_sigma[0] < 0 or self.noise_sigma[0] > self.noise_sigma[1]:
            raise ValueError("noise sigma range must satisfy 0 <= min <= max")
        if self.gamma_range[0] <= 0 or self.gamma_range[0] > self.gamma_range[1]:
            raise ValueError("gamma range must be positive and ordered")
        if not self.blur_lengths or any(k < 1 or k % 2 == 0 for k in self.blur_lengths):
            raise ValueError("blur kernel lengths must be odd and >= 1")
        for name in ("invert_prob", "select_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValueError(f"{name} must be a probability")

    @classmethod
    def disabled(cls) -> AugmentationConfig:
        return cls(noise=False, contrast=False, illumination=False, gamma=False,
                   motion_blur=False, invert=False)


def motion_blur_kernel(length: int, angle_deg: float) -> np.ndarray:
    """Normalized line kernel of ``length`` samples along ``angle_deg``."""
    k = np.zeros((length, length))
    c = (length - 1) / 2
    t = np.radians(angle_deg)
    for s in np.arange(length) - c:
        x = int(round(c + s * np.cos(t)))
        y = int(round(c + s * np.sin(t)))
        k[y, x] += 1.0
    return k / k.sum()


def augment(img, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Apply a random subset of appearance changes (fixed order)."""
    out = check_gray(img).copy()
    # draw the coin for every transform even when disabled: keeps streams aligned
    if rng.random() < cfg.select_prob and cfg.noise:
        sigma = rng.uniform(*cfg.noise_sigma)
        out = out + rng.normal(0.0, sigma, size=out.shape)
    if rng.random() < cfg.select_prob and cfg.contrast:
        gain = rng.uniform(*cfg.contrast_gain)
        out = (out - 0.5) * gain + 0.5
    if rng.random() < cfg.select_prob and cfg.illumination:
        out = out + rng.uniform(*cfg.illumination_offset)
    if rng.random() < cfg.select_prob and cfg.gamma:
        out = np.clip(out, 0.0, 1.0) ** rng.uniform(*cfg.gamma_range)
    if rng.random() < cfg.select_prob and cfg.motion_blur:
        length = int(rng.choice(cfg.blur_lengths))
        angle = rng.uniform(*cfg.blur_angle_deg)
        out = ndimage.convolve(out, motion_blur_kernel(length, angle), mode="nearest")
    if rng.random() < cfg.invert_prob and cfg.invert:
        out = 1.0 - np.clip(out, 0.0, 1.0)
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# test-time pre-processing

def _clip_histogram(hist: np.ndarray, limit: float) -> np.ndarray:
    excess = np.maximum(hist - limit, 0.0).sum()
    return np.minimum(hist, limit) + excess / hist.size


def tile_luts(img8: np.ndarray, grid: tuple[int, int], clip_limit: float) -> np.ndarray:
    """Equalization lookup tables for each tile, shape (gy, gx, 256).

    The image height/width must be divisible by the grid.
    """
    gy, gx = grid
    h, w = img8.shape
    th, tw = h // gy, w // gx
    area = th * tw
    limit = max(clip_limit * area / 256.0, 1.0)
    luts = np.empty((gy, gx, 256))
    for i in range(gy):
        for j in range(gx):
            tile = img8[i * th:(i + 1) * th, j * tw:(j + 1) * tw]
            hist = np.bincount(tile.ravel(), minlength=256).astype(np.float64)
            cdf = np.cumsum(_clip_histogram(hist, limit))
            span = cdf[-1] - cdf[0]
            if span <= 0:
                luts[i, j] = 0.0
            else:
                luts[i, j] = np.clip(np.round((cdf - cdf[0]) * 255.0 / span), 0, 255)
    return luts


def clahe(gray, grid: tuple[int, int] = (8, 8), clip_limit: float = 2.0) -> np.ndarray:
    """Contrast-limited adaptive histogram equalization on an 8-bit quantized image.

    ``clip_limit`` is in units of the mean histogram bin height (256 bins).
    Tile LUTs are blended bilinearly between tile centers.
    """
    gray = check_gray(gray)
    h, w = gray.shape
    gy, gx = min(grid[0], h), min(grid[1], w)
    img8 = np.clip(np.round(gray * 255.0), 0, 255).astype(np.intp)
    ph, pw = -h % gy, -w % gx
    padded = np.pad(img8, ((0, ph), (0, pw)), mode="symmetric") if (ph or pw) else img8
    luts = tile_luts(padded, (gy, gx), clip_limit)
    th, tw = padded.shape[0] // gy, padded.shape[1] // gx
    # continuous tile coordinate of every pixel, relative to tile centers
    ty = (np.arange(h) + 0.5) / th - 0.5
    tx = (np.arange(w) + 0.5) / tw - 0.5
    y0 = np.clip(np.floor(ty).astype(np.intp), 0, gy - 1)
    x0 = np.clip(np.floor(tx).astype(np.intp), 0, gx - 1)
    y1 = np.minimum(y0 + 1, gy - 1)
    x1 = np.minimum(x0 + 1, gx - 1)
    fy = np.clip(ty - y0, 0.0, 1.0)[:, None]
    fx = np.clip(tx - x0, 0.0, 1.0)[None, :]
    Y0, X0 = y0[:, None], x0[None, :]
    Y1, X1 = y1[:, None], x1[None, :]
    out = ((1 - fy) * ((1 - fx) * luts[Y0, X0, img8] + fx * luts[Y0, X1, img8])
           + fy * ((1 - fx) * luts[Y1, X0, img8] + fx * luts[Y1, X1, img8]))
    return out / 255.0


def bilateral_filter(gray, sigma_space: float = 5.0, sigma_range: float = 0.1, radius: int = 7) -> np.ndarray:
    gray = check_gray(gray)
    h, w = gray.shape
    padded = np.pad(gray, radius, mode="edge")
    num = np.zeros_like(gray)
    den = np.zeros_like(gray)
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            shifted = padded[radius + dy:radius + dy + h, radius + dx:radius + dx + w]
            wgt = np.exp(-(dx * dx + dy * dy) / (2 * sigma_space**2)
                         - (shifted - gray) ** 2 / (2 * sigma_range**2))
            num += wgt * shifted
            den += wgt
    return np.clip(num / den, 0.0, 1.0)


def preprocess(rgb) -> np.ndarray:
    """Green channel, then CLAHE (8x8 tiles, clip 2.0), then bilateral filtering."""
    rgb = np.asarray(rgb, dtype=np.float64)
    if rgb.ndim != 3 or rgb.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got {rgb.shape}")
    return bilateral_filter(clahe(rgb[..., 1]))


# ---------------------------------------------------------------------------
# cropping and procedural content

def random_crop(img, size: int, rng: np.random.Generator):
    """Uniformly placed ``size`` x ``size`` crop; returns (crop, (x0, y0))."""
    img = check_gray(img)
    h, w = img.shape
    if size < 1 or size > min(h, w):
        raise ValueError(f"crop size {size} does not fit a {w}x{h} image")
    x0 = int(rng.integers(0, w - size + 1))
    y0 = int(rng.integers(0, h - size + 1))
    return img[y0:y0 + size, x0:x0 + size].copy(), (x0, y0)


def textured_image(width: int, height: int, rng: np.random.Generator,
                   n_blobs: int | None = None, n_ridges: int | None = None) -> np.ndarray:
    """Procedural texture of Gaussian blobs and curved ridges on a smooth background.

    Stand-in for retinal content (vessels and spots) in tests and demos.
    """
    area = width * height
    n_blobs = max(4, area // 250) if n_blobs is None else n_blobs
    n_ridges = max(2, area // 700) if n_ridges is None else n_ridges
    ys, xs = np.mgrid[0:height, 0:width].astype(np.float64)
    img = 0.35 + 0.1 * ndimage.gaussian_filter(rng.standard_normal((height, width)), max(width, height) / 8)
    for _ in range(n_blobs):
        cx, cy = rng.uniform(0, width), rng.uniform(0, height)
        sx, sy = rng.uniform(1.2, 3.5, size=2)
        amp = rng.uniform(0.25, 0.6) * rng.choice((-1.0, 1.0))
        img += amp * np.exp(-((xs - cx) ** 2 / (2 * sx**2) + (ys - cy) ** 2 / (2 * sy**2)))
    for _ in range(n_ridges):
        # quadratic Bezier curve rasterized as a soft line
        p = rng.uniform([0, 0], [width, height], size=(3, 2))
        t = np.linspace(0, 1, 4 * (width + height))[:, None]
        curve = (1 - t) ** 2 * p[0] + 2 * (1 - t) * t * p[1] + t**2 * p[2]
        mask = np.zeros((height, width))
        cx = np.clip(np.round(curve[:, 0]).astype(int), 0, width - 1)
        cy = np.clip(np.round(curve[:, 1]).astype(int), 0, height - 1)
        mask[cy, cx] = 1.0
        mask = ndimage.gaussian_filter(mask, rng.uniform(0.7, 1.4))
        img -= rng.uniform(0.3, 0.5) * mask / max(mask.max(), 1e-12)
    return np.clip(img, 0.0, 1.0)
