"""Classical image processing: Canny edges, baseline points, metrics, PGM/PPM I/O."""

import math
from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy import ndimage

from .autodiff import Tensor
from .errors import ContractError, FormatError

LUMA = (0.299, 0.587, 0.114)


@dataclass(frozen=True)
class GrayImage:
    pixels: np.ndarray  # [H, W], clamped to [0, 1]

    def __post_init__(self):
        arr = np.clip(np.array(self.pixels, dtype=np.float64), 0.0, 1.0)
        if arr.ndim != 2:
            raise ContractError(f"GrayImage needs a 2-D array, got shape {arr.shape}")
        arr.setflags(write=False)
        object.__setattr__(self, "pixels", arr)

    @property
    def height(self):
        return self.pixels.shape[0]

    @property
    def width(self):
        return self.pixels.shape[1]


@dataclass(frozen=True)
class EdgeMap:
    mask: np.ndarray  # [H, W] bool, True = edge pixel

    @property
    def height(self):
        return self.mask.shape[0]

    @property
    def width(self):
        return self.mask.shape[1]

    def count(self):
        return int(self.mask.sum())


@dataclass(frozen=True)
class BaselinePoint:
    row: int
    col: int
    fallback: bool = False  # True when the selection was empty and the centre was used

    def distance2(self, other):
        return (self.row - other.row) ** 2 + (self.col - other.col) ** 2


def _pixels(img):
    if isinstance(img, GrayImage):
        return img.pixels
    return np.asarray(img, dtype=np.float64)


# -- canny ------------------------------------------------------------------------

def gaussian_kernel(size=5, sigma=1.0):
    r = size // 2
    d = np.arange(-r, r + 1, dtype=np.float64)
    g = np.exp(-(d[:, None] ** 2 + d[None, :] ** 2) / (2.0 * sigma * sigma))
    return g / g.sum()


SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]])
SOBEL_Y = SOBEL_X.T.copy()


@njit(cache=True)
def _correlate_replicate(img, kernel):
    """Correlation with edge replication; taps are accumulated one at a time
    in row-major kernel order."""
    h, w = img.shape
    kh, kw = kernel.shape
    ph, pw = kh // 2, kw // 2
    pad = np.empty((h + 2 * ph, w + 2 * pw))
    for y in range(h + 2 * ph):
        sy = min(max(y - ph, 0), h - 1)
        for x in range(w + 2 * pw):
            pad[y, x] = img[sy, min(max(x - pw, 0), w - 1)]
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            s = 0.0
            for i in range(kh):
                for j in range(kw):
                    s = s + kernel[i, j] * pad[y + i, x + j]
            out[y, x] = s
    return out


GAUSS5 = gaussian_kernel(5, 1.0)


def sobel_gradients(img):
    """Sobel derivatives of the 5x5 Gaussian-blurred image."""
    blurred = _correlate_replicate(np.ascontiguousarray(_pixels(img)), GAUSS5)
    return _correlate_replicate(blurred, SOBEL_X), _correlate_replicate(blurred, SOBEL_Y)


_RAD2DEG = 180.0 / math.pi


@njit(cache=True)
def _nms_kernel(mag, gx, gy):
    h, w = mag.shape
    out = np.zeros((h, w))
    for y in range(h):
        for x in range(w):
            a = (math.atan2(gy[y, x], gx[y, x]) * _RAD2DEG) % 180.0
            if a < 22.5 or a >= 157.5:
                dy1, dx1, dy2, dx2 = 0, 1, 0, -1
            elif a < 67.5:
                dy1, dx1, dy2, dx2 = 1, 1, -1, -1
            elif a < 112.5:
                dy1, dx1, dy2, dx2 = 1, 0, -1, 0
            else:
                dy1, dx1, dy2, dx2 = 1, -1, -1, 1
            m = mag[y, x]
            n1 = 0.0
            n2 = 0.0
            if 0 <= y + dy1 < h and 0 <= x + dx1 < w:
                n1 = mag[y + dy1, x + dx1]
            if 0 <= y + dy2 < h and 0 <= x + dx2 < w:
                n2 = mag[y + dy2, x + dx2]
            if m >= n1 and m >= n2:
                out[y, x] = m
    return out


def non_max_suppression(mag, gx, gy):
    """Keep pixels not smaller than both neighbours along the quantized
    gradient direction (4 bins); neighbours outside the image count as 0."""
    return _nms_kernel(np.ascontiguousarray(mag), np.ascontiguousarray(gx), np.ascontiguousarray(gy))


@njit(cache=True)
def _hysteresis_kernel(nms, lo, hi):
    h, w = nms.shape
    edge = np.zeros((h, w), dtype=np.bool_)
    stack = np.empty((h * w, 2), dtype=np.int64)
    top = 0
    for y in range(h):
        for x in range(w):
            if nms[y, x] > 0 and nms[y, x] >= hi:
                edge[y, x] = True
                stack[top, 0] = y
                stack[top, 1] = x
                top += 1
    while top > 0:
        top -= 1
        y = stack[top, 0]
        x = stack[top, 1]
        for dy in range(-1, 2):
            for dx in range(-1, 2):
                yy = y + dy
                xx = x + dx
                if 0 <= yy < h and 0 <= xx < w and not edge[yy, xx]:
                    if nms[yy, xx] > 0 and nms[yy, xx] >= lo:
                        edge[yy, xx] = True
                        stack[top, 0] = yy
                        stack[top, 1] = xx
                        top += 1
    return edge


def hysteresis(nms, thre1, thre2):
    """Strong pixels (>= thre2) plus weak ones (>= thre1) 8-connected to them."""
    return _hysteresis_kernel(np.ascontiguousarray(nms), float(thre1), float(thre2))


def canny(img, thre1, thre2):
    """Edge map: 5x5 Gaussian blur (sigma 1), Sobel, non-maximum suppression,
    double threshold, 8-connected hysteresis.

    Pixels with suppressed magnitude >= ``thre2`` are strong; those in
    ``[thre1, thre2)`` are weak and survive only if connected to a strong one.
    Zero-magnitude pixels are never edges.
    """
    if not 0 <= thre1 <= thre2:
        raise ContractError(f"canny needs 0 <= thre1 <= thre2, got {thre1}, {thre2}")
    return EdgeMap(_canny_kernel(np.ascontiguousarray(_pixels(img)), GAUSS5, SOBEL_X, SOBEL_Y,
                                 float(thre1), float(thre2)))


@njit(cache=True)
def _canny_kernel(img, gauss, sx, sy, lo, hi):
    blurred = _correlate_replicate(img, gauss)
    gx = _correlate_replicate(blurred, sx)
    gy = _correlate_replicate(blurred, sy)
    mag = np.sqrt(gx * gx + gy * gy)
    return _hysteresis_kernel(_nms_kernel(mag, gx, gy), lo, hi)


# -- baseline points ----------------------------------------------------------------

def center_point(height, width):
    return BaselinePoint(height // 2, width // 2, fallback=True)


def _pick(coords, height, width):
    n = len(coords)
    if n == 0:
        return None
    return coords[n // 2][0], coords[(2 * n) // 3][1]


def baseline_from_gradients(bpg, image_dims, fraction=0.6):
    """Baseline point from a 2-D gradient matrix, scaled to image coordinates.

    Entries above ``min + fraction * (max - min)`` are listed in row-major
    order; the row comes from the middle entry and the column from the one at
    two thirds.  An empty selection falls back to the image centre.
    """
    m = np.asarray(bpg, dtype=np.float64)
    if m.ndim != 2 or m.size == 0:
        raise ContractError(f"baseline_from_gradients needs a non-empty 2-D matrix, got {m.shape}")
    img_h, img_w = image_dims
    lo, hi = m.min(), m.max()
    cut = lo + fraction * (hi - lo)
    coords = np.argwhere(m > cut)
    picked = _pick(coords, img_h, img_w)
    if picked is None:
        return center_point(img_h, img_w)
    row, col = picked
    gra_h, gra_w = m.shape
    return BaselinePoint(int(row) * img_h // gra_h, int(col) * img_w // gra_w)


def baseline_from_edges(edges):
    """Baseline point of an edge map: row of the middle edge pixel, column of
    the edge pixel two thirds along the row-major list."""
    coords = np.argwhere(edges.mask)
    picked = _pick(coords, edges.height, edges.width)
    if picked is None:
        return center_point(edges.height, edges.width)
    return BaselinePoint(int(picked[0]), int(picked[1]))


def matrix_view(arr):
    """2-D view of a gradient tensor: matrices as-is, vectors as one row,
    higher ranks with the first two axes as rows and the rest as columns."""
    a = np.asarray(arr, dtype=np.float64)
    if a.ndim == 0:
        return a.reshape(1, 1)
    if a.ndim == 1:
        return a.reshape(1, -1)
    if a.ndim == 2:
        return a
    return a.reshape(a.shape[0] * a.shape[1], -1)


# -- metrics ------------------------------------------------------------------------

def _same_dims(a, b):
    pa, pb = _pixels(a), _pixels(b)
    if pa.shape != pb.shape:
        raise ContractError(f"image dimensions differ: {pa.shape} vs {pb.shape}")
    return pa, pb


def psnr(a, b, peak=1.0):
    """Peak signal-to-noise ratio in dB; ``inf`` when the images are identical."""
    pa, pb = _same_dims(a, b)
    mse = float(np.mean((pa - pb) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def ssim(a, b, data_range=1.0, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM with an 11x11 Gaussian window (reflect borders, 5-pixel crop)."""
    pa, pb = _same_dims(a, b)
    c1 = (k1 * data_range) ** 2
    c2 = (k2 * data_range) ** 2

    def blur(x):
        return ndimage.gaussian_filter(x, sigma, mode="reflect", truncate=3.5)

    mu_a, mu_b = blur(pa), blur(pb)
    saa = blur(pa * pa) - mu_a * mu_a
    sbb = blur(pb * pb) - mu_b * mu_b
    sab = blur(pa * pb) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (saa + sbb + c2)
    smap = num / den
    pad = 5
    if smap.shape[0] > 2 * pad and smap.shape[1] > 2 * pad:
        smap = smap[pad:-pad, pad:-pad]
    return float(smap.mean())


def total_variation(x):
    """Anisotropic L1 total variation summed over channels.

    Accepts a 2-D array, a ``[C,H,W]`` / ``[N,C,H,W]`` array, a GrayImage, or
    a Tensor (in which case the result is a differentiable scalar Tensor).
    """
    if isinstance(x, Tensor):
        dv = x[..., 1:, :] - x[..., :-1, :]
        dh = x[..., :, 1:] - x[..., :, :-1]
        return dv.abs().sum() + dh.abs().sum()
    p = _pixels(x)
    return float(np.abs(np.diff(p, axis=-2)).sum() + np.abs(np.diff(p, axis=-1)).sum())


def total_variation_grad(x):
    """Subgradient of ``total_variation`` for a numpy array (sign convention 0 at ties)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    sv = np.sign(np.diff(x, axis=-2))
    sh = np.sign(np.diff(x, axis=-1))
    g[..., 1:, :] += sv
    g[..., :-1, :] -= sv
    g[..., :, 1:] += sh
    g[..., :, :-1] -= sh
    return g


# -- conversion and files -------------------------------------------------------------

def to_gray(tensor):
    """``[C,H,W]`` with C in {1, 3} to a GrayImage (luminance for RGB)."""
    arr = tensor.data if isinstance(tensor, Tensor) else np.asarray(tensor, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise ContractError(f"to_gray needs [C,H,W] with C in {{1, 3}}, got shape {arr.shape}")
    if arr.shape[0] == 1:
        return GrayImage(arr[0])
    return GrayImage(LUMA[0] * arr[0] + LUMA[1] * arr[1] + LUMA[2] * arr[2])


def quantize(arr):
    return np.round(np.clip(np.asarray(arr, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, arr):
    """Write ``[H,W]``, ``[1,H,W]`` or ``[3,H,W]`` data in [0,1] as binary PGM/PPM."""
    a = _pixels(arr)
    if a.ndim == 3 and a.shape[0] == 1:
        a = a[0]
    if a.ndim == 2:
        magic, body = b"P5", quantize(a)
    elif a.ndim == 3 and a.shape[0] == 3:
        magic, body = b"P6", quantize(a.transpose(1, 2, 0))
    else:
        raise ContractError(f"cannot write image of shape {a.shape}")
    h, w = body.shape[:2]
    with open(path, "wb") as fh:
        fh.write(magic + b"\n%d %d\n255\n" % (w, h) + body.tobytes())


def _header_tokens(buf):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PNM header", pos)
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_image(path):
    """Read a binary PGM (-> ``[1,H,W]``) or PPM (-> ``[3,H,W]``) into [0, 1]."""
    with open(path, "rb") as fh:
        buf = fh.read()
    tokens, pos = _header_tokens(buf)
    magic = tokens[0]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"unsupported PNM magic {magic!r}", 0)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise FormatError("non-numeric PNM header field", 2) from exc
    if maxval != 255:
        raise FormatError(f"only maxval 255 is supported, got {maxval}")
    chans = 1 if magic == b"P5" else 3
    n = w * h * chans
    if len(buf) - pos < n:
        raise FormatError("truncated PNM pixel data", len(buf))
    data = np.frombuffer(buf[pos:pos + n], dtype=np.uint8).astype(np.float64) / 255.0
    if chans == 1:
        return data.reshape(1, h, w)
    return data.reshape(h, w, 3).transpose(2, 0, 1).copy()
