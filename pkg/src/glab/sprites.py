"""Synthetic sprite images with exact single- or multi-label ground truth."""

from dataclasses import dataclass

import numpy as np

from .errors import GenerationError

SHAPES = ("square", "circle", "triangle", "cross", "ring", "bar-h", "bar-v", "dot")


@dataclass(frozen=True)
class SpriteConfig:
    count: int = 100
    height: int = 32
    width: int = 32
    channels: int = 1
    class_count: int = 8
    mode: str = "single"   # "single" or "multi"
    max_sprites: int = 3
    retries: int = 50


@dataclass
class SpriteDataset:
    images: np.ndarray      # [N, C, H, W] in [0, 1]
    label_sets: list        # sorted tuples of class indices
    class_count: int
    mode: str

    def __len__(self):
        return len(self.label_sets)


def shape_mask(kind, size):
    """Boolean ``size x size`` mask of one sprite."""
    t = (np.arange(size) + 0.5) / size * 2.0 - 1.0
    v, u = np.meshgrid(t, t, indexing="ij")  # v: rows (down), u: columns
    r2 = u * u + v * v
    if kind == "square":
        return (np.abs(u) <= 0.8) & (np.abs(v) <= 0.8)
    if kind == "circle":
        return r2 <= 0.85 ** 2
    if kind == "triangle":
        return (v >= -0.8) & (v <= 0.8) & (np.abs(u) <= (v + 0.8) / 1.6 * 0.9)
    if kind == "cross":
        return ((np.abs(u) <= 0.25) & (np.abs(v) <= 0.9)) | ((np.abs(v) <= 0.25) & (np.abs(u) <= 0.9))
    if kind == "ring":
        return (r2 <= 0.9 ** 2) & (r2 >= 0.5 ** 2)
    if kind == "bar-h":
        return (np.abs(v) <= 0.3) & (np.abs(u) <= 0.9)
    if kind == "bar-v":
        return (np.abs(u) <= 0.3) & (np.abs(v) <= 0.9)
    if kind == "dot":
        return r2 <= 0.4 ** 2
    raise GenerationError(f"unknown sprite kind {kind!r}")


def _overlaps(box, boxes):
    r0, c0, s = box
    for q0, d0, t in boxes:
        # one pixel of clearance between sprites
        if r0 < q0 + t + 1 and q0 < r0 + s + 1 and c0 < d0 + t + 1 and d0 < c0 + s + 1:
            return True
    return False


def _place(rng, cfg, k):
    """Jittered-grid placement of ``k`` square boxes ``(row, col, size)``."""
    h, w = cfg.height, cfg.width
    if k == 1:
        grid = [(0, 0, h, w)]
        lo, hi = max(8, min(h, w) // 3), max(8, (min(h, w) * 2) // 3)
    else:
        ch, cw = h // 2, w // 2
        grid = [(i * ch, j * cw, ch, cw) for i in range(2) for j in range(2)]
        lo, hi = 8, max(8, min(ch, cw) - 2)
    boxes = []
    cells = list(rng.permutation(len(grid)))
    for _ in range(k):
        for _ in range(cfg.retries):
            top, left, gh, gw = grid[cells[0]]
            size = int(rng.integers(lo, hi + 1))
            if size > gh or size > gw:
                continue
            box = (top + int(rng.integers(0, gh - size + 1)), left + int(rng.integers(0, gw - size + 1)), size)
            if not _overlaps(box, boxes):
                boxes.append(box)
                cells.pop(0)
                break
        else:
            raise GenerationError(f"could not place {k} sprites on a {h}x{w} canvas")
    return boxes


def generate_sprites(cfg, seed):
    """Render ``cfg.count`` images; deterministic for a given seed."""
    if cfg.mode not in ("single", "multi"):
        raise GenerationError(f"mode must be 'single' or 'multi', got {cfg.mode!r}")
    if not 1 <= cfg.class_count <= len(SHAPES):
        raise GenerationError(f"class_count must be in [1, {len(SHAPES)}]")
    if cfg.channels not in (1, 3):
        raise GenerationError("channels must be 1 or 3")
    if cfg.height < 16 or cfg.width < 16:
        raise GenerationError("images must be at least 16x16")
    if cfg.mode == "multi" and (cfg.height < 32 or cfg.width < 32):
        raise GenerationError("multi-label mode needs images of at least 32x32")
    if cfg.mode == "multi" and not 1 <= cfg.max_sprites <= min(4, cfg.class_count):
        raise GenerationError("max_sprites must be between 1 and min(4, class_count)")
    rng = np.random.default_rng(seed)
    images = np.zeros((cfg.count, cfg.channels, cfg.height, cfg.width))
    label_sets = []
    for n in range(cfg.count):
        k = 1 if cfg.mode == "single" else int(rng.integers(1, cfg.max_sprites + 1))
        classes = rng.choice(cfg.class_count, size=k, replace=False)
        for cls, (r0, c0, s) in zip(classes, _place(rng, cfg, k)):
            mask = shape_mask(SHAPES[cls], s)
            color = rng.uniform(0.4, 1.0, size=cfg.channels)
            for c in range(cfg.channels):
                images[n, c, r0:r0 + s, c0:c0 + s][mask] = color[c]
        label_sets.append(tuple(sorted(int(c) for c in classes)))
    return SpriteDataset(images, label_sets, cfg.class_count, cfg.mode)
