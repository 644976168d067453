"""Synthetic light fields with exact disparity ground truth.

Scenes are stacks of fronto-parallel or slanted layers drawn back to front,
plus additive highlights whose position drifts with the viewpoint
independently of scene geometry. Constant-colour layers reproduce the
texture-less case; drifting highlights the reflective one.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from .lightfield import (
    GT_FILENAME,
    MASK_FILES,
    DisparityMap,
    LightField,
    quantize,
    save_lightfield,
    write_png,
)
from .pfm import write_pfm


@dataclass
class Texture:
    kind: str  # "noise" | "constant" | "checkerboard"
    color: Tuple[float, float, float] = (0.5, 0.5, 0.5)
    scale: float = 1.5
    contrast: float = 0.35
    period: int = 4
    color2: Tuple[float, float, float] = (0.2, 0.2, 0.2)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("noise", "constant", "checkerboard"):
            raise ValueError(f"unknown texture kind {self.kind!r}")

    def image(self, h: int, w: int, margin: int) -> np.ndarray:
        """Texture raster covering the view plus ``margin`` pixels on every side."""
        hh, ww = h + 2 * margin, w + 2 * margin
        if self.kind == "constant":
            return np.broadcast_to(np.asarray(self.color, dtype=np.float64), (hh, ww, 3)).copy()
        if self.kind == "checkerboard":
            yy, xx = np.mgrid[0:hh, 0:ww] - margin
            on = ((xx // self.period + yy // self.period) % 2).astype(bool)
            return np.where(on[..., None], np.asarray(self.color), np.asarray(self.color2))
        rng = np.random.default_rng(self.seed)
        noise = rng.standard_normal((hh, ww, 3))
        noise = np.stack([gaussian_filter(noise[..., c], self.scale, mode="wrap") for c in range(3)], -1)
        noise /= noise.std() + 1e-12
        return np.clip(np.asarray(self.color) + self.contrast * noise / 2.5, 0.0, 1.0)


@dataclass
class Layer:
    """Disparity ``slope_x*(x-cx) + slope_y*(y-cy) + offset`` over a region.

    ``region`` is ``(x0, y0, x1, y1)`` in central-view pixels, half-open, or
    ``None`` for the full frame.
    """

    offset: float
    texture: Texture
    slope_x: float = 0.0
    slope_y: float = 0.0
    region: Optional[Tuple[int, int, int, int]] = None

    def disparity(self, xx: np.ndarray, yy: np.ndarray, cx: float, cy: float) -> np.ndarray:
        return self.slope_x * (xx - cx) + self.slope_y * (yy - cy) + self.offset


@dataclass
class Blob:
    x: float
    y: float
    radius: float
    intensity: float
    drift: float

    def profile(self, xx: np.ndarray, yy: np.ndarray, du: float = 0.0, dv: float = 0.0) -> np.ndarray:
        bx = self.x + self.drift * du
        by = self.y + self.drift * dv
        return np.exp(-((xx - bx) ** 2 + (yy - by) ** 2) / (2.0 * self.radius ** 2))


@dataclass
class SceneSpec:
    grid: Tuple[int, int] = (9, 9)
    size: Tuple[int, int] = (48, 48)
    layers: List[Layer] = field(default_factory=list)
    blobs: List[Blob] = field(default_factory=list)
    disparity_range: Tuple[float, float] = (-2.0, 2.0)

    def to_text(self) -> str:
        lines = [f"grid={self.grid[0]}x{self.grid[1]}", f"size={self.size[1]}x{self.size[0]}",
                 f"disparity_range={self.disparity_range[0]},{self.disparity_range[1]}",
                 f"layers={len(self.layers)}", f"blobs={len(self.blobs)}"]
        for i, l in enumerate(self.layers):
            t = l.texture
            region = "full" if l.region is None else ",".join(str(v) for v in l.region)
            lines.append(f"layer{i}.disparity={l.slope_x!r},{l.slope_y!r},{l.offset!r}")
            lines.append(f"layer{i}.region={region}")
            lines.append(f"layer{i}.texture={t.kind}")
            lines.append(f"layer{i}.color={','.join(repr(float(c)) for c in t.color)}")
        for i, b in enumerate(self.blobs):
            lines.append(f"blob{i}={b.x!r},{b.y!r},{b.radius!r},{b.intensity!r},{b.drift!r}")
        return "\n".join(lines) + "\n"


@dataclass
class GeneratedSample:
    lightfield: LightField
    disparity: DisparityMap
    masks: Dict[str, np.ndarray]
    layer_ids: np.ndarray  # index of the visible layer at each central-view pixel


def _bilinear(img: np.ndarray, x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Sample ``img`` (H, W[, C]) at float coordinates with edge clamping."""
    h, w = img.shape[:2]
    x = np.clip(x, 0, w - 1)
    y = np.clip(y, 0, h - 1)
    x0 = np.floor(x).astype(np.intp)
    y0 = np.floor(y).astype(np.intp)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = x - x0
    fy = y - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]
    # a + f*(b - a) keeps constant neighbourhoods exact.
    top = img[y0, x0] + fx * (img[y0, x1] - img[y0, x0])
    bot = img[y1, x0] + fx * (img[y1, x1] - img[y1, x0])
    return top + fy * (bot - top)


SPECULAR_THRESHOLD = 0.2


def render(spec: SceneSpec) -> GeneratedSample:
    """Render every view of ``spec`` and the central-view ground truth."""
    cols, rows = spec.grid
    h, w = spec.size
    if cols % 2 == 0 or rows % 2 == 0:
        raise ValueError(f"grid must be odd, got {cols}x{rows}")
    if not spec.layers:
        raise ValueError("scene needs at least one layer")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
    lo, hi = spec.disparity_range
    disp = []
    for i, layer in enumerate(spec.layers):
        d = layer.disparity(xx, yy, cx, cy)
        if d.min() < lo - 1e-12 or d.max() > hi + 1e-12:
            raise ValueError(
                f"layer {i} disparity [{d.min():.3f}, {d.max():.3f}] outside range [{lo}, {hi}]")
        disp.append(d)
    max_off = max(cols // 2, rows // 2)
    margin = int(np.ceil(max(abs(lo), abs(hi)) * max_off)) + 2
    textures = [l.texture.image(h, w, margin) for l in spec.layers]
    supports = []
    for layer in spec.layers:
        s = np.zeros((h + 2 * margin, w + 2 * margin))
        if layer.region is None:
            s[:] = 1.0
        else:
            x0, y0, x1, y1 = layer.region
            s[margin + max(y0, -margin):margin + y1, margin + max(x0, -margin):margin + x1] = 1.0
        supports.append(s)

    views = np.empty((rows, cols, h, w, 3), dtype=np.float64)
    cu, cv = cols // 2, rows // 2
    for v in range(rows):
        for u in range(cols):
            du, dv = u - cu, v - cv
            img = np.zeros((h, w, 3))
            for d, tex, sup in zip(disp, textures, supports):
                sx = xx + du * d + margin
                sy = yy + dv * d + margin
                alpha = _bilinear(sup, sx, sy)[..., None]
                img = img * (1 - alpha) + alpha * _bilinear(tex, sx, sy)
            for b in spec.blobs:
                img = img + b.intensity * b.profile(xx, yy, du, dv)[..., None]
            views[v, u] = np.clip(img, 0.0, 1.0)

    layer_ids = np.zeros((h, w), dtype=np.int32)
    gt = np.zeros((h, w))
    for i, (d, sup) in enumerate(zip(disp, supports)):
        inside = sup[margin:margin + h, margin:margin + w] >= 0.5
        layer_ids[inside] = i
        gt[inside] = d[inside]
    specular = np.zeros((h, w), dtype=bool)
    for b in spec.blobs:
        specular |= b.profile(xx, yy) > SPECULAR_THRESHOLD
    constant = np.array([l.texture.kind == "constant" for l in spec.layers])
    textureless = constant[layer_ids] & ~specular
    textured = ~(specular | textureless)
    masks = {"textureless": textureless, "specular": specular, "textured": textured}
    return GeneratedSample(LightField(views.astype(np.float32)), DisparityMap(gt.astype(np.float32)),
                           masks, layer_ids)


# ---------------------------------------------------------------- random corpora


@dataclass
class CorpusRanges:
    disparity: Tuple[float, float] = (-1.5, 1.5)
    max_slope: float = 0.008
    rect_fraction: Tuple[float, float] = (0.22, 0.55)
    textureless_min: int = 16
    extra_rects: Tuple[int, int] = (1, 2)
    p_textureless: float = 0.5
    p_specular: float = 0.5
    blob_radius: Tuple[float, float] = (2.0, 4.0)
    blob_intensity: Tuple[float, float] = (0.3, 0.6)
    blob_drift: Tuple[float, float] = (-2.0, 2.0)


def _color(rng: np.random.Generator) -> Tuple[float, float, float]:
    return tuple(float(c) for c in rng.uniform(0.15, 0.85, 3))


def _textured(rng: np.random.Generator) -> Texture:
    if rng.random() < 0.8:
        return Texture("noise", color=_color(rng), scale=float(rng.uniform(0.7, 1.6)),
                       contrast=float(rng.uniform(0.5, 0.9)), seed=int(rng.integers(2**31)))
    return Texture("checkerboard", color=_color(rng), color2=_color(rng),
                   period=int(rng.integers(2, 5)))


def _rect(rng: np.random.Generator, h: int, w: int, lo: int, hi: int):
    rw = int(rng.integers(lo, hi + 1))
    rh = int(rng.integers(lo, hi + 1))
    x0 = int(rng.integers(0, w - rw + 1))
    y0 = int(rng.integers(0, h - rh + 1))
    return (x0, y0, x0 + rw, y0 + rh)


def random_scene(rng: np.random.Generator, size: Tuple[int, int] = (48, 48),
                 grid: Tuple[int, int] = (9, 9), ranges: Optional[CorpusRanges] = None,
                 textureless: Optional[bool] = None, specular: Optional[bool] = None) -> SceneSpec:
    """Draw a random layered scene. ``textureless``/``specular`` force those features on or off."""
    r = ranges or CorpusRanges()
    h, w = size
    dlo, dhi = r.disparity
    if textureless is None:
        textureless = bool(rng.random() < r.p_textureless)
    if specular is None:
        specular = bool(rng.random() < r.p_specular)

    bg_offset = float(rng.uniform(dlo + 0.3, 0.3 * dhi))
    slope_x = slope_y = 0.0
    if rng.random() < 0.5:
        span = max(h, w) / 2.0
        limit = min(r.max_slope, (bg_offset - dlo) / span, (dhi - bg_offset) / span)
        slope_x, slope_y = (float(s) for s in rng.uniform(-limit, limit, 2) * 0.9)
    layers = [Layer(bg_offset, _textured(rng), slope_x, slope_y)]
    bg_max = bg_offset + (abs(slope_x) * w + abs(slope_y) * h) / 2.0

    lo_px = max(4, int(r.rect_fraction[0] * min(h, w)))
    hi_px = max(lo_px, int(r.rect_fraction[1] * min(h, w)))
    fg = []
    n_rects = int(rng.integers(r.extra_rects[0], r.extra_rects[1] + 1))
    for _ in range(n_rects):
        fg.append((float(rng.uniform(min(bg_max + 0.2, dhi), dhi)), _textured(rng),
                   _rect(rng, h, w, lo_px, hi_px)))
    if textureless:
        tl_lo = max(r.textureless_min, lo_px)
        fg.append((float(rng.uniform(min(bg_max + 0.2, dhi), dhi)),
                   Texture("constant", color=_color(rng)),
                   _rect(rng, h, w, tl_lo, max(tl_lo, hi_px))))
    fg.sort(key=lambda t: t[0])
    layers += [Layer(d, tex, region=reg) for d, tex, reg in fg]

    blobs = []
    if specular:
        for _ in range(int(rng.integers(1, 3))):
            blobs.append(Blob(float(rng.uniform(0, w - 1)), float(rng.uniform(0, h - 1)),
                              float(rng.uniform(*r.blob_radius)), float(rng.uniform(*r.blob_intensity)),
                              float(rng.uniform(*r.blob_drift))))
    return SceneSpec(grid=grid, size=size, layers=layers, blobs=blobs,
                     disparity_range=(min(dlo, -2.0), max(dhi, 2.0)))


def quantized(sample: GeneratedSample) -> GeneratedSample:
    """The sample as it reads back from 8-bit PNGs."""
    return GeneratedSample(LightField(quantize(sample.lightfield.views)), sample.disparity,
                           sample.masks, sample.layer_ids)


def write_scene(directory: Path, sample: GeneratedSample, spec: Optional[SceneSpec] = None) -> None:
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
        save_lightfield(directory, sample.lightfield)
        write_pfm(directory / GT_FILENAME, sample.disparity)
        for key, fname in MASK_FILES.items():
            write_png(directory / fname, sample.masks[key].astype(np.float32))
        if spec is not None:
            (directory / "scene_spec.txt").write_text(spec.to_text())
    except OSError as exc:
        raise OSError(f"failed writing scene to {directory}: {exc}") from exc


def scene_seed(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def gen_corpus(out_dir, count: int, seed: int, size: int = 48, views: int = 9,
               ranges: Optional[CorpusRanges] = None) -> List[Path]:
    """Write ``count`` random scenes as ``scene_0000`` ... under ``out_dir``.

    Every third scene (and about half of the rest) carries a texture-less
    rectangle, and likewise for specular highlights, so each feature is
    present in at least a third of the corpus.
    """
    if count < 2:
        raise ValueError("corpus needs at least 2 scenes")
    out_dir = Path(out_dir)
    paths = []
    for i in range(count):
        rng = scene_seed(seed, i)
        tl = (i % 3 == 0) or None
        sp = (i % 3 == 1) or None
        spec = random_scene(rng, (size, size), (views, views), ranges, textureless=tl, specular=sp)
        path = out_dir / f"scene_{i:04d}"
        write_scene(path, quantized(render(spec)), spec)
        paths.append(path)
    return paths
