"""Light field containers, SAI stacking, EPI slicing and geometric augmentation.

Conventions: a light field with grid ``(U, V)`` has ``U`` view columns and
``V`` view rows. ``views[v, u]`` is the RGB image seen from view column
``u`` and view row ``v``; files are numbered row-major from the top-left
view. A scene point with disparity ``d`` that sits at ``(x, y)`` in the
central view appears at ``(x - du*d, y - dv*d)`` in the view offset by
``(du, dv)``, i.e. ``view(du, dv)[y, x] == center[y + dv*d, x + du*d]``.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from PIL import Image

PathLike = Union[str, os.PathLike]

VIEW_TEMPLATE = "input_Cam{:03d}.png"
GT_FILENAME = "gt_disp_lowres.pfm"
MASK_FILES = {"textureless": "mask_textureless.png", "specular": "mask_specular.png"}


@dataclass(frozen=True)
class LightField:
    views: np.ndarray  # (V, U, H, W, 3) float32 in [0, 1]

    def __post_init__(self):
        v = np.asarray(self.views)
        if v.ndim != 5 or v.shape[-1] != 3:
            raise ValueError(f"views must have shape (V, U, H, W, 3), got {v.shape}")
        rows, cols = v.shape[:2]
        if rows % 2 == 0 or cols % 2 == 0:
            raise ValueError(f"view grid must be odd in both directions, got {cols}x{rows}")
        if not np.all(np.isfinite(v)) or v.min(initial=0.0) < 0 or v.max(initial=0.0) > 1:
            raise ValueError("pixel values must lie in [0, 1]")
        object.__setattr__(self, "views", np.ascontiguousarray(v, dtype=np.float32))

    @property
    def grid(self) -> Tuple[int, int]:
        return self.views.shape[1], self.views.shape[0]

    @property
    def size(self) -> Tuple[int, int]:
        return self.views.shape[2], self.views.shape[3]

    @property
    def center(self) -> Tuple[int, int]:
        u, v = self.grid
        return u // 2, v // 2

    def view(self, u: int, v: int) -> np.ndarray:
        return self.views[v, u]

    def central_view(self) -> np.ndarray:
        u, v = self.center
        return self.views[v, u]

    def __eq__(self, other):
        return isinstance(other, LightField) and np.array_equal(self.views, other.views)

    __hash__ = None


@dataclass(frozen=True)
class ViewPattern:
    """Centered ``side x side`` sub-grid of views."""

    side: int

    def __post_init__(self):
        if self.side < 1 or self.side % 2 == 0:
            raise ValueError(f"pattern side must be odd and positive, got {self.side}")

    @classmethod
    def for_variant(cls, n_views: int) -> "ViewPattern":
        side = int(round(np.sqrt(n_views)))
        if side * side != n_views:
            raise ValueError(f"{n_views} views do not form a square pattern")
        return cls(side)

    def indices(self, grid: Tuple[int, int]) -> List[Tuple[int, int]]:
        """(u, v) pairs in row-major order."""
        cols, rows = grid
        if self.side > cols or self.side > rows:
            raise ValueError(f"pattern {self.side}x{self.side} larger than grid {cols}x{rows}")
        r = self.side // 2
        cu, cv = cols // 2, rows // 2
        return [(u, v) for v in range(cv - r, cv + r + 1) for u in range(cu - r, cu + r + 1)]

    @property
    def channels(self) -> int:
        return 3 * self.side * self.side


@dataclass(frozen=True)
class DisparityMap:
    values: np.ndarray
    mask: Optional[np.ndarray] = None

    def __post_init__(self):
        vals = np.asarray(self.values)
        if vals.ndim != 2:
            raise ValueError(f"disparity map must be 2-D, got shape {vals.shape}")
        if not np.all(np.isfinite(vals)):
            raise ValueError("disparity map contains non-finite values")
        if self.mask is not None and np.shape(self.mask) != vals.shape:
            raise ValueError(f"mask shape {np.shape(self.mask)} != map shape {vals.shape}")
        object.__setattr__(self, "values", vals)
        if self.mask is not None:
            object.__setattr__(self, "mask", np.asarray(self.mask, dtype=bool))

    @property
    def shape(self):
        return self.values.shape


@dataclass
class Sample:
    """Network input stack ``(3*side^2, H, W)`` with the central-view target."""

    input: np.ndarray
    target: np.ndarray
    name: str = ""
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        if self.input.ndim != 3 or self.input.shape[0] % 3:
            raise ValueError(f"sample input must be (3*views, H, W), got {self.input.shape}")
        if self.input.shape[1:] != self.target.shape:
            raise ValueError(f"input size {self.input.shape[1:]} != target size {self.target.shape}")
        side = int(round(np.sqrt(self.input.shape[0] // 3)))
        if 3 * side * side != self.input.shape[0]:
            raise ValueError(f"{self.input.shape[0]} channels is not 3*side^2")

    @property
    def side(self) -> int:
        return int(round(np.sqrt(self.input.shape[0] // 3)))

    @property
    def size(self) -> Tuple[int, int]:
        return self.target.shape


# ---------------------------------------------------------------- stacking


def stack_sais(lf: LightField, pattern: ViewPattern) -> np.ndarray:
    """Concatenate the pattern's views along channels: shape (1, 3*side^2, H, W).

    Channel order is row-major over views, RGB within each view.
    """
    idx = pattern.indices(lf.grid)
    h, w = lf.size
    out = np.empty((1, 3 * len(idx), h, w), dtype=np.float32)
    for k, (u, v) in enumerate(idx):
        out[0, 3 * k:3 * k + 3] = lf.view(u, v).transpose(2, 0, 1)
    return out


def unstack_sais(stack: np.ndarray) -> LightField:
    """Inverse of :func:`stack_sais` for a full square grid."""
    if stack.ndim == 4:
        stack = stack[0]
    c, h, w = stack.shape
    side = int(round(np.sqrt(c // 3)))
    views = stack.reshape(side, side, 3, h, w).transpose(0, 1, 3, 4, 2)
    return LightField(views)


def make_sample(lf: LightField, target: np.ndarray, pattern: ViewPattern, name: str = "",
                masks: Optional[Mapping[str, np.ndarray]] = None) -> Sample:
    return Sample(stack_sais(lf, pattern)[0], np.asarray(target, dtype=np.float32), name,
                  dict(masks or {}))


# ---------------------------------------------------------------- EPIs


def extract_epi(lf: LightField, orientation: str, index: int, view_index: int) -> np.ndarray:
    """Epipolar plane image, angular axis first.

    ``horizontal``: fixed pixel row ``index`` and view row ``view_index``,
    ``epi[u, x] = view(u, view_index)[index, x]``. ``vertical``: fixed pixel
    column and view column, ``epi[v, y] = view(view_index, v)[y, index]``.
    """
    cols, rows = lf.grid
    h, w = lf.size
    if orientation == "horizontal":
        if not 0 <= index < h or not 0 <= view_index < rows:
            raise IndexError(f"row {index} / view row {view_index} out of range ({h} rows, {rows} view rows)")
        return lf.views[view_index, :, index, :, :].copy()
    if orientation == "vertical":
        if not 0 <= index < w or not 0 <= view_index < cols:
            raise IndexError(f"column {index} / view column {view_index} out of range ({w} columns, {cols} view columns)")
        return lf.views[:, view_index, :, index, :].copy()
    raise ValueError(f"orientation must be 'horizontal' or 'vertical', got {orientation!r}")


def epi_slope(epi: np.ndarray, region: Optional[Tuple[int, int]] = None,
              max_slope: float = 3.0, step: float = 1.0 / 64) -> float:
    """Disparity read off an EPI by a direct search over line slopes.

    For a candidate slope ``s`` every angular row at offset ``a`` from the
    center is resampled (linear interpolation) at ``x - a*s`` and compared
    with the central row over ``region = [x0, x1)``. The slope with the
    lowest mean squared difference wins and is refined with a parabola
    unless the match is exact. The grid step is a power of two so integer
    slopes are hit without rounding.
    """
    gray = epi.mean(axis=-1) if epi.ndim == 3 else epi
    gray = gray.astype(np.float64)
    n_ang, width = gray.shape
    c = n_ang // 2
    x0, x1 = region if region is not None else (0, width)
    ref_x = np.arange(x0, x1, dtype=np.float64)
    ref = gray[c, x0:x1]
    n_steps = int(round(max_slope / step))
    slopes = np.arange(-n_steps, n_steps + 1) * step
    min_valid = max(3, (x1 - x0) // 3)
    costs = np.full(len(slopes), np.inf)
    for k, s in enumerate(slopes):
        total, rows = 0.0, 0
        for a in range(n_ang):
            da = a - c
            if da == 0:
                continue
            pos = ref_x - da * s
            ok = (pos >= 0) & (pos <= width - 1)
            if ok.sum() < min_valid:
                continue
            p = pos[ok]
            i0 = np.floor(p).astype(np.intp)
            i1 = np.minimum(i0 + 1, width - 1)
            f = p - i0
            row = gray[a]
            vals = row[i0] + f * (row[i1] - row[i0])
            diff = ref[ok] - vals
            total += float(np.mean(diff * diff))
            rows += 1
        if rows >= max(1, (n_ang - 1) // 2):
            costs[k] = total / rows
    k = int(np.argmin(costs))
    best = float(slopes[k])
    if costs[k] > 0 and 0 < k < len(costs) - 1 and np.isfinite(costs[k - 1]) and np.isfinite(costs[k + 1]):
        denom = costs[k - 1] - 2 * costs[k] + costs[k + 1]
        if denom > 0:
            best += 0.5 * step * (costs[k - 1] - costs[k + 1]) / denom
    return best


# ---------------------------------------------------------------- augmentation

AUGMENTATIONS = ("identity", "flip_lr", "flip_ud", "flip_both", "invert_color", "crop")


def _flip(arr: np.ndarray, side: int, lr: bool, ud: bool) -> np.ndarray:
    c, h, w = arr.shape
    grid = arr.reshape(side, side, 3, h, w)
    if lr:
        grid = grid[:, ::-1, :, :, ::-1]
    if ud:
        grid = grid[::-1, :, :, ::-1, :]
    return np.ascontiguousarray(grid.reshape(c, h, w))


def _flip_map(m: np.ndarray, lr: bool, ud: bool) -> np.ndarray:
    if lr:
        m = m[:, ::-1]
    if ud:
        m = m[::-1, :]
    return np.ascontiguousarray(m)


def augment(sample: Sample, op: str, x: int = 0, y: int = 0, size: Optional[int] = None) -> Sample:
    """Apply one augmentation.

    Flips mirror pixel content and the view grid along the same axis, so
    disparity values are unchanged and only move spatially. Color inversion
    maps ``p -> 1 - p`` and leaves the target untouched. ``crop`` cuts the
    same ``size x size`` window at column ``x``, row ``y`` from every view,
    the target and the masks.
    """
    if op == "identity":
        return sample
    if op in ("flip_lr", "flip_ud", "flip_both"):
        lr = op in ("flip_lr", "flip_both")
        ud = op in ("flip_ud", "flip_both")
        return Sample(_flip(sample.input, sample.side, lr, ud), _flip_map(sample.target, lr, ud),
                      sample.name, {k: _flip_map(m, lr, ud) for k, m in sample.masks.items()})
    if op == "invert_color":
        return Sample((np.float32(1.0) - sample.input).astype(np.float32), sample.target,
                      sample.name, dict(sample.masks))
    if op == "crop":
        h, w = sample.size
        if size is None or size < 1 or x < 0 or y < 0 or x + size > w or y + size > h:
            raise ValueError(f"crop window x={x} y={y} size={size} outside {w}x{h} image")
        win = (slice(y, y + size), slice(x, x + size))
        return Sample(np.ascontiguousarray(sample.input[(slice(None),) + win]),
                      np.ascontiguousarray(sample.target[win]), sample.name,
                      {k: np.ascontiguousarray(m[win]) for k, m in sample.masks.items()})
    raise ValueError(f"unknown augmentation {op!r}; choose from {AUGMENTATIONS}")


FLIP_STATES = ("identity", "flip_lr", "flip_ud", "flip_both")


def augmentation_combos() -> List[Tuple[str, bool]]:
    """The 8 (flip state, color inverted) combinations used for training."""
    return [(f, inv) for f in FLIP_STATES for inv in (False, True)]


def apply_combo(sample: Sample, flip: str, invert: bool) -> Sample:
    out = augment(sample, flip)
    return augment(out, "invert_color") if invert else out


# ---------------------------------------------------------------- disk I/O


def _to_uint8(img: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def quantize(img: np.ndarray) -> np.ndarray:
    """Snap [0, 1] values to the 8-bit grid used on disk."""
    return _to_uint8(img).astype(np.float32) / np.float32(255.0)


def _read_png(path: Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


def write_png(path: PathLike, img: np.ndarray) -> None:
    """Write a float [0, 1] image (H, W) or (H, W, 3) as 8-bit PNG."""
    arr = _to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG")


def read_mask_png(path: PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 127


def load_lightfield(directory: PathLike, grid: Tuple[int, int] = (9, 9)) -> LightField:
    directory = Path(directory)
    cols, rows = grid
    views = None
    first_size = None
    for idx in range(cols * rows):
        path = directory / VIEW_TEMPLATE.format(idx)
        if not path.exists():
            raise FileNotFoundError(f"missing view {idx:03d} ({path})")
        img = _read_png(path)
        if first_size is None:
            first_size = img.shape[:2]
            views = np.empty((rows, cols) + img.shape[:2] + (3,), dtype=np.float32)
        elif img.shape[:2] != first_size:
            raise ValueError(
                f"view {idx:03d} has size {img.shape[1]}x{img.shape[0]}, "
                f"expected {first_size[1]}x{first_size[0]} like view 000")
        views[idx // cols, idx % cols] = img.astype(np.float32) / np.float32(255.0)
    return LightField(views)


def save_lightfield(directory: PathLike, lf: LightField) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    cols, rows = lf.grid
    for v in range(rows):
        for u in range(cols):
            write_png(directory / VIEW_TEMPLATE.format(v * cols + u), lf.view(u, v))


@dataclass
class Scene:
    name: str
    lightfield: LightField
    disparity: Optional[DisparityMap]
    masks: Dict[str, np.ndarray] = field(default_factory=dict)

    def sample(self, pattern: ViewPattern) -> Sample:
        if self.disparity is None:
            raise ValueError(f"scene {self.name!r} has no ground-truth disparity")
        return make_sample(self.lightfield, self.disparity.values, pattern, self.name, self.masks)


def load_scene(directory: PathLike, grid: Tuple[int, int] = (9, 9)) -> Scene:
    """Views, optional ground truth and optional region masks of one scene directory."""
    from .pfm import read_pfm

    directory = Path(directory)
    lf = load_lightfield(directory, grid)
    gt_path = directory / GT_FILENAME
    gt = read_pfm(gt_path) if gt_path.exists() else None
    if gt is not None and gt.shape != lf.size:
        raise ValueError(f"{gt_path}: disparity size {gt.shape} != view size {lf.size}")
    masks = {}
    for key, fname in MASK_FILES.items():
        if (directory / fname).exists():
            masks[key] = read_mask_png(directory / fname)
    if masks:
        covered = np.zeros(lf.size, dtype=bool)
        for m in masks.values():
            covered |= m
        masks["textured"] = ~covered
    return Scene(directory.name, lf, gt, masks)


def scene_dirs(root: PathLike) -> List[Path]:
    """Scene directories under ``root`` (those holding view 000), sorted by name."""
    root = Path(root)
    if (root / VIEW_TEMPLATE.format(0)).exists():
        return [root]
    return sorted(p for p in root.iterdir() if p.is_dir() and (p / VIEW_TEMPLATE.format(0)).exists())


def read_grid_hint(directory: PathLike, default: Tuple[int, int] = (9, 9)) -> Tuple[int, int]:
    """Grid size from a scene's ``scene_spec.txt`` when present."""
    path = Path(directory) / "scene_spec.txt"
    if path.exists():
        for line in path.read_text().splitlines():
            key, _, val = line.partition("=")
            if key.strip() == "grid":
                u, v = (int(t) for t in val.strip().split("x"))
                return u, v
    n = len(list(Path(directory).glob("input_Cam*.png")))
    side = int(round(np.sqrt(n)))
    if side * side == n and n > 0:
        return side, side
    return default
