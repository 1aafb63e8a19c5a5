"""Pixel-exact binary mask algebra, RGBA buffers, and square-crop geometry.

Everything downstream (scene synthesis, the deocclusion loop, evaluation,
the review service) moves masks and RGBA images through this module, so the
types are immutable and the operations are pure functions.

Conventions:
  * masks are boolean arrays of shape (height, width)
  * images are uint8 arrays of shape (height, width, 4), straight alpha
  * masks serialize as single-channel 8-bit PNG with values 0/255
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

SET_OPS = ("union", "intersect", "difference")


class DimensionMismatch(ValueError):
    """Raised when two grids of different shapes are combined."""


def _check_same_shape(a, b, what: str = "mask"):
    if a.shape != b.shape:
        raise DimensionMismatch(
            f"{what} dimensions differ: {a.shape[1]}x{a.shape[0]} vs {b.shape[1]}x{b.shape[0]}"
        )


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class BinaryMask:
    """Fixed-size bit grid. ``data`` is a read-only bool array (h, w)."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.dtype != np.bool_:
            arr = arr.astype(bool)
        if arr.ndim != 2:
            raise ValueError(f"mask must be 2-D, got shape {arr.shape}")
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @classmethod
    def empty(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.zeros((height, width), dtype=bool))

    @classmethod
    def full(cls, width: int, height: int) -> "BinaryMask":
        return cls(np.ones((height, width), dtype=bool))

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def area(self) -> int:
        return int(self.data.sum())

    @property
    def is_empty(self) -> bool:
        return not self.data.any()

    def complement(self) -> "BinaryMask":
        return BinaryMask(~self.data)

    def contains(self, other: "BinaryMask") -> bool:
        """True when ``other`` is a subset of this mask."""
        _check_same_shape(self.data, other.data)
        return bool(np.all(other.data <= self.data))

    def bbox(self) -> tuple[int, int, int, int] | None:
        """Half-open bounding box (x0, y0, x1, y1), or None when empty."""
        ys, xs = np.nonzero(self.data)
        if ys.size == 0:
            return None
        return int(xs.min()), int(ys.min()), int(xs.max()) + 1, int(ys.max()) + 1

    def __eq__(self, other) -> bool:
        if not isinstance(other, BinaryMask):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))

    def __or__(self, other: "BinaryMask") -> "BinaryMask":
        return set_op(self, other, "union")

    def __and__(self, other: "BinaryMask") -> "BinaryMask":
        return set_op(self, other, "intersect")

    def __sub__(self, other: "BinaryMask") -> "BinaryMask":
        return set_op(self, other, "difference")


@dataclass(frozen=True)
class RgbaImage:
    """8-bit RGBA buffer with straight (non-premultiplied) alpha."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3 or arr.shape[2] != 4:
            raise ValueError(f"image must have shape (h, w, 4), got {arr.shape}")
        if arr.dtype != np.uint8:
            arr = arr.astype(np.uint8)
        object.__setattr__(self, "data", _freeze(np.ascontiguousarray(arr)))

    @classmethod
    def blank(cls, width: int, height: int) -> "RgbaImage":
        return cls(np.zeros((height, width, 4), dtype=np.uint8))

    @classmethod
    def from_rgb(cls, rgb: np.ndarray) -> "RgbaImage":
        """Promote an (h, w, 3) array to RGBA with opaque alpha."""
        h, w, _ = rgb.shape
        out = np.empty((h, w, 4), dtype=np.uint8)
        out[..., :3] = rgb
        out[..., 3] = 255
        return cls(out)

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def height(self) -> int:
        return self.data.shape[0]

    def alpha_mask(self, threshold: int = 128) -> BinaryMask:
        """Mask of pixels whose alpha is at or above ``threshold``."""
        return BinaryMask(self.data[..., 3] >= threshold)

    def __eq__(self, other) -> bool:
        if not isinstance(other, RgbaImage):
            return NotImplemented
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))

    def __hash__(self):
        return hash((self.data.shape, self.data.tobytes()))


@dataclass(frozen=True)
class CropSpec:
    """Square crop geometry mapping image coordinates to model resolution.

    ``x``/``y`` may be negative: source pixels outside the image pad with
    transparent black on extract. ``scale`` is model_side / side.
    """

    x: int
    y: int
    side: int
    model_side: int

    def __post_init__(self):
        if self.side <= 0:
            raise ValueError(f"crop side must be positive, got {self.side}")
        if self.model_side <= 0:
            raise ValueError(f"model side must be positive, got {self.model_side}")

    @property
    def scale(self) -> float:
        return self.model_side / self.side

    def intersects(self, width: int, height: int) -> bool:
        return self.x < width and self.y < height and self.x + self.side > 0 and self.y + self.side > 0


# ---------------------------------------------------------------------------
# mask algebra


def set_op(a: BinaryMask, b: BinaryMask, kind: str) -> BinaryMask:
    """Pointwise boolean combination of two same-shape masks."""
    _check_same_shape(a.data, b.data)
    if kind == "union":
        return BinaryMask(a.data | b.data)
    if kind == "intersect":
        return BinaryMask(a.data & b.data)
    if kind == "difference":
        return BinaryMask(a.data & ~b.data)
    raise ValueError(f"unknown set operation {kind!r}, expected one of {SET_OPS}")


def union_all(masks, width: int | None = None, height: int | None = None) -> BinaryMask:
    """Union of an iterable of masks; empty iterable needs explicit dimensions."""
    masks = list(masks)
    if not masks:
        if width is None or height is None:
            raise ValueError("union of zero masks needs explicit width/height")
        return BinaryMask.empty(width, height)
    acc = masks[0].data.copy()
    for m in masks[1:]:
        _check_same_shape(acc, m.data)
        acc |= m.data
    return BinaryMask(acc)


def iou(a: BinaryMask, b: BinaryMask) -> float:
    """Intersection over union in [0, 1]; both-empty pairs score 1.0.

    The vacuous-agreement convention makes a no-op prediction on an
    unoccluded instance score perfectly.
    """
    _check_same_shape(a.data, b.data)
    inter = int(np.count_nonzero(a.data & b.data))
    uni = int(np.count_nonzero(a.data | b.data))
    if uni == 0:
        return 1.0
    return inter / uni


def downsample(m: BinaryMask, factor: int) -> BinaryMask:
    """Max-pooling downsample: an output cell is set iff any pixel in its
    factor x factor block is set. Preserves thin structures."""
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    if factor == 1:
        return m
    h, w = m.data.shape
    if h % factor or w % factor:
        raise ValueError(f"factor {factor} does not divide mask dimensions {w}x{h}")
    blocks = m.data.reshape(h // factor, factor, w // factor, factor)
    return BinaryMask(blocks.any(axis=(1, 3)))


def apply_mask(x: RgbaImage, m: BinaryMask) -> RgbaImage:
    """Restrict an image to a mask: outside pixels zero in all channels,
    inside pixels keep RGB and get opaque alpha."""
    _check_same_shape(x.data[..., 0], m.data, "image/mask")
    out = np.zeros_like(x.data)
    sel = m.data
    out[sel, :3] = x.data[sel, :3]
    out[sel, 3] = 255
    return RgbaImage(out)


# ---------------------------------------------------------------------------
# crop geometry


def roi_crop_spec(
    amodal: BinaryMask,
    context: float,
    bounds: tuple[int, int],
    model_side: int,
) -> CropSpec:
    """Square crop around a mask's bounding box with relative margin.

    The side is max(bbox side) * (1 + context), clamped by translating the
    crop into ``bounds`` and shrunk only when it exceeds the smaller image
    dimension.
    """
    box = amodal.bbox()
    if box is None:
        raise ValueError("cannot derive a crop from an empty mask")
    width, height = bounds
    x0, y0, x1, y1 = box
    side = int(round(max(x1 - x0, y1 - y0) * (1.0 + context)))
    side = max(side, 1)
    if side > min(width, height):
        side = min(width, height)
    cx = (x0 + x1) / 2.0
    cy = (y0 + y1) / 2.0
    ox = int(round(cx - side / 2.0))
    oy = int(round(cy - side / 2.0))
    ox = min(max(ox, 0), width - side)
    oy = min(max(oy, 0), height - side)
    return CropSpec(ox, oy, side, model_side)


def whole_image_spec(width: int, height: int, model_side: int) -> CropSpec:
    """Square crop covering the full image, padding the shorter axis."""
    side = max(width, height)
    return CropSpec((width - side) // 2, (height - side) // 2, side, model_side)


def _footprint_range(lo_f: float, hi_f: float, limit: int) -> tuple[int, int]:
    # half-open [lo_f, hi_f) in source pixel index space, with float guards
    lo = int(np.floor(lo_f + 1e-9))
    hi = int(np.ceil(hi_f - 1e-9))
    return max(lo, 0), min(hi, limit)


def _bilinear(channel: np.ndarray, sx: np.ndarray, sy: np.ndarray) -> np.ndarray:
    # out-of-bounds samples read as zero
    h, w = channel.shape
    x0 = np.floor(sx).astype(int)
    y0 = np.floor(sy).astype(int)
    fx = sx - x0
    fy = sy - y0

    def at(yy, xx):
        valid = (yy >= 0) & (yy < h) & (xx >= 0) & (xx < w)
        vals = np.zeros(yy.shape, dtype=np.float64)
        vals[valid] = channel[yy[valid], xx[valid]]
        return vals

    v00 = at(y0, x0)
    v01 = at(y0, x0 + 1)
    v10 = at(y0 + 1, x0)
    v11 = at(y0 + 1, x0 + 1)
    top = v00 * (1 - fx) + v01 * fx
    bot = v10 * (1 - fx) + v11 * fx
    return top * (1 - fy) + bot * fy


def _resample_alpha_max(alpha: np.ndarray, spec: CropSpec, out_side: int, inverse: bool) -> np.ndarray:
    """Footprint-max resampling for alpha/masks: never thins a structure.

    ``inverse=False`` maps crop -> model grid, ``inverse=True`` model -> crop.
    The footprint max is separable, so reduce columns first, then rows.
    """
    h, w = alpha.shape
    if inverse:
        # target pixel j (crop space, relative) covers [j*scale, (j+1)*scale) in model space
        xr = [_footprint_range(j * spec.scale, (j + 1) * spec.scale, w) for j in range(out_side)]
        yr = [_footprint_range(i * spec.scale, (i + 1) * spec.scale, h) for i in range(out_side)]
    else:
        inv = 1.0 / spec.scale
        xr = [_footprint_range(spec.x + j * inv, spec.x + (j + 1) * inv, w) for j in range(out_side)]
        yr = [_footprint_range(spec.y + i * inv, spec.y + (i + 1) * inv, h) for i in range(out_side)]
    colmax = np.zeros((h, out_side), dtype=alpha.dtype)
    for j, (x0, x1) in enumerate(xr):
        if x0 < x1:
            colmax[:, j] = alpha[:, x0:x1].max(axis=1)
    out = np.zeros((out_side, out_side), dtype=alpha.dtype)
    for i, (y0, y1) in enumerate(yr):
        if y0 < y1:
            out[i, :] = colmax[y0:y1, :].max(axis=0)
    return out


def resample(
    img: RgbaImage,
    spec: CropSpec,
    direction: str,
    base: RgbaImage | None = None,
) -> RgbaImage:
    """Move pixels between image geometry and model resolution.

    ``extract`` returns a model_side x model_side crop: bilinear RGB,
    footprint-max alpha (masks never thin out). ``paste`` maps a
    model-resolution image back into the crop rectangle of ``base``;
    pixels outside the rectangle are left untouched.
    """
    if direction == "extract":
        if not spec.intersects(img.width, img.height):
            raise ValueError(f"crop {spec} does not intersect a {img.width}x{img.height} image")
        n = spec.model_side
        js = np.arange(n)
        # sample positions of output pixel centers in source coordinates
        sx = spec.x + (js + 0.5) / spec.scale - 0.5
        sy = spec.y + (js + 0.5) / spec.scale - 0.5
        gx, gy = np.meshgrid(sx, sy)
        out = np.zeros((n, n, 4), dtype=np.uint8)
        for c in range(3):
            vals = _bilinear(img.data[..., c].astype(np.float64), gx, gy)
            out[..., c] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
        out[..., 3] = _resample_alpha_max(img.data[..., 3], spec, n, inverse=False)
        # outside-mask RGB must stay zero so extracted crops remain masked images
        out[out[..., 3] == 0, :3] = 0
        return RgbaImage(out)

    if direction == "paste":
        if img.width != spec.model_side or img.height != spec.model_side:
            raise ValueError(
                f"paste input must be {spec.model_side}x{spec.model_side}, got {img.width}x{img.height}"
            )
        if base is None:
            raise ValueError("paste needs the base image to write into")
        if not spec.intersects(base.width, base.height):
            raise ValueError(f"crop {spec} does not intersect a {base.width}x{base.height} image")
        out = base.data.copy()
        tx0 = max(spec.x, 0)
        ty0 = max(spec.y, 0)
        tx1 = min(spec.x + spec.side, base.width)
        ty1 = min(spec.y + spec.side, base.height)
        if tx0 >= tx1 or ty0 >= ty1:
            return RgbaImage(out)
        txs = np.arange(tx0, tx1)
        tys = np.arange(ty0, ty1)
        # model-space coordinates of target pixel centers
        mx = (txs - spec.x + 0.5) * spec.scale - 0.5
        my = (tys - spec.y + 0.5) * spec.scale - 0.5
        gx, gy = np.meshgrid(mx, my)
        patch = np.zeros((ty1 - ty0, tx1 - tx0, 4), dtype=np.uint8)
        for c in range(3):
            vals = _bilinear(img.data[..., c].astype(np.float64), gx, gy)
            patch[..., c] = np.clip(np.rint(vals), 0, 255).astype(np.uint8)
        full_alpha = _resample_alpha_max(img.data[..., 3], spec, spec.side, inverse=True)
        patch[..., 3] = full_alpha[ty0 - spec.y : ty1 - spec.y, tx0 - spec.x : tx1 - spec.x]
        patch[patch[..., 3] == 0, :3] = 0
        out[ty0:ty1, tx0:tx1] = patch
        return RgbaImage(out)

    raise ValueError(f"unknown resample direction {direction!r}")


def resample_mask(m: BinaryMask, spec: CropSpec, direction: str, base: BinaryMask | None = None) -> BinaryMask:
    """Mask counterpart of :func:`resample`, riding the alpha channel."""
    arr = np.zeros((m.height, m.width, 4), dtype=np.uint8)
    arr[..., 3] = m.data * np.uint8(255)
    if direction == "extract":
        return resample(RgbaImage(arr), spec, "extract").alpha_mask()
    if base is None:
        raise ValueError("paste needs the base mask to write into")
    base_arr = np.zeros((base.height, base.width, 4), dtype=np.uint8)
    base_arr[..., 3] = base.data * np.uint8(255)
    return resample(RgbaImage(arr), spec, "paste", base=RgbaImage(base_arr)).alpha_mask()


# ---------------------------------------------------------------------------
# PNG serialization


def mask_to_png_bytes(m: BinaryMask) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(m.data.astype(np.uint8) * 255, mode="L").save(buf, format="PNG")
    return buf.getvalue()


def mask_from_png_bytes(raw: bytes) -> BinaryMask:
    img = Image.open(io.BytesIO(raw)).convert("L")
    return BinaryMask(np.asarray(img) >= 128)


def write_mask_png(m: BinaryMask, path: str | Path):
    Path(path).write_bytes(mask_to_png_bytes(m))


def read_mask_png(path: str | Path) -> BinaryMask:
    return mask_from_png_bytes(Path(path).read_bytes())


def rgba_to_png_bytes(img: RgbaImage) -> bytes:
    buf = io.BytesIO()
    Image.fromarray(np.asarray(img.data), mode="RGBA").save(buf, format="PNG")
    return buf.getvalue()


def rgba_from_png_bytes(raw: bytes) -> RgbaImage:
    img = Image.open(io.BytesIO(raw)).convert("RGBA")
    return RgbaImage(np.asarray(img))


def write_rgba_png(img: RgbaImage, path: str | Path):
    Path(path).write_bytes(rgba_to_png_bytes(img))


def read_rgba_png(path: str | Path) -> RgbaImage:
    return rgba_from_png_bytes(Path(path).read_bytes())
