"""Image -> patch-token stems, augmentation and positional resampling.

Images are float arrays laid out [H, W, C] with values in [0, 1].  Patch
tokens come out in row-major raster order (left to right, then top to
bottom); the relative-bias indexing in the model relies on that order.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Parameter, Tensor


class StemConfigError(ValueError):
    pass


@dataclass
class ConvStageConfig:
    """Stem conv (3x3) followed by ``num_blocks`` residual blocks.

    ``stem_stride`` times the product of ``strides`` must equal the patch size.
    """

    num_blocks: int = 3
    widths: list[int] = field(default_factory=lambda: [16, 32, 32])
    strides: list[int] = field(default_factory=lambda: [1, 2, 1])
    stem_width: int = 16
    stem_stride: int = 2

    @classmethod
    def for_patch(cls, num_blocks: int, patch_size: int, base_width: int = 16) -> "ConvStageConfig":
        if num_blocks < 1:
            raise StemConfigError("conv stage needs at least one block")
        stem_stride = 2 if patch_size % 2 == 0 else 1
        rest = patch_size // stem_stride
        strides = [1] * num_blocks
        k = 1 if num_blocks > 1 else 0
        # spread the remaining factors of two over blocks 1, 2, ...
        while rest > 1:
            if rest % 2:
                raise StemConfigError(f"patch size {patch_size} is not a power of two")
            strides[k] *= 2
            rest //= 2
            k = k + 1 if k + 1 < num_blocks else (1 if num_blocks > 1 else 0)
        widths = [base_width * min(2 ** i, 2) for i in range(num_blocks)]
        return cls(num_blocks, widths, strides, base_width, stem_stride)

    def total_stride(self) -> int:
        return self.stem_stride * int(np.prod(self.strides))

    def validate(self, patch_size: int) -> None:
        if len(self.widths) != self.num_blocks or len(self.strides) != self.num_blocks:
            raise StemConfigError("widths and strides need one entry per block")
        if self.total_stride() != patch_size:
            raise StemConfigError(
                f"cumulative stride {self.total_stride()} does not match patch size {patch_size}"
            )

    def to_dict(self) -> dict:
        return {
            "num_blocks": self.num_blocks,
            "widths": list(self.widths),
            "strides": list(self.strides),
            "stem_width": self.stem_width,
            "stem_stride": self.stem_stride,
        }


def patch_count(h: int, w: int, patch: int) -> int:
    if h % patch or w % patch:
        raise StemConfigError(f"image {h}x{w} not divisible by patch size {patch}")
    return (h // patch) * (w // patch)


def _normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # truncated at two standard deviations
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_conv_stage(
    cfg: ConvStageConfig, channels: int, hidden: int, rng: np.random.Generator, dtype, std: float = 0.02
) -> dict[str, Parameter]:
    def conv_w(name, co, ci, k):
        # fan-in scaling keeps activations O(1) before the first norm
        return Parameter(name, _normal(rng, (co, ci, k, k), (2.0 / (ci * k * k)) ** 0.5, dtype))

    def norm(prefix, c):
        return {
            f"{prefix}.g": Parameter(f"{prefix}.g", np.ones(c, dtype)),
            f"{prefix}.b": Parameter(f"{prefix}.b", np.zeros(c, dtype)),
        }

    p: dict[str, Parameter] = {}
    p["convstage.stem.conv"] = conv_w("convstage.stem.conv", cfg.stem_width, channels, 3)
    p.update(norm("convstage.stem.gn", cfg.stem_width))
    c_in = cfg.stem_width
    for i, (width, stride) in enumerate(zip(cfg.widths, cfg.strides)):
        pre = f"convstage.block{i}"
        p[f"{pre}.conv1"] = conv_w(f"{pre}.conv1", width, c_in, 3)
        p.update(norm(f"{pre}.gn1", width))
        p[f"{pre}.conv2"] = conv_w(f"{pre}.conv2", width, width, 3)
        p.update(norm(f"{pre}.gn2", width))
        if stride != 1 or width != c_in:
            p[f"{pre}.shortcut"] = conv_w(f"{pre}.shortcut", width, c_in, 1)
        c_in = width
    p["convstage.proj.w"] = Parameter("convstage.proj.w", _normal(rng, (hidden, c_in, 1, 1), std, dtype))
    p["convstage.proj.b"] = Parameter("convstage.proj.b", np.zeros(hidden, dtype))
    return p


def init_linear_patchify(
    patch: int, channels: int, hidden: int, rng: np.random.Generator, dtype, std: float = 0.02
) -> dict[str, Parameter]:
    return {
        "patch.w": Parameter("patch.w", _normal(rng, (channels * patch * patch, hidden), std, dtype)),
        "patch.b": Parameter("patch.b", np.zeros(hidden, dtype)),
    }


def to_chw(images: np.ndarray) -> np.ndarray:
    """[B, H, W, C] (or [H, W, C]) -> [B, C, H, W]."""
    if images.ndim == 3:
        images = images[None]
    return np.ascontiguousarray(images.transpose(0, 3, 1, 2))


def _flatten_grid(x: Tensor) -> Tensor:
    # [B, D, gh, gw] -> [B, gh*gw, D], raster order
    b, d, gh, gw = x.shape
    return T.transpose(T.reshape(x, (b, d, gh * gw)), (0, 2, 1))


def conv_stage(images: np.ndarray | Tensor, params: dict[str, Parameter], cfg: ConvStageConfig) -> Tensor:
    """Images [B, H, W, C] -> patch tokens [B, T_i, D] through the residual conv stage."""
    x = images if isinstance(images, Tensor) else Tensor(to_chw(images))
    h, w = x.shape[2], x.shape[3]
    stride = cfg.total_stride()
    if h % stride or w % stride:
        raise StemConfigError(f"image {h}x{w} not divisible by cumulative stride {stride}")
    x = T.conv2d(x, params["convstage.stem.conv"], stride=cfg.stem_stride, pad=1)
    x = T.gelu(T.group_norm(x, params["convstage.stem.gn.g"], params["convstage.stem.gn.b"]))
    for i, stride in enumerate(cfg.strides):
        pre = f"convstage.block{i}"
        y = T.conv2d(x, params[f"{pre}.conv1"], stride=stride, pad=1)
        y = T.gelu(T.group_norm(y, params[f"{pre}.gn1.g"], params[f"{pre}.gn1.b"]))
        y = T.conv2d(y, params[f"{pre}.conv2"], stride=1, pad=1)
        y = T.group_norm(y, params[f"{pre}.gn2.g"], params[f"{pre}.gn2.b"])
        short = params.get(f"{pre}.shortcut")
        skip = x if short is None else T.conv2d(x, short, stride=stride, pad=0)
        x = T.gelu(T.add(y, skip))
    x = T.conv2d(x, params["convstage.proj.w"], params["convstage.proj.b"])
    return _flatten_grid(x)


def extract_patches(images: np.ndarray, patch: int) -> np.ndarray:
    """[B, H, W, C] -> [B, T_i, C*P*P], each patch flattened in (C, p, q) order."""
    if images.ndim == 3:
        images = images[None]
    b, h, w, c = images.shape
    patch_count(h, w, patch)
    gh, gw = h // patch, w // patch
    x = images.reshape(b, gh, patch, gw, patch, c)
    x = x.transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(x.reshape(b, gh * gw, c * patch * patch))


def linear_patchify(images: np.ndarray, params: dict[str, Parameter], patch: int) -> Tensor:
    """Flatten non-overlapping P x P patches and project them to the hidden size."""
    flat = Tensor(extract_patches(images, patch).astype(params["patch.w"].dtype))
    return T.linear(flat, params["patch.w"], params["patch.b"])


def patchify_as_conv_weight(w: np.ndarray, channels: int, patch: int) -> np.ndarray:
    """Reshape a [C*P*P, D] projection into the equivalent [D, C, P, P] conv kernel."""
    return np.ascontiguousarray(w.T.reshape(w.shape[1], channels, patch, patch))


# ----------------------------------------------------------------------------
# augmentation and resampling
# ----------------------------------------------------------------------------


def bilinear_resize(image: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Align-corners=False bilinear resize of an [H, W, C] array."""
    h, w = image.shape[:2]
    if (h, w) == (out_h, out_w):
        return image.copy()
    ys = np.clip((np.arange(out_h) + 0.5) * h / out_h - 0.5, 0, h - 1)
    xs = np.clip((np.arange(out_w) + 0.5) * w / out_w - 0.5, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    wy = (ys - y0)[:, None, None]
    wx = (xs - x0)[None, :, None]
    top = image[y0][:, x0] * (1 - wx) + image[y0][:, x1] * wx
    bot = image[y1][:, x0] * (1 - wx) + image[y1][:, x1] * wx
    return (top * (1 - wy) + bot * wy).astype(image.dtype)


def random_resized_crop(
    image: np.ndarray,
    out_hw: tuple[int, int],
    scale_range: tuple[float, float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Crop a square-aspect window covering a random area fraction, then resize."""
    lo, hi = scale_range
    if not (0.0 < lo <= hi <= 1.0):
        raise ValueError(f"scale_range must lie in (0, 1], got {scale_range}")
    h, w = image.shape[:2]
    area = rng.uniform(lo, hi)
    ch = max(1, min(h, int(round(h * np.sqrt(area)))))
    cw = max(1, min(w, int(round(w * np.sqrt(area)))))
    top = int(rng.integers(0, h - ch + 1))
    left = int(rng.integers(0, w - cw + 1))
    crop = image[top : top + ch, left : left + cw]
    out = bilinear_resize(crop, out_hw[0], out_hw[1])
    return np.clip(out, 0.0, 1.0)


def zoom_crop(
    image: np.ndarray,
    box: tuple[int, int, int, int],
    max_zoom: float,
    rng: np.random.Generator,
) -> np.ndarray:
    """Zoom in by up to ``max_zoom`` with a square crop that keeps ``box`` visible.

    ``box`` is ``(top, left, bottom, right)`` in pixels (exclusive ends), the
    region whose content must survive; the crop is resized back to the input
    size, so objects grow but none is cut.
    """
    if max_zoom < 1.0:
        raise ValueError("max_zoom must be >= 1")
    h, w = image.shape[:2]
    if h != w:
        raise ValueError("zoom_crop expects square images")
    r0, c0, r1, c1 = (int(v) for v in box)
    lo = max(r1 - r0, c1 - c0, int(np.ceil(h / max_zoom)))
    side = int(rng.integers(lo, h + 1))
    top = int(rng.integers(max(0, r1 - side), min(r0, h - side) + 1))
    left = int(rng.integers(max(0, c1 - side), min(c0, w - side) + 1))
    crop = image[top : top + side, left : left + side]
    return np.clip(bilinear_resize(crop, h, w), 0.0, 1.0)


def interpolate_positions(pos: np.ndarray, new_len: int) -> np.ndarray:
    """Linearly resample a [T_old, D] table onto ``new_len`` rows over a [0, 1] grid."""
    old_len = pos.shape[0]
    if new_len < 1:
        raise ValueError("new_len must be >= 1")
    if old_len < 2:
        raise ValueError("need at least two rows to interpolate")
    if new_len == old_len:
        return pos.copy()
    src = np.linspace(0.0, 1.0, old_len)
    dst = np.linspace(0.0, 1.0, new_len)
    out = np.empty((new_len,) + pos.shape[1:], dtype=np.float64)
    flat = pos.reshape(old_len, -1).astype(np.float64)
    for j in range(flat.shape[1]):
        out.reshape(new_len, -1)[:, j] = np.interp(dst, src, flat[:, j])
    out[0] = pos[0]
    out[-1] = pos[-1]
    return out.astype(pos.dtype)


def interpolate_grid(pos: np.ndarray, old_grid: tuple[int, int], new_grid: tuple[int, int]) -> np.ndarray:
    """Separable 2D resampling of a raster-ordered [gh*gw, D] table."""
    gh, gw = old_grid
    nh, nw = new_grid
    d = pos.shape[1]
    grid = pos.reshape(gh, gw, d)
    if nh != gh:
        grid = np.stack([interpolate_positions(grid[:, c], nh) for c in range(gw)], axis=1)
    if nw != gw:
        grid = np.stack([interpolate_positions(grid[r], nw) for r in range(nh)], axis=0)
    return np.ascontiguousarray(grid.reshape(nh * nw, d))


# ----------------------------------------------------------------------------
# image files
# ----------------------------------------------------------------------------


def write_ppm(path: str | Path, image: np.ndarray) -> None:
    h, w, c = image.shape
    if c != 3:
        raise ValueError("PPM export needs three channels")
    raw = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode("ascii") + raw.tobytes())


def read_ppm(path: str | Path) -> np.ndarray:
    """Read a binary P6 file; values scaled to [0, 1]."""
    data = Path(path).read_bytes()
    tokens: list[bytes] = []
    pos = 0
    while len(tokens) < 4:
        while data[pos : pos + 1].isspace():
            pos += 1
        if data[pos : pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos : pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P6":
        raise ValueError(f"{path}: not a binary PPM (P6) file")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    pos += 1
    raw = np.frombuffer(data, dtype=np.uint8, count=w * h * 3, offset=pos)
    return (raw.reshape(h, w, 3).astype(np.float32) / np.float32(maxval)).astype(np.float32)
