"""Screenshot IO, the frozen patch featurizer, ROI Align, and visual projection.

The featurizer is a fixed statistical stand-in for a pretrained screenshot
encoder: per patch it reports mean color, gradient energy along each axis,
and the normalized patch center. It is deterministic and never trained.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Protocol

import numpy as np

from .document import BBox, HtmlDocument


class ImageFormatError(ValueError):
    pass


class RoiError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Image:
    """8-bit RGB image; ``data`` has shape (height, width, 3)."""

    data: np.ndarray

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def pixels(self) -> bytes:
        return self.data.tobytes()

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Image) and np.array_equal(self.data, other.data)


_HEADER = re.compile(rb"P6\s+(\d+)\s+(\d+)\s+(\d+)\s")


def decode_ppm(raw: bytes) -> Image:
    if not raw.startswith(b"P6"):
        raise ImageFormatError("bad magic at byte 0 (expected P6)")
    m = _HEADER.match(raw)
    if m is None:
        bad = len(raw) if len(raw) < 3 else 2
        raise ImageFormatError(f"malformed header near byte {bad}")
    width, height, maxval = (int(g) for g in m.groups())
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval} at byte {m.start(3)}")
    if width < 1 or height < 1:
        raise ImageFormatError(f"empty image dimensions at byte {m.start(1)}")
    start = m.end()
    need = width * height * 3
    if len(raw) - start < need:
        raise ImageFormatError(
            f"truncated pixel data: expected {need} bytes from byte {start}, file ends at byte {len(raw)}"
        )
    if len(raw) - start > need:
        raise ImageFormatError(f"trailing data at byte {start + need}")
    data = np.frombuffer(raw, dtype=np.uint8, count=need, offset=start).reshape(height, width, 3)
    return Image(data.copy())


def encode_ppm(img: Image) -> bytes:
    return f"P6\n{img.width} {img.height}\n255\n".encode() + img.pixels


def load_image(path: str | Path) -> Image:
    return decode_ppm(Path(path).read_bytes())


def save_image(img: Image, path: str | Path) -> None:
    Path(path).write_bytes(encode_ppm(img))


@dataclass(frozen=True, eq=False)
class FeatureGrid:
    """Patch features, shape (rows, cols, dim)."""

    data: np.ndarray
    patch: int = 1

    @property
    def rows(self) -> int:
        return self.data.shape[0]

    @property
    def cols(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]


def patch_featurize(img: Image, patch: int = 8, d_v: int = 8) -> FeatureGrid:
    if patch < 1:
        raise ValueError("patch must be >= 1")
    if d_v < 7:
        # seven statistics are produced; the rest is zero padding
        raise ValueError("d_v must be >= 7")
    H, W = img.height, img.width
    rows, cols = math.ceil(H / patch), math.ceil(W / patch)
    rgb = img.data.astype(np.float64) / 255.0
    gray = rgb.mean(axis=2)
    dx2 = np.diff(gray, axis=1) ** 2  # (H, W-1), pair (x, x+1)
    dy2 = np.diff(gray, axis=0) ** 2  # (H-1, W)
    out = np.zeros((rows, cols, d_v), dtype=np.float64)
    for r in range(rows):
        y0, y1 = r * patch, min((r + 1) * patch, H)
        for c in range(cols):
            x0, x1 = c * patch, min((c + 1) * patch, W)
            out[r, c, 0:3] = rgb[y0:y1, x0:x1].reshape(-1, 3).mean(axis=0)
            # only pixel pairs fully inside the patch count
            hx = dx2[y0:y1, x0 : x1 - 1]
            vy = dy2[y0 : y1 - 1, x0:x1]
            out[r, c, 3] = hx.mean() if hx.size else 0.0
            out[r, c, 4] = vy.mean() if vy.size else 0.0
            out[r, c, 5] = (x0 + x1) / 2 / W
            out[r, c, 6] = (y0 + y1) / 2 / H
    out.setflags(write=False)
    return FeatureGrid(out, patch)


def _bilinear(data: np.ndarray, gx: np.ndarray, gy: np.ndarray) -> np.ndarray:
    """Sample ``data`` at continuous grid coords; cell (r, c) is centered at (c+.5, r+.5)."""
    rows, cols = data.shape[:2]
    u = np.clip(gx - 0.5, 0.0, cols - 1)
    v = np.clip(gy - 0.5, 0.0, rows - 1)
    c0 = np.floor(u).astype(np.intp)
    r0 = np.floor(v).astype(np.intp)
    c1 = np.minimum(c0 + 1, cols - 1)
    r1 = np.minimum(r0 + 1, rows - 1)
    fu = (u - c0)[:, None]
    fv = (v - r0)[:, None]
    top = data[r0, c0] * (1 - fu) + data[r0, c1] * fu
    bottom = data[r1, c0] * (1 - fu) + data[r1, c1] * fu
    return top * (1 - fv) + bottom * fv


def roi_align(
    grid: FeatureGrid,
    box: BBox,
    patch: int | None = None,
    out: tuple[int, int] = (1, 1),
    sampling: int = 2,
) -> np.ndarray:
    """Pool ``box`` (pixel units) into ``oh x ow`` bins of averaged bilinear samples.

    Returns the bin vectors concatenated, length ``oh * ow * dim``. A zero-area
    box is sampled once at its center.
    """
    patch = grid.patch if patch is None else patch
    oh, ow = out
    if oh < 1 or ow < 1 or sampling < 1:
        raise RoiError("output size and sampling must be >= 1")
    x0, y0 = box.x / patch, box.y / patch
    bw, bh = box.w / patch, box.h / patch
    if x0 + bw < 0 or y0 + bh < 0 or x0 > grid.cols or y0 > grid.rows:
        raise RoiError(f"box {box.as_list()} lies outside the feature grid")
    if bw == 0 or bh == 0:
        pt = _bilinear(grid.data, np.array([x0 + bw / 2]), np.array([y0 + bh / 2]))[0]
        return np.tile(pt, oh * ow)
    # sample offsets inside one bin, in units of the bin size
    frac = (np.arange(sampling) + 0.5) / sampling
    bins = []
    for i in range(oh):
        ys = y0 + (i + frac) * bh / oh
        for j in range(ow):
            xs = x0 + (j + frac) * bw / ow
            gy, gx = np.meshgrid(ys, xs, indexing="ij")
            bins.append(_bilinear(grid.data, gx.ravel(), gy.ravel()).mean(axis=0))
    return np.concatenate(bins)


def whole_image_feature(grid: FeatureGrid) -> np.ndarray:
    box = BBox(0.0, 0.0, float(grid.cols), float(grid.rows))
    return roi_align(grid, box, patch=1, out=(1, 1), sampling=2)


@dataclass(frozen=True, eq=False)
class Projection:
    """Two linear layers with a ReLU between, mapping d_v to d_model.

    Weight matrices are stored input-major: ``W1`` is (d_v, d_h).
    """

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray

    def __post_init__(self):
        d_v, d_h = self.W1.shape
        if self.b1.shape != (d_h,) or self.W2.shape[0] != d_h or self.b2.shape != (self.W2.shape[1],):
            raise ValueError("projection shapes are inconsistent")


def project(feat: np.ndarray, p: Projection) -> np.ndarray:
    if feat.shape[-1] != p.W1.shape[0]:
        raise ValueError(f"feature length {feat.shape[-1]} != projection input {p.W1.shape[0]}")
    return np.maximum(feat @ p.W1 + p.b1, 0.0) @ p.W2 + p.b2


class FeatureSource(Protocol):
    def element_features(self, doc: HtmlDocument) -> dict[str, np.ndarray]: ...

    def whole_feature(self, doc: HtmlDocument) -> np.ndarray: ...


class ScreenshotFeatures:
    """Frozen per-element visual features for documents, cached by screenshot.

    Documents without a screenshot get zero vectors. ``images`` lets callers
    supply in-memory screenshots keyed by the document's screenshot string;
    anything else is loaded from ``base_dir``.
    """

    def __init__(
        self,
        base_dir: str | Path | None = None,
        patch: int = 8,
        d_v: int = 8,
        sampling: int = 2,
        images: Mapping[str, Image] | None = None,
    ):
        self.base_dir = Path(base_dir) if base_dir is not None else None
        self.patch = patch
        self.d_v = d_v
        self.sampling = sampling
        self.images = dict(images or {})
        self._grids: dict[str, FeatureGrid] = {}
        self._feats: dict[int, tuple[HtmlDocument, dict[str, np.ndarray]]] = {}

    def grid(self, shot: str) -> FeatureGrid:
        if shot not in self._grids:
            img = self.images.get(shot)
            if img is None:
                path = Path(shot)
                if not path.is_absolute() and self.base_dir is not None:
                    path = self.base_dir / path
                img = load_image(path)
            self._grids[shot] = patch_featurize(img, self.patch, self.d_v)
        return self._grids[shot]

    def element_features(self, doc: HtmlDocument) -> dict[str, np.ndarray]:
        cached = self._feats.get(id(doc))
        if cached is not None and cached[0] is doc:
            return cached[1]
        if doc.screenshot is None:
            feats = {e.id: np.zeros(self.d_v) for e in doc.elements}
        else:
            grid = self.grid(doc.screenshot)
            feats = {}
            for e in doc.elements:
                try:
                    feats[e.id] = roi_align(grid, e.bbox, self.patch, (1, 1), self.sampling)
                except RoiError:
                    feats[e.id] = np.zeros(self.d_v)
        self._feats[id(doc)] = (doc, feats)
        return feats

    def whole_feature(self, doc: HtmlDocument) -> np.ndarray:
        if doc.screenshot is None:
            return np.zeros(self.d_v)
        return whole_image_feature(self.grid(doc.screenshot))
