"""Grid-feature ingestion, ROI-Align region pooling, and a toy encoder.

Grid features normally arrive precomputed in the binary tensor format;
the toy convolutional encoder exists only so end-to-end runs stay
hermetic without external backbone weights. Regions use coordinates
normalized to the unit square regardless of grid resolution.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError, FormatError, RegionError
from .tensor import Tensor, _gelu_np
from .tensorfile import load_tensor, save_tensor


@dataclass
class GridFeature:
    """An H x W x C visual feature map."""

    values: Tensor

    def __post_init__(self):
        if self.values.ndim != 3:
            raise DimensionError(f"grid must be rank 3, got shape {self.values.shape}")
        if min(self.values.shape) < 1:
            raise DimensionError(f"grid dims must be >= 1, got {self.values.shape}")
        if not np.isfinite(self.values.data).all():
            raise FormatError("grid contains non-finite values")

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]

    @property
    def channels(self) -> int:
        return self.values.shape[2]


@dataclass(frozen=True)
class Region:
    """A box in normalized image coordinates, x1 < x2 and y1 < y2."""

    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        for v in (self.x1, self.y1, self.x2, self.y2):
            if not (0.0 <= v <= 1.0):
                raise RegionError(f"coordinate {v} outside [0, 1]")
        if not (self.x1 < self.x2 and self.y1 < self.y2):
            raise RegionError(
                f"degenerate region ({self.x1}, {self.y1}, {self.x2}, {self.y2})"
            )


def load_grid_features(path) -> GridFeature:
    arr = load_tensor(path)
    if arr.ndim != 3:
        raise FormatError(f"grid feature file has rank {arr.ndim}, expected 3")
    return GridFeature(Tensor(arr.astype(np.float64)))


def save_grid_features(path, grid: GridFeature) -> None:
    save_tensor(path, grid.values.data.astype(np.float32))


def load_regions_file(path) -> dict[str, list[Region]]:
    """JSON-lines region file: {"id": ..., "regions": [[x1,y1,x2,y2], ...]}."""
    out: dict[str, list[Region]] = {}
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                out[obj["id"]] = [Region(*box) for box in obj["regions"]]
            except (KeyError, TypeError, json.JSONDecodeError) as exc:
                raise FormatError(f"bad region record on line {line_no}: {exc}") from exc
    return out


def _bilinear(plane_h: int, plane_w: int, grid: np.ndarray, y: float, x: float) -> np.ndarray:
    """Sample all channels at continuous (y, x) in cell units.

    Cell centers sit at integer+0.5; coordinates are clamped to the border
    centers so samples never extrapolate.
    """
    fy = min(max(y - 0.5, 0.0), plane_h - 1.0)
    fx = min(max(x - 0.5, 0.0), plane_w - 1.0)
    y0, x0 = int(np.floor(fy)), int(np.floor(fx))
    y1, x1 = min(y0 + 1, plane_h - 1), min(x0 + 1, plane_w - 1)
    wy, wx = fy - y0, fx - x0
    top = grid[y0, x0] * (1 - wx) + grid[y0, x1] * wx
    bot = grid[y1, x0] * (1 - wx) + grid[y1, x1] * wx
    return top * (1 - wy) + bot * wy


def roi_align(
    grid: GridFeature,
    region: Region,
    out: tuple[int, int] = (1, 1),
    samples_per_bin: int = 2,
) -> np.ndarray:
    """Average bilinear samples per output bin; continuous coordinates.

    ``samples_per_bin`` points per axis are placed at regular offsets
    (k + 0.5) / s inside each bin. Returns an [h x w x C] array.
    """
    oh, ow = out
    if oh < 1 or ow < 1 or samples_per_bin < 1:
        raise RegionError(f"bad pooling config out={out}, samples={samples_per_bin}")
    x1 = region.x1 * grid.width
    x2 = region.x2 * grid.width
    y1 = region.y1 * grid.height
    y2 = region.y2 * grid.height
    if x2 - x1 <= 0 or y2 - y1 <= 0:
        raise RegionError(f"region degenerate after clamping: {region}")
    bin_h = (y2 - y1) / oh
    bin_w = (x2 - x1) / ow
    data = grid.values.data
    result = np.zeros((oh, ow, grid.channels), dtype=data.dtype)
    s = samples_per_bin
    for by in range(oh):
        for bx in range(ow):
            acc = np.zeros(grid.channels, dtype=data.dtype)
            for sy in range(s):
                for sx in range(s):
                    y = y1 + (by + (sy + 0.5) / s) * bin_h
                    x = x1 + (bx + (sx + 0.5) / s) * bin_w
                    acc += _bilinear(grid.height, grid.width, data, y, x)
            result[by, bx] = acc / (s * s)
    return result


def pool_region_vector(grid: GridFeature, region: Region, samples_per_bin: int = 2) -> np.ndarray:
    """1x1 ROI-Align, squeezed to a length-C vector."""
    return roi_align(grid, region, out=(1, 1), samples_per_bin=samples_per_bin)[0, 0]


def uniform_proposals(n_per_axis: int) -> list[Region]:
    """n^2 non-overlapping tiles covering the unit square, row-major."""
    if n_per_axis < 1:
        raise RegionError(f"n_per_axis must be >= 1, got {n_per_axis}")
    n = n_per_axis
    return [
        Region(j / n, i / n, (j + 1) / n, (i + 1) / n)
        for i in range(n)
        for j in range(n)
    ]


class ToyEncoder:
    """Deterministic strided-conv stack mapping a 224x224x3 image to 7x7xC.

    Stand-in for a real frozen backbone so smoke tests need no external
    weights. Three valid convolutions with stride = kernel size reduce
    224 -> 56 -> 14 -> 7.
    """

    STRIDES = (4, 4, 2)

    def __init__(self, channels: int = 32, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.channels = channels
        dims = [3, max(channels // 2, 1), channels, channels]
        self.kernels = []
        self.biases = []
        for k, cin, cout in zip(self.STRIDES, dims[:-1], dims[1:]):
            scale = 1.0 / np.sqrt(k * k * cin)
            self.kernels.append(rng.normal(0.0, scale, size=(k, k, cin, cout)))
            self.biases.append(np.zeros(cout))

    def __call__(self, image: np.ndarray) -> GridFeature:
        if image.shape != (224, 224, 3):
            raise DimensionError(f"toy encoder expects 224x224x3, got {image.shape}")
        x = np.asarray(image, dtype=np.float64)
        for kernel, bias in zip(self.kernels, self.biases):
            x = _gelu_np(_strided_conv(x, kernel) + bias)
        return GridFeature(Tensor(x))

    def state(self) -> dict[str, np.ndarray]:
        out = {}
        for i, (k, b) in enumerate(zip(self.kernels, self.biases)):
            out[f"conv{i}.kernel"] = k
            out[f"conv{i}.bias"] = b
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        for i in range(len(self.kernels)):
            self.kernels[i] = np.asarray(state[f"conv{i}.kernel"], dtype=np.float64)
            self.biases[i] = np.asarray(state[f"conv{i}.bias"], dtype=np.float64)

    def save(self, path) -> None:
        """Kernels and biases as consecutive tensor records, layer order."""
        from .tensorfile import write_record

        with open(path, "wb") as fh:
            for kernel, bias in zip(self.kernels, self.biases):
                write_record(fh, kernel)
                write_record(fh, bias)

    def load(self, path) -> None:
        from .tensorfile import read_record

        with open(path, "rb") as fh:
            for i in range(len(self.kernels)):
                kernel = read_record(fh)
                bias = read_record(fh)
                if kernel.shape != self.kernels[i].shape:
                    raise FormatError(
                        f"encoder checkpoint kernel {i} has shape {kernel.shape}, "
                        f"expected {self.kernels[i].shape}"
                    )
                self.kernels[i] = np.asarray(kernel, dtype=np.float64)
                self.biases[i] = np.asarray(bias, dtype=np.float64)


def _strided_conv(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """Valid convolution with stride equal to the kernel size (patchify)."""
    k = kernel.shape[0]
    h, w, cin = x.shape
    oh, ow = h // k, w // k
    patches = (
        x[: oh * k, : ow * k]
        .reshape(oh, k, ow, k, cin)
        .transpose(0, 2, 1, 3, 4)
        .reshape(oh * ow, k * k * cin)
    )
    flat_kernel = kernel.reshape(k * k * cin, kernel.shape[3])
    return (patches @ flat_kernel).reshape(oh, ow, kernel.shape[3])
