"""Tiny trainable image encoder and the binary feature-file format.

Produces the two feature kinds the rest of the model consumes: a spatial
grid of region vectors (from the last convolution) and one flat global
vector (from an affine map over the flattened grid). A save/load path lets
externally computed features stand in for the on-line encoder.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor

GRID_CHANNELS = 32  # conv stack output channels (3 -> 16 -> 32)
GLOBAL_DIM = 64

FEATURE_MAGIC = b"C2FA"
FEATURE_VERSION = 1


class FeatureFileError(Exception):
    """Malformed or mismatched feature file."""


@dataclass
class FeatureGrid:
    """L region vectors laid out on a grid_h x grid_w spatial grid."""

    grid_h: int
    grid_w: int
    data: Tensor  # (L, D)

    def __post_init__(self):
        L, d = self.data.values.shape
        if L != self.grid_h * self.grid_w:
            raise ValueError(
                f"FeatureGrid: {self.grid_h}x{self.grid_w} grid holds "
                f"{self.grid_h * self.grid_w} regions, data has {L}"
            )

    @property
    def regions(self):
        return self.data.values.shape[0]

    @property
    def channels(self):
        return self.data.values.shape[1]


@dataclass
class GlobalFeature:
    """Flat image-level feature vector."""

    data: Tensor  # (D_fc,)

    @property
    def dim(self):
        return self.data.values.shape[0]


class EncoderParams:
    """Weights for the 2-conv tanh/avg-pool stack plus the flattening affine map.

    Built for a fixed input size; ``encode`` checks the image against it.
    """

    def __init__(self, image_h=32, image_w=32, seed=0):
        if image_h % 4 or image_w % 4:
            raise ValueError("encoder input dims must be divisible by 4")
        self.image_h = image_h
        self.image_w = image_w
        self.grid_h = image_h // 4
        self.grid_w = image_w // 4
        rng = np.random.default_rng([seed, 0xE])
        flat = self.grid_h * self.grid_w * GRID_CHANNELS
        self.conv1_w = ag.parameter(_glorot(rng, (3, 3, 3, 16), 9 * 3, 16))
        self.conv1_b = ag.parameter(np.zeros(16))
        self.conv2_w = ag.parameter(_glorot(rng, (3, 3, 16, GRID_CHANNELS), 9 * 16, GRID_CHANNELS))
        self.conv2_b = ag.parameter(np.zeros(GRID_CHANNELS))
        self.fc_w = ag.parameter(_glorot(rng, (flat, GLOBAL_DIM), flat, GLOBAL_DIM))
        self.fc_b = ag.parameter(np.zeros(GLOBAL_DIM))

    def tensors(self):
        return {
            "encoder/conv1_w": self.conv1_w,
            "encoder/conv1_b": self.conv1_b,
            "encoder/conv2_w": self.conv2_w,
            "encoder/conv2_b": self.conv2_b,
            "encoder/fc_w": self.fc_w,
            "encoder/fc_b": self.fc_b,
        }


def _glorot(rng, shape, fan_in, fan_out):
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=shape)


def encode(image, params):
    """Run the conv stack on one (H, W, 3) image with values in [0, 1].

    Returns (FeatureGrid, GlobalFeature); both are differentiable w.r.t.
    ``params`` and the image tensor.
    """
    img = image if isinstance(image, Tensor) else ag.constant(image)
    v = img.values
    if v.ndim != 3 or v.shape[2] != 3:
        raise ValueError(f"encode: expected (H, W, 3) image, got {v.shape}")
    if v.shape[0] % 4 or v.shape[1] % 4:
        raise ValueError(f"encode: H and W must be divisible by 4, got {v.shape[:2]}")
    if (v.shape[0], v.shape[1]) != (params.image_h, params.image_w):
        raise ValueError(
            f"encode: params built for {params.image_h}x{params.image_w}, "
            f"image is {v.shape[0]}x{v.shape[1]}"
        )
    if v.min() < 0.0 or v.max() > 1.0:
        raise ValueError("encode: pixel values must lie in [0, 1]")

    x = ag.avg_pool2(ag.tanh(ag.conv3x3(img, params.conv1_w, params.conv1_b)))
    x = ag.avg_pool2(ag.tanh(ag.conv3x3(x, params.conv2_w, params.conv2_b)))
    gh, gw, d = x.values.shape
    grid = FeatureGrid(gh, gw, ag.reshape(x, (gh * gw, d)))
    flat = ag.reshape(x, (gh * gw * d,))
    fc = ag.add(ag.matmul(flat, params.fc_w), params.fc_b)
    return grid, GlobalFeature(fc)


# ---------------------------------------------------------------------------
# feature file format (binary, little-endian)
# ---------------------------------------------------------------------------

@dataclass
class FeatureRecord:
    grid: FeatureGrid
    fc: GlobalFeature
    labels: np.ndarray  # (C,) of {0, 1}


class FeatureDataset:
    """Uniformly shaped collection of (grid, global feature, labels) records."""

    def __init__(self, grid_h, grid_w, channels, global_dim, num_classes, records=()):
        self.grid_h = grid_h
        self.grid_w = grid_w
        self.channels = channels
        self.global_dim = global_dim
        self.num_classes = num_classes
        self.records = list(records)

    def append(self, record):
        g = record.grid
        if (g.grid_h, g.grid_w, g.channels) != (self.grid_h, self.grid_w, self.channels):
            raise FeatureFileError("record grid dimensions do not match the dataset")
        if record.fc.dim != self.global_dim or len(record.labels) != self.num_classes:
            raise FeatureFileError("record feature/label dimensions do not match the dataset")
        self.records.append(record)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)


def save_features(dataset, path):
    """Write a FeatureDataset; values are stored as float32."""
    header = struct.pack(
        "<4sIIIIIII",
        FEATURE_MAGIC,
        FEATURE_VERSION,
        len(dataset.records),
        dataset.grid_h,
        dataset.grid_w,
        dataset.channels,
        dataset.global_dim,
        dataset.num_classes,
    )
    with open(path, "wb") as fh:
        fh.write(header)
        for rec in dataset.records:
            fh.write(np.ascontiguousarray(rec.grid.data.values, dtype="<f4").tobytes())
            fh.write(np.ascontiguousarray(rec.fc.data.values, dtype="<f4").tobytes())
            labels = np.asarray(rec.labels).astype(np.uint8)
            if not np.all((labels == 0) | (labels == 1)):
                raise FeatureFileError("labels must be 0/1")
            fh.write(labels.tobytes())


def load_features(path):
    """Read a feature file back into a FeatureDataset (float32 payloads)."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head_size = struct.calcsize("<4sIIIIIII")
    if len(raw) < head_size:
        raise FeatureFileError(f"{path}: truncated header")
    magic, version, count, gh, gw, d, dfc, c = struct.unpack("<4sIIIIIII", raw[:head_size])
    if magic != FEATURE_MAGIC:
        raise FeatureFileError(f"{path}: bad magic {magic!r}")
    if version != FEATURE_VERSION:
        raise FeatureFileError(f"{path}: unsupported version {version}")
    rec_bytes = (gh * gw * d + dfc) * 4 + c
    if len(raw) != head_size + count * rec_bytes:
        raise FeatureFileError(
            f"{path}: expected {head_size + count * rec_bytes} bytes, got {len(raw)}"
        )
    ds = FeatureDataset(gh, gw, d, dfc, c)
    off = head_size
    for _ in range(count):
        grid_vals = np.frombuffer(raw, dtype="<f4", count=gh * gw * d, offset=off)
        off += gh * gw * d * 4
        fc_vals = np.frombuffer(raw, dtype="<f4", count=dfc, offset=off)
        off += dfc * 4
        labels = np.frombuffer(raw, dtype=np.uint8, count=c, offset=off)
        off += c
        if not np.all((labels == 0) | (labels == 1)):
            raise FeatureFileError(f"{path}: labels must be 0/1")
        ds.records.append(
            FeatureRecord(
                grid=FeatureGrid(gh, gw, Tensor(grid_vals.reshape(gh * gw, d), dtype=np.float32)),
                fc=GlobalFeature(Tensor(fc_vals, dtype=np.float32)),
                labels=labels.copy(),
            )
        )
    return ds
