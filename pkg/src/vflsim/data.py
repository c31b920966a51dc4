"""Vertical feature partitioning, IDX ingestion, and the synthetic testbed."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass

import numpy as np

from .models import LinearPerSample, QuadraticLS, SigmoidLayer, SplitModel, SumLinearSoftmaxCE

PUBLIC = "public"
SERVER_ONLY = "server_only"


class PartitionError(ValueError):
    pass


class FormatError(ValueError):
    pass


class TruncatedFile(ValueError):
    pass


class LabelAccessError(PermissionError):
    pass


@dataclass
class VerticalDataset:
    """Feature blocks aligned by sample id, plus access-guarded labels.

    Client-side code must never touch labels when visibility is server_only;
    the `labels` property enforces that, and server code goes through
    `server_labels()`.
    """

    blocks: list  # K arrays, each N x dim_k
    _labels: np.ndarray
    label_visibility: str = PUBLIC

    def __post_init__(self):
        ns = {b.shape[0] for b in self.blocks}
        if len(ns) > 1 or (self.blocks and self.blocks[0].shape[0] != len(self._labels)):
            raise PartitionError("feature blocks and labels must share N rows")

    @property
    def n_samples(self) -> int:
        return len(self._labels)

    @property
    def n_clients(self) -> int:
        return len(self.blocks)

    @property
    def labels(self) -> np.ndarray:
        if self.label_visibility != PUBLIC:
            raise LabelAccessError("labels are only visible at the server")
        return self._labels

    def server_labels(self) -> np.ndarray:
        return self._labels


def partition_quadrants(images: np.ndarray, labels: np.ndarray, label_visibility: str = PUBLIC) -> VerticalDataset:
    """Split N x side x side images into four quadrant clients.

    Client order is row-major: top-left, top-right, bottom-left, bottom-right,
    each flattened to (side/2)^2 features.
    """
    if images.ndim != 3 or images.shape[1] != images.shape[2]:
        raise PartitionError("expected N x side x side images")
    side = images.shape[1]
    if side % 2:
        raise PartitionError("image side must be even")
    h = side // 2
    n = images.shape[0]
    blocks = [
        images[:, :h, :h].reshape(n, -1),
        images[:, :h, h:].reshape(n, -1),
        images[:, h:, :h].reshape(n, -1),
        images[:, h:, h:].reshape(n, -1),
    ]
    return VerticalDataset([np.ascontiguousarray(b) for b in blocks], labels, label_visibility)


def reassemble_quadrants(blocks: list, side: int) -> np.ndarray:
    """Inverse of partition_quadrants (used by the round-trip tests)."""
    h = side // 2
    n = blocks[0].shape[0]
    out = np.empty((n, side, side), dtype=blocks[0].dtype)
    out[:, :h, :h] = blocks[0].reshape(n, h, h)
    out[:, :h, h:] = blocks[1].reshape(n, h, h)
    out[:, h:, :h] = blocks[2].reshape(n, h, h)
    out[:, h:, h:] = blocks[3].reshape(n, h, h)
    return out


# ---------------------------------------------------------------------------
# IDX format (big-endian; magic 2051 for images, 2049 for labels)
# ---------------------------------------------------------------------------

IDX_IMAGE_MAGIC = 2051
IDX_LABEL_MAGIC = 2049


def _open_maybe_gzip(path):
    p = str(path)
    return gzip.open(p, "rb") if p.endswith(".gz") else open(p, "rb")


def _read_exactly(f, count, what):
    buf = f.read(count)
    if len(buf) != count:
        raise TruncatedFile(f"{what}: expected {count} bytes, got {len(buf)}")
    return buf


def load_mnist_idx(image_path, label_path):
    """Load an IDX image/label pair, scaling pixels to [0, 1].

    Accepts plain or .gz files.  Returns (N x rows x cols float64 array,
    length-N int64 labels).
    """
    with _open_maybe_gzip(image_path) as f:
        magic, n, rows, cols = struct.unpack(">iiii", _read_exactly(f, 16, "image header"))
        if magic != IDX_IMAGE_MAGIC:
            raise FormatError(f"bad image magic {magic}, want {IDX_IMAGE_MAGIC}")
        raw = _read_exactly(f, n * rows * cols, "image payload")
    images = np.frombuffer(raw, dtype=np.uint8).reshape(n, rows, cols).astype(np.float64) / 255.0
    with _open_maybe_gzip(label_path) as f:
        magic, n_lab = struct.unpack(">ii", _read_exactly(f, 8, "label header"))
        if magic != IDX_LABEL_MAGIC:
            raise FormatError(f"bad label magic {magic}, want {IDX_LABEL_MAGIC}")
        labels = np.frombuffer(_read_exactly(f, n_lab, "label payload"), dtype=np.uint8).astype(np.int64)
    if n_lab != n:
        raise FormatError(f"image file has {n} samples but label file has {n_lab}")
    return images, labels


def write_idx_images(path, images: np.ndarray) -> None:
    """Write a uint8 image stack as an IDX file (fixture/plumbing helper)."""
    images = np.asarray(images, dtype=np.uint8)
    n, rows, cols = images.shape
    with open(path, "wb") as f:
        f.write(struct.pack(">iiii", IDX_IMAGE_MAGIC, n, rows, cols))
        f.write(images.tobytes())


def write_idx_labels(path, labels: np.ndarray) -> None:
    labels = np.asarray(labels, dtype=np.uint8)
    with open(path, "wb") as f:
        f.write(struct.pack(">ii", IDX_LABEL_MAGIC, len(labels)))
        f.write(labels.tobytes())


# ---------------------------------------------------------------------------
# synthetic quadratic testbed
# ---------------------------------------------------------------------------


def gen_quadratic_testbed(seed, n_samples, n_clients, param_dims, rep_dim, scale=2.0):
    """Sample a planted least-squares split problem with computable constants.

    Per-sample client matrices B_kn have seeded standard-normal entries,
    jointly rescaled so the largest per-sample operator norm equals `scale`
    (default 2).  Targets come from a planted solution with zero noise, so the
    optimum value is exactly attainable and recoverable in closed form.

    Returns (SplitModel, planted parameter blocks).
    """
    if isinstance(param_dims, int):
        param_dims = [param_dims] * n_clients
    if len(param_dims) != n_clients:
        raise PartitionError("need one parameter dim per client")
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0x7E57BED]))
    mats = [rng.normal(size=(n_samples, rep_dim, param_dims[k])) for k in range(n_clients)]
    max_op = max(np.linalg.norm(m[n], 2) for m in mats for n in range(n_samples))
    mats = [m * (scale / max_op) for m in mats]
    planted = [rng.normal(size=rep_dim)] + [rng.normal(size=param_dims[k]) for k in range(n_clients)]
    targets = planted[0] + sum(mats[k] @ planted[k + 1] for k in range(n_clients))
    fusion = QuadraticLS(targets)
    model = SplitModel(fusion=fusion, maps=[LinearPerSample(m) for m in mats], n_samples=n_samples)
    return model, planted


# ---------------------------------------------------------------------------
# model presets
# ---------------------------------------------------------------------------


def build_mnist_model(dataset: VerticalDataset, hidden_dim=128, n_classes=10) -> SplitModel:
    """Shallow split net: per-quadrant sigmoid layer, summed, linear softmax."""
    labels = dataset.server_labels()
    maps = [SigmoidLayer(block, hidden_dim) for block in dataset.blocks]
    fusion = SumLinearSoftmaxCE(labels, n_classes, hidden_dim)
    return SplitModel(fusion=fusion, maps=maps, n_samples=dataset.n_samples)
