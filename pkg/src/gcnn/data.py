"""MNIST IDX loading, dataset subsampling and experiment manifests."""

from __future__ import annotations

import gzip
import hashlib
import json
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from gcnn.errors import FormatError, InvalidArgument
from gcnn.graph import Graph, build_grid_graph, restrict_graph

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801

TRAIN_FILES = ("train-images-idx3-ubyte", "train-labels-idx1-ubyte")
TEST_FILES = ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte")


@dataclass(frozen=True, eq=False)
class Dataset:
    images: np.ndarray  # (S, N) in [0, 1]
    labels: np.ndarray  # (S,) ints 0..9
    graph: Graph

    def __post_init__(self):
        if self.images.ndim != 2 or self.images.shape[1] != self.graph.n:
            raise InvalidArgument(f"images must be (S, {self.graph.n}), got {self.images.shape}")
        if self.labels.shape != (self.images.shape[0],):
            raise InvalidArgument("need exactly one label per image")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() > 9):
            raise InvalidArgument("labels must lie in 0..9")

    def __len__(self):
        return self.images.shape[0]

    def head(self, count: int | None) -> "Dataset":
        if count is None or count >= len(self):
            return self
        return Dataset(self.images[:count], self.labels[:count], self.graph)

    def batch(self, idx=None) -> np.ndarray:
        """Signals shaped (S, 1, N) for the network."""
        imgs = self.images if idx is None else self.images[idx]
        return imgs[:, None, :]


def _read_bytes(path) -> bytes:
    raw = Path(path).read_bytes()
    if raw[:2] == b"\x1f\x8b":
        raw = gzip.decompress(raw)
    return raw


def read_idx_images(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 16:
        raise FormatError(f"{path}: truncated image header", offset=len(raw))
    magic, count, rows, cols = struct.unpack_from(">IIII", raw, 0)
    if magic != IMAGES_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x}", offset=0)
    need = 16 + count * rows * cols
    if len(raw) < need:
        raise FormatError(f"{path}: truncated pixel data, expected {need} bytes, found {len(raw)}", offset=len(raw))
    pix = np.frombuffer(raw, dtype=np.uint8, count=count * rows * cols, offset=16)
    return pix.reshape(count, rows, cols)


def read_idx_labels(path) -> np.ndarray:
    raw = _read_bytes(path)
    if len(raw) < 8:
        raise FormatError(f"{path}: truncated label header", offset=len(raw))
    magic, count = struct.unpack_from(">II", raw, 0)
    if magic != LABELS_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x}", offset=0)
    if len(raw) < 8 + count:
        raise FormatError(f"{path}: truncated labels, expected {8 + count} bytes, found {len(raw)}", offset=len(raw))
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=8).astype(np.int64)


def load_mnist(images_path, labels_path) -> Dataset:
    """Read an IDX image/label pair onto the matching grid graph.

    Pixels map to vertices in row-major order and are scaled by 1/255.
    """
    pix = read_idx_images(images_path)
    labels = read_idx_labels(labels_path)
    if pix.shape[0] != labels.shape[0]:
        raise FormatError(f"{images_path} holds {pix.shape[0]} images but {labels_path} holds {labels.shape[0]} labels", offset=4)
    if labels.size and labels.max() > 9:
        bad = int(np.argmax(labels > 9))
        raise FormatError(f"{labels_path}: label {labels[bad]} out of range", offset=8 + bad)
    _, rows, cols = pix.shape
    images = pix.reshape(pix.shape[0], rows * cols).astype(np.float64) / 255.0
    return Dataset(images, labels, build_grid_graph(rows, cols))


def load_mnist_dir(data_dir, split: str = "train") -> Dataset:
    names = TRAIN_FILES if split == "train" else TEST_FILES
    d = Path(data_dir)
    paths = []
    for name in names:
        for cand in (d / name, d / (name + ".gz"), d / name.replace("-idx", ".idx")):
            if cand.exists():
                paths.append(cand)
                break
        else:
            raise FileNotFoundError(f"{name} not found under {d}")
    return load_mnist(*paths)


def subsample_dataset(d: Dataset, kept_indices, graph: Graph | None = None) -> Dataset:
    """Restrict every image to ``kept_indices`` (as returned by subsample_graph)."""
    kept = np.asarray(kept_indices, dtype=np.int64)
    if kept.ndim != 1 or kept.size == 0 or kept.min() < 0 or kept.max() >= d.graph.n:
        raise InvalidArgument("kept indices out of range for this dataset")
    g = graph if graph is not None else restrict_graph(d.graph, kept)
    return Dataset(d.images[:, kept], d.labels, g)


def save_cache(d: Dataset, path) -> None:
    np.savez(path, images=d.images, labels=d.labels, adjacency=d.graph.adjacency,
             vertex_labels=d.graph.vertex_labels,
             coords=d.graph.coords if d.graph.coords is not None else np.zeros((0, 2)))


def load_cache(path) -> Dataset:
    with np.load(path) as z:
        coords = z["coords"] if z["coords"].size else None
        g = Graph(z["adjacency"], vertex_labels=z["vertex_labels"], coords=coords)
        return Dataset(z["images"], z["labels"], g)


def file_sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(path, *, seed, excluded, config: dict, files=()) -> dict:
    manifest = {
        "seed": seed,
        "excluded_vertices": [int(v) for v in excluded],
        "config": config,
        "files": {str(p): file_sha256(p) for p in files},
    }
    Path(path).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


def read_manifest(path) -> dict:
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: invalid manifest JSON ({exc})") from exc
