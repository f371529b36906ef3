"""Feature extractor backends.

Two families behind the same call signatures:

* Offline deterministic backends (default): a seeded conv+softmax head for
  per-pixel class distributions, seeded projections for frame/clip
  features, and a feature-hashing text embedder. They run anywhere, need
  no downloads, and produce genuinely well-formed outputs (the
  segmentation head emits true per-pixel distributions, so class means sum
  to 1).

* Hub adapters that wrap real pretrained models (sentence-transformers,
  torchvision segmentation) when their weights are available locally.
  These imports are lazy; constructing an adapter without the dependency
  or weights raises immediately, which callers treat as a configuration
  error rather than a per-item failure.

Every backend records a provenance string that the export job writes into
its manifest fragment.
"""
from __future__ import annotations

import hashlib
import re

import numpy as np


def _rng(seed: int, label: str) -> np.random.Generator:
    digest = hashlib.sha256(f"{seed}:{label}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def _downsample(frames: np.ndarray, size: int = 16) -> np.ndarray:
    """Mean-pool frames (n, H, W, C) onto a coarse (n, size, size, C) grid."""
    n, h, w, c = frames.shape
    ys = np.linspace(0, h, size + 1).astype(int)
    xs = np.linspace(0, w, size + 1).astype(int)
    out = np.empty((n, size, size, c))
    for i in range(size):
        for j in range(size):
            ys0, ys1 = ys[i], max(ys[i + 1], ys[i] + 1)
            xs0, xs1 = xs[j], max(xs[j + 1], xs[j] + 1)
            out[:, i, j, :] = frames[:, ys0:ys1, xs0:xs1, :].mean(axis=(1, 2))
    return out


class OfflineSegmentation:
    """Per-pixel class distributions from a fixed seeded linear head.

    Pixels are embedded as (RGB, x, y, 1) and mapped to class logits;
    softmax per pixel yields a valid distribution, and the per-frame class
    mean therefore sums to 1 exactly (up to float32 storage).
    """

    def __init__(self, n_classes: int = 150, seed: int = 0, grid: int = 16):
        self.n_classes = n_classes
        self.grid = grid
        self.weights = _rng(seed, "segmentation").normal(size=(6, n_classes))
        self.provenance = f"offline-segmentation-v1(classes={n_classes},seed={seed})"

    def frame_class_means(self, frames: np.ndarray) -> np.ndarray:
        """frames (n, H, W, 3) in [0, 255] or [0, 1] -> (n, n_classes)."""
        small = _downsample(np.asarray(frames, dtype=np.float64), self.grid)
        if small.max() > 1.5:
            small = small / 255.0
        n, h, w, _ = small.shape
        ys, xs = np.meshgrid(np.linspace(0, 1, h), np.linspace(0, 1, w), indexing="ij")
        pos = np.broadcast_to(np.stack([ys, xs], axis=-1), (n, h, w, 2))
        ones = np.ones((n, h, w, 1))
        feats = np.concatenate([small, pos, ones], axis=-1)  # (n, h, w, 6)
        logits = feats @ self.weights * 4.0
        logits -= logits.max(axis=-1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=-1, keepdims=True)
        return probs.mean(axis=(1, 2))


class OfflineProjection:
    """Per-frame features from a fixed seeded projection of coarse pixels."""

    def __init__(self, dim: int, seed: int = 0, label: str = "projection", grid: int = 8):
        self.dim = dim
        self.grid = grid
        self.weights = _rng(seed, label).normal(size=(grid * grid * 3, dim)) / np.sqrt(
            grid * grid * 3
        )
        self.provenance = f"offline-{label}-v1(dim={dim},seed={seed})"

    def frame_features(self, frames: np.ndarray) -> np.ndarray:
        """frames (n, H, W, 3) -> (n, dim)."""
        small = _downsample(np.asarray(frames, dtype=np.float64), self.grid)
        if small.max() > 1.5:
            small = small / 255.0
        flat = small.reshape(small.shape[0], -1)
        return np.tanh(flat @ self.weights)

    def clip_feature(self, frames: np.ndarray) -> np.ndarray:
        """One vector per clip: mean of the per-frame features."""
        return self.frame_features(frames).mean(axis=0)


class HashedTextEmbedder:
    """Feature-hashing bag-of-words embedder with L2 normalization."""

    def __init__(self, dim: int, seed: int = 0):
        self.dim = dim
        self.seed = seed
        self.provenance = f"hashed-bow-v1(dim={dim},seed={seed})"

    def embed(self, texts: list[str]) -> np.ndarray:
        out = np.zeros((len(texts), self.dim))
        for i, text in enumerate(texts):
            for token in re.findall(r"[a-z0-9]+", text.lower()):
                digest = hashlib.sha256(f"{self.seed}:{token}".encode()).digest()
                bucket = int.from_bytes(digest[:4], "little") % self.dim
                sign = 1.0 if digest[4] % 2 == 0 else -1.0
                out[i, bucket] += sign
            norm = np.linalg.norm(out[i])
            if norm > 0:
                out[i] /= norm
        return out


class SentenceTransformerEmbedder:
    """Adapter over sentence-transformers; needs locally cached weights."""

    def __init__(self, model_name: str, pooling: str = "mean"):
        try:
            from sentence_transformers import SentenceTransformer
        except ImportError as exc:  # pragma: no cover - environment dependent
            raise RuntimeError("sentence-transformers is not installed") from exc
        self.model = SentenceTransformer(model_name)
        self.pooling = pooling
        self.provenance = f"sentence-transformers({model_name},pooling={pooling})"

    def embed(self, texts: list[str]) -> np.ndarray:  # pragma: no cover
        return np.asarray(self.model.encode(texts, convert_to_numpy=True), dtype=np.float64)


class TorchvisionSegmentation:
    """Adapter over a torchvision semantic segmentation model."""

    def __init__(self, weights_path: str, n_classes: int = 150):  # pragma: no cover
        try:
            import torch
            import torchvision
        except ImportError as exc:
            raise RuntimeError("torch/torchvision are not installed") from exc
        self.torch = torch
        self.model = torchvision.models.segmentation.lraspp_mobilenet_v3_large(
            num_classes=n_classes
        )
        state = torch.load(weights_path, map_location="cpu")
        self.model.load_state_dict(state)
        self.model.eval()
        self.n_classes = n_classes
        self.provenance = f"torchvision-lraspp({weights_path})"

    def frame_class_means(self, frames: np.ndarray) -> np.ndarray:  # pragma: no cover
        torch = self.torch
        x = torch.as_tensor(np.asarray(frames, dtype=np.float32) / 255.0).permute(0, 3, 1, 2)
        with torch.no_grad():
            logits = self.model(x)["out"]
            probs = torch.softmax(logits, dim=1)
        return probs.mean(dim=(2, 3)).numpy().astype(np.float64)


def build_text_backend(spec: dict, seed: int):
    backend = spec.get("backend", "hashed_text")
    dim = int(spec.get("dim", 768))
    if backend == "hashed_text":
        return HashedTextEmbedder(dim, seed=seed)
    if backend == "sentence_transformer":
        return SentenceTransformerEmbedder(spec["model"], spec.get("pooling", "mean"))
    raise ValueError(f"unknown text backend {backend!r}")


def build_segmentation_backend(spec: dict, seed: int):
    backend = spec.get("backend", "offline_segmentation")
    if backend == "offline_segmentation":
        return OfflineSegmentation(int(spec.get("dim", 150)), seed=seed)
    if backend == "torchvision":
        return TorchvisionSegmentation(spec["weights"], int(spec.get("dim", 150)))
    raise ValueError(f"unknown segmentation backend {backend!r}")


def build_projection_backend(spec: dict, seed: int, label: str):
    backend = spec.get("backend", "offline_projection")
    if backend == "offline_projection":
        return OfflineProjection(int(spec["dim"]), seed=seed, label=label)
    raise ValueError(f"unknown projection backend {backend!r}")
