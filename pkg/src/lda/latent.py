"""Frozen visual encoders producing the per-patch predictive targets.

Two stand-ins span the structured-vs-entangled representation axis:

* STRUCTURED: a parameterless per-patch descriptor with named semantic
  channels (palette-class occupancy, mean color, intensity centroid).
  Values lie in [0, 1] by construction.
* ENTANGLED: a frozen random linear map of raw patch pixels (orthonormal
  rows, tanh squashing), mixing all pixel statistics within a patch.

Both are pure functions of the image once the spec is fixed; neither ever
receives gradients. `pca_project` provides the visualization projection
used to compare predicted and ground-truth token grids.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import worldsim
from .errors import DegenerateInputError
from .rng import STREAM_INIT, philox

STRUCTURED = "structured"
ENTANGLED = "entangled"

# palette classes scored by the occupancy channels, in order
_PALETTE_CLASSES = tuple(worldsim.BLOCK_COLORS) + (worldsim.goal_tint(),)
N_CLASSES = len(_PALETTE_CLASSES) + 1  # + agent (any grip brightness)
STRUCTURED_CHANNELS = N_CLASSES + 3 + 2  # occupancy, mean RGB, centroid


@dataclass(frozen=True)
class LatentFrame:
    tokens: np.ndarray  # (P, D) float32, row-major over the patch grid
    rows: int
    cols: int
    encoder_id: str


@dataclass(frozen=True)
class EncoderSpec:
    encoder_id: str
    patch_size: int = 8
    dim: int = 32
    seed: int = 0  # weight seed; only ENTANGLED uses it

    def __post_init__(self):
        if self.encoder_id not in (STRUCTURED, ENTANGLED):
            raise ValueError(f"unknown encoder_id {self.encoder_id!r}")
        if self.encoder_id == STRUCTURED and self.dim < STRUCTURED_CHANNELS:
            raise ValueError(
                f"dim {self.dim} cannot hold the {STRUCTURED_CHANNELS} structured channels"
            )

    def to_json(self) -> dict:
        return {
            "encoder_id": self.encoder_id,
            "patch_size": self.patch_size,
            "dim": self.dim,
            "seed": self.seed,
        }

    @staticmethod
    def from_json(obj: dict) -> "EncoderSpec":
        return EncoderSpec(
            encoder_id=obj["encoder_id"],
            patch_size=int(obj["patch_size"]),
            dim=int(obj["dim"]),
            seed=int(obj["seed"]),
        )

    def fingerprint(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _patchify(images: np.ndarray, p: int) -> np.ndarray:
    """(N, H, W, 3) uint8 -> (N, rows*cols, p, p, 3)."""
    n, h, w, c = images.shape
    if h % p or w % p:
        raise ValueError(f"image dims ({h}, {w}) not divisible by patch size {p}")
    rows, cols = h // p, w // p
    x = images.reshape(n, rows, p, cols, p, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, rows * cols, p, p, c)


class Encoder:
    """Materialized frozen encoder for a spec. Stateless after __init__."""

    def __init__(self, spec: EncoderSpec):
        self.spec = spec
        self._weights = None
        if spec.encoder_id == ENTANGLED:
            n_in = spec.patch_size * spec.patch_size * 3
            g = philox(np.uint64(spec.seed), np.uint64(STREAM_INIT)).normal(
                size=(n_in, max(spec.dim, 1))
            )
            q, _ = np.linalg.qr(g)  # orthonormal columns
            if spec.dim > n_in:
                raise ValueError("entangled dim must not exceed patch pixel count")
            self._weights = q[:, : spec.dim].T.astype(np.float64)  # (D, n_in)

    @property
    def weights(self) -> np.ndarray | None:
        return None if self._weights is None else self._weights.copy()

    def fingerprint(self) -> str:
        return self.spec.fingerprint()

    def grid_shape(self, image_hw=(worldsim.FRAME_SIZE, worldsim.FRAME_SIZE)):
        return image_hw[0] // self.spec.patch_size, image_hw[1] // self.spec.patch_size

    def encode_batch(self, images: np.ndarray) -> np.ndarray:
        """(N, H, W, 3) uint8 -> (N, P, D) float32."""
        images = np.asarray(images)
        if images.ndim != 4 or images.shape[-1] != 3:
            raise ValueError(f"expected (N, H, W, 3) images, got {images.shape}")
        if self.spec.encoder_id == STRUCTURED:
            return self._encode_structured(images)
        return self._encode_entangled(images)

    def encode(self, image: np.ndarray) -> LatentFrame:
        image = np.asarray(image)
        rows, cols = (s // self.spec.patch_size for s in image.shape[:2])
        tokens = self.encode_batch(image[None])[0]
        return LatentFrame(tokens=tokens, rows=rows, cols=cols, encoder_id=self.spec.encoder_id)

    def _encode_structured(self, images: np.ndarray) -> np.ndarray:
        p = self.spec.patch_size
        patches = _patchify(images, p)  # (N, P, p, p, 3)
        n, P = patches.shape[:2]
        flat = patches.reshape(n, P, p * p, 3)
        out = np.zeros((n, P, self.spec.dim), dtype=np.float32)

        for ci, color in enumerate(_PALETTE_CLASSES):
            match = (flat == np.array(color, dtype=np.uint8)).all(axis=-1)
            out[:, :, ci] = match.mean(axis=-1)
        lo = worldsim.AGENT_BRIGHTNESS[0]
        gray = (flat[..., 0] == flat[..., 1]) & (flat[..., 1] == flat[..., 2])
        agent = gray & (flat[..., 0] >= lo)
        out[:, :, N_CLASSES - 1] = agent.mean(axis=-1)

        out[:, :, N_CLASSES : N_CLASSES + 3] = flat.mean(axis=2) / 255.0

        # intensity-weighted centroid, in patch-relative [0, 1] coordinates
        intensity = flat.mean(axis=-1, dtype=np.float64)  # (N, P, p*p)
        coords = (np.arange(p) + 0.5) / p
        xs = np.tile(coords, p)              # fast axis: columns
        ys = np.repeat(coords, p)            # slow axis: rows
        denom = intensity.sum(axis=-1)
        denom = np.where(denom == 0.0, 1.0, denom)
        out[:, :, N_CLASSES + 3] = (intensity * xs).sum(axis=-1) / denom
        out[:, :, N_CLASSES + 4] = (intensity * ys).sum(axis=-1) / denom
        return out

    def _encode_entangled(self, images: np.ndarray) -> np.ndarray:
        p = self.spec.patch_size
        patches = _patchify(images, p).astype(np.float64) / 255.0 - 0.5
        n, P = patches.shape[:2]
        flat = patches.reshape(n, P, p * p * 3)
        return np.tanh(flat @ self._weights.T).astype(np.float32)


def encode_structured(image: np.ndarray, spec: EncoderSpec | None = None) -> LatentFrame:
    spec = spec or EncoderSpec(STRUCTURED)
    if spec.encoder_id != STRUCTURED:
        raise ValueError("spec is not structured")
    return Encoder(spec).encode(image)


def encode_entangled(image: np.ndarray, spec: EncoderSpec | None = None) -> LatentFrame:
    spec = spec or EncoderSpec(ENTANGLED)
    if spec.encoder_id != ENTANGLED:
        raise ValueError("spec is not entangled")
    return Encoder(spec).encode(image)


def pca_project(latents: Sequence[LatentFrame] | np.ndarray, k: int = 3,
                basis: tuple[np.ndarray, np.ndarray] | None = None):
    """Project token grids onto shared principal components.

    Components are fit on all tokens pooled across frames (or reuse an
    explicit (mean, components) basis); each component map is min-max
    scaled to [0, 1] per component. Sign convention: the largest-magnitude
    loading of each component is positive.

    Returns (maps, components, explained_variance) where maps has shape
    (F, rows, cols, k).
    """
    if isinstance(latents, np.ndarray):
        tokens = latents
        if tokens.ndim != 3:
            raise ValueError("expected (F, P, D) token array")
        f, P, d = tokens.shape
        rows = cols = int(np.sqrt(P))
    else:
        frames = list(latents)
        if len(frames) < 2 and basis is None:
            raise ValueError("need at least 2 frames to fit a projection")
        rows, cols = frames[0].rows, frames[0].cols
        tokens = np.stack([lf.tokens for lf in frames])
        f, P, d = tokens.shape

    pooled = tokens.reshape(f * P, d).astype(np.float64)
    if basis is None:
        mean = pooled.mean(axis=0)
        centered = pooled - mean
        if not np.any(np.abs(centered) > 1e-12):
            raise DegenerateInputError("all tokens identical; nothing to project")
        _, svals, vt = np.linalg.svd(centered, full_matrices=False)
        comps = vt[:k]
        var = svals**2 / (pooled.shape[0] - 1)
        explained = var[:k]
    else:
        mean, comps = basis
        centered = pooled - mean
        scores_all = centered @ comps.T
        explained = scores_all.var(axis=0, ddof=1)

    # deterministic sign: dominant loading positive
    for i in range(comps.shape[0]):
        j = int(np.argmax(np.abs(comps[i])))
        if comps[i, j] < 0:
            comps[i] = -comps[i]

    scores = (pooled - mean) @ comps.T  # (F*P, k)
    lo, hi = scores.min(axis=0), scores.max(axis=0)
    rng_ = hi - lo
    safe = np.where(rng_ > 0, rng_, 1.0)
    scaled = np.where(rng_ > 0, (scores - lo) / safe, 0.0)
    maps = scaled.reshape(f, rows, cols, comps.shape[0])
    return maps, (mean, comps), explained
