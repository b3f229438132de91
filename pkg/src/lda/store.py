"""Canonical 10 Hz episode store.

Layout: one directory per store; `manifest.json` plus one subdirectory per
episode holding `meta.json`, `arrays.json` (shape/dtype/offset descriptor
and checksum), `arrays.bin` (little-endian float32, row-major) and
`frames/` of PNG images. Episode writes are atomic (temp dir + rename);
the manifest is written once after all episodes land. A fixed hash-based
90/10 train/heldout split is recorded per episode at write time.
"""

from __future__ import annotations

import hashlib
import json
import os
import shutil
from dataclasses import dataclass, field
from typing import Iterator, Optional, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, CorruptionError, MigrationError

STORE_VERSION = 1
QUALITY_HIGH = "high"
QUALITY_LOW = "low"
QUALITY_ACTIONLESS = "actionless"
QUALITIES = (QUALITY_HIGH, QUALITY_LOW, QUALITY_ACTIONLESS)
TARGET_RATE_HZ = 10.0


class ActionsAbsentError(LookupError):
    """Raised when an actionless episode is asked for its action channel."""


@dataclass
class UnifiedEpisode:
    episode_id: str
    frames: np.ndarray                 # (N, H, W, 3) uint8 at 10 Hz
    wrist_pose: Optional[np.ndarray]   # (N, 3) float32 canonical frame
    grip: Optional[np.ndarray]         # (N,) float32 in [0, 1]
    actions: Optional[np.ndarray]      # (N-1, 4) float32 [dx, dy, dtheta, dgrip]
    instruction_text: str
    quality: str
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        self.validate()

    @property
    def n_frames(self) -> int:
        return len(self.frames)

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(self.n_frames) / TARGET_RATE_HZ

    @property
    def duration_s(self) -> float:
        return (self.n_frames - 1) / TARGET_RATE_HZ if self.n_frames else 0.0

    @property
    def actionless(self) -> bool:
        return self.actions is None

    def require_actions(self) -> np.ndarray:
        """Action channel, or a loud failure for actionless episodes."""
        if self.actions is None:
            raise ActionsAbsentError(
                f"episode {self.episode_id!r} is actionless; it has no action channel"
            )
        return self.actions

    def validate(self):
        if self.quality not in QUALITIES:
            raise ValueError(f"unknown quality {self.quality!r}")
        if self.frames.dtype != np.uint8 or self.frames.ndim != 4:
            raise ValueError("frames must be (N, H, W, 3) uint8")
        if self.quality == QUALITY_ACTIONLESS:
            if not (self.wrist_pose is None and self.grip is None and self.actions is None):
                raise ValueError("actionless episodes must omit the action channel entirely")
            return
        if self.wrist_pose is None or self.grip is None or self.actions is None:
            raise ValueError(f"{self.quality} episode missing pose/grip/actions")
        n = self.n_frames
        if not (len(self.wrist_pose) == len(self.grip) == n == len(self.actions) + 1):
            raise ValueError(
                f"length mismatch: frames {n}, pose {len(self.wrist_pose)}, "
                f"grip {len(self.grip)}, actions {len(self.actions)}"
            )
        if np.any(self.grip < 0.0) or np.any(self.grip > 1.0):
            raise ValueError("grip outside [0, 1]")


def split_of(episode_id: str) -> str:
    """Fixed hash-based 90/10 split; independent of write order."""
    digest = hashlib.sha256(episode_id.encode()).digest()
    return "heldout" if int.from_bytes(digest[:8], "little") % 10 == 0 else "train"


@dataclass
class Manifest:
    version: int
    config_hash: str
    episodes: list[dict]
    stats: dict

    @staticmethod
    def from_json(obj: dict) -> "Manifest":
        return Manifest(
            version=int(obj["version"]),
            config_hash=str(obj["config_hash"]),
            episodes=list(obj["episodes"]),
            stats=dict(obj["stats"]),
        )

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "config_hash": self.config_hash,
            "episodes": self.episodes,
            "stats": self.stats,
        }

    def ids(self) -> set[str]:
        return {e["id"] for e in self.episodes}


def _array_payload(episode: UnifiedEpisode):
    arrays = {}
    order = []
    blob = bytearray()
    for name, arr in (
        ("wrist_pose", episode.wrist_pose),
        ("grip", episode.grip),
        ("actions", episode.actions),
    ):
        if arr is None:
            continue  # actionless: the channel is physically absent
        data = np.ascontiguousarray(arr, dtype="<f4")
        arrays[name] = {
            "dtype": "<f4",
            "shape": list(data.shape),
            "offset": len(blob),
        }
        order.append(name)
        blob.extend(data.tobytes())
    return order, arrays, bytes(blob)


def write_episode(episode: UnifiedEpisode, store_dir: str) -> dict:
    """Atomically write one episode subdir; returns its manifest entry."""
    episode.validate()
    subdir = f"ep_{episode.episode_id}"
    tmp = os.path.join(store_dir, f".tmp-{subdir}")
    final = os.path.join(store_dir, subdir)
    if os.path.exists(tmp):
        shutil.rmtree(tmp)
    os.makedirs(os.path.join(tmp, "frames"))

    order, arrays, blob = _array_payload(episode)
    with open(os.path.join(tmp, "arrays.bin"), "wb") as fh:
        fh.write(blob)
    descriptor = {
        "order": order,
        "arrays": arrays,
        "checksum_sha256": hashlib.sha256(blob).hexdigest(),
    }
    with open(os.path.join(tmp, "arrays.json"), "w", encoding="utf-8") as fh:
        json.dump(descriptor, fh, indent=1)
    meta = {
        "episode_id": episode.episode_id,
        "instruction_text": episode.instruction_text,
        "quality": episode.quality,
        "provenance": episode.provenance,
        "n_frames": episode.n_frames,
        "split": split_of(episode.episode_id),
    }
    with open(os.path.join(tmp, "meta.json"), "w", encoding="utf-8") as fh:
        json.dump(meta, fh, indent=1)
    for i, frame in enumerate(episode.frames):
        Image.fromarray(frame).save(os.path.join(tmp, "frames", f"{i:06d}.png"))

    if os.path.exists(final):
        shutil.rmtree(final)
    os.replace(tmp, final)
    return {
        "id": episode.episode_id,
        "subdir": subdir,
        "n_frames": episode.n_frames,
        "quality": episode.quality,
        "source_id": episode.provenance.get("source_id", ""),
        "instruction": episode.instruction_text,
        "duration_s": episode.duration_s,
        "split": meta["split"],
    }


def write_store(episodes: Sequence[UnifiedEpisode], store_dir: str,
                config_hash: str = "") -> Manifest:
    """Write episodes then the manifest. Write-then-read is identity."""
    os.makedirs(store_dir, exist_ok=True)
    entries = [write_episode(ep, store_dir) for ep in episodes]
    stats = {
        "count_high": sum(e["quality"] == QUALITY_HIGH for e in entries),
        "count_low": sum(e["quality"] == QUALITY_LOW for e in entries),
        "count_actionless": sum(e["quality"] == QUALITY_ACTIONLESS for e in entries),
        "total_duration_s": float(sum(e["duration_s"] for e in entries)),
    }
    manifest = Manifest(
        version=STORE_VERSION, config_hash=config_hash, episodes=entries, stats=stats
    )
    tmp = os.path.join(store_dir, ".tmp-manifest.json")
    with open(tmp, "w", encoding="utf-8") as fh:
        json.dump(manifest.to_json(), fh, indent=1)
    os.replace(tmp, os.path.join(store_dir, "manifest.json"))
    return manifest


def read_manifest(store_dir: str) -> Manifest:
    path = os.path.join(store_dir, "manifest.json")
    if not os.path.isfile(path):
        raise ConfigError(f"no manifest.json in {store_dir!r}; not a store")
    with open(path, "r", encoding="utf-8") as fh:
        manifest = Manifest.from_json(json.load(fh))
    if manifest.version != STORE_VERSION:
        raise MigrationError(
            f"store version {manifest.version} needs migration (supported: {STORE_VERSION})"
        )
    return manifest


def load_episode(store_dir: str, entry: dict) -> UnifiedEpisode:
    epdir = os.path.join(store_dir, entry["subdir"])
    with open(os.path.join(epdir, "meta.json"), "r", encoding="utf-8") as fh:
        meta = json.load(fh)
    with open(os.path.join(epdir, "arrays.json"), "r", encoding="utf-8") as fh:
        descriptor = json.load(fh)
    with open(os.path.join(epdir, "arrays.bin"), "rb") as fh:
        blob = fh.read()
    if hashlib.sha256(blob).hexdigest() != descriptor["checksum_sha256"]:
        raise CorruptionError(f"checksum mismatch in episode {meta['episode_id']!r}")

    def pull(name):
        if name not in descriptor["arrays"]:
            return None
        spec = descriptor["arrays"][name]
        count = int(np.prod(spec["shape"])) if spec["shape"] else 1
        arr = np.frombuffer(
            blob, dtype=spec["dtype"], count=count, offset=spec["offset"]
        )
        return arr.reshape(spec["shape"]).copy()

    n = int(meta["n_frames"])
    frames = np.stack(
        [
            np.asarray(
                Image.open(os.path.join(epdir, "frames", f"{i:06d}.png")).convert("RGB"),
                dtype=np.uint8,
            )
            for i in range(n)
        ]
    )
    return UnifiedEpisode(
        episode_id=meta["episode_id"],
        frames=frames,
        wrist_pose=pull("wrist_pose"),
        grip=pull("grip"),
        actions=pull("actions"),
        instruction_text=meta["instruction_text"],
        quality=meta["quality"],
        provenance=meta["provenance"],
    )


def read_store(store_dir: str) -> Iterator[UnifiedEpisode]:
    """Yield episodes in manifest order, verifying checksums."""
    manifest = read_manifest(store_dir)
    for entry in manifest.episodes:
        yield load_episode(store_dir, entry)


class StoreReader:
    """Random-access view over an immutable store, with an episode cache."""

    def __init__(self, store_dir: str, cache_episodes: int = 256):
        self.store_dir = store_dir
        self.manifest = read_manifest(store_dir)
        self.by_id = {e["id"]: e for e in self.manifest.episodes}
        self._cache: dict[str, UnifiedEpisode] = {}
        self._cache_cap = cache_episodes

    def ids(self, split: Optional[str] = None, qualities=None) -> list[str]:
        out = []
        for e in self.manifest.episodes:
            if split is not None and e["split"] != split:
                continue
            if qualities is not None and e["quality"] not in qualities:
                continue
            out.append(e["id"])
        return out

    def entry(self, episode_id: str) -> dict:
        return self.by_id[episode_id]

    def episode(self, episode_id: str) -> UnifiedEpisode:
        if episode_id in self._cache:
            return self._cache[episode_id]
        ep = load_episode(self.store_dir, self.by_id[episode_id])
        if len(self._cache) >= self._cache_cap:
            self._cache.pop(next(iter(self._cache)))
        self._cache[episode_id] = ep
        return ep
