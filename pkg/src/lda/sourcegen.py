"""Serialize worldsim episodes into the legacy source formats.

Public data generation always goes through these files so the ingestion
path is exercised end to end: poses are stored in each source's own frame
(the exact inverse of the registry/camera offsets the ingest stage will
apply), grippers are quantized to the format's convention, and raw
instruction strings use randomized synonyms that `normalize_instruction`
must map back to canonical form.
"""

from __future__ import annotations

import json
import os
from typing import Optional

import numpy as np
from PIL import Image

from . import worldsim
from .ingest import REGISTRY_OFFSETS
from .rng import STREAM_NOISE, philox
from .transforms import Rigid2D
from .worldsim import ControllerQuality, RawEpisode

_VARIANTS = {
    "push": ("push", "move", "shift", "slide"),
    "block": ("block", "cube", "square", "brick"),
    "to": ("to", "into", "onto"),
    "zone": ("zone", "area", "region"),
    "red": ("red", "crimson", "scarlet"),
    "blue": ("blue", "navy", "azure"),
    "yellow": ("yellow", "gold", "amber"),
    "purple": ("purple", "violet", "lavender"),
}


def raw_instruction_variant(instruction: worldsim.Instruction,
                            rng: np.random.Generator) -> str:
    """A messy-but-normalizable rendering of the instruction."""
    words = []
    for word in instruction.text.split():
        options = _VARIANTS.get(word, (word,))
        pick = options[int(rng.integers(len(options)))]
        if rng.uniform() < 0.15:
            pick = pick.upper()
        elif rng.uniform() < 0.15:
            pick = pick.capitalize()
        words.append(pick)
    sep = "  " if rng.uniform() < 0.2 else " "
    text = sep.join(words)
    if rng.uniform() < 0.3:
        text = " " + text + " "
    return text


def _canonical_poses(episode: RawEpisode) -> np.ndarray:
    poses = np.zeros((len(episode.states), 3), dtype=np.float64)
    for i, s in enumerate(episode.states):
        poses[i, 0], poses[i, 1] = s.agent_pos
    return poses


def _grips(episode: RawEpisode) -> np.ndarray:
    return np.array([s.agent_grip for s in episode.states], dtype=np.float64)


def _save_frames(episode: RawEpisode, out_dir: str, name: str) -> list[str]:
    frames_dir = os.path.join(out_dir, f"{name}_frames")
    os.makedirs(frames_dir, exist_ok=True)
    rels = []
    for i, img in enumerate(episode.images):
        rel = os.path.join(f"{name}_frames", f"{i:06d}.png")
        Image.fromarray(img).save(os.path.join(out_dir, rel))
        rels.append(rel)
    return rels


def write_format_a(
    episode: RawEpisode,
    out_dir: str,
    name: str,
    rng: Optional[np.random.Generator] = None,
    actionless: bool = False,
) -> str:
    """JSON-lines file; world-frame poses in source A's own convention."""
    rng = rng or philox(np.uint64(episode.seed), np.uint64(STREAM_NOISE))
    os.makedirs(out_dir, exist_ok=True)
    rels = _save_frames(episode, out_dir, name)
    header = {
        "rate_hz": episode.native_rate_hz,
        "instruction_raw": raw_instruction_variant(episode.instruction, rng),
        "source_id": "synthA",
    }
    if actionless:
        header["actionless"] = True
    else:
        stored = REGISTRY_OFFSETS["synthA"].inverse().apply(_canonical_poses(episode))
        grip_raw = np.round(_grips(episode) * 255.0).astype(int)
    path = os.path.join(out_dir, f"{name}.jsonl")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(json.dumps(header) + "\n")
        for i, rel in enumerate(rels):
            rec = {"t": i / episode.native_rate_hz, "img_path": rel}
            if not actionless:
                rec["ee_world"] = [float(v) for v in stored[i]]
                rec["grip_raw"] = int(grip_raw[i])
            fh.write(json.dumps(rec) + "\n")
    return path


def write_format_b(
    episode: RawEpisode,
    out_dir: str,
    name: str,
    rng: Optional[np.random.Generator] = None,
) -> str:
    """CSV + JSON sidecar; poses in a per-episode moving camera frame."""
    rng = rng or philox(np.uint64(episode.seed), np.uint64(STREAM_NOISE))
    os.makedirs(out_dir, exist_ok=True)
    rels = _save_frames(episode, out_dir, name)
    instruction_raw = raw_instruction_variant(episode.instruction, rng)
    cam = Rigid2D(
        angle=float(rng.uniform(-np.pi, np.pi)),
        tx=float(rng.uniform(-0.5, 0.5)),
        ty=float(rng.uniform(-0.5, 0.5)),
    )
    # canonical = offset_B(cam(stored))  =>  stored = cam^-1(offset_B^-1(canonical))
    stored = cam.inverse().apply(
        REGISTRY_OFFSETS["synthB"].inverse().apply(_canonical_poses(episode))
    )
    grips = _grips(episode)

    path = os.path.join(out_dir, f"{name}.csv")
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("frame_idx,x_cam,y_cam,theta_cam,grip01,img_file\n")
        for i, rel in enumerate(rels):
            fh.write(
                f"{i},{float(stored[i, 0])!r},{float(stored[i, 1])!r},"
                f"{float(stored[i, 2])!r},{float(grips[i])!r},{rel}\n"
            )
    sidecar = {
        "rate_hz": episode.native_rate_hz,
        "cam_offset": cam.to_json(),
        "instruction_raw": instruction_raw,
        "source_id": "synthB",
    }
    with open(os.path.join(out_dir, f"{name}.json"), "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=1)
    return path


def write_offsets(out_dir: str) -> str:
    os.makedirs(out_dir, exist_ok=True)
    path = os.path.join(out_dir, "offsets.json")
    with open(path, "w", encoding="utf-8") as fh:
        json.dump({k: v.to_json() for k, v in REGISTRY_OFFSETS.items()}, fh, indent=1)
    return path


def generate_sources(
    out_dir: str,
    seeds: range,
    quality: str,
    rate_hz: float = 30.0,
    fmt: str = "a",
    max_steps: int = 400,
) -> list[str]:
    """Generate episodes and serialize them as source files.

    quality 'mixed' uses the default pretraining mixture: 60% expert,
    30% noisy, 10% random written action-free. 'random' episodes are
    always written action-free (their role is visual-only supervision).
    """
    os.makedirs(out_dir, exist_ok=True)
    write_offsets(out_dir)
    paths = []
    for seed in seeds:
        if quality == "mixed":
            r = seed % 10
            q = (
                ControllerQuality.EXPERT
                if r < 6
                else ControllerQuality.NOISY
                if r < 9
                else ControllerQuality.RANDOM
            )
        else:
            q = ControllerQuality(quality)
        episode = worldsim.generate_episode(
            seed=seed, quality=q, native_rate_hz=rate_hz, max_steps=max_steps
        )
        name = f"{q.value}_{seed:05d}"
        actionless = q is ControllerQuality.RANDOM
        if fmt == "a" or actionless:  # format B has no action-free variant
            paths.append(
                write_format_a(episode, out_dir, name, actionless=actionless)
            )
        else:
            paths.append(write_format_b(episode, out_dir, name))
    return paths
