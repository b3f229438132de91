"""Heterogeneous source trajectory ingestion.

Two synthetic legacy formats exercise every pipeline stage:

* Format A: JSON-lines, header object first, world-frame poses at the
  source's native rate, gripper as an 8-bit raw value.
* Format B: RFC-4180 CSV plus a JSON sidecar; poses live in a per-episode
  camera frame and need reprojection through the sidecar's `cam_offset`
  before the per-source registry offset applies.

The stages are separate, contract-tested operations: parse -> align ->
resample to 10 Hz -> quality annotation -> instruction normalization.
`build_unified` assembles the canonical episode consumed by the store.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
from PIL import Image

from .errors import (
    AssetError,
    ConfigError,
    LengthError,
    NormalizationError,
    OrderingError,
    ParseError,
)
from .store import QUALITY_ACTIONLESS, QUALITY_HIGH, QUALITY_LOW, UnifiedEpisode
from .transforms import Rigid2D, wrap_angle

TARGET_RATE_HZ = 10.0

# Per-source registry offsets mapping each synthetic source's end-effector
# convention onto the canonical wrist frame.
REGISTRY_OFFSETS = {
    "synthA": Rigid2D(angle=0.3, tx=0.1, ty=-0.2),
    "synthB": Rigid2D(angle=-0.7, tx=0.05, ty=0.4),
}


@dataclass(frozen=True)
class IngestConfig:
    """Quality-annotation knobs; defaults calibrated on a 400-episode set
    of expert/noisy worldsim episodes and then frozen."""

    idle_eps: float = 1e-4          # per-axis |delta| below this counts as idle
    idle_frac_threshold: float = 0.15
    jerk_threshold: float = 0.020   # mean L2 of position second differences
    target_rate_hz: float = TARGET_RATE_HZ

    def to_json(self) -> dict:
        return {
            "idle_eps": self.idle_eps,
            "idle_frac_threshold": self.idle_frac_threshold,
            "jerk_threshold": self.jerk_threshold,
            "target_rate_hz": self.target_rate_hz,
        }


@dataclass(frozen=True)
class ParsedTrajectory:
    source_id: str
    fmt: str                     # "a" or "b"
    rate_hz: float
    timestamps: np.ndarray       # (N,) seconds, starting at 0
    poses: Optional[np.ndarray]  # (N, 3) [x, y, theta]; None when actionless
    grip: Optional[np.ndarray]   # (N,) in [0, 1]; None when actionless
    frames: np.ndarray           # (N, H, W, 3) uint8
    instruction_raw: str
    cam_offset: Optional[Rigid2D] = None  # format B only
    aligned: bool = False
    success_meta: Optional[bool] = None

    @property
    def actionless(self) -> bool:
        return self.poses is None


def _load_frame(path: str, line: int) -> np.ndarray:
    if not os.path.isfile(path):
        raise AssetError(f"missing image file {path!r} (record {line})")
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.uint8)


# --- parsing ----------------------------------------------------------------

def _parse_format_a(path: str) -> ParsedTrajectory:
    base = os.path.dirname(os.path.abspath(path))
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise ParseError("empty file", line=1)

    def loads(text, lineno):
        try:
            return json.loads(text)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid JSON: {e.msg}", line=lineno) from e

    header = loads(lines[0], 1)
    for key in ("rate_hz", "instruction_raw", "source_id"):
        if key not in header:
            raise ParseError(f"header missing {key!r}", line=1)
    rate = float(header["rate_hz"])
    if rate <= 0:
        raise ParseError(f"rate_hz must be positive, got {rate}", line=1)
    actionless = bool(header.get("actionless", False))

    ts, poses, grips, frames = [], [], [], []
    prev_t = None
    for lineno, text in enumerate(lines[1:], start=2):
        if not text.strip():
            continue
        rec = loads(text, lineno)
        if "t" not in rec or "img_path" not in rec:
            raise ParseError("record missing 't' or 'img_path'", line=lineno)
        t = float(rec["t"])
        if prev_t is not None and t <= prev_t:
            raise OrderingError(f"timestamps not strictly increasing: {t}", line=lineno)
        prev_t = t
        ts.append(t)
        if actionless:
            if "ee_world" in rec or "grip_raw" in rec:
                raise ParseError("actionless file carries pose fields", line=lineno)
        else:
            if "ee_world" not in rec or "grip_raw" not in rec:
                raise ParseError("record missing 'ee_world' or 'grip_raw'", line=lineno)
            ee = rec["ee_world"]
            if not (isinstance(ee, list) and len(ee) == 3):
                raise ParseError(f"ee_world must be [x, y, theta], got {ee!r}", line=lineno)
            graw = float(rec["grip_raw"])
            if not 0.0 <= graw <= 255.0:
                raise ParseError(f"grip_raw out of [0, 255]: {graw}", line=lineno)
            poses.append([float(v) for v in ee])
            grips.append(graw / 255.0)
        frames.append(_load_frame(os.path.join(base, rec["img_path"]), lineno))

    if not ts:
        raise ParseError("no step records", line=2)
    return ParsedTrajectory(
        source_id=str(header["source_id"]),
        fmt="a",
        rate_hz=rate,
        timestamps=np.asarray(ts, dtype=np.float64),
        poses=None if actionless else np.asarray(poses, dtype=np.float64),
        grip=None if actionless else np.asarray(grips, dtype=np.float64),
        frames=np.stack(frames),
        instruction_raw=str(header["instruction_raw"]),
    )


def _parse_format_b(path: str) -> ParsedTrajectory:
    sidecar_path = os.path.splitext(path)[0] + ".json"
    if not os.path.isfile(sidecar_path):
        raise ParseError(f"missing sidecar metadata {sidecar_path!r}")
    with open(sidecar_path, "r", encoding="utf-8") as fh:
        try:
            meta = json.load(fh)
        except json.JSONDecodeError as e:
            raise ParseError(f"invalid sidecar JSON: {e.msg}") from e
    for key in ("rate_hz", "cam_offset", "instruction_raw", "source_id"):
        if key not in meta:
            raise ParseError(f"sidecar missing {key!r}")
    rate = float(meta["rate_hz"])
    if rate <= 0:
        raise ParseError(f"rate_hz must be positive, got {rate}")
    cam = Rigid2D.from_json(meta["cam_offset"])

    base = os.path.dirname(os.path.abspath(path))
    expected = ["frame_idx", "x_cam", "y_cam", "theta_cam", "grip01", "img_file"]
    ts, poses, grips, frames = [], [], [], []
    with open(path, "r", encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty CSV", line=1) from None
        if header != expected:
            raise ParseError(f"bad CSV header {header!r}", line=1)
        for rowno, row in enumerate(reader, start=1):
            if len(row) != 6:
                raise ParseError(f"expected 6 columns, got {len(row)}", line=rowno + 1)
            try:
                idx = int(row[0])
                x, y, theta, g = (float(v) for v in row[1:5])
            except ValueError as e:
                raise ParseError(f"non-numeric field: {e}", line=rowno + 1) from e
            if idx != rowno - 1:
                raise OrderingError(
                    f"frame_idx must be contiguous from 0, got {idx}", line=rowno + 1
                )
            if not 0.0 <= g <= 1.0:
                raise ParseError(f"grip01 out of [0, 1]: {g}", line=rowno + 1)
            ts.append(idx / rate)
            poses.append([x, y, theta])
            grips.append(g)
            frames.append(_load_frame(os.path.join(base, row[5]), rowno + 1))
    if not ts:
        raise ParseError("no data rows", line=2)
    return ParsedTrajectory(
        source_id=str(meta["source_id"]),
        fmt="b",
        rate_hz=rate,
        timestamps=np.asarray(ts, dtype=np.float64),
        poses=np.asarray(poses, dtype=np.float64),
        grip=np.asarray(grips, dtype=np.float64),
        frames=np.stack(frames),
        instruction_raw=str(meta["instruction_raw"]),
        cam_offset=cam,
    )


def parse_source(path: str, fmt: str) -> ParsedTrajectory:
    """Parse one source file; total, with validated fields throughout."""
    fmt = fmt.lower()
    if fmt == "a":
        return _parse_format_a(path)
    if fmt == "b":
        return _parse_format_b(path)
    raise ValueError(f"unknown source format {fmt!r}")


# --- alignment ---------------------------------------------------------------

def align_frames(
    traj: ParsedTrajectory,
    offset: Optional[Rigid2D] = None,
    registry: Optional[dict[str, Rigid2D]] = None,
) -> ParsedTrajectory:
    """Express poses in the canonical wrist frame.

    offset o (registry[source_id] when not given explicitly) applies last:
    canon = o(cam_offset(pose)) for format B, o(pose) for format A.
    """
    if offset is None:
        registry = REGISTRY_OFFSETS if registry is None else registry
        if traj.source_id not in registry:
            raise ConfigError(f"no registered offset for source {traj.source_id!r}")
        offset = registry[traj.source_id]
    if traj.actionless:
        return replace(traj, aligned=True)
    total = offset.compose(traj.cam_offset) if traj.fmt == "b" and traj.cam_offset else offset
    return replace(traj, poses=total.apply(traj.poses), aligned=True)


# --- resampling ---------------------------------------------------------------

def _interp_angle(t_out, t_in, theta):
    idx = np.clip(np.searchsorted(t_in, t_out, side="right") - 1, 0, len(t_in) - 2)
    t0, t1 = t_in[idx], t_in[idx + 1]
    frac = np.where(t1 > t0, (t_out - t0) / np.where(t1 > t0, t1 - t0, 1.0), 0.0)
    frac = np.clip(frac, 0.0, 1.0)
    delta = wrap_angle(theta[idx + 1] - theta[idx])
    return wrap_angle(theta[idx] + frac * delta)


def _nearest_frame_indices(t_out, t_in):
    right = np.clip(np.searchsorted(t_in, t_out), 1, len(t_in) - 1)
    left = right - 1
    use_left = (t_out - t_in[left]) <= (t_in[right] - t_out)  # tie -> earlier
    return np.where(use_left, left, right)


def resample_10hz(traj: ParsedTrajectory) -> ParsedTrajectory:
    """Resample to the canonical 10 Hz grid.

    Positions and grip interpolate linearly, headings along the shortest
    arc, frames snap to the nearest native timestamp (ties earlier). The
    output spans floor(native duration * 10) / 10 seconds.
    """
    n = len(traj.timestamps)
    if n < 2:
        raise LengthError(f"need at least 2 steps to resample, got {n}")
    if traj.rate_hz < TARGET_RATE_HZ:
        raise ValueError(f"native rate {traj.rate_hz} below target {TARGET_RATE_HZ}")
    t_in = traj.timestamps - traj.timestamps[0]
    duration = float(t_in[-1])
    k_max = int(np.floor(duration * TARGET_RATE_HZ + 1e-9))
    t_out = np.arange(k_max + 1, dtype=np.float64) / TARGET_RATE_HZ

    frames = traj.frames[_nearest_frame_indices(t_out, t_in)]
    if traj.actionless:
        poses = grip = None
    else:
        poses = np.empty((len(t_out), 3), dtype=np.float64)
        poses[:, 0] = np.interp(t_out, t_in, traj.poses[:, 0])
        poses[:, 1] = np.interp(t_out, t_in, traj.poses[:, 1])
        poses[:, 2] = _interp_angle(t_out, t_in, traj.poses[:, 2])
        grip = np.interp(t_out, t_in, traj.grip)
    return replace(
        traj,
        rate_hz=TARGET_RATE_HZ,
        timestamps=t_out,
        poses=poses,
        grip=grip,
        frames=frames,
    )


# --- quality annotation --------------------------------------------------------

def annotate_quality(traj: ParsedTrajectory, config: IngestConfig = IngestConfig()) -> str:
    """Deterministic quality label from the aligned, resampled trajectory."""
    if traj.actionless:
        return QUALITY_ACTIONLESS
    deltas = np.diff(traj.poses[:, :2], axis=0)
    if len(deltas) == 0:
        return QUALITY_LOW
    idle_frac = float(np.mean(np.max(np.abs(deltas), axis=1) < config.idle_eps))
    if idle_frac > config.idle_frac_threshold:
        return QUALITY_LOW
    if len(deltas) >= 2:
        jerk = np.diff(deltas, axis=0)
        if float(np.mean(np.linalg.norm(jerk, axis=1))) > config.jerk_threshold:
            return QUALITY_LOW
    if traj.success_meta is False:
        return QUALITY_LOW
    return QUALITY_HIGH


# --- instruction normalization ---------------------------------------------------

# Authored first; normalize_instruction must match it. Canonical words map
# to themselves.
SYNONYMS = {
    "push": "push", "move": "push", "shift": "push", "slide": "push",
    "the": "the", "a": "the",
    "red": "red", "crimson": "red", "scarlet": "red",
    "blue": "blue", "navy": "blue", "azure": "blue",
    "yellow": "yellow", "gold": "yellow", "amber": "yellow",
    "purple": "purple", "violet": "purple", "lavender": "purple",
    "green": "green",
    "block": "block", "cube": "block", "square": "block", "brick": "block",
    "to": "to", "into": "to", "onto": "to", "toward": "to", "towards": "to",
    "zone": "zone", "area": "zone", "region": "zone",
}

CANONICAL_INSTRUCTIONS = tuple(
    f"push the {color} block to the green zone"
    for color in ("red", "blue", "yellow", "purple")
)


def normalize_instruction(raw: str) -> str:
    """Map free-form text into the closed canonical instruction set."""
    if not raw or not raw.strip():
        raise NormalizationError("empty instruction")
    tokens = raw.lower().replace(".", " ").replace(",", " ").replace("!", " ").split()
    mapped = []
    for tok in tokens:
        if tok not in SYNONYMS:
            raise NormalizationError(f"unmappable token {tok!r} in {raw!r}", token=tok)
        mapped.append(SYNONYMS[tok])
    text = " ".join(mapped)
    if text not in CANONICAL_INSTRUCTIONS:
        raise NormalizationError(f"no canonical rendering for {raw!r} -> {text!r}")
    return text


# --- unified episode assembly ------------------------------------------------

def build_unified(
    traj: ParsedTrajectory,
    episode_id: str,
    config: IngestConfig = IngestConfig(),
    native_rate_hz: Optional[float] = None,
) -> UnifiedEpisode:
    """Assemble the canonical episode from an aligned, 10 Hz trajectory."""
    if not traj.aligned:
        raise ValueError("trajectory must be aligned before building an episode")
    if traj.rate_hz != TARGET_RATE_HZ:
        raise ValueError("trajectory must be resampled to 10 Hz first")
    quality = annotate_quality(traj, config)
    if traj.actionless:
        pose = grip = actions = None
    else:
        pose = traj.poses.astype(np.float32)
        grip = np.clip(traj.grip, 0.0, 1.0).astype(np.float32)
        actions = np.empty((len(pose) - 1, 4), dtype=np.float32)
        actions[:, 0] = pose[1:, 0] - pose[:-1, 0]
        actions[:, 1] = pose[1:, 1] - pose[:-1, 1]
        actions[:, 2] = wrap_angle(
            pose[1:, 2].astype(np.float64) - pose[:-1, 2].astype(np.float64)
        ).astype(np.float32)
        actions[:, 3] = grip[1:] - grip[:-1]
    return UnifiedEpisode(
        episode_id=episode_id,
        frames=traj.frames,
        wrist_pose=pose,
        grip=grip,
        actions=actions,
        instruction_text=normalize_instruction(traj.instruction_raw),
        quality=quality,
        provenance={
            "source_id": traj.source_id,
            "native_rate_hz": float(native_rate_hz if native_rate_hz else traj.rate_hz),
            "format": traj.fmt,
        },
    )


def ingest_file(
    path: str,
    fmt: str,
    registry: Optional[dict[str, Rigid2D]] = None,
    config: IngestConfig = IngestConfig(),
    episode_id: Optional[str] = None,
) -> UnifiedEpisode:
    """parse -> align -> resample -> annotate -> normalize, one file."""
    traj = parse_source(path, fmt)
    native_rate = traj.rate_hz
    traj = align_frames(traj, registry=registry)
    traj = resample_10hz(traj)
    if episode_id is None:
        episode_id = os.path.splitext(os.path.basename(path))[0]
    return build_unified(traj, episode_id, config, native_rate_hz=native_rate)
