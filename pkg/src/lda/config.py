"""Model configuration and task-mode vocabulary."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from enum import IntEnum

from .ingest import CANONICAL_INSTRUCTIONS
from .latent import ENTANGLED, STRUCTURED, EncoderSpec


class TaskMode(IntEnum):
    POLICY = 0
    FORWARD_DYN = 1
    INVERSE_DYN = 2
    VISUAL_FORECAST = 3


N_TASK_MODES = 4

# closed instruction vocabulary (the VLM stand-in's token table)
VOCAB = tuple(sorted({w for text in CANONICAL_INSTRUCTIONS for w in text.split()}))
INSTR_LEN = max(len(t.split()) for t in CANONICAL_INSTRUCTIONS)


def tokenize_instruction(text: str) -> list[int]:
    ids = []
    for word in text.split():
        if word not in VOCAB:
            raise ValueError(f"word {word!r} not in the closed instruction vocabulary")
        ids.append(VOCAB.index(word))
    if len(ids) != INSTR_LEN:
        raise ValueError(f"instruction must have {INSTR_LEN} words, got {len(ids)}")
    return ids


def future_frame_offsets(chunk_len: int, vision_stride: int) -> list[int]:
    """Step offsets of the future frames relative to the window start.

    Frames sit every `vision_stride` action steps strictly inside the chunk,
    plus the frame at the chunk end; with the defaults (16, 3) this is
    (3, 6, 9, 12, 15, 16).
    """
    offsets = [s for s in range(vision_stride, chunk_len, vision_stride)]
    offsets.append(chunk_len)
    return offsets


@dataclass(frozen=True)
class ModelConfig:
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    action_dim: int = 4           # dx, dy, dtheta (reserved zero), dgrip
    chunk_len: int = 16           # K
    history_len: int = 2
    vision_stride: int = 3        # action steps per future frame
    patch_count: int = 64         # P per frame
    latent_dim: int = 32          # D
    ffn_mult: int = 4
    flow_steps: int = 10
    encoder: EncoderSpec = field(default_factory=lambda: EncoderSpec(STRUCTURED))
    param_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError("d_model must be divisible by n_heads")
        if self.d_model % 2:
            raise ValueError("d_model must be even for the sinusoidal embedding")
        for name in ("d_model", "n_layers", "n_heads", "action_dim", "chunk_len",
                     "history_len", "vision_stride", "patch_count", "latent_dim"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.encoder.dim != self.latent_dim:
            raise ValueError("encoder dim must match latent_dim")

    @property
    def future_offsets(self) -> tuple[int, ...]:
        return tuple(future_frame_offsets(self.chunk_len, self.vision_stride))

    @property
    def n_future_frames(self) -> int:
        return len(self.future_offsets)

    @property
    def vocab_size(self) -> int:
        return len(VOCAB)

    @property
    def instr_len(self) -> int:
        return INSTR_LEN

    @property
    def n_tokens(self) -> int:
        return (
            self.history_len * self.patch_count
            + self.history_len
            + self.chunk_len
            + self.n_future_frames * self.patch_count
        )

    def to_json(self) -> dict:
        obj = {
            "d_model": self.d_model,
            "n_layers": self.n_layers,
            "n_heads": self.n_heads,
            "action_dim": self.action_dim,
            "chunk_len": self.chunk_len,
            "history_len": self.history_len,
            "vision_stride": self.vision_stride,
            "patch_count": self.patch_count,
            "latent_dim": self.latent_dim,
            "ffn_mult": self.ffn_mult,
            "flow_steps": self.flow_steps,
            "encoder": self.encoder.to_json(),
            "param_seed": self.param_seed,
        }
        return obj

    @staticmethod
    def from_json(obj: dict) -> "ModelConfig":
        obj = dict(obj)
        obj["encoder"] = EncoderSpec.from_json(obj["encoder"])
        return ModelConfig(**obj)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_json(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]

    def with_encoder(self, spec: EncoderSpec) -> "ModelConfig":
        return replace(self, encoder=spec, latent_dim=spec.dim)


# Named configurations used throughout evaluation and the demos.
def small_config(**overrides) -> ModelConfig:
    return ModelConfig(**overrides)


def tiny_config(**overrides) -> ModelConfig:
    # 2 heads: per-head score matrices are T x T regardless of head width,
    # so fewer heads directly cuts the softmax/attention memory traffic
    # that dominates CPU step time
    base = dict(d_model=64, n_layers=2, n_heads=2, vision_stride=8)
    base.update(overrides)
    return ModelConfig(**base)
