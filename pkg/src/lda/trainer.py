"""Flow-matching co-training with role-aware data routing.

Each quality stratum is only ever routed to the objectives its supervision
can support (HIGH: everything; LOW: dynamics and forecasting; ACTIONLESS:
forecasting only). Batches mix task modes at sample granularity; the two
loss terms are selectively activated per sample and masked terms
contribute exactly zero gradient.

Sample order is decided entirely by one seeded Philox stream, and each
sample's noise comes from its own counter-derived stream, so materializing
with any number of workers reproduces the identical batch sequence.
"""

from __future__ import annotations

import csv
import json
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .config import ModelConfig, TaskMode, tokenize_instruction
from .errors import ConfigError, NumericalFailure, WindowError
from .latent import Encoder
from .mmdit import MMDiT, TokenBatch, init_params, save_checkpoint
from .rng import STREAM_NOISE, STREAM_SAMPLER, philox
from .store import (
    QUALITY_ACTIONLESS,
    QUALITY_HIGH,
    QUALITY_LOW,
    StoreReader,
    UnifiedEpisode,
)

# --- routing -------------------------------------------------------------------

DEFAULT_ROUTE = {
    QUALITY_HIGH: (TaskMode.POLICY, TaskMode.FORWARD_DYN, TaskMode.INVERSE_DYN,
                   TaskMode.VISUAL_FORECAST),
    QUALITY_LOW: (TaskMode.FORWARD_DYN, TaskMode.INVERSE_DYN, TaskMode.VISUAL_FORECAST),
    QUALITY_ACTIONLESS: (TaskMode.VISUAL_FORECAST,),
}

OBJECTIVES = {
    "policy": (TaskMode.POLICY,),
    "policy_vf": (TaskMode.POLICY, TaskMode.VISUAL_FORECAST),
    "policy_dyn": (TaskMode.POLICY, TaskMode.FORWARD_DYN, TaskMode.INVERSE_DYN),
    "full": (TaskMode.POLICY, TaskMode.FORWARD_DYN, TaskMode.INVERSE_DYN,
             TaskMode.VISUAL_FORECAST),
}

_ACTION_MODES = {TaskMode.POLICY, TaskMode.FORWARD_DYN, TaskMode.INVERSE_DYN}


@dataclass(frozen=True)
class RoutePolicy:
    """quality label -> task modes its supervision may train."""

    table: dict = field(default_factory=lambda: dict(DEFAULT_ROUTE))

    def __post_init__(self):
        for modes in (self.table.get(QUALITY_ACTIONLESS) or ()):
            if modes in _ACTION_MODES:
                raise ConfigError(
                    "actionless data cannot be routed to an action-touching mode"
                )

    def allowed(self, quality: str) -> tuple[TaskMode, ...]:
        return tuple(self.table.get(quality, ()))

    @staticmethod
    def default() -> "RoutePolicy":
        return RoutePolicy()

    @staticmethod
    def with_low_as_policy() -> "RoutePolicy":
        """The naive-BC override: LOW-quality actions wrongly fed to POLICY."""
        table = dict(DEFAULT_ROUTE)
        table[QUALITY_LOW] = (TaskMode.POLICY,) + DEFAULT_ROUTE[QUALITY_LOW]
        return RoutePolicy(table)

    def to_json(self) -> dict:
        return {q: [m.name for m in modes] for q, modes in self.table.items()}

    @staticmethod
    def from_json(obj: dict) -> "RoutePolicy":
        return RoutePolicy(
            {q: tuple(TaskMode[name] for name in names) for q, names in obj.items()}
        )


# --- normalization -----------------------------------------------------------------

@dataclass
class Normalizer:
    """Per-channel scales mapping store units into the noise's unit range.

    Fit once per (store, encoder) on the training split and frozen into the
    checkpoint; sampling inverts it before anything touches the env.
    """

    action_scale: np.ndarray   # (A,)
    latent_mean: np.ndarray    # (D,)
    latent_scale: np.ndarray   # (D,)

    def norm_actions(self, a):
        return (a / self.action_scale).astype(np.float32)

    def denorm_actions(self, a):
        return a * self.action_scale

    def norm_latents(self, z):
        return ((z - self.latent_mean) / self.latent_scale).astype(np.float32)

    def denorm_latents(self, z):
        return z * self.latent_scale + self.latent_mean

    def to_json(self) -> dict:
        return {
            "action_scale": self.action_scale.tolist(),
            "latent_mean": self.latent_mean.tolist(),
            "latent_scale": self.latent_scale.tolist(),
        }

    @staticmethod
    def from_json(obj: dict) -> "Normalizer":
        return Normalizer(
            action_scale=np.asarray(obj["action_scale"], dtype=np.float32),
            latent_mean=np.asarray(obj["latent_mean"], dtype=np.float32),
            latent_scale=np.asarray(obj["latent_scale"], dtype=np.float32),
        )

    @staticmethod
    def identity(action_dim: int, latent_dim: int) -> "Normalizer":
        return Normalizer(
            np.ones(action_dim, np.float32),
            np.zeros(latent_dim, np.float32),
            np.ones(latent_dim, np.float32),
        )


def fit_normalizer(
    reader: StoreReader,
    encoder: Encoder,
    config: ModelConfig,
    max_episodes: int = 64,
    scale_floor: float = 1e-3,
) -> Normalizer:
    """Deterministic stats over the training split (sorted episode ids)."""
    act_sq = np.zeros(config.action_dim, dtype=np.float64)
    act_n = 0
    lat_sum = np.zeros(config.latent_dim, dtype=np.float64)
    lat_sq = np.zeros(config.latent_dim, dtype=np.float64)
    lat_n = 0
    train_ids = sorted(reader.ids(split="train"))
    for eid in train_ids[:max_episodes]:
        ep = reader.episode(eid)
        if ep.actions is not None:
            a = ep.actions.astype(np.float64)
            act_sq += (a * a).sum(axis=0)
            act_n += len(a)
        z = episode_latents(ep, encoder).astype(np.float64).reshape(-1, config.latent_dim)
        lat_sum += z.sum(axis=0)
        lat_sq += (z * z).sum(axis=0)
        lat_n += len(z)
    if act_n == 0 or lat_n == 0:
        raise ConfigError("cannot fit a normalizer: no actions or no frames in train split")
    action_scale = np.maximum(np.sqrt(act_sq / act_n), scale_floor)
    mean = lat_sum / lat_n
    var = np.maximum(lat_sq / lat_n - mean**2, 0.0)
    latent_scale = np.maximum(np.sqrt(var), scale_floor)
    return Normalizer(
        action_scale.astype(np.float32),
        mean.astype(np.float32),
        latent_scale.astype(np.float32),
    )


# --- latent caching ------------------------------------------------------------------

class LatentCache:
    """Per-episode frame latents, keyed by (episode_id, encoder fingerprint)."""

    def __init__(self, encoder: Encoder, capacity: int = 512):
        self.encoder = encoder
        self.capacity = capacity
        self._data: dict[str, np.ndarray] = {}

    def get(self, ep: UnifiedEpisode) -> np.ndarray:
        key = ep.episode_id
        hit = self._data.get(key)
        if hit is None:
            hit = self.encoder.encode_batch(ep.frames)
            if len(self._data) >= self.capacity:
                self._data.pop(next(iter(self._data)))
            self._data[key] = hit
        return hit


def episode_latents(ep: UnifiedEpisode, encoder: Encoder) -> np.ndarray:
    return encoder.encode_batch(ep.frames)


# --- stream building -----------------------------------------------------------------

@dataclass
class StreamSkeleton:
    """One training window before noising; raw store units."""

    episode_id: str
    start: int
    hist_latents: np.ndarray           # (hist, P, D)
    hist_actions: Optional[np.ndarray] # (hist, A) or None (actionless)
    chunk: Optional[np.ndarray]        # (K, A) or None (actionless)
    future_latents: np.ndarray         # (F, P, D)
    instr_ids: np.ndarray              # (L,)


def n_valid_starts(n_frames: int, config: ModelConfig) -> int:
    """Windows need history_len steps of context and K steps of horizon."""
    lo = config.history_len
    hi = (n_frames - 1) - config.chunk_len  # inclusive
    return max(0, hi - lo + 1)


def build_streams(
    episode: UnifiedEpisode,
    start: int,
    config: ModelConfig,
    encoder: Encoder,
    latents: Optional[np.ndarray] = None,
) -> StreamSkeleton:
    """Dual-rate window: K actions at every step, future frames at the
    stride layout (offsets s*stride < K, plus the chunk-end frame), history
    = frames at start-1 and start with the actions that led to them."""
    K, hist = config.chunk_len, config.history_len
    n = episode.n_frames
    if start < hist or start + K > n - 1:
        raise WindowError(
            f"window start {start} invalid for episode of {n} frames "
            f"(need start >= {hist}, start + {K} <= {n - 1})"
        )
    if latents is None:
        latents = episode_latents(episode, encoder)
    hist_idx = np.arange(start - hist + 1, start + 1)
    future_idx = start + np.asarray(config.future_offsets)
    if episode.actionless:
        hist_actions = chunk = None
    else:
        actions = episode.actions
        hist_actions = actions[start - hist : start].astype(np.float32)
        chunk = actions[start : start + K].astype(np.float32)
    return StreamSkeleton(
        episode_id=episode.episode_id,
        start=start,
        hist_latents=latents[hist_idx],
        hist_actions=hist_actions,
        chunk=chunk,
        future_latents=latents[future_idx],
        instr_ids=np.asarray(tokenize_instruction(episode.instruction_text)),
    )


# --- noising --------------------------------------------------------------------------

_TAU_RULES = {
    # (tau_a spec, tau_o spec): "u" uniform, 0.0 clean, 1.0 register
    TaskMode.POLICY: ("u", 1.0),
    TaskMode.FORWARD_DYN: (0.0, "u"),
    TaskMode.INVERSE_DYN: ("u", 0.0),
    TaskMode.VISUAL_FORECAST: (1.0, "u"),
}


@dataclass
class TrainSample:
    """Noised window for one task mode, in normalized units."""

    mode: TaskMode
    quality: str
    hist_latents: np.ndarray
    hist_actions: np.ndarray            # zeros when absent
    hist_actions_present: bool
    actions_in: np.ndarray              # noisy/clean chunk; zeros when registered
    actions_present: bool
    latents_in: np.ndarray              # noisy/clean futures; zeros when registered
    latents_present: bool
    tau_a: float
    tau_o: float
    target_actions: np.ndarray          # eps - x, zeros when inactive
    target_latents: np.ndarray
    action_active: bool
    vision_active: bool
    instr_ids: np.ndarray


def make_noisy(
    skeleton: StreamSkeleton,
    mode: TaskMode,
    rng: np.random.Generator,
    normalizer: Normalizer,
    config: ModelConfig,
    quality: str = QUALITY_HIGH,
) -> TrainSample:
    """Linear interpolation x_tau = (1 - tau) x + tau eps per modality;
    clean conditioning pins tau = 0, registered modalities pin tau = 1."""
    K, A = config.chunk_len, config.action_dim
    F, P, D = config.n_future_frames, config.patch_count, config.latent_dim
    rule_a, rule_o = _TAU_RULES[mode]
    tau_a = float(rng.uniform()) if rule_a == "u" else float(rule_a)
    tau_o = float(rng.uniform()) if rule_o == "u" else float(rule_o)

    hist_lat = normalizer.norm_latents(skeleton.hist_latents)
    if skeleton.hist_actions is None:
        hist_act, hist_present = np.zeros((config.history_len, A), np.float32), False
    else:
        hist_act, hist_present = normalizer.norm_actions(skeleton.hist_actions), True

    actions_present = mode is not TaskMode.VISUAL_FORECAST
    action_active = mode in (TaskMode.POLICY, TaskMode.INVERSE_DYN)
    target_a = np.zeros((K, A), np.float32)
    actions_in = np.zeros((K, A), np.float32)
    if actions_present:
        if skeleton.chunk is None:
            raise ConfigError(f"mode {mode.name} needs actions but window is actionless")
        x = normalizer.norm_actions(skeleton.chunk)
        if tau_a > 0.0:
            eps = rng.standard_normal((K, A)).astype(np.float32)
            actions_in = (1.0 - tau_a) * x + tau_a * eps
            target_a = eps - x
        else:
            actions_in = x

    vision_present = mode is not TaskMode.POLICY
    vision_active = mode in (TaskMode.FORWARD_DYN, TaskMode.VISUAL_FORECAST)
    target_o = np.zeros((F, P, D), np.float32)
    latents_in = np.zeros((F, P, D), np.float32)
    if vision_present:
        x = normalizer.norm_latents(skeleton.future_latents)
        if tau_o > 0.0:
            eps = rng.standard_normal((F, P, D)).astype(np.float32)
            latents_in = (1.0 - tau_o) * x + tau_o * eps
            target_o = eps - x
        else:
            latents_in = x

    return TrainSample(
        mode=mode, quality=quality,
        hist_latents=hist_lat, hist_actions=hist_act,
        hist_actions_present=hist_present,
        actions_in=actions_in, actions_present=actions_present,
        latents_in=latents_in, latents_present=vision_present,
        tau_a=tau_a, tau_o=tau_o,
        target_actions=target_a, target_latents=target_o,
        action_active=action_active, vision_active=vision_active,
        instr_ids=skeleton.instr_ids,
    )


# --- batch composition -----------------------------------------------------------------

@dataclass(frozen=True)
class SampleDescriptor:
    episode_id: str
    start: int
    mode: TaskMode
    quality: str
    noise_key: int


@dataclass
class TrainBatch:
    tokens: TokenBatch
    target_actions: np.ndarray   # (B, K, A)
    target_latents: np.ndarray   # (B, F, P, D)
    action_active: np.ndarray    # (B,) bool
    vision_active: np.ndarray    # (B,) bool
    descriptors: list


class WindowIndex:
    """Sampling index over a store split: strata by quality, weighted by
    duration share; episodes uniform within a stratum."""

    def __init__(self, reader: StoreReader, config: ModelConfig, split: str = "train"):
        self.entries = {}
        self.durations = {}
        for e in reader.manifest.episodes:
            if e["split"] != split:
                continue
            if n_valid_starts(e["n_frames"], config) <= 0:
                continue
            self.entries.setdefault(e["quality"], []).append(e)
            self.durations[e["quality"]] = (
                self.durations.get(e["quality"], 0.0) + e["duration_s"]
            )
        self.config = config

    def strata(self, route: RoutePolicy, objective: Sequence[TaskMode]):
        out = []
        enabled = set(objective)
        for quality, eps in sorted(self.entries.items()):
            modes = tuple(m for m in route.allowed(quality) if m in enabled)
            if modes:
                out.append((quality, modes, self.durations[quality]))
        if not out:
            have = {q: [m.name for m in route.allowed(q)] for q in self.entries}
            raise ConfigError(
                f"no (quality, mode) pool is compatible: store has {sorted(self.entries)}, "
                f"route allows {have}, objective enables {[m.name for m in enabled]}"
            )
        return out


def compose_descriptors(
    index: WindowIndex,
    route: RoutePolicy,
    objective: Sequence[TaskMode],
    batch_size: int,
    rng: np.random.Generator,
    noise_base: int = 0,
) -> list[SampleDescriptor]:
    strata = index.strata(route, objective)
    weights = np.array([d for _, _, d in strata], dtype=np.float64)
    weights /= weights.sum()
    out = []
    for i in range(batch_size):
        si = int(rng.choice(len(strata), p=weights))
        quality, modes, _ = strata[si]
        entries = index.entries[quality]
        entry = entries[int(rng.integers(len(entries)))]
        n_starts = n_valid_starts(entry["n_frames"], index.config)
        start = index.config.history_len + int(rng.integers(n_starts))
        mode = modes[int(rng.integers(len(modes)))]
        out.append(SampleDescriptor(entry["id"], start, mode, quality, noise_base + i))
    return out


def materialize(
    descriptors: Sequence[SampleDescriptor],
    reader: StoreReader,
    cache: LatentCache,
    normalizer: Normalizer,
    config: ModelConfig,
    seed: int,
    workers: int = 0,
) -> TrainBatch:
    """Pure function of the descriptors: each sample's noise stream is
    derived from (seed, its noise_key), so worker count cannot change the
    result."""

    def one(desc: SampleDescriptor) -> TrainSample:
        ep = reader.episode(desc.episode_id)
        skel = build_streams(ep, desc.start, config, cache.encoder,
                             latents=cache.get(ep))
        rng = philox(np.uint64(seed), np.uint64(STREAM_NOISE), np.uint64(desc.noise_key))
        return make_noisy(skel, desc.mode, rng, normalizer, config, quality=desc.quality)

    if workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            samples = list(pool.map(one, descriptors))
    else:
        samples = [one(d) for d in descriptors]
    return collate(samples, descriptors)


def collate(samples: Sequence[TrainSample], descriptors=None) -> TrainBatch:
    tokens = TokenBatch(
        hist_latents=np.stack([s.hist_latents for s in samples]),
        hist_actions=np.stack([s.hist_actions for s in samples]),
        hist_actions_present=np.array([s.hist_actions_present for s in samples]),
        actions=np.stack([s.actions_in for s in samples]),
        actions_present=np.array([s.actions_present for s in samples]),
        latents=np.stack([s.latents_in for s in samples]),
        latents_present=np.array([s.latents_present for s in samples]),
        tau_a=np.array([s.tau_a for s in samples]),
        tau_o=np.array([s.tau_o for s in samples]),
        modes=np.array([int(s.mode) for s in samples]),
        instr_ids=np.stack([s.instr_ids for s in samples]),
    )
    return TrainBatch(
        tokens=tokens,
        target_actions=np.stack([s.target_actions for s in samples]),
        target_latents=np.stack([s.target_latents for s in samples]),
        action_active=np.array([s.action_active for s in samples]),
        vision_active=np.array([s.vision_active for s in samples]),
        descriptors=list(descriptors) if descriptors is not None else [],
    )


# --- loss -------------------------------------------------------------------------------

def flow_loss(v_a: np.ndarray, v_o: np.ndarray, batch: TrainBatch):
    """Masked MSE per modality: mean over active elements; inactive terms
    contribute exactly zero (and zero gradient). Returns
    (total, parts, d_v_a, d_v_o)."""
    parts = {}
    dva = np.zeros_like(v_a)
    dvo = np.zeros_like(v_o)

    act = batch.action_active
    if act.any():
        diff = v_a[act] - batch.target_actions[act]
        n = diff.size
        loss_a = float((diff * diff).sum() / n)
        dva[act] = 2.0 * diff / n
    else:
        loss_a = 0.0
    vis = batch.vision_active
    if vis.any():
        diff = v_o[vis] - batch.target_latents[vis]
        n = diff.size
        loss_o = float((diff * diff).sum() / n)
        dvo[vis] = 2.0 * diff / n
    else:
        loss_o = 0.0

    for name, val in (("action", loss_a), ("vision", loss_o)):
        if not np.isfinite(val):
            raise NumericalFailure("non-finite loss", term=name)
    parts["action"] = loss_a
    parts["vision"] = loss_o
    # per-mode means for the log
    modes = batch.tokens.modes
    for mode in TaskMode:
        rows = modes == int(mode)
        if not rows.any():
            parts[f"mode_{mode.name}"] = float("nan")
            continue
        if mode in (TaskMode.POLICY, TaskMode.INVERSE_DYN):
            d = v_a[rows] - batch.target_actions[rows]
        else:
            d = v_o[rows] - batch.target_latents[rows]
        parts[f"mode_{mode.name}"] = float((d * d).mean())
    return loss_a + loss_o, parts, dva, dvo


# --- optimizer and schedule ----------------------------------------------------------------

class AdamW:
    """Adam with decoupled weight decay; decay applies to 2-D projection
    weights only (embeddings, positions, norms, biases excluded)."""

    def __init__(self, params: dict, lr=1e-4, betas=(0.9, 0.95), eps=1e-8,
                 weight_decay=1e-5):
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.wd = weight_decay
        self.t = 0
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}

    @staticmethod
    def decays(name: str, arr: np.ndarray) -> bool:
        return arr.ndim == 2 and name.endswith("_w")

    def step(self, params: dict, grads: dict, lr: Optional[float] = None,
             freeze: Sequence[str] = ()):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1**self.t
        bc2 = 1.0 - self.b2**self.t
        for name, p in params.items():
            if name in freeze:
                continue
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            update = (m / bc1) / (np.sqrt(v / bc2) + self.eps)
            if self.wd and self.decays(name, p):
                update = update + self.wd * p
            p -= lr * update


def cosine_lr(step: int, total_steps: int, base_lr=1e-4, min_lr=5e-7) -> float:
    """base at step 0, min at the final step, cosine in between."""
    if total_steps <= 1:
        return base_lr
    frac = min(max(step / (total_steps - 1), 0.0), 1.0)
    return min_lr + 0.5 * (base_lr - min_lr) * (1.0 + np.cos(np.pi * frac))


# --- the training loop -------------------------------------------------------------------------

@dataclass
class TrainConfig:
    steps: int = 2500
    batch_size: int = 8
    base_lr: float = 1e-4
    min_lr: float = 5e-7
    betas: tuple = (0.9, 0.95)
    adam_eps: float = 1e-8
    weight_decay: float = 1e-5
    seed: int = 0
    objective: str = "full"
    log_every: int = 10
    checkpoint_every: int = 0  # 0: only final
    workers: int = 0
    freeze_instruction: bool = True  # pretraining keeps the VLM stand-in frozen
    max_nan_batches: int = 3

    def to_json(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v)
                for k, v in self.__dict__.items()}


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    histogram_path: str
    final_loss: float
    steps: int


FORBIDDEN_PAIRS = (
    (QUALITY_LOW, TaskMode.POLICY),
    (QUALITY_ACTIONLESS, TaskMode.POLICY),
    (QUALITY_ACTIONLESS, TaskMode.FORWARD_DYN),
    (QUALITY_ACTIONLESS, TaskMode.INVERSE_DYN),
)


def train(
    store_dir: str,
    model_config: ModelConfig,
    train_config: TrainConfig,
    out_dir: str,
    route: Optional[RoutePolicy] = None,
) -> TrainResult:
    """Run the co-training loop; writes metrics.csv, routing_histogram.json,
    checkpoints and the resolved configs under out_dir."""
    os.makedirs(out_dir, exist_ok=True)
    route = route or RoutePolicy.default()
    if train_config.objective not in OBJECTIVES:
        raise ConfigError(f"unknown objective {train_config.objective!r}")
    objective = OBJECTIVES[train_config.objective]

    reader = StoreReader(store_dir)
    encoder = Encoder(model_config.encoder)
    cache = LatentCache(encoder)
    normalizer = fit_normalizer(reader, encoder, model_config)
    index = WindowIndex(reader, model_config, split="train")
    index.strata(route, objective)  # fail fast on an incompatible pool

    model = MMDiT(model_config, params=init_params(
        replace(model_config, param_seed=train_config.seed), dtype=np.float32))
    opt = AdamW(model.params, lr=train_config.base_lr, betas=train_config.betas,
                eps=train_config.adam_eps, weight_decay=train_config.weight_decay)
    sampler_rng = philox(np.uint64(train_config.seed), np.uint64(STREAM_SAMPLER))
    freeze = ("instr_embed", "instr_pos") if train_config.freeze_instruction else ()
    fingerprint_before = encoder.fingerprint()
    instr_before = model.params["instr_embed"].copy()

    with open(os.path.join(out_dir, "config.json"), "w", encoding="utf-8") as fh:
        json.dump({
            "model": model_config.to_json(),
            "train": train_config.to_json(),
            "route": route.to_json(),
            "normalizer": normalizer.to_json(),
            "store": os.path.abspath(store_dir),
        }, fh, indent=1)

    histogram: dict[str, int] = {}
    metrics_path = os.path.join(out_dir, "metrics.csv")
    nan_streak = 0
    t_start = time.time()
    fields = ["step", "lr", "loss_total", "loss_action", "loss_vision"] + [
        f"mode_{m.name}" for m in TaskMode
    ] + [f"n_{m.name}" for m in TaskMode]
    with open(metrics_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        final_loss = float("nan")
        for step in range(train_config.steps):
            lr = cosine_lr(step, train_config.steps,
                           train_config.base_lr, train_config.min_lr)
            descs = compose_descriptors(
                index, route, objective, train_config.batch_size, sampler_rng,
                noise_base=step * train_config.batch_size,
            )
            batch = materialize(descs, reader, cache, normalizer, model_config,
                                seed=train_config.seed, workers=train_config.workers)
            for d in descs:
                key = f"{d.quality}:{d.mode.name}"
                histogram[key] = histogram.get(key, 0) + 1
            v_a, v_o, fwd_cache = model.forward(batch.tokens, need_cache=True)
            try:
                total, parts, dva, dvo = flow_loss(v_a, v_o, batch)
                nan_streak = 0
            except NumericalFailure:
                nan_streak += 1
                if nan_streak >= train_config.max_nan_batches:
                    raise NumericalFailure(
                        f"{nan_streak} consecutive non-finite batches at step {step}"
                    )
                continue
            grads, _ = model.backward(fwd_cache, dva, dvo)
            opt.step(model.params, grads, lr=lr, freeze=freeze)
            final_loss = total
            row = {"step": step, "lr": f"{lr:.12e}",
                   "loss_total": total, "loss_action": parts["action"],
                   "loss_vision": parts["vision"]}
            for m in TaskMode:
                row[f"mode_{m.name}"] = parts[f"mode_{m.name}"]
                row[f"n_{m.name}"] = sum(1 for d in descs if d.mode is m)
            writer.writerow(row)
            if train_config.checkpoint_every and (step + 1) % train_config.checkpoint_every == 0:
                save_checkpoint(
                    os.path.join(out_dir, f"step{step + 1:07d}.ckpt"), model,
                    extra=_ckpt_extra(train_config, route, normalizer, step + 1),
                )

    assert encoder.fingerprint() == fingerprint_before, "frozen encoder drifted"
    if train_config.freeze_instruction:
        assert np.array_equal(model.params["instr_embed"], instr_before), \
            "frozen instruction table drifted"

    for quality, mode in FORBIDDEN_PAIRS:
        key = f"{quality}:{mode.name}"
        assert histogram.get(key, 0) == 0, f"forbidden routing pair sampled: {key}"

    histogram_path = os.path.join(out_dir, "routing_histogram.json")
    with open(histogram_path, "w", encoding="utf-8") as fh:
        json.dump(histogram, fh, indent=1, sort_keys=True)
    ckpt_path = os.path.join(out_dir, "final.ckpt")
    save_checkpoint(ckpt_path, model,
                    extra=_ckpt_extra(train_config, route, normalizer,
                                      train_config.steps),
                    rng_state={"sampler": "philox", "seed": train_config.seed})
    return TrainResult(
        checkpoint_path=ckpt_path,
        metrics_path=metrics_path,
        histogram_path=histogram_path,
        final_loss=final_loss,
        steps=train_config.steps,
    )


def _ckpt_extra(train_config, route, normalizer, step):
    return {
        "train": train_config.to_json(),
        "route": route.to_json(),
        "normalizer": normalizer.to_json(),
        "step": step,
    }
