"""Deterministic 2D tabletop manipulation world.

The workspace is the unit square. An agent disk moves by bounded position
deltas and operates a one-DoF gripper; square blocks can be pushed (circle
vs. AABB overlap resolution) or grasped and carried; a fixed-color goal
zone defines task success. Everything is a pure function of its inputs:
`step`, `render` and `success` hold no state, and episode generation is
bit-reproducible from an integer seed via a counter-based Philox stream.

Scripted controllers produce the three data-quality tiers used by the
training pipeline: a proportional expert, a noisy expert with pauses and
detours, and a uniform-random controller.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Optional, Sequence

import numpy as np

from .errors import ControllerError, PlacementError
from .rng import STREAM_CONTROL, STREAM_RESET, philox

# Workspace geometry and dynamics constants (workspace units / steps).
DELTA_MAX = 0.05            # per-component position delta clamp
GRIP_SLEW = 0.25            # max gripper change per step
GRASP_RADIUS = 0.05         # max agent-to-block-center distance for grasping
AGENT_RADIUS = 0.02
BLOCK_HALF_RANGE = (0.02, 0.08)
GOAL_RADIUS_RANGE = (0.05, 0.15)

# Controller behavior is expressed per second so episodes generated at
# different native rates trace the same physical trajectories.
EXPERT_SPEED = 0.4          # units/s position speed cap
EXPERT_GRIP_RATE = 2.5      # grip command ramp, units of grip per second
EXPERT_APPROACH_EPS = 0.025 # close enough to start closing the gripper
NOISY_SIGMA = 0.015         # Gaussian noise std per action component
NOISY_PAUSE_P = 0.10        # per-step probability of a zero action
NOISY_DETOUR_P = 0.05       # per-step probability of starting a detour
NOISY_DETOUR_STEPS = 5

FRAME_SIZE = 64
BACKGROUND = (70, 70, 70)
BLOCK_COLORS = ((200, 40, 40), (40, 70, 200), (220, 190, 30), (150, 50, 190))
COLOR_NAMES = ("red", "blue", "yellow", "purple")
GOAL_COLOR = (40, 200, 80)
GOAL_ALPHA = 0.4
AGENT_BRIGHTNESS = (150, 255)  # grip 0 -> 150, grip 1 -> 255


def goal_tint() -> tuple[int, int, int]:
    """Exact 8-bit color of the goal zone blended over the background."""
    return tuple(
        int(round(GOAL_ALPHA * g + (1.0 - GOAL_ALPHA) * b))
        for g, b in zip(GOAL_COLOR, BACKGROUND)
    )


def agent_color(grip: float) -> tuple[int, int, int]:
    lo, hi = AGENT_BRIGHTNESS
    v = int(round(lo + (hi - lo) * float(grip)))
    return (v, v, v)


class ControllerQuality(Enum):
    EXPERT = "expert"
    NOISY = "noisy"
    RANDOM = "random"


@dataclass(frozen=True)
class Block:
    pos: tuple[float, float]
    half_size: float
    color_id: int


@dataclass(frozen=True)
class Goal:
    pos: tuple[float, float]
    radius: float
    color_id: int = 0  # fixed green zone; kept for schema completeness


@dataclass(frozen=True)
class WorldState:
    agent_pos: tuple[float, float]
    agent_grip: float
    blocks: tuple[Block, ...]
    goal: Goal
    held_block: Optional[int]
    time_index: int


@dataclass(frozen=True)
class EnvAction:
    delta_pos: tuple[float, float]
    grip_target: float


class Target(Enum):
    GOAL_ZONE = "goal_zone"


_TEMPLATES = (
    "push the {color} block to the green zone",
    "move the {color} block into the green zone",
)


@dataclass(frozen=True)
class Instruction:
    template_id: int
    subject_color: int
    target: Target = Target.GOAL_ZONE

    @property
    def text(self) -> str:
        return _TEMPLATES[self.template_id].format(color=COLOR_NAMES[self.subject_color])

    @staticmethod
    def parse(text: str) -> "Instruction":
        for tid, template in enumerate(_TEMPLATES):
            for cid, name in enumerate(COLOR_NAMES):
                if template.format(color=name) == text:
                    return Instruction(tid, cid)
        raise ValueError(f"not a rendered instruction: {text!r}")


@dataclass(frozen=True)
class RawEpisode:
    states: tuple[WorldState, ...]
    actions: tuple[EnvAction, ...]
    images: np.ndarray  # (N, H, W, 3) uint8
    instruction: Instruction
    controller: ControllerQuality
    native_rate_hz: float
    seed: int

    @property
    def timestamps(self) -> np.ndarray:
        return np.arange(len(self.states)) / self.native_rate_hz


def _clip01(v: float) -> float:
    return min(1.0, max(0.0, v))


def _dist(a, b) -> float:
    return float(np.hypot(a[0] - b[0], a[1] - b[1]))


# --- placement -------------------------------------------------------------

def _overlaps_block(pos, half, blocks, gap=0.01) -> bool:
    for b in blocks:
        if abs(pos[0] - b.pos[0]) < half + b.half_size + gap and abs(
            pos[1] - b.pos[1]
        ) < half + b.half_size + gap:
            return True
    return False


def reset(seed: int, num_blocks: int = 2) -> tuple[WorldState, Instruction]:
    """Sample a scene and its instruction. Identical seed, identical output.

    Blocks, goal and agent are rejection-sampled to be pairwise
    non-overlapping (the subject block always starts outside the goal zone).
    Raises PlacementError after 1000 failed attempts for any object.
    """
    if not 1 <= num_blocks <= 4:
        raise ValueError(f"num_blocks must be in [1, 4], got {num_blocks}")
    rng = philox(np.uint64(seed), np.uint64(STREAM_RESET))

    goal_radius = float(rng.uniform(*GOAL_RADIUS_RANGE))
    margin = goal_radius
    goal_pos = (
        float(rng.uniform(margin, 1 - margin)),
        float(rng.uniform(margin, 1 - margin)),
    )
    goal = Goal(pos=goal_pos, radius=goal_radius)

    color_ids = rng.choice(len(BLOCK_COLORS), size=num_blocks, replace=False)
    blocks: list[Block] = []
    for color_id in color_ids:
        half = float(rng.uniform(*BLOCK_HALF_RANGE))
        for attempt in range(1000):
            pos = (
                float(rng.uniform(half, 1 - half)),
                float(rng.uniform(half, 1 - half)),
            )
            # keep blocks clear of each other and strictly outside the zone
            if _overlaps_block(pos, half, blocks):
                continue
            if _dist(pos, goal.pos) < goal.radius + half * np.sqrt(2) + 0.01:
                continue
            blocks.append(Block(pos=pos, half_size=half, color_id=int(color_id)))
            break
        else:
            raise PlacementError(
                f"could not place block {len(blocks)} after 1000 attempts (seed {seed})"
            )

    for attempt in range(1000):
        agent = (float(rng.uniform(0, 1)), float(rng.uniform(0, 1)))
        if not _overlaps_block(agent, AGENT_RADIUS, blocks):
            break
    else:
        raise PlacementError(f"could not place agent after 1000 attempts (seed {seed})")

    subject = int(rng.choice(color_ids))
    template = int(rng.integers(len(_TEMPLATES)))
    state = WorldState(
        agent_pos=agent,
        agent_grip=0.0,
        blocks=tuple(blocks),
        goal=goal,
        held_block=None,
        time_index=0,
    )
    return state, Instruction(template_id=template, subject_color=subject)


# --- dynamics ---------------------------------------------------------------

def resolve_push(agent_pos, agent_delta, block_pos, half_size, radius=AGENT_RADIUS):
    """Displacement applied to a block overlapped by the agent disk.

    Standard circle-vs-AABB resolution: push the block out along the
    closest-point normal; if the disk center is inside the box, push along
    the minimum-penetration axis, away from the agent (ties broken toward
    the agent's commanded motion, then +x).
    """
    lo = (block_pos[0] - half_size, block_pos[1] - half_size)
    hi = (block_pos[0] + half_size, block_pos[1] + half_size)
    closest = (min(max(agent_pos[0], lo[0]), hi[0]), min(max(agent_pos[1], lo[1]), hi[1]))
    dx, dy = agent_pos[0] - closest[0], agent_pos[1] - closest[1]
    dist = float(np.hypot(dx, dy))
    if dist >= radius:
        return (0.0, 0.0)
    if dist > 0.0:
        pen = radius - dist
        return (-dx / dist * pen, -dy / dist * pen)
    # center inside the box: axis of least penetration
    pens = [
        half_size + radius - abs(agent_pos[0] - block_pos[0]),
        half_size + radius - abs(agent_pos[1] - block_pos[1]),
    ]
    axis = 0 if pens[0] <= pens[1] else 1
    sign = np.sign(block_pos[axis] - agent_pos[axis])
    if sign == 0.0:
        sign = np.sign(agent_delta[axis])
    if sign == 0.0:
        sign = 1.0
    out = [0.0, 0.0]
    out[axis] = float(sign) * pens[axis]
    return tuple(out)


def step(state: WorldState, action: EnvAction) -> WorldState:
    """One dynamics step. All inputs are clamped, never rejected."""
    ddx = min(max(float(action.delta_pos[0]), -DELTA_MAX), DELTA_MAX)
    ddy = min(max(float(action.delta_pos[1]), -DELTA_MAX), DELTA_MAX)
    ax = _clip01(state.agent_pos[0] + ddx)
    ay = _clip01(state.agent_pos[1] + ddy)

    target = _clip01(float(action.grip_target))
    dg = min(max(target - state.agent_grip, -GRIP_SLEW), GRIP_SLEW)
    grip = state.agent_grip + dg

    held = state.held_block
    blocks = list(state.blocks)

    # release before anything else so a released block is pushable this step
    if held is not None and grip <= 0.5:
        held = None

    # push: resolve agent overlap against every non-held block, index order
    for i, b in enumerate(blocks):
        if i == held:
            continue
        disp = resolve_push((ax, ay), (ddx, ddy), b.pos, b.half_size)
        if disp != (0.0, 0.0):
            blocks[i] = replace(
                b, pos=(_clip01(b.pos[0] + disp[0]), _clip01(b.pos[1] + disp[1]))
            )

    # grasp on the upward grip crossing
    if held is None and state.agent_grip <= 0.5 < grip:
        best, best_d = None, GRASP_RADIUS
        for i, b in enumerate(blocks):
            d = _dist((ax, ay), b.pos)
            if d <= best_d:
                best, best_d = i, d
        held = best

    if held is not None:
        blocks[held] = replace(blocks[held], pos=(ax, ay))

    return WorldState(
        agent_pos=(ax, ay),
        agent_grip=grip,
        blocks=tuple(blocks),
        goal=state.goal,
        held_block=held,
        time_index=state.time_index + 1,
    )


def success(state: WorldState, instruction: Instruction) -> bool:
    """Subject block center strictly inside the goal zone and not held."""
    subject = subject_index(state, instruction)
    if subject is None:
        return False
    if state.held_block == subject:
        return False
    return _dist(state.blocks[subject].pos, state.goal.pos) < state.goal.radius


def subject_index(state: WorldState, instruction: Instruction) -> Optional[int]:
    for i, b in enumerate(state.blocks):
        if b.color_id == instruction.subject_color:
            return i
    return None


# --- rendering --------------------------------------------------------------

def render(state: WorldState, size: int = FRAME_SIZE) -> np.ndarray:
    """Rasterize a state to (size, size, 3) uint8. Pure function of state.

    Draw order: background, goal zone (alpha-blended), blocks (opaque,
    index order), agent disk (brightness encodes grip). Pixel (i, j) covers
    world point ((j + .5)/size, (i + .5)/size); no anti-aliasing.
    """
    img = np.empty((size, size, 3), dtype=np.uint8)
    img[...] = BACKGROUND
    centers = (np.arange(size) + 0.5) / size
    xs = centers[None, :]  # columns -> x
    ys = centers[:, None]  # rows -> y

    gx, gy = state.goal.pos
    goal_mask = (xs - gx) ** 2 + (ys - gy) ** 2 <= state.goal.radius**2
    img[goal_mask] = goal_tint()

    for b in state.blocks:
        bx, by = b.pos
        mask = (np.abs(xs - bx) <= b.half_size) & (np.abs(ys - by) <= b.half_size)
        img[mask] = BLOCK_COLORS[b.color_id]

    axp, ayp = state.agent_pos
    agent_mask = (xs - axp) ** 2 + (ys - ayp) ** 2 <= AGENT_RADIUS**2
    img[agent_mask] = agent_color(state.agent_grip)
    return img


# --- scripted controllers ---------------------------------------------------

def _seg_point_dist(p, a, b) -> float:
    """Distance from point p to segment ab."""
    ab = (b[0] - a[0], b[1] - a[1])
    ap = (p[0] - a[0], p[1] - a[1])
    denom = ab[0] ** 2 + ab[1] ** 2
    t = 0.0 if denom <= 1e-18 else min(1.0, max(0.0, (ap[0] * ab[0] + ap[1] * ab[1]) / denom))
    cx, cy = a[0] + t * ab[0], a[1] + t * ab[1]
    return float(np.hypot(p[0] - cx, p[1] - cy))


def _expert_action(state: WorldState, instruction: Instruction, rate_hz: float) -> EnvAction:
    """Proportional pushing controller.

    Grasping is physically ruled out for large blocks (contact resolution
    keeps the agent at half_size + agent radius from the center, beyond the
    grasp radius), so the expert pushes: orbit to the staging point behind
    the block's face opposite the goal, then press along the dominant goal
    axis. The gripper is kept open throughout. Pure function of
    (state, instruction, rate_hz).
    """
    subject = subject_index(state, instruction)
    if subject is None:
        raise ControllerError(
            f"no {COLOR_NAMES[instruction.subject_color]} block in scene"
        )
    cap = EXPERT_SPEED / rate_hz
    grip_step = EXPERT_GRIP_RATE / rate_hz
    open_target = _clip01(state.agent_grip - grip_step)
    if success(state, instruction):
        return EnvAction((0.0, 0.0), open_target)
    if state.held_block == subject:  # recover from an accidental grasp
        return EnvAction((0.0, 0.0), open_target)

    agent = state.agent_pos
    block = state.blocks[subject]
    goal = state.goal.pos
    half = block.half_size
    u = (goal[0] - block.pos[0], goal[1] - block.pos[1])

    # push axis: prefer the face we already sit behind (stateless hysteresis)
    axis = 0 if abs(u[0]) >= abs(u[1]) else 1
    for cand in (0, 1):
        s = 1.0 if u[cand] >= 0 else -1.0
        behind = (block.pos[cand] - agent[cand]) * s >= half * 0.5
        lateral_ok = abs(agent[1 - cand] - block.pos[1 - cand]) <= half * 0.95
        if behind and lateral_ok and abs(u[cand]) > 0.01:
            axis = cand
            break
    sign = 1.0 if u[axis] >= 0 else -1.0
    lat = 1 - axis

    behind = (block.pos[axis] - agent[axis]) * sign >= half * 0.5
    lateral_ok = abs(agent[lat] - block.pos[lat]) <= half * 0.95
    if behind and lateral_ok:
        delta = [0.0, 0.0]
        delta[axis] = sign * cap
        delta[lat] = min(max(0.5 * (block.pos[lat] - agent[lat]), -0.3 * cap), 0.3 * cap)
        return EnvAction((delta[0], delta[1]), open_target)

    # navigate to the staging point without disturbing the block
    staging = [block.pos[0], block.pos[1]]
    staging[axis] -= sign * (half + AGENT_RADIUS + 0.01)
    staging = [min(max(staging[0], 0.01), 0.99), min(max(staging[1], 0.01), 0.99)]
    to_t = (staging[0] - agent[0], staging[1] - agent[1])
    dist_t = float(np.hypot(*to_t))
    if dist_t <= 1e-12:
        return EnvAction((0.0, 0.0), open_target)

    r_orbit = half + AGENT_RADIUS + 0.02
    d_ab = _dist(agent, block.pos)
    blocked = (
        d_ab < r_orbit + cap
        and _seg_point_dist(block.pos, agent, staging) < r_orbit - 1e-9
    )
    if blocked and d_ab > 1e-9:
        radial = ((agent[0] - block.pos[0]) / d_ab, (agent[1] - block.pos[1]) / d_ab)
        tang = (-radial[1], radial[0])
        if tang[0] * to_t[0] + tang[1] * to_t[1] < 0:
            tang = (-tang[0], -tang[1])
        out = min(max(r_orbit - d_ab, 0.0), 0.5 * cap)
        delta = (tang[0] * cap + radial[0] * out, tang[1] * cap + radial[1] * out)
        norm = float(np.hypot(*delta))
        if norm > cap:
            delta = (delta[0] / norm * cap, delta[1] / norm * cap)
        return EnvAction(delta, open_target)

    scale = min(1.0, cap / dist_t)
    return EnvAction((to_t[0] * scale, to_t[1] * scale), open_target)


class ScriptedController:
    """Per-episode controller with the quality-dependent corruption model.

    NOISY keeps a detour countdown across steps (a "retry": several steps
    toward a random waypoint), which is why episode generation uses this
    class rather than the one-shot function.
    """

    def __init__(self, quality: ControllerQuality, rng: np.random.Generator,
                 rate_hz: float = 10.0):
        self.quality = quality
        self.rng = rng
        self.rate_hz = rate_hz
        self._detour_left = 0
        self._detour_target = (0.5, 0.5)

    def action(self, state: WorldState, instruction: Instruction) -> EnvAction:
        if self.quality is ControllerQuality.EXPERT:
            return _expert_action(state, instruction, self.rate_hz)
        if self.quality is ControllerQuality.RANDOM:
            d = self.rng.uniform(-DELTA_MAX, DELTA_MAX, size=2)
            return EnvAction((float(d[0]), float(d[1])), float(self.rng.uniform(0, 1)))

        # NOISY: pauses, detours, then expert plus Gaussian noise
        if self.rng.uniform() < NOISY_PAUSE_P:
            return EnvAction((0.0, 0.0), state.agent_grip)
        if self._detour_left > 0:
            self._detour_left -= 1
            base = self._toward_detour(state)
        elif self.rng.uniform() < NOISY_DETOUR_P:
            self._detour_target = (
                float(self.rng.uniform(0, 1)),
                float(self.rng.uniform(0, 1)),
            )
            self._detour_left = NOISY_DETOUR_STEPS - 1
            base = self._toward_detour(state)
        else:
            base = _expert_action(state, instruction, self.rate_hz)
        noise = self.rng.normal(0.0, NOISY_SIGMA, size=3)
        return EnvAction(
            (base.delta_pos[0] + float(noise[0]), base.delta_pos[1] + float(noise[1])),
            _clip01(base.grip_target + float(noise[2])),
        )

    def _toward_detour(self, state: WorldState) -> EnvAction:
        cap = EXPERT_SPEED / self.rate_hz
        dx = self._detour_target[0] - state.agent_pos[0]
        dy = self._detour_target[1] - state.agent_pos[1]
        d = float(np.hypot(dx, dy))
        if d <= 1e-12:
            return EnvAction((0.0, 0.0), state.agent_grip)
        s = min(1.0, cap / d)
        return EnvAction((dx * s, dy * s), state.agent_grip)


def scripted_action(
    state: WorldState,
    instruction: Instruction,
    quality: ControllerQuality,
    rng: Optional[np.random.Generator] = None,
    rate_hz: float = 10.0,
) -> EnvAction:
    """One-shot controller step. EXPERT ignores rng and is deterministic."""
    if quality is ControllerQuality.EXPERT:
        return _expert_action(state, instruction, rate_hz)
    if rng is None:
        raise ValueError(f"{quality.value} controller requires an rng")
    return ScriptedController(quality, rng, rate_hz).action(state, instruction)


# --- episode generation -------------------------------------------------------

def generate_episode(
    seed: int,
    quality: ControllerQuality,
    native_rate_hz: float = 10.0,
    max_steps: int = 200,
    num_blocks: Optional[int] = None,
    frame_size: int = FRAME_SIZE,
) -> RawEpisode:
    """Roll a scripted controller until success or max_steps.

    Deterministic in `seed`: the scene comes from reset(seed) and the
    controller from its own Philox stream keyed by (seed, STREAM_CONTROL).
    """
    if native_rate_hz not in (30.0, 15.0, 10.0, 30, 15, 10):
        raise ValueError(f"native_rate_hz must be one of 30, 15, 10; got {native_rate_hz}")
    if max_steps > 400:
        raise ValueError(f"max_steps must be <= 400, got {max_steps}")
    rng = philox(np.uint64(seed), np.uint64(STREAM_CONTROL))
    if num_blocks is None:
        num_blocks = int(rng.integers(1, 4))  # 1..3 blocks
    state, instruction = reset(seed, num_blocks=num_blocks)
    controller = ScriptedController(quality, rng, rate_hz=float(native_rate_hz))

    states = [state]
    actions: list[EnvAction] = []
    images = [render(state, size=frame_size)]
    while len(actions) < max_steps:
        act = controller.action(state, instruction)
        state = step(state, act)
        states.append(state)
        actions.append(act)
        images.append(render(state, size=frame_size))
        if success(state, instruction):
            break
    return RawEpisode(
        states=tuple(states),
        actions=tuple(actions),
        images=np.stack(images),
        instruction=instruction,
        controller=quality,
        native_rate_hz=float(native_rate_hz),
        seed=seed,
    )
