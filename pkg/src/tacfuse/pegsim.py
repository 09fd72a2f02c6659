"""Deterministic 2-D peg-in-hole world.

The workspace is the unit square with a horizontal surface at y=0.25
holding one hole. A point gripper moves with velocity commands, grasps
a disc-shaped peg, and inserts it. Contact physics is quasi-static:
pressing a misaligned held peg against the surface blocks descent and
produces a normal-force proxy; within clearance the peg slides into the
hole and lateral motion is clamped by the walls.

Sensing is constructed so vision cannot resolve tight-clearance
alignment while touch can:

* Camera 0 (overhead) snaps every object center to the pixel grid
  (1 px = 1/64 world units, coarser than tight clearance) and, whenever
  the gripper is within r_occ of the hole, the gripper sprite is
  enlarged to overdraw the hole pixels entirely.
* Camera 1 (side view) encodes heights only; lateral position is
  collapsed to fixed columns.
* Tactile images are sensor noise in free space and, during contact, a
  Gaussian bump whose sub-pixel center offset is proportional to the
  peg-hole misalignment (full half-width at 2x clearance, saturating
  beyond) and whose amplitude is proportional to the force proxy.

All randomness is a pure function of (seed, step index), so replaying a
recorded action sequence reproduces observations bitwise.
"""

from __future__ import annotations

import dataclasses

import numpy as np

from .config import CLEARANCES, ConfigError
from .rng import stream

DT = 0.02
GRASP_RADIUS = 0.03
PEG_R = 0.03
SURFACE_Y = 0.25
HOLE_X = 0.32
HOLE_JITTER = 0.015
HOLE_DEPTH = 0.06
FULL_DEPTH = 0.045
R_OCC = 0.08
SIGMA_V = 0.02
SIGMA_T = 0.01
BUMP_SIGMA_PX = 4.0
CAM_RES = 64
TAC_RES = 32

_BG = 0.78
_SURF_SHADE = 0.60
_HOLE_COLOR = np.array([0.05, 0.05, 0.05])
_PEG_COLOR = np.array([0.15, 0.35, 0.85])
_GRIP_COLOR = np.array([0.85, 0.15, 0.15])


class SimValidationError(ValueError):
    pass


@dataclasses.dataclass(frozen=True)
class WorldState:
    gx: float
    gy: float
    aperture: float
    peg_x: float
    peg_y: float
    hole_x: float
    holding: bool
    depth: float
    contact: bool
    force: float
    step_idx: int
    clearance: float
    clearance_level: str
    seed: int

    @property
    def misalign(self) -> float:
        return self.peg_x - self.hole_x


@dataclasses.dataclass
class ObservationFrame:
    cams: np.ndarray     # (2, 3, 64, 64) float32 in [0,1]
    tacs: np.ndarray     # (2, 1, 32, 32) float32 in [0,1]
    proprio: np.ndarray  # (4,) float32: gx, gy, aperture, force
    t: int


@dataclasses.dataclass
class EvalMetrics:
    missed_rate: float
    grasp_rate: float
    insert_rate: float
    trials: int
    outcomes: list
    traces: list


def resolve_clearance(level) -> tuple[str, float]:
    if isinstance(level, str):
        if level not in CLEARANCES:
            raise ConfigError(f"unknown clearance level {level!r}, expected one of {tuple(CLEARANCES)}")
        return level, CLEARANCES[level]
    raise ConfigError(f"clearance must be one of {tuple(CLEARANCES)}, got {level!r}")


def reset(seed: int, clearance: str = "tight", randomize: bool = True) -> WorldState:
    level, c = resolve_clearance(clearance)
    if randomize:
        rng = stream(seed, "env.reset")
        gx = float(rng.uniform(0.15, 0.85))
        gy = float(rng.uniform(0.55, 0.90))
        peg_x = float(rng.uniform(0.55, 0.85))
        hole_x = float(HOLE_X + rng.uniform(-HOLE_JITTER, HOLE_JITTER))
    else:
        gx, gy, peg_x, hole_x = 0.5, 0.75, 0.7, HOLE_X
    return WorldState(gx=gx, gy=gy, aperture=1.0, peg_x=peg_x, peg_y=SURFACE_Y + PEG_R,
                      hole_x=hole_x, holding=False, depth=0.0, contact=False, force=0.0,
                      step_idx=0, clearance=c, clearance_level=level, seed=seed)


def step(state: WorldState, action) -> WorldState:
    """Advance one tick. action = [vx, vy, grip], components clipped to [-1,1]."""
    a = np.asarray(action, dtype=np.float64).reshape(-1)
    if a.shape[0] != 3:
        raise SimValidationError(f"action must have 3 components, got shape {a.shape}")
    if not np.isfinite(a).all():
        raise SimValidationError(f"non-finite action {a!r}")
    vx, vy, grip = np.clip(a, -1.0, 1.0)

    gx = float(np.clip(state.gx + vx * DT, 0.0, 1.0))
    # while holding, the vertical floor is resolved by the peg/hole
    # constraint below; a bare gripper stops at the surface
    y_floor = SURFACE_Y - HOLE_DEPTH if state.holding else SURFACE_Y
    gy = float(np.clip(state.gy + vy * DT, y_floor, 1.0))

    closing = grip > 0.5
    holding = state.holding
    if closing and not holding:
        if np.hypot(gx - state.peg_x, gy - state.peg_y) <= GRASP_RADIUS:
            holding = True
    if not closing:
        holding = False
    aperture = 0.0 if closing else 1.0

    if holding:
        mis = gx - state.hole_x
        tip_attempt = gy - PEG_R
        if abs(mis) <= state.clearance:
            tip = max(tip_attempt, SURFACE_Y - HOLE_DEPTH)
            blocked = tip - tip_attempt
            depth = max(0.0, SURFACE_Y - tip)
            if depth > 0.0:
                gx = float(np.clip(gx, state.hole_x - state.clearance, state.hole_x + state.clearance))
                force = min(1.0, 0.3 + 0.7 * blocked / DT)
                contact = True
            else:
                force = min(1.0, blocked / DT)
                contact = blocked > 0.0
        else:
            tip = max(tip_attempt, SURFACE_Y)
            blocked = tip - tip_attempt
            depth = 0.0
            force = min(1.0, blocked / DT)
            contact = blocked > 0.0
        gy = tip + PEG_R
        peg_x, peg_y = gx, gy
    else:
        gy = max(gy, SURFACE_Y)  # a just-released gripper pops back above the surface
        depth = 0.0
        contact = False
        force = 0.0
        peg_x, peg_y = state.peg_x, SURFACE_Y + PEG_R

    return WorldState(gx=gx, gy=gy, aperture=aperture, peg_x=peg_x, peg_y=peg_y,
                      hole_x=state.hole_x, holding=holding, depth=depth, contact=contact,
                      force=force, step_idx=state.step_idx + 1, clearance=state.clearance,
                      clearance_level=state.clearance_level, seed=state.seed)


# ---- rendering ----

_PIX = np.arange(CAM_RES, dtype=np.float64)
_PX_GRID_Y, _PX_GRID_X = np.meshgrid(_PIX, _PIX, indexing="ij")
_TPIX = np.arange(TAC_RES, dtype=np.float64)
_T_GRID_Y, _T_GRID_X = np.meshgrid(_TPIX, _TPIX, indexing="ij")


def _snap(x: float) -> int:
    return int(round(x * (CAM_RES - 1)))


def _draw_disc(img: np.ndarray, px: int, py: int, r_px: float, color: np.ndarray) -> None:
    d = np.hypot(_PX_GRID_X - px, _PX_GRID_Y - py)
    w = np.clip(r_px + 0.5 - d, 0.0, 1.0)
    img *= (1.0 - w)[None]
    img += color[:, None, None] * w[None]


def hole_pixel_count(cam0: np.ndarray, tol: float = 0.15) -> int:
    """Pixels matching the hole color, the occlusion oracle."""
    return int((np.abs(cam0 - _HOLE_COLOR[:, None, None]).max(axis=0) < tol).sum())


def render(state: WorldState) -> ObservationFrame:
    """Pure function of state: synchronized cameras, tactile, proprio."""
    rng = stream(state.seed, "render", state.step_idx)

    # camera 0: overhead, pixel-snapped object centers, occlusion near hole
    cam0 = np.empty((3, CAM_RES, CAM_RES), dtype=np.float64)
    cam0[:] = _BG
    surf_row = (CAM_RES - 1) - _snap(SURFACE_Y)
    cam0[:, surf_row:, :] = _SURF_SHADE
    hole_px, hole_py = _snap(state.hole_x), (CAM_RES - 1) - _snap(SURFACE_Y)
    hole_r = (PEG_R + state.clearance) * (CAM_RES - 1)
    _draw_disc(cam0, hole_px, hole_py, hole_r, _HOLE_COLOR)
    peg_px, peg_py = _snap(state.peg_x), (CAM_RES - 1) - _snap(state.peg_y)
    # sprites render slightly larger than their physical radii so the
    # coarse cameras see them; physics uses PEG_R / GRASP_RADIUS
    _draw_disc(cam0, peg_px, peg_py, 0.045 * (CAM_RES - 1), _PEG_COLOR)
    grip_px, grip_py = _snap(state.gx), (CAM_RES - 1) - _snap(state.gy)
    grip_r = (0.05 + 0.02 * state.aperture) * (CAM_RES - 1)
    d_hole = np.hypot(state.gx - state.hole_x, state.gy - SURFACE_Y)
    if d_hole < R_OCC:
        grip_r = max(grip_r, (d_hole + PEG_R + state.clearance) * (CAM_RES - 1) + 3.0)
    _draw_disc(cam0, grip_px, grip_py, grip_r, _GRIP_COLOR)
    cam0 = np.clip(cam0 + rng.normal(0.0, SIGMA_V, cam0.shape), 0.0, 1.0)

    # camera 1: side view; heights only, lateral position collapsed
    cam1 = np.empty((3, CAM_RES, CAM_RES), dtype=np.float64)
    cam1[:] = _BG
    cam1[:, surf_row:surf_row + 2, :] = 0.30
    _draw_disc(cam1, 48, (CAM_RES - 1) - _snap(state.peg_y), PEG_R * (CAM_RES - 1), _PEG_COLOR)
    _draw_disc(cam1, 16, (CAM_RES - 1) - _snap(state.gy),
               (0.025 + 0.025 * state.aperture) * (CAM_RES - 1), _GRIP_COLOR)
    cam1 = np.clip(cam1 + rng.normal(0.0, SIGMA_V, cam1.shape), 0.0, 1.0)

    # tactile: noise floor; contact adds a misalignment-coded bump
    tacs = np.zeros((2, 1, TAC_RES, TAC_RES), dtype=np.float64)
    if state.contact:
        half = (TAC_RES - 1) / 2.0
        off = np.clip(state.misalign / (2.0 * state.clearance), -1.0, 1.0) * half
        cx, cy = half + off, half
        bump = np.exp(-((_T_GRID_X - cx) ** 2 + (_T_GRID_Y - cy) ** 2) / (2.0 * BUMP_SIGMA_PX ** 2))
        amp = min(1.0, state.force)
        tacs[:, 0] = amp * bump
    tacs = np.clip(tacs + rng.normal(0.0, SIGMA_T, tacs.shape), 0.0, 1.0)

    proprio = np.array([state.gx, state.gy, state.aperture, state.force], dtype=np.float32)
    return ObservationFrame(cams=np.stack([cam0, cam1]).astype(np.float32),
                            tacs=tacs.astype(np.float32), proprio=proprio, t=state.step_idx)


# ---- scripted expert ----

K_APP = 12.0
K_TRA = 10.0
K_SRV = 22.0
ALIGN_TOL = 0.018
HOVER_TIP = 0.10
GRASP_BIAS = 0.004  # approach aims slightly above the peg center: grasp without pressing


def expert_action(state: WorldState, noise_scale: float, rng: np.random.Generator | None = None) -> np.ndarray:
    """Phase-machine expert reading ground-truth state.

    In the air it aligns only coarsely (to ALIGN_TOL, on the order of the
    rendering quantization) and descends blind; precision correction
    happens on the surface where the contact signal exists. Exploration
    noise is added to the velocity components.
    """
    if rng is None:
        rng = stream(state.seed, "expert", state.step_idx)
    noise = rng.normal(0.0, 1.0, size=2) * noise_scale

    if not state.holding:
        dx = state.peg_x - state.gx
        dy = state.peg_y + GRASP_BIAS - state.gy
        if np.hypot(dx, dy) > 0.5 * GRASP_RADIUS:
            vx, vy, grip = K_APP * dx, K_APP * dy, 0.0
        else:
            vx, vy, grip = K_APP * dx, K_APP * dy, 1.0
    else:
        grip = 1.0
        mis = state.gx - state.hole_x
        tip = state.gy - PEG_R
        if state.depth >= FULL_DEPTH:
            vx, vy = 0.0, 0.0
        elif state.depth > 0.0:
            vx, vy = -K_SRV * mis, -1.0
        elif state.contact:
            vx = -K_SRV * mis
            vy = -1.0 if abs(mis) <= 0.3 * state.clearance else -0.35
        else:
            if abs(mis) <= ALIGN_TOL:
                vx, vy = 0.0, -1.0
            elif tip < SURFACE_Y + 0.04:
                vx, vy = -0.5 * K_TRA * mis, 1.0
            else:
                vx = -K_TRA * mis
                vy = 15.0 * (SURFACE_Y + PEG_R + HOVER_TIP - state.gy)
    return np.clip([vx + noise[0], vy + noise[1], grip], -1.0, 1.0)


class ExpertPolicy:
    """Ground-truth scripted expert behind the rollout-policy interface."""

    def __init__(self, noise_scale: float = 0.0):
        self.noise_scale = noise_scale
        self.last_alpha = None

    def reset(self) -> None:
        pass

    def act(self, obs: ObservationFrame, state: WorldState) -> np.ndarray:
        return expert_action(state, self.noise_scale)


class RandomPolicy:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.last_alpha = None
        self._t = 0

    def reset(self) -> None:
        self._t = 0

    def act(self, obs: ObservationFrame, state: WorldState) -> np.ndarray:
        a = stream(self.seed, "random-policy", self._t).uniform(-1.0, 1.0, size=3)
        self._t += 1
        return a


def evaluate_rollouts(policy, n_trials: int, clearance: str, horizon: int = 200,
                      seeds=None, base_seed: int = 10_000,
                      collect_traces: bool = False, on_trial_end=None) -> EvalMetrics:
    """Missed / Grasp / Peg-in-hole rates over n_trials episodes.

    Grasp latches once holding is achieved; insertion latches at full
    depth and ends the trial early. on_trial_end(i, outcome, trace,
    policy) runs after each trial, before the policy is reset again.
    """
    if n_trials < 1:
        raise ValueError("evaluate_rollouts requires n_trials >= 1")
    if seeds is None:
        seeds = [base_seed + i for i in range(n_trials)]
    outcomes = []
    traces = []
    for i in range(n_trials):
        state = reset(seeds[i], clearance, randomize=True)
        if hasattr(policy, "reset"):
            policy.reset()
        grasped = False
        inserted = False
        trace = []
        for t in range(horizon):
            obs = render(state)
            action = policy.act(obs, state)
            state = step(state, action)
            grasped = grasped or state.holding
            inserted = inserted or state.depth >= FULL_DEPTH
            if collect_traces:
                trace.append((t, getattr(policy, "last_alpha", None),
                              "contact" if state.contact else "free"))
            if inserted:
                break
        outcome = {"seed": seeds[i], "grasp": grasped, "insert": inserted}
        if on_trial_end is not None:
            on_trial_end(i, outcome, trace, policy)
        outcomes.append(outcome)
        traces.append(trace)
    n = len(outcomes)
    grasp_rate = sum(o["grasp"] for o in outcomes) / n
    insert_rate = sum(o["insert"] for o in outcomes) / n
    return EvalMetrics(missed_rate=1.0 - grasp_rate, grasp_rate=grasp_rate,
                       insert_rate=insert_rate, trials=n, outcomes=outcomes, traces=traces)


# ---- estimators used to verify the causal construction ----

def tactile_misalign_estimate(tac_img: np.ndarray, clearance: float) -> float | None:
    """Decode misalignment from the tactile bump centroid; None if no bump."""
    img = np.asarray(tac_img, dtype=np.float64).reshape(TAC_RES, TAC_RES)
    w = np.maximum(img - 0.08, 0.0)
    total = w.sum()
    if total < 1.0:
        return None
    cx = float((w * _T_GRID_X).sum() / total)
    half = (TAC_RES - 1) / 2.0
    return (cx - half) / half * (2.0 * clearance)


def visual_hole_x_estimate(cam0: np.ndarray) -> float:
    """Centroid of hole-colored pixels in camera 0; image center if occluded."""
    img = np.asarray(cam0, dtype=np.float64)
    mask = np.abs(img - _HOLE_COLOR[:, None, None]).max(axis=0) < 0.15
    if mask.sum() == 0:
        return 0.5
    cx = (_PX_GRID_X * mask).sum() / mask.sum()
    return float(cx / (CAM_RES - 1))
