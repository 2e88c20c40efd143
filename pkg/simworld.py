"""
Deterministic 2.5-D contact simulator.

Two tasks share one kinematic gripper:
  - peg_in_hole: insert a held peg into a tight, visually occluded hole
  - tool_stabilize: press a held cube on top of a tall tool and keep it upright;
    success is 20 consecutive steps within 2 degrees of vertical while the cube
    stays pressed on the tool (the tool never leans unless something touches it)

The module also renders top-down camera views, an analytic gel tactile image
and provides a scripted expert for demonstration collection.
"""

from dataclasses import dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.ndimage import gaussian_filter

from diffcore import CounterRng
from geometry import CameraModel, Pose, compose

TASKS = ("peg_in_hole", "tool_stabilize")

# contact model
CONTACT_STIFFNESS = 500.0  # N/m
FRICTION_MU = 0.6
LATERAL_STIFFNESS = 500.0  # N/m of commanded lateral motion while loaded
SLIP_COMPLIANCE = 1.0 / 2000.0  # m/N
MAX_PENETRATION = 0.004
MAX_GRASP_OFFSET = 0.004

# objects
HOLD_BELOW = 0.02  # held object's lower face below the gripper origin
PEG_RADIUS = 0.0045
PEG_LENGTH = 0.04
HOLE_RADIUS = 0.005
HOLE_CLEARANCE = HOLE_RADIUS - PEG_RADIUS
HOLE_DEPTH = 0.015
INSERT_DEPTH = 0.002
CUBE_HALF = 0.01
TOOL_HEIGHT = 0.08
TOOL_TOP_RADIUS = 0.008
TOOL_BASE_RADIUS = 0.012
OCCLUDER_HALF = 0.008
OCCLUDER_JITTER = 0.003
OCCLUDER_HEIGHT = 0.002

# tool dynamics
TILT_GROWTH = (0.05, 0.08)
SUPPORT_GAIN = 0.5
FALL_TILT = np.deg2rad(30.0)
STABLE_TILT = np.deg2rad(2.0)
STABLE_STEPS = 20
DISTURBANCE_TILT = np.deg2rad(0.5)
DISTURBANCE_PERIOD = 15

# workspace and actions
WORKSPACE_HALF = 0.03
TARGET_YAW = np.deg2rad(15.0)
RESET_GRASP_OFFSET = 0.002
MAX_TRANSLATION = 0.005
MAX_ROTATION = 0.05
WRIST_TILT_LIMIT = np.deg2rad(5.0)
DROP_APERTURE = 0.5
DEFAULT_MAX_STEPS = 120

# rendering
IMAGE_SIZE = 64
TPV_FOCAL = 260.0
TPV_HEIGHT = 0.4
WRIST_FOCAL = 50.0
WRIST_ABOVE = 0.05
SENSOR_OFFSET = (0.022, 0.0, -0.006)
SENSOR_HALF_EXTENTS = (0.008, 0.008, 0.004)
FINGER_HALF = (0.004, 0.003)
FINGER_ABOVE = 0.022

TABLE_COLOR = (0.75, 0.7, 0.6)
HOLE_COLOR = (0.1, 0.1, 0.1)
OCCLUDER_COLOR = (0.3, 0.5, 0.8)
HELD_COLOR = (0.85, 0.2, 0.2)
TOOL_BASE_COLOR = (0.15, 0.4, 0.2)
TOOL_TOP_COLOR = (0.2, 0.7, 0.3)
FINGER_COLOR = (0.35, 0.35, 0.35)
SENSOR_COLOR = (0.9, 0.8, 0.1)

# tactile gel
GEL_PIXELS = 32
GEL_PITCH = 0.0005  # m per gel pixel
GEL_FORCE_REF = CONTACT_STIFFNESS * MAX_PENETRATION
GEL_SMOOTHING = 1.0
GEL_SHADING_GAIN = 0.5
GEL_DEPTH_DARKENING = 0.1
GEL_LIGHT_ELEVATION = np.deg2rad(45.0)
GEL_LIGHT_AZIMUTHS = np.deg2rad([90.0, 210.0, 330.0])
GEL_TILT_SHEAR = 5.0
TOOL_IMPRINT_HALF = 0.004

# scripted expert
EXPERT_HOVER = 0.003
EXPERT_PRESS = 0.001
EXPERT_APPROACH_NOISE = 0.001
EXPERT_APPROACH_CLIP = 0.002
EXPERT_CORRECTION = 0.001
EXPERT_CORRECTION_NOISE = 0.0002
EXPERT_SPIRAL_PITCH = 0.0005


def task_index(task: str) -> int:
    if task not in TASKS:
        raise ValueError(f"unknown task {task!r}; expected one of {TASKS}")
    return TASKS.index(task)


@dataclass
class WorldState:
    """
    Full simulator state. `grasp_offset` is the held object's lateral
    displacement from the gripper axis, in world x-y.
    """

    task: str
    seed: int
    step_index: int
    gripper_position: np.ndarray
    gripper_rpy: np.ndarray
    aperture: float
    target_xy: np.ndarray
    target_yaw: float
    grasp_offset: np.ndarray
    wrench: np.ndarray
    occluder_center: Optional[np.ndarray] = None
    tilt: np.ndarray = field(default_factory=lambda: np.zeros(2))
    tilt_growth: float = 0.0
    stable_steps: int = 0
    contact_steps: int = 0
    success: bool = False
    failed: bool = False
    done: bool = False
    max_steps: int = DEFAULT_MAX_STEPS

    def copy(self) -> "WorldState":
        return replace(
            self,
            gripper_position=self.gripper_position.copy(),
            gripper_rpy=self.gripper_rpy.copy(),
            target_xy=self.target_xy.copy(),
            grasp_offset=self.grasp_offset.copy(),
            wrench=self.wrench.copy(),
            occluder_center=None if self.occluder_center is None else self.occluder_center.copy(),
            tilt=self.tilt.copy(),
        )

    @property
    def held_bottom(self) -> np.ndarray:
        """Centre of the held object's lower face."""
        p = self.gripper_position
        return np.array([p[0] + self.grasp_offset[0], p[1] + self.grasp_offset[1], p[2] - HOLD_BELOW])

    @property
    def tool_top(self) -> np.ndarray:
        lean = np.linalg.norm(self.tilt)
        xy = self.target_xy + TOOL_HEIGHT * self.tilt
        return np.array([xy[0], xy[1], TOOL_HEIGHT * np.cos(lean)])

    @property
    def in_contact(self) -> bool:
        return self.wrench[2] > 0.0


@dataclass
class Observation:
    tpv: np.ndarray
    wrist: np.ndarray
    tactile: np.ndarray
    proprio: np.ndarray
    prompt_id: int
    tpv_camera: CameraModel
    wrist_camera: CameraModel
    sensor_pose: Pose


def reset(task: str, seed: int, max_steps: int = DEFAULT_MAX_STEPS) -> WorldState:
    """Sample a fresh episode; identical (task, seed) give identical states."""
    index = task_index(task)
    draws = CounterRng(seed, (index, 0)).uniform(7, -1.0, 1.0)
    target_xy = draws[0:2] * WORKSPACE_HALF
    target_yaw = draws[2] * TARGET_YAW
    grasp_offset = draws[3:5] * RESET_GRASP_OFFSET
    occluder = None
    start_z = HOLD_BELOW + PEG_LENGTH
    growth = 0.0
    if task == "peg_in_hole":
        occluder = target_xy + draws[5:7] * OCCLUDER_JITTER
    else:
        start_z = HOLD_BELOW + TOOL_HEIGHT + 0.02
        growth = TILT_GROWTH[0] + (draws[5] + 1.0) / 2.0 * (TILT_GROWTH[1] - TILT_GROWTH[0])
    return WorldState(
        task=task,
        seed=int(seed),
        step_index=0,
        gripper_position=np.array([0.0, 0.0, start_z]),
        gripper_rpy=np.zeros(3),
        aperture=0.0,
        target_xy=target_xy,
        target_yaw=float(target_yaw),
        grasp_offset=grasp_offset,
        wrench=np.zeros(3),
        occluder_center=occluder,
        tilt=np.zeros(2),
        tilt_growth=float(growth),
        max_steps=max_steps,
    )


def clip_action(action: np.ndarray) -> np.ndarray:
    action = np.asarray(action, dtype=np.float64).reshape(-1)
    if action.shape != (7,):
        raise ValueError(f"action must have 7 entries, got {action.shape}")
    if not np.all(np.isfinite(action)):
        raise ValueError("action contains non-finite values")
    clipped = action.copy()
    clipped[0:3] = np.clip(action[0:3], -MAX_TRANSLATION, MAX_TRANSLATION)
    clipped[3:6] = np.clip(action[3:6], -MAX_ROTATION, MAX_ROTATION)
    clipped[6] = np.clip(action[6], 0.0, 1.0)
    return clipped


def _slip(offset: np.ndarray, lateral_move: np.ndarray, normal_force: float) -> Tuple[np.ndarray, np.ndarray]:
    """Return (new grasp offset, friction force on the held object)."""
    distance = np.linalg.norm(lateral_move)
    if normal_force <= 0.0 or distance == 0.0:
        return offset, np.zeros(2)
    direction = lateral_move / distance
    lateral_force = LATERAL_STIFFNESS * distance
    threshold = FRICTION_MU * normal_force
    friction = -direction * min(lateral_force, threshold)
    if lateral_force <= threshold:
        return offset, friction
    slip = SLIP_COMPLIANCE * (lateral_force - threshold)
    return np.clip(offset - direction * slip, -MAX_GRASP_OFFSET, MAX_GRASP_OFFSET), friction


def _peg_contact(state: WorldState, previous: WorldState) -> None:
    tip_prev = previous.held_bottom
    in_hole_prev = tip_prev[2] < 0.0 and np.linalg.norm(tip_prev[:2] - previous.target_xy) <= HOLE_CLEARANCE + 1e-12
    tip = state.held_bottom
    if in_hole_prev and tip[2] < 0.0:
        rel = tip[:2] - state.target_xy
        dist = np.linalg.norm(rel)
        if dist > HOLE_CLEARANCE:
            state.gripper_position[:2] -= rel - rel / dist * HOLE_CLEARANCE
            tip = state.held_bottom
    over_hole = np.linalg.norm(tip[:2] - state.target_xy) <= HOLE_CLEARANCE
    surface = -HOLE_DEPTH if over_hole else 0.0
    if surface - tip[2] > MAX_PENETRATION:
        state.gripper_position[2] = surface - MAX_PENETRATION + HOLD_BELOW
        tip = state.held_bottom
    penetration = max(0.0, surface - tip[2])
    state.wrench[2] = CONTACT_STIFFNESS * penetration
    lateral = np.linalg.norm(tip[:2] - state.target_xy)
    state.success = bool(lateral <= HOLE_CLEARANCE and tip[2] <= -INSERT_DEPTH)


def _tool_contact(state: WorldState) -> None:
    bottom = state.held_bottom
    top = state.tool_top
    overlap = np.all(np.abs(bottom[:2] - top[:2]) <= CUBE_HALF + TOOL_TOP_RADIUS)
    penetration = top[2] - bottom[2] if overlap else 0.0
    if penetration > MAX_PENETRATION:
        state.gripper_position[2] += penetration - MAX_PENETRATION
        penetration = MAX_PENETRATION
    state.wrench[2] = CONTACT_STIFFNESS * max(0.0, penetration)


def _tool_dynamics(state: WorldState) -> None:
    """
    Unstable lean that the pressing cube pulls back toward its own x-y.
    Steps count toward success only while the cube is pressed on the tool.
    """
    state.tilt = state.tilt * (1.0 + state.tilt_growth)
    if state.in_contact:
        cube_xy = state.held_bottom[:2]
        state.tilt = state.tilt + SUPPORT_GAIN * (cube_xy - state.tool_top[:2]) / TOOL_HEIGHT
        if state.step_index % DISTURBANCE_PERIOD == 0:
            angle = CounterRng(state.seed, (task_index(state.task), 2, state.step_index)).uniform(1, 0.0, 2 * np.pi)[0]
            state.tilt = state.tilt + DISTURBANCE_TILT * np.array([np.cos(angle), np.sin(angle)])
    lean = np.linalg.norm(state.tilt)
    if lean > FALL_TILT:
        state.failed = True
    if state.in_contact and lean < STABLE_TILT:
        state.stable_steps += 1
    else:
        state.stable_steps = 0
    state.success = state.stable_steps >= STABLE_STEPS


def step(state: WorldState, action: np.ndarray) -> Tuple[WorldState, bool, bool]:
    """
    Advance one control step.

    Args:
        state: current state (not modified)
        action: 7-vector (dx, dy, dz, droll, dpitch, dyaw, gripper command)

    Returns:
        (next state, done, success)
    """
    action = clip_action(action)
    nxt = state.copy()
    nxt.step_index += 1
    if state.done:
        return nxt, True, state.success

    lateral_move = action[0:2]
    nxt.gripper_position = state.gripper_position + action[0:3]
    nxt.gripper_rpy = state.gripper_rpy + action[3:6]
    nxt.gripper_rpy[0:2] = np.clip(nxt.gripper_rpy[0:2], -WRIST_TILT_LIMIT, WRIST_TILT_LIMIT)
    nxt.aperture = float(action[6])

    if nxt.aperture > DROP_APERTURE:
        nxt.wrench = np.zeros(3)
        nxt.failed = True
        nxt.done = True
        nxt.success = False
        return nxt, True, False

    nxt.grasp_offset, friction = _slip(state.grasp_offset, lateral_move, state.wrench[2])
    if nxt.task == "peg_in_hole":
        _peg_contact(nxt, state)
    else:
        _tool_contact(nxt)
        _tool_dynamics(nxt)
    nxt.wrench[0:2] = friction if nxt.in_contact else 0.0
    nxt.contact_steps = state.contact_steps + int(nxt.in_contact)
    nxt.done = bool(nxt.success or nxt.failed or nxt.step_index >= nxt.max_steps)
    return nxt, nxt.done, nxt.success


def gripper_pose(state: WorldState) -> Pose:
    return Pose.from_euler(state.gripper_rpy, state.gripper_position)


def sensor_pose(state: WorldState) -> Pose:
    return compose(gripper_pose(state), Pose.from_translation(SENSOR_OFFSET))


def tpv_camera() -> CameraModel:
    return CameraModel.look_down(TPV_FOCAL, (0.0, 0.0, TPV_HEIGHT), (IMAGE_SIZE, IMAGE_SIZE))


def wrist_camera(state: WorldState) -> CameraModel:
    p = state.gripper_position
    return CameraModel.look_down(WRIST_FOCAL, (p[0], p[1], p[2] + WRIST_ABOVE), (IMAGE_SIZE, IMAGE_SIZE),
                                 yaw=float(state.gripper_rpy[2]))


@dataclass(frozen=True)
class _Primitive:
    height: float
    shape: str  # "plane", "disk" or "rect"
    center: Tuple[float, float]
    size: Tuple[float, float]
    yaw: float
    color: Tuple[float, float, float]


def _rotate2(vec: np.ndarray, yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([c * vec[0] - s * vec[1], s * vec[0] + c * vec[1]])


def scene_primitives(state: WorldState) -> List[_Primitive]:
    yaw = float(state.gripper_rpy[2])
    grip = state.gripper_position
    bottom = state.held_bottom
    prims = [_Primitive(0.0, "plane", (0.0, 0.0), (0.0, 0.0), 0.0, TABLE_COLOR)]
    if state.task == "peg_in_hole":
        prims.append(_Primitive(0.0, "disk", tuple(state.target_xy), (HOLE_RADIUS, 0.0), 0.0, HOLE_COLOR))
        prims.append(_Primitive(OCCLUDER_HEIGHT, "rect", tuple(state.occluder_center),
                                (OCCLUDER_HALF, OCCLUDER_HALF), state.target_yaw, OCCLUDER_COLOR))
        prims.append(_Primitive(bottom[2] + PEG_LENGTH, "disk", tuple(bottom[:2]), (PEG_RADIUS, 0.0), 0.0, HELD_COLOR))
        finger_gap = PEG_RADIUS + FINGER_HALF[1]
    else:
        top = state.tool_top
        prims.append(_Primitive(0.0, "disk", tuple(state.target_xy), (TOOL_BASE_RADIUS, 0.0), 0.0, TOOL_BASE_COLOR))
        prims.append(_Primitive(top[2], "disk", tuple(top[:2]), (TOOL_TOP_RADIUS, 0.0), 0.0, TOOL_TOP_COLOR))
        prims.append(_Primitive(bottom[2] + 2 * CUBE_HALF, "rect", tuple(bottom[:2]), (CUBE_HALF, CUBE_HALF), yaw, HELD_COLOR))
        finger_gap = CUBE_HALF + FINGER_HALF[1]
    for side in (-1.0, 1.0):
        center = grip[:2] + _rotate2(np.array([0.0, side * finger_gap]), yaw)
        prims.append(_Primitive(grip[2] + FINGER_ABOVE, "rect", tuple(center), FINGER_HALF, yaw, FINGER_COLOR))
    sensor = sensor_pose(state)
    prims.append(_Primitive(sensor.translation[2] + SENSOR_HALF_EXTENTS[2], "rect", tuple(sensor.translation[:2]),
                            SENSOR_HALF_EXTENTS[:2], yaw, SENSOR_COLOR))
    return sorted(prims, key=lambda prim: prim.height)


def rasterize(cam: CameraModel, prims: List[_Primitive]) -> np.ndarray:
    """Flat-shaded painter's rasterization of horizontal primitives, pixel-centre sampled."""
    cam_to_world = Pose(cam.extrinsic.rotation.T, -cam.extrinsic.rotation.T @ cam.extrinsic.translation)
    u, v = np.meshgrid(np.arange(cam.width) + 0.5, np.arange(cam.height) + 0.5)
    rays = np.stack([(u - cam.cx) / cam.fx, (v - cam.cy) / cam.fy, np.ones_like(u)], axis=-1)
    rays = rays @ cam_to_world.rotation.T
    origin = cam_to_world.translation
    image = np.zeros((cam.height, cam.width, 3), dtype=np.float32)
    for prim in prims:
        t = (prim.height - origin[2]) / rays[..., 2]
        hit = t > 0
        x = origin[0] + t * rays[..., 0] - prim.center[0]
        y = origin[1] + t * rays[..., 1] - prim.center[1]
        if prim.shape == "disk":
            hit &= x * x + y * y <= prim.size[0] ** 2
        elif prim.shape == "rect":
            c, s = np.cos(prim.yaw), np.sin(prim.yaw)
            local_x = c * x + s * y
            local_y = -s * x + c * y
            hit &= (np.abs(local_x) <= prim.size[0]) & (np.abs(local_y) <= prim.size[1])
        image[hit] = prim.color
    return image


def _gel_grid(yaw: float) -> Tuple[np.ndarray, np.ndarray]:
    """World-frame x-y offsets (relative to the gripper axis) of every gel pixel centre."""
    coords = (np.arange(GEL_PIXELS) + 0.5 - GEL_PIXELS / 2.0) * GEL_PITCH
    gu, gv = np.meshgrid(coords, coords)
    c, s = np.cos(yaw), np.sin(yaw)
    return c * gu - s * gv, s * gu + c * gv


def contact_height_map(state: WorldState) -> np.ndarray:
    """Penetration height map on the gel grid (unitless, peak = fz / max force)."""
    fz = state.wrench[2]
    if fz <= 0.0:
        return np.zeros((GEL_PIXELS, GEL_PIXELS))
    amplitude = fz / GEL_FORCE_REF
    wx, wy = _gel_grid(float(state.gripper_rpy[2]))
    if state.task == "peg_in_hole":
        dx = wx - state.grasp_offset[0]
        dy = wy - state.grasp_offset[1]
        dome = np.clip(1.0 - (dx * dx + dy * dy) / PEG_RADIUS ** 2, 0.0, None)
        tip = state.held_bottom
        if np.linalg.norm(tip[:2] - state.target_xy) > HOLE_CLEARANCE:
            # resting on the rim: gel point (wx, wy) carries the load of tip point tip + (dx, dy)
            hx = tip[0] + dx - state.target_xy[0]
            hy = tip[1] + dy - state.target_xy[1]
            dome = np.where(hx * hx + hy * hy < HOLE_RADIUS ** 2, 0.0, dome)
        return amplitude * dome
    grip = state.gripper_position[:2]
    rel = state.tool_top[:2] - grip
    dx = wx - rel[0]
    dy = wy - rel[1]
    square = (np.abs(dx) <= TOOL_IMPRINT_HALF) & (np.abs(dy) <= TOOL_IMPRINT_HALF)
    shear = 1.0 + GEL_TILT_SHEAR * (state.tilt[0] * dx + state.tilt[1] * dy) / TOOL_IMPRINT_HALF
    return amplitude * np.where(square, np.clip(shear, 0.0, 2.0), 0.0)


def shade_gel(height: np.ndarray) -> np.ndarray:
    """Three-light Lambertian shading of a gel height map around base level 0.5."""
    smooth = gaussian_filter(height, sigma=GEL_SMOOTHING, mode="constant")
    grad_v, grad_u = np.gradient(smooth)
    norm = np.sqrt(1.0 + grad_u ** 2 + grad_v ** 2)
    normal = np.stack([-grad_u / norm, -grad_v / norm, 1.0 / norm], axis=-1)
    elev = GEL_LIGHT_ELEVATION
    lights = np.stack([np.cos(elev) * np.cos(GEL_LIGHT_AZIMUTHS), np.cos(elev) * np.sin(GEL_LIGHT_AZIMUTHS),
                       np.full(3, np.sin(elev))], axis=-1)
    shading = normal @ lights.T - lights[:, 2]
    image = 0.5 + GEL_SHADING_GAIN * shading - GEL_DEPTH_DARKENING * smooth[..., None]
    return np.clip(image, 0.0, 1.0).astype(np.float32)


def render_tactile(state: WorldState) -> np.ndarray:
    if state.wrench[2] <= 0.0:
        return np.full((GEL_PIXELS, GEL_PIXELS, 3), 0.5, dtype=np.float32)
    return shade_gel(contact_height_map(state))


def tactile_centroid(image: np.ndarray, yaw: float = 0.0) -> Optional[np.ndarray]:
    """
    Contact-weighted centroid of a tactile image in metres (world x-y,
    relative to the gripper axis). None for an untouched gel.
    """
    weights = np.clip(0.5 - image.astype(np.float64).mean(axis=-1), 0.0, None)
    total = weights.sum()
    if total <= 0.0:
        return None
    wx, wy = _gel_grid(yaw)
    return np.array([(weights * wx).sum() / total, (weights * wy).sum() / total])


def proprio(state: WorldState) -> np.ndarray:
    return np.concatenate([state.gripper_position, state.gripper_rpy, [state.aperture]]).astype(np.float32)


def render(state: WorldState) -> Observation:
    prims = scene_primitives(state)
    tpv_cam = tpv_camera()
    wrist_cam = wrist_camera(state)
    return Observation(
        tpv=rasterize(tpv_cam, prims),
        wrist=rasterize(wrist_cam, prims),
        tactile=render_tactile(state),
        proprio=proprio(state),
        prompt_id=task_index(state.task),
        tpv_camera=tpv_cam,
        wrist_camera=wrist_cam,
        sensor_pose=sensor_pose(state),
    )


def _toward(delta: np.ndarray, limit: float) -> np.ndarray:
    norm = np.linalg.norm(delta)
    return delta if norm <= limit else delta / norm * limit


def _expert_peg(state: WorldState, privileged: bool) -> np.ndarray:
    action = np.zeros(7)
    tip = state.held_bottom
    hole = state.target_xy
    rel = hole - tip[:2]
    if tip[2] < 0.0 and np.linalg.norm(rel) <= HOLE_CLEARANCE:
        if tip[2] > -INSERT_DEPTH:
            action[2] = -MAX_TRANSLATION
        return action

    if privileged:
        noise = CounterRng(state.seed, (task_index(state.task), 1)).normal(2, EXPERT_APPROACH_NOISE)
        approach = hole + np.clip(noise, -EXPERT_APPROACH_CLIP, EXPERT_APPROACH_CLIP)
    else:
        approach = state.occluder_center
    if not state.in_contact and tip[2] > EXPERT_HOVER * 0.5:
        lateral = _toward(approach - tip[:2], MAX_TRANSLATION)
        action[0:2] = lateral
        if np.linalg.norm(approach - tip[:2] - lateral) < EXPERT_APPROACH_CLIP:
            action[2] = -min(MAX_TRANSLATION, tip[2] + EXPERT_PRESS)
        else:
            action[2] = float(np.clip(EXPERT_HOVER - tip[2], -MAX_TRANSLATION, MAX_TRANSLATION))
    else:
        # loaded on the surface: feel for the hole
        action[2] = float(np.clip(-EXPERT_PRESS - tip[2], -MAX_TRANSLATION, MAX_TRANSLATION))
        if privileged:
            step_noise = CounterRng(state.seed, (task_index(state.task), 3, state.step_index)).uniform(
                2, -EXPERT_CORRECTION_NOISE, EXPERT_CORRECTION_NOISE)
            correction = _toward(rel, EXPERT_CORRECTION)
            if np.linalg.norm(rel) > EXPERT_CORRECTION:
                correction = correction + step_noise
            action[0:2] = correction
        else:
            turns = state.contact_steps * 0.5
            radius = EXPERT_SPIRAL_PITCH * turns / (2 * np.pi)
            goal = approach + radius * np.array([np.cos(turns), np.sin(turns)])
            action[0:2] = _toward(goal - tip[:2], EXPERT_CORRECTION)
    action[5] = np.clip(state.target_yaw - state.gripper_rpy[2], -MAX_ROTATION, MAX_ROTATION)
    return action


def _expert_tool(state: WorldState) -> np.ndarray:
    action = np.zeros(7)
    bottom = state.held_bottom
    top = state.tool_top
    if not state.in_contact:
        lateral = _toward(top[:2] - bottom[:2], MAX_TRANSLATION)
        action[0:2] = lateral
        gap = bottom[2] - top[2]
        if np.linalg.norm(top[:2] - bottom[:2] - lateral) < EXPERT_APPROACH_CLIP:
            action[2] = -min(MAX_TRANSLATION, gap + EXPERT_PRESS)
        else:
            action[2] = float(np.clip(EXPERT_HOVER - gap, -MAX_TRANSLATION, MAX_TRANSLATION))
    else:
        # push the cube past upright, opposite to the lean
        goal = state.target_xy - TOOL_HEIGHT * state.tilt
        action[0:2] = _toward(goal - bottom[:2], MAX_TRANSLATION)
        action[2] = float(np.clip((top[2] - EXPERT_PRESS) - bottom[2], -MAX_TRANSLATION, MAX_TRANSLATION))
    action[5] = np.clip(state.target_yaw - state.gripper_rpy[2], -MAX_ROTATION, MAX_ROTATION)
    return action


def scripted_expert(state: WorldState, privileged: bool = True) -> np.ndarray:
    """
    Demonstration policy.

    Args:
        state: current world state
        privileged: use the true hole position (otherwise spiral-search around
            the visible occluder)

    Returns:
        7-vector action, already within the clipping limits
    """
    if state.done or state.success:
        return np.zeros(7)
    if state.task == "peg_in_hole":
        return clip_action(_expert_peg(state, privileged))
    return clip_action(_expert_tool(state))


class ContactEnv:
    """Stateful wrapper used by recording and evaluation loops."""

    def __init__(self, task: str, max_steps: int = DEFAULT_MAX_STEPS):
        task_index(task)
        self.task = task
        self.max_steps = max_steps
        self.state: Optional[WorldState] = None

    def reset(self, seed: int) -> Observation:
        self.state = reset(self.task, seed, self.max_steps)
        return render(self.state)

    def step(self, action: np.ndarray) -> Tuple[Observation, bool, bool]:
        if self.state is None:
            raise RuntimeError("call reset() before step()")
        self.state, done, success = step(self.state, action)
        return render(self.state), done, success

    def expert_action(self, privileged: bool = True) -> np.ndarray:
        return scripted_expert(self.state, privileged)


if __name__ == "__main__":
    for task in TASKS:
        env = ContactEnv(task)
        env.reset(seed=0)
        done = success = False
        while not done:
            _, done, success = env.step(env.expert_action())
        status = "✅" if success else "❌"
        print(f"{status} {task}: expert finished in {env.state.step_index} steps (success={success})")
