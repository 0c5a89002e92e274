"""Deterministic planar manipulation environment with a scripted expert.

A fixed palm bar carries two 2-link fingers (4 revolute joints). The
manipulated object is a disk with an orientation spoke. Dynamics are
kinematic: joints track position targets under a speed clamp; disk
penetration by any link capsule is resolved by translating the disk along
the contact normal; an opposing two-contact grip converts tangential
contact motion into disk rotation. Everything is seeded and replayable
bit for bit, which is what makes the learning stack testable: the
environment hands out exact per-point correspondence flow and a geometric
contact oracle instead of simulated forces.

Tasks: "push" (drive the disk center to a target position, tolerance 1 mm)
and "rotate" (drive its orientation to a target angle, tolerance 0.1 rad).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .dataset import Trajectory, traj_filename, write_manifest, write_trajectory
from .encoders import TactileFrame
from .errors import ConfigError, ExpertFailure
from .flow2tactile import ToyHandSpec, build_hand_chain, build_layout
from .geometry import (
    KeypointLayout,
    KinematicChain,
    capsule_outline_length,
    capsule_outline_point,
    keypoint_positions,
    link_transforms,
)

TASKS = ("push", "rotate")
PUSH_TOL = 0.001  # m, inclusive
ROTATE_TOL = 0.1  # rad, inclusive


@dataclass(frozen=True)
class ToyEnvConfig:
    hand: ToyHandSpec = ToyHandSpec()
    disk_radius: float = 0.03
    contact_eps: float = 0.002  # keypoint-to-surface contact threshold (m)
    joint_limit: float = 2.5
    max_joint_speed: float = 2.0  # rad/s
    control_dt: float = 0.04  # s, 25 Hz
    rest_joints: tuple[float, float, float, float] = (2.2, 0.0, -2.2, 0.0)
    sample_box: tuple[tuple[float, float], tuple[float, float]] = ((-0.05, 0.045), (0.05, 0.095))
    workspace_margin: float = 0.03
    push_goal_min_dist: float = 0.02
    rotate_goal_min: float = 0.3
    rotate_goal_max: float = 1.0
    push_step: float = 0.002  # max disk advance per control tick (m)
    rotate_step: float = 0.05  # max grip arc increment, in disk radians
    grip_press: float = 0.0005  # inward press to keep grip contact (m)
    standoff: float = 0.015  # approach waypoint distance beyond contact (m)
    engage_tol: float = 0.0025  # fingertip-to-target distance that counts as engaged (m)
    max_steps: int = 140
    hand_fraction: float = 0.4
    object_fraction: float = 0.4
    spoke_fraction: float = 0.25
    opposing_dot: float = -0.5

    @property
    def grip_radius(self) -> float:
        return self.disk_radius + self.hand.capsule_radius - self.grip_press

    @property
    def contact_radius(self) -> float:
        return self.disk_radius + self.hand.capsule_radius

    @property
    def workspace_box(self) -> tuple[np.ndarray, np.ndarray]:
        (x0, y0), (x1, y1) = self.sample_box
        m = self.workspace_margin
        return np.array([x0 - m, y0 - m]), np.array([x1 + m, y1 + m])


@dataclass(frozen=True)
class EnvState:
    joints: np.ndarray  # (4,)
    obj_pos: np.ndarray  # (2,)
    obj_theta: float


@dataclass(frozen=True)
class Goal:
    task: str
    position: np.ndarray  # disk center target (push) or fixed center (rotate)
    theta: float  # fixed orientation (push) or orientation target (rotate)


def wrap_angle(a: float) -> float:
    return float(math.atan2(math.sin(a), math.cos(a)))


def check_success(state: EnvState, goal: Goal, task: str) -> bool:
    if task == "push":
        return float(np.linalg.norm(state.obj_pos - goal.position)) <= PUSH_TOL
    if task == "rotate":
        return abs(wrap_angle(state.obj_theta - goal.theta)) <= ROTATE_TOL
    raise ConfigError(f"unknown task {task!r}")


def _closest_on_segment(a: np.ndarray, b: np.ndarray, p: np.ndarray) -> tuple[np.ndarray, float]:
    ab = b - a
    denom = float(ab @ ab)
    s = 0.0 if denom == 0.0 else float(np.clip((p - a) @ ab / denom, 0.0, 1.0))
    return a + s * ab, s


def _allocate(total: int, weights) -> np.ndarray:
    w = np.asarray(weights, dtype=np.float64)
    w = w / w.sum()
    base = np.floor(w * total).astype(int)
    frac = w * total - base
    for idx in np.argsort(-frac, kind="stable")[: total - base.sum()]:
        base[idx] += 1
    return base


class ToyEnv:
    def __init__(self, cfg: ToyEnvConfig | None = None):
        self.cfg = cfg or ToyEnvConfig()
        self.chain: KinematicChain = build_hand_chain("toy", self.cfg.hand)
        self.layout: KeypointLayout = build_layout("toy", self.cfg.hand)
        self._state: EnvState | None = None
        self._prev: EnvState | None = None
        self._goal: Goal | None = None
        self._task: str | None = None
        self._obs_seed: int = 0
        self._obs_cache: dict = {}
        self._push_finger: int = 0

    # -- geometry -----------------------------------------------------------

    def _capsule_segments(self, joints) -> list[tuple[np.ndarray, np.ndarray]]:
        """2-D endpoints of the palm and the four finger-link capsules."""
        hand = self.cfg.hand
        tfs = link_transforms(self.chain, joints)
        segs = []
        ph = hand.palm_half_length
        palm = tfs[0]
        segs.append((palm.apply([-ph, 0.0, 0.0])[:2], palm.apply([ph, 0.0, 0.0])[:2]))
        for link in range(1, 5):
            tf = tfs[link]
            segs.append((tf.apply([0.0, 0.0, 0.0])[:2], tf.apply([hand.link_length, 0.0, 0.0])[:2]))
        return segs

    def fingertip(self, finger: int, joints) -> np.ndarray:
        segs = self._capsule_segments(joints)
        return segs[2 + 2 * finger][1]

    def keypoints(self, state: EnvState | None = None) -> np.ndarray:
        state = state or self._state
        return keypoint_positions(self.chain, self.layout, state.joints)

    def contact_oracle(self, state: EnvState | None = None) -> TactileFrame:
        """Binary contact: keypoint within contact_eps of the disk surface."""
        state = state or self._state
        kp = self.keypoints(state)[:, :2]
        dist_to_circle = np.abs(np.linalg.norm(kp - state.obj_pos, axis=1) - self.cfg.disk_radius)
        return TactileFrame((dist_to_circle <= self.cfg.contact_eps).astype(np.float64))

    def in_workspace(self, state: EnvState | None = None) -> bool:
        state = state or self._state
        lo, hi = self.cfg.workspace_box
        return bool(np.all(state.obj_pos >= lo) and np.all(state.obj_pos <= hi))

    # -- reset --------------------------------------------------------------

    def reset(self, task: str, seed) -> tuple[EnvState, Goal]:
        if task not in TASKS:
            raise ConfigError(f"unknown task {task!r}")
        cfg = self.cfg
        rng = np.random.Generator(np.random.PCG64(seed))
        rest = np.asarray(cfg.rest_joints, dtype=np.float64)
        segs = self._capsule_segments(rest)
        lo, hi = np.asarray(cfg.sample_box[0]), np.asarray(cfg.sample_box[1])

        def clear_of_hand(c):
            return all(
                np.linalg.norm(c - _closest_on_segment(a, b, c)[0]) >= cfg.contact_radius + 0.002
                for a, b in segs
            )

        for _ in range(500):
            pos = rng.uniform(lo, hi)
            theta = float(rng.uniform(-math.pi, math.pi))
            if not clear_of_hand(pos):
                continue
            if task == "push":
                goal_pos = rng.uniform(lo, hi)
                if np.linalg.norm(goal_pos - pos) < cfg.push_goal_min_dist:
                    continue
                goal = Goal("push", goal_pos, theta)
                finger = self._feasible_push_finger(pos, goal_pos)
                if finger is None:
                    continue
                self._push_finger = finger
            else:
                delta = float(rng.uniform(cfg.rotate_goal_min, cfg.rotate_goal_max))
                if rng.integers(2):
                    delta = -delta
                goal = Goal("rotate", pos, wrap_angle(theta + delta))
                if not self._rotate_feasible(pos):
                    continue
            state = EnvState(rest.copy(), np.asarray(pos, dtype=np.float64), theta)
            # vet the scene with a dry run of the scripted expert: accepted
            # scenes are exactly those the expert can solve, which keeps
            # approach-sweep collisions out of the reachable distribution
            if not self._dry_run(task, state, goal):
                continue
            self._state = state
            self._prev = state
            self._goal = goal
            self._task = task
            self._obs_seed = int(rng.integers(2**62))
            self._obs_cache = {}
            return state, goal
        raise ConfigError("could not sample a feasible scene; environment misconfigured")

    def _dry_run(self, task: str, state: EnvState, goal: Goal) -> bool:
        self._state = state
        self._prev = state
        self._goal = goal
        self._task = task
        try:
            for _ in range(self.cfg.max_steps):
                nxt = self.step(self.expert_action())
                if not self.in_workspace(nxt):
                    return False
                if check_success(nxt, goal, task):
                    return True
        except ExpertFailure:
            return False
        return False

    def _ik(self, finger: int, target: np.ndarray, margin: float = 0.004):
        """Closed-form 2-link inverse kinematics, one elbow branch per finger.

        ``margin`` keeps targets away from the straight-arm singularity,
        where the speed-clamped joints track poorly.
        """
        hand = self.cfg.hand
        mount = np.array([hand.mounts[finger], 0.0])
        l1 = l2 = hand.link_length
        delta = np.asarray(target, dtype=np.float64) - mount
        d = float(np.linalg.norm(delta))
        if d > l1 + l2 - margin or d < 1e-6:
            return None
        base = math.atan2(delta[1], delta[0])
        cos_g = np.clip((l1 * l1 + d * d - l2 * l2) / (2 * l1 * d), -1.0, 1.0)
        gamma = math.acos(float(cos_g))
        branch = 1.0 if finger == 0 else -1.0  # elbows bend away from the midline
        phi1 = base + branch * gamma
        elbow = mount + l1 * np.array([math.cos(phi1), math.sin(phi1)])
        phi2 = math.atan2(target[1] - elbow[1], target[0] - elbow[0])
        q1 = wrap_angle(phi1 - math.pi / 2)
        q2 = wrap_angle(phi2 - phi1)
        if abs(q1) > self.cfg.joint_limit or abs(q2) > self.cfg.joint_limit:
            return None
        return np.array([q1, q2])

    _PRECHECK_MARGIN = 0.007  # stricter reach margin when vetting a scene

    def _feasible_push_finger(self, start: np.ndarray, goal: np.ndarray):
        cfg = self.cfg
        u = (goal - start) / np.linalg.norm(goal - start)
        candidates = []
        for finger in range(2):
            ok = True
            for lam in np.linspace(0.0, 1.0, 21):
                c = start + lam * (goal - start)
                behind = c - cfg.contact_radius * u
                stand = behind - cfg.standoff * u
                if (
                    self._ik(finger, behind, self._PRECHECK_MARGIN) is None
                    or self._ik(finger, stand, self._PRECHECK_MARGIN) is None
                ):
                    ok = False
                    break
            if ok:
                mount = np.array([cfg.hand.mounts[finger], 0.0])
                candidates.append((float(u @ (start - mount)), finger))
        if not candidates:
            return None
        # prefer the finger approaching from behind the push direction
        return max(candidates)[1]

    def _rotate_feasible(self, center: np.ndarray) -> bool:
        cfg = self.cfg
        m = self._PRECHECK_MARGIN
        x = np.array([1.0, 0.0])
        outer = cfg.contact_radius + cfg.standoff
        if self._ik(1, center + outer * x, m) is None or self._ik(0, center - outer * x, m) is None:
            return False
        # grip points drift with the rotation; vet the full swept range
        for phi in np.linspace(-0.95, 0.95, 13):
            e = np.array([math.cos(phi), math.sin(phi)])
            if (
                self._ik(1, center + cfg.grip_radius * e, m) is None
                or self._ik(0, center - cfg.grip_radius * e, m) is None
            ):
                return False
        return True

    # -- dynamics -----------------------------------------------------------

    def step(self, action) -> EnvState:
        cfg = self.cfg
        action = np.asarray(action, dtype=np.float64)
        if action.shape != (4,):
            raise ValueError(f"action must have length 4, got shape {action.shape}")
        state = self._state
        q = state.joints
        target = np.clip(action, -cfg.joint_limit, cfg.joint_limit)
        max_dq = cfg.max_joint_speed * cfg.control_dt
        q_new = q + np.clip(target - q, -max_dq, max_dq)

        segs_new = self._capsule_segments(q_new)
        segs_old = self._capsule_segments(q)
        c = state.obj_pos.copy()
        theta = state.obj_theta

        # contacts at the new joint configuration, before any resolution
        contacts = []
        for i, (a, b) in enumerate(segs_new):
            closest, s = _closest_on_segment(a, b, c)
            d = float(np.linalg.norm(c - closest))
            pen = cfg.contact_radius - d
            if pen > 0.0 and d > 1e-12:
                normal = (c - closest) / d
                contacts.append((i, normal, s, closest))

        # opposing grip turns tangential contact motion into rotation
        if len(contacts) >= 2:
            opposing = any(
                float(contacts[i][1] @ contacts[j][1]) < cfg.opposing_dot
                for i in range(len(contacts))
                for j in range(i + 1, len(contacts))
            )
            if opposing:
                dtheta = 0.0
                for link, normal, s, _ in contacts:
                    a_old, b_old = segs_old[link]
                    a_new, b_new = segs_new[link]
                    material_old = a_old + s * (b_old - a_old)
                    material_new = a_new + s * (b_new - a_new)
                    disp = material_new - material_old
                    # tangent = z x (outward direction from disk center), so
                    # dragging the surface counterclockwise rotates the disk
                    # counterclockwise (normal points inward, toward center)
                    tangent = np.array([normal[1], -normal[0]])
                    dtheta += float(disp @ tangent) / cfg.disk_radius
                theta = theta + dtheta / len(contacts)

        # translation: resolve penetration along contact normals (simultaneous
        # updates so an opposing grip stays centered), a few passes
        for _ in range(4):
            shift = np.zeros(2)
            for a, b in segs_new:
                closest, _ = _closest_on_segment(a, b, c)
                d = float(np.linalg.norm(c - closest))
                pen = cfg.contact_radius - d
                if pen > 1e-15 and d > 1e-12:
                    shift += pen * (c - closest) / d
            if not shift.any():
                break
            c = c + shift

        new_state = EnvState(q_new, c, wrap_angle(theta))
        self._prev = state
        self._state = new_state
        return new_state

    # -- observation --------------------------------------------------------

    def _surface_params(self, n_points: int, seed: int):
        cfg = self.cfg
        hand = cfg.hand
        rng = np.random.Generator(np.random.PCG64(seed))
        n_hand = int(round(n_points * cfg.hand_fraction))
        n_obj = int(round(n_points * cfg.object_fraction))
        n_goal = n_points - n_hand - n_obj
        if min(n_hand, n_obj, n_goal) < 1:
            raise ValueError(f"n_points {n_points} too small to cover hand, object, and goal")

        rho = hand.capsule_radius
        lengths = [2 * hand.palm_half_length] + [hand.link_length] * 4
        perims = [capsule_outline_length(0.0, L, rho) for L in lengths]
        counts = _allocate(n_hand, perims)
        hand_params = []  # (link, local xy)
        for link, (count, L) in enumerate(zip(counts, lengths)):
            x0 = -hand.palm_half_length if link == 0 else 0.0
            x1 = hand.palm_half_length if link == 0 else hand.link_length
            perim = capsule_outline_length(x0, x1, rho)
            for u in rng.uniform(0.0, perim, size=count):
                hand_params.append((link, capsule_outline_point(u, x0, x1, rho)))

        def disk_params(count):
            n_spoke = int(round(count * cfg.spoke_fraction))
            angles = rng.uniform(0.0, 2 * math.pi, size=count - n_spoke)
            radii = rng.uniform(0.2 * cfg.disk_radius, cfg.disk_radius, size=n_spoke)
            pts = [(cfg.disk_radius * math.cos(a), cfg.disk_radius * math.sin(a)) for a in angles]
            pts += [(r, 0.0) for r in radii]  # orientation spoke along the body x axis
            return np.array(pts)

        return {"hand": hand_params, "object": disk_params(n_obj), "goal": disk_params(n_goal)}

    def _cloud(self, state: EnvState, params) -> np.ndarray:
        tfs = link_transforms(self.chain, state.joints)
        pts = []
        for link, local in params["hand"]:
            tf = tfs[link]
            world = tf.rotation[:2, :2] @ np.asarray(local) + tf.translation[:2]
            pts.append(world)
        rot = np.array(
            [
                [math.cos(state.obj_theta), -math.sin(state.obj_theta)],
                [math.sin(state.obj_theta), math.cos(state.obj_theta)],
            ]
        )
        pts.extend(params["object"] @ rot.T + state.obj_pos)
        pts.extend(self._goal_cloud_2d(params))
        out = np.asarray(pts)
        return np.column_stack([out, np.zeros(len(out))])

    def _goal_cloud_2d(self, params) -> np.ndarray:
        goal = self._goal
        rot = np.array(
            [
                [math.cos(goal.theta), -math.sin(goal.theta)],
                [math.sin(goal.theta), math.cos(goal.theta)],
            ]
        )
        return params["goal"] @ rot.T + goal.position

    def goal_cloud(self, n_points: int, seed: int | None = None) -> np.ndarray:
        params = self._params_for(n_points, seed)
        pts = self._goal_cloud_2d(params)
        return np.column_stack([pts, np.zeros(len(pts))])

    def _params_for(self, n_points: int, seed: int | None):
        key = (n_points, self._obs_seed if seed is None else int(seed))
        if key not in self._obs_cache:
            self._obs_cache[key] = self._surface_params(*key)
        return self._obs_cache[key]

    def observe(self, n_points: int, seed: int | None = None) -> dict:
        """Observation tuple at the current step.

        The surface sample parameters are drawn once per (n_points, seed)
        and reused across frames, so cloud rows are material points and the
        returned flow is the exact correspondence displacement.
        """
        if n_points < 8:
            raise ValueError("n_points must be at least 8")
        params = self._params_for(n_points, seed)
        p_prev = self._cloud(self._prev, params)
        p_cur = self._cloud(self._state, params)
        return {
            "s_prev": self._prev.joints.copy(),
            "s_cur": self._state.joints.copy(),
            "p_prev": p_prev,
            "p_cur": p_cur,
            "tactile": self.contact_oracle(self._state),
            "flow": p_cur - p_prev,
        }

    # -- scripted expert ----------------------------------------------------

    def expert_action(self) -> np.ndarray:
        if self._task == "push":
            return self._expert_push()
        return self._expert_rotate()

    def _in_corridor(self, tip: np.ndarray, goal_pt: np.ndarray, away: np.ndarray, depth: float) -> bool:
        """True when the tip sits inside a thin corridor along the approach
        ray goal_pt + s * away, s in [0, depth]. Inside the corridor the
        expert may target the goal point directly; the test is monotone
        under motion toward the goal point, which rules out phase cycling.
        """
        w = tip - goal_pt
        proj = float(w @ away)
        lateral = float(np.linalg.norm(w - proj * away))
        return lateral <= 0.008 and -0.001 <= proj <= depth + 0.005

    def _expert_push(self) -> np.ndarray:
        """Approach a standoff point behind the disk, slide onto the contact
        point, then advance it toward the goal in capped increments. All
        waypoints depend only on the disk pose, so the speed-clamped joints
        converge onto each one."""
        cfg = self.cfg
        state, goal = self._state, self._goal
        c = state.obj_pos
        rem = float(np.linalg.norm(goal.position - c))
        targets = state.joints.copy()
        if rem <= PUSH_TOL * 0.5:
            return targets  # hold
        u = (goal.position - c) / rem
        behind = c - cfg.contact_radius * u
        stand = behind - cfg.standoff * u
        finger = self._push_finger
        tip = self.fingertip(finger, state.joints)
        if np.linalg.norm(tip - behind) <= cfg.engage_tol:
            target_pt = behind + min(cfg.push_step, rem) * u
        elif self._in_corridor(tip, behind, -u, cfg.standoff):
            target_pt = behind
        else:
            target_pt = stand
        ik = self._ik(finger, target_pt)
        if ik is None:
            raise ExpertFailure(f"push target {target_pt.tolist()} unreachable")
        sl = slice(2 * finger, 2 * finger + 2)
        targets[sl] = ik
        other = slice(2 * (1 - finger), 2 * (1 - finger) + 2)
        targets[other] = np.asarray(cfg.rest_joints, dtype=np.float64)[other]
        return targets

    def _expert_rotate(self) -> np.ndarray:
        """Drive both fingertips to antipodal grip points, then walk them
        tangentially in arc increments capped at rotate_step radians of disk
        rotation."""
        cfg = self.cfg
        state, goal = self._state, self._goal
        c = state.obj_pos
        err = wrap_angle(goal.theta - state.obj_theta)
        targets = state.joints.copy()
        if abs(err) <= ROTATE_TOL * 0.25:
            return targets  # hold
        tip_r = self.fingertip(1, state.joints)
        tip_l = self.fingertip(0, state.joints)
        # the grip axis follows the fingertips once both ride the grip
        # circle roughly antipodally; before that it is the nominal x axis
        ang_r = math.atan2(tip_r[1] - c[1], tip_r[0] - c[0])
        ang_l = math.atan2(tip_l[1] - c[1], tip_l[0] - c[0])
        on_circle = (
            abs(np.linalg.norm(tip_r - c) - cfg.grip_radius) <= 0.006
            and abs(np.linalg.norm(tip_l - c) - cfg.grip_radius) <= 0.006
            and abs(wrap_angle(ang_r - ang_l - math.pi)) <= 0.3
        )
        phi = ang_r if on_circle else 0.0
        e = np.array([math.cos(phi), math.sin(phi)])
        grip_r = c + cfg.grip_radius * e
        grip_l = c - cfg.grip_radius * e
        outer = cfg.contact_radius + cfg.standoff
        engaged = (
            np.linalg.norm(tip_r - grip_r) <= cfg.engage_tol
            and np.linalg.norm(tip_l - grip_l) <= cfg.engage_tol
        )
        reach = outer - cfg.grip_radius
        near = self._in_corridor(tip_r, grip_r, e, reach) and self._in_corridor(
            tip_l, grip_l, -e, reach
        )
        if engaged:
            ds = math.copysign(min(cfg.rotate_step * cfg.disk_radius, abs(err) * cfg.disk_radius), err)
            dphi = ds / cfg.grip_radius
            e_new = np.array([math.cos(phi + dphi), math.sin(phi + dphi)])
            target_r = c + cfg.grip_radius * e_new
            target_l = c - cfg.grip_radius * e_new
        elif near:
            target_r, target_l = grip_r, grip_l
        else:
            target_r, target_l = c + outer * e, c - outer * e
        ik_r = self._ik(1, target_r)
        ik_l = self._ik(0, target_l)
        if ik_r is None or ik_l is None:
            raise ExpertFailure("rotate grip target unreachable")
        targets[0:2] = ik_l
        targets[2:4] = ik_r
        return targets

    @property
    def state(self) -> EnvState:
        return self._state

    @property
    def goal(self) -> Goal:
        return self._goal

    @property
    def task(self) -> str:
        return self._task


# ---------------------------------------------------------------------------
# demonstrations


def rollout_expert(env: ToyEnv, task: str, seed, n_points: int) -> Trajectory | None:
    """Run the expert to success; None when it fails or times out."""
    env.reset(task, seed)
    states, clouds, tactile, flows, actions = [], [], [], [], []

    def record(action):
        obs = env.observe(n_points)
        states.append(obs["s_cur"])
        clouds.append(obs["p_cur"])
        tactile.append(obs["tactile"].values)
        flows.append(obs["flow"])
        actions.append(action)

    try:
        for _ in range(env.cfg.max_steps):
            action = env.expert_action()
            record(action)
            state = env.step(action)
            if not env.in_workspace(state):
                return None
            if check_success(state, env.goal, task):
                record(state.joints.copy())  # terminal hold frame
                goal_cloud = env.goal_cloud(n_points)
                return Trajectory(
                    states=np.asarray(states, dtype=np.float32),
                    clouds=np.asarray(clouds, dtype=np.float32),
                    tactile=np.asarray(tactile, dtype=np.float32),
                    flows=np.asarray(flows, dtype=np.float32),
                    actions=np.asarray(actions, dtype=np.float32),
                    goal_cloud=np.asarray(goal_cloud, dtype=np.float32),
                )
    except ExpertFailure:
        return None
    return None


def generate_demos(task: str, n_trajectories: int, seed: int, out_dir, n_points: int = 128,
                   cfg: ToyEnvConfig | None = None) -> dict:
    """Roll the scripted expert and keep successful trajectories only.

    Deterministic per (task, n, seed, n_points): attempt k uses the seed
    sequence (seed, k). Fails loudly if the expert succeeds on fewer than
    half of its attempts.
    """
    if n_trajectories < 1:
        raise ValueError("need at least one trajectory")
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    env = ToyEnv(cfg)
    kept = 0
    attempts = 0
    while kept < n_trajectories:
        traj = rollout_expert(env, task, np.random.SeedSequence((seed, attempts)), n_points)
        attempts += 1
        if traj is not None:
            write_trajectory(out / traj_filename(kept), traj)
            kept += 1
        if attempts >= 20 and kept / attempts < 0.5:
            raise ConfigError(
                f"expert success rate {kept}/{attempts} below 50%; environment misconfigured"
            )
    write_manifest(
        out,
        task=task,
        n_traj=n_trajectories,
        n_s=4,
        n_p=n_points,
        n_k=len(env.layout),
        d_a=4,
        seed=seed,
    )
    return {"task": task, "n_traj": n_trajectories, "attempts": attempts, "n_points": n_points}
