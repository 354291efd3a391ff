"""Mechanistic slitting-saw cutting simulator with point-mass impedance tracking.

Axes: x transverse (saw axis), y feed direction, z surface normal (up, out of
the material). Forces are those acting on the tool, in newtons.

Observation vector (N_S = 7)::

    0-2  sensed force Fx, Fy, Fz [N]
    3    commanded feed rate [m/min]
    4    normal deviation of the TCP above its reference [mm]
    5    commanded depth of cut [mm]
    6    path progress fraction [0, 1]

Action vector (N_A = 5)::

    0    feed adjustment a_f (0 nominal, 1 double)
    1    depth-of-cut offset to the nominal DoC [mm]
    2-4  stiffness k_x, k_y, k_z [N/m]
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, fields, is_dataclass, replace
from typing import Callable

import numpy as np

from .trajdata import Trajectory, history_window

log = logging.getLogger(__name__)

N_S = 7
N_A = 5
OBS_NAMES = ("fx", "fy", "fz", "feed", "normal_dev", "doc_cmd", "progress")
ACTION_NAMES = ("feed_adjust", "doc_offset", "k_x", "k_y", "k_z")
TWO_PI = 2.0 * math.pi


class SimError(ValueError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass
class CutterModel:
    pitch_angle: float = 0.126
    helix_angle: float = 0.0
    radius: float = 0.025
    width: float = 0.0005
    n_teeth: int = 50
    spindle_speed: float = 1000.0
    radial_ratio: float = 0.3

    def validate(self) -> "CutterModel":
        if self.radius <= 0 or self.width <= 0:
            raise SimError("cutter radius and width must be positive")
        if abs(self.n_teeth * self.pitch_angle - TWO_PI) > 0.02 * TWO_PI:
            raise SimError(f"{self.n_teeth} teeth x pitch {self.pitch_angle} is not a full revolution")
        return self

    @property
    def tooth_spacing(self) -> float:
        return TWO_PI / self.n_teeth

    def scaled_teeth(self, factor: float) -> "CutterModel":
        n = int(round(self.n_teeth * factor))
        return replace(self, n_teeth=n, pitch_angle=self.pitch_angle * self.n_teeth / n)


@dataclass
class MaterialParams:
    name: str = "randomized"
    k_c: float = 150.0
    k_e: float = 0.2
    k_c_range: tuple = (5.0, 5000.0)
    k_e_range: tuple = (0.005, 5.0)
    randomize: bool = False

    def __post_init__(self):
        if self.k_c < 0 or self.k_e < 0:
            raise SimError("K_c and K_e must be nonnegative")

    def sample(self, rng: np.random.Generator) -> "MaterialParams":
        """Log-uniform draw of (K_c, K_e) when randomisation is on."""
        if not self.randomize:
            return self
        lc = rng.uniform(math.log(self.k_c_range[0]), math.log(self.k_c_range[1]))
        # K_e follows K_c with a little independent spread
        frac = (lc - math.log(self.k_c_range[0])) / (math.log(self.k_c_range[1]) - math.log(self.k_c_range[0]))
        le_lo, le_hi = math.log(self.k_e_range[0]), math.log(self.k_e_range[1])
        le = le_lo + frac * (le_hi - le_lo) + rng.normal(0.0, 0.3)
        return replace(self, name="randomized", k_c=math.exp(lc),
                       k_e=float(np.clip(math.exp(le), *self.k_e_range)), randomize=False)


SURROGATE_MATERIALS = {
    "foam": MaterialParams("foam", 8.0, 0.01),
    "cardboard": MaterialParams("cardboard", 40.0, 0.05),
    "plastic": MaterialParams("plastic", 150.0, 0.2),
    "mica": MaterialParams("mica", 600.0, 0.6),
    "aluminium": MaterialParams("aluminium", 2000.0, 2.0),
}


@dataclass
class ImpedanceConfig:
    mass: float = 5.0
    k_min: float = 100.0
    k_max: float = 5000.0


@dataclass
class Geometry:
    kind: str = "flat"  # flat | offset | curved
    offset_depth: float = 0.001  # m, true surface above the planned one
    curvature: float = 3.0  # 1/m, convex arc

    def __post_init__(self):
        if self.kind not in ("flat", "offset", "curved"):
            raise SimError(f"unknown geometry {self.kind!r}")


@dataclass
class Perturbation:
    sensor_lag: float = 0.0  # s, first-order lag time constant
    drift_rate: float = 0.0  # N/s, sensor bias drift
    drift_direction: tuple = (0.0, 0.6, 0.8)
    backlash: float = 0.0  # m, deadband width on the reference
    teeth_multiplier: float = 1.0
    k_scale: float = 1.0  # multiplies K_c and K_e

    def is_identity(self) -> bool:
        return (self.sensor_lag == 0 and self.drift_rate == 0 and self.backlash == 0
                and self.teeth_multiplier == 1 and self.k_scale == 1)


TARGET_PERTURBATION = Perturbation(sensor_lag=0.04, drift_rate=0.02, backlash=0.0002,
                                   teeth_multiplier=2.0, k_scale=1.3)


@dataclass
class SimConfig:
    cutter: CutterModel = field(default_factory=CutterModel)
    material: MaterialParams = field(default_factory=lambda: MaterialParams(randomize=True))
    impedance: ImpedanceConfig = field(default_factory=ImpedanceConfig)
    geometry: Geometry = field(default_factory=Geometry)
    perturbation: Perturbation = field(default_factory=Perturbation)
    nominal_feed: float = 0.75  # m/min
    nominal_doc: float = 1.0  # mm
    path_length: float = 0.2  # m
    entry: float = 0.02  # m, start of material along the path
    control_dt: float = 0.002
    obs_dt: float = 0.02
    window: int = 100
    initial_action: tuple = (-0.5, 0.0, 1000.0, 1000.0, 1000.0)
    feed_bounds: tuple = (-0.5, 1.0)
    doc_offset_bounds: tuple = (-1.0, 1.0)
    max_time: float = 60.0
    seed: int = 0

    def __post_init__(self):
        ratio = self.obs_dt / self.control_dt
        if abs(ratio - round(ratio)) > 1e-9 or round(ratio) < 1:
            raise SimError("obs_dt must be an integer multiple of control_dt")
        self.cutter.validate()

    @property
    def substeps(self) -> int:
        return int(round(self.obs_dt / self.control_dt))

    def effective_cutter(self) -> CutterModel:
        m = self.perturbation.teeth_multiplier
        return self.cutter if m == 1 else self.cutter.scaled_teeth(m)

    def action_bounds(self) -> tuple[np.ndarray, np.ndarray]:
        lo = np.array([self.feed_bounds[0], self.doc_offset_bounds[0]] + [self.impedance.k_min] * 3)
        hi = np.array([self.feed_bounds[1], self.doc_offset_bounds[1]] + [self.impedance.k_max] * 3)
        return lo, hi

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        return _from_dict(cls, d)


def _from_dict(cls, d):
    kwargs = {}
    for f in fields(cls):
        if f.name not in d:
            continue
        v = d[f.name]
        ftype = f.type if not isinstance(f.type, str) else globals().get(f.type)
        if ftype is not None and is_dataclass(ftype) and isinstance(v, dict):
            v = _from_dict(ftype, v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[f.name] = v
    return cls(**kwargs)


def target_config(cfg: SimConfig, perturbation: Perturbation | None = None) -> SimConfig:
    return replace(cfg, perturbation=perturbation or TARGET_PERTURBATION)


def episode_seeds(master: int, n: int, stream: int | None = None) -> list[int]:
    """Per-episode seeds: children of ``SeedSequence(master)`` (or of
    ``SeedSequence([master, stream])`` for an independent stream), first
    32-bit word of each child."""
    root = np.random.SeedSequence(master if stream is None else [master, stream])
    return [int(s.generate_state(1)[0]) for s in root.spawn(n)]


# ---------------------------------------------------------------------------
# cutting force


def _tooth_force(cutter: CutterModel, k_c: float, k_e: float, f_t_mm: float, phi: float) -> tuple[float, float]:
    """(feed-resisting, normal-pushing) force of one engaged tooth at angle phi."""
    b = cutter.width * 1000.0
    ft = k_c * f_t_mm * math.sin(phi) * b + k_e * b
    fr = cutter.radial_ratio * ft
    c, s = math.cos(phi), math.sin(phi)
    return -ft * c - fr * s, ft * s - fr * c


def immersion_start(cutter: CutterModel, doc_mm: float) -> float:
    return math.pi - math.acos(1.0 - doc_mm / (cutter.radius * 1000.0))


def cutting_force(cutter: CutterModel, material: MaterialParams, doc: float, feed: float,
                  spindle_angle: float) -> np.ndarray:
    """Instantaneous force on the tool for DoC [mm], feed [m/min], spindle angle [rad]."""
    fy, fz = _cutting_force(cutter, material.k_c, material.k_e, doc, feed, spindle_angle)
    return np.array([0.0, fy, fz])


def _cutting_force(cutter, k_c, k_e, doc, feed, spindle_angle) -> tuple[float, float]:
    if doc < 0 or feed < 0:
        raise SimError("doc and feed must be nonnegative")
    r_mm = cutter.radius * 1000.0
    if doc > 2 * r_mm:
        raise SimError(f"depth of cut {doc} mm buries the tool (diameter {2 * r_mm} mm)")
    if doc == 0:
        return 0.0, 0.0
    f_t = feed / (cutter.n_teeth * cutter.spindle_speed) * 1000.0
    phi_st = immersion_start(cutter, doc)
    sp = cutter.tooth_spacing
    base = spindle_angle % sp
    m0 = max(0, math.ceil((phi_st - base) / sp))
    m1 = min(cutter.n_teeth - 1, math.floor((math.pi - base) / sp))
    resist = push = 0.0
    for m in range(m0, m1 + 1):
        phi = base + m * sp
        r, p = _tooth_force(cutter, k_c, k_e, f_t, phi)
        resist += r
        push += p
    return -resist, push


def mean_cutting_force(cutter: CutterModel, material: MaterialParams, doc: float, feed: float,
                       samples: int = 256) -> np.ndarray:
    """Force averaged over one tooth period (equal to the per-revolution mean)."""
    angles = (np.arange(samples) + 0.5) * cutter.tooth_spacing / samples
    return np.mean([cutting_force(cutter, material, doc, feed, a) for a in angles], axis=0)


# ---------------------------------------------------------------------------
# sensor / gravity compensation


class ForceSensor:
    """First-order lag (exact discretisation) plus a linearly drifting bias."""

    def __init__(self, lag: float = 0.0, drift_rate: float = 0.0, direction=(0.0, 0.6, 0.8)):
        self.lag = lag
        self.drift = drift_rate * np.asarray(direction, dtype=float)
        self.value = np.zeros(3)
        self.time = 0.0

    def update(self, force, dt: float) -> np.ndarray:
        alpha = 1.0 if self.lag <= 0 else -math.expm1(-dt / self.lag)
        self.value = self.value + alpha * (np.asarray(force, dtype=float) - self.value)
        self.time += dt
        return self.reading()

    def reading(self) -> np.ndarray:
        return self.value + self.drift * self.time


def _check_rotation(R: np.ndarray, name: str):
    R = np.asarray(R, dtype=float)
    if R.shape != (3, 3) or not np.allclose(R @ R.T, np.eye(3), atol=1e-9, rtol=0):
        raise SimError(f"{name} is not an orthonormal 3x3 rotation")
    return R


def gravity_compensate(f_ee, R_we, R_we0, m: float, g: float = 9.81) -> np.ndarray:
    """World-frame external force from a wrist reading biased at pose ``R_we0``.

    ``R_we``/``R_we0`` rotate end-effector vectors into the world frame at the
    current and bias poses; the tool weight seen at bias time is removed and
    the weight seen now is added back.
    """
    R = _check_rotation(R_we, "R_we")
    R0 = _check_rotation(R_we0, "R_we0")
    z = np.array([0.0, 0.0, 1.0])
    return R @ np.asarray(f_ee, dtype=float) + m * g * (z - R @ R0.T @ z)


# ---------------------------------------------------------------------------
# simulator


@dataclass
class StepRecord:
    force: np.ndarray
    depth: float
    feed_speed: float


class Simulator:
    """One cutting pass; ``advance`` integrates one observation period."""

    def __init__(self, cfg: SimConfig, seed: int | None = None, material: MaterialParams | None = None):
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.seed if seed is None else seed)
        mat = (material or cfg.material).sample(self.rng)
        ks = cfg.perturbation.k_scale
        self.material = replace(mat, k_c=mat.k_c * ks, k_e=mat.k_e * ks)
        self.base_material = mat
        self.cutter = cfg.effective_cutter()
        self.spindle = float(self.rng.uniform(0.0, TWO_PI))
        self.omega = cfg.cutter.spindle_speed * TWO_PI / 60.0
        p = cfg.perturbation
        self.sensor = ForceSensor(p.sensor_lag, p.drift_rate, p.drift_direction)
        lo, hi = cfg.action_bounds()
        self.lo, self.hi = lo, hi
        self.action = np.clip(np.asarray(cfg.initial_action, dtype=float), lo, hi)
        self.s = 0.0
        self.t = 0.0
        self.completion_time = 0.0 if cfg.path_length <= 0 else None
        self.fault = False
        self.clamp_events = 0
        ref = self._reference(0.0, self.action[1])
        self.ref_eff = ref.copy()
        self.doc_prev = self.action[1]
        self.pos = ref.copy()
        self.vel = np.zeros(3)
        self.true_force = np.zeros(3)
        self.depth = 0.0

    # -- geometry -----------------------------------------------------------
    def planned_surface(self, y: float) -> float:
        g = self.cfg.geometry
        if g.kind == "curved":
            return self._arc(y)
        return 0.0

    def true_surface(self, y: float) -> float:
        g = self.cfg.geometry
        if g.kind == "offset":
            return g.offset_depth
        if g.kind == "curved":
            return self._arc(y)
        return 0.0

    def _arc(self, y: float) -> float:
        R = 1.0 / self.cfg.geometry.curvature
        d = y - 0.5 * self.cfg.path_length
        return math.sqrt(max(R * R - d * d, 0.0)) - R

    def _reference(self, s: float, doc_offset: float) -> np.ndarray:
        doc = max(self.cfg.nominal_doc + doc_offset, 0.0)
        return np.array([0.0, s, self.planned_surface(s) - doc / 1000.0])

    @property
    def feed_cmd(self) -> float:
        return self.cfg.nominal_feed * (1.0 + self.action[0])

    @property
    def doc_cmd(self) -> float:
        return max(self.cfg.nominal_doc + self.action[1], 0.0)

    @property
    def progress(self) -> float:
        if self.cfg.path_length <= 0:
            return 1.0
        return min(max(self.s / self.cfg.path_length, 0.0), 1.0)

    @property
    def done(self) -> bool:
        return self.fault or self.completion_time is not None

    # -- dynamics -----------------------------------------------------------
    def set_action(self, action) -> None:
        a = np.asarray(action, dtype=float)
        if a.shape != (N_A,):
            raise SimError(f"action must have {N_A} entries")
        if not np.all(np.isfinite(a)):
            raise SimError("non-finite action")
        clipped = np.clip(a, self.lo, self.hi)
        if np.any(clipped != a):
            self.clamp_events += 1
            log.debug("action clamped: %s -> %s", a, clipped)
        self.action = clipped

    def step(self) -> StepRecord:
        """Integrate one control period (semi-implicit Euler)."""
        cfg = self.cfg
        dt = cfg.control_dt
        if self.completion_time is None:
            self.s += self.feed_cmd / 60.0 * dt
            if self.s >= cfg.path_length * (1.0 - 1e-12):
                self.s = cfg.path_length
                self.completion_time = self.t + dt
        ref = self._reference(self.s, self.action[1])
        # velocity feed-forward follows the path only; a changed DoC command is a set-point step
        path = self._reference(self.s, self.doc_prev)
        old_eff = self.ref_eff
        play = 0.5 * cfg.perturbation.backlash
        ref_vel = (np.clip(old_eff, path - play, path + play) - old_eff) / dt
        self.ref_eff = np.clip(old_eff, ref - play, ref + play)
        self.doc_prev = self.action[1]
        k = self.action[2:5]
        d = 2.0 * np.sqrt(cfg.impedance.mass * k)
        f_imp = k * (self.ref_eff - self.pos) + d * (ref_vel - self.vel)

        y = self.pos[1]
        depth = 0.0
        if y >= cfg.entry:
            depth = max(self.true_surface(y) - self.pos[2], 0.0) * 1000.0
        feed_speed = max(self.vel[1], 0.0)
        force = np.zeros(3)
        if depth > 0:
            if depth > 2000.0 * self.cutter.radius:
                self.fault = True
                depth = 2000.0 * self.cutter.radius
            fy, fz = _cutting_force(self.cutter, self.material.k_c, self.material.k_e,
                                    depth, feed_speed * 60.0, self.spindle)
            force[1], force[2] = fy, fz
        acc = (f_imp + force) / cfg.impedance.mass
        self.vel = self.vel + acc * dt
        self.pos = self.pos + self.vel * dt
        self.spindle = (self.spindle + self.omega * dt) % TWO_PI
        self.t += dt
        self.true_force = force
        self.depth = depth
        self.sensor.update(force, dt)
        bound = 10.0 * max(cfg.path_length, 0.01)
        if not np.all(np.isfinite(self.pos)) or np.max(np.abs(self.pos - ref)) > bound:
            self.fault = True
        return StepRecord(force, depth, feed_speed)

    def observe(self) -> np.ndarray:
        ref = self._reference(self.s, self.action[1])
        f = self.sensor.reading()
        return np.array([f[0], f[1], f[2], self.feed_cmd, (self.pos[2] - ref[2]) * 1000.0,
                         self.doc_cmd, self.progress])

    def advance(self, action) -> tuple[np.ndarray, dict]:
        """Apply ``action`` for one observation period; return (observation, block stats)."""
        self.set_action(action)
        forces, depth_sum, mrv, contact, n = 0.0, 0.0, 0.0, 0, 0
        width_mm = self.cutter.width * 1000.0
        for _ in range(self.cfg.substeps):
            if self.done:
                break
            rec = self.step()
            n += 1
            if rec.depth > 0:
                contact += 1
                forces += float(np.linalg.norm(rec.force))
                depth_sum += rec.depth
            mrv += rec.depth * width_mm * rec.feed_speed * 1000.0 * self.cfg.control_dt
        block = {"steps": n, "contact_steps": contact, "force_sum": forces, "depth_sum": depth_sum, "mrv": mrv}
        return self.observe(), block


# ---------------------------------------------------------------------------
# policies


Policy = Callable[[np.ndarray], np.ndarray]


class ConstantPolicy:
    """Holds process parameters fixed (the nominal-feed baseline by default)."""

    def __init__(self, action=(0.0, 0.0, 1000.0, 1000.0, 1000.0)):
        self.action = np.asarray(action, dtype=float)

    def __call__(self, window):
        return self.action.copy()


@dataclass
class ExpertParams:
    target_force: float = 3.0
    feed_gain: float = 0.02
    feed_rate_up: float = 0.002
    feed_rate_down: float = 0.02
    doc_gain: float = 0.2
    doc_rate: float = 0.01
    smooth: int = 5
    k_base: tuple = (1500.0, 1000.0, 800.0)
    k_gain: tuple = (200.0, 300.0, 400.0)
    nominal_feed: float = 0.75
    nominal_doc: float = 1.0
    feed_bounds: tuple = (-0.5, 1.0)
    doc_offset_bounds: tuple = (-1.0, 1.0)
    k_bounds: tuple = (100.0, 5000.0)


def scripted_expert(window: np.ndarray, params: ExpertParams | None = None) -> np.ndarray:
    """Force-regulating controller acting on a raw observation window.

    The feed adjustment moves from the last commanded value at a rate
    proportional to the relative force error (slow increase, faster decrease),
    so it is nonincreasing in the sensed force and stationary at the target.
    Depth of cut is nudged toward nominal engagement, and stiffness rises
    linearly with sensed force.
    """
    p = params or ExpertParams()
    w = np.asarray(window, dtype=float)
    recent = w[-p.smooth:]
    force = float(np.mean(np.linalg.norm(recent[:, 0:3], axis=1)))
    last = w[-1]
    a_prev = min(max(last[3] / p.nominal_feed - 1.0, p.feed_bounds[0]), p.feed_bounds[1])
    err = (p.target_force - force) / p.target_force
    rate = min(max(p.feed_gain * err, -p.feed_rate_down), p.feed_rate_up)
    a_f = min(max(a_prev + rate, p.feed_bounds[0]), p.feed_bounds[1])

    deviation = float(np.mean(recent[:, 4]))
    doc_prev = last[5]
    engagement = doc_prev - deviation
    step = min(max(p.doc_gain * (p.nominal_doc - engagement), -p.doc_rate), p.doc_rate)
    offset = min(max(doc_prev + step - p.nominal_doc, p.doc_offset_bounds[0]), p.doc_offset_bounds[1])

    k = np.clip(np.asarray(p.k_base) + np.asarray(p.k_gain) * force, *p.k_bounds)
    return np.array([a_f, offset, k[0], k[1], k[2]])


class ScriptedExpert:
    def __init__(self, params: ExpertParams | None = None):
        self.params = params or ExpertParams()

    def __call__(self, window):
        return scripted_expert(window, self.params)


class RandomActionPolicy:
    """Smooth random actions: mean-reverting random walk in [-1, 1] units."""

    def __init__(self, bounds: tuple[np.ndarray, np.ndarray], rng: np.random.Generator,
                 theta: float = 0.02, sigma: float = 0.08):
        self.lo, self.hi = bounds
        self.rng = rng
        self.theta = theta
        self.sigma = sigma
        self.mean = rng.uniform(-0.6, 0.6, size=N_A)
        self.u = self.mean.copy()

    def __call__(self, window):
        self.u += self.theta * (self.mean - self.u) + self.sigma * self.rng.standard_normal(N_A)
        self.u = np.clip(self.u, -1.0, 1.0)
        return self.lo + 0.5 * (self.u + 1.0) * (self.hi - self.lo)


# ---------------------------------------------------------------------------
# episodes


@dataclass
class Episode:
    trajectory: Trajectory
    meta: dict
    blocks: dict  # per-observation arrays (contact, force, depth, mrv)


def run_episode(cfg: SimConfig, policy: Policy, seed: int | None = None, episode_id: str = "ep",
                material: MaterialParams | None = None, domain: str | None = None) -> Episode:
    """Roll out ``policy`` until the path is complete or the simulation faults.

    Row t of the trajectory holds the observation at t and the action chosen
    from the window of observations ending at t (zero rows before the start).
    """
    seed = cfg.seed if seed is None else seed
    sim = Simulator(cfg, seed, material)
    domain = domain or ("source" if cfg.perturbation.is_identity() else "target")
    N = cfg.window
    max_rows = int(math.ceil(cfg.max_time / cfg.obs_dt)) + 1
    states = np.zeros((max_rows, N_S))
    actions = np.zeros((max_rows, N_A))
    blocks = {k: np.zeros(max_rows) for k in ("steps", "contact_steps", "force_sum", "depth_sum", "mrv")}
    obs = sim.observe()
    T = 0
    while not sim.done and T < max_rows and sim.t < cfg.max_time - 1e-12:
        states[T] = obs
        a = np.asarray(policy(history_window(states, T, N)), dtype=float)
        obs, block = sim.advance(a)
        actions[T] = sim.action
        for k, v in block.items():
            blocks[k][T] = v
        T += 1
    if sim.completion_time is None and not sim.fault:
        sim.fault = True
        log.warning("episode %s hit the time limit", episode_id)
    traj = Trajectory(episode_id, cfg.obs_dt, states[:T].copy(), actions[:T].copy(), domain)
    meta = {
        "id": episode_id,
        "seed": int(seed),
        "completion_time": float(sim.completion_time if sim.completion_time is not None else sim.t),
        "fault": bool(sim.fault),
        "material": sim.base_material.name,
        "k_c": float(sim.base_material.k_c),
        "k_e": float(sim.base_material.k_e),
        "geometry": cfg.geometry.kind,
        "clamp_events": int(sim.clamp_events),
        "width_mm": cfg.cutter.width * 1000.0,
    }
    return Episode(traj, meta, {k: v[:T].copy() for k, v in blocks.items()})
