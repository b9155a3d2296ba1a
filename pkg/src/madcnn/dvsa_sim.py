"""Synthetic two-joint manipulator with discrete variable stiffness actuation.

Each joint is a link inertia behind a pure torsional spring whose stiffness
is switched between fixed levels; an ideally position-controlled motor drags
the spring's far end along a trapezoidal point-to-point trajectory. Contacts
are half-sine torque pulses on the link side, labeled 1 for exactly the
samples the pulse is active. The recorded channels are the spring torque and
the link velocity, each with additive Gaussian sensor noise, sampled at
1 kHz.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .datapipe import SAMPLE_RATE_HZ, Trace
from .errors import ConfigError, NumericError

# Equivalent spring stiffness (N·m/rad) per engagement level.
STIFFNESS_TABLE = {1: 6.0, 2: 50.0, 3: 160.0, 4: 246.0}

TRAIN_LEVEL = 4
TEST_LEVELS = (4, 3, 2)
TRAIN_COLLISION_MINUTES = 4.0
TEST_COLLISION_MINUTES = 10.0
TEST_FREE_MINUTES = 15.0

_DT = 1.0 / SAMPLE_RATE_HZ
_DIVERGENCE_LIMIT = 1e6


@dataclass
class SimConfig:
    """Physical constants, motion profile limits, and contact statistics."""

    link_inertia: tuple[float, float] = (0.05, 0.05)       # kg·m²
    link_damping: tuple[float, float] = (1.5, 1.5)         # N·m·s/rad
    stiffness_table: dict[int, float] = field(default_factory=lambda: dict(STIFFNESS_TABLE))
    torque_noise_std: float = 0.02                          # N·m
    velocity_noise_std: float = 0.005                       # rad/s
    max_speed: float = 1.5                                  # rad/s
    max_accel: float = 3.0                                  # rad/s²
    dwell_range_s: tuple[float, float] = (0.2, 1.0)
    joint_limits_rad: tuple[float, float] = (-1.5, 1.5)
    collision_rate_per_min: float = 17.2
    collision_peak_range: tuple[float, float] = (1.0, 8.0)  # N·m
    collision_duration_range_ms: tuple[int, int] = (30, 80)
    collision_min_separation_s: float = 1.0

    def __post_init__(self):
        if any(v <= 0 for v in self.link_inertia) or any(v <= 0 for v in self.link_damping):
            raise ConfigError("link inertia and damping must be positive")
        if self.stiffness_table != STIFFNESS_TABLE:
            raise ConfigError(f"stiffness table must match {STIFFNESS_TABLE}")
        if self.torque_noise_std < 0 or self.velocity_noise_std < 0:
            raise ConfigError("noise levels cannot be negative")
        if self.max_speed < 0 or self.max_accel < 0:
            raise ConfigError("motion limits cannot be negative")
        if self.dwell_range_s[0] < 0 or self.dwell_range_s[1] < self.dwell_range_s[0]:
            raise ConfigError("bad dwell range")
        if self.joint_limits_rad[1] <= self.joint_limits_rad[0]:
            raise ConfigError("bad joint limits")
        lo, hi = self.collision_duration_range_ms
        if not (20 <= lo <= hi <= 120):
            raise ConfigError("contact duration range must lie within [20, 120] ms")
        if self.collision_min_separation_s * 1000 < hi:
            raise ConfigError("min separation must cover the longest contact")
        if self.collision_peak_range[0] <= 0 or self.collision_peak_range[1] < self.collision_peak_range[0]:
            raise ConfigError("bad contact peak range")
        if self.collision_rate_per_min < 0:
            raise ConfigError("collision rate cannot be negative")
        if self.collision_rate_per_min > 0:
            mean_gap = 60.0 / self.collision_rate_per_min
            if mean_gap <= self.collision_min_separation_s:
                raise ConfigError("collision rate is too high for the min separation")


@dataclass
class CollisionEvent:
    """One contact pulse; joint_index is 1-based."""

    joint_index: int
    start_ms: int
    duration_ms: int
    peak_torque: float
    sign: int

    def __post_init__(self):
        if self.joint_index not in (1, 2):
            raise ConfigError("joint_index must be 1 or 2")
        if self.duration_ms <= 0:
            raise ConfigError("duration must be positive")
        if self.sign not in (-1, 1):
            raise ConfigError("sign must be -1 or +1")


# ---------------------------------------------------------------------------
# motion


def _trapezoid_samples(distance: float, vmax: float, amax: float) -> tuple[np.ndarray, np.ndarray]:
    """Position/velocity samples of one point-to-point move starting at 0."""
    sign = 1.0 if distance >= 0 else -1.0
    dist = abs(distance)
    t_acc = vmax / amax
    d_acc = 0.5 * amax * t_acc * t_acc
    if 2.0 * d_acc <= dist:
        t_cruise = (dist - 2.0 * d_acc) / vmax
        v_peak = vmax
    else:
        t_acc = math.sqrt(dist / amax)
        t_cruise = 0.0
        v_peak = amax * t_acc
    t_total = 2.0 * t_acc + t_cruise
    n = int(math.ceil(t_total * SAMPLE_RATE_HZ))
    t = np.arange(n) * _DT
    pos = np.empty(n)
    vel = np.empty(n)
    ramp = t < t_acc
    cruise = (~ramp) & (t < t_acc + t_cruise)
    decel = ~(ramp | cruise)
    pos[ramp] = 0.5 * amax * t[ramp] ** 2
    vel[ramp] = amax * t[ramp]
    pos[cruise] = d_acc + v_peak * (t[cruise] - t_acc)
    vel[cruise] = v_peak
    td = t_total - t[decel]
    pos[decel] = dist - 0.5 * amax * td * td
    vel[decel] = amax * td
    return sign * pos, sign * vel


def generate_trajectory(
    duration_s: float, config: SimConfig, seed: int
) -> tuple[np.ndarray, np.ndarray]:
    """Motor-side (position, velocity) profiles, each (2, N).

    Random point-to-point trapezoidal moves inside the joint limits with
    random dwells in between; velocity is continuous and respects the
    configured speed and acceleration limits by construction.
    """
    if duration_s <= 0:
        raise ConfigError("trajectory duration must be positive")
    n = int(round(duration_s * SAMPLE_RATE_HZ))
    rng = np.random.default_rng(seed)
    pos = np.empty((2, n))
    vel = np.zeros((2, n))
    lo, hi = config.joint_limits_rad
    for j in range(2):
        current = 0.5 * (lo + hi)
        cursor = 0
        pos[j, :] = current
        while cursor < n:
            dwell = int(round(rng.uniform(*config.dwell_range_s) * SAMPLE_RATE_HZ))
            stop = min(cursor + max(dwell, 1), n)
            pos[j, cursor:stop] = current
            vel[j, cursor:stop] = 0.0
            cursor = stop
            if cursor >= n:
                break
            target = rng.uniform(lo, hi)
            if config.max_speed == 0.0 or config.max_accel == 0.0:
                continue  # no motion possible; profile stays constant
            seg_pos, seg_vel = _trapezoid_samples(
                target - current, config.max_speed, config.max_accel
            )
            take = min(seg_pos.size, n - cursor)
            pos[j, cursor:cursor + take] = current + seg_pos[:take]
            vel[j, cursor:cursor + take] = seg_vel[:take]
            if take == seg_pos.size:
                current = target
            elif take > 0:
                current = pos[j, cursor + take - 1]
            cursor += take
    return pos, vel


# ---------------------------------------------------------------------------
# contact schedule


def schedule_collisions(duration_s: float, config: SimConfig, seed: int) -> list[CollisionEvent]:
    """Random contact events at the configured mean rate.

    Start-to-start gaps are min_separation plus an exponential draw whose
    mean is chosen so the realized rate matches collision_rate_per_min;
    the separation constraint therefore holds by construction.
    """
    if duration_s <= 0:
        raise ConfigError("schedule duration must be positive")
    if config.collision_rate_per_min == 0:
        return []
    mean_gap = 60.0 / config.collision_rate_per_min
    extra = mean_gap - config.collision_min_separation_s
    rng = np.random.default_rng(seed)
    n_ms = int(round(duration_s * 1000))
    dur_lo, dur_hi = config.collision_duration_range_ms
    tail_margin = dur_hi + 50
    events: list[CollisionEvent] = []
    t = config.collision_min_separation_s + rng.exponential(extra)
    while True:
        start_ms = int(round(t * 1000))
        if start_ms + tail_margin >= n_ms:
            break
        duration = int(rng.integers(dur_lo, dur_hi + 1))
        joint = int(rng.integers(1, 3))
        peak = float(rng.uniform(*config.collision_peak_range))
        sign = 1 if rng.random() < 0.5 else -1
        events.append(CollisionEvent(joint, start_ms, duration, peak, sign))
        t += config.collision_min_separation_s + rng.exponential(extra)
    return events


def _contact_profile(events, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Per-sample external torque (2, N) and label (N,) from the schedule."""
    tau_ext = np.zeros((2, n))
    label = np.zeros(n, dtype=np.int8)
    for ev in events:
        stop = min(ev.start_ms + ev.duration_ms, n)
        k = np.arange(stop - ev.start_ms)
        pulse = ev.sign * ev.peak_torque * np.sin(math.pi * (k + 0.5) / ev.duration_ms)
        tau_ext[ev.joint_index - 1, ev.start_ms:stop] += pulse
        label[ev.start_ms:stop] = 1
    return tau_ext, label


# ---------------------------------------------------------------------------
# dynamics


def simulate_trace(
    config: SimConfig,
    stiffness_level: int,
    events,
    trajectory: tuple[np.ndarray, np.ndarray],
    seed: int,
) -> Trace:
    """Integrate the spring-link dynamics at 1 kHz and record the channels.

    Per joint: J * th_dd = -b * th_d + K * (th_motor - th) + tau_ext,
    stepped with semi-implicit Euler. Joints are uncoupled. The recorded
    torque is the spring torque K * (th_motor - th) plus noise; recorded
    velocity is the link velocity plus noise.
    """
    if stiffness_level not in (2, 3, 4):
        raise ConfigError("data generation uses stiffness levels 2-4; level 1 is the safety setting")
    motor_pos = np.asarray(trajectory[0], dtype=np.float64)
    if motor_pos.ndim != 2 or motor_pos.shape[0] != 2:
        raise ConfigError("trajectory positions must be (2, N)")
    n = motor_pos.shape[1]
    stiffness = config.stiffness_table[stiffness_level]
    tau_ext, label = _contact_profile(events, n)

    spring_torque = np.empty((2, n))
    link_velocity = np.empty((2, n))
    for j in range(2):
        inertia = config.link_inertia[j]
        damping = config.link_damping[j]
        p = motor_pos[j].tolist()
        ext = tau_ext[j].tolist()
        tau_out = spring_torque[j]
        vel_out = link_velocity[j]
        th = p[0]
        om = 0.0
        for t in range(n):
            spring = stiffness * (p[t] - th)
            tau_out[t] = spring
            vel_out[t] = om
            om += _DT * (spring - damping * om + ext[t]) / inertia
            th += _DT * om
        if not (np.isfinite(tau_out).all() and abs(om) < _DIVERGENCE_LIMIT):
            raise NumericError(f"simulation diverged on joint {j + 1}")

    rng = np.random.default_rng(seed)
    spring_torque += rng.normal(0.0, config.torque_noise_std, (2, n))
    link_velocity += rng.normal(0.0, config.velocity_noise_std, (2, n))
    return Trace(spring_torque, link_velocity, label, stiffness_level)


# ---------------------------------------------------------------------------
# corpus assembly


@dataclass
class CorpusEntry:
    name: str
    split: str           # "train" | "test"
    kind: str            # "collision" | "free"
    stiffness_level: int
    duration_s: float
    seed: int
    trace: Trace | None = None


def _corpus_plan(scale: float) -> list[tuple[str, str, str, int, float]]:
    plan = [
        (
            f"train_collision_l{TRAIN_LEVEL}",
            "train",
            "collision",
            TRAIN_LEVEL,
            TRAIN_COLLISION_MINUTES * 60.0 * scale,
        )
    ]
    for level in TEST_LEVELS:
        plan.append(
            (f"test_collision_l{level}", "test", "collision", level, TEST_COLLISION_MINUTES * 60.0 * scale)
        )
    for level in TEST_LEVELS:
        plan.append(
            (f"test_free_l{level}", "test", "free", level, TEST_FREE_MINUTES * 60.0 * scale)
        )
    return plan


def _entry_seeds(entry_seed: int) -> tuple[int, int, int]:
    state = np.random.SeedSequence(entry_seed).generate_state(3)
    return int(state[0]), int(state[1]), int(state[2])


def generate_corpus(config: SimConfig, seed: int, scale: float = 1.0) -> list[CorpusEntry]:
    """Training and test traces: one collision trace at the highest level
    for training; collision and collision-free test traces at levels 4, 3, 2.

    scale in (0, 1] shrinks every duration proportionally. Per-trace seeds
    derive deterministically from the corpus seed.
    """
    if not 0.0 < scale <= 1.0:
        raise ConfigError("scale must lie in (0, 1]")
    plan = _corpus_plan(scale)
    children = np.random.SeedSequence(seed).spawn(len(plan))
    entries = []
    for (name, split, kind, level, duration), child in zip(plan, children):
        entry_seed = int(child.generate_state(1)[0])
        traj_seed, sched_seed, noise_seed = _entry_seeds(entry_seed)
        trajectory = generate_trajectory(duration, config, traj_seed)
        events = [] if kind == "free" else schedule_collisions(duration, config, sched_seed)
        trace = simulate_trace(config, level, events, trajectory, noise_seed)
        entries.append(CorpusEntry(name, split, kind, level, duration, entry_seed, trace))
    return entries
