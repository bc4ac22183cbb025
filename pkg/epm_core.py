#!/usr/bin/env python3
"""
================================================================================
    EPM CORE - THE EMPATHY POTENTIAL KERNEL
================================================================================

    Pure math, no dialogue content:
    - PsychState: 3D deficit vector (C, A, P), components <= 0
    - Ideal direction: unit vector from the state toward equilibrium
    - Effective work: projection of an action vector on that direction
    - State update with clamp at equilibrium
    - Energy-gated success / deterioration failure

    Sign convention: deficits are non-positive, progress increments are
    positive, so the ideal direction has non-negative components.
================================================================================
"""

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Optional, Sequence, Tuple, Union

import numpy as np

from epm_errors import ConfigError, KernelError, ZeroResistance

# Denominator floor for anything divided by r0 or a displacement
EPS = 1e-6

# Action vector component bounds (MDEP-PR key algebra)
ACTION_MIN = -5.0
ACTION_MAX = 3.0


# =============================================================================
# ENUMS
# =============================================================================

class AxisId(Enum):
    COGNITIVE = "C"
    AFFECTIVE = "A"
    PROACTIVE = "P"

    @classmethod
    def ordered(cls) -> Tuple["AxisId", "AxisId", "AxisId"]:
        return (cls.COGNITIVE, cls.AFFECTIVE, cls.PROACTIVE)

    @classmethod
    def parse(cls, value: Union[str, "AxisId"]) -> "AxisId":
        if isinstance(value, AxisId):
            return value
        text = str(value).strip()
        for axis in cls:
            if text.upper() == axis.value or text.lower() == axis.name.lower():
                return axis
        # Persona cards call the proactive axis "motivational"
        if text.lower() in ("motivational", "m"):
            return cls.PROACTIVE
        raise ValueError(f"unknown axis: {value!r}")


class TerminationType(Enum):
    SUCCESS = "SUCCESS"
    EPM_FAILURE = "EPM_FAILURE"
    DIRECTOR_STOP = "DIRECTOR_STOP"
    MAX_TURNS = "MAX_TURNS"


class GateVerdict(Enum):
    SUCCESS = "SUCCESS"
    FAILURE = "FAILURE"
    CONTINUE = "CONTINUE"


# =============================================================================
# VALUE TYPES
# =============================================================================

VectorLike = Union["PsychState", "ActionVector", Sequence[float], np.ndarray]


def as_array(v: VectorLike) -> np.ndarray:
    """(C, A, P) components as a float64 array"""
    if isinstance(v, (PsychState, ActionVector)):
        return v.as_array()
    arr = np.asarray(v, dtype=np.float64)
    if arr.shape != (3,):
        raise KernelError(f"expected a 3-vector, got shape {arr.shape}")
    return arr


@dataclass(frozen=True)
class PsychState:
    """Latent deficit vector P_t; origin is equilibrium"""
    c: float
    a: float
    p: float

    def __post_init__(self):
        for name in ("c", "a", "p"):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise KernelError(f"state component {name} is not finite: {value}")
            if value > 0:
                raise KernelError(f"state component {name} must be <= 0, got {value}")
            object.__setattr__(self, name, value)

    @classmethod
    def from_array(cls, arr: Iterable[float]) -> "PsychState":
        c, a, p = (float(x) for x in arr)
        return cls(c, a, p)

    def as_array(self) -> np.ndarray:
        return np.array([self.c, self.a, self.p], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.c, self.a, self.p)


@dataclass(frozen=True)
class ActionVector:
    """Per-window net increment (Prog + Neg) on each axis"""
    dc: float
    da: float
    dp: float

    def __post_init__(self):
        for name in ("dc", "da", "dp"):
            value = float(getattr(self, name))
            if not math.isfinite(value) or value < ACTION_MIN or value > ACTION_MAX:
                raise KernelError(
                    f"action component {name}={value} outside [{ACTION_MIN}, {ACTION_MAX}]")
            object.__setattr__(self, name, value)

    @classmethod
    def zero(cls) -> "ActionVector":
        return cls(0.0, 0.0, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.dc, self.da, self.dp], dtype=np.float64)

    def as_tuple(self) -> Tuple[float, float, float]:
        return (self.dc, self.da, self.dp)

    @property
    def net(self) -> float:
        return self.dc + self.da + self.dp


@dataclass(frozen=True)
class EffectiveWork:
    """Projected work of one window; cos_theta is None when undefined"""
    delta_e: float
    cos_theta: Optional[float]
    magnitude: float

    @property
    def cos_defined(self) -> bool:
        return self.cos_theta is not None


@dataclass(frozen=True)
class GateConfig:
    """
    Success / failure thresholds.

    eps_energy is a multiple of r0 when energy_relative is set (default: 1.0 x r0),
    otherwise an absolute amount of work. eps_dist is always r0-relative.
    """
    eps_energy: float = 1.0
    energy_relative: bool = True
    eps_dist: float = 0.15
    tau_align: float = 0.5
    fail_deterioration: float = 0.25

    def __post_init__(self):
        if not self.eps_energy >= 0:
            raise ConfigError(f"gate.eps_energy must be >= 0, got {self.eps_energy}")
        if not 0 < self.eps_dist < 1:
            raise ConfigError(f"gate.eps_dist must be in (0, 1), got {self.eps_dist}")
        if not 0 < self.tau_align <= 1:
            raise ConfigError(f"gate.tau_align must be in (0, 1], got {self.tau_align}")
        if not self.fail_deterioration > 0:
            raise ConfigError(f"gate.fail_deterioration must be > 0, got {self.fail_deterioration}")

    def energy_threshold(self, r0: float) -> float:
        return self.eps_energy * r0 if self.energy_relative else self.eps_energy


@dataclass(frozen=True)
class WindowRecord:
    """One adjudicated window as seen by the kernel"""
    action: ActionVector
    work: EffectiveWork
    state_after: PsychState
    penalty: float = 0.0


@dataclass(frozen=True)
class TrajectoryState:
    """Immutable trajectory; apply_window returns a new one"""
    current: PsychState
    initial: PsychState
    r0: float
    e_total: float = 0.0
    windows: Tuple[WindowRecord, ...] = field(default_factory=tuple)
    path_length: float = 0.0

    @classmethod
    def start(cls, p0: PsychState) -> "TrajectoryState":
        r0 = resistance(p0)
        if r0 <= 0:
            raise ZeroResistance("initial state is at equilibrium (r0 = 0)")
        return cls(current=p0, initial=p0, r0=r0)

    @property
    def window_count(self) -> int:
        return len(self.windows)

    def points(self) -> Tuple[PsychState, ...]:
        """P_0 ... P_T"""
        return (self.initial,) + tuple(w.state_after for w in self.windows)


# =============================================================================
# OPERATIONS
# =============================================================================

def resistance(state: VectorLike) -> float:
    """Euclidean norm ||P||"""
    return float(np.linalg.norm(as_array(state)))


def ideal_direction(state: VectorLike) -> np.ndarray:
    """v* = -P / ||P||"""
    arr = as_array(state)
    norm = float(np.linalg.norm(arr))
    if norm == 0.0:
        raise ZeroResistance("equilibrium has no healing direction")
    return -arr / norm


def effective_work(v: VectorLike, state: VectorLike) -> EffectiveWork:
    """dE = v . v*  =  ||v|| cos(theta)"""
    direction = ideal_direction(state)
    vec = as_array(v)
    magnitude = float(np.linalg.norm(vec))
    if magnitude == 0.0:
        return EffectiveWork(delta_e=0.0, cos_theta=None, magnitude=0.0)
    delta_e = float(np.dot(vec, direction))
    cos_theta = max(-1.0, min(1.0, delta_e / magnitude))
    return EffectiveWork(delta_e=delta_e, cos_theta=cos_theta, magnitude=magnitude)


def apply_window(traj: TrajectoryState, v: ActionVector, penalty: float = 0.0) -> TrajectoryState:
    """
    P_t = min(P_{t-1} + v_t, 0).

    Work is measured against the pre-update state and the unclamped action.
    A window arriving while the state sits at equilibrium does no work.
    """
    pre = traj.current
    if resistance(pre) == 0.0:
        work = EffectiveWork(delta_e=0.0, cos_theta=None, magnitude=resistance(v))
    else:
        work = effective_work(v, pre)

    updated = np.minimum(pre.as_array() + v.as_array(), 0.0)
    new_state = PsychState.from_array(updated)

    return replace(
        traj,
        current=new_state,
        e_total=traj.e_total + work.delta_e,
        windows=traj.windows + (WindowRecord(v, work, new_state, float(penalty)),),
        path_length=traj.path_length + work.magnitude,
    )


def mean_alignment(traj: TrajectoryState) -> float:
    """Average cos(theta) over windows where it is defined; 0 when none"""
    cosines = [w.work.cos_theta for w in traj.windows if w.work.cos_defined]
    if not cosines:
        return 0.0
    return float(np.mean(cosines))


def check_gate(traj: TrajectoryState, cfg: GateConfig, mean_cos: float) -> GateVerdict:
    """
    SUCCESS  iff E_total > eps_energy AND (||P_T|| < eps_dist * r0 OR mean_cos > tau_align)
    FAILURE  iff ||P_T|| >= (1 + fail_deterioration) * r0
    SUCCESS wins when both hold.
    """
    r_now = resistance(traj.current)
    energy_gate = traj.e_total > cfg.energy_threshold(traj.r0)
    resolved = r_now < cfg.eps_dist * traj.r0
    companionship = mean_cos > cfg.tau_align

    if energy_gate and (resolved or companionship):
        return GateVerdict.SUCCESS
    if r_now >= (1.0 + cfg.fail_deterioration) * traj.r0:
        return GateVerdict.FAILURE
    return GateVerdict.CONTINUE
