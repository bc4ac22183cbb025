#!/usr/bin/env python3
"""
================================================================================
    EPM METRICS - RAW METRICS, EPM-Q INDICES, ABLATIONS
================================================================================

    Nine raw metrics per trajectory, three dimensions:

        Outcome     RDI, E_total, S_net
        Efficiency  rho, S_proj, tortuosity
        Stability   R_pos, mean cos, R_pen

    Bounded metrics go through the linear map Phi(x; x0, x100) clamped to
    [0, 100]. E_total, S_net, rho and S_proj are normalized against a
    benchmark (r0, alpha * r0, rho_max) and left unbounded above.

        EPM-Index = 0.4 * Outcome + 0.2 * Efficiency + 0.4 * Stability

    Dataset level: indices are averaged per model over cases first, then
    the dimensions and the EPM-Index are formed from those means.
================================================================================
"""

import math
from dataclasses import asdict, dataclass, fields
from typing import Dict, Iterable, Mapping

import numpy as np

from epm_core import EPS, TerminationType, TrajectoryState, as_array, mean_alignment, resistance
from epm_errors import ConfigError, DegenerateSpec, EmptyTrajectory

# Theoretical ceiling of per-window effective work: ||(2, 2, 2)||
RHO_MAX = math.sqrt(12.0)

TORTUOSITY_WORST = 3.0

DIMENSION_WEIGHTS = {"outcome": 0.4, "efficiency": 0.2, "stability": 0.4}

INDEX_NAMES = (
    "idx_rdi", "idx_etot", "idx_snet",
    "idx_rho", "idx_sproj", "idx_tau",
    "idx_rpos", "idx_align", "idx_pen",
)

DIMENSIONS = {
    "outcome": ("idx_rdi", "idx_etot", "idx_snet"),
    "efficiency": ("idx_rho", "idx_sproj", "idx_tau"),
    "stability": ("idx_rpos", "idx_align", "idx_pen"),
}


# =============================================================================
# CONFIGURATION / TYPES
# =============================================================================

@dataclass(frozen=True)
class MetricsConfig:
    alpha: float = 1.2          # S_net calibration constant
    eps: float = EPS            # denominator floor
    rho_max: float = RHO_MAX

    def __post_init__(self):
        if not self.alpha > 0:
            raise ConfigError(f"metrics.alpha must be > 0, got {self.alpha}")
        if not self.eps >= 0:
            raise ConfigError(f"metrics.eps must be >= 0, got {self.eps}")
        if not self.rho_max > 0:
            raise ConfigError(f"metrics.rho_max must be > 0, got {self.rho_max}")


@dataclass(frozen=True)
class MappingSpec:
    x0: float
    x100: float


PHI_SPECS: Dict[str, MappingSpec] = {
    "rdi": MappingSpec(-1.0, 1.0),
    "tau": MappingSpec(3.0, 1.0),
    "align": MappingSpec(-1.0, 1.0),
    "rpos": MappingSpec(0.0, 1.0),
    "pen": MappingSpec(3.0, 0.0),
}


@dataclass(frozen=True)
class MetricBundle:
    status: TerminationType
    rdi_raw: float
    e_total: float
    e_surplus: float
    s_net: float
    rho: float
    s_proj: float
    tortuosity_raw: float
    mean_cos: float
    r_pos: float
    r_pen: float
    r0: float = 0.0
    windows: int = 0

    def to_record(self) -> Dict:
        record = asdict(self)
        record["status"] = self.status.value
        return record

    @classmethod
    def from_record(cls, record: Mapping) -> "MetricBundle":
        data = {f.name: record[f.name] for f in fields(cls) if f.name in record}
        data["status"] = TerminationType(data["status"])
        return cls(**data)


@dataclass(frozen=True)
class IndexBundle:
    idx_rdi: float
    idx_etot: float
    idx_snet: float
    idx_rho: float
    idx_sproj: float
    idx_tau: float
    idx_rpos: float
    idx_align: float
    idx_pen: float
    outcome: float = 0.0
    efficiency: float = 0.0
    stability: float = 0.0
    epm_index: float = 0.0

    def indices(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in INDEX_NAMES}

    def to_record(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_record(cls, record: Mapping) -> "IndexBundle":
        return epm_index({name: float(record[name]) for name in INDEX_NAMES})


# =============================================================================
# RAW METRICS
# =============================================================================

def raw_metrics(traj: TrajectoryState, status: TerminationType,
                cfg: MetricsConfig = MetricsConfig()) -> MetricBundle:
    if traj.window_count == 0:
        raise EmptyTrajectory("trajectory has no adjudicated windows")

    works = traj.windows
    delta_e = np.array([w.work.delta_e for w in works], dtype=np.float64)
    magnitude = np.array([w.work.magnitude for w in works], dtype=np.float64)
    penalties = np.array([w.penalty for w in works], dtype=np.float64)
    nets = np.array([w.action.net for w in works], dtype=np.float64)

    r0 = traj.r0
    r_final = resistance(traj.current)
    rdi = float(np.clip((r0 - r_final) / (r0 + cfg.eps), -1.0, 1.0))

    displacement = float(np.linalg.norm(as_array(traj.current) - as_array(traj.initial)))
    if displacement <= cfg.eps:
        tortuosity = TORTUOSITY_WORST
    else:
        tortuosity = float(np.clip(traj.path_length / (displacement + cfg.eps), 1.0, TORTUOSITY_WORST))

    moving = magnitude > 0
    s_proj = float(delta_e[moving].mean()) if moving.any() else 0.0

    return MetricBundle(
        status=status,
        rdi_raw=rdi,
        e_total=traj.e_total,
        e_surplus=traj.e_total - r0,
        s_net=float(nets.sum()),
        rho=traj.e_total / traj.window_count,
        s_proj=s_proj,
        tortuosity_raw=tortuosity,
        mean_cos=mean_alignment(traj),
        r_pos=float((delta_e > 0).mean()),
        r_pen=float(penalties.mean()),
        r0=r0,
        windows=traj.window_count,
    )


# =============================================================================
# NORMALIZATION
# =============================================================================

def phi_map(x: float, spec: MappingSpec) -> float:
    """Clamp(100 * (x - x0) / (x100 - x0), 0, 100)"""
    if spec.x0 == spec.x100:
        raise DegenerateSpec(f"mapping spec has x0 == x100 == {spec.x0}")
    return float(np.clip(100.0 * (x - spec.x0) / (spec.x100 - spec.x0), 0.0, 100.0))


def unbounded_indices(m: MetricBundle, r0: float, cfg: MetricsConfig = MetricsConfig()):
    """(idx_etot, idx_snet, idx_rho, idx_sproj)"""
    idx_etot = 100.0 * max(0.0, m.e_total) / (r0 + cfg.eps)
    idx_snet = 100.0 * max(0.0, m.s_net) / (cfg.alpha * r0 + cfg.eps)
    idx_rho = 100.0 * max(0.0, m.rho) / cfg.rho_max
    idx_sproj = 100.0 * max(0.0, m.s_proj) / cfg.rho_max
    return idx_etot, idx_snet, idx_rho, idx_sproj


def epm_index(indices: Mapping[str, float]) -> IndexBundle:
    """Dimension means and the 0.4 / 0.2 / 0.4 synthesis"""
    missing = [name for name in INDEX_NAMES if name not in indices]
    if missing:
        raise ValueError(f"missing indices: {', '.join(missing)}")
    values = {name: float(indices[name]) for name in INDEX_NAMES}
    dims = {dim: sum(values[n] for n in names) / 3.0 for dim, names in DIMENSIONS.items()}
    total = sum(DIMENSION_WEIGHTS[dim] * dims[dim] for dim in DIMENSIONS)
    return IndexBundle(**values, **dims, epm_index=total)


def index_bundle(m: MetricBundle, r0: float, cfg: MetricsConfig = MetricsConfig()) -> IndexBundle:
    idx_etot, idx_snet, idx_rho, idx_sproj = unbounded_indices(m, r0, cfg)
    return epm_index({
        "idx_rdi": phi_map(m.rdi_raw, PHI_SPECS["rdi"]),
        "idx_etot": idx_etot,
        "idx_snet": idx_snet,
        "idx_rho": idx_rho,
        "idx_sproj": idx_sproj,
        "idx_tau": phi_map(m.tortuosity_raw, PHI_SPECS["tau"]),
        "idx_rpos": phi_map(m.r_pos, PHI_SPECS["rpos"]),
        "idx_align": phi_map(m.mean_cos, PHI_SPECS["align"]),
        "idx_pen": phi_map(m.r_pen, PHI_SPECS["pen"]),
    })


def score_trajectory(traj: TrajectoryState, status: TerminationType,
                     cfg: MetricsConfig = MetricsConfig()):
    """raw_metrics + index_bundle in one call"""
    m = raw_metrics(traj, status, cfg)
    return m, index_bundle(m, traj.r0, cfg)


def aggregate_indices(bundles: Iterable[IndexBundle]) -> IndexBundle:
    """Average each index over cases, then synthesize"""
    bundles = list(bundles)
    if not bundles:
        raise ValueError("no index bundles to aggregate")
    means = {name: float(np.mean([getattr(b, name) for b in bundles])) for name in INDEX_NAMES}
    return epm_index(means)


# =============================================================================
# ABLATIONS
# =============================================================================

def ablation_linear_score(traj: TrajectoryState) -> float:
    """No-Physics: sum of rubric net scores, no projection"""
    return float(sum(w.action.net for w in traj.windows))


def ablation_magnitude_score(traj: TrajectoryState) -> float:
    """Magnitude-only: sum of ||v_t||"""
    return float(sum(w.work.magnitude for w in traj.windows))
