#!/usr/bin/env python3
"""
================================================================================
    EPM REPORT - RESCORING, LEADERBOARD, DATA SERIES
================================================================================

    Everything here is recomputed from the stored episode logs:

        rescore   -> per-episode MetricBundle / IndexBundle
        leaderboard -> per-model (optionally per-group) index means,
                       dimension scores, EPM-Index, termination counts
        series    -> trajectory3d | radar | heatmap | overview

    Output formats: JSON (canonical), CSV and a plain text table, all built
    from the same pandas frame.
================================================================================
"""

import logging
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import pandas as pd

from epm_core import TerminationType, TrajectoryState, resistance
from epm_errors import EmptyStore, IncompleteRun, StoreCorrupted
from epm_metrics import INDEX_NAMES, IndexBundle, MetricBundle, MetricsConfig, aggregate_indices, score_trajectory
from epm_scenario import Scenario, corpus_overview
from epm_store import RunStore, dump_json, replay_trajectory

logger = logging.getLogger("EpmBench.report")

GROUP_KEYS = ("mechanism", "domain", "persona_type", "band")
SERIES_KINDS = ("trajectory3d", "radar", "heatmap", "overview")
ROW_COLUMNS = ("model_id", "group") + INDEX_NAMES + (
    "outcome", "efficiency", "stability", "epm_index",
    "episodes", "success", "failure", "timeout", "director_stop",
)


# =============================================================================
# RESCORING
# =============================================================================

@dataclass
class ScoredEpisode:
    episode_id: str
    model_id: str
    scenario_id: str
    scenario_meta: Dict[str, Any]
    termination: TerminationType
    trajectory: TrajectoryState
    metrics: MetricBundle
    indices: IndexBundle


@dataclass
class ScoredRun:
    episodes: List[ScoredEpisode] = field(default_factory=list)
    excluded: List[str] = field(default_factory=list)


def rescore_run(store: RunStore, cfg: MetricsConfig = MetricsConfig(), allow_partial: bool = False) -> ScoredRun:
    """
    Replays every episode in manifest order. Incomplete or missing episodes
    fail the run unless allow_partial, in which case they are listed.
    """
    run = ScoredRun()
    for episode_id, log in store.episodes():
        if log is None or not log.complete:
            run.excluded.append(episode_id)
            continue
        traj = replay_trajectory(log)
        metrics, indices = score_trajectory(traj, log.termination, cfg)
        run.episodes.append(ScoredEpisode(
            episode_id=episode_id,
            model_id=log.model_id,
            scenario_id=log.scenario_id,
            scenario_meta=dict(log.header.get("scenario") or {}),
            termination=log.termination,
            trajectory=traj,
            metrics=metrics,
            indices=indices,
        ))

    if run.excluded and not allow_partial:
        raise IncompleteRun(f"run {store.run_id} has {len(run.excluded)} incomplete episodes: "
                            f"{', '.join(run.excluded[:5])}", run=store.run_id, incomplete=len(run.excluded))
    if run.excluded:
        logger.warning(f"[REPORT] Excluding {len(run.excluded)} incomplete episodes: {', '.join(run.excluded)}")
    if not run.episodes:
        raise EmptyStore(f"run {store.run_id} has no complete episodes", run=store.run_id)
    return run


# =============================================================================
# LEADERBOARD
# =============================================================================

@dataclass(frozen=True)
class LeaderboardRow:
    model_id: str
    indices: IndexBundle
    episodes: int
    success: int
    failure: int
    timeout: int
    director_stop: int
    group: Optional[str] = None

    def to_record(self) -> Dict[str, Any]:
        record = {"model_id": self.model_id, "group": self.group}
        record.update(self.indices.to_record())
        record.update(episodes=self.episodes, success=self.success, failure=self.failure,
                      timeout=self.timeout, director_stop=self.director_stop)
        return record


def _row(model_id: str, episodes: Sequence[ScoredEpisode], group: Optional[str] = None) -> LeaderboardRow:
    counts = {t: sum(1 for e in episodes if e.termination is t) for t in TerminationType}
    return LeaderboardRow(
        model_id=model_id,
        indices=aggregate_indices(e.indices for e in episodes),
        episodes=len(episodes),
        success=counts[TerminationType.SUCCESS],
        failure=counts[TerminationType.EPM_FAILURE],
        timeout=counts[TerminationType.MAX_TURNS],
        director_stop=counts[TerminationType.DIRECTOR_STOP],
        group=group,
    )


def leaderboard(run: ScoredRun, group_by: Optional[str] = None) -> List[LeaderboardRow]:
    """Rows ranked by EPM-Index (ties by model id); grouped rows keep group order"""
    if group_by is not None and group_by not in GROUP_KEYS:
        raise ValueError(f"group_by must be one of {', '.join(GROUP_KEYS)}")
    buckets: Dict[Tuple[str, Optional[str]], List[ScoredEpisode]] = {}
    for e in run.episodes:
        group = str(e.scenario_meta.get(group_by)) if group_by else None
        buckets.setdefault((e.model_id, group), []).append(e)
    rows = [_row(model, eps, group) for (model, group), eps in buckets.items()]
    if group_by:
        return sorted(rows, key=lambda r: (r.group, -r.indices.epm_index, r.model_id))
    return sorted(rows, key=lambda r: (-r.indices.epm_index, r.model_id))


def build_aggregate(run: ScoredRun) -> Dict[str, Any]:
    return {
        "leaderboard": [r.to_record() for r in leaderboard(run)],
        "episodes": {
            e.episode_id: {"model_id": e.model_id, "scenario_id": e.scenario_id,
                           "termination": e.termination.value,
                           "metrics": e.metrics.to_record(), "indices": e.indices.to_record()}
            for e in run.episodes
        },
        "excluded": list(run.excluded),
    }


def verify_aggregate(stored: Dict[str, Any], recomputed: Dict[str, Any], tol: float = 1e-9) -> None:
    """Stored leaderboard must match the logs; mismatches raise StoreCorrupted"""
    old = {r["model_id"]: r for r in stored.get("leaderboard", [])}
    new = {r["model_id"]: r for r in recomputed.get("leaderboard", [])}
    if set(old) != set(new):
        raise StoreCorrupted(f"aggregate lists models {sorted(old)}, logs give {sorted(new)}")
    for model, row in new.items():
        for key, value in row.items():
            stored_value = old[model].get(key)
            if isinstance(value, float):
                if stored_value is None or not math.isclose(value, stored_value, rel_tol=0.0, abs_tol=tol):
                    raise StoreCorrupted(f"aggregate {model}.{key} = {stored_value}, logs give {value}",
                                         model=model, field=key)
            elif value != stored_value:
                raise StoreCorrupted(f"aggregate {model}.{key} = {stored_value}, logs give {value}",
                                     model=model, field=key)


def leaderboard_frame(rows: Sequence[LeaderboardRow]) -> pd.DataFrame:
    frame = pd.DataFrame([r.to_record() for r in rows], columns=list(ROW_COLUMNS))
    if frame["group"].isna().all():
        frame = frame.drop(columns=["group"])
    return frame


# =============================================================================
# DATA SERIES
# =============================================================================

def export_series(run: ScoredRun, kind: str, group_by: str = "mechanism",
                  scenarios: Optional[Sequence[Scenario]] = None) -> pd.DataFrame:
    """
    trajectory3d  one row per point P_0..P_T per episode
    radar         index means per (model, group)
    heatmap       model x scenario EPM-Index matrix
    overview      corpus distribution counts (needs the scenarios)
    """
    if kind == "trajectory3d":
        rows = []
        for e in run.episodes:
            for step, point in enumerate(e.trajectory.points()):
                c, a, p = point.as_tuple()
                rows.append({"episode_id": e.episode_id, "model_id": e.model_id, "scenario_id": e.scenario_id,
                             "step": step, "c": c, "a": a, "p": p, "resistance": resistance(point)})
        return pd.DataFrame(rows, columns=["episode_id", "model_id", "scenario_id", "step", "c", "a", "p",
                                           "resistance"])

    if kind == "radar":
        rows = [r.to_record() for r in leaderboard(run, group_by=group_by)]
        frame = pd.DataFrame(rows, columns=list(ROW_COLUMNS))
        return frame.rename(columns={"group": group_by})

    if kind == "heatmap":
        frame = pd.DataFrame([{"model_id": e.model_id, "scenario_id": e.scenario_id,
                               "epm_index": e.indices.epm_index} for e in run.episodes])
        return frame.pivot_table(index="model_id", columns="scenario_id", values="epm_index", aggfunc="mean")

    if kind == "overview":
        if not scenarios:
            raise EmptyStore("overview needs the scenario corpus")
        overview = corpus_overview(scenarios)
        rows = []
        for facet in ("axis", "mechanism", "domain", "band", "persona_type", "empathy_threshold"):
            rows.extend({"facet": facet, "value": value, "count": count}
                        for value, count in overview[facet].items())
        rows.append({"facet": "r0", "value": "mean", "count": overview["r0_mean"]})
        rows.append({"facet": "r0", "value": "std", "count": overview["r0_std"]})
        return pd.DataFrame(rows, columns=["facet", "value", "count"])

    raise ValueError(f"unknown series {kind!r} (expected one of {', '.join(SERIES_KINDS)})")


# =============================================================================
# OUTPUT
# =============================================================================

def frame_records(frame: pd.DataFrame) -> List[Dict[str, Any]]:
    if not isinstance(frame.index, pd.RangeIndex):
        frame = frame.reset_index()
    records = frame.to_dict(orient="records")
    return [{k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in r.items()} for r in records]


def text_table(frame: pd.DataFrame, title: str = "") -> str:
    body = frame.to_string(index=not isinstance(frame.index, pd.RangeIndex), float_format=lambda x: f"{x:.2f}")
    if not title:
        return body
    rule = "=" * max(len(title), min(100, max(len(line) for line in body.splitlines())))
    return f"{rule}\n{title}\n{rule}\n{body}\n"


def write_outputs(frame: pd.DataFrame, out_dir: str, name: str,
                  formats: Sequence[str] = ("json", "csv", "txt"), extra: Optional[Dict[str, Any]] = None) -> List[str]:
    os.makedirs(out_dir, exist_ok=True)
    written = []
    if "json" in formats:
        path = os.path.join(out_dir, f"{name}.json")
        payload = {"rows": frame_records(frame), **(extra or {})}
        with open(path, "w", encoding="utf-8") as f:
            f.write(dump_json(payload) + "\n")
        written.append(path)
    if "csv" in formats:
        path = os.path.join(out_dir, f"{name}.csv")
        frame.to_csv(path, index=not isinstance(frame.index, pd.RangeIndex), float_format="%.10g")
        written.append(path)
    if "txt" in formats:
        path = os.path.join(out_dir, f"{name}.txt")
        with open(path, "w", encoding="utf-8") as f:
            f.write(text_table(frame, name.upper()))
        written.append(path)
    for path in written:
        logger.info(f"[REPORT] Wrote {path}")
    return written
