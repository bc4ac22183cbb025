#!/usr/bin/env python3
"""
================================================================================
    EPM STORE - APPEND-ONLY RUN STORE (JSON MANIFEST + JSONL EPISODE LOGS)
================================================================================

    <root>/<run_id>/
        manifest.json           config echo, seed, backends, episode list
        episodes/<id>.jsonl     header, turn, window, decision ... footer
        aggregate.json          leaderboard rows (rewritten by `score`)

    An episode file without a footer (or with footer.incomplete) is an
    incomplete episode. Prior episodes stay readable after an interrupted
    run because every episode lives in its own file.

    Replay rebuilds the trajectory from the header IEDR and the stored
    window ratings only; the cached numbers in the log are never trusted.
================================================================================
"""

import json
import logging
import os
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Dict, Iterable, List, Optional, Tuple

from epm_core import TerminationType, TrajectoryState, apply_window
from epm_errors import EmptyStore, IncompleteRun, StoreCorrupted, StoreError, ValidationFailed
from epm_metrics import IndexBundle, MetricBundle, MetricsConfig, score_trajectory
from epm_rubric import IedrAssessment, MdepWindowRating, assemble_action_vector, penalty_intensity

logger = logging.getLogger("EpmBench.store")

STORE_FORMAT = "epm-store/1"


def dump_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False, allow_nan=False)


def _clean(value: Any) -> Any:
    """NaN / inf are not JSON; stored as null"""
    if isinstance(value, float) and (value != value or value in (float("inf"), float("-inf"))):
        return None
    if isinstance(value, dict):
        return {k: _clean(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_clean(v) for v in value]
    return value


# =============================================================================
# EPISODE LOG
# =============================================================================

def episode_records(episode_id: str, result, scenario_meta: Optional[Dict[str, Any]] = None) -> List[Dict[str, Any]]:
    """EpisodeResult -> ordered log records"""
    header = {
        "record": "header",
        "format": STORE_FORMAT,
        "episode_id": episode_id,
        "scenario_id": result.scenario_id,
        "model_id": result.model_id,
        "seed": result.seed,
        "scenario": dict(scenario_meta or {}),
        "iedr": result.iedr.to_records() if result.iedr is not None else None,
        "p0": list(result.iedr.p0.as_tuple()) if result.iedr is not None else None,
        "r0": result.iedr.r0 if result.iedr is not None else None,
    }
    records = [header]
    windows_by_turn = {w.turn: w for w in result.evidence_log}
    for t, (user, model) in enumerate(result.history, start=1):
        records.append({"record": "turn", "turn": t, "user": user, "model": model})
        window = windows_by_turn.get(t)
        if window is not None:
            records.append({"record": "window", **window.to_record()})
            if window.decision is not None:
                records.append({"record": "decision", **window.decision.to_record()})
    records.append({
        "record": "footer",
        "termination": result.termination.value if result.termination else None,
        "turns": len(result.history),
        "windows": len(result.evidence_log),
        "incomplete": bool(result.incomplete),
        "error": result.error,
        "metrics": result.metrics.to_record() if result.metrics is not None else None,
        "indices": result.indices.to_record() if result.indices is not None else None,
    })
    return [_clean(r) for r in records]


@dataclass
class EpisodeLog:
    episode_id: str
    header: Dict[str, Any]
    turns: List[Dict[str, Any]] = field(default_factory=list)
    windows: List[Dict[str, Any]] = field(default_factory=list)
    decisions: List[Dict[str, Any]] = field(default_factory=list)
    footer: Optional[Dict[str, Any]] = None

    @property
    def complete(self) -> bool:
        return self.footer is not None and not self.footer.get("incomplete") and bool(self.footer.get("termination"))

    @property
    def model_id(self) -> str:
        return self.header.get("model_id", "")

    @property
    def scenario_id(self) -> str:
        return self.header.get("scenario_id", "")

    @property
    def termination(self) -> Optional[TerminationType]:
        if self.footer is None or not self.footer.get("termination"):
            return None
        return TerminationType(self.footer["termination"])

    def history(self, upto: Optional[int] = None) -> List[Tuple[str, str]]:
        turns = self.turns if upto is None else [t for t in self.turns if t["turn"] <= upto]
        return [(t["user"], t["model"]) for t in turns]


def parse_episode(episode_id: str, lines: Iterable[str]) -> EpisodeLog:
    log: Optional[EpisodeLog] = None
    for lineno, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = json.loads(line)
        except json.JSONDecodeError as e:
            raise StoreCorrupted(f"episode {episode_id}: line {lineno} is not JSON",
                                 episode=episode_id, line=lineno) from e
        kind = record.get("record")
        if log is None:
            if kind != "header":
                raise StoreCorrupted(f"episode {episode_id}: first record is not a header", episode=episode_id)
            log = EpisodeLog(episode_id, record)
        elif kind == "turn":
            log.turns.append(record)
        elif kind == "window":
            log.windows.append(record)
        elif kind == "decision":
            log.decisions.append(record)
        elif kind == "footer":
            log.footer = record
        else:
            raise StoreCorrupted(f"episode {episode_id}: unknown record type {kind!r} at line {lineno}",
                                 episode=episode_id, line=lineno)
    if log is None:
        raise StoreCorrupted(f"episode {episode_id}: empty log", episode=episode_id)
    return log


def replay_trajectory(log: EpisodeLog) -> TrajectoryState:
    """Header IEDR + stored window ratings -> trajectory"""
    try:
        iedr = IedrAssessment.from_records(log.header["iedr"])
    except (ValidationFailed, KeyError, TypeError) as e:
        raise StoreCorrupted(f"episode {log.episode_id}: header IEDR is invalid: {e}",
                             episode=log.episode_id) from e
    traj = TrajectoryState.start(iedr.p0)
    for expected, w in enumerate(log.windows, start=1):
        index = w.get("window")
        if index != expected:
            raise StoreCorrupted(f"episode {log.episode_id}: window {index} out of order (expected {expected})",
                                 episode=log.episode_id, window=expected)
        try:
            rating = MdepWindowRating.from_records(w["channels"], window_index=index)
        except (ValidationFailed, KeyError, TypeError, ValueError) as e:
            message = getattr(e, "message", str(e))
            raise StoreCorrupted(f"episode {log.episode_id}, window {index}: {message}",
                                 episode=log.episode_id, window=index) from e
        traj = apply_window(traj, assemble_action_vector(rating), penalty_intensity(rating))
    return traj


def rescore_episode(log: EpisodeLog, cfg: MetricsConfig = MetricsConfig()) -> Tuple[MetricBundle, IndexBundle]:
    if not log.complete:
        raise IncompleteRun(f"episode {log.episode_id} is incomplete", episode=log.episode_id)
    traj = replay_trajectory(log)
    return score_trajectory(traj, log.termination, cfg)


# =============================================================================
# RUN STORE
# =============================================================================

class RunStore:
    def __init__(self, root: str, run_id: str, frozen_time: Optional[str] = None):
        self.root = root
        self.run_id = run_id
        self.frozen_time = frozen_time
        self.path = os.path.join(root, run_id)
        self.episodes_dir = os.path.join(self.path, "episodes")
        self.manifest: Dict[str, Any] = {}

    def now(self) -> str:
        return self.frozen_time or datetime.now().isoformat(timespec="seconds")

    @property
    def manifest_path(self) -> str:
        return os.path.join(self.path, "manifest.json")

    @property
    def aggregate_path(self) -> str:
        return os.path.join(self.path, "aggregate.json")

    def episode_path(self, episode_id: str) -> str:
        return os.path.join(self.episodes_dir, f"{episode_id}.jsonl")

    # -------------------------------------------------------------------------
    @classmethod
    def create(cls, root: str, run_id: str, config_echo: Dict[str, Any], episodes: List[Dict[str, Any]],
               backends: Dict[str, Any], seed: int, frozen_time: Optional[str] = None) -> "RunStore":
        store = cls(root, run_id, frozen_time)
        if os.path.exists(store.manifest_path):
            raise StoreError(f"run {run_id} already exists under {root}", run=run_id)
        os.makedirs(store.episodes_dir, exist_ok=True)
        store.manifest = _clean({
            "format": STORE_FORMAT,
            "run_id": run_id,
            "created_at": store.now(),
            "seed": seed,
            "backends": backends,
            "config": config_echo,
            "episodes": episodes,
        })
        with open(store.manifest_path, "w", encoding="utf-8") as f:
            f.write(dump_json(store.manifest) + "\n")
        logger.info(f"[STORE] Created run {run_id} ({len(episodes)} episodes) at {store.path}")
        return store

    @classmethod
    def open(cls, root: str, run_id: str) -> "RunStore":
        store = cls(root, run_id)
        if not os.path.exists(store.manifest_path):
            raise EmptyStore(f"no run {run_id!r} under {root}", run=run_id)
        with open(store.manifest_path, "r", encoding="utf-8") as f:
            try:
                store.manifest = json.load(f)
            except json.JSONDecodeError as e:
                raise StoreCorrupted(f"run {run_id}: manifest is not JSON") from e
        store.frozen_time = store.manifest.get("config", {}).get("run", {}).get("frozen_time")
        return store

    @property
    def episode_ids(self) -> List[str]:
        return [e["episode_id"] for e in self.manifest.get("episodes", [])]

    # -------------------------------------------------------------------------
    def write_episode(self, episode_id: str, result, scenario_meta: Optional[Dict[str, Any]] = None) -> str:
        """One file per episode, written once; never touches other episodes"""
        path = self.episode_path(episode_id)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as f:
            for record in episode_records(episode_id, result, scenario_meta):
                f.write(dump_json(record) + "\n")
        os.replace(tmp, path)
        state = "incomplete" if result.incomplete else (result.termination.value if result.termination else "?")
        logger.debug(f"[STORE] {episode_id}: {state}")
        return path

    def read_episode(self, episode_id: str) -> Optional[EpisodeLog]:
        path = self.episode_path(episode_id)
        if not os.path.exists(path):
            return None
        with open(path, "r", encoding="utf-8") as f:
            return parse_episode(episode_id, f)

    def episodes(self) -> List[Tuple[str, Optional[EpisodeLog]]]:
        """(episode_id, log or None) in manifest order"""
        if not self.episode_ids:
            raise EmptyStore(f"run {self.run_id} lists no episodes", run=self.run_id)
        return [(eid, self.read_episode(eid)) for eid in self.episode_ids]

    def completeness(self) -> Dict[str, List[str]]:
        status = {"complete": [], "incomplete": [], "missing": []}
        for eid, log in self.episodes():
            if log is None:
                status["missing"].append(eid)
            elif log.complete:
                status["complete"].append(eid)
            else:
                status["incomplete"].append(eid)
        return status

    # -------------------------------------------------------------------------
    def write_aggregate(self, aggregate: Dict[str, Any]) -> str:
        with open(self.aggregate_path, "w", encoding="utf-8") as f:
            f.write(dump_json(_clean(aggregate)) + "\n")
        return self.aggregate_path

    def read_aggregate(self) -> Optional[Dict[str, Any]]:
        if not os.path.exists(self.aggregate_path):
            return None
        with open(self.aggregate_path, "r", encoding="utf-8") as f:
            return json.load(f)
