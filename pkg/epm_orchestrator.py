#!/usr/bin/env python3
"""
================================================================================
    EPM ORCHESTRATOR - CONTROLLER-DRIVEN EPISODE LOOP + STEP INTERFACE
================================================================================

    Per turn:
        1. Test model answers the pending user utterance (dialogue only)
        2. Pair goes into the buffer
        3. Every k turns (and on the last turn) the judge rates the buffer,
           the EPM state updates, the buffer clears
        4. Checks in order: SUCCESS -> EPM_FAILURE -> MAX_TURNS -> Director
        5. User agent produces the next utterance with the Director's
           side-channel context

    EpmEnvironment exposes the same loop as reset()/step(message) returning
    (state, reward, done, info) packets; run_episode drives the environment,
    so both paths produce identical results.

    Episodes are sequential; a batch runs up to `parallelism` episodes at
    once behind an asyncio semaphore.
================================================================================
"""

import asyncio
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Awaitable, Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from tqdm import tqdm

from epm_agents import UserContext, history_messages
from epm_core import (
    EffectiveWork,
    GateConfig,
    GateVerdict,
    PsychState,
    TerminationType,
    TrajectoryState,
    apply_window,
    check_gate,
    mean_alignment,
    resistance,
)
from epm_errors import (
    BackendError,
    BackendFailure,
    ConfigError,
    DegenerateScenario,
    EpisodeAborted,
    EpmError,
    InvalidDirectorAction,
    SteppedAfterDone,
    TransportError,
)
from epm_metrics import IndexBundle, MetricBundle, MetricsConfig, score_trajectory
from epm_rubric import IedrAssessment, MdepWindowRating, assemble_action_vector, penalty_intensity
from epm_scenario import MEMORY_KEYS, Scenario

logger = logging.getLogger("EpmBench.orchestrator")

PACING_LEVELS = ("slower", "hold", "faster")


# =============================================================================
# DIRECTOR ACTIONS
# =============================================================================

class ActionKind(Enum):
    CONTINUE = "continue"
    RELEASE_MEMORY = "release_memory"
    ADJUST_GUIDANCE = "adjust_guidance"
    ADJUST_PACING = "adjust_pacing"
    TERMINATE = "terminate"


@dataclass(frozen=True)
class DirectorAction:
    kind: ActionKind
    argument: Optional[str] = None

    @classmethod
    def parse(cls, wire: Any) -> "DirectorAction":
        """Director wire dict -> action; anything outside the closed set is rejected"""
        if not isinstance(wire, dict):
            raise InvalidDirectorAction(f"director output is not an object: {wire!r}")
        name = str(wire.get("action", "")).strip().lower()
        argument = wire.get("argument")
        argument = str(argument).strip() if argument is not None else None
        try:
            kind = ActionKind(name)
        except ValueError:
            raise InvalidDirectorAction(f"unknown director action {name!r}", action=name) from None

        if kind is ActionKind.RELEASE_MEMORY and argument not in MEMORY_KEYS:
            raise InvalidDirectorAction(f"release_memory needs one of {', '.join(MEMORY_KEYS)}, got {argument!r}")
        if kind is ActionKind.ADJUST_PACING and argument not in PACING_LEVELS:
            raise InvalidDirectorAction(f"adjust_pacing needs slower|hold|faster, got {argument!r}")
        if kind is ActionKind.ADJUST_GUIDANCE and not argument:
            raise InvalidDirectorAction("adjust_guidance needs guidance text")
        if kind is ActionKind.CONTINUE:
            argument = None
        return cls(kind, argument)

    def to_record(self) -> Dict[str, Any]:
        return {"action": self.kind.value, "argument": self.argument}


@dataclass(frozen=True)
class DirectorDecision:
    window_index: int
    action: DirectorAction
    guidance: str
    should_continue: bool
    summary: Dict[str, Any]

    def to_record(self) -> Dict[str, Any]:
        return {
            "window": self.window_index,
            **self.action.to_record(),
            "guidance": self.guidance,
            "should_continue": self.should_continue,
            "summary": self.summary,
        }


async def director_decide(history: Sequence[Tuple[str, str]], epm_summary: Dict[str, Any],
                          backend) -> Tuple[str, DirectorAction, bool]:
    """Observe -> decide -> act; the backend only ever sees the structured summary and the dialogue"""
    wire = await backend.decide({"summary": dict(epm_summary), "history": list(history)})
    action = DirectorAction.parse(wire)
    guidance = str(wire.get("guidance") or "")
    if action.kind is ActionKind.ADJUST_GUIDANCE:
        guidance = action.argument
    return guidance, action, action.kind is not ActionKind.TERMINATE


def apply_decision(context: UserContext, guidance: str, action: DirectorAction) -> UserContext:
    """Side-channel update for the user agent"""
    if action.kind is ActionKind.RELEASE_MEMORY and action.argument not in context.released_memories:
        context = replace(context, released_memories=context.released_memories + (action.argument,))
    elif action.kind is ActionKind.ADJUST_PACING:
        context = replace(context, pacing=action.argument)
    if guidance:
        context = replace(context, guidance=guidance)
    return context


# =============================================================================
# CONFIG / RESULT TYPES
# =============================================================================

@dataclass(frozen=True)
class EpisodeConfig:
    t_max: int = 20
    k: int = 1
    gate: GateConfig = field(default_factory=GateConfig)
    seed: int = 0
    parallelism: int = 1
    metrics: MetricsConfig = field(default_factory=MetricsConfig)
    turn_retries: int = 1

    def __post_init__(self):
        if self.t_max < 1:
            raise ConfigError(f"t_max must be >= 1, got {self.t_max}")
        if not 1 <= self.k <= self.t_max:
            raise ConfigError(f"k must be in [1, t_max], got k={self.k} t_max={self.t_max}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")
        if self.turn_retries < 0:
            raise ConfigError("turn_retries must be >= 0")

    @classmethod
    def from_config(cls, cfg) -> "EpisodeConfig":
        """BenchConfig -> EpisodeConfig"""
        return cls(t_max=cfg.run.t_max, k=cfg.run.k, gate=cfg.gate, seed=cfg.run.seed,
                   parallelism=cfg.run.parallelism, metrics=cfg.metrics,
                   turn_retries=cfg.run.turn_retries)


@dataclass(frozen=True)
class WindowEvidence:
    """One closed window: judge rating, kernel result, gate verdict, optional decision"""
    window_index: int
    turn: int
    rating: MdepWindowRating
    work: EffectiveWork
    state_after: PsychState
    e_total: float
    mean_cos: float
    verdict: GateVerdict
    decision: Optional[DirectorDecision] = None

    def to_record(self) -> Dict[str, Any]:
        return {
            "window": self.window_index,
            "turn": self.turn,
            "channels": self.rating.to_records(),
            "delta_e": self.work.delta_e,
            "cos_theta": self.work.cos_theta,
            "magnitude": self.work.magnitude,
            "state_after": list(self.state_after.as_tuple()),
            "e_total": self.e_total,
            "mean_cos": self.mean_cos,
            "verdict": self.verdict.value,
        }


@dataclass
class EpisodeResult:
    scenario_id: str
    model_id: str
    iedr: IedrAssessment
    history: List[Tuple[str, str]]
    evidence_log: List[WindowEvidence]
    termination: Optional[TerminationType]
    trajectory: TrajectoryState
    metrics: Optional[MetricBundle] = None
    indices: Optional[IndexBundle] = None
    incomplete: bool = False
    error: Optional[Dict[str, Any]] = None
    seed: int = 0

    @property
    def decisions(self) -> List[DirectorDecision]:
        return [w.decision for w in self.evidence_log if w.decision is not None]


@dataclass
class StepPacket:
    state: Dict[str, Any]
    reward: Dict[str, Any]
    done: bool
    termination: Optional[TerminationType]
    info: Dict[str, Any]


@dataclass
class EpisodeBackends:
    user: Any
    test: Any
    judge: Any
    director: Any


# =============================================================================
# ENVIRONMENT
# =============================================================================

class EpmEnvironment:
    """
    reset() -> initial packet; step(test_model_message) -> packet.
    info["user_message"] is the utterance the next test-model message answers.
    """

    def __init__(self, scenario: Scenario, backends: EpisodeBackends,
                 cfg: EpisodeConfig = EpisodeConfig(), model_id: str = "model"):
        self.scenario = scenario
        self.backends = backends
        self.cfg = cfg
        self.model_id = model_id
        self.iedr: Optional[IedrAssessment] = None
        self.trajectory: Optional[TrajectoryState] = None
        self.history: List[Tuple[str, str]] = []
        self.buffer: List[Tuple[str, str]] = []
        self.evidence_log: List[WindowEvidence] = []
        self.context = UserContext()
        self.pending_user: Optional[str] = None
        self.termination: Optional[TerminationType] = None
        self.stagnation_streak = 0
        self._started = False

    @property
    def done(self) -> bool:
        return self.termination is not None

    # -------------------------------------------------------------------------
    async def call_backend(self, role: str, fn: Callable[..., Awaitable[Any]], *args) -> Any:
        """Transport failures get `turn_retries` full retries, then BackendFailure"""
        attempt = 0
        while True:
            try:
                return await fn(*args)
            except TransportError as e:
                if attempt >= self.cfg.turn_retries:
                    raise BackendFailure(role, e) from e
                attempt += 1
                logger.warning(f"[EPISODE] {self.scenario.id}: {role} transport failure, "
                               f"retrying turn ({attempt}/{self.cfg.turn_retries}): {e.message}")
            except EpmError:
                raise
            except Exception as e:
                raise BackendFailure(role, e) from e

    def _state_packet(self) -> Dict[str, Any]:
        traj = self.trajectory
        r_now = resistance(traj.current)
        return {
            "state": list(traj.current.as_tuple()),
            "resistance": r_now,
            "r0": traj.r0,
            "progress": (traj.r0 - r_now) / traj.r0,
            "e_total": traj.e_total,
            "mean_cos": mean_alignment(traj),
            "windows": traj.window_count,
            "turn": len(self.history),
        }

    def epm_summary(self) -> Dict[str, Any]:
        """Structured observation handed to the Director"""
        summary = self._state_packet()
        summary["t_max"] = self.cfg.t_max
        summary["stagnation_streak"] = self.stagnation_streak
        summary["last_delta_e"] = self.trajectory.windows[-1].work.delta_e if self.trajectory.windows else 0.0
        summary["released_memories"] = list(self.context.released_memories)
        summary["pacing"] = self.context.pacing
        return summary

    # -------------------------------------------------------------------------
    async def reset(self) -> StepPacket:
        if self.scenario.iedr is not None:
            iedr = self.scenario.iedr
        else:
            iedr = await self.call_backend("judge", self.backends.judge.assess_initial, self.scenario)
        if iedr.degenerate:
            raise DegenerateScenario(f"scenario {self.scenario.id} has r0 = 0", scenario=self.scenario.id)

        self.iedr = iedr
        self.trajectory = TrajectoryState.start(iedr.p0)
        self.history, self.buffer, self.evidence_log = [], [], []
        self.context = UserContext()
        self.termination = None
        self.stagnation_streak = 0
        self.pending_user = await self.call_backend("user", self.backends.user.respond,
                                                    self.scenario.persona, self.scenario.crisis_event, (),
                                                    self.context)
        self._started = True
        logger.debug(f"[EPISODE] {self.scenario.id} / {self.model_id}: reset, r0={self.trajectory.r0:.3f}")
        return StepPacket(
            state=self._state_packet(),
            reward={"delta_e": 0.0, "regression": 0.0, "stagnation_streak": 0, "window_closed": False},
            done=False,
            termination=None,
            info={"user_message": self.pending_user, "p0": list(iedr.p0.as_tuple())},
        )

    async def step(self, test_model_message: str) -> StepPacket:
        if self.done:
            raise SteppedAfterDone(f"episode {self.scenario.id} already ended ({self.termination.value})")
        if not self._started:
            raise SteppedAfterDone("step called before reset")

        pair = (self.pending_user, str(test_model_message))
        self.history.append(pair)
        self.buffer.append(pair)
        turn = len(self.history)
        reward = {"delta_e": 0.0, "regression": 0.0, "stagnation_streak": self.stagnation_streak,
                  "window_closed": False}
        info: Dict[str, Any] = {"turn": turn}

        if turn % self.cfg.k == 0 or turn == self.cfg.t_max:
            entry = await self._close_window(turn)
            delta_e = entry.work.delta_e
            reward.update(delta_e=delta_e, regression=min(delta_e, 0.0),
                          stagnation_streak=self.stagnation_streak, window_closed=True)
            info["window"] = entry.window_index
            info["evidence"] = entry.rating.to_records()
            info["verdict"] = entry.verdict.value
            if entry.decision is not None:
                info["decision"] = entry.decision.to_record()

        if not self.done:
            self.pending_user = await self.call_backend("user", self.backends.user.respond,
                                                        self.scenario.persona, self.scenario.crisis_event,
                                                        tuple(self.history), self.context)
            info["user_message"] = self.pending_user
        else:
            self.pending_user = None

        return StepPacket(state=self._state_packet(), reward=reward, done=self.done,
                          termination=self.termination, info=info)

    async def _close_window(self, turn: int) -> WindowEvidence:
        window_index = len(self.evidence_log) + 1
        rating = await self.call_backend("judge", self.backends.judge.rate_window, self.scenario,
                                         tuple(self.history), tuple(self.buffer), window_index)
        self.trajectory = apply_window(self.trajectory, assemble_action_vector(rating),
                                       penalty_intensity(rating))
        self.buffer.clear()

        work = self.trajectory.windows[-1].work
        self.stagnation_streak = self.stagnation_streak + 1 if work.delta_e <= 0 else 0
        mean_cos = mean_alignment(self.trajectory)
        verdict = check_gate(self.trajectory, self.cfg.gate, mean_cos)

        decision = None
        if verdict is GateVerdict.SUCCESS:
            self.termination = TerminationType.SUCCESS
        elif verdict is GateVerdict.FAILURE:
            self.termination = TerminationType.EPM_FAILURE
        elif turn >= self.cfg.t_max:
            self.termination = TerminationType.MAX_TURNS
        else:
            summary = self.epm_summary()
            guidance, action, should_continue = await self.call_backend(
                "director", director_decide, tuple(self.history), summary, self.backends.director)
            decision = DirectorDecision(window_index, action, guidance, should_continue, summary)
            logger.debug(f"[DIRECTOR] {self.scenario.id} w{window_index}: {action.kind.value} {action.argument or ''}")
            if should_continue:
                self.context = apply_decision(self.context, guidance, action)
            else:
                self.termination = TerminationType.DIRECTOR_STOP

        entry = WindowEvidence(
            window_index=window_index, turn=turn, rating=rating, work=work,
            state_after=self.trajectory.current, e_total=self.trajectory.e_total,
            mean_cos=mean_cos, verdict=verdict, decision=decision,
        )
        self.evidence_log.append(entry)
        logger.debug(f"[JUDGE] {self.scenario.id} w{window_index}: dE={work.delta_e:+.3f} "
                     f"E={self.trajectory.e_total:.3f} |P|={resistance(self.trajectory.current):.3f}")
        return entry

    # -------------------------------------------------------------------------
    def result(self, incomplete: bool = False, error: Optional[EpmError] = None) -> EpisodeResult:
        traj = self.trajectory
        metrics = indices = None
        if traj is not None and traj.window_count:
            status = self.termination or TerminationType.MAX_TURNS
            metrics, indices = score_trajectory(traj, status, self.cfg.metrics)
        return EpisodeResult(
            scenario_id=self.scenario.id,
            model_id=self.model_id,
            iedr=self.iedr,
            history=list(self.history),
            evidence_log=list(self.evidence_log),
            termination=self.termination,
            trajectory=traj,
            metrics=metrics,
            indices=indices,
            incomplete=incomplete,
            error=error.to_record() if error is not None else None,
            seed=self.cfg.seed,
        )


# =============================================================================
# EPISODE / BATCH
# =============================================================================

async def run_episode(scenario: Scenario, user_backend, test_backend, judge_backend, director_backend,
                      cfg: EpisodeConfig = EpisodeConfig(), model_id: str = "model") -> EpisodeResult:
    """
    Full loop through EpmEnvironment. Backend errors raise EpisodeAborted
    carrying the partial result flagged incomplete.
    """
    env = EpmEnvironment(scenario, EpisodeBackends(user_backend, test_backend, judge_backend, director_backend),
                         cfg, model_id)
    try:
        packet = await env.reset()
        while not packet.done:
            messages = history_messages(env.history, env.pending_user)
            reply = await env.call_backend("test", test_backend.reply, messages)
            packet = await env.step(reply)
    except BackendError as e:
        partial = env.result(incomplete=True, error=e) if env.trajectory is not None else None
        logger.error(f"[EPISODE] {scenario.id} / {model_id}: aborted after {len(env.history)} turns: {e.message}")
        raise EpisodeAborted(f"episode {scenario.id} / {model_id} aborted: {e.message}",
                             partial=partial, scenario=scenario.id, model=model_id, cause=e.code) from e

    result = env.result()
    logger.info(f"[EPISODE] {scenario.id} / {model_id}: {result.termination.value} after "
                f"{len(result.history)} turns, EPM-Index {result.indices.epm_index:.2f}")
    return result


def episode_seed(seed: int, index: int) -> int:
    """Independent per-episode seed from the run seed"""
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


@dataclass(frozen=True)
class EpisodeJob:
    episode_id: str
    scenario: Scenario
    model_id: str
    index: int


def _incomplete_stub(job: EpisodeJob, seed: int, error: EpmError) -> EpisodeResult:
    return EpisodeResult(
        scenario_id=job.scenario.id, model_id=job.model_id, iedr=job.scenario.iedr,
        history=[], evidence_log=[], termination=None, trajectory=None,
        incomplete=True, error=error.to_record(), seed=seed)


async def run_batch(jobs: Sequence[EpisodeJob],
                    make_backends: Callable[[EpisodeJob, int], EpisodeBackends],
                    cfg: EpisodeConfig,
                    on_result: Optional[Callable[[EpisodeJob, EpisodeResult], None]] = None,
                    progress: bool = True) -> List[EpisodeResult]:
    """
    Runs jobs concurrently (cfg.parallelism). Results come back in job
    order. Aborted episodes return their partial result; any other bench
    error, or an abort before reset finished, gives an incomplete stub.
    """
    semaphore = asyncio.Semaphore(cfg.parallelism)
    bar = tqdm(total=len(jobs), desc="Episodes", unit="ep", disable=not progress)

    async def run_one(job: EpisodeJob) -> EpisodeResult:
        async with semaphore:
            seed = episode_seed(cfg.seed, job.index)
            job_cfg = replace(cfg, seed=seed)
            try:
                backends = make_backends(job, seed)
                result = await run_episode(job.scenario, backends.user, backends.test, backends.judge,
                                           backends.director, job_cfg, job.model_id)
            except EpisodeAborted as e:
                result = e.partial or _incomplete_stub(job, seed, e)
            except EpmError as e:
                logger.error(f"[EPISODE] {job.episode_id}: {e.code}: {e.message}")
                result = _incomplete_stub(job, seed, e)
            if on_result is not None:
                on_result(job, result)
            bar.update(1)
            return result

    try:
        return list(await asyncio.gather(*(run_one(job) for job in jobs)))
    finally:
        bar.close()
