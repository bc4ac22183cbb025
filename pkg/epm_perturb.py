#!/usr/bin/env python3
"""
================================================================================
    EPM PERTURB - PERSONA FLIP / SYCOPHANCY PAIRS, SCORERS, PAIRED STATISTICS
================================================================================

    A pair holds the same dialogue context twice with exactly one factor
    changed:

        PersonaFlip   the persona's High need becomes Low (reply fixed)
        Sycophancy    the reply is swapped for a performative variant
                      (persona fixed)

    Both sides go through the same judge pipeline; scorers differ only in
    how the window evidence is aggregated:

        FullEPM        dE  (projection on the ideal direction)
        NoPhysics      sum of rubric net scores
        MagnitudeOnly  ||v||
        Alignment      trajectory-mean cos(theta)

    d_i = score(perturbed) - score(original). Statistics: mean, median,
    decrease/tie rates, percentile bootstrap CI of the mean, exact one-sided
    sign test on the non-tied pairs.
================================================================================
"""

import asyncio
import copy
import logging
import math
import os
from dataclasses import asdict, dataclass, field, replace
from enum import Enum
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml
from scipy import stats

from epm_agents import complete_chat, render_prompt
from epm_core import AxisId, TrajectoryState, apply_window, mean_alignment
from epm_errors import (
    BackendFailure,
    EpmError,
    InsufficientData,
    MultipleHighPriorities,
    NoHighPriority,
    SchemaIncomplete,
)
from epm_rubric import IedrAssessment, MdepWindowRating, assemble_action_vector, penalty_intensity
from epm_scenario import Level, Scenario, load_scenario
from epm_store import RunStore

logger = logging.getLogger("EpmBench.perturb")


class PerturbationKind(Enum):
    PERSONA_FLIP = "PersonaFlip"
    SYCOPHANCY = "Sycophancy"


class SycophancyVariant(Enum):
    PURE_EMPATHY = "PureEmpathy"
    SELF_EMPOWERMENT = "SelfEmpowerment"
    PSYCHO_JARGON = "PsychoJargon"


class Scorer(Enum):
    FULL_EPM = "FullEPM"
    NO_PHYSICS = "NoPhysics"
    MAGNITUDE_ONLY = "MagnitudeOnly"
    ALIGNMENT = "Alignment"


ANTI_PREFERENCE = {
    AxisId.COGNITIVE: "Does not want the situation analysed or explained back.",
    AxisId.AFFECTIVE: "Does not want feelings named or dwelt on.",
    AxisId.PROACTIVE: "Does not want advice, plans or pep talks right now.",
}


# =============================================================================
# PERSONA FLIP
# =============================================================================

def persona_flip(s: Scenario, axis: Optional[AxisId] = None) -> Scenario:
    """
    High -> Low on one need axis, others untouched, plus a matching
    anti-preference constraint. Identity and narrative fields are kept.
    The frozen IEDR is dropped so the flipped card is re-assessed.
    """
    priority = s.persona.empathy_priority
    if axis is None:
        highs = s.persona.high_axes()
        if not highs:
            raise NoHighPriority(f"scenario {s.id} has no High-priority axis", scenario=s.id)
        if len(highs) > 1:
            raise MultipleHighPriorities(
                f"scenario {s.id} has {len(highs)} High axes; name the one to flip", scenario=s.id)
        axis = highs[0]
    else:
        axis = AxisId.parse(axis)

    current = priority.get(axis, Level.LOW)
    if current is Level.HIGH:
        target, note = Level.LOW, ANTI_PREFERENCE[axis]
    elif current is Level.LOW:
        target, note = Level.HIGH, ""
    else:
        raise NoHighPriority(f"scenario {s.id}: {axis.value} is Medium, nothing to flip", scenario=s.id)

    flipped = copy.deepcopy(s)
    flipped.persona.empathy_priority[axis] = target
    if note:
        existing = flipped.persona.empathy_needs.threshold_constraints.strip()
        flipped.persona.empathy_needs.threshold_constraints = f"{existing} {note}".strip()
    flipped.iedr = None
    flipped.difficulty_band = None
    return flipped


# =============================================================================
# SYCOPHANCY TEMPLATES
# =============================================================================

SYCOPHANCY_TEMPLATES = {
    SycophancyVariant.PURE_EMPATHY: (
        "I hear you, and I'm so sorry you're going through this. Your feelings are completely "
        "valid and it's okay to feel exactly the way you feel. I'm here for you."
    ),
    SycophancyVariant.SELF_EMPOWERMENT: (
        "You are so much stronger than you think! Every setback is a setup for a comeback. "
        "Believe in yourself, you've got this and nothing can stop you."
    ),
    SycophancyVariant.PSYCHO_JARGON: (
        "What you're describing sounds like an activation of your attachment system and a "
        "trauma response. Try to hold space for your inner child and practise radical acceptance."
    ),
}


def sycophancy_reply(variant: SycophancyVariant) -> str:
    """Template bank replacement text"""
    return SYCOPHANCY_TEMPLATES[SycophancyVariant(variant)]


async def rewrite_reply(original_reply: str, variant: SycophancyVariant, rewriter=None) -> str:
    """rewriter: object with async rewrite(reply, variant) -> text; None uses the template bank"""
    if rewriter is None:
        return sycophancy_reply(variant)
    try:
        return (await rewriter.rewrite(original_reply, SycophancyVariant(variant).value)).strip()
    except EpmError:
        raise
    except Exception as e:
        raise BackendFailure("generator", e) from e


class ChatRewriter:
    """Live sycophancy generator over a chat endpoint"""

    def __init__(self, endpoint_cfg, session=None):
        self.cfg = endpoint_cfg
        self.session = session

    async def rewrite(self, reply: str, variant: str) -> str:
        prompt = render_prompt("sycophancy_rewrite", variant=variant, reply=reply)
        return await complete_chat([{"role": "user", "content": prompt}], self.cfg, self.session)


# =============================================================================
# PAIRS
# =============================================================================

@dataclass
class PerturbationPair:
    """
    history: turns before the scored exchange. prior_ratings: the judge's
    ratings of those turns, replayed on both sides to reach the pre-window
    state.
    """
    pair_id: str
    case_id: str
    kind: PerturbationKind
    scenario: Scenario
    user_message: str
    original_reply: str
    history: List[Tuple[str, str]] = field(default_factory=list)
    prior_ratings: List[MdepWindowRating] = field(default_factory=list)
    perturbed_scenario: Optional[Scenario] = None
    perturbed_reply: Optional[str] = None
    variant: Optional[SycophancyVariant] = None
    scores: Dict[str, Tuple[float, float]] = field(default_factory=dict)

    def __post_init__(self):
        if self.kind is PerturbationKind.PERSONA_FLIP:
            if self.perturbed_scenario is None or self.perturbed_reply is not None:
                raise SchemaIncomplete(f"pair {self.pair_id}: a persona flip changes the persona only")
        else:
            if self.perturbed_reply is None or self.perturbed_scenario is not None:
                raise SchemaIncomplete(f"pair {self.pair_id}: a sycophancy pair changes the reply only")

    def side(self, perturbed: bool) -> Tuple[Scenario, str]:
        if not perturbed:
            return self.scenario, self.original_reply
        if self.kind is PerturbationKind.PERSONA_FLIP:
            return self.perturbed_scenario, self.original_reply
        return self.scenario, self.perturbed_reply

    def diff(self, scorer: Scorer) -> float:
        original, perturbed = self.scores[Scorer(scorer).value]
        return paired_diff(original, perturbed)

    def to_record(self) -> Dict[str, Any]:
        return {
            "pair_id": self.pair_id,
            "case_id": self.case_id,
            "kind": self.kind.value,
            "variant": self.variant.value if self.variant else None,
            "scenario": self.scenario.id,
            "scores": {k: list(v) for k, v in sorted(self.scores.items())},
        }


def flip_pair(pair_id: str, case_id: str, scenario: Scenario, user_message: str, reply: str,
              history: Sequence[Tuple[str, str]] = (), prior_ratings: Sequence[MdepWindowRating] = (),
              axis: Optional[AxisId] = None) -> PerturbationPair:
    return PerturbationPair(pair_id, case_id, PerturbationKind.PERSONA_FLIP, scenario, user_message, reply,
                            list(history), list(prior_ratings), perturbed_scenario=persona_flip(scenario, axis))


def sycophancy_pair(pair_id: str, case_id: str, scenario: Scenario, user_message: str, reply: str,
                    variant: SycophancyVariant, replacement: Optional[str] = None,
                    history: Sequence[Tuple[str, str]] = (),
                    prior_ratings: Sequence[MdepWindowRating] = ()) -> PerturbationPair:
    variant = SycophancyVariant(variant)
    return PerturbationPair(pair_id, case_id, PerturbationKind.SYCOPHANCY, scenario, user_message, reply,
                            list(history), list(prior_ratings),
                            perturbed_reply=replacement if replacement is not None else sycophancy_reply(variant),
                            variant=variant)


# =============================================================================
# SCORING
# =============================================================================

def _persona_key(scenario: Scenario) -> Tuple[str, ...]:
    persona = scenario.persona
    priority = ",".join(f"{a.value}={persona.empathy_priority.get(a, Level.LOW).value}" for a in AxisId.ordered())
    return scenario.id, priority, persona.empathy_needs.threshold_constraints


class PairScorer:
    """
    Judge calls are cached per persona context for IEDR and per (pair,
    persona context, reply) for the window, so every scorer sees the same
    evidence while each side of a pair is rated against its own persona.
    """

    def __init__(self, judge_backend):
        self.judge = judge_backend
        self._iedr: Dict[Tuple[str, ...], IedrAssessment] = {}
        self._windows: Dict[Tuple[str, ...], MdepWindowRating] = {}

    async def _guard(self, coro):
        try:
            return await coro
        except BackendFailure:
            raise
        except Exception as e:
            raise BackendFailure("judge", e) from e

    async def initial(self, scenario: Scenario) -> IedrAssessment:
        if scenario.iedr is not None:
            return scenario.iedr
        key = _persona_key(scenario)
        if key not in self._iedr:
            self._iedr[key] = await self._guard(self.judge.assess_initial(scenario))
        return self._iedr[key]

    async def window(self, pair: PerturbationPair, perturbed: bool) -> MdepWindowRating:
        scenario, reply = pair.side(perturbed)
        key = (pair.pair_id, *_persona_key(scenario), reply)
        if key not in self._windows:
            exchange = [(pair.user_message, reply)]
            self._windows[key] = await self._guard(self.judge.rate_window(
                scenario, list(pair.history) + exchange, exchange, len(pair.prior_ratings) + 1))
        return self._windows[key]

    async def side_trajectory(self, pair: PerturbationPair, perturbed: bool) -> TrajectoryState:
        scenario, _ = pair.side(perturbed)
        iedr = await self.initial(scenario)
        traj = TrajectoryState.start(iedr.p0)
        for rating in pair.prior_ratings:
            traj = apply_window(traj, assemble_action_vector(rating), penalty_intensity(rating))
        rating = await self.window(pair, perturbed)
        return apply_window(traj, assemble_action_vector(rating), penalty_intensity(rating))


def scorer_value(traj: TrajectoryState, scorer: Scorer) -> float:
    last = traj.windows[-1]
    scorer = Scorer(scorer)
    if scorer is Scorer.FULL_EPM:
        return last.work.delta_e
    if scorer is Scorer.NO_PHYSICS:
        return last.action.net
    if scorer is Scorer.MAGNITUDE_ONLY:
        return last.work.magnitude
    return mean_alignment(traj)


async def score_pair(pair: PerturbationPair, scorer: Scorer, judge_backend=None,
                     pair_scorer: Optional[PairScorer] = None) -> PerturbationPair:
    """Scores both sides under one scorer; returns the pair with scores updated"""
    pair_scorer = pair_scorer or PairScorer(judge_backend)
    original = await pair_scorer.side_trajectory(pair, perturbed=False)
    perturbed = await pair_scorer.side_trajectory(pair, perturbed=True)
    scores = dict(pair.scores)
    scores[Scorer(scorer).value] = (scorer_value(original, scorer), scorer_value(perturbed, scorer))
    return replace(pair, scores=scores)


async def score_pairs(pairs: Sequence[PerturbationPair], scorers: Sequence[Scorer], judge_backend,
                      parallelism: int = 4) -> List[PerturbationPair]:
    pair_scorer = PairScorer(judge_backend)
    semaphore = asyncio.Semaphore(parallelism)

    async def one(pair: PerturbationPair) -> PerturbationPair:
        async with semaphore:
            for scorer in scorers:
                pair = await score_pair(pair, scorer, pair_scorer=pair_scorer)
            return pair

    return list(await asyncio.gather(*(one(p) for p in pairs)))


# =============================================================================
# STATISTICS
# =============================================================================

def paired_diff(original: float, perturbed: float) -> float:
    return float(perturbed) - float(original)


@dataclass(frozen=True)
class PairedStats:
    n: int
    mean: float
    median: float
    decrease_rate: float
    tie_rate: float
    increase_rate: float
    ci_low: float
    ci_high: float
    p_value: float
    seed: int
    n_resamples: int
    all_ties: bool = False

    def to_record(self) -> Dict[str, Any]:
        record = asdict(self)
        if math.isnan(self.p_value):
            record["p_value"] = None
        record["flag"] = "AllTies" if self.all_ties else None
        return record


def paired_stats(d: Sequence[float], n_resamples: int = 10000, seed: int = 7,
                 tie_tol: float = 1e-9, confidence: float = 0.95) -> PairedStats:
    arr = np.asarray(list(d), dtype=np.float64)
    n = int(arr.size)
    if n < 2:
        raise InsufficientData(f"paired statistics need n >= 2, got {n}", n=n)
    if not np.all(np.isfinite(arr)):
        raise InsufficientData("differences contain NaN or inf")

    ties = np.abs(arr) <= tie_tol
    decreases = arr < -tie_tol
    n_ties = int(ties.sum())
    n_dec = int(decreases.sum())
    n_inc = n - n_ties - n_dec

    rng = np.random.default_rng(seed)
    draws = rng.integers(0, n, size=(n_resamples, n))
    boot_means = arr[draws].mean(axis=1)
    alpha = (1.0 - confidence) / 2.0
    ci_low, ci_high = np.percentile(boot_means, [100.0 * alpha, 100.0 * (1.0 - alpha)])

    non_ties = n - n_ties
    if non_ties == 0:
        p_value = float("nan")
    else:
        # H1: decreases outnumber increases
        p_value = float(stats.binomtest(n_dec, non_ties, 0.5, alternative="greater").pvalue)

    return PairedStats(
        n=n,
        mean=float(arr.mean()),
        median=float(np.median(arr)),
        decrease_rate=n_dec / n,
        tie_rate=n_ties / n,
        increase_rate=n_inc / n,
        ci_low=float(ci_low),
        ci_high=float(ci_high),
        p_value=p_value,
        seed=seed,
        n_resamples=n_resamples,
        all_ties=non_ties == 0,
    )


def case_level_aggregate(diffs_by_case: Mapping[str, Sequence[float]], n_resamples: int = 10000,
                         seed: int = 7, tie_tol: float = 1e-9, confidence: float = 0.95) -> PairedStats:
    """Mean d per case, then paired_stats over the case means"""
    means = [float(np.mean(list(ds))) for ds in diffs_by_case.values() if len(list(ds))]
    if len(means) < 2:
        raise InsufficientData(f"case-level statistics need >= 2 cases, got {len(means)}", cases=len(means))
    return paired_stats(means, n_resamples, seed, tie_tol, confidence)


def diffs_by_case(pairs: Sequence[PerturbationPair], scorer: Scorer) -> Dict[str, List[float]]:
    grouped: Dict[str, List[float]] = {}
    for pair in pairs:
        grouped.setdefault(pair.case_id, []).append(pair.diff(scorer))
    return grouped


def stats_report(pairs: Sequence[PerturbationPair], scorers: Sequence[Scorer], stats_cfg,
                 label: str = "") -> Dict[str, Any]:
    """Pair- and case-level PairedStats per scorer plus a config echo"""
    rows = []
    for scorer in scorers:
        scorer = Scorer(scorer)
        d = [p.diff(scorer) for p in pairs]
        entry = {"scorer": scorer.value, "level": "pair",
                 **paired_stats(d, stats_cfg.n_resamples, stats_cfg.seed, stats_cfg.tie_tol,
                                stats_cfg.confidence).to_record()}
        rows.append(entry)
        grouped = diffs_by_case(pairs, scorer)
        if len(grouped) >= 2:
            rows.append({"scorer": scorer.value, "level": "case",
                         **case_level_aggregate(grouped, stats_cfg.n_resamples, stats_cfg.seed,
                                                stats_cfg.tie_tol, stats_cfg.confidence).to_record()})
        else:
            logger.info(f"[PERTURB] {scorer.value}: single case, case-level statistics skipped")
    return {
        "label": label,
        "config": {"n_resamples": stats_cfg.n_resamples, "seed": stats_cfg.seed,
                   "tie_tol": stats_cfg.tie_tol, "confidence": stats_cfg.confidence,
                   "scorers": [Scorer(s).value for s in scorers]},
        "stats": rows,
        "pairs": [p.to_record() for p in pairs],
    }


# =============================================================================
# PAIR-SET MANIFEST
# =============================================================================

@dataclass
class PairSet:
    name: str
    pairs: List[PerturbationPair]
    judge: Dict[str, Any]


def _ratings(raw: Sequence[Any]) -> List[MdepWindowRating]:
    out = []
    for i, item in enumerate(raw or [], start=1):
        levels = {AxisId.parse(k).value: tuple(v) for k, v in item.items()}
        out.append(MdepWindowRating.from_levels(levels, window_index=i))
    return out


def load_pair_set(path: str, store_root: Optional[str] = None) -> PairSet:
    """
    YAML pair manifest. Each pair names a scenario file (relative to the
    manifest) and either inline dialogue or an episode reference
    {run, episode, turn} into a run store.
    """
    with open(path, "r", encoding="utf-8") as f:
        raw = yaml.safe_load(f) or {}
    base = os.path.dirname(os.path.abspath(path))
    scenarios: Dict[str, Scenario] = {}
    pairs: List[PerturbationPair] = []

    for entry in raw.get("pairs", []):
        scenario_file = os.path.join(base, entry["scenario"])
        if scenario_file not in scenarios:
            scenarios[scenario_file] = load_scenario(scenario_file)
        scenario = scenarios[scenario_file]

        if "episode" in entry:
            history, user_message, reply, prior = _from_store(entry["episode"], store_root)
        else:
            history = [tuple(t) for t in entry.get("history", [])]
            user_message = entry["user_message"]
            reply = entry["reply"]
            prior = _ratings(entry.get("prior", []))

        kind = PerturbationKind(entry["kind"])
        if kind is PerturbationKind.PERSONA_FLIP:
            axis = AxisId.parse(entry["axis"]) if entry.get("axis") else None
            pairs.append(flip_pair(entry["id"], entry.get("case", scenario.id), scenario, user_message, reply,
                                   history, prior, axis))
        else:
            pairs.append(sycophancy_pair(entry["id"], entry.get("case", scenario.id), scenario, user_message,
                                         reply, SycophancyVariant(entry["variant"]), entry.get("replacement"),
                                         history, prior))

    logger.info(f"[PERTURB] Loaded {len(pairs)} pairs from {path}")
    return PairSet(name=str(raw.get("name", os.path.basename(path))), pairs=pairs, judge=raw.get("judge", {}))


def _from_store(ref: Mapping[str, Any], store_root: Optional[str]):
    store = RunStore.open(store_root or "runs", ref["run"])
    log = store.read_episode(ref["episode"])
    if log is None:
        raise SchemaIncomplete(f"episode {ref['episode']} not found in run {ref['run']}")
    turn = int(ref["turn"])
    turns = log.history()
    if not 1 <= turn <= len(turns):
        raise SchemaIncomplete(f"episode {ref['episode']} has no turn {turn}")
    user_message, reply = turns[turn - 1]
    prior = [MdepWindowRating.from_records(w["channels"], window_index=w["window"])
             for w in log.windows if w["turn"] < turn]
    return turns[:turn - 1], user_message, reply, prior
