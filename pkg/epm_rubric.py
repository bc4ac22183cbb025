#!/usr/bin/env python3
"""
================================================================================
    EPM RUBRIC - IEDR & MDEP-PR SCORING KEYS
================================================================================

    IEDR (pre-dialogue, nine indicators, 4-level ordinal):

        Weight class   Indicators             [0]   [1]   [2]   [3]
        Standard x1.0  C.1 C.2 A.1 P.1         0    -2    -4    -6
        Priority x1.5  C.3 A.3 P.3             0    -3    -6    -9
        Core     x2.0  A.2 P.2                 0    -4    -8   -12

        d0 = sum of the axis' three indicator scores, r0 = ||P0||

    MDEP-PR (every window, progress and regression per axis):

        Axis   Prog [0] [1] [2]    Neg [0] [-1] [-2]
        C           0   +1  +3         0   -2   -4
        A           0   +1  +3         0   -2   -5
        P           0   +1  +3         0   -2   -5

        per-axis increment = score(Prog) + score(Neg)

    The judge produces the ratings; this module only validates and scores.
    Evidence and reasoning travel with the ratings but never affect a score.
================================================================================
"""

from dataclasses import dataclass
from enum import Enum
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from epm_core import ActionVector, AxisId, PsychState, resistance
from epm_errors import (
    DuplicateChannel,
    DuplicateIndicator,
    InvalidLevel,
    MissingChannel,
    MissingEvidence,
    MissingIndicator,
    UnknownIndicator,
)


# =============================================================================
# SCORING KEYS
# =============================================================================

class WeightClass(Enum):
    STANDARD = ("Standard", 1.0)
    PRIORITY = ("Priority", 1.5)
    CORE = ("Core", 2.0)

    @property
    def label(self) -> str:
        return self.value[0]

    @property
    def multiplier(self) -> float:
        return self.value[1]


# Base deficit unit; a cell is BDU * multiplier * level
BASE_DEFICIT_UNIT = -2

IEDR_KEY: Dict[WeightClass, Tuple[int, int, int, int]] = {
    WeightClass.STANDARD: (0, -2, -4, -6),
    WeightClass.PRIORITY: (0, -3, -6, -9),
    WeightClass.CORE: (0, -4, -8, -12),
}

INDICATORS: Dict[str, Tuple[AxisId, WeightClass]] = {
    "C.1": (AxisId.COGNITIVE, WeightClass.STANDARD),
    "C.2": (AxisId.COGNITIVE, WeightClass.STANDARD),
    "C.3": (AxisId.COGNITIVE, WeightClass.PRIORITY),
    "A.1": (AxisId.AFFECTIVE, WeightClass.STANDARD),
    "A.2": (AxisId.AFFECTIVE, WeightClass.CORE),
    "A.3": (AxisId.AFFECTIVE, WeightClass.PRIORITY),
    "P.1": (AxisId.PROACTIVE, WeightClass.STANDARD),
    "P.2": (AxisId.PROACTIVE, WeightClass.CORE),
    "P.3": (AxisId.PROACTIVE, WeightClass.PRIORITY),
}

INDICATOR_LABELS = {
    "C.1": "Situational complexity",
    "C.2": "Cognitive depth",
    "C.3": "Cognitive priority",
    "A.1": "Emotional intensity",
    "A.2": "Emotional accessibility",
    "A.3": "Affective priority",
    "P.1": "Agency level",
    "P.2": "Value relevance",
    "P.3": "Motivational priority",
}


class Channel(Enum):
    PROG = "Prog"
    NEG = "Neg"

    @classmethod
    def parse(cls, value) -> "Channel":
        if isinstance(value, Channel):
            return value
        text = str(value).strip().lower()
        for ch in cls:
            if text == ch.value.lower() or text == ch.name.lower():
                return ch
        raise InvalidLevel(f"unknown channel: {value!r}")


MDEP_PROG_KEY: Dict[int, int] = {0: 0, 1: 1, 2: 3}
MDEP_NEG_KEY: Dict[AxisId, Dict[int, int]] = {
    AxisId.COGNITIVE: {0: 0, -1: -2, -2: -4},
    AxisId.AFFECTIVE: {0: 0, -1: -2, -2: -5},
    AxisId.PROACTIVE: {0: 0, -1: -2, -2: -5},
}

# R_pen: 0.5 x sum of |Neg level| -> [0, 3]
PENALTY_SCALE = 0.5


def _strict_int(value, what: str) -> int:
    """Levels must already be integers; 2.0 or '2' are rejected, never rounded"""
    if isinstance(value, bool) or not isinstance(value, int):
        raise InvalidLevel(f"{what}: level must be an integer, got {value!r}")
    return value


# =============================================================================
# IEDR
# =============================================================================

@dataclass(frozen=True)
class IedrIndicator:
    id: str
    level: int
    evidence: str = ""
    reasoning: str = ""

    def __post_init__(self):
        if self.id not in INDICATORS:
            raise UnknownIndicator(f"unknown IEDR indicator {self.id!r}", indicator=self.id)
        level = _strict_int(self.level, self.id)
        if level not in (0, 1, 2, 3):
            raise InvalidLevel(f"{self.id}: level {level} outside 0..3", indicator=self.id)
        if level > 0 and not self.evidence.strip():
            raise MissingEvidence(f"{self.id}: level {level} requires evidence", indicator=self.id)

    @property
    def axis(self) -> AxisId:
        return INDICATORS[self.id][0]

    @property
    def weight_class(self) -> WeightClass:
        return INDICATORS[self.id][1]

    def to_record(self) -> Dict:
        return {"indicator_id": self.id, "level": self.level,
                "evidence": self.evidence, "reasoning": self.reasoning}


def iedr_score(indicator: IedrIndicator) -> float:
    """Key cell for (weight class, level)"""
    if indicator.id not in INDICATORS:
        raise UnknownIndicator(f"unknown IEDR indicator {indicator.id!r}")
    return float(IEDR_KEY[INDICATORS[indicator.id][1]][indicator.level])


def _check_indicator_set(indicators: Sequence[IedrIndicator]) -> None:
    seen: Dict[str, int] = {}
    for ind in indicators:
        seen[ind.id] = seen.get(ind.id, 0) + 1
    dupes = sorted(k for k, n in seen.items() if n > 1)
    if dupes:
        raise DuplicateIndicator(f"duplicate IEDR indicators: {', '.join(dupes)}")
    missing = sorted(set(INDICATORS) - set(seen))
    if missing:
        raise MissingIndicator(f"missing IEDR indicators: {', '.join(missing)}")


@dataclass(frozen=True)
class IedrAssessment:
    """Nine indicators, one per code"""
    indicators: Tuple[IedrIndicator, ...]

    def __post_init__(self):
        _check_indicator_set(tuple(self.indicators))
        order = list(INDICATORS)
        object.__setattr__(self, "indicators",
                           tuple(sorted(self.indicators, key=lambda i: order.index(i.id))))

    @property
    def p0(self) -> PsychState:
        return assemble_initial_state(self)[0]

    @property
    def r0(self) -> float:
        return assemble_initial_state(self)[1]

    @property
    def degenerate(self) -> bool:
        return self.r0 == 0.0

    def level_of(self, code: str) -> int:
        for ind in self.indicators:
            if ind.id == code:
                return ind.level
        raise UnknownIndicator(code)

    def to_records(self) -> List[Dict]:
        return [ind.to_record() for ind in self.indicators]

    @classmethod
    def from_records(cls, records: Iterable[Mapping]) -> "IedrAssessment":
        return cls(tuple(
            IedrIndicator(
                id=r.get("indicator_id", r.get("id")),
                level=r["level"],
                evidence=r.get("evidence", "") or "",
                reasoning=r.get("reasoning", "") or "",
            ) for r in records
        ))

    @classmethod
    def from_levels(cls, levels: Mapping[str, int], evidence: str = "card evidence",
                    reasoning: str = "key-level rating") -> "IedrAssessment":
        """Shorthand for fixtures; unnamed indicators are level 0"""
        unknown = sorted(set(levels) - set(INDICATORS))
        if unknown:
            raise UnknownIndicator(f"unknown IEDR indicators: {', '.join(unknown)}")
        return cls(tuple(
            IedrIndicator(code, levels.get(code, 0),
                          evidence if levels.get(code, 0) else "",
                          reasoning if levels.get(code, 0) else "")
            for code in INDICATORS
        ))


def assemble_initial_state(a) -> Tuple[PsychState, float]:
    """
    Axis sums under the key, r0 = ||P0||.

    Accepts an IedrAssessment or a bare sequence of indicators. An all-zero
    assessment returns r0 = 0 (degenerate; callers refuse to run it).
    """
    indicators = a.indicators if isinstance(a, IedrAssessment) else tuple(a)
    if not isinstance(a, IedrAssessment):
        _check_indicator_set(indicators)
    sums = {axis: 0.0 for axis in AxisId.ordered()}
    for ind in indicators:
        sums[ind.axis] += iedr_score(ind)
    state = PsychState(*(sums[axis] for axis in AxisId.ordered()))
    return state, resistance(state)


# =============================================================================
# MDEP-PR
# =============================================================================

@dataclass(frozen=True)
class MdepChannelRating:
    axis: AxisId
    channel: Channel
    level: int
    evidence: str = ""
    reasoning: str = ""

    def __post_init__(self):
        object.__setattr__(self, "axis", AxisId.parse(self.axis))
        object.__setattr__(self, "channel", Channel.parse(self.channel))
        tag = f"{self.axis.value}.{self.channel.value}"
        level = _strict_int(self.level, tag)
        allowed = (0, 1, 2) if self.channel is Channel.PROG else (0, -1, -2)
        if level not in allowed:
            raise InvalidLevel(f"{tag}: level {level} not in {allowed}", channel=tag)
        if level != 0 and (not self.evidence.strip() or not self.reasoning.strip()):
            raise MissingEvidence(f"{tag}: nonzero level requires evidence and reasoning", channel=tag)

    def to_record(self) -> Dict:
        return {"axis": self.axis.value, "channel": self.channel.value, "level": self.level,
                "evidence": self.evidence, "reasoning": self.reasoning}


def mdep_score(rating: MdepChannelRating) -> float:
    if rating.channel is Channel.PROG:
        table = MDEP_PROG_KEY
    else:
        table = MDEP_NEG_KEY[rating.axis]
    if rating.level not in table:
        raise InvalidLevel(f"level {rating.level} not in key for {rating.axis.value}.{rating.channel.value}")
    return float(table[rating.level])


@dataclass(frozen=True)
class MdepWindowRating:
    """Six channel ratings for one adjudication window"""
    ratings: Tuple[MdepChannelRating, ...]
    window_index: int = 1

    def __post_init__(self):
        object.__setattr__(self, "ratings", tuple(self.ratings))
        if isinstance(self.window_index, bool) or not isinstance(self.window_index, int) \
                or self.window_index < 1:
            raise InvalidLevel(f"window_index must be an integer >= 1, got {self.window_index!r}")
        seen = set()
        for r in self.ratings:
            key = (r.axis, r.channel)
            if key in seen:
                raise DuplicateChannel(f"duplicate channel {r.axis.value}.{r.channel.value}",
                                       window=self.window_index)
            seen.add(key)
        missing = [f"{axis.value}.{ch.value}" for axis in AxisId.ordered() for ch in Channel
                   if (axis, ch) not in seen]
        if missing:
            raise MissingChannel(f"missing channels: {', '.join(missing)}", window=self.window_index)

    def get(self, axis: AxisId, channel: Channel) -> MdepChannelRating:
        for r in self.ratings:
            if r.axis is axis and r.channel is channel:
                return r
        raise MissingChannel(f"{axis.value}.{channel.value}")

    def levels(self) -> Dict[str, Tuple[int, int]]:
        return {axis.value: (self.get(axis, Channel.PROG).level, self.get(axis, Channel.NEG).level)
                for axis in AxisId.ordered()}

    def to_records(self) -> List[Dict]:
        return [self.get(axis, ch).to_record() for axis in AxisId.ordered() for ch in Channel]

    @classmethod
    def from_records(cls, records: Iterable[Mapping], window_index: int = 1) -> "MdepWindowRating":
        return cls(tuple(
            MdepChannelRating(
                axis=AxisId.parse(r["axis"]),
                channel=Channel.parse(r["channel"]),
                level=r["level"],
                evidence=r.get("evidence", "") or "",
                reasoning=r.get("reasoning", "") or "",
            ) for r in records
        ), window_index=window_index)

    @classmethod
    def from_levels(cls, levels: Mapping[str, Tuple[int, int]], window_index: int = 1,
                    evidence: Optional[str] = None, reasoning: str = "rated against the actor profile"
                    ) -> "MdepWindowRating":
        """
        {"C": (prog, neg), "A": (...), "P": (...)}; missing axes are (0, 0).
        Nonzero levels get placeholder evidence so the window validates.
        """
        text = evidence if evidence is not None else f"quoted reply, window {window_index}"
        ratings = []
        for axis in AxisId.ordered():
            prog, neg = levels.get(axis.value, (0, 0))
            for ch, level in ((Channel.PROG, prog), (Channel.NEG, neg)):
                ratings.append(MdepChannelRating(
                    axis, ch, level,
                    evidence=text if level else "",
                    reasoning=reasoning if level else "",
                ))
        return cls(tuple(ratings), window_index=window_index)


def assemble_action_vector(w: MdepWindowRating) -> ActionVector:
    """Per-axis Prog + Neg"""
    parts = []
    for axis in AxisId.ordered():
        parts.append(mdep_score(w.get(axis, Channel.PROG)) + mdep_score(w.get(axis, Channel.NEG)))
    return ActionVector(*parts)


def penalty_intensity(w: MdepWindowRating) -> float:
    """0.5 x sum |Neg level|, in [0, 3]"""
    total = sum(abs(w.get(axis, Channel.NEG).level) for axis in AxisId.ordered())
    return PENALTY_SCALE * total
