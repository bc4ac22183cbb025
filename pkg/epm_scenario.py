#!/usr/bin/env python3
"""
================================================================================
    EPM SCENARIO - PERSONA CARDS, VALIDATION, BANDING, SAMPLING
================================================================================

    A scenario is a persona card + crisis event + labels, optionally with a
    frozen IEDR so benchmark runs don't re-judge baselines.

    Real-to-Sim pipeline:
        Filter -> ExtractFeatures -> (skip empty) -> G(persona), G(crisis)
               -> Validate -> collect

    Generators are pluggable: TemplateGenerator is deterministic and offline,
    the chat-backed generator lives in epm_agents.

    Cards are stored one per YAML file; the corpus manifest lists ids,
    labels and bands.
================================================================================
"""

import glob
import hashlib
import logging
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Callable, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np
import yaml

from epm_core import AxisId
from epm_errors import (
    GeneratorFailure,
    InfeasibleStrata,
    SchemaIncomplete,
    ValidationFailed,
)
from epm_rubric import IedrAssessment

logger = logging.getLogger("EpmBench.scenario")

BAND_MU = 32.32
BAND_SIGMA = 4.52


# =============================================================================
# ENUMS
# =============================================================================

class Level(Enum):
    LOW = "Low"
    MEDIUM = "Medium"
    HIGH = "High"

    @classmethod
    def parse(cls, value) -> "Level":
        if isinstance(value, Level):
            return value
        text = str(value).strip().strip("[]").lower()
        for lv in cls:
            if lv.value.lower() == text:
                return lv
        raise SchemaIncomplete(f"unknown level {value!r} (expected Low, Medium or High)")


class PersonaType(Enum):
    RECEPTIVE = "Receptive"
    DEFENSIVE = "Defensive"


class MechanismKind(Enum):
    ROUTINE = "Routine"
    CHALLENGING = "Challenging"


class DifficultyBand(Enum):
    EASY = "Easy"
    MEDIUM = "Medium"
    HARD = "Hard"
    EXTREME = "Extreme"


# Story blocks the Director may release to the user agent
MEMORY_KEYS = (
    "trigger", "development_1", "development_2", "development_3", "development_4",
    "outcome", "epilogue",
)
INITIAL_MEMORIES = ("trigger",)


# =============================================================================
# PERSONA CARD
# =============================================================================

@dataclass
class RoleInfo:
    name: str = ""
    gender: str = ""
    age: str = ""


@dataclass
class RoleTraits:
    social_persona: str = ""
    inner_core: str = ""


@dataclass
class EmpathyNeeds:
    vent_content: str = ""
    hoped_points: str = ""
    threshold_constraints: str = ""


@dataclass
class PastExperiences:
    childhood: str = ""
    adolescence: str = ""
    young_adulthood: str = ""
    implicit_arc: str = ""


@dataclass
class CurrentSituation:
    circumstances: str = ""
    main_goal: str = ""
    vision: str = ""


@dataclass
class Story:
    trigger: str = ""
    development: List[str] = field(default_factory=lambda: ["", "", "", ""])
    outcome: str = ""
    epilogue: str = ""


@dataclass
class PersonaCard:
    role_info: RoleInfo = field(default_factory=RoleInfo)
    role_traits: RoleTraits = field(default_factory=RoleTraits)
    empathy_threshold: Level = Level.MEDIUM
    threshold_note: str = ""
    chat_topic: str = ""
    empathy_needs: EmpathyNeeds = field(default_factory=EmpathyNeeds)
    empathy_priority: Dict[AxisId, Level] = field(default_factory=dict)
    priority_notes: Dict[AxisId, str] = field(default_factory=dict)
    past_experiences: PastExperiences = field(default_factory=PastExperiences)
    current_situation: CurrentSituation = field(default_factory=CurrentSituation)
    story: Story = field(default_factory=Story)

    def memory(self, key: str) -> str:
        if key not in MEMORY_KEYS:
            raise KeyError(key)
        if key.startswith("development_"):
            idx = int(key.split("_")[1]) - 1
            stages = self.story.development
            return stages[idx] if idx < len(stages) else ""
        return getattr(self.story, key)

    def high_axes(self) -> List[AxisId]:
        return [axis for axis in AxisId.ordered() if self.empathy_priority.get(axis) is Level.HIGH]

    def sections(self) -> Dict[str, str]:
        """Flat section path -> text; the required-section checklist runs over this"""
        out = {
            "role_info.name": self.role_info.name,
            "role_info.gender": self.role_info.gender,
            "role_info.age": self.role_info.age,
            "role_traits.social_persona": self.role_traits.social_persona,
            "role_traits.inner_core": self.role_traits.inner_core,
            "chat_topic": self.chat_topic,
            "empathy_needs.vent_content": self.empathy_needs.vent_content,
            "empathy_needs.hoped_points": self.empathy_needs.hoped_points,
            "empathy_needs.threshold_constraints": self.empathy_needs.threshold_constraints,
            "past_experiences.childhood": self.past_experiences.childhood,
            "past_experiences.adolescence": self.past_experiences.adolescence,
            "past_experiences.young_adulthood": self.past_experiences.young_adulthood,
            "past_experiences.implicit_arc": self.past_experiences.implicit_arc,
            "current_situation.circumstances": self.current_situation.circumstances,
            "current_situation.main_goal": self.current_situation.main_goal,
            "current_situation.vision": self.current_situation.vision,
            "story.trigger": self.story.trigger,
            "story.outcome": self.story.outcome,
            "story.epilogue": self.story.epilogue,
        }
        for i in range(4):
            stages = self.story.development
            out[f"story.development_{i + 1}"] = stages[i] if i < len(stages) else ""
        return out

    def text(self) -> str:
        parts = list(self.sections().values()) + [self.threshold_note]
        parts += [self.priority_notes.get(axis, "") for axis in AxisId.ordered()]
        return "\n".join(p for p in parts if p)


REQUIRED_SECTIONS = tuple(PersonaCard().sections().keys())


# =============================================================================
# SCENARIO
# =============================================================================

@dataclass
class ScenarioLabel:
    name: str
    primary: bool = False


@dataclass
class MechanismLabel:
    axis: AxisId
    kind: MechanismKind

    def __str__(self) -> str:
        return f"{self.axis.value}-{self.kind.value}"

    @classmethod
    def parse(cls, text: str) -> "MechanismLabel":
        try:
            axis, kind = str(text).split("-", 1)
            return cls(AxisId.parse(axis), MechanismKind(kind.strip().title()))
        except ValueError as e:
            raise SchemaIncomplete(f"bad mechanism label {text!r} (expected e.g. 'C-Routine')") from e


@dataclass
class Scenario:
    id: str
    persona: PersonaCard
    crisis_event: str
    labels: List[ScenarioLabel]
    domain_label: str
    mechanism_label: MechanismLabel
    persona_type: PersonaType
    iedr: Optional[IedrAssessment] = None
    difficulty_band: Optional[DifficultyBand] = None
    synthetic: bool = True

    @property
    def primary_label(self) -> Optional[str]:
        primaries = [lb.name for lb in self.labels if lb.primary]
        return primaries[0] if len(primaries) == 1 else None

    @property
    def r0(self) -> Optional[float]:
        return self.iedr.r0 if self.iedr is not None else None


# =============================================================================
# SERIALIZATION
# =============================================================================

def _section(cls, data: Any, where: str):
    if data is None:
        return cls()
    if not isinstance(data, dict):
        raise SchemaIncomplete(f"{where} must be a mapping")
    known = cls.__dataclass_fields__.keys()
    unknown = sorted(set(data) - set(known))
    if unknown:
        raise SchemaIncomplete(f"unknown fields in {where}: {', '.join(unknown)}")
    return cls(**{k: ("" if v is None else str(v)) for k, v in data.items()})


def persona_from_dict(data: Mapping[str, Any]) -> PersonaCard:
    if not isinstance(data, Mapping):
        raise SchemaIncomplete("persona must be a mapping")
    story_raw = dict(data.get("story") or {})
    development = [("" if s is None else str(s)) for s in (story_raw.pop("development", None) or [])]
    development += [""] * (4 - len(development))
    story = _section(Story, {k: v for k, v in story_raw.items()}, "story")
    story.development = development

    priority: Dict[AxisId, Level] = {}
    notes: Dict[AxisId, str] = {}
    for key, value in (data.get("empathy_priority") or {}).items():
        try:
            axis = AxisId.parse(key)
        except ValueError as e:
            raise SchemaIncomplete(f"empathy_priority: {e}") from e
        if axis in priority:
            raise SchemaIncomplete(f"empathy_priority lists {axis.value} twice")
        if isinstance(value, Mapping):
            priority[axis] = Level.parse(value.get("level"))
            notes[axis] = str(value.get("note", "") or "")
        else:
            priority[axis] = Level.parse(value)

    return PersonaCard(
        role_info=_section(RoleInfo, data.get("role_info"), "role_info"),
        role_traits=_section(RoleTraits, data.get("role_traits"), "role_traits"),
        empathy_threshold=Level.parse(data.get("empathy_threshold", "Medium")),
        threshold_note=str(data.get("threshold_note", "") or ""),
        chat_topic=str(data.get("chat_topic", "") or ""),
        empathy_needs=_section(EmpathyNeeds, data.get("empathy_needs"), "empathy_needs"),
        empathy_priority=priority,
        priority_notes=notes,
        past_experiences=_section(PastExperiences, data.get("past_experiences"), "past_experiences"),
        current_situation=_section(CurrentSituation, data.get("current_situation"), "current_situation"),
        story=story,
    )


def persona_to_dict(p: PersonaCard) -> Dict[str, Any]:
    priority = {}
    for axis in AxisId.ordered():
        if axis in p.empathy_priority:
            note = p.priority_notes.get(axis, "")
            level = p.empathy_priority[axis].value
            priority[axis.value] = {"level": level, "note": note} if note else level
    return {
        "role_info": vars(p.role_info).copy(),
        "role_traits": vars(p.role_traits).copy(),
        "empathy_threshold": p.empathy_threshold.value,
        "threshold_note": p.threshold_note,
        "chat_topic": p.chat_topic,
        "empathy_needs": vars(p.empathy_needs).copy(),
        "empathy_priority": priority,
        "past_experiences": vars(p.past_experiences).copy(),
        "current_situation": vars(p.current_situation).copy(),
        "story": {
            "trigger": p.story.trigger,
            "development": list(p.story.development),
            "outcome": p.story.outcome,
            "epilogue": p.story.epilogue,
        },
    }


def scenario_to_dict(s: Scenario) -> Dict[str, Any]:
    return {
        "id": s.id,
        "synthetic": s.synthetic,
        "domain_label": s.domain_label,
        "mechanism_label": str(s.mechanism_label),
        "persona_type": s.persona_type.value,
        "labels": [{"name": lb.name, "role": "primary" if lb.primary else "secondary"} for lb in s.labels],
        "difficulty_band": s.difficulty_band.value if s.difficulty_band else None,
        "crisis_event": s.crisis_event,
        "persona": persona_to_dict(s.persona),
        "iedr": s.iedr.to_records() if s.iedr is not None else None,
    }


def scenario_from_dict(data: Mapping[str, Any]) -> Scenario:
    if not isinstance(data, Mapping):
        raise SchemaIncomplete("scenario file must contain a mapping")
    for key in ("id", "persona", "mechanism_label", "persona_type"):
        if not data.get(key):
            raise SchemaIncomplete(f"scenario is missing {key!r}")
    labels = []
    for raw in data.get("labels") or []:
        if isinstance(raw, str):
            labels.append(ScenarioLabel(raw, False))
            continue
        role = str(raw.get("role", "secondary")).lower()
        if role not in ("primary", "secondary"):
            raise SchemaIncomplete(f"label role must be primary or secondary, got {role!r}")
        labels.append(ScenarioLabel(str(raw["name"]), role == "primary"))
    try:
        persona_type = PersonaType(str(data["persona_type"]).title())
        band = DifficultyBand(str(data["difficulty_band"]).title()) if data.get("difficulty_band") else None
    except ValueError as e:
        raise SchemaIncomplete(str(e)) from e
    iedr = IedrAssessment.from_records(data["iedr"]) if data.get("iedr") else None
    return Scenario(
        id=str(data["id"]),
        persona=persona_from_dict(data["persona"]),
        crisis_event=str(data.get("crisis_event", "") or ""),
        labels=labels,
        domain_label=str(data.get("domain_label", "") or ""),
        mechanism_label=MechanismLabel.parse(data["mechanism_label"]),
        persona_type=persona_type,
        iedr=iedr,
        difficulty_band=band,
        synthetic=bool(data.get("synthetic", True)),
    )


def save_scenario(s: Scenario, path: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(scenario_to_dict(s), f, sort_keys=False, allow_unicode=True, width=100)


def load_scenario(path: str) -> Scenario:
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = yaml.safe_load(f)
        except yaml.YAMLError as e:
            raise SchemaIncomplete(f"{path}: not valid YAML: {e}") from e
    try:
        return scenario_from_dict(data)
    except ValidationFailed as e:
        e.context.setdefault("path", path)
        raise


def load_corpus(corpus_dir: str) -> List[Scenario]:
    """Scenarios listed in manifest.yaml, or every card under scenarios/"""
    manifest_path = os.path.join(corpus_dir, "manifest.yaml")
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as f:
            manifest = yaml.safe_load(f) or {}
        paths = [os.path.join(corpus_dir, entry["file"]) for entry in manifest.get("scenarios", [])]
    else:
        paths = sorted(glob.glob(os.path.join(corpus_dir, "scenarios", "*.yaml")))
    scenarios = [load_scenario(p) for p in paths]
    ids = [s.id for s in scenarios]
    if len(ids) != len(set(ids)):
        raise SchemaIncomplete(f"duplicate scenario ids in {corpus_dir}")
    logger.info(f"[CORPUS] Loaded {len(scenarios)} scenarios from {corpus_dir}")
    return scenarios


def manifest_entry(s: Scenario, file: str) -> Dict[str, Any]:
    return {
        "id": s.id,
        "file": file,
        "primary_label": s.primary_label,
        "secondary_labels": [lb.name for lb in s.labels if not lb.primary],
        "domain": s.domain_label,
        "mechanism": str(s.mechanism_label),
        "persona_type": s.persona_type.value,
        "band": s.difficulty_band.value if s.difficulty_band else None,
        "r0": round(s.r0, 6) if s.r0 is not None else None,
    }


def write_manifest(scenarios: Sequence[Scenario], corpus_dir: str, subdir: str = "scenarios") -> str:
    entries = [manifest_entry(s, f"{subdir}/{s.id}.yaml") for s in scenarios]
    path = os.path.join(corpus_dir, "manifest.yaml")
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump({"synthetic": True, "count": len(entries), "scenarios": entries},
                       f, sort_keys=False, allow_unicode=True)
    return path


# =============================================================================
# DIFFICULTY BANDING
# =============================================================================

def difficulty_band(r0: float, mu: float = BAND_MU, sigma: float = BAND_SIGMA) -> DifficultyBand:
    """
    Extreme  r0 > mu + sigma
    Hard     mu < r0 <= mu + sigma
    Medium   mu - sigma <= r0 <= mu
    Easy     r0 < mu - sigma
    """
    if not sigma > 0:
        raise ValueError(f"sigma must be > 0, got {sigma}")
    if r0 > mu + sigma:
        return DifficultyBand.EXTREME
    if r0 > mu:
        return DifficultyBand.HARD
    if r0 >= mu - sigma:
        return DifficultyBand.MEDIUM
    return DifficultyBand.EASY


# =============================================================================
# VALIDATION
# =============================================================================

@dataclass(frozen=True)
class QualityCriteria:
    required_sections: Tuple[str, ...] = REQUIRED_SECTIONS
    domains: Tuple[str, ...] = ()
    min_chars: int = 40
    max_chars: int = 20000
    banned_terms: Tuple[str, ...] = ()
    banned_predicates: Tuple[Callable[[str], bool], ...] = ()
    band_mu: float = BAND_MU
    band_sigma: float = BAND_SIGMA

    @classmethod
    def from_config(cls, cfg) -> "QualityCriteria":
        return cls(
            domains=tuple(cfg.domains),
            min_chars=cfg.min_chars,
            max_chars=cfg.max_chars,
            banned_terms=tuple(cfg.banned_terms),
            band_mu=cfg.band_mu,
            band_sigma=cfg.band_sigma,
        )


@dataclass(frozen=True)
class ValidationReason:
    code: str
    detail: str

    def to_record(self) -> Dict[str, str]:
        return {"code": self.code, "detail": self.detail}


@dataclass(frozen=True)
class ValidationVerdict:
    scenario_id: str
    reasons: Tuple[ValidationReason, ...] = ()

    @property
    def passed(self) -> bool:
        return not self.reasons

    @property
    def codes(self) -> List[str]:
        return [r.code for r in self.reasons]

    def to_record(self) -> Dict[str, Any]:
        return {"id": self.scenario_id, "passed": self.passed,
                "reasons": [r.to_record() for r in self.reasons]}


def validate_scenario(s: Scenario, q: QualityCriteria) -> ValidationVerdict:
    reasons: List[ValidationReason] = []

    sections = s.persona.sections()
    sections["crisis_event"] = s.crisis_event
    for key in q.required_sections + ("crisis_event",):
        if not str(sections.get(key, "")).strip():
            reasons.append(ValidationReason("MissingSection", key))

    for axis in AxisId.ordered():
        if axis not in s.persona.empathy_priority:
            reasons.append(ValidationReason("MissingPriority", axis.value))

    primaries = [lb.name for lb in s.labels if lb.primary]
    if len(primaries) != 1:
        reasons.append(ValidationReason("LabelConflict", f"{len(primaries)} primary labels"))

    if q.domains and s.domain_label not in q.domains:
        reasons.append(ValidationReason("UnknownDomain", s.domain_label or "<empty>"))

    text = s.persona.text() + "\n" + s.crisis_event
    if not q.min_chars <= len(text) <= q.max_chars:
        reasons.append(ValidationReason("LengthOutOfBounds", f"{len(text)} chars"))

    lowered = text.lower()
    for term in q.banned_terms:
        if term.lower() in lowered:
            reasons.append(ValidationReason("BannedContent", term))
    for predicate in q.banned_predicates:
        if predicate(text):
            reasons.append(ValidationReason("BannedContent", getattr(predicate, "__name__", "predicate")))

    if s.iedr is not None:
        if s.iedr.degenerate:
            reasons.append(ValidationReason("DegenerateIedr", "r0 = 0"))
        expected = difficulty_band(s.iedr.r0, q.band_mu, q.band_sigma)
        if s.difficulty_band is not None and s.difficulty_band is not expected:
            reasons.append(ValidationReason(
                "BandMismatch", f"{s.difficulty_band.value} but r0={s.iedr.r0:.4f} is {expected.value}"))

    return ValidationVerdict(s.id, tuple(reasons))


# =============================================================================
# FEATURE EXTRACTION (stub filter + keyword extractor)
# =============================================================================

@dataclass(frozen=True)
class FeatureSchema:
    """Keyword cues per feature; the stub extractor counts hits"""
    axis_cues: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: {
        "C": ("what should i do", "don't know how", "advice", "confused", "figure out", "makes no sense"),
        "A": ("i feel", "exhausted", "lonely", "crying", "hurt", "just listen",
              "someone to understand", "nobody understands", "so tired"),
        "P": ("give up", "why i started", "worth it", "keep going", "motivation", "my dream", "pointless"),
    })
    threshold_cues: Tuple[str, ...] = (
        "don't tell me", "hate it when people say", "sick of", "slogans", "spare me", "don't lecture")
    memory_cues: Tuple[str, ...] = ("remember", "when i was", "years ago", "back in", "used to")
    domain_cues: Dict[str, Tuple[str, ...]] = field(default_factory=lambda: {
        "Values & Beliefs": ("believe", "meaning", "faith", "values"),
        "Physical & Mental Health": ("sick", "diagnosis", "hospital", "anxiety", "sleep"),
        "Daily Life Circumstances": ("rent", "money", "commute", "moving", "bills"),
        "Interpersonal Relations": ("friend", "roommate", "colleague", "betray"),
        "Study & Career": ("exam", "job", "boss", "thesis", "career"),
        "Family & Intimacy": ("parents", "mother", "father", "partner", "divorce"),
    })


DEFAULT_SCHEMA = FeatureSchema()


@dataclass
class FeatureBundle:
    source_id: str
    need_axes: Dict[AxisId, Level]
    threshold_cues: List[str]
    memory_cues: List[str]
    vent: str
    domain: str
    persona_type: PersonaType

    @property
    def top_axis(self) -> AxisId:
        highs = [a for a in AxisId.ordered() if self.need_axes.get(a) is Level.HIGH]
        return highs[0] if highs else AxisId.AFFECTIVE


def keyword_filter(dialogue: str, keywords: Sequence[str]) -> str:
    """Stub Filter: drops dialogues that mention any sensitive keyword"""
    lowered = dialogue.lower()
    if any(k.lower() in lowered for k in keywords):
        return ""
    return dialogue.strip()


def _hits(text: str, cues: Iterable[str]) -> List[str]:
    return [c for c in cues if c in text]


def keyword_features(dialogue: str, schema: FeatureSchema = DEFAULT_SCHEMA,
                     source_id: str = "dialogue", domains: Sequence[str] = ()) -> Optional[FeatureBundle]:
    lowered = dialogue.lower()
    counts = {axis: len(_hits(lowered, schema.axis_cues.get(axis.value, ()))) for axis in AxisId.ordered()}
    if not any(counts.values()):
        return None
    top = max(counts.values())
    need_axes = {}
    for axis in AxisId.ordered():
        if counts[axis] == 0:
            need_axes[axis] = Level.LOW
        elif counts[axis] == top and not any(v is Level.HIGH for v in need_axes.values()):
            need_axes[axis] = Level.HIGH
        else:
            need_axes[axis] = Level.MEDIUM

    threshold = _hits(lowered, schema.threshold_cues)
    domain_scores = {d: len(_hits(lowered, cues)) for d, cues in schema.domain_cues.items()
                     if not domains or d in domains}
    domain = max(domain_scores, key=lambda d: (domain_scores[d], -list(domain_scores).index(d))) \
        if domain_scores and max(domain_scores.values()) > 0 else (domains[0] if domains else "")

    sentences = [s.strip() for s in re.split(r"(?<=[.!?])\s+", dialogue.strip()) if s.strip()]
    return FeatureBundle(
        source_id=source_id,
        need_axes=need_axes,
        threshold_cues=threshold,
        memory_cues=_hits(lowered, schema.memory_cues),
        vent=" ".join(sentences[:3]),
        domain=domain,
        persona_type=PersonaType.DEFENSIVE if threshold else PersonaType.RECEPTIVE,
    )


class TemplateGenerator:
    """
    Offline generator: fills the persona-card schema from features with
    fixed templates. `omit` drops section paths (e.g. 'story.epilogue').
    """

    NAMES = ("Chen Jing", "Alex Moreau", "Priya Nair", "Tomas Berg", "Mei Tanaka", "Sam Okafor")

    def __init__(self, omit: Sequence[str] = (), fail: bool = False):
        self.omit = tuple(omit)
        self.fail = fail

    async def extract(self, dialogue: str, schema: FeatureSchema, source_id: str,
                      domains: Sequence[str]) -> Optional[FeatureBundle]:
        if self.fail:
            raise GeneratorFailure("template generator configured to fail", source=source_id)
        return keyword_features(dialogue, schema, source_id, domains)

    def _pick_name(self, source_id: str) -> str:
        digest = hashlib.sha256(source_id.encode("utf-8")).digest()
        return self.NAMES[digest[0] % len(self.NAMES)]

    async def persona(self, f: FeatureBundle) -> Dict[str, Any]:
        if self.fail:
            raise GeneratorFailure("template generator configured to fail", source=f.source_id)
        name = self._pick_name(f.source_id)
        defensive = f.persona_type is PersonaType.DEFENSIVE
        memory = f.memory_cues[0] if f.memory_cues else "an old memory"
        card = {
            "role_info": {"name": name, "gender": "Unspecified", "age": "29"},
            "role_traits": {
                "social_persona": "Composed in public and reluctant to ask for help.",
                "inner_core": "Carries the worry voiced in the conversation and doubts it will be understood.",
            },
            "empathy_threshold": "High" if defensive else "Medium",
            "threshold_note": ("Rejects templated comfort and stock phrases."
                               if defensive else "Open to sincere attempts at understanding."),
            "chat_topic": f.vent[:120] or "A recent setback",
            "empathy_needs": {
                "vent_content": f.vent or "A recent setback that keeps replaying.",
                "hoped_points": f"To be met first on the {f.top_axis.name.lower()} side of the problem.",
                "threshold_constraints": (", ".join(f.threshold_cues) or "Dislikes being rushed to solutions."),
            },
            "empathy_priority": {axis.value: level.value for axis, level in f.need_axes.items()},
            "past_experiences": {
                "childhood": "Learned early to keep problems private.",
                "adolescence": "Found a few friends who listened without judging.",
                "young_adulthood": "Built routines that hold as long as nothing goes wrong.",
                "implicit_arc": "Measures self-worth by coping alone.",
            },
            "current_situation": {
                "circumstances": f"Dealing with a situation in the area of {f.domain or 'daily life'}.",
                "main_goal": "Get through the next weeks without falling apart.",
                "vision": "Feel steady enough to make the next decision.",
            },
            "story": {
                "trigger": "A small event today reopened the problem.",
                "development": [
                    f"Stage 1: it brings back {memory}.",
                    "Stage 2: comparing then and now.",
                    "Stage 3: questioning the choices that led here.",
                    "Stage 4: the feelings spill over.",
                ],
                "outcome": "Wants to talk it through with someone tonight.",
                "epilogue": "Recalls the last time someone brushed the problem aside.",
            },
        }
        for path in self.omit:
            node = card
            parts = path.split(".")
            for part in parts[:-1]:
                node = node.get(part, {})
            node.pop(parts[-1], None)
        return card

    async def crisis(self, f: FeatureBundle, persona: PersonaCard) -> str:
        return f"{persona.role_info.name} reaches out after the day's events: {f.vent or persona.chat_topic}"


def _missing_sections(card: Mapping[str, Any]) -> List[str]:
    persona = persona_from_dict(card)
    missing = [k for k, v in persona.sections().items() if not str(v).strip()]
    missing += [f"empathy_priority.{a.value}" for a in AxisId.ordered() if a not in persona.empathy_priority]
    return missing


async def extract_features(dialogue: str, schema: FeatureSchema = DEFAULT_SCHEMA,
                           generator=None, source_id: str = "dialogue",
                           filter_keywords: Sequence[str] = (),
                           domains: Sequence[str] = ()) -> Optional[FeatureBundle]:
    """Filter then extract; None means skip this dialogue"""
    kept = keyword_filter(dialogue or "", filter_keywords)
    if not kept:
        return None
    generator = generator or TemplateGenerator()
    try:
        return await generator.extract(kept, schema, source_id, domains)
    except GeneratorFailure:
        raise
    except Exception as e:
        raise GeneratorFailure(f"feature extraction failed: {e}", source=source_id) from e


async def generate_scenario(f: FeatureBundle, generator=None, scenario_id: Optional[str] = None) -> Scenario:
    generator = generator or TemplateGenerator()
    try:
        card = await generator.persona(f)
    except GeneratorFailure:
        raise
    except Exception as e:
        raise GeneratorFailure(f"persona generation failed: {e}", source=f.source_id) from e

    missing = _missing_sections(card)
    if missing:
        raise SchemaIncomplete(f"generated card is missing: {', '.join(missing)}", source=f.source_id)
    persona = persona_from_dict(card)

    try:
        crisis = await generator.crisis(f, persona)
    except GeneratorFailure:
        raise
    except Exception as e:
        raise GeneratorFailure(f"crisis generation failed: {e}", source=f.source_id) from e
    if not str(crisis).strip():
        raise SchemaIncomplete("generator returned an empty crisis event", source=f.source_id)

    axis = f.top_axis
    kind = MechanismKind.CHALLENGING if f.persona_type is PersonaType.DEFENSIVE else MechanismKind.ROUTINE
    labels = [ScenarioLabel(f"{axis.name.title()} need", True)]
    labels += [ScenarioLabel(f"{a.name.title()} need") for a, lv in f.need_axes.items()
               if lv is Level.MEDIUM]
    if f.memory_cues:
        labels.append(ScenarioLabel("Memory-linked"))

    return Scenario(
        id=scenario_id or f"gen-{f.source_id}",
        persona=persona,
        crisis_event=str(crisis),
        labels=labels,
        domain_label=f.domain,
        mechanism_label=MechanismLabel(axis, kind),
        persona_type=f.persona_type,
        synthetic=True,
    )


@dataclass
class PipelineReport:
    accepted: List[Scenario] = field(default_factory=list)
    rejected: List[ValidationVerdict] = field(default_factory=list)
    skipped: List[str] = field(default_factory=list)
    failed: List[Dict[str, str]] = field(default_factory=list)

    def to_record(self) -> Dict[str, Any]:
        return {
            "accepted": [s.id for s in self.accepted],
            "rejected": [v.to_record() for v in self.rejected],
            "skipped": list(self.skipped),
            "failed": list(self.failed),
        }


async def real_to_sim(dialogues: Mapping[str, str], schema: FeatureSchema = DEFAULT_SCHEMA,
                      generator=None, criteria: QualityCriteria = QualityCriteria(),
                      filter_keywords: Sequence[str] = ()) -> PipelineReport:
    """Runs every dialogue through the pipeline; one bad dialogue never stops the batch"""
    report = PipelineReport()
    for source_id, dialogue in dialogues.items():
        try:
            f = await extract_features(dialogue, schema, generator, source_id,
                                       filter_keywords, criteria.domains)
            if f is None:
                report.skipped.append(source_id)
                logger.info(f"[GEN] {source_id}: no empathy-relevant features, skipped")
                continue
            s = await generate_scenario(f, generator, scenario_id=f"gen-{source_id}")
        except (GeneratorFailure, SchemaIncomplete) as e:
            report.failed.append({"source": source_id, "error": e.code, "message": e.message})
            logger.warning(f"[GEN] {source_id}: {e.code}: {e.message}")
            continue
        verdict = validate_scenario(s, criteria)
        if verdict.passed:
            report.accepted.append(s)
        else:
            report.rejected.append(verdict)
            logger.info(f"[GEN] {source_id}: rejected ({', '.join(verdict.codes)})")
    logger.info(f"[GEN] accepted={len(report.accepted)} rejected={len(report.rejected)} "
                f"skipped={len(report.skipped)} failed={len(report.failed)}")
    return report


# =============================================================================
# STRATIFIED SAMPLING
# =============================================================================

STRATUM_KEYS: Dict[str, Callable[[Scenario], Optional[str]]] = {
    "axis": lambda s: s.mechanism_label.axis.value,
    "mechanism": lambda s: str(s.mechanism_label),
    "domain": lambda s: s.domain_label,
    "persona_type": lambda s: s.persona_type.value,
    "band": lambda s: s.difficulty_band.value if s.difficulty_band else None,
    "primary_label": lambda s: s.primary_label,
}


@dataclass
class SamplingSpec:
    """
    quotas: exact counts per stratum value; values of a quota key that
    are not listed are excluded. minimums: lower bounds only.
    """
    size: int = 0
    quotas: Dict[str, Dict[str, int]] = field(default_factory=dict)
    minimums: Dict[str, Dict[str, int]] = field(default_factory=dict)
    seed: int = 0
    restarts: int = 200

    def __post_init__(self):
        for key in list(self.quotas) + list(self.minimums):
            if key not in STRATUM_KEYS:
                raise ValueError(f"unknown stratum key {key!r} (known: {', '.join(STRATUM_KEYS)})")
        if self.size <= 0 and self.quotas:
            first = next(iter(self.quotas.values()))
            self.size = sum(first.values())

    @classmethod
    def load(cls, path: str) -> "SamplingSpec":
        with open(path, "r", encoding="utf-8") as f:
            data = yaml.safe_load(f) or {}
        return cls(**data)


def _deficits(corpus: Sequence[Scenario], spec: SamplingSpec) -> Dict[str, int]:
    deficits: Dict[str, int] = {}
    for table in (spec.quotas, spec.minimums):
        for key, wanted in table.items():
            fn = STRATUM_KEYS[key]
            for value, count in wanted.items():
                have = sum(1 for s in corpus if fn(s) == value)
                if have < count:
                    deficits[value] = max(deficits.get(value, 0), count - have)
    if len(corpus) < spec.size:
        deficits["size"] = spec.size - len(corpus)
    return deficits


def _fits(s: Scenario, counts: Dict[Tuple[str, str], int], spec: SamplingSpec) -> bool:
    for key, wanted in spec.quotas.items():
        value = STRATUM_KEYS[key](s)
        if counts.get((key, value), 0) + 1 > wanted.get(value, 0):
            return False
    return True


def _satisfied(counts: Dict[Tuple[str, str], int], spec: SamplingSpec) -> bool:
    for key, wanted in spec.quotas.items():
        if any(counts.get((key, v), 0) != n for v, n in wanted.items()):
            return False
    for key, wanted in spec.minimums.items():
        if any(counts.get((key, v), 0) < n for v, n in wanted.items()):
            return False
    return True


def stratified_sample(corpus: Sequence[Scenario], spec: SamplingSpec) -> List[Scenario]:
    """
    Seeded greedy fill over shuffled candidates, restarted with fresh
    shuffles until every quota and minimum holds. The result keeps the
    corpus order.
    """
    deficits = _deficits(corpus, spec)
    if deficits:
        raise InfeasibleStrata(deficits)

    rng = np.random.default_rng(spec.seed)
    keys = list(spec.quotas) + [k for k in spec.minimums if k not in spec.quotas]
    best_gap = None

    for attempt in range(max(1, spec.restarts)):
        order = rng.permutation(len(corpus))
        chosen: List[int] = []
        counts: Dict[Tuple[str, str], int] = {}

        def needs_min(s: Scenario) -> bool:
            for key, wanted in spec.minimums.items():
                value = STRATUM_KEYS[key](s)
                if value in wanted and counts.get((key, value), 0) < wanted[value]:
                    return True
            return False

        for prefer_minimums in (True, False):
            for i in order:
                if len(chosen) >= spec.size:
                    break
                if i in chosen:
                    continue
                s = corpus[int(i)]
                if prefer_minimums and not needs_min(s):
                    continue
                if not _fits(s, counts, spec):
                    continue
                chosen.append(int(i))
                for key in keys:
                    value = STRATUM_KEYS[key](s)
                    counts[(key, value)] = counts.get((key, value), 0) + 1

        if len(chosen) == spec.size and _satisfied(counts, spec):
            logger.info(f"[SAMPLE] {spec.size} scenarios drawn (attempt {attempt + 1}, seed {spec.seed})")
            return [corpus[i] for i in sorted(chosen)]
        gap = spec.size - len(chosen)
        best_gap = gap if best_gap is None else min(best_gap, gap)

    raise InfeasibleStrata({"combination": best_gap or 1},
                           message=f"no sample meets all strata after {spec.restarts} restarts")


# =============================================================================
# CORPUS OVERVIEW
# =============================================================================

def corpus_overview(scenarios: Sequence[Scenario]) -> Dict[str, Any]:
    """Distribution counts and the r0 moments actually present"""
    def count(fn) -> Dict[str, int]:
        out: Dict[str, int] = {}
        for s in scenarios:
            key = fn(s)
            key = "unbanded" if key is None else key
            out[key] = out.get(key, 0) + 1
        return dict(sorted(out.items()))

    r0s = np.array([s.r0 for s in scenarios if s.r0 is not None], dtype=np.float64)
    return {
        "count": len(scenarios),
        "axis": count(STRATUM_KEYS["axis"]),
        "mechanism": count(STRATUM_KEYS["mechanism"]),
        "domain": count(STRATUM_KEYS["domain"]),
        "band": count(STRATUM_KEYS["band"]),
        "persona_type": count(STRATUM_KEYS["persona_type"]),
        "empathy_threshold": count(lambda s: s.persona.empathy_threshold.value),
        "r0_mean": float(r0s.mean()) if r0s.size else None,
        "r0_std": float(r0s.std(ddof=1)) if r0s.size > 1 else None,
    }
