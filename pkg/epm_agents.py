#!/usr/bin/env python3
"""
================================================================================
    EPM AGENTS - ROLE BACKENDS (USER / TEST / JUDGE / DIRECTOR)
================================================================================

    Live backends talk to any OpenAI-compatible endpoint:

        POST {base_url}/chat/completions   (whole messages, no streaming)

    - Keys come only from the env var named by auth_env_var
    - Exponential backoff on 429 / 5xx / timeouts, up to max_retries
    - One shared Throttler per endpoint (rate_limit requests per 60 s)

    Judge output is a JSON object (schema "epm-judge/1", see
    JUDGE_WIRE_FORMAT.md), validated with pydantic and then by the rubric.
    Invalid output is quoted back to the judge up to max_repairs times.

    Scripted backends replay canned programs and are bit-reproducible for
    a fixed seed. They record what they were shown (call_count,
    last_context) so tests can check role separation.

    Role interfaces (duck-typed):
        user.respond(persona, crisis_event, history, context) -> str
        test.reply(messages) -> str
        judge.assess_initial(scenario) -> IedrAssessment
        judge.rate_window(scenario, history, window, window_index) -> MdepWindowRating
        director.decide(observation) -> dict (director wire)
================================================================================
"""

import asyncio
import json
import logging
import os
import re
from dataclasses import dataclass, field
from enum import Enum
from string import Template
from typing import Any, Awaitable, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import aiohttp
import numpy as np
from asyncio_throttle import Throttler
from pydantic import BaseModel, ConfigDict, Field, StrictInt, ValidationError

from epm_core import AxisId
from epm_errors import (
    AuthMissing,
    BackendError,
    ConfigError,
    EpmError,
    GeneratorFailure,
    MalformedJudgeOutput,
    MalformedResponse,
    ProgramExhausted,
    RateLimited,
    Timeout,
    TransportError,
    ValidationFailed,
)
from epm_rubric import INDICATORS, IedrAssessment, MdepWindowRating
from epm_scenario import (
    INITIAL_MEMORIES,
    MEMORY_KEYS,
    FeatureBundle,
    FeatureSchema,
    Level,
    PersonaCard,
    PersonaType,
    Scenario,
    persona_to_dict,
)

logger = logging.getLogger("EpmBench.agents")

WIRE_SCHEMA = "epm-judge/1"
PROMPT_DIR = os.path.join(os.path.dirname(os.path.abspath(__file__)), "prompts")


# =============================================================================
# ENDPOINT CONFIG / HTTP
# =============================================================================

@dataclass(frozen=True)
class ChatEndpointConfig:
    base_url: str
    model_name: str
    auth_env_var: str
    timeout: float = 60.0
    max_retries: int = 3
    rate_limit: int = 60
    temperature: float = 0.7
    top_p: float = 1.0
    max_tokens: int = 1024
    backoff_base: float = 1.0

    @classmethod
    def from_config(cls, backend, endpoint) -> "ChatEndpointConfig":
        """BackendConfig + EndpointConfig (epm_config) -> flat endpoint config"""
        if not backend.model:
            raise ConfigError(f"backend {backend.name!r} uses a chat endpoint but names no model")
        return cls(
            base_url=endpoint.base_url,
            model_name=backend.model,
            auth_env_var=endpoint.auth_env_var,
            timeout=endpoint.timeout_s,
            max_retries=endpoint.max_retries,
            rate_limit=endpoint.rate_limit,
            temperature=backend.temperature,
            top_p=backend.top_p,
            max_tokens=backend.max_tokens,
            backoff_base=endpoint.backoff_base,
        )


_THROTTLERS: Dict[Tuple[str, int], Throttler] = {}


def get_throttler(cfg: ChatEndpointConfig) -> Throttler:
    """One limiter per (endpoint, rate) shared by every caller in the process"""
    key = (cfg.base_url.rstrip("/"), cfg.rate_limit)
    if key not in _THROTTLERS:
        _THROTTLERS[key] = Throttler(rate_limit=cfg.rate_limit, period=60.0)
    return _THROTTLERS[key]


def _extract_content(data: Any) -> str:
    try:
        content = data["choices"][0]["message"]["content"]
    except (KeyError, IndexError, TypeError) as e:
        raise MalformedResponse(f"response has no choices[0].message.content: {e}") from e
    if not isinstance(content, str):
        raise MalformedResponse("message content is not text")
    return content


async def complete_chat(messages: Sequence[Mapping[str, str]], cfg: ChatEndpointConfig,
                        session: Optional[aiohttp.ClientSession] = None) -> str:
    """Assistant text for a message list; retries transient failures"""
    key = os.getenv(cfg.auth_env_var, "")
    if not key.strip():
        raise AuthMissing(f"environment variable {cfg.auth_env_var} is empty or unset",
                          env_var=cfg.auth_env_var)

    url = cfg.base_url.rstrip("/") + "/chat/completions"
    payload = {
        "model": cfg.model_name,
        "messages": [dict(m) for m in messages],
        "temperature": cfg.temperature,
        "top_p": cfg.top_p,
        "max_tokens": cfg.max_tokens,
    }
    headers = {"Authorization": f"Bearer {key}"}
    timeout = aiohttp.ClientTimeout(total=cfg.timeout)
    throttler = get_throttler(cfg)

    own_session = session is None
    if own_session:
        session = aiohttp.ClientSession()
    try:
        last_error: Optional[TransportError] = None
        for attempt in range(cfg.max_retries + 1):
            async with throttler:
                try:
                    async with session.post(url, json=payload, headers=headers, timeout=timeout) as resp:
                        if resp.status == 429:
                            last_error = RateLimited(f"HTTP 429 from {url}", status=429)
                        elif resp.status >= 500:
                            last_error = TransportError(f"HTTP {resp.status} from {url}", status=resp.status)
                        elif resp.status >= 400:
                            body = (await resp.text())[:200]
                            raise BackendError(f"HTTP {resp.status} from {url}: {body}", status=resp.status)
                        else:
                            try:
                                data = await resp.json(content_type=None)
                            except (json.JSONDecodeError, aiohttp.ContentTypeError, ValueError) as e:
                                raise MalformedResponse(f"response body is not JSON: {e}") from e
                            text = _extract_content(data)
                            if attempt:
                                logger.info(f"[HTTP] {cfg.model_name}: ok after {attempt} retries")
                            return text
                except asyncio.TimeoutError:
                    last_error = Timeout(f"no response from {url} within {cfg.timeout}s")
                except aiohttp.ClientError as e:
                    last_error = TransportError(f"{type(e).__name__}: {e}")

            if attempt < cfg.max_retries:
                wait = cfg.backoff_base * (2 ** attempt)
                logger.warning(f"[HTTP] {cfg.model_name}: {last_error.code} "
                               f"(retry {attempt + 1}/{cfg.max_retries}, backoff {wait:.2f}s)")
                await asyncio.sleep(wait)

        last_error.context["retries"] = cfg.max_retries
        logger.error(f"[HTTP] {cfg.model_name}: giving up after {cfg.max_retries} retries ({last_error.code})")
        raise last_error
    finally:
        if own_session:
            await session.close()


# =============================================================================
# PROMPTS
# =============================================================================

def load_prompt(name: str, prompt_dir: str = PROMPT_DIR) -> Template:
    path = os.path.join(prompt_dir, f"{name}.txt")
    if not os.path.exists(path):
        raise ConfigError(f"prompt asset not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln for ln in f.read().splitlines() if not ln.startswith("## epm-prompt")]
    return Template("\n".join(lines).strip() + "\n")


def render_prompt(name: str, prompt_dir: str = PROMPT_DIR, **values: Any) -> str:
    try:
        return load_prompt(name, prompt_dir).substitute(**{k: str(v) for k, v in values.items()})
    except KeyError as e:
        raise ConfigError(f"prompt {name} needs variable {e}") from e


def render_persona(card: PersonaCard, memories: Optional[Sequence[str]] = None) -> str:
    """
    Card as indented YAML-ish text. With `memories`, story blocks other
    than the named ones are withheld.
    """
    data = persona_to_dict(card)
    if memories is not None:
        data.pop("story")
    lines: List[str] = []

    def emit(node: Any, indent: int) -> None:
        pad = "  " * indent
        for key, value in node.items():
            if isinstance(value, dict):
                lines.append(f"{pad}{key}:")
                emit(value, indent + 1)
            elif isinstance(value, list):
                lines.append(f"{pad}{key}:")
                lines.extend(f"{pad}  - {item}" for item in value)
            else:
                lines.append(f"{pad}{key}: {value}")

    emit(data, 0)
    return "\n".join(lines)


def render_history(history: Sequence[Tuple[str, str]], start: int = 1) -> str:
    if not history:
        return "(no turns yet)"
    out = []
    for i, (user, model) in enumerate(history, start=start):
        out.append(f"[turn {i}] USER: {user}")
        out.append(f"[turn {i}] SUPPORTER: {model}")
    return "\n".join(out)


def history_messages(history: Sequence[Tuple[str, str]], pending_user: str) -> List[Dict[str, str]]:
    """What the test model sees: the dialogue and nothing else"""
    messages: List[Dict[str, str]] = []
    for user, model in history:
        messages.append({"role": "user", "content": user})
        messages.append({"role": "assistant", "content": model})
    messages.append({"role": "user", "content": pending_user})
    return messages


# =============================================================================
# JUDGE WIRE FORMAT
# =============================================================================

class JudgeMode(Enum):
    IEDR = "IEDR"
    MDEP = "MDEP"


class IedrWireRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    indicator_id: str
    level: StrictInt
    evidence: str = ""
    reasoning: str = ""


class MdepWireRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")
    axis: str
    channel: str
    level: StrictInt
    evidence: str = ""
    reasoning: str = ""


class IedrWire(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    schema_version: str = Field(default=WIRE_SCHEMA, alias="schema")
    mode: str = "IEDR"
    indicators: List[IedrWireRecord]


class MdepWire(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)
    schema_version: str = Field(default=WIRE_SCHEMA, alias="schema")
    mode: str = "MDEP"
    window: Optional[StrictInt] = None
    channels: List[MdepWireRecord]


class DirectorWire(BaseModel):
    model_config = ConfigDict(extra="forbid")
    action: str
    argument: Optional[str] = None
    guidance: str = ""


_FENCE = re.compile(r"```(?:json|JSON)?\s*\n?(.*?)```", re.DOTALL)


def extract_json_object(text: str) -> Dict[str, Any]:
    """First JSON object in the text; fenced blocks win over bare prose"""
    if not isinstance(text, str) or not text.strip():
        raise ValueError("empty output")
    candidates = [m.group(1) for m in _FENCE.finditer(text)] + [text]
    decoder = json.JSONDecoder()
    for chunk in candidates:
        for m in re.finditer(r"\{", chunk):
            try:
                obj, _ = decoder.raw_decode(chunk, m.start())
            except json.JSONDecodeError:
                continue
            if isinstance(obj, dict):
                return obj
    raise ValueError("no JSON object found")


def _wire_error(e: ValidationError) -> str:
    parts = []
    for err in e.errors():
        loc = ".".join(str(x) for x in err.get("loc", ()))
        parts.append(f"{loc}: {err.get('msg')}")
    return "; ".join(parts)


def parse_judge_output(text: str, mode: JudgeMode, window_index: int = 1):
    """
    One parse attempt: JSON block -> pydantic shape -> rubric rules.
    Returns IedrAssessment (IEDR) or MdepWindowRating (MDEP).
    """
    mode = JudgeMode(mode)
    try:
        obj = extract_json_object(text)
    except ValueError as e:
        raise MalformedJudgeOutput(f"{mode.value}: {e}", mode=mode.value) from e

    try:
        if mode is JudgeMode.IEDR:
            wire = IedrWire.model_validate(obj)
        else:
            wire = MdepWire.model_validate(obj)
    except ValidationError as e:
        raise MalformedJudgeOutput(f"{mode.value}: {_wire_error(e)}", mode=mode.value) from e

    if wire.schema_version != WIRE_SCHEMA:
        raise MalformedJudgeOutput(f"unsupported schema {wire.schema_version!r} (expected {WIRE_SCHEMA})")
    if wire.mode != mode.value:
        raise MalformedJudgeOutput(f"expected mode {mode.value}, got {wire.mode!r}")

    try:
        if mode is JudgeMode.IEDR:
            return IedrAssessment.from_records(r.model_dump() for r in wire.indicators)
        return MdepWindowRating.from_records((r.model_dump() for r in wire.channels),
                                             window_index=window_index)
    except (ValidationFailed, ValueError) as e:
        raise MalformedJudgeOutput(f"{mode.value}: {e}", mode=mode.value) from e


def serialize_judge_output(rating) -> str:
    """Canonical wire text; parse(serialize(x)) == x"""
    if isinstance(rating, IedrAssessment):
        obj = {"schema": WIRE_SCHEMA, "mode": "IEDR", "indicators": rating.to_records()}
    elif isinstance(rating, MdepWindowRating):
        obj = {"schema": WIRE_SCHEMA, "mode": "MDEP", "window": rating.window_index,
               "channels": rating.to_records()}
    else:
        raise TypeError(f"cannot serialize {type(rating).__name__}")
    return json.dumps(obj, ensure_ascii=False, separators=(",", ":"))


async def parse_with_repair(text: str, mode: JudgeMode,
                            reprompt: Callable[[str, str], Awaitable[str]],
                            max_repairs: int = 2, window_index: int = 1):
    """
    Parse, and on failure ask the judge again with the error quoted back.
    reprompt(error_message, previous_text) -> new text.
    """
    attempt = 0
    while True:
        try:
            return parse_judge_output(text, mode, window_index)
        except MalformedJudgeOutput as e:
            if attempt >= max_repairs:
                raise MalformedJudgeOutput(
                    f"unadjudicatable after {max_repairs} repairs: {e.message}",
                    mode=JudgeMode(mode).value, window=window_index, repairs=max_repairs) from e
            attempt += 1
            logger.warning(f"[JUDGE] {JudgeMode(mode).value} output rejected, repair "
                           f"{attempt}/{max_repairs}: {e.message}")
            text = await reprompt(e.message, text)


# =============================================================================
# USER SIDE-CHANNEL
# =============================================================================

@dataclass(frozen=True)
class UserContext:
    """Director influence on the user agent; never spliced into dialogue text"""
    released_memories: Tuple[str, ...] = INITIAL_MEMORIES
    guidance: str = ""
    pacing: str = "hold"

    def memories_text(self, card: PersonaCard) -> str:
        return "\n".join(f"- {key}: {card.memory(key)}" for key in self.released_memories)


# =============================================================================
# SCRIPTED BACKENDS
# =============================================================================

@dataclass(frozen=True)
class ScriptedBackendSpec:
    """
    rule: None plays the program once (ProgramExhausted past the end),
    'cycle' wraps around, 'random' draws items with a seeded generator.
    """
    role: str
    program: Tuple[Any, ...] = ()
    seed: int = 0
    rule: Optional[str] = None
    iedr_levels: Optional[Mapping[str, int]] = None
    iedr_rule: Optional[str] = None
    lookup: Mapping[str, Any] = field(default_factory=dict)
    persona_lookup: Mapping[str, Mapping[str, Any]] = field(default_factory=dict)
    max_repairs: int = 2

    def __post_init__(self):
        object.__setattr__(self, "program", tuple(self.program))
        if self.role not in ("user", "test", "judge", "director"):
            raise ConfigError(f"unknown scripted role {self.role!r}")
        if self.rule not in (None, "cycle", "random"):
            raise ConfigError(f"unknown program rule {self.rule!r}")
        if self.iedr_rule not in (None, "priority"):
            raise ConfigError(f"unknown iedr_rule {self.iedr_rule!r}")
        for key in self.persona_lookup:
            persona_condition(key)


def persona_condition(key: str) -> Tuple[AxisId, Level]:
    """'P=Low' -> (PROACTIVE, LOW)"""
    axis, sep, level = str(key).partition("=")
    try:
        if not sep:
            raise ValueError(key)
        return AxisId.parse(axis), Level.parse(level)
    except (ValueError, ValidationFailed):
        raise ConfigError(f"persona_lookup key must look like AXIS=Level, got {key!r}") from None


class _Program:
    def __init__(self, spec: ScriptedBackendSpec):
        self.spec = spec
        self.position = 0
        self.rng = np.random.default_rng(spec.seed)

    def next(self) -> Any:
        items = self.spec.program
        if not items:
            raise ProgramExhausted(f"{self.spec.role} program is empty", role=self.spec.role)
        if self.spec.rule == "random":
            item = items[int(self.rng.integers(len(items)))]
        elif self.spec.rule == "cycle":
            item = items[self.position % len(items)]
        else:
            if self.position >= len(items):
                raise ProgramExhausted(
                    f"{self.spec.role} program exhausted after {len(items)} items", role=self.spec.role)
            item = items[self.position]
        self.position += 1
        return item


class ScriptedUser:
    def __init__(self, spec: ScriptedBackendSpec):
        self.spec = spec
        self._program = _Program(spec)
        self.call_count = 0
        self.contexts: List[UserContext] = []
        self.last_context: Optional[UserContext] = None

    async def respond(self, persona: PersonaCard, crisis_event: str,
                      history: Sequence[Tuple[str, str]], context: UserContext) -> str:
        self.call_count += 1
        self.last_context = context
        self.contexts.append(context)
        return str(self._program.next())


class ScriptedTest:
    def __init__(self, spec: ScriptedBackendSpec):
        self.spec = spec
        self._program = _Program(spec)
        self.call_count = 0
        self.seen: List[List[Dict[str, str]]] = []

    async def reply(self, messages: Sequence[Mapping[str, str]]) -> str:
        self.call_count += 1
        self.seen.append([dict(m) for m in messages])
        pending = messages[-1]["content"] if messages else ""
        if pending in self.spec.lookup:
            return str(self.spec.lookup[pending])
        return str(self._program.next())


def priority_iedr(card: PersonaCard) -> IedrAssessment:
    """
    Scripted IEDR from need priorities: every indicator of an axis gets
    Low=1, Medium=2, High=3.
    """
    mapping = {Level.LOW: 1, Level.MEDIUM: 2, Level.HIGH: 3}
    levels = {}
    for code, (axis, _) in INDICATORS.items():
        level = card.empathy_priority.get(axis, Level.LOW)
        levels[code] = mapping[level]
    return IedrAssessment.from_levels(levels, evidence="persona priority section",
                                      reasoning="derived from the stated need priority")


def levels_to_window(item: Any, window_index: int) -> MdepWindowRating:
    """{'C': [prog, neg], ...} -> window rating"""
    if isinstance(item, MdepWindowRating):
        return MdepWindowRating(item.ratings, window_index=window_index)
    if not isinstance(item, Mapping):
        raise MalformedJudgeOutput(f"scripted judge item is not a level map: {item!r}")
    levels = {}
    for axis, pair in item.items():
        prog, neg = pair
        levels[AxisId.parse(axis).value] = (prog, neg)
    try:
        return MdepWindowRating.from_levels(levels, window_index=window_index)
    except ValidationFailed as e:
        raise MalformedJudgeOutput(f"scripted judge item invalid: {e.message}") from e


class ScriptedJudge:
    """
    Program items are level maps or raw wire text. Raw text runs through
    the real parser; on rejection the next item is the repaired answer.
    `lookup` maps a supporter reply to a level map and wins over the program.
    `persona_lookup` narrows that to personas with a given need level
    ("P=Low": {reply: levels}) and wins over `lookup`.
    """

    def __init__(self, spec: ScriptedBackendSpec):
        self.spec = spec
        self._program = _Program(spec)
        self.call_count = 0
        self.iedr_calls = 0
        self.repair_prompts: List[str] = []
        self.seen: List[Dict[str, Any]] = []

    async def assess_initial(self, scenario: Scenario) -> IedrAssessment:
        self.iedr_calls += 1
        if self.spec.iedr_levels is not None:
            return IedrAssessment.from_levels(dict(self.spec.iedr_levels))
        if self.spec.iedr_rule == "priority":
            return priority_iedr(scenario.persona)
        raise ProgramExhausted("scripted judge has no IEDR program", role="judge")

    async def rate_window(self, scenario: Scenario, history: Sequence[Tuple[str, str]],
                          window: Sequence[Tuple[str, str]], window_index: int) -> MdepWindowRating:
        self.call_count += 1
        priority = scenario.persona.empathy_priority
        self.seen.append({"history": list(history), "window": list(window), "window_index": window_index,
                          "priority": {a.value: lv.value for a, lv in priority.items()}})
        last_reply = window[-1][1] if window else ""
        for key, table in self.spec.persona_lookup.items():
            axis, level = persona_condition(key)
            if priority.get(axis, Level.LOW) is level and last_reply in table:
                return levels_to_window(table[last_reply], window_index)
        if last_reply in self.spec.lookup:
            return levels_to_window(self.spec.lookup[last_reply], window_index)

        item = self._program.next()
        if isinstance(item, str):
            async def reprompt(error: str, previous: str) -> str:
                self.repair_prompts.append(error)
                return str(self._program.next())
            return await parse_with_repair(item, JudgeMode.MDEP, reprompt,
                                           self.spec.max_repairs, window_index)
        return levels_to_window(item, window_index)


def director_wire_from_program(item: Any) -> Dict[str, Any]:
    """'continue' | 'terminate:reason' | 'release_memory:epilogue' | dict"""
    if isinstance(item, Mapping):
        return dict(item)
    text = str(item).strip()
    action, _, argument = text.partition(":")
    return {"action": action.strip(), "argument": argument.strip() or None, "guidance": ""}


class ScriptedDirector:
    def __init__(self, spec: ScriptedBackendSpec):
        self.spec = spec
        self._program = _Program(spec)
        self.call_count = 0
        self.last_observation: Optional[Dict[str, Any]] = None

    async def decide(self, observation: Mapping[str, Any]) -> Dict[str, Any]:
        self.call_count += 1
        self.last_observation = dict(observation)
        return director_wire_from_program(self._program.next())


_SCRIPTED = {"user": ScriptedUser, "test": ScriptedTest, "judge": ScriptedJudge, "director": ScriptedDirector}


def scripted_backend(spec: ScriptedBackendSpec):
    return _SCRIPTED[spec.role](spec)


# =============================================================================
# CHAT BACKENDS
# =============================================================================

class _ChatBackend:
    def __init__(self, cfg: ChatEndpointConfig, prompt_dir: str = PROMPT_DIR,
                 session: Optional[aiohttp.ClientSession] = None):
        self.cfg = cfg
        self.prompt_dir = prompt_dir
        self.session = session
        self.call_count = 0

    async def _complete(self, messages: Sequence[Mapping[str, str]]) -> str:
        self.call_count += 1
        return await complete_chat(messages, self.cfg, self.session)


class ChatUser(_ChatBackend):
    async def respond(self, persona: PersonaCard, crisis_event: str,
                      history: Sequence[Tuple[str, str]], context: UserContext) -> str:
        system = render_prompt(
            "user_system", self.prompt_dir,
            persona=render_persona(persona, memories=context.released_memories),
            crisis_event=crisis_event,
            memories=context.memories_text(persona),
            pacing=context.pacing,
            guidance=context.guidance or "follow your own feelings",
        )
        # Roles are mirrored: the simulated user is the assistant here
        messages = [{"role": "system", "content": system}]
        for user, model in history:
            messages.append({"role": "assistant", "content": user})
            messages.append({"role": "user", "content": model})
        if not history:
            messages.append({"role": "user", "content": "(You start the conversation.)"})
        return (await self._complete(messages)).strip()


class ChatTest(_ChatBackend):
    async def reply(self, messages: Sequence[Mapping[str, str]]) -> str:
        return (await self._complete(messages)).strip()


class ChatJudge(_ChatBackend):
    def __init__(self, cfg: ChatEndpointConfig, prompt_dir: str = PROMPT_DIR,
                 session: Optional[aiohttp.ClientSession] = None, max_repairs: int = 2):
        super().__init__(cfg, prompt_dir, session)
        self.max_repairs = max_repairs

    async def _judge(self, prompt: str, mode: JudgeMode, window_index: int = 1):
        messages: List[Dict[str, str]] = [{"role": "user", "content": prompt}]
        text = await self._complete(messages)

        async def reprompt(error: str, previous: str) -> str:
            messages.append({"role": "assistant", "content": previous})
            messages.append({"role": "user", "content": render_prompt(
                "judge_repair", self.prompt_dir, error=error, previous=previous)})
            return await self._complete(messages)

        return await parse_with_repair(text, mode, reprompt, self.max_repairs, window_index)

    async def assess_initial(self, scenario: Scenario) -> IedrAssessment:
        prompt = render_prompt("judge_iedr", self.prompt_dir,
                               persona=render_persona(scenario.persona),
                               crisis_event=scenario.crisis_event)
        return await self._judge(prompt, JudgeMode.IEDR)

    async def rate_window(self, scenario: Scenario, history: Sequence[Tuple[str, str]],
                          window: Sequence[Tuple[str, str]], window_index: int) -> MdepWindowRating:
        earlier = list(history)[: len(history) - len(window)]
        prompt = render_prompt("judge_mdep", self.prompt_dir,
                               persona=render_persona(scenario.persona),
                               history=render_history(earlier),
                               window=render_history(window, start=len(earlier) + 1),
                               window_index=window_index)
        return await self._judge(prompt, JudgeMode.MDEP, window_index)


class ChatDirector(_ChatBackend):
    async def decide(self, observation: Mapping[str, Any]) -> Dict[str, Any]:
        summary = json.dumps(observation.get("summary", {}), indent=2, sort_keys=True)
        prompt = render_prompt("director", self.prompt_dir,
                               memory_keys=", ".join(MEMORY_KEYS),
                               summary=summary,
                               history=render_history(observation.get("history", [])[-6:]))
        text = await self._complete([{"role": "user", "content": prompt}])
        try:
            return DirectorWire.model_validate(extract_json_object(text)).model_dump()
        except (ValueError, ValidationError) as e:
            # Anything unparseable is outside the action set
            return {"action": f"<unparseable: {str(e)[:80]}>", "argument": None, "guidance": ""}


class ChatGenerator(_ChatBackend):
    """Live generator for the Real-to-Sim pipeline (same hooks as TemplateGenerator)"""

    async def _json(self, prompt: str) -> Dict[str, Any]:
        text = await self._complete([{"role": "user", "content": prompt}])
        try:
            return extract_json_object(text)
        except ValueError as e:
            raise GeneratorFailure(f"generator answer is not JSON: {e}") from e

    async def extract(self, dialogue: str, schema: FeatureSchema, source_id: str,
                      domains: Sequence[str]) -> Optional[FeatureBundle]:
        data = await self._json(render_prompt("generator_features", self.prompt_dir,
                                              dialogue=dialogue, domains=", ".join(domains)))
        if data.get("empty"):
            return None
        try:
            return FeatureBundle(
                source_id=source_id,
                need_axes={AxisId.parse(k): Level.parse(v) for k, v in data["need_axes"].items()},
                threshold_cues=list(data.get("threshold_cues", [])),
                memory_cues=list(data.get("memory_cues", [])),
                vent=str(data.get("vent", "")),
                domain=str(data.get("domain", "")),
                persona_type=PersonaType(str(data.get("persona_type", "Receptive")).title()),
            )
        except (KeyError, ValueError, AttributeError, EpmError) as e:
            raise GeneratorFailure(f"feature answer has the wrong shape: {e}") from e

    async def persona(self, f: FeatureBundle) -> Dict[str, Any]:
        return await self._json(render_prompt("generator_persona", self.prompt_dir,
                                              features=_features_text(f)))

    async def crisis(self, f: FeatureBundle, persona: PersonaCard) -> str:
        text = await self._complete([{"role": "user", "content": render_prompt(
            "generator_crisis", self.prompt_dir,
            persona=render_persona(persona), features=_features_text(f))}])
        return text.strip()


def _features_text(f: FeatureBundle) -> str:
    return json.dumps({
        "need_axes": {a.value: lv.value for a, lv in f.need_axes.items()},
        "threshold_cues": f.threshold_cues,
        "memory_cues": f.memory_cues,
        "vent": f.vent,
        "domain": f.domain,
        "persona_type": f.persona_type.value,
    }, ensure_ascii=False)


# =============================================================================
# FACTORY
# =============================================================================

def build_backend(role: str, backend_cfg, endpoints: Mapping[str, Any], seed: int = 0,
                  session: Optional[aiohttp.ClientSession] = None, prompt_dir: str = PROMPT_DIR):
    """BackendConfig (epm_config) -> role backend; one instance per episode"""
    if backend_cfg.backend == "scripted":
        spec = ScriptedBackendSpec(
            role=role,
            program=tuple(backend_cfg.program),
            seed=backend_cfg.seed if backend_cfg.seed is not None else seed,
            rule=backend_cfg.rule,
            iedr_levels=backend_cfg.lookup.get("iedr") if role == "judge" else None,
            iedr_rule=backend_cfg.iedr_rule,
            lookup={k: v for k, v in backend_cfg.lookup.items() if k != "iedr"},
            persona_lookup=backend_cfg.persona_lookup,
            max_repairs=backend_cfg.max_repairs,
        )
        return scripted_backend(spec)

    if backend_cfg.endpoint not in endpoints:
        raise ConfigError(f"backend {backend_cfg.name!r} names unknown endpoint {backend_cfg.endpoint!r}")
    cfg = ChatEndpointConfig.from_config(backend_cfg, endpoints[backend_cfg.endpoint])
    if role == "user":
        return ChatUser(cfg, prompt_dir, session)
    if role == "test":
        return ChatTest(cfg, prompt_dir, session)
    if role == "judge":
        return ChatJudge(cfg, prompt_dir, session, max_repairs=backend_cfg.max_repairs)
    if role == "director":
        return ChatDirector(cfg, prompt_dir, session)
    raise ConfigError(f"unknown role {role!r}")
