"""
Shared builders for the EPM bench tests.

Scenarios are built in memory from one full persona card; backends are
scripted and fully offline.
"""

import asyncio
import copy
import os

import pytest
import yaml

from epm_agents import ScriptedBackendSpec, scripted_backend
from epm_orchestrator import EpisodeBackends, EpisodeConfig, run_episode
from epm_rubric import IedrAssessment
from epm_scenario import (
    DifficultyBand,
    MechanismLabel,
    PersonaType,
    Scenario,
    ScenarioLabel,
    persona_from_dict,
)
from epm_store import RunStore

REPO_ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))

CARD = {
    "role_info": {"name": "Dana Voss", "gender": "Female", "age": "31"},
    "role_traits": {
        "social_persona": "Calm and organised at work, the one others lean on.",
        "inner_core": "Afraid that slowing down means falling behind for good.",
    },
    "empathy_threshold": "Medium",
    "threshold_note": "Open to sincere attempts, wary of slogans.",
    "chat_topic": "A promotion went to someone else after two years of overtime.",
    "empathy_needs": {
        "vent_content": "Two years of late nights and the promotion went to a newer colleague.",
        "hoped_points": "To hear that the effort was real even if nobody rewarded it.",
        "threshold_constraints": "Does not want to be told it was for the best.",
    },
    "empathy_priority": {"C": "Low", "A": "Medium", "P": "High"},
    "past_experiences": {
        "childhood": "Praised mostly for grades.",
        "adolescence": "Took on a part-time job to help at home.",
        "young_adulthood": "Moved cities for a first job and kept climbing.",
        "implicit_arc": "Worth is measured by being chosen.",
    },
    "current_situation": {
        "circumstances": "Still in the same team, now reporting to the new lead.",
        "main_goal": "Decide whether to stay or start looking.",
        "vision": "Work that feels like her own choice again.",
    },
    "story": {
        "trigger": "The announcement email arrived during a team lunch.",
        "development": [
            "She smiled through the congratulations.",
            "At home she reread two years of late-night messages.",
            "A friend said she should have negotiated harder.",
            "She opened a job site and closed it again.",
        ],
        "outcome": "Wants to talk before the Monday one-on-one.",
        "epilogue": "Remembers her father saying effort always pays off.",
    },
}


def _make_scenario(scenario_id="s-test", iedr_levels=None, priority=None, mechanism="P-Routine",
                   persona_type="Receptive", domain="Study & Career", band=None, labels=None):
    card = copy.deepcopy(CARD)
    if priority is not None:
        card["empathy_priority"] = dict(priority)
    iedr = IedrAssessment.from_levels(iedr_levels) if iedr_levels is not None else None
    return Scenario(
        id=scenario_id,
        persona=persona_from_dict(card),
        crisis_event="The promotion announcement landed this afternoon and she has not slept since.",
        labels=labels if labels is not None else [ScenarioLabel("Proactive need", True),
                                                   ScenarioLabel("Affective need")],
        domain_label=domain,
        mechanism_label=MechanismLabel.parse(mechanism),
        persona_type=PersonaType(persona_type),
        iedr=iedr,
        difficulty_band=DifficultyBand(band) if band else None,
    )


def _scripted(role, program=(), rule="cycle", **kwargs):
    return scripted_backend(ScriptedBackendSpec(role=role, program=tuple(program), rule=rule, **kwargs))


def _backends(judge_program=({"C": [0, 0], "A": [0, 0], "P": [0, 0]},), director_program=("continue",),
              test_program=("I'm listening.",), user_program=("It has been a hard week.",), **judge_kwargs):
    return EpisodeBackends(
        user=_scripted("user", user_program),
        test=_scripted("test", test_program),
        judge=_scripted("judge", judge_program, **judge_kwargs),
        director=_scripted("director", director_program),
    )


@pytest.fixture
def make_scenario():
    return _make_scenario


@pytest.fixture
def scripted():
    return _scripted


@pytest.fixture
def make_backends():
    return _backends


@pytest.fixture
def run_async():
    return asyncio.run


@pytest.fixture
def repo_root():
    return REPO_ROOT


GOLDEN_JUDGE = [{"C": [2, 0], "A": [0, 0], "P": [0, 0]}]


def _write_config(path, corpus_dir, t_max=4, k=1, models=None, judge=None, director=None,
                  frozen_time="2026-01-01T00:00:00", extra=None):
    cfg = {
        "run": {"seed": 1234, "t_max": t_max, "k": k, "parallelism": 2, "store_root": "runs",
                "corpus_dir": corpus_dir, "frozen_time": frozen_time},
        "stats": {"n_resamples": 2000, "seed": 7},
        "roles": {
            "user": {"backend": "scripted", "rule": "cycle", "program": ["I can't stop thinking about it."]},
            "judge": judge or {"backend": "scripted", "rule": "cycle", "iedr_rule": "priority",
                               "program": GOLDEN_JUDGE},
            "director": director or {"backend": "scripted", "rule": "cycle", "program": ["continue"]},
        },
        "models": models or [{"name": "steady", "backend": "scripted", "rule": "cycle",
                              "program": ["That sounds heavy. Tell me more."]}],
        "logging": {"level": "WARNING", "color": False, "progress": False},
    }
    for section, values in (extra or {}).items():
        cfg.setdefault(section, {}).update(values)
    with open(path, "w", encoding="utf-8") as f:
        yaml.safe_dump(cfg, f, sort_keys=False)
    return str(path)


@pytest.fixture
def write_config():
    return _write_config


ZERO_JUDGE = [{"C": [0, 0], "A": [0, 0], "P": [0, 0]}]
FROZEN_TIME = "2026-01-01T00:00:00"


def _play(scenario, backends, cfg=None, model_id="model"):
    return asyncio.run(run_episode(scenario, backends.user, backends.test, backends.judge, backends.director,
                                   cfg or EpisodeConfig(t_max=4), model_id))


def _golden_store(root, run_id="golden"):
    """
    Model a: one resolved episode and one orthogonal timeout.
    Model b: a judge that never moves the state.
    """
    plays = [
        ("a-1", "a", _make_scenario("s-c", {"C.1": 2}, mechanism="C-Routine", band="Easy"), GOLDEN_JUDGE),
        ("a-2", "a", _make_scenario("s-a", {"A.1": 2}, mechanism="A-Routine", band="Easy"), GOLDEN_JUDGE),
        ("b-1", "b", _make_scenario("s-c", {"C.1": 2}, mechanism="C-Routine", band="Easy"), ZERO_JUDGE),
    ]
    manifest = [{"episode_id": eid, "model_id": model, "scenario_id": s.id} for eid, model, s, _ in plays]
    store = RunStore.create(str(root), run_id, {"run": {"frozen_time": FROZEN_TIME}}, manifest,
                            {"judge": {"backend": "scripted"}}, 1234, FROZEN_TIME)
    for eid, model, s, judge in plays:
        result = _play(s, _backends(judge_program=judge), model_id=model)
        store.write_episode(eid, result, {"mechanism": str(s.mechanism_label), "band": "Easy"})
    return store


@pytest.fixture
def play():
    return _play


@pytest.fixture
def golden_store(tmp_path):
    return _golden_store(tmp_path / "runs")
