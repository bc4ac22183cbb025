"""Judge wire parsing, repair loop, scripted backends, chat client"""

import json
import os

import pytest
from aiohttp import test_utils, web

from epm_agents import (
    ChatEndpointConfig,
    ChatJudge,
    ChatTest,
    JudgeMode,
    ScriptedBackendSpec,
    UserContext,
    complete_chat,
    extract_json_object,
    history_messages,
    levels_to_window,
    parse_judge_output,
    parse_with_repair,
    priority_iedr,
    render_persona,
    render_prompt,
    serialize_judge_output,
)
from epm_config import load_config
from epm_errors import (
    AuthMissing,
    BackendError,
    ConfigError,
    MalformedJudgeOutput,
    MalformedResponse,
    ProgramExhausted,
    RateLimited,
    TransportError,
)
from epm_rubric import IedrAssessment, MdepWindowRating


def mdep_text(levels, window=1):
    return serialize_judge_output(MdepWindowRating.from_levels(levels, window_index=window))


# =============================================================================
# WIRE FORMAT
# =============================================================================

def test_parse_canonical_mdep():
    w = MdepWindowRating.from_levels({"C": (1, 0), "A": (2, -1)}, window_index=2)
    parsed = parse_judge_output(serialize_judge_output(w), JudgeMode.MDEP, window_index=2)
    assert parsed == w


def test_parse_canonical_iedr():
    a = IedrAssessment.from_levels({"C.1": 2, "A.2": 3, "P.3": 1})
    assert parse_judge_output(serialize_judge_output(a), JudgeMode.IEDR) == a


def test_parse_tolerates_prose_and_fences():
    body = mdep_text({"P": (2, 0)})
    text = f"Here is my rating.\n```json\n{body}\n```\nLet me know if anything is unclear."
    parsed = parse_judge_output(text, JudgeMode.MDEP)
    assert parsed.levels()["P"] == (2, 0)


def test_extract_json_object_prefers_fenced_block():
    text = 'Note {"a": 1} then ```json\n{"b": 2}\n```'
    assert extract_json_object(text) == {"b": 2}
    with pytest.raises(ValueError):
        extract_json_object("no json here")


def _mutate(levels, fn):
    obj = json.loads(mdep_text(levels))
    fn(obj)
    return json.dumps(obj)


@pytest.mark.parametrize("mutation", [
    lambda o: o["channels"][0].update(level=2.0),
    lambda o: o["channels"][0].update(level="2"),
    lambda o: o["channels"].pop(),
    lambda o: o["channels"].append(dict(o["channels"][0])),
    lambda o: o["channels"][1].update(level=1),
    lambda o: o.update(extra="field"),
    lambda o: o.update(mode="IEDR"),
    lambda o: o.update(schema="epm-judge/0"),
    lambda o: o["channels"][0].update(level=2, evidence="", reasoning=""),
])
def test_parse_rejects_invalid_mdep(mutation):
    with pytest.raises(MalformedJudgeOutput):
        parse_judge_output(_mutate({"C": (1, 0)}, mutation), JudgeMode.MDEP)


def test_parse_rejects_empty_output():
    with pytest.raises(MalformedJudgeOutput):
        parse_judge_output("", JudgeMode.IEDR)


def test_repair_loop_recovers(run_async):
    prompts = []

    async def reprompt(error, previous):
        prompts.append(error)
        return mdep_text({"A": (1, 0)}, window=4)

    rating = run_async(parse_with_repair("not json at all", JudgeMode.MDEP, reprompt, 2, window_index=4))
    assert rating.levels()["A"] == (1, 0)
    assert rating.window_index == 4
    assert len(prompts) == 1


def test_repair_loop_gives_up(run_async):
    calls = []

    async def reprompt(error, previous):
        calls.append(previous)
        return "still not json"

    with pytest.raises(MalformedJudgeOutput) as info:
        run_async(parse_with_repair("nope", JudgeMode.MDEP, reprompt, 2))
    assert len(calls) == 2
    assert info.value.exit_code == 4
    assert info.value.context["repairs"] == 2


# =============================================================================
# SCRIPTED BACKENDS
# =============================================================================

def test_program_once_exhausts(run_async, scripted):
    user = scripted("user", ["one", "two"], rule=None)

    async def go():
        said = [await user.respond(None, "", (), UserContext()) for _ in range(2)]
        with pytest.raises(ProgramExhausted):
            await user.respond(None, "", (), UserContext())
        return said

    assert run_async(go()) == ["one", "two"]
    assert user.call_count == 3


def test_program_cycle_wraps(run_async, scripted):
    test = scripted("test", ["a", "b"])

    async def go():
        return [await test.reply([{"role": "user", "content": "hi"}]) for _ in range(5)]

    assert run_async(go()) == ["a", "b", "a", "b", "a"]


def test_random_program_is_seeded(run_async, scripted):
    async def draw(seed):
        test = scripted("test", list("abcdefgh"), rule="random", seed=seed)
        return [await test.reply([{"role": "user", "content": "x"}]) for _ in range(10)]

    assert run_async(draw(3)) == run_async(draw(3))


def test_scripted_test_lookup_by_pending_message(run_async, scripted):
    test = scripted("test", ["default"], lookup={"special": "matched"})
    assert run_async(test.reply([{"role": "user", "content": "special"}])) == "matched"
    assert run_async(test.reply([{"role": "user", "content": "other"}])) == "default"


def test_scripted_judge_lookup_wins_over_program(run_async, scripted, make_scenario):
    judge = scripted("judge", [{"C": [0, 0], "A": [0, 0], "P": [0, 0]}],
                     lookup={"kind words": {"A": [2, 0]}})
    s = make_scenario()
    rating = run_async(judge.rate_window(s, [("u", "kind words")], [("u", "kind words")], 3))
    assert rating.levels()["A"] == (2, 0)
    assert rating.window_index == 3
    rating = run_async(judge.rate_window(s, [("u", "other")], [("u", "other")], 4))
    assert rating.levels() == {"C": (0, 0), "A": (0, 0), "P": (0, 0)}
    assert judge.call_count == 2


def test_scripted_judge_persona_lookup_follows_need_level(run_async, scripted, make_scenario):
    judge = scripted("judge", [{"C": [0, 0], "A": [0, 0], "P": [0, 0]}],
                     lookup={"try this": {"P": [2, 0]}},
                     persona_lookup={"P=Low": {"try this": {"P": [1, -1]}}})
    window = [("u", "try this")]
    wants_help = run_async(judge.rate_window(make_scenario(), window, window, 1))
    assert wants_help.levels()["P"] == (2, 0)
    no_help = make_scenario(priority={"C": "High", "A": "Medium", "P": "Low"})
    assert run_async(judge.rate_window(no_help, window, window, 1)).levels()["P"] == (1, -1)
    assert [seen["priority"]["P"] for seen in judge.seen] == ["High", "Low"]


@pytest.mark.parametrize("key", ["P", "X=Low", "P=Huge"])
def test_scripted_judge_persona_lookup_key_shape(scripted, key):
    with pytest.raises(ConfigError):
        scripted("judge", persona_lookup={key: {}})


def test_scripted_judge_raw_text_goes_through_repair(run_async, scripted, make_scenario):
    judge = scripted("judge", ["{broken", mdep_text({"P": (1, 0)})], rule=None, max_repairs=1)
    rating = run_async(judge.rate_window(make_scenario(), [("u", "m")], [("u", "m")], 1))
    assert rating.levels()["P"] == (1, 0)
    assert len(judge.repair_prompts) == 1


def test_scripted_judge_unrepairable_output(run_async, scripted, make_scenario):
    judge = scripted("judge", ["{broken", "still broken"], rule=None, max_repairs=1)
    with pytest.raises(MalformedJudgeOutput):
        run_async(judge.rate_window(make_scenario(), [("u", "m")], [("u", "m")], 1))


def test_scripted_judge_iedr_sources(run_async, scripted, make_scenario):
    s = make_scenario()
    fixed = scripted("judge", iedr_levels={"C.1": 2})
    assert run_async(fixed.assess_initial(s)).p0.as_tuple() == (-4.0, 0.0, 0.0)
    by_priority = scripted("judge", iedr_rule="priority")
    assert run_async(by_priority.assess_initial(s)).p0.as_tuple() == (-7.0, -18.0, -27.0)
    with pytest.raises(ProgramExhausted):
        run_async(scripted("judge").assess_initial(s))


def test_priority_iedr_uses_every_indicator_of_the_axis(make_scenario):
    a = priority_iedr(make_scenario(priority={"C": "High", "A": "Low", "P": "Low"}).persona)
    assert a.level_of("C.1") == a.level_of("C.2") == a.level_of("C.3") == 3
    assert a.level_of("A.2") == 1


def test_levels_to_window_rejects_bad_items():
    with pytest.raises(MalformedJudgeOutput):
        levels_to_window("C:2", 1)
    with pytest.raises(MalformedJudgeOutput):
        levels_to_window({"C": [3, 0]}, 1)


def test_scripted_director_wire(run_async, scripted):
    director = scripted("director", ["release_memory:development_2", {"action": "terminate"}])
    first = run_async(director.decide({"summary": {}, "history": []}))
    assert first == {"action": "release_memory", "argument": "development_2", "guidance": ""}
    assert run_async(director.decide({"summary": {}, "history": []}))["action"] == "terminate"
    assert director.last_observation == {"summary": {}, "history": []}


def test_unknown_scripted_role_rejected():
    with pytest.raises(ConfigError):
        ScriptedBackendSpec(role="narrator")
    with pytest.raises(ConfigError):
        ScriptedBackendSpec(role="user", rule="shuffle")


# =============================================================================
# PROMPTS / MESSAGES
# =============================================================================

def test_history_messages_carry_dialogue_only():
    messages = history_messages([("hi", "hello"), ("sad", "I hear you")], "still here")
    assert [m["role"] for m in messages] == ["user", "assistant", "user", "assistant", "user"]
    assert messages[-1]["content"] == "still here"


def test_render_persona_withholds_unreleased_story(make_scenario):
    card = make_scenario().persona
    full = render_persona(card)
    assert card.story.epilogue in full
    partial = render_persona(card, memories=("trigger",))
    assert card.story.epilogue not in partial
    assert card.role_info.name in partial


def test_render_prompt_requires_variables():
    text = render_prompt("judge_repair", error="level must be an integer", previous="{}")
    assert "level must be an integer" in text
    with pytest.raises(ConfigError):
        render_prompt("judge_repair", error="only one")
    with pytest.raises(ConfigError):
        render_prompt("no_such_prompt")


# =============================================================================
# CHAT CLIENT (loopback server)
# =============================================================================

def chat_body(text):
    return {"choices": [{"message": {"role": "assistant", "content": text}}]}


async def serve(responses, body):
    """Replies with `responses` in order; body(base_url, hits) runs the client side"""
    hits = []

    async def handler(request):
        hits.append(await request.json())
        status, payload = responses[min(len(hits), len(responses)) - 1]
        if isinstance(payload, str):
            return web.Response(status=status, text=payload)
        return web.json_response(payload, status=status)

    app = web.Application()
    app.router.add_post("/v1/chat/completions", handler)
    server = test_utils.TestServer(app)
    await server.start_server()
    try:
        return await body(str(server.make_url("/v1")), hits)
    finally:
        await server.close()


def endpoint(base_url, **kwargs):
    values = dict(base_url=base_url, model_name="test-model", auth_env_var="EPM_TEST_KEY",
                  timeout=5.0, max_retries=2, rate_limit=1000, backoff_base=0.0)
    values.update(kwargs)
    return ChatEndpointConfig(**values)


@pytest.fixture
def api_key(monkeypatch):
    monkeypatch.setenv("EPM_TEST_KEY", "sk-test")


def test_complete_chat_ok(run_async, api_key):
    async def body(url, hits):
        text = await complete_chat([{"role": "user", "content": "hi"}], endpoint(url))
        return text, hits

    text, hits = run_async(serve([(200, chat_body("hello back"))], body))
    assert text == "hello back"
    assert hits[0]["model"] == "test-model"
    assert hits[0]["messages"] == [{"role": "user", "content": "hi"}]


def test_complete_chat_retries_rate_limit_and_server_errors(run_async, api_key):
    responses = [(429, {"error": "slow down"}), (500, "boom"), (200, chat_body("finally"))]

    async def body(url, hits):
        return await complete_chat([{"role": "user", "content": "hi"}], endpoint(url)), len(hits)

    assert run_async(serve(responses, body)) == ("finally", 3)


def test_complete_chat_gives_up_after_retries(run_async, api_key):
    async def body(url, hits):
        with pytest.raises(RateLimited) as info:
            await complete_chat([{"role": "user", "content": "hi"}], endpoint(url, max_retries=1))
        return info.value, len(hits)

    error, calls = run_async(serve([(429, {"error": "slow down"})], body))
    assert calls == 2
    assert isinstance(error, TransportError)
    assert error.context["retries"] == 1


def test_complete_chat_client_error_is_not_retried(run_async, api_key):
    async def body(url, hits):
        with pytest.raises(BackendError):
            await complete_chat([{"role": "user", "content": "hi"}], endpoint(url))
        return len(hits)

    assert run_async(serve([(400, {"error": "bad request"})], body)) == 1


def test_complete_chat_malformed_body(run_async, api_key):
    async def body(url, hits):
        with pytest.raises(MalformedResponse):
            await complete_chat([{"role": "user", "content": "hi"}], endpoint(url))

    run_async(serve([(200, {"unexpected": True})], body))


def test_complete_chat_needs_key_from_environment(run_async, monkeypatch):
    monkeypatch.delenv("EPM_TEST_KEY", raising=False)
    with pytest.raises(AuthMissing):
        run_async(complete_chat([{"role": "user", "content": "hi"}], endpoint("http://127.0.0.1:9")))


def test_chat_judge_repairs_over_the_wire(run_async, api_key, make_scenario):
    responses = [(200, chat_body("I think it went fine.")),
                 (200, chat_body(mdep_text({"C": (2, 0)}, window=1)))]

    async def body(url, hits):
        judge = ChatJudge(endpoint(url), max_repairs=2)
        history = [("I failed again.", "Tell me what happened.")]
        rating = await judge.rate_window(make_scenario(), history, history, 1)
        return rating, hits

    rating, hits = run_async(serve(responses, body))
    assert rating.levels()["C"] == (2, 0)
    assert len(hits) == 2
    # the rejected answer and the repair request are appended to the conversation
    assert [m["role"] for m in hits[1]["messages"]] == ["user", "assistant", "user"]


def test_chat_test_model_sees_only_the_dialogue(run_async, api_key):
    async def body(url, hits):
        model = ChatTest(endpoint(url))
        reply = await model.reply(history_messages([("hi", "hello")], "how are you"))
        return reply, hits

    reply, hits = run_async(serve([(200, chat_body("  fine  "))], body))
    assert reply == "fine"
    assert all(m["role"] in ("user", "assistant") for m in hits[0]["messages"])


@pytest.mark.live
@pytest.mark.skipif(os.getenv("EPM_LIVE") != "1", reason="set EPM_LIVE=1 to call a real endpoint")
def test_live_endpoint_answers(run_async):
    cfg = load_config()
    spec = next((m for m in cfg.models if m.backend == "chat"), None)
    if spec is None:
        pytest.skip("no chat model configured")
    text = run_async(complete_chat([{"role": "user", "content": "Reply with the word ok."}],
                                   ChatEndpointConfig.from_config(spec, cfg.endpoint(spec.endpoint))))
    assert text.strip()
