#!/usr/bin/env python3
"""
================================================================================
    EPM BENCH - COMMAND LINE
================================================================================

    python epm_bench.py run       run episodes for every model x scenario
    python epm_bench.py score     recompute metrics + aggregate from logs
    python epm_bench.py report    leaderboard and data series
    python epm_bench.py perturb   score a perturbation pair set
    python epm_bench.py validate  check scenario cards
    python epm_bench.py sample    stratified sample of the corpus
    python epm_bench.py gen       Real-to-Sim scenario generation

    Exit codes:
        0 ok | 1 unexpected | 2 config | 3 validation | 4 backend
        5 store | 6 infeasible strata | 7 numerical | 8 insufficient data

    On failure one JSON object is printed on stderr:
        {"error": code, "type": ..., "message": ..., "exit_code": n, ...}
================================================================================
"""

import argparse
import asyncio
import glob
import json
import logging
import os
import sys
from datetime import datetime
from typing import Any, Dict, List, Optional, Sequence

import aiohttp
import yaml

from epm_agents import ChatEndpointConfig, ChatGenerator, build_backend
from epm_config import BenchConfig, backend_from_dict, load_config, setup_logging
from epm_errors import ConfigError, EpmError, ValidationFailed
from epm_orchestrator import EpisodeBackends, EpisodeConfig, EpisodeJob, run_batch
from epm_perturb import ChatRewriter, Scorer, load_pair_set, rewrite_reply, score_pairs, stats_report
from epm_report import (
    GROUP_KEYS,
    SERIES_KINDS,
    build_aggregate,
    export_series,
    leaderboard,
    leaderboard_frame,
    rescore_run,
    text_table,
    verify_aggregate,
    write_outputs,
)
from epm_scenario import (
    DEFAULT_SCHEMA,
    QualityCriteria,
    SamplingSpec,
    Scenario,
    TemplateGenerator,
    difficulty_band,
    load_corpus,
    load_scenario,
    real_to_sim,
    save_scenario,
    stratified_sample,
    validate_scenario,
    write_manifest,
)
from epm_store import RunStore, dump_json

logger = logging.getLogger("EpmBench")


# =============================================================================
# HELPERS
# =============================================================================

def scenario_meta(s: Scenario) -> Dict[str, Any]:
    return {
        "axis": s.mechanism_label.axis.value,
        "mechanism": str(s.mechanism_label),
        "domain": s.domain_label,
        "persona_type": s.persona_type.value,
        "band": s.difficulty_band.value if s.difficulty_band else None,
        "primary_label": s.primary_label,
    }


def backend_echo(cfg) -> Dict[str, Any]:
    return {"backend": cfg.backend, "name": cfg.name, "model": cfg.model or None, "endpoint": cfg.endpoint}


def load_scenarios(path: str) -> List[Scenario]:
    if os.path.isdir(path):
        return load_corpus(path)
    return [load_scenario(path)]


def emit(obj: Any) -> None:
    print(dump_json(obj))


def flag_overrides(args) -> List[str]:
    overrides = list(args.set or [])
    for flag, key in (("seed", "run.seed"), ("parallelism", "run.parallelism"), ("t_max", "run.t_max"),
                      ("k", "run.k"), ("store", "run.store_root"), ("corpus", "run.corpus_dir"),
                      ("log_level", "logging.level")):
        value = getattr(args, flag, None)
        if value is not None:
            overrides.append(f"{key}={value}")
    if getattr(args, "no_progress", False):
        overrides.append("logging.progress=false")
    return overrides


# =============================================================================
# COMMANDS
# =============================================================================

async def cmd_run(cfg: BenchConfig, args) -> int:
    scenarios = load_scenarios(cfg.run.corpus_dir)
    models = [m for m in cfg.models if not args.models or m.name in args.models]
    if not models:
        raise ConfigError("no models to evaluate (check `models` in the config or --models)")
    for role in ("user", "judge", "director"):
        cfg.role(role)

    episode_cfg = EpisodeConfig.from_config(cfg)
    run_id = args.run_id or cfg.run.run_id or f"run_{datetime.now().strftime('%Y%m%d_%H%M%S')}"
    jobs = []
    for model in models:
        for s in scenarios:
            jobs.append(EpisodeJob(f"{model.name}__{s.id}", s, model.name, len(jobs)))

    store = RunStore.create(
        cfg.run.store_root, run_id,
        config_echo=cfg.to_record(),
        episodes=[{"episode_id": j.episode_id, "scenario_id": j.scenario.id, "model_id": j.model_id,
                   "index": j.index} for j in jobs],
        backends={"models": {m.name: backend_echo(m) for m in models},
                  **{role: backend_echo(cfg.role(role)) for role in ("user", "judge", "director")}},
        seed=cfg.run.seed,
        frozen_time=cfg.run.frozen_time,
    )
    logger.info(f"[RUN] {run_id}: {len(models)} models x {len(scenarios)} scenarios, "
                f"t_max={episode_cfg.t_max} k={episode_cfg.k} parallelism={episode_cfg.parallelism}")

    model_cfgs = {m.name: m for m in models}

    async with aiohttp.ClientSession() as session:
        def make_backends(job: EpisodeJob, seed: int) -> EpisodeBackends:
            return EpisodeBackends(
                user=build_backend("user", cfg.role("user"), cfg.endpoints, seed, session),
                test=build_backend("test", model_cfgs[job.model_id], cfg.endpoints, seed, session),
                judge=build_backend("judge", cfg.role("judge"), cfg.endpoints, seed, session),
                director=build_backend("director", cfg.role("director"), cfg.endpoints, seed, session),
            )

        results = await run_batch(
            jobs, make_backends, episode_cfg,
            on_result=lambda job, result: store.write_episode(job.episode_id, result, scenario_meta(job.scenario)),
            progress=cfg.logging.progress,
        )

    incomplete = [j.episode_id for j, r in zip(jobs, results) if r.incomplete]
    scored = rescore_run(store, cfg.metrics, allow_partial=True)
    store.write_aggregate(build_aggregate(scored))
    print(text_table(leaderboard_frame(leaderboard(scored)), f"EPM LEADERBOARD - {run_id}"))
    if incomplete:
        logger.warning(f"[RUN] {len(incomplete)} episodes incomplete: {', '.join(incomplete)}")
        return 4
    return 0


async def cmd_score(cfg: BenchConfig, args) -> int:
    store = RunStore.open(cfg.run.store_root, args.run_id)
    scored = rescore_run(store, cfg.metrics, allow_partial=args.allow_partial)
    path = store.write_aggregate(build_aggregate(scored))
    logger.info(f"[SCORE] {len(scored.episodes)} episodes rescored -> {path}")
    print(text_table(leaderboard_frame(leaderboard(scored)), f"EPM LEADERBOARD - {args.run_id}"))
    return 0


async def cmd_report(cfg: BenchConfig, args) -> int:
    store = RunStore.open(cfg.run.store_root, args.run_id)
    scored = rescore_run(store, cfg.metrics, allow_partial=args.allow_partial)
    aggregate = build_aggregate(scored)
    stored = store.read_aggregate()
    if stored is not None and not scored.excluded:
        verify_aggregate(stored, aggregate)

    out_dir = args.out or os.path.join(store.path, "report")
    formats = [f.strip() for f in args.format.split(",") if f.strip()]
    extra = {"run_id": args.run_id, "excluded": scored.excluded}
    frame = leaderboard_frame(leaderboard(scored))
    write_outputs(frame, out_dir, "leaderboard", formats, extra)
    for group in args.group_by or []:
        write_outputs(leaderboard_frame(leaderboard(scored, group_by=group)), out_dir,
                      f"leaderboard_by_{group}", formats, extra)

    for kind in args.series or []:
        scenarios = load_scenarios(cfg.run.corpus_dir) if kind == "overview" else None
        series = export_series(scored, kind, group_by=args.radar_group, scenarios=scenarios)
        write_outputs(series, out_dir, f"series_{kind}", formats, extra)

    print(text_table(frame, f"EPM LEADERBOARD - {args.run_id}"))
    if scored.excluded:
        print(f"Excluded incomplete episodes: {', '.join(scored.excluded)}")
    return 0


async def cmd_perturb(cfg: BenchConfig, args) -> int:
    pair_set = load_pair_set(args.pairs, cfg.run.store_root)
    judge_cfg = backend_from_dict(pair_set.judge, "pairs.judge") if pair_set.judge else cfg.role("judge")
    scorers = [Scorer(s) for s in args.scorers] if args.scorers else list(Scorer)

    async with aiohttp.ClientSession() as session:
        if args.rewriter:
            model = next((m for m in cfg.models if m.name == args.rewriter), None)
            if model is None:
                raise ConfigError(f"--rewriter names unknown model {args.rewriter!r}")
            rewriter = ChatRewriter(ChatEndpointConfig.from_config(model, cfg.endpoint(model.endpoint)), session)
            for pair in pair_set.pairs:
                if pair.variant is not None:
                    pair.perturbed_reply = await rewrite_reply(pair.original_reply, pair.variant, rewriter)
        judge = build_backend("judge", judge_cfg, cfg.endpoints, cfg.run.seed, session)
        pairs = await score_pairs(pair_set.pairs, scorers, judge, cfg.run.parallelism)

    report = stats_report(pairs, scorers, cfg.stats, label=pair_set.name)
    if args.out:
        os.makedirs(os.path.dirname(os.path.abspath(args.out)), exist_ok=True)
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(dump_json(report) + "\n")
        logger.info(f"[PERTURB] Stats report -> {args.out}")
    emit(report)
    return 0


async def cmd_validate(cfg: BenchConfig, args) -> int:
    criteria = QualityCriteria.from_config(cfg.scenario)
    verdicts = [validate_scenario(s, criteria) for s in load_scenarios(args.path or cfg.run.corpus_dir)]
    emit({"verdicts": [v.to_record() for v in verdicts]})
    failed = [v.scenario_id for v in verdicts if not v.passed]
    if failed:
        raise ValidationFailed(f"{len(failed)} of {len(verdicts)} scenarios failed validation",
                               failed=", ".join(failed))
    logger.info(f"[VALIDATE] {len(verdicts)} scenarios passed")
    return 0


async def cmd_sample(cfg: BenchConfig, args) -> int:
    spec = SamplingSpec.load(args.spec)
    if args.seed is not None:
        spec.seed = args.seed
    chosen = stratified_sample(load_scenarios(cfg.run.corpus_dir), spec)
    ids = [s.id for s in chosen]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            yaml.safe_dump({"sample": ids, "seed": spec.seed}, f, sort_keys=False)
    emit({"sample": ids, "seed": spec.seed})
    return 0


def read_dialogues(path: str) -> Dict[str, str]:
    """A YAML mapping id -> text, or a directory of .txt files"""
    if os.path.isdir(path):
        out = {}
        for file in sorted(glob.glob(os.path.join(path, "*.txt"))):
            with open(file, "r", encoding="utf-8") as f:
                out[os.path.splitext(os.path.basename(file))[0]] = f.read()
        return out
    with open(path, "r", encoding="utf-8") as f:
        data = yaml.safe_load(f) or {}
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must map dialogue ids to text")
    return {str(k): str(v) for k, v in data.items()}


async def cmd_gen(cfg: BenchConfig, args) -> int:
    dialogues = read_dialogues(args.input)
    criteria = QualityCriteria.from_config(cfg.scenario)

    async with aiohttp.ClientSession() as session:
        if args.generator_model:
            model = next((m for m in cfg.models if m.name == args.generator_model), None)
            if model is None:
                raise ConfigError(f"--generator-model names unknown model {args.generator_model!r}")
            generator = ChatGenerator(ChatEndpointConfig.from_config(model, cfg.endpoint(model.endpoint)),
                                      session=session)
        else:
            generator = TemplateGenerator()
        report = await real_to_sim(dialogues, DEFAULT_SCHEMA, generator, criteria, cfg.scenario.filter_keywords)

        if args.freeze_iedr:
            judge = build_backend("judge", cfg.role("judge"), cfg.endpoints, cfg.run.seed, session)
            for s in report.accepted:
                s.iedr = await judge.assess_initial(s)
                s.difficulty_band = difficulty_band(s.iedr.r0, cfg.scenario.band_mu, cfg.scenario.band_sigma)

    for s in report.accepted:
        save_scenario(s, os.path.join(args.out, "scenarios", f"{s.id}.yaml"))
    if report.accepted:
        write_manifest(report.accepted, args.out)
    emit(report.to_record())
    return 0


COMMANDS = {
    "run": cmd_run,
    "score": cmd_score,
    "report": cmd_report,
    "perturb": cmd_perturb,
    "validate": cmd_validate,
    "sample": cmd_sample,
    "gen": cmd_gen,
}


# =============================================================================
# ARGUMENTS
# =============================================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="epm_bench", description="EPM trajectory-level empathy benchmark")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=None, help="config file (default: $EPM_CONFIG or config.yaml)")
    common.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--store", default=None, help="run store root")
    common.add_argument("--corpus", default=None, help="scenario corpus directory or card file")
    common.add_argument("--log-level", default=None)
    common.add_argument("--no-progress", action="store_true")

    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", parents=[common], help="run episodes")
    p.add_argument("--run-id", default=None)
    p.add_argument("--models", nargs="+", default=None, help="subset of configured model names")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--t-max", dest="t_max", type=int, default=None)
    p.add_argument("--k", type=int, default=None, help="adjudication interval")

    p = sub.add_parser("score", parents=[common], help="recompute metrics from stored logs")
    p.add_argument("--run-id", required=True)
    p.add_argument("--allow-partial", action="store_true")

    p = sub.add_parser("report", parents=[common], help="leaderboard and data series")
    p.add_argument("--run-id", required=True)
    p.add_argument("--out", default=None, help="output directory (default: <run>/report)")
    p.add_argument("--format", default="json,csv,txt")
    p.add_argument("--group-by", nargs="+", choices=GROUP_KEYS, default=None)
    p.add_argument("--series", nargs="+", choices=SERIES_KINDS, default=None)
    p.add_argument("--radar-group", choices=GROUP_KEYS, default="mechanism")
    p.add_argument("--allow-partial", action="store_true")

    p = sub.add_parser("perturb", parents=[common], help="score a perturbation pair set")
    p.add_argument("--pairs", required=True, help="pair manifest (YAML)")
    p.add_argument("--scorers", nargs="+", choices=[s.value for s in Scorer], default=None)
    p.add_argument("--rewriter", default=None, help="model name for live sycophancy rewrites")
    p.add_argument("--parallelism", type=int, default=None)
    p.add_argument("--out", default=None)

    p = sub.add_parser("validate", parents=[common], help="validate scenario cards")
    p.add_argument("path", nargs="?", default=None)

    p = sub.add_parser("sample", parents=[common], help="stratified sample")
    p.add_argument("--spec", required=True, help="sampling spec (YAML)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("gen", parents=[common], help="Real-to-Sim generation")
    p.add_argument("--input", required=True, help="YAML mapping id -> dialogue, or a directory of .txt")
    p.add_argument("--out", required=True, help="output corpus directory")
    p.add_argument("--generator-model", default=None, help="model name for the live generator")
    p.add_argument("--freeze-iedr", action="store_true", help="judge IEDR now and store it with the card")

    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, flag_overrides(args))
        setup_logging(cfg.logging)
        return asyncio.run(COMMANDS[args.command](cfg, args))
    except EpmError as e:
        print(json.dumps(e.to_record(), sort_keys=True), file=sys.stderr)
        return e.exit_code
    except KeyboardInterrupt:
        print(json.dumps({"error": "Interrupted", "exit_code": 130}), file=sys.stderr)
        return 130
    except Exception as e:
        logger.exception(f"[CLI] unexpected failure: {e}")
        print(json.dumps({"error": "Unexpected", "type": type(e).__name__, "message": str(e),
                          "exit_code": 1}, sort_keys=True), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
