"""Command-line frontend: generate, expand, analyze, export, record-fixture.

Configuration is one JSON document; command-line flags override file values,
and the auth token only ever comes from an environment variable. Every
command writes a run manifest (resolved config, config hash, fixture hash)
that can itself be passed back via --config for an exact re-run.

Exit codes: 0 success, 2 config error, 3 backend error, 4 partial result
(sampling budget exhausted before the target).
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import shlex
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

from . import analysis, expansion, structgen
from .backend import (
    Backend,
    BackendConfig,
    BackendError,
    DecodingParams,
    FixtureError,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    replay_session,
)
from .jsonl import read_jsonl, read_jsonl_lenient, write_jsonl
from .prompting import PromptStyle, SeedSet, builtin_rephrase_demos, builtin_seed_sets

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_BACKEND = 3
EXIT_PARTIAL = 4

CORE_FILENAME = "core.jsonl"
FULL_FILENAME = "full.jsonl"


class ConfigError(Exception):
    pass


@dataclass(frozen=True)
class ExpansionConfig:
    want: int = 2
    max_attempts: int = 5

    def to_dict(self) -> dict:
        return {"want": self.want, "max_attempts": self.max_attempts}


@dataclass(frozen=True)
class RunConfig:
    """Full pipeline configuration; defaults match the main setup:

    enumeration style, all five seed sets, nucleus p=0.99 input decoding,
    greedy output decoding, constraints used in both phases, two-step.
    """

    backend: BackendConfig = field(default_factory=BackendConfig)
    style: PromptStyle = PromptStyle.ENUMERATION
    seed_set_ids: tuple[int, ...] = (1, 2, 3, 4, 5)
    target_core_examples: int = 100
    input_decoding: DecodingParams | None = None  # None: nucleus p=0.99 + style stops
    output_decoding: DecodingParams = field(default_factory=lambda: DecodingParams.greedy(256))
    constraints_in_input_gen: bool = True
    constraints_in_output_gen: bool = True
    one_step: bool = False
    keep_truncated_outputs: bool = False
    call_budget: int | None = None
    max_in_flight: int = 1
    rng_seed: int = 0
    expansion: ExpansionConfig = field(default_factory=ExpansionConfig)
    output_dir: str = "out"
    fixture: str | None = None

    def to_dict(self) -> dict:
        return {
            "backend": self.backend.to_dict(),
            "style": self.style.value,
            "seed_set_ids": list(self.seed_set_ids),
            "target_core_examples": self.target_core_examples,
            "decoding": {
                "input": self.input_decoding.to_dict() if self.input_decoding else None,
                "output": self.output_decoding.to_dict(),
            },
            "constraints_in_input_gen": self.constraints_in_input_gen,
            "constraints_in_output_gen": self.constraints_in_output_gen,
            "one_step": self.one_step,
            "keep_truncated_outputs": self.keep_truncated_outputs,
            "call_budget": self.call_budget,
            "max_in_flight": self.max_in_flight,
            "rng_seed": self.rng_seed,
            "expansion": self.expansion.to_dict(),
            "paths": {"output_dir": self.output_dir, "fixture": self.fixture},
        }

    @classmethod
    def from_dict(cls, raw: dict) -> "RunConfig":
        try:
            decoding = raw.get("decoding", {})
            paths = raw.get("paths", {})
            expansion_raw = raw.get("expansion", {})
            kwargs: dict = {}
            if "backend" in raw:
                kwargs["backend"] = BackendConfig.from_dict(raw["backend"])
            if "style" in raw:
                kwargs["style"] = PromptStyle(raw["style"])
            if "seed_set_ids" in raw:
                kwargs["seed_set_ids"] = tuple(int(i) for i in raw["seed_set_ids"])
            if "target_core_examples" in raw:
                kwargs["target_core_examples"] = int(raw["target_core_examples"])
            if decoding.get("input") is not None:
                kwargs["input_decoding"] = DecodingParams.from_dict(decoding["input"])
            if decoding.get("output") is not None:
                kwargs["output_decoding"] = DecodingParams.from_dict(decoding["output"])
            for flag in (
                "constraints_in_input_gen",
                "constraints_in_output_gen",
                "one_step",
                "keep_truncated_outputs",
            ):
                if flag in raw:
                    kwargs[flag] = bool(raw[flag])
            if "call_budget" in raw:
                kwargs["call_budget"] = None if raw["call_budget"] is None else int(raw["call_budget"])
            if "max_in_flight" in raw:
                kwargs["max_in_flight"] = int(raw["max_in_flight"])
            if "rng_seed" in raw:
                kwargs["rng_seed"] = int(raw["rng_seed"])
            if expansion_raw:
                kwargs["expansion"] = ExpansionConfig(
                    want=int(expansion_raw.get("want", 2)),
                    max_attempts=int(expansion_raw.get("max_attempts", 5)),
                )
            if "output_dir" in paths and paths["output_dir"]:
                kwargs["output_dir"] = paths["output_dir"]
            if "fixture" in paths:
                kwargs["fixture"] = paths["fixture"]
            return cls(**kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(f"bad config document: {exc}") from exc

    def sha256(self) -> str:
        canonical = json.dumps(self.to_dict(), sort_keys=True, ensure_ascii=False)
        return hashlib.sha256(canonical.encode("utf-8")).hexdigest()

    def selected_seed_sets(self) -> tuple[SeedSet, ...]:
        available = {s.id: s for s in builtin_seed_sets()}
        missing = [i for i in self.seed_set_ids if i not in available]
        if missing:
            raise ConfigError(f"unknown seed set ids: {missing}")
        if not self.seed_set_ids:
            raise ConfigError("seed_set_ids must not be empty")
        return tuple(available[i] for i in self.seed_set_ids)

    def generation_settings(self) -> structgen.GenerationSettings:
        return structgen.GenerationSettings(
            seed_sets=self.selected_seed_sets(),
            style=self.style,
            target=self.target_core_examples,
            input_decoding=self.input_decoding,
            output_decoding=self.output_decoding,
            constraints_in_input_gen=self.constraints_in_input_gen,
            constraints_in_output_gen=self.constraints_in_output_gen,
            keep_truncated_outputs=self.keep_truncated_outputs,
            call_budget=self.call_budget,
            max_in_flight=self.max_in_flight,
        )


def load_config_file(path: str) -> RunConfig:
    try:
        raw = json.loads(Path(path).read_text("utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config file: {exc}") from exc
    except ValueError as exc:
        raise ConfigError(f"config file is not valid JSON: {exc}") from exc
    if "config" in raw and isinstance(raw["config"], dict):
        raw = raw["config"]  # accept a run manifest directly
    return RunConfig.from_dict(raw)


def resolve_config(args: argparse.Namespace) -> RunConfig:
    """Config file first, then explicit command-line overrides."""
    config = load_config_file(args.config) if args.config else RunConfig()
    overrides: dict = {}
    if args.style:
        overrides["style"] = PromptStyle(args.style)
    if args.seed_sets:
        try:
            overrides["seed_set_ids"] = tuple(
                int(part) for part in args.seed_sets.split(",") if part.strip()
            )
        except ValueError as exc:
            raise ConfigError(f"bad --seed-sets value {args.seed_sets!r}") from exc
    if args.target is not None:
        overrides["target_core_examples"] = args.target
    if args.no_constraints_input:
        overrides["constraints_in_input_gen"] = False
    if args.no_constraints_output:
        overrides["constraints_in_output_gen"] = False
    if args.one_step:
        overrides["one_step"] = True
    if args.rng_seed is not None:
        overrides["rng_seed"] = args.rng_seed
    if args.fixture:
        overrides["fixture"] = args.fixture
    if args.max_in_flight is not None:
        overrides["max_in_flight"] = args.max_in_flight
    if args.call_budget is not None:
        overrides["call_budget"] = args.call_budget
    if args.out:
        overrides["output_dir"] = args.out
    return replace(config, **overrides) if overrides else config


def make_backend(config: RunConfig) -> Backend:
    if config.fixture:
        path = Path(config.fixture)
        if not path.exists():
            raise ConfigError(f"fixture not found: {path}")
        return replay_session(path)
    if not config.backend.endpoint_url:
        raise ConfigError(
            "no fixture given and backend.endpoint_url is empty; configure one of them"
        )
    return HttpBackend(config.backend)


def _file_sha256(path: str | Path | None) -> str | None:
    if not path:
        return None
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_manifest(out_dir: Path, command: str, config: RunConfig, outputs: dict) -> None:
    manifest = {
        "command": command,
        "config": config.to_dict(),
        "config_sha256": config.sha256(),
        "fixture_sha256": _file_sha256(config.fixture),
        "outputs": outputs,
    }
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, ensure_ascii=False) + "\n", "utf-8"
    )


def _write_json(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n", "utf-8")


def _generate(config: RunConfig, backend: Backend, out_dir: Path) -> int:
    settings = config.generation_settings()
    if config.one_step:
        result = structgen.generate_one_step(backend, settings)
    else:
        result = structgen.generate_core_dataset(backend, settings)

    records = [
        structgen.core_record_dict(example, expansion.core_record_id(i))
        for i, example in enumerate(result.examples)
    ]
    write_jsonl(out_dir / CORE_FILENAME, records)
    cost = analysis.estimate_cost(len(result.examples), 0)
    report = {
        "examples": len(result.examples),
        "filters": result.report.to_dict(),
        "discards": result.discards,
        "input_calls": result.input_calls,
        "output_calls": result.output_calls,
        "budget_exhausted": result.budget_exhausted,
        "one_step": config.one_step,
        "cost": cost.to_dict(),
    }
    _write_json(out_dir / "report.json", report)
    write_manifest(out_dir, "generate", config,
                   {"core": CORE_FILENAME, "report": "report.json"})
    if isinstance(backend, ReplayBackend):
        backend.warn_if_unused()
    return EXIT_PARTIAL if result.budget_exhausted else EXIT_OK


def cmd_generate(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    backend = make_backend(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _generate(config, backend, out_dir)


def _core_examples_from_records(records: list[dict]) -> tuple[list[structgen.CoreExample], list[str]]:
    examples = []
    ids = []
    for i, record in enumerate(records):
        try:
            examples.append(
                structgen.CoreExample(
                    candidate=structgen.StructuredCandidate(
                        instruction=record["instruction"],
                        input=record["input"],
                        constraints=record.get("constraints", "None."),
                    ),
                    output=record["output"],
                )
            )
            ids.append(record.get("id") or expansion.core_record_id(i))
        except (KeyError, ValueError) as exc:
            raise ConfigError(f"core record {i} is unusable: {exc}") from exc
    return examples, ids


def _collect_templates(
    backend: Backend,
    instructions: list[str],
    config: RunConfig,
) -> dict[str, list[expansion.ParaphraseTemplate]]:
    demos = builtin_rephrase_demos()

    def worker(instruction: str) -> list[expansion.ParaphraseTemplate]:
        return expansion.generate_paraphrases(
            backend,
            instruction,
            demos=demos,
            want=config.expansion.want,
            max_attempts=config.expansion.max_attempts,
        )

    if backend.supports_parallel and config.max_in_flight > 1:
        with ThreadPoolExecutor(max_workers=config.max_in_flight) as pool:
            results = list(pool.map(worker, instructions))
    else:
        results = [worker(instruction) for instruction in instructions]
    return dict(zip(instructions, results))


def _expand(config: RunConfig, backend: Backend, core_path: Path, out_dir: Path) -> int:
    core_records = read_jsonl(core_path)
    examples, ids = _core_examples_from_records(core_records)

    instructions: list[str] = []
    for example in examples:
        if example.candidate.instruction not in instructions:
            instructions.append(example.candidate.instruction)

    templates = _collect_templates(backend, instructions, config)
    records = expansion.expand_dataset(examples, templates, ids=ids)
    dicts = [
        expansion.expanded_record_dict(record, expansion.full_record_id(i))
        for i, record in enumerate(records)
    ]
    write_jsonl(out_dir / FULL_FILENAME, dicts)

    input_counts: dict[str, int] = {}
    for example in examples:
        key = example.candidate.instruction
        input_counts[key] = input_counts.get(key, 0) + 1
    groups = [(input_counts[i], len(templates[i])) for i in instructions]
    expected = expansion.expansion_record_count(groups)
    with_two = sum(1 for i in instructions if len(templates[i]) >= 2)
    report = {
        "core_records": len(examples),
        "full_records": len(records),
        "expected_full_records": expected,
        "instructions": len(instructions),
        "instructions_with_two_templates": with_two,
        "two_template_rate": (with_two / len(instructions)) if instructions else None,
        "per_instruction": [
            {
                "instruction": instruction,
                "inputs": input_counts[instruction],
                "templates": len(templates[instruction]),
            }
            for instruction in instructions
        ],
        "cost": analysis.estimate_cost(
            len(examples), max(0, len(records) - len(examples))
        ).to_dict(),
    }
    _write_json(out_dir / "expansion_report.json", report)
    write_manifest(out_dir, "expand", config,
                   {"full": FULL_FILENAME, "report": "expansion_report.json"})
    if isinstance(backend, ReplayBackend):
        backend.warn_if_unused()
    if len(records) != expected:
        raise RuntimeError(
            f"record count {len(records)} does not match formula value {expected}"
        )
    return EXIT_OK


def cmd_expand(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    core_path = Path(args.core)
    if not core_path.exists():
        raise ConfigError(f"core dataset not found: {core_path}")
    backend = make_backend(config)
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return _expand(config, backend, core_path, out_dir)


def _subset_records(records: list, subset: str) -> list:
    if subset == "all":
        return records
    wanted = subset
    out = []
    for record in records:
        if not isinstance(record, dict):
            continue
        kind = record.get("formulation_kind", "core")
        if kind == wanted:
            out.append(record)
    return out


def cmd_analyze(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records, unreadable = read_jsonl_lenient(dataset_path)
    stats = analysis.dataset_stats(records)
    stats["unreadable_lines"] = unreadable

    kinds = stats["records_by_kind"]
    core_count = kinds.get("core", 0)
    expanded_count = sum(v for k, v in kinds.items() if k != "core")
    payload = {
        "dataset": str(dataset_path),
        "stats": stats,
        "cost": analysis.estimate_cost(core_count, expanded_count).to_dict(),
    }
    _write_json(out_dir / "stats.json", payload)

    subset = _subset_records(records, args.subset)
    similarity_payload: dict = {"subset": args.subset, "rng_seed": config.rng_seed}
    scorer = (
        analysis.ExternalScorer(shlex.split(args.scorer_cmd))
        if args.scorer_cmd
        else analysis.token_overlap_score
    )
    scoreable = [r for r in subset if isinstance(r, dict) and isinstance(r.get("input"), str)]
    if len(scoreable) >= 2:
        n_pairs = None if args.exhaustive_pairs else args.n_pairs
        distribution = analysis.sample_pair_similarities(
            scoreable, n_pairs=n_pairs, scorer=scorer, rng_seed=config.rng_seed
        )
        similarity_payload.update(distribution.to_dict())
        with (out_dir / "similarity_histogram.csv").open("w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin_left", "bin_right", "count"])
            writer.writerows(distribution.histogram_rows())
    else:
        similarity_payload["skipped"] = "fewer than 2 scoreable records"
    _write_json(out_dir / "similarity.json", similarity_payload)
    write_manifest(out_dir, "analyze", config,
                   {"stats": "stats.json", "similarity": "similarity.json"})
    return EXIT_OK


def _export_row(record: dict) -> dict:
    kind = record.get("formulation_kind", "core")
    if kind == "paraphrase":
        source = record["rendered_task"]
    else:
        instruction = record.get("instruction") or record.get("task_text")
        source = expansion.render_structured_task(instruction, record["input"])
    return {"source": source, "target": record["output"]}


def cmd_export(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    dataset_path = Path(args.dataset)
    if not dataset_path.exists():
        raise ConfigError(f"dataset not found: {dataset_path}")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    records = read_jsonl(dataset_path)
    if args.format == "raw_jsonl":
        out_path = out_dir / "raw.jsonl"
        write_jsonl(out_path, records)
    else:
        out_path = out_dir / "training.jsonl"
        try:
            write_jsonl(out_path, (_export_row(r) for r in records))
        except KeyError as exc:
            raise ConfigError(f"dataset record lacks required field {exc}") from exc
    write_manifest(out_dir, "export", config, {"export": out_path.name, "format": args.format})
    return EXIT_OK


def cmd_record_fixture(args: argparse.Namespace) -> int:
    config = resolve_config(args)
    if config.fixture:
        raise ConfigError("record-fixture runs against the live backend; drop --fixture")
    if not config.backend.endpoint_url:
        raise ConfigError("record-fixture needs backend.endpoint_url")
    out_dir = Path(config.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    recorder = RecordingBackend(HttpBackend(config.backend))

    code = _generate(config, recorder, out_dir)
    if code == EXIT_OK and not args.skip_expand:
        code = _expand(config, recorder, out_dir / CORE_FILENAME, out_dir)
    fixture_path = Path(args.fixture_out or (out_dir / "fixture.jsonl"))
    recorder.write_fixture(fixture_path)
    return code


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file (or a previous run manifest)")
    shared.add_argument("--style", choices=[s.value for s in PromptStyle])
    shared.add_argument("--seed-sets", help="comma-separated seed set ids, e.g. 1,2,3")
    shared.add_argument("--target", type=int, help="number of core examples to collect")
    shared.add_argument("--no-constraints-input", action="store_true",
                        help="drop the constraints field from generation prompts")
    shared.add_argument("--no-constraints-output", action="store_true",
                        help="drop the constraints line from output prompts")
    shared.add_argument("--one-step", action="store_true",
                        help="sample instruction, input, constraints and output in one pass")
    shared.add_argument("--rng-seed", type=int, help="seed for pair sampling")
    shared.add_argument("--fixture", help="replay fixture path (offline backend)")
    shared.add_argument("--max-in-flight", type=int, help="bounded request parallelism")
    shared.add_argument("--call-budget", type=int, help="max sampling calls before giving up")
    shared.add_argument("--out", help="output directory")

    parser = argparse.ArgumentParser(
        prog="instructgen",
        description="Generate, expand, analyze and export instruction-tuning data.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", parents=[shared], help="collect a core dataset")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("expand", parents=[shared], help="paraphrase and cross-reference a core dataset")
    p.add_argument("core", help="core dataset JSONL path")
    p.set_defaults(func=cmd_expand)

    p = sub.add_parser("analyze", parents=[shared], help="stats, diversity and cost reports")
    p.add_argument("dataset", help="dataset JSONL path (core or full)")
    p.add_argument("--n-pairs", type=int, default=10_000)
    p.add_argument("--exhaustive-pairs", action="store_true",
                   help="score every unordered pair instead of sampling")
    p.add_argument("--subset", choices=["all", "core", "paraphrase"], default="all")
    p.add_argument("--scorer-cmd", help="external scorer command (tab-separated pairs on stdin)")
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("export", parents=[shared], help="write training-ready files")
    p.add_argument("dataset", help="dataset JSONL path (core or full)")
    p.add_argument("--format", choices=["raw_jsonl", "training_jsonl"], default="training_jsonl")
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("record-fixture", parents=[shared],
                       help="run generate (and expand) live while recording a replay fixture")
    p.add_argument("--fixture-out", help="where to write the recorded fixture")
    p.add_argument("--skip-expand", action="store_true")
    p.set_defaults(func=cmd_record_fixture)
    return parser


def _error_json(exc: Exception, code: int) -> str:
    return json.dumps(
        {"error": type(exc).__name__, "message": str(exc), "exit_code": code},
        ensure_ascii=False,
    )


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FixtureError) as exc:
        print(_error_json(exc, EXIT_CONFIG), file=sys.stderr)
        return EXIT_CONFIG
    except BackendError as exc:
        print(_error_json(exc, EXIT_BACKEND), file=sys.stderr)
        return EXIT_BACKEND
    except Exception as exc:  # keep the contract: errors surface as JSON
        print(_error_json(exc, EXIT_BACKEND), file=sys.stderr)
        return EXIT_BACKEND


if __name__ == "__main__":
    raise SystemExit(main())
