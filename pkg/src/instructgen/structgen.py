"""Core dataset generation: parse, filter, and orchestrate.

The pipeline samples structured completions from a backend, parses them into
candidates, applies three filters (missing fields, copies of prompt
demonstrations, exact instruction+input duplicates), then generates outputs
with greedy decoding. A one-pass variant samples the output together with
the task. Under a replay backend the whole run is a deterministic function
of its configuration.
"""

from __future__ import annotations

import re
import unicodedata
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from itertools import count, islice
from typing import Iterable, Iterator, Sequence

from .backend import (
    Backend,
    BackendError,
    CompletionRequest,
    CompletionResult,
    DecodingParams,
    prompt_sha256,
)
from .prompting import (
    CONSTRAINTS_LABEL,
    INPUT_LABEL,
    INSTRUCTION_LABEL,
    NO_CONSTRAINTS,
    OUTPUT_LABEL,
    PromptStyle,
    SeedSet,
    meta_prompt,
    normalize_constraints,
    render_generation_prompt,
    render_one_step_prompt,
    render_output_prompt,
)

_BANNER_RE = re.compile(r"^Example \d+$")

_FIELD_NAMES = {
    INSTRUCTION_LABEL: "instruction",
    INPUT_LABEL: "input",
    CONSTRAINTS_LABEL: "constraints",
    OUTPUT_LABEL: "output",
}


class MissingFieldError(ValueError):
    """A required labeled field is absent or empty in a completion."""

    def __init__(self, field_name: str) -> None:
        super().__init__(f"completion is missing the {field_name!r} field")
        self.field_name = field_name


@dataclass(frozen=True)
class Provenance:
    seed_set_id: int
    style: str
    prompt_sha256: str
    completion_sha256: str

    def to_dict(self) -> dict:
        return {
            "seed_set_id": self.seed_set_id,
            "style": self.style,
            "prompt_sha256": self.prompt_sha256,
            "completion_sha256": self.completion_sha256,
        }


@dataclass(frozen=True)
class StructuredCandidate:
    """A parsed instruction/input/constraints triple awaiting an output."""

    instruction: str
    input: str
    constraints: str = NO_CONSTRAINTS
    provenance: Provenance | None = None

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("candidate instruction must be non-empty")
        if not self.input.strip():
            raise ValueError("candidate input must be non-empty")


@dataclass(frozen=True)
class CoreExample:
    candidate: StructuredCandidate
    output: str

    def __post_init__(self) -> None:
        if not self.output.strip():
            raise ValueError("core example output must be non-empty")


@dataclass(frozen=True)
class Discard:
    """Outcome of a rejected output-generation call."""

    reason: str  # "empty_output" or "truncated"


def _norm(text: str) -> str:
    # Exact-match comparisons are done after NFC normalization and trimming,
    # case-sensitive.
    return unicodedata.normalize("NFC", text.strip())


class FilterReport:
    """Tallies the three filters plus kept candidates.

    Counts always reconcile: missing_fields + seed_copy + duplicate + kept
    equals the number of candidates processed. A handful of rejected samples
    per category are retained for debugging.
    """

    SAMPLE_LIMIT = 5

    def __init__(self) -> None:
        self.counts = {"missing_fields": 0, "seed_copy": 0, "duplicate": 0, "kept": 0}
        self.samples: dict[str, list] = {"missing_fields": [], "seed_copy": [], "duplicate": []}

    def _sample(self, category: str, ref: dict) -> None:
        if len(self.samples[category]) < self.SAMPLE_LIMIT:
            self.samples[category].append(ref)

    def record_missing(self, field_name: str, completion_sha256: str) -> None:
        self.counts["missing_fields"] += 1
        self._sample("missing_fields", {"field": field_name, "completion_sha256": completion_sha256})

    def record_seed_copy(self, candidate: StructuredCandidate, matched_field: str) -> None:
        self.counts["seed_copy"] += 1
        self._sample(
            "seed_copy",
            {"matched_field": matched_field, "instruction": candidate.instruction[:80]},
        )

    def record_duplicate(self, candidate: StructuredCandidate) -> None:
        self.counts["duplicate"] += 1
        self._sample("duplicate", {"instruction": candidate.instruction[:80]})

    def record_kept(self) -> None:
        self.counts["kept"] += 1

    def total(self) -> int:
        return sum(self.counts.values())

    def to_dict(self) -> dict:
        return {"counts": dict(self.counts), "samples": self.samples}


class DedupIndex:
    """Set of (instruction, input) keys already kept in a run."""

    def __init__(self) -> None:
        self._seen: set[tuple[str, str]] = set()

    @staticmethod
    def key(candidate: StructuredCandidate) -> tuple[str, str]:
        return (_norm(candidate.instruction), _norm(candidate.input))

    def __contains__(self, candidate: StructuredCandidate) -> bool:
        return self.key(candidate) in self._seen

    def add(self, candidate: StructuredCandidate) -> None:
        self._seen.add(self.key(candidate))

    def __len__(self) -> int:
        return len(self._seen)


def parse_structured_completion(
    text: str, expect_output: bool = False
) -> tuple[StructuredCandidate, str | None]:
    """Extract the first labeled block from a completion.

    Expects "Instruction:", "Input:", "Constraints:" (and "Output:" when
    requested) in that order, tolerating leading banner lines and surrounding
    whitespace. Middle fields may span multiple lines; the last field ends at
    a blank line, a banner, or the start of another block, and anything after
    the block is discarded. Raises MissingFieldError when a label is absent
    or its value is empty.
    """
    labels = [INSTRUCTION_LABEL, INPUT_LABEL, CONSTRAINTS_LABEL]
    if expect_output:
        labels.append(OUTPUT_LABEL)

    lines = text.split("\n")
    i = 0
    while i < len(lines) and (not lines[i].strip() or _BANNER_RE.match(lines[i].strip())):
        i += 1

    values: dict[str, str] = {}
    for pos, label in enumerate(labels):
        if i >= len(lines) or not lines[i].startswith(label):
            raise MissingFieldError(_FIELD_NAMES[label])
        value_lines = [lines[i][len(label):]]
        i += 1
        next_label = labels[pos + 1] if pos + 1 < len(labels) else None
        while i < len(lines):
            line = lines[i]
            if next_label is not None and line.startswith(next_label):
                break
            stripped = line.strip()
            if _BANNER_RE.match(stripped) or line.startswith(INSTRUCTION_LABEL):
                break  # a new block begins; stop this field here
            if next_label is None and not stripped:
                break  # blank line ends the final field
            value_lines.append(line)
            i += 1
        value = "\n".join(value_lines).strip()
        if not value:
            raise MissingFieldError(_FIELD_NAMES[label])
        values[label] = value

    candidate = StructuredCandidate(
        instruction=values[INSTRUCTION_LABEL],
        input=values[INPUT_LABEL],
        constraints=normalize_constraints(values[CONSTRAINTS_LABEL]),
    )
    return candidate, values.get(OUTPUT_LABEL)


class _SeedFieldIndex:
    """Normalized instruction and input fields of the prompt demonstrations."""

    def __init__(self, seeds: Iterable[SeedSet]) -> None:
        self.instructions: set[str] = set()
        self.inputs: set[str] = set()
        for seed in seeds:
            for demo in seed.demos:
                self.instructions.add(_norm(demo.instruction))
                self.inputs.add(_norm(demo.input))

    def matched_field(self, candidate: StructuredCandidate) -> str | None:
        if _norm(candidate.instruction) in self.instructions:
            return "instruction"
        if _norm(candidate.input) in self.inputs:
            return "input"
        return None


def _passes_filters(
    candidate: StructuredCandidate,
    seed_index: _SeedFieldIndex,
    dedup: DedupIndex,
    report: FilterReport,
) -> bool:
    matched = seed_index.matched_field(candidate)
    if matched is not None:
        report.record_seed_copy(candidate, matched)
        return False
    if candidate in dedup:
        report.record_duplicate(candidate)
        return False
    dedup.add(candidate)
    report.record_kept()
    return True


def filter_candidates(
    candidates: Iterable[StructuredCandidate],
    seeds: Sequence[SeedSet],
    index: DedupIndex | None = None,
) -> tuple[list[StructuredCandidate], FilterReport]:
    """Apply the demonstration-copy and duplicate filters to parsed candidates.

    The dedup index keeps first occurrences; pass a shared index to dedup
    incrementally across batches. Missing-field rejections happen at parse
    time and are not visible here.
    """
    seed_index = _SeedFieldIndex(seeds)
    dedup = index if index is not None else DedupIndex()
    report = FilterReport()
    kept = [c for c in candidates if _passes_filters(c, seed_index, dedup, report)]
    return kept, report


def _judge_output(candidate: StructuredCandidate, result: CompletionResult,
                  keep_truncated: bool) -> CoreExample | Discard:
    if result.finish_reason == "length" and not keep_truncated:
        return Discard("truncated")
    output = result.text.strip()
    if not output:
        return Discard("empty_output")
    return CoreExample(candidate=candidate, output=output)


def generate_output(
    backend: Backend,
    candidate: StructuredCandidate,
    use_constraints: bool = True,
    decoding: DecodingParams | None = None,
    keep_truncated: bool = False,
) -> CoreExample | Discard:
    """Generate the output for one candidate with greedy decoding.

    Returns a Discard for empty outputs, and for truncated ones unless
    keep_truncated is set. Backend errors propagate.
    """
    params = decoding or DecodingParams.greedy(max_tokens=256)
    prompt = render_output_prompt(candidate, use_constraints=use_constraints)
    result = backend.complete(CompletionRequest(prompt=prompt, params=params))
    return _judge_output(candidate, result, keep_truncated)


@dataclass(frozen=True)
class GenerationSettings:
    """Knobs for one core-dataset run; defaults mirror the main configuration."""

    seed_sets: tuple[SeedSet, ...] = ()
    style: PromptStyle = PromptStyle.ENUMERATION
    target: int = 100
    input_decoding: DecodingParams | None = None  # default: nucleus p=0.99, style stops
    output_decoding: DecodingParams = field(default_factory=lambda: DecodingParams.greedy(256))
    constraints_in_input_gen: bool = True
    constraints_in_output_gen: bool = True
    keep_truncated_outputs: bool = False
    call_budget: int | None = None  # default: 10 * target sampling calls
    max_in_flight: int = 1

    def resolved_input_decoding(self) -> DecodingParams:
        if self.input_decoding is not None:
            return self.input_decoding
        return DecodingParams.nucleus(
            top_p=0.99, max_tokens=512,
            stop_sequences=meta_prompt(self.style).stop_sequences,
        )

    def resolved_budget(self) -> int:
        if self.call_budget is not None:
            return self.call_budget
        return max(10, self.target * 10)


@dataclass
class CoreRunResult:
    examples: list[CoreExample]
    report: FilterReport
    discards: dict[str, int]
    input_calls: int
    output_calls: int
    budget_exhausted: bool


class _CompletionStream:
    """Resolves (meta, request) items against a backend, preserving order.

    For parallel-capable backends up to `lookahead` calls are in flight at
    once; results are still consumed in issue order. Offline backends resolve
    lazily one call at a time, so nothing is issued past what the consumer
    actually needs. Per-call errors are captured and re-raised only if the
    consumer reaches them.
    """

    def __init__(self, backend: Backend, items: Iterator[tuple[object, CompletionRequest]],
                 lookahead: int) -> None:
        self._backend = backend
        self._items = items
        self._lookahead = max(1, lookahead)
        self.consumed = 0

    def _resolve(self, request: CompletionRequest) -> CompletionResult | Exception:
        try:
            return self._backend.complete(request)
        except BackendError as exc:
            return exc

    def __iter__(self) -> Iterator[tuple[object, CompletionResult | Exception]]:
        if self._backend.supports_parallel and self._lookahead > 1:
            yield from self._iter_parallel()
        else:
            for meta, request in self._items:
                self.consumed += 1
                yield meta, self._resolve(request)

    def _iter_parallel(self) -> Iterator[tuple[object, CompletionResult | Exception]]:
        from collections import deque

        pending: deque = deque()
        with ThreadPoolExecutor(max_workers=self._lookahead) as pool:
            try:
                while True:
                    while len(pending) < self._lookahead:
                        try:
                            meta, request = next(self._items)
                        except StopIteration:
                            break
                        pending.append((meta, pool.submit(self._resolve, request)))
                    if not pending:
                        return
                    meta, future = pending.popleft()
                    self.consumed += 1
                    yield meta, future.result()
            finally:
                for _, future in pending:
                    future.cancel()


def _unwrap(outcome: CompletionResult | Exception) -> CompletionResult:
    if isinstance(outcome, Exception):
        raise outcome
    return outcome


def generate_core_dataset(backend: Backend, settings: GenerationSettings) -> CoreRunResult:
    """Run the two-step pipeline until `target` examples or budget exhaustion.

    Seed sets are cycled round-robin; each sampling call yields one candidate
    which is parsed, filtered against the shared dedup index, and sent to the
    output phase. Examples are emitted in acceptance order. Partial results
    are returned with budget_exhausted set when the sampling budget runs out
    first.
    """
    seeds = tuple(settings.seed_sets)
    if not seeds:
        raise ValueError("at least one seed set is required")
    report = FilterReport()
    discards = {"empty_output": 0, "truncated": 0}
    if settings.target <= 0:
        return CoreRunResult([], report, discards, 0, 0, False)

    style = settings.style
    input_params = settings.resolved_input_decoding()
    completion_prefix = meta_prompt(style).completion_prefix
    seed_index = _SeedFieldIndex(seeds)
    dedup = DedupIndex()

    def input_items() -> Iterator[tuple[dict, CompletionRequest]]:
        for k in count():
            seed = seeds[k % len(seeds)]
            prompt = render_generation_prompt(
                seed, style, include_constraints=settings.constraints_in_input_gen
            )
            meta = {"seed_set_id": seed.id, "prompt_sha256": prompt_sha256(prompt)}
            yield meta, CompletionRequest(prompt=prompt, params=input_params)

    input_stream = _CompletionStream(
        backend, islice(input_items(), settings.resolved_budget()), settings.max_in_flight
    )

    def kept_candidates() -> Iterator[StructuredCandidate]:
        for meta, outcome in input_stream:
            result = _unwrap(outcome)
            raw = completion_prefix + result.text
            completion_hash = prompt_sha256(raw)
            try:
                candidate, _ = parse_structured_completion(raw)
            except MissingFieldError as exc:
                report.record_missing(exc.field_name, completion_hash)
                continue
            candidate = replace(
                candidate,
                provenance=Provenance(
                    seed_set_id=meta["seed_set_id"],
                    style=style.value,
                    prompt_sha256=meta["prompt_sha256"],
                    completion_sha256=completion_hash,
                ),
            )
            if _passes_filters(candidate, seed_index, dedup, report):
                yield candidate

    def output_items() -> Iterator[tuple[StructuredCandidate, CompletionRequest]]:
        for candidate in kept_candidates():
            prompt = render_output_prompt(
                candidate, use_constraints=settings.constraints_in_output_gen
            )
            yield candidate, CompletionRequest(prompt=prompt, params=settings.output_decoding)

    output_stream = _CompletionStream(backend, output_items(), settings.max_in_flight)

    examples: list[CoreExample] = []
    for candidate, outcome in output_stream:
        judged = _judge_output(candidate, _unwrap(outcome), settings.keep_truncated_outputs)
        if isinstance(judged, Discard):
            discards[judged.reason] += 1
            continue
        examples.append(judged)
        if len(examples) >= settings.target:
            break

    return CoreRunResult(
        examples=examples,
        report=report,
        discards=discards,
        input_calls=input_stream.consumed,
        output_calls=output_stream.consumed,
        budget_exhausted=len(examples) < settings.target,
    )


def generate_one_step(backend: Backend, settings: GenerationSettings) -> CoreRunResult:
    """Sample whole instruction-input-constraints-output records in one pass.

    Same filters and record schema as the two-step pipeline, but the output is
    sampled stochastically together with the task and there is no separate
    output phase. An absent or empty output field counts as a missing-field
    rejection.
    """
    seeds = tuple(settings.seed_sets)
    if not seeds:
        raise ValueError("at least one seed set is required")
    report = FilterReport()
    discards = {"empty_output": 0, "truncated": 0}
    if settings.target <= 0:
        return CoreRunResult([], report, discards, 0, 0, False)

    style = settings.style
    input_params = settings.resolved_input_decoding()
    completion_prefix = meta_prompt(style).completion_prefix
    seed_index = _SeedFieldIndex(seeds)
    dedup = DedupIndex()

    def items() -> Iterator[tuple[dict, CompletionRequest]]:
        for k in count():
            seed = seeds[k % len(seeds)]
            prompt = render_one_step_prompt(seed, style)
            meta = {"seed_set_id": seed.id, "prompt_sha256": prompt_sha256(prompt)}
            yield meta, CompletionRequest(prompt=prompt, params=input_params)

    stream = _CompletionStream(
        backend, islice(items(), settings.resolved_budget()), settings.max_in_flight
    )

    examples: list[CoreExample] = []
    for meta, outcome in stream:
        result = _unwrap(outcome)
        raw = completion_prefix + result.text
        completion_hash = prompt_sha256(raw)
        try:
            candidate, output = parse_structured_completion(raw, expect_output=True)
        except MissingFieldError as exc:
            report.record_missing(exc.field_name, completion_hash)
            continue
        candidate = replace(
            candidate,
            provenance=Provenance(
                seed_set_id=meta["seed_set_id"],
                style=style.value,
                prompt_sha256=meta["prompt_sha256"],
                completion_sha256=completion_hash,
            ),
        )
        if not _passes_filters(candidate, seed_index, dedup, report):
            continue
        examples.append(CoreExample(candidate=candidate, output=output or ""))
        if len(examples) >= settings.target:
            break

    return CoreRunResult(
        examples=examples,
        report=report,
        discards=discards,
        input_calls=stream.consumed,
        output_calls=0,
        budget_exhausted=len(examples) < settings.target,
    )


def core_record_dict(example: CoreExample, record_id: str) -> dict:
    """Stable-key-order JSON record for one core example."""
    cand = example.candidate
    record = {
        "id": record_id,
        "instruction": cand.instruction,
        "input": cand.input,
        "constraints": cand.constraints,
        "output": example.output,
    }
    if cand.provenance is not None:
        record["provenance"] = cand.provenance.to_dict()
    return record
