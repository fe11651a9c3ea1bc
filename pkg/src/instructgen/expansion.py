"""Template expansion: paraphrase structured tasks and cross-reference.

For each distinct instruction we sample free-form reformulations containing
an input placeholder, validate them (placeholder present, not a copy of the
original, not a duplicate of an accepted one), and retry up to a fixed
number of failed attempts. Accepted templates are then cross-referenced
with every input observed for that instruction, so the full dataset size is
exactly sum over instructions of (1 + templates) * inputs.
"""

from __future__ import annotations

import unicodedata
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

from .backend import Backend, CompletionRequest, DecodingParams
from .prompting import (
    INPUT_PLACEHOLDER,
    RephraseDemo,
    builtin_rephrase_demos,
    render_rephrase_prompt,
)
from .structgen import CoreExample

REPHRASE_STOP_SEQUENCES = ("\nExample ",)

REJECT_NO_PLACEHOLDER = "no_placeholder"
REJECT_COPY_OF_ORIGINAL = "copy_of_original"
REJECT_DUPLICATE = "duplicate_formulation"


class ParaphraseRejected(ValueError):
    """A sampled reformulation failed validation."""

    def __init__(self, reason: str, detail: str = "") -> None:
        super().__init__(f"paraphrase rejected: {reason}" + (f" ({detail})" if detail else ""))
        self.reason = reason


def _norm(text: str) -> str:
    return unicodedata.normalize("NFC", text.strip())


@dataclass(frozen=True)
class ParaphraseTemplate:
    """A validated reformulation with its input placeholder still in place."""

    template: str
    source_instruction: str
    attempt_index: int = 0

    def __post_init__(self) -> None:
        if INPUT_PLACEHOLDER not in self.template:
            raise ValueError(f"template must contain {INPUT_PLACEHOLDER!r}")
        if _norm(self.template) == _norm(self.source_instruction):
            raise ValueError("template must differ from its source instruction")


@dataclass(frozen=True)
class ExpandedRecord:
    """One record of the full dataset, either core-format or paraphrase-format."""

    formulation_kind: str  # "core" or "paraphrase"
    task_text: str         # instruction, or template with placeholder
    input: str
    rendered_task: str
    output: str
    core_example_id: str
    template_attempt: int | None = None


def validate_paraphrase(
    candidate: str,
    original: str,
    already_accepted: Sequence[str] = (),
    attempt_index: int = 0,
) -> ParaphraseTemplate:
    """Accept a candidate reformulation or raise ParaphraseRejected.

    A candidate passes when it contains the input placeholder, differs from
    the original instruction, and differs from every already-accepted
    formulation (comparisons after trim and NFC normalization).
    """
    candidate = candidate.strip()
    if INPUT_PLACEHOLDER not in candidate:
        raise ParaphraseRejected(REJECT_NO_PLACEHOLDER)
    if _norm(candidate) == _norm(original):
        raise ParaphraseRejected(REJECT_COPY_OF_ORIGINAL)
    normalized_accepted = {_norm(a) for a in already_accepted}
    if _norm(candidate) in normalized_accepted:
        raise ParaphraseRejected(REJECT_DUPLICATE)
    return ParaphraseTemplate(
        template=candidate, source_instruction=original, attempt_index=attempt_index
    )


def default_rephrase_decoding() -> DecodingParams:
    return DecodingParams.nucleus(
        top_p=0.99, max_tokens=256, stop_sequences=REPHRASE_STOP_SEQUENCES
    )


def generate_paraphrases(
    backend: Backend,
    instruction: str,
    demos: Sequence[RephraseDemo] | None = None,
    want: int = 2,
    max_attempts: int = 5,
    decoding: DecodingParams | None = None,
) -> list[ParaphraseTemplate]:
    """Collect up to `want` validated reformulations for one instruction.

    Sampling stops once `want` templates are accepted or after `max_attempts`
    failed validations (counted over the whole session, not consecutively),
    so at most want + max_attempts backend calls are issued. May return fewer
    than `want` templates, including none.
    """
    demos = list(demos) if demos is not None else builtin_rephrase_demos()
    params = decoding or default_rephrase_decoding()
    prompt = render_rephrase_prompt(demos, instruction)
    accepted: list[ParaphraseTemplate] = []
    failures = 0
    attempt = 0
    while len(accepted) < want and failures < max_attempts:
        attempt += 1
        result = backend.complete(CompletionRequest(prompt=prompt, params=params))
        try:
            template = validate_paraphrase(
                result.text,
                instruction,
                [t.template for t in accepted],
                attempt_index=attempt,
            )
        except ParaphraseRejected:
            failures += 1
            continue
        accepted.append(template)
    return accepted


def instantiate(template: ParaphraseTemplate, input_text: str) -> str:
    """Replace every placeholder occurrence with the input text, single pass.

    The input is inserted verbatim; placeholders inside the input itself are
    not substituted again.
    """
    return template.template.replace(INPUT_PLACEHOLDER, input_text)


def render_structured_task(instruction: str, input_text: str) -> str:
    """The labeled task layout used for core-format training records."""
    return f"Instruction: {instruction}\nInput: {input_text}"


def core_record_id(index: int) -> str:
    return f"core-{index + 1:05d}"


def full_record_id(index: int) -> str:
    return f"ex-{index + 1:06d}"


def expand_dataset(
    core: Sequence[CoreExample],
    templates: Mapping[str, Sequence[ParaphraseTemplate]],
    ids: Sequence[str] | None = None,
) -> list[ExpandedRecord]:
    """Cross-reference templates with every input of their instruction.

    Groups core examples by exact instruction text (first-appearance order).
    Each (instruction, input, output) yields one core-format record plus one
    paraphrase record per template of that instruction, all carrying the
    source example's output unchanged. Total record count is exactly
    sum((1 + len(templates_i)) * inputs_i).
    """
    if ids is None:
        ids = [core_record_id(i) for i in range(len(core))]
    if len(ids) != len(core):
        raise ValueError("ids must align one-to-one with core examples")

    groups: dict[str, list[tuple[str, CoreExample]]] = {}
    for record_id, example in zip(ids, core):
        groups.setdefault(example.candidate.instruction, []).append((record_id, example))

    records: list[ExpandedRecord] = []
    for instruction, members in groups.items():
        instruction_templates = list(templates.get(instruction, ()))
        for record_id, example in members:
            input_text = example.candidate.input
            records.append(
                ExpandedRecord(
                    formulation_kind="core",
                    task_text=instruction,
                    input=input_text,
                    rendered_task=render_structured_task(instruction, input_text),
                    output=example.output,
                    core_example_id=record_id,
                )
            )
            for template in instruction_templates:
                records.append(
                    ExpandedRecord(
                        formulation_kind="paraphrase",
                        task_text=template.template,
                        input=input_text,
                        rendered_task=instantiate(template, input_text),
                        output=example.output,
                        core_example_id=record_id,
                        template_attempt=template.attempt_index,
                    )
                )
    return records


def expansion_record_count(groups: Iterable[tuple[int, int]]) -> int:
    """Record-count formula: sum of (1 + templates) * inputs over groups."""
    return sum((1 + t) * n for n, t in groups)


def expanded_record_dict(record: ExpandedRecord, record_id: str) -> dict:
    """Stable-key-order JSON record for one full-dataset entry."""
    return {
        "id": record_id,
        "formulation_kind": record.formulation_kind,
        "task_text": record.task_text,
        "input": record.input,
        "rendered_task": record.rendered_task,
        "output": record.output,
        "core_example_id": record.core_example_id,
        "template_attempt": record.template_attempt,
    }
