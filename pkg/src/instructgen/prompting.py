"""Prompt construction for the data generation pipeline.

Everything here is a pure function from typed values to prompt text:
generation prompts in three meta-prompt styles, output prompts, rephrasing
prompts, and the one-pass variant that samples outputs together with the
task. The meta-prompt wording lives in data files so ablations can swap it
without touching code.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from functools import lru_cache
from importlib import resources

INPUT_PLACEHOLDER = "{INPUT}"
NO_CONSTRAINTS = "None."

INSTRUCTION_LABEL = "Instruction:"
INPUT_LABEL = "Input:"
CONSTRAINTS_LABEL = "Constraints:"
OUTPUT_LABEL = "Output:"
ALTERNATIVE_LABEL = "Alternative formulation:"


class PromptStyle(str, Enum):
    MINIMAL = "minimal"
    ENUMERATION = "enumeration"
    VERBOSE = "verbose"

    @classmethod
    def default(cls) -> "PromptStyle":
        return cls.ENUMERATION


def normalize_constraints(text: str) -> str:
    """Canonicalize the no-constraint sentinel ("None", "none", "None.")."""
    stripped = text.strip()
    if stripped.lower() in ("none", "none."):
        return NO_CONSTRAINTS
    return stripped


@dataclass(frozen=True)
class Demonstration:
    """One structured example: instruction, input, constraints, optional output.

    The output is only needed for seed bookkeeping and one-pass prompts; it
    never appears in the standard generation prompt.
    """

    instruction: str
    input: str
    constraints: str = NO_CONSTRAINTS
    output: str | None = None

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("demonstration instruction must be non-empty")
        if not self.input.strip():
            raise ValueError("demonstration input must be non-empty")
        if not self.constraints.strip():
            raise ValueError(
                "demonstration constraints must be non-empty (use the "
                f"{NO_CONSTRAINTS!r} sentinel)"
            )


@dataclass(frozen=True)
class SeedSet:
    """An ordered triple of demonstrations used as one prompt's in-context examples."""

    id: int
    demos: tuple[Demonstration, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "demos", tuple(self.demos))
        if len(self.demos) != 3:
            raise ValueError(f"seed set {self.id} must have exactly 3 demos, got {len(self.demos)}")


@dataclass(frozen=True)
class RephraseDemo:
    """A task plus one free-form reformulation containing the input placeholder."""

    instruction: str
    alternative: str

    def __post_init__(self) -> None:
        if not self.instruction.strip():
            raise ValueError("rephrase demo instruction must be non-empty")
        if INPUT_PLACEHOLDER not in self.alternative:
            raise ValueError(f"rephrase demo alternative must contain {INPUT_PLACEHOLDER!r}")


@dataclass(frozen=True)
class MetaPrompt:
    """Style-specific wrapper text around the in-context demonstrations."""

    header: str
    banner: str
    cue: str
    cue_ends_with_newline: bool
    completion_prefix: str
    stop_sequences: tuple[str, ...] = field(default_factory=tuple)


@lru_cache(maxsize=None)
def _load_json(name: str):
    text = resources.files("instructgen").joinpath(f"data/{name}").read_text("utf-8")
    return json.loads(text)


@lru_cache(maxsize=None)
def meta_prompt(style: PromptStyle) -> MetaPrompt:
    raw = _load_json("meta_prompts.json")
    try:
        entry = raw[PromptStyle(style).value]
    except KeyError:
        raise ValueError(f"no meta-prompt defined for style {style!r}") from None
    return MetaPrompt(
        header=entry["header"],
        banner=entry["banner"],
        cue=entry["cue"],
        cue_ends_with_newline=entry["cue_ends_with_newline"],
        completion_prefix=entry["completion_prefix"],
        stop_sequences=tuple(entry["stop_sequences"]),
    )


def builtin_seed_sets() -> list[SeedSet]:
    """The five shipped seed sets (15 demonstrations total), validated on load."""
    raw = _load_json("seed_sets.json")
    sets = []
    for entry in raw:
        demos = tuple(
            Demonstration(
                instruction=d["instruction"],
                input=d["input"],
                constraints=normalize_constraints(d["constraints"]),
                output=d.get("output"),
            )
            for d in entry["demos"]
        )
        sets.append(SeedSet(id=entry["id"], demos=demos))
    if [s.id for s in sets] != [1, 2, 3, 4, 5]:
        raise ValueError("seed set data must contain ids 1..5 in order")
    return sets


def builtin_rephrase_demos() -> list[RephraseDemo]:
    """The two shipped rephrasing demonstrations."""
    raw = _load_json("rephrase_demos.json")
    return [RephraseDemo(instruction=d["instruction"], alternative=d["alternative"]) for d in raw]


def render_demo_block(
    demo: Demonstration,
    *,
    include_constraints: bool = True,
    include_output: bool = False,
) -> str:
    """Render one labeled demonstration block (no banner)."""
    lines = [f"{INSTRUCTION_LABEL} {demo.instruction}", f"{INPUT_LABEL} {demo.input}"]
    if include_constraints:
        lines.append(f"{CONSTRAINTS_LABEL} {demo.constraints}")
    if include_output:
        if demo.output is None or not demo.output.strip():
            raise ValueError("demonstration has no output to render")
        lines.append(f"{OUTPUT_LABEL} {demo.output}")
    return "\n".join(lines)


def _assemble(style: PromptStyle, blocks: list[str]) -> str:
    mp = meta_prompt(style)
    parts = []
    if mp.header:
        parts.append(mp.header)
    for i, block in enumerate(blocks, start=1):
        if mp.banner:
            parts.append(mp.banner.format(k=i) + "\n" + block)
        else:
            parts.append(block)
    cue = mp.cue.format(k=len(blocks) + 1)
    parts.append(cue)
    prompt = "\n\n".join(parts)
    if mp.cue_ends_with_newline:
        prompt += "\n"
    return prompt


def render_generation_prompt(
    seed: SeedSet,
    style: PromptStyle = PromptStyle.ENUMERATION,
    include_constraints: bool = True,
) -> str:
    """Render the few-shot prompt that elicits a fourth structured example.

    Byte-deterministic: blocks are newline-joined and separated by exactly
    one blank line, with the style's header/banners/trailing cue around them.
    """
    blocks = [
        render_demo_block(d, include_constraints=include_constraints) for d in seed.demos
    ]
    return _assemble(style, blocks)


def render_one_step_prompt(seed: SeedSet, style: PromptStyle = PromptStyle.ENUMERATION) -> str:
    """Like the generation prompt but with an output line in every block.

    Used by the one-pass ablation that samples whole records, so every seed
    demonstration must carry an output.
    """
    for i, d in enumerate(seed.demos, start=1):
        if d.output is None or not d.output.strip():
            raise ValueError(f"seed set {seed.id} demo {i} has no output; one-step prompts need one")
    blocks = [
        render_demo_block(d, include_constraints=True, include_output=True) for d in seed.demos
    ]
    return _assemble(style, blocks)


def render_output_prompt(candidate, use_constraints: bool = True) -> str:
    """Render the deterministic-phase prompt that elicits an output.

    Accepts anything with instruction/input/constraints attributes. The
    constraints line is included only when requested and not the "None."
    sentinel; the prompt always ends with the bare output label.
    """
    lines = [
        f"{INSTRUCTION_LABEL} {candidate.instruction}",
        f"{INPUT_LABEL} {candidate.input}",
    ]
    if use_constraints and normalize_constraints(candidate.constraints) != NO_CONSTRAINTS:
        lines.append(f"{CONSTRAINTS_LABEL} {candidate.constraints}")
    lines.append(OUTPUT_LABEL)
    return "\n".join(lines)


def render_rephrase_prompt(demos: list[RephraseDemo], instruction: str) -> str:
    """Render the prompt that elicits an alternative task formulation.

    Demo blocks show instruction / placeholder input / alternative; the final
    block holds the target instruction and ends with the bare cue. Inputs,
    constraints and outputs never appear, only the placeholder does.
    """
    if not demos:
        raise ValueError("rephrase prompt needs at least one demonstration")
    if not instruction.strip():
        raise ValueError("rephrase target instruction must be non-empty")
    blocks = []
    for i, demo in enumerate(demos, start=1):
        blocks.append(
            f"Example {i}\n"
            f"{INSTRUCTION_LABEL} {demo.instruction}\n"
            f"{INPUT_LABEL} {INPUT_PLACEHOLDER}\n"
            f"{ALTERNATIVE_LABEL} {demo.alternative}"
        )
    blocks.append(
        f"Example {len(demos) + 1}\n"
        f"{INSTRUCTION_LABEL} {instruction}\n"
        f"{INPUT_LABEL} {INPUT_PLACEHOLDER}\n"
        f"{ALTERNATIVE_LABEL}"
    )
    return "\n\n".join(blocks)
