"""Dataset measurement: pairwise-similarity diversity, stats, and cost.

The similarity scorer is pluggable: the built-in baseline is token-overlap
F1, and `ExternalScorer` adapts any line-oriented child process (for
embedding-based scorers) to the same interface. Pair sampling is seeded and
bitwise reproducible.
"""

from __future__ import annotations

import random
import subprocess
from collections import Counter
from dataclasses import dataclass, field
from decimal import Decimal
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

HISTOGRAM_BINS = 50

LENGTH_BIN_EDGES = (0, 32, 64, 128, 256, 512, 1024, 2048, 4096)


def token_overlap_score(a: str, b: str) -> float:
    """F1 overlap of whitespace-token multisets, symmetric, in [0, 1].

    Two empty token lists count as identical (score 1.0).
    """
    tokens_a = Counter(a.split())
    tokens_b = Counter(b.split())
    total = sum(tokens_a.values()) + sum(tokens_b.values())
    if total == 0:
        return 1.0
    common = sum((tokens_a & tokens_b).values())
    return 2.0 * common / total


@dataclass(frozen=True)
class SimilarityDistribution:
    """Scores for sampled record pairs plus a fixed-bin histogram and summary."""

    pair_count: int
    scores: tuple[float, ...]
    histogram: tuple[int, ...]  # HISTOGRAM_BINS uniform bins over [0, 1]
    summary: Mapping[str, float]

    @classmethod
    def from_scores(cls, scores: Sequence[float]) -> "SimilarityDistribution":
        arr = np.asarray(scores, dtype=float)
        if arr.size and (arr.min() < 0.0 or arr.max() > 1.0):
            raise ValueError("similarity scores must lie in [0, 1]")
        counts, _ = np.histogram(arr, bins=HISTOGRAM_BINS, range=(0.0, 1.0))
        if arr.size:
            summary = {
                "mean": float(arr.mean()),
                "median": float(np.median(arr)),
                "p10": float(np.percentile(arr, 10)),
                "p90": float(np.percentile(arr, 90)),
            }
        else:
            summary = {"mean": 0.0, "median": 0.0, "p10": 0.0, "p90": 0.0}
        return cls(
            pair_count=int(arr.size),
            scores=tuple(float(s) for s in arr),
            histogram=tuple(int(c) for c in counts),
            summary=summary,
        )

    def histogram_rows(self) -> list[tuple[float, float, int]]:
        """(bin_left, bin_right, count) rows for CSV export."""
        width = 1.0 / HISTOGRAM_BINS
        return [
            (round(i * width, 10), round((i + 1) * width, 10), count)
            for i, count in enumerate(self.histogram)
        ]

    def to_dict(self) -> dict:
        return {
            "pair_count": self.pair_count,
            "summary": dict(self.summary),
            "histogram_bins": HISTOGRAM_BINS,
            "histogram": list(self.histogram),
            "scores": list(self.scores),
        }


def _record_input(record) -> str:
    if isinstance(record, str):
        return record
    if isinstance(record, Mapping):
        value = record.get("input")
        if isinstance(value, str):
            return value
    raise ValueError(f"record has no usable input field: {record!r:.80}")


def sample_pair_similarities(
    records: Sequence,
    n_pairs: int | None = 10_000,
    scorer: Callable[[str, str], float] = token_overlap_score,
    rng_seed: int = 0,
) -> SimilarityDistribution:
    """Score the inputs of random record pairs (or of all pairs).

    Draws `n_pairs` uniform pairs of distinct records with replacement across
    pairs, seeded and reproducible; `n_pairs=None` enumerates every unordered
    pair exactly once. Records may be raw strings or mappings with an "input"
    field. A scorer exposing `score_pairs` is called once with the whole
    batch; result order always follows sampling order.
    """
    texts = [_record_input(r) for r in records]
    if len(texts) < 2:
        raise ValueError("need at least 2 records to form pairs")
    if n_pairs is None:
        pairs = [(i, j) for i in range(len(texts)) for j in range(i + 1, len(texts))]
    else:
        rng = random.Random(rng_seed)
        pairs = []
        for _ in range(n_pairs):
            i = rng.randrange(len(texts))
            j = rng.randrange(len(texts) - 1)
            if j >= i:
                j += 1
            pairs.append((i, j))
    pair_texts = [(texts[i], texts[j]) for i, j in pairs]
    score_pairs = getattr(scorer, "score_pairs", None)
    if callable(score_pairs):
        scores = list(score_pairs(pair_texts))
        if len(scores) != len(pair_texts):
            raise ValueError("scorer returned a different number of scores than pairs")
    else:
        scores = [scorer(a, b) for a, b in pair_texts]
    return SimilarityDistribution.from_scores(scores)


class ExternalScorer:
    """Adapter for a child-process similarity scorer.

    Protocol: one tab-separated text pair per line on standard input, one
    decimal score per line on standard output. Backslashes, tabs and
    newlines inside the texts are escaped as \\\\, \\t and \\n before
    writing, so the receiving process must unescape them.
    """

    def __init__(self, command: Sequence[str]) -> None:
        if not command:
            raise ValueError("external scorer command must be non-empty")
        self.command = list(command)

    @staticmethod
    def escape(text: str) -> str:
        return text.replace("\\", "\\\\").replace("\t", "\\t").replace("\n", "\\n")

    def score_pairs(self, pairs: Sequence[tuple[str, str]]) -> list[float]:
        if not pairs:
            return []
        payload = "".join(
            f"{self.escape(a)}\t{self.escape(b)}\n" for a, b in pairs
        )
        proc = subprocess.run(
            self.command, input=payload, capture_output=True, text=True
        )
        if proc.returncode != 0:
            raise RuntimeError(
                f"external scorer exited with {proc.returncode}: {proc.stderr[:500]}"
            )
        lines = [line for line in proc.stdout.splitlines() if line.strip()]
        if len(lines) != len(pairs):
            raise ValueError(
                f"external scorer returned {len(lines)} scores for {len(pairs)} pairs"
            )
        scores = [float(line) for line in lines]
        for s in scores:
            if not (0.0 <= s <= 1.0):
                raise ValueError(f"external scorer produced out-of-range score {s}")
        return scores

    def __call__(self, a: str, b: str) -> float:
        return self.score_pairs([(a, b)])[0]


@dataclass(frozen=True)
class CostModel:
    """Per-example generation rates and the human-annotation reference rate."""

    per_core_example: Decimal = Decimal("0.02")
    per_expanded_example: Decimal = Decimal("0.01")
    per_human_example: Decimal = Decimal("0.50")

    def __post_init__(self) -> None:
        for name in ("per_core_example", "per_expanded_example", "per_human_example"):
            value = getattr(self, name)
            if not isinstance(value, Decimal):
                object.__setattr__(self, name, Decimal(str(value)))
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")


@dataclass(frozen=True)
class CostReport:
    core_count: int
    expanded_count: int
    generated_cost: Decimal
    human_equivalent_cost: Decimal
    ratio: float

    def to_dict(self) -> dict:
        return {
            "core_count": self.core_count,
            "expanded_count": self.expanded_count,
            "generated_cost": float(self.generated_cost),
            "human_equivalent_cost": float(self.human_equivalent_cost),
            "ratio": self.ratio,
        }


def estimate_cost(core_count: int, expanded_count: int,
                  model: CostModel | None = None) -> CostReport:
    """Generation cost versus the human-annotation equivalent, exact arithmetic."""
    if core_count < 0 or expanded_count < 0:
        raise ValueError("counts must be non-negative")
    model = model or CostModel()
    generated = core_count * model.per_core_example + expanded_count * model.per_expanded_example
    human = (core_count + expanded_count) * model.per_human_example
    if generated > 0:
        ratio = float(human / generated)
    else:
        ratio = float("inf") if human > 0 else 0.0
    return CostReport(
        core_count=core_count,
        expanded_count=expanded_count,
        generated_cost=generated,
        human_equivalent_cost=human,
        ratio=ratio,
    )


def _length_histogram(lengths: Sequence[int]) -> dict[str, int]:
    edges = LENGTH_BIN_EDGES
    labels = [f"{edges[i]}-{edges[i + 1] - 1}" for i in range(len(edges) - 1)] + [f"{edges[-1]}+"]
    counts = [0] * len(labels)
    for n in lengths:
        for i in range(len(edges) - 1):
            if n < edges[i + 1]:
                counts[i] += 1
                break
        else:
            counts[-1] += 1
    return dict(zip(labels, counts))


def dataset_stats(records: Iterable) -> dict:
    """Exact descriptive counts over core or full dataset records.

    Malformed entries (non-mappings or rows without any known text field)
    are counted and skipped, never fatal.
    """
    total = 0
    malformed = 0
    by_kind: Counter = Counter()
    constraints_none = 0
    constraints_present = 0
    field_lengths: dict[str, list[int]] = {}
    core_id_instruction: dict[str, str] = {}
    group_inputs: Counter = Counter()
    paraphrases_by_instruction: dict[str, set[str]] = {}
    orphan_paraphrases: list[tuple[str, str]] = []

    text_fields = ("instruction", "input", "constraints", "output", "task_text", "rendered_task")

    for record in records:
        total += 1
        if not isinstance(record, Mapping):
            malformed += 1
            continue
        known = [f for f in text_fields if isinstance(record.get(f), str)]
        if not known:
            malformed += 1
            continue
        kind = record.get("formulation_kind", "core")
        by_kind[kind] += 1
        for f in known:
            field_lengths.setdefault(f, []).append(len(record[f]))
        constraints = record.get("constraints")
        if isinstance(constraints, str):
            if constraints.strip().lower() in ("none", "none."):
                constraints_none += 1
            else:
                constraints_present += 1
        if kind == "core":
            instruction = record.get("instruction") or record.get("task_text")
            if isinstance(instruction, str):
                group_inputs[instruction] += 1
                record_id = record.get("core_example_id") or record.get("id")
                if isinstance(record_id, str):
                    core_id_instruction[record_id] = instruction
        elif kind == "paraphrase":
            template = record.get("task_text")
            ref = record.get("core_example_id")
            if isinstance(template, str) and isinstance(ref, str):
                orphan_paraphrases.append((ref, template))

    for ref, template in orphan_paraphrases:
        instruction = core_id_instruction.get(ref)
        if instruction is not None:
            paraphrases_by_instruction.setdefault(instruction, set()).add(template)

    group_sizes = sorted(group_inputs.values())
    n_groups = len(group_sizes)
    with_two_plus = sum(
        1 for instr in group_inputs if len(paraphrases_by_instruction.get(instr, ())) >= 2
    )
    constrained_total = constraints_none + constraints_present

    return {
        "total_records": total,
        "malformed_records": malformed,
        "records_by_kind": dict(sorted(by_kind.items())),
        "instruction_groups": {
            "count": n_groups,
            "min_inputs": group_sizes[0] if group_sizes else 0,
            "max_inputs": group_sizes[-1] if group_sizes else 0,
            "mean_inputs": (sum(group_sizes) / n_groups) if n_groups else 0.0,
        },
        "constraints": {
            "no_constraints": constraints_none,
            "with_constraints": constraints_present,
            "no_constraint_prevalence": (
                constraints_none / constrained_total if constrained_total else None
            ),
        },
        "field_lengths": {
            f: {
                "count": len(lengths),
                "min": min(lengths),
                "max": max(lengths),
                "mean": sum(lengths) / len(lengths),
                "histogram": _length_histogram(lengths),
            }
            for f, lengths in sorted(field_lengths.items())
        },
        "paraphrase": {
            "instructions": n_groups,
            "with_two_or_more_templates": with_two_plus,
            "two_template_rate": (with_two_plus / n_groups) if n_groups else None,
        },
    }
