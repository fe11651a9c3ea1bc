"""Shared test helpers: random demonstration generator and fixtures dir."""

from __future__ import annotations

import random
from pathlib import Path

import pytest

from instructgen.prompting import Demonstration

REPO_ROOT = Path(__file__).resolve().parent.parent
DEMO_FIXTURE_DIR = REPO_ROOT / "fixtures" / "demo"
GOLDEN_DIR = Path(__file__).resolve().parent / "golden"

WORDS = (
    "alpha beta gamma delta epsilon zeta river stone cloud maple"
    " seven quartz violet ember crisp lantern meadow copper"
    " café naïve Zürich señor 数据 示例 Σigma ω"
).split()


def random_text(rng: random.Random, max_words: int = 12, multiline: bool = False) -> str:
    """Trimmed non-empty text whose lines never look like field labels."""
    n = rng.randint(1, max_words)
    words = [rng.choice(WORDS) for _ in range(n)]
    if multiline and n > 2 and rng.random() < 0.5:
        pieces = []
        for k, word in enumerate(words):
            pieces.append(word)
            if 0 < k < n - 1 and rng.random() < 0.2:
                pieces.append("\n\n" if rng.random() < 0.3 else "\n")
            else:
                pieces.append(" ")
        text = "".join(pieces).strip()
    else:
        text = " ".join(words)
    return text


def random_demo(rng: random.Random, with_output: bool = False) -> Demonstration:
    if rng.random() < 0.4:
        constraints = "None."
    else:
        constraints = "The output should be " + random_text(rng, max_words=6) + "."
    return Demonstration(
        instruction=random_text(rng, multiline=True),
        input=random_text(rng, multiline=True),
        constraints=constraints,
        output=random_text(rng) if with_output else None,
    )


@pytest.fixture
def rng() -> random.Random:
    return random.Random(20240611)
