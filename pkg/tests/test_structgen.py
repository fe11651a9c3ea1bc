import random

import pytest

from instructgen.backend import ReplayBackend, RecordingBackend, ScriptedBackend
from instructgen.prompting import PromptStyle, builtin_seed_sets
from instructgen.structgen import (
    CoreExample,
    DedupIndex,
    Discard,
    FilterReport,
    GenerationSettings,
    MissingFieldError,
    StructuredCandidate,
    core_record_dict,
    filter_candidates,
    generate_core_dataset,
    generate_one_step,
    generate_output,
    parse_structured_completion,
)

from conftest import random_text

SEEDS = tuple(builtin_seed_sets())


def candidate(instruction="Do the task.", input_="some input", constraints="None."):
    return StructuredCandidate(instruction=instruction, input=input_, constraints=constraints)


# --------------------------------------------------------------------- parsing


def test_parse_minimal_block():
    cand, output = parse_structured_completion("Instruction: A\nInput: B\nConstraints: None.")
    assert (cand.instruction, cand.input, cand.constraints) == ("A", "B", "None.")
    assert output is None


def test_parse_published_sample_generation():
    text = (
        "Instruction: In this task, you will be given a profile of someone and your job is "
        "to generate a set of interesting questions that can lead to a conversation with the "
        "person.\n"
        "Input: Yvonne has been playing the violin since she was four years old. She loves "
        "all kinds of music, but her favorite composer is Bach.\n"
        "Constraints: None."
    )
    cand, _ = parse_structured_completion(text)
    assert cand.instruction.startswith("In this task, you will be given a profile of someone")
    assert cand.input.startswith("Yvonne has been playing the violin")
    assert cand.constraints == "None."


def test_parse_missing_input_field():
    with pytest.raises(MissingFieldError) as exc:
        parse_structured_completion("Instruction: A\nConstraints: None.")
    assert exc.value.field_name == "input"


def test_parse_empty_value_counts_as_missing():
    with pytest.raises(MissingFieldError) as exc:
        parse_structured_completion("Instruction: A\nInput:   \nConstraints: None.")
    assert exc.value.field_name == "input"


def test_parse_tolerates_banner_and_whitespace():
    text = "\n\nExample 4\nInstruction: A\nInput: B\nConstraints: none\n"
    cand, _ = parse_structured_completion(text)
    assert cand.instruction == "A"
    assert cand.constraints == "None."  # sentinel canonicalized


def test_parse_discards_trailing_text_after_block():
    text = (
        "Instruction: A\nInput: B\nConstraints: None.\n\n"
        "Example 5\nInstruction: another one\nInput: x\nConstraints: None."
    )
    cand, _ = parse_structured_completion(text)
    assert cand.instruction == "A" and cand.input == "B"


def test_parse_stops_last_field_at_new_block_without_blank_line():
    text = "Instruction: A\nInput: B\nConstraints: None.\nInstruction: next block"
    cand, _ = parse_structured_completion(text)
    assert cand.constraints == "None."


def test_parse_multiline_input_spans_blank_lines():
    text = "Instruction: Summarize the passage.\nInput: para one\n\npara two\nConstraints: None."
    cand, _ = parse_structured_completion(text)
    assert cand.input == "para one\n\npara two"


def test_parse_with_output_field():
    text = "Instruction: A\nInput: B\nConstraints: None.\nOutput: C"
    cand, output = parse_structured_completion(text, expect_output=True)
    assert output == "C"


def test_parse_expect_output_missing():
    with pytest.raises(MissingFieldError) as exc:
        parse_structured_completion(
            "Instruction: A\nInput: B\nConstraints: None.", expect_output=True
        )
    assert exc.value.field_name == "output"


# -------------------------------------------------------------------- filtering


def test_seed_copy_rejected():
    # instruction identical to a prompt demonstration (set 1, second demo)
    copy = candidate(instruction=SEEDS[0].demos[1].instruction)
    kept, report = filter_candidates([copy], SEEDS)
    assert kept == []
    assert report.counts == {"missing_fields": 0, "seed_copy": 1, "duplicate": 0, "kept": 0}


def test_seed_copy_matches_input_field_too():
    copy = candidate(input_=SEEDS[2].demos[0].input)
    kept, report = filter_candidates([copy], SEEDS)
    assert report.counts["seed_copy"] == 1


def test_seed_copy_matches_after_whitespace_trim():
    copy = candidate(instruction="  " + SEEDS[0].demos[1].instruction + " \n")
    kept, report = filter_candidates([copy], SEEDS)
    assert report.counts["seed_copy"] == 1


def test_duplicate_keeps_first_occurrence():
    first = candidate(constraints="None.")
    second = candidate(constraints="The output should be 'x'.")  # same instruction+input
    kept, report = filter_candidates([first, second], SEEDS)
    assert kept == [first]
    assert report.counts["duplicate"] == 1


def test_distinct_candidates_all_kept():
    cands = [candidate(input_=f"input {i}") for i in range(3)]
    kept, report = filter_candidates(cands, SEEDS)
    assert len(kept) == 3
    assert report.counts["kept"] == 3


def test_filtering_is_idempotent():
    stream = [candidate(input_=f"i{n % 4}") for n in range(10)]
    kept1, report1 = filter_candidates(stream, SEEDS)
    kept2, report2 = filter_candidates(kept1, SEEDS)
    assert kept2 == kept1
    assert report2.counts == {
        "missing_fields": 0, "seed_copy": 0, "duplicate": 0, "kept": len(kept1),
    }


def test_permuting_duplicates_changes_survivor_not_count(rng: random.Random):
    base = [candidate(input_=f"i{n}", constraints=f"The output should be {n}.") for n in range(6)]
    dupes = [candidate(input_="i3", constraints="None."), candidate(input_="i5", constraints="None.")]
    stream = base + dupes
    kept_counts = set()
    for _ in range(10):
        rng.shuffle(stream)
        kept, report = filter_candidates(stream, SEEDS)
        kept_counts.add(len(kept))
        assert report.counts["duplicate"] == 2
    assert kept_counts == {6}


def test_report_sum_rule_on_random_stream(rng: random.Random):
    stream = []
    for _ in range(500):
        roll = rng.random()
        if roll < 0.15:
            stream.append(candidate(instruction=SEEDS[rng.randrange(5)].demos[rng.randrange(3)].instruction))
        elif roll < 0.5:
            stream.append(candidate(input_=f"dup-{rng.randrange(20)}"))
        else:
            stream.append(candidate(input_=random_text(rng)))
    kept, report = filter_candidates(stream, SEEDS)
    assert report.total() == len(stream)
    assert report.counts["kept"] == len(kept)


def test_dedup_index_shared_across_batches():
    index = DedupIndex()
    kept1, _ = filter_candidates([candidate(input_="x")], SEEDS, index=index)
    kept2, report2 = filter_candidates([candidate(input_="x")], SEEDS, index=index)
    assert kept1 and not kept2
    assert report2.counts["duplicate"] == 1


# -------------------------------------------------------------- output generation


def test_generate_output_passthrough():
    backend = ScriptedBackend(["True"])
    result = generate_output(backend, candidate(constraints="The output should be 'True' or 'False'."))
    assert isinstance(result, CoreExample)
    assert result.output == "True"


def test_generate_output_empty_is_discarded():
    backend = ScriptedBackend([""])
    result = generate_output(backend, candidate())
    assert result == Discard("empty_output")


def test_generate_output_trims_whitespace():
    backend = ScriptedBackend(["  answer  "])
    result = generate_output(backend, candidate())
    assert result.output == "answer"


def test_generate_output_truncation_discarded_by_default():
    backend = ScriptedBackend([("partial outp", "length")])
    assert generate_output(backend, candidate()) == Discard("truncated")


def test_generate_output_truncation_kept_when_configured():
    backend = ScriptedBackend([("partial outp", "length")])
    result = generate_output(backend, candidate(), keep_truncated=True)
    assert result.output == "partial outp"


# ------------------------------------------------------------------ full pipeline


def _block(i: str, x: str, c: str = "None.") -> str:
    return f"Instruction: {i}\nInput: {x}\nConstraints: {c}"


def test_generate_core_dataset_counts_match_fixture_construction():
    # 6 sampling completions: one malformed, one duplicate, four good -> target 4
    script = [
        _block("Task one.", "input one"), "out-1",
        "Instruction: malformed, no input field\nConstraints: None.",
        _block("Task two.", "input two"), "out-2",
        _block("Task one.", "input one", "The output should be different."),  # duplicate pair
        _block("Task three.", "input three"), "out-3",
        _block("Task four.", "input four"), "out-4",
    ]
    backend = ScriptedBackend(script)
    result = generate_core_dataset(backend, GenerationSettings(seed_sets=SEEDS, target=4))
    assert len(result.examples) == 4
    assert result.report.counts == {
        "missing_fields": 1, "seed_copy": 0, "duplicate": 1, "kept": 4,
    }
    assert result.input_calls == 6 and result.output_calls == 4
    assert not result.budget_exhausted


def test_generate_core_dataset_target_zero_makes_no_calls():
    backend = ScriptedBackend(["should never be used"])
    result = generate_core_dataset(backend, GenerationSettings(seed_sets=SEEDS, target=0))
    assert result.examples == []
    assert backend.call_count == 0


def test_generate_core_dataset_cycles_seed_sets_round_robin():
    script = []
    for i in range(6):
        script.append(_block(f"Task {i}.", f"input {i}"))
        script.append(f"out-{i}")
    backend = ScriptedBackend(script)
    result = generate_core_dataset(backend, GenerationSettings(seed_sets=SEEDS, target=6))
    seed_ids = [e.candidate.provenance.seed_set_id for e in result.examples]
    assert seed_ids == [1, 2, 3, 4, 5, 1]


def test_generate_core_dataset_empty_output_retries_next_candidate():
    script = [
        _block("Task one.", "input one"), "",        # empty output -> discard
        _block("Task two.", "input two"), "out-2",
    ]
    backend = ScriptedBackend(script)
    result = generate_core_dataset(backend, GenerationSettings(seed_sets=SEEDS, target=1))
    assert len(result.examples) == 1
    assert result.examples[0].candidate.instruction == "Task two."
    assert result.discards == {"empty_output": 1, "truncated": 0}


def test_generate_core_dataset_budget_exhaustion_returns_partial():
    script = [
        _block("Task one.", "input one"), "out-1",
        _block("Task one.", "input one"),  # duplicate, rejected
        _block("Task one.", "input one"),  # duplicate, rejected
    ]
    backend = ScriptedBackend(script)
    settings = GenerationSettings(seed_sets=SEEDS, target=5, call_budget=3)
    result = generate_core_dataset(backend, settings)
    assert result.budget_exhausted
    assert len(result.examples) == 1
    assert result.input_calls == 3


def test_generate_core_dataset_is_deterministic_under_replay():
    script = [
        _block("Task one.", "input one"), "out-1",
        _block("Task two.", "input two"), "out-2",
    ]
    recorder = RecordingBackend(ScriptedBackend(script))
    settings = GenerationSettings(seed_sets=SEEDS, target=2)
    first = generate_core_dataset(recorder, settings)

    runs = []
    for max_in_flight in (1, 8):
        replay = ReplayBackend(recorder.entries)
        result = generate_core_dataset(
            replay,
            GenerationSettings(seed_sets=SEEDS, target=2, max_in_flight=max_in_flight),
        )
        runs.append([core_record_dict(e, f"core-{i:05d}") for i, e in enumerate(result.examples)])
    baseline = [core_record_dict(e, f"core-{i:05d}") for i, e in enumerate(first.examples)]
    assert runs[0] == runs[1] == baseline


def test_records_have_provenance_hashes():
    script = [_block("Task one.", "input one"), "out-1"]
    backend = ScriptedBackend(script)
    result = generate_core_dataset(backend, GenerationSettings(seed_sets=SEEDS, target=1))
    record = core_record_dict(result.examples[0], "core-00001")
    prov = record["provenance"]
    assert prov["seed_set_id"] == 1 and prov["style"] == "enumeration"
    assert len(prov["prompt_sha256"]) == 64 and len(prov["completion_sha256"]) == 64


def test_minimal_style_prefix_restored_before_parsing():
    # with the minimal meta-prompt the completion continues after the trailing
    # "Instruction:" cue, so the label itself is not in the completion text
    completion = " Task one.\nInput: input one\nConstraints: None."
    backend = ScriptedBackend([completion, "out-1"])
    settings = GenerationSettings(seed_sets=SEEDS, target=1, style=PromptStyle.MINIMAL)
    result = generate_core_dataset(backend, settings)
    assert result.examples[0].candidate.instruction == "Task one."


# ---------------------------------------------------------------------- one-step


def test_one_step_single_pass():
    script = [_block("Task one.", "input one") + "\nOutput: the answer"]
    backend = ScriptedBackend(script)
    result = generate_one_step(backend, GenerationSettings(seed_sets=SEEDS, target=1))
    assert len(result.examples) == 1
    assert result.examples[0].output == "the answer"
    assert result.output_calls == 0
    assert backend.call_count == 1


def test_one_step_missing_output_counts_as_missing_field():
    script = [
        _block("Task one.", "input one"),  # no Output field
        _block("Task two.", "input two") + "\nOutput: ok",
    ]
    backend = ScriptedBackend(script)
    result = generate_one_step(backend, GenerationSettings(seed_sets=SEEDS, target=1))
    assert result.report.counts["missing_fields"] == 1
    assert len(result.examples) == 1


def test_one_step_records_share_schema_with_two_step():
    one_step_backend = ScriptedBackend([_block("T.", "x") + "\nOutput: y"])
    two_step_backend = ScriptedBackend([_block("T.", "x"), "y"])
    one = generate_one_step(one_step_backend, GenerationSettings(seed_sets=SEEDS, target=1))
    two = generate_core_dataset(two_step_backend, GenerationSettings(seed_sets=SEEDS, target=1))
    record_one = core_record_dict(one.examples[0], "core-00001")
    record_two = core_record_dict(two.examples[0], "core-00001")
    assert record_one.keys() == record_two.keys()
    assert record_one["provenance"].keys() == record_two["provenance"].keys()
