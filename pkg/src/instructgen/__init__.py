"""instructgen: automatic instruction-tuning dataset generation.

Pipeline pieces: few-shot prompt construction (`prompting`), completion
backends with record/replay (`backend`), the parse/filter/generate core
(`structgen`), paraphrase template expansion (`expansion`), and dataset
measurement (`analysis`). The `cli` module wires them into commands.
"""

from .analysis import (
    CostModel,
    ExternalScorer,
    SimilarityDistribution,
    dataset_stats,
    estimate_cost,
    sample_pair_similarities,
    token_overlap_score,
)
from .backend import (
    BackendConfig,
    CompletionRequest,
    CompletionResult,
    DecodingParams,
    HttpBackend,
    RecordingBackend,
    ReplayBackend,
    ScriptedBackend,
    record_session,
    replay_session,
)
from .expansion import (
    ExpandedRecord,
    ParaphraseRejected,
    ParaphraseTemplate,
    expand_dataset,
    expansion_record_count,
    generate_paraphrases,
    instantiate,
    validate_paraphrase,
)
from .prompting import (
    Demonstration,
    PromptStyle,
    RephraseDemo,
    SeedSet,
    builtin_rephrase_demos,
    builtin_seed_sets,
    render_generation_prompt,
    render_one_step_prompt,
    render_output_prompt,
    render_rephrase_prompt,
)
from .structgen import (
    CoreExample,
    Discard,
    FilterReport,
    GenerationSettings,
    MissingFieldError,
    StructuredCandidate,
    filter_candidates,
    generate_core_dataset,
    generate_one_step,
    generate_output,
    parse_structured_completion,
)

__version__ = "0.1.0"
