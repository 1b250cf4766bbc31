"""Demographic-to-values mapping toolkit.

Builds high-consensus (demographic profile, question) answer corpora from
survey microdata, splits them into generalization benchmarks, renders and
scores multiple-choice prompts, and runs the companion analyses: GRPO-style
tabular training, random-forest attribute attribution, counterfactual flip
rates, and semantic-distance profiles.
"""

__version__ = "0.1.0"

from .archetype import (
    ConsensusRecord,
    DemographicProfile,
    FilterStats,
    Histogram,
    derive_profile,
    extract_consensus,
    shannon_entropy,
)
from .benchmark import (
    CorpusBundle,
    CorpusSample,
    CounterfactualPair,
    SplitSpec,
    build_splits,
    make_counterfactual_pairs,
    profile_fingerprint,
)
from .config import ConfigError, RunConfig, load_config
from .grpo import (
    RewardConfig,
    TabularPolicy,
    TrainerConfig,
    compute_reward,
    group_advantages,
    train_toy,
)
from .inference import CompletionCache, EndpointConfig, PredictionRecord, run_eval
from .metrics import (
    EvalReport,
    accuracy,
    aggregate_report,
    flip_rate,
    likert_consistency,
    pearson,
    wasserstein,
)
from .prompt import ParseResult, PromptInstance, parse_answer, render_prompt
from .semdist import EmbeddingTable, cosine_distance, distance_profile, gain_distance_correlation
from .survey import Codebook, Respondent, load_codebook, load_survey_csv
from .attribution import ForestConfig, ImportanceMatrix, importance_matrix, mdi_importance

__all__ = [
    "__version__",
    "Codebook", "Respondent", "load_codebook", "load_survey_csv",
    "DemographicProfile", "Histogram", "ConsensusRecord", "FilterStats",
    "derive_profile", "extract_consensus", "shannon_entropy",
    "SplitSpec", "CorpusSample", "CorpusBundle", "CounterfactualPair",
    "build_splits", "make_counterfactual_pairs", "profile_fingerprint",
    "PromptInstance", "ParseResult", "render_prompt", "parse_answer",
    "EvalReport", "accuracy", "likert_consistency", "wasserstein", "pearson",
    "flip_rate", "aggregate_report",
    "RewardConfig", "TrainerConfig", "TabularPolicy",
    "compute_reward", "group_advantages", "train_toy",
    "ForestConfig", "ImportanceMatrix", "importance_matrix", "mdi_importance",
    "EmbeddingTable", "cosine_distance", "distance_profile", "gain_distance_correlation",
    "EndpointConfig", "PredictionRecord", "CompletionCache", "run_eval",
    "RunConfig", "ConfigError", "load_config",
]
