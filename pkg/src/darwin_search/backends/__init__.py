from .base import (
    BackendError,
    GenerationBackend,
    GenerationRequest,
    GenerationResult,
    Instrumented,
    MutationBackend,
    MutationError,
    ProtocolError,
    RetriableBackendError,
    RewardBackend,
    RewardDisciplineError,
    RewardRequest,
    generate_batch,
    mutate,
    mutate_with_status,
    pad_mutations,
    score_batch,
)
from .mocks import (
    AppendMutator,
    BiasedCoinGenerator,
    CountReward,
    IdentityMutator,
    ListMutator,
    MockSuite,
    MOCK_SUITES,
    PreferencePairReward,
    PrefixMonotoneGenerator,
    RuleGenerator,
    ScriptedGenerator,
    SuffixMutator,
    WeightedSubstringReward,
    bang_rule,
    mock_suite,
)
from .prompts import LLMMutator, MUTATOR_TEMPLATE, parse_numbered_list, render_mutator_prompt
from .http import HTTPGenerationBackend, HTTPRewardBackend, backends_from_env
