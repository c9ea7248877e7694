"""Reward-guided tree search for inference-time alignment.

Explores with instruction mutation and exploits with reward-guided beam
replacement; ships mock and HTTP backends and trace analysis tooling.
"""

from .core import (
    EOS,
    Archive,
    BeamState,
    ConfigError,
    ConfigValidationError,
    Instruction,
    SearchConfig,
    SearchTrace,
    load_config,
    new_config,
    seeded_rng,
)
from .search import (
    Backends,
    SearchAborted,
    archive_sample,
    archive_update,
    best_of_n,
    darwin_run,
    rank_beams,
    replacement_step,
    run_replacement_search,
    run_strategy,
    sample_n,
    top_k_instructions,
)

__version__ = "0.1.0"
