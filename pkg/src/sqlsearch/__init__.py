"""Self-reward guided Monte Carlo tree search for text-to-SQL."""

from .errors import (
    ConfigError,
    DeadEnd,
    EmptyBeam,
    PolicyUnavailable,
    SqlSearchError,
)
from .policy import Continuation, PolicyConfig, RemotePolicy, ScriptedPolicy, self_reward
from .pruning import PruningConfig, StepScores, filter_candidates, threshold
from .schema_env import (
    DatabaseSchema,
    ExecutionOutcome,
    QueryTask,
    SqlEnv,
    compare_results,
    execute_sql,
    execution_reward,
    introspect_schema,
    serialize_context,
)
from .search import SearchConfig, SearchNode, run_mcts

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "DeadEnd", "EmptyBeam", "PolicyUnavailable", "SqlSearchError",
    "Continuation", "PolicyConfig", "RemotePolicy", "ScriptedPolicy", "self_reward",
    "PruningConfig", "StepScores", "filter_candidates", "threshold",
    "DatabaseSchema", "ExecutionOutcome", "QueryTask", "SqlEnv", "compare_results",
    "execute_sql", "execution_reward", "introspect_schema", "serialize_context",
    "SearchConfig", "SearchNode", "run_mcts",
]
