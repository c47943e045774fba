"""Monte Carlo tree search over partial SQL programs.

Each rollout walks the tree by UCT, expands the reached leaf with the
policy's beam (clipped to clause fragments, de-duplicated, pruned, top-d),
completes one new child greedily, scores the finished query with a blend of
fragment confidence, whole-query confidence and execution feedback, and
backs that value up the path.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from typing import Optional

from .errors import ConfigError, DeadEnd, EmptyBeam, UnscorableSequence
from .fragmenter import (
    DEFAULT_BOUNDARY_SET,
    BoundarySet,
    clip_continuation,
    is_complete_sql,
    jaccard,
    similarity_tokens,
)
from .policy import Continuation, Policy, PolicyConfig, self_reward
from .pruning import PruningConfig, StepScores, filter_candidates
from .schema_env import BLIND, ORACLE, DatabaseSchema, QueryTask, SqlEnv, serialize_context

log = logging.getLogger(__name__)

PRESETS = {
    "spider": {"n_rollouts": 6, "max_depth": 8, "exploration_weight": 0.7},
    "bird": {"n_rollouts": 8, "max_depth": 12, "exploration_weight": 0.8},
}


@dataclass
class SearchConfig:
    n_rollouts: int = 6
    beam_width: int = 5
    top_d: int = 3
    max_depth: int = 8
    exploration_weight: float = 0.7
    delta: float = 0.5
    similarity_threshold: float = 0.7
    reward_mode: str = ORACLE
    early_stop: bool = True

    def __post_init__(self):
        if self.n_rollouts < 1:
            raise ConfigError("n_rollouts must be >= 1")
        if self.max_depth < 1:
            raise ConfigError("max_depth must be >= 1")
        if self.beam_width < 1:
            raise ConfigError("beam_width must be >= 1")
        if not 1 <= self.top_d <= self.beam_width:
            raise ConfigError("top_d must satisfy 1 <= d <= beam_width")
        if not 0.0 < self.delta < 1.0:
            raise ConfigError("delta must lie strictly between 0 and 1")
        if self.exploration_weight < 0:
            raise ConfigError("exploration_weight must be >= 0")
        if not 0.0 <= self.similarity_threshold <= 1.0:
            raise ConfigError("similarity_threshold must lie in [0, 1]")
        if self.reward_mode not in (ORACLE, BLIND):
            raise ConfigError(f"reward_mode must be {ORACLE!r} or {BLIND!r}")

    @classmethod
    def preset(cls, name: str, **overrides) -> "SearchConfig":
        try:
            base = dict(PRESETS[name])
        except KeyError:
            raise ConfigError(f"unknown preset {name!r}") from None
        base.update(overrides)
        return cls(**base)

    @property
    def node_budget(self) -> int:
        return 1 + self.n_rollouts * self.top_d * self.max_depth


class SearchNode:
    """One partial-SQL state; ``sql`` is the concatenation of fragments from the root."""

    __slots__ = ("context", "sql", "fragment", "fragment_logprob", "path_logprob", "reward",
                 "q_value", "visits", "depth", "children", "parent", "is_terminal",
                 "ends_sequence", "dead")

    def __init__(self, context: str, sql: str = "", fragment: str = "", fragment_logprob: float = 0.0,
                 reward: float = 0.0, depth: int = 0, parent: Optional["SearchNode"] = None,
                 ends_sequence: bool = False, is_terminal: bool = False):
        self.context = context
        self.sql = sql
        self.fragment = fragment
        self.fragment_logprob = fragment_logprob
        self.path_logprob = (parent.path_logprob if parent else 0.0) + fragment_logprob
        self.reward = reward
        self.q_value = reward
        self.visits = 0
        self.depth = depth
        self.children: list[SearchNode] = []
        self.parent = parent
        self.ends_sequence = ends_sequence
        self.is_terminal = is_terminal
        self.dead = False

    @property
    def state_text(self) -> str:
        return self.context + self.sql

    def path(self) -> list["SearchNode"]:
        out = []
        node: Optional[SearchNode] = self
        while node is not None:
            out.append(node)
            node = node.parent
        return out[::-1]

    def iter_nodes(self):
        stack = [self]
        while stack:
            node = stack.pop()
            yield node
            stack.extend(reversed(node.children))

    def __repr__(self) -> str:
        return f"SearchNode(depth={self.depth}, sql={self.sql!r}, q={self.q_value:.4f}, n={self.visits})"


@dataclass(frozen=True)
class RewardBreakdown:
    process_reward: float
    global_reward: float
    exec_reward: int
    delta: float = 0.5

    @property
    def blended_q(self) -> float:
        return self.delta * self.process_reward + (1 - self.delta) * (self.global_reward + self.exec_reward)


@dataclass(frozen=True)
class Trajectory:
    nodes: tuple
    final_sql: str
    leaf_q: float
    breakdown: RewardBreakdown
    complete: bool


@dataclass
class SearchStats:
    nodes_created: int = 1
    rollouts_used: int = 0
    candidates_scored: int = 0
    candidates_pruned: int = 0
    expansions: int = 0
    dead_ends: int = 0
    elapsed_ms: float = 0.0

    @property
    def prune_rate(self) -> float:
        return self.candidates_pruned / self.candidates_scored if self.candidates_scored else 0.0


@dataclass
class SearchResult:
    final_sql: str
    leaf_q: float
    exec_reward: int
    early_stopped: bool
    fallback: bool
    stats: SearchStats
    trajectories: list = field(default_factory=list)
    root: Optional[SearchNode] = None

    def to_record(self, task: QueryTask) -> dict:
        return {
            "id": task.id,
            "db_id": task.db_id,
            "predicted_sql": self.final_sql,
            "leaf_q": self.leaf_q,
            "exec_reward": self.exec_reward,
            "rollouts_used": self.stats.rollouts_used,
            "nodes_created": self.stats.nodes_created,
            "elapsed_ms": round(self.stats.elapsed_ms, 3),
            "early_stopped": self.early_stopped,
            "fallback": self.fallback,
            "candidates_scored": self.stats.candidates_scored,
            "candidates_pruned": self.stats.candidates_pruned,
            "failure": None,
        }


def uct_score(child: SearchNode, parent_visits: int, w: float) -> float:
    return child.q_value + w * math.sqrt(math.log(max(parent_visits, 1))) / child.visits


def select(root: SearchNode, exploration_weight: float = 0.7) -> list[SearchNode]:
    """Walk from ``root`` to a leaf by UCT.

    Unvisited children win outright; among them, and on UCT ties, the higher
    fragment log-probability wins, then the earlier child.
    """
    path = [root]
    node = root
    while node.children and not node.is_terminal:
        best, best_key = None, None
        unvisited = any(c.visits == 0 for c in node.children)
        for child in node.children:
            if unvisited:
                if child.visits != 0:
                    continue
                key = (child.fragment_logprob,)
            else:
                key = (uct_score(child, node.visits, exploration_weight), child.fragment_logprob)
            if best_key is None or key > best_key:
                best, best_key = child, key
        node = best
        path.append(node)
    return path


def _clip(cont: Continuation, boundaries: BoundarySet) -> tuple[str, bool]:
    fragment, clip_ends = clip_continuation(cont.text, boundaries)
    if fragment == cont.text:
        return fragment, cont.ends_sequence or clip_ends
    return fragment, clip_ends


def expand(node: SearchNode, policy: Policy, pruning: PruningConfig, config: SearchConfig,
           policy_config: Optional[PolicyConfig] = None, stats: Optional[SearchStats] = None,
           boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> list[SearchNode]:
    """Attach up to ``top_d`` children to ``node`` and return them best-first."""
    if node.is_terminal or node.depth >= config.max_depth:
        raise ValueError("cannot expand a terminal node or one at maximum depth")
    pc = replace(policy_config or PolicyConfig(), beam_width=config.beam_width)
    try:
        beam = policy.beam_continuations(node.state_text, pc)
    except EmptyBeam as exc:
        raise DeadEnd(str(exc)) from exc

    scored = []
    for order, cont in enumerate(beam):
        fragment, ends = _clip(cont, boundaries)
        if not fragment.strip():
            continue
        scored.append((self_reward(cont.total_logprob, pc), order, fragment, ends, cont.total_logprob))
    scored.sort(key=lambda s: (-s[0], s[1]))

    kept, kept_tokens = [], []
    for cand in scored:
        toks = similarity_tokens(cand[2])
        if any(jaccard(toks, other) >= config.similarity_threshold for other in kept_tokens):
            continue
        kept.append(cand)
        kept_tokens.append(toks)
    if not kept:
        raise DeadEnd("no candidate survived de-duplication")

    step = node.depth + 1
    retained = filter_candidates(kept, StepScores(step, tuple(c[0] for c in kept)), pruning)
    if stats is not None:
        stats.expansions += 1
        stats.candidates_scored += len(kept)
        stats.candidates_pruned += len(kept) - len(retained)

    for reward, _, fragment, ends, lp in retained[: config.top_d]:
        child = SearchNode(
            node.context, node.sql + fragment, fragment, lp, reward, step, node,
            ends_sequence=ends, is_terminal=ends or step >= config.max_depth,
        )
        node.children.append(child)
    if stats is not None:
        stats.nodes_created += len(node.children)
    return list(node.children)


def simulate(node: SearchNode, policy: Policy, env: SqlEnv, task: QueryTask, config: SearchConfig,
             policy_config: Optional[PolicyConfig] = None,
             boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> tuple[str, RewardBreakdown, bool]:
    """Greedily finish ``node`` and score the result.

    Returns ``(final_sql, breakdown, complete)``.  Unfinished or dead-end
    rollouts score an execution reward of -1 without being executed.
    """
    pc = policy_config or PolicyConfig()
    sql = node.sql
    depth = node.depth
    ended = node.ends_sequence
    logprob = node.path_logprob
    while not ended and not node.dead and depth < config.max_depth:
        try:
            cont = policy.greedy_continuation(node.context + sql, pc)
        except EmptyBeam:
            break
        fragment, ends = _clip(cont, boundaries)
        if not fragment:
            break
        sql += fragment
        logprob += cont.total_logprob
        depth += 1
        ended = ends

    complete = ended and is_complete_sql(sql)
    process = self_reward(node.fragment_logprob, pc)
    seq_lp = logprob
    if sql:
        try:
            seq_lp = policy.sequence_logprob(node.context, sql)
        except UnscorableSequence:
            pass
    global_reward = self_reward(seq_lp, pc)
    if complete:
        exec_reward = env.reward(sql, task.gold_sql, config.reward_mode)
    else:
        exec_reward = -1
    return sql, RewardBreakdown(process, global_reward, exec_reward, config.delta), complete


def backpropagate(path: list[SearchNode], leaf_q: float) -> None:
    """Back up a rollout value along ``path`` (root first, leaf last).

    Each node on the path scores the mean value of the path segment from
    itself down to the leaf, where interior nodes contribute their own
    fragment reward and the leaf contributes ``leaf_q``; a node keeps the best
    such mean over every rollout through it.  A node's first backup replaces
    its expansion-time prior.
    """
    values = [n.reward for n in path[:-1]] + [leaf_q]
    total = 0.0
    for idx in range(len(path) - 1, -1, -1):
        total += values[idx]
        candidate = total / (len(path) - idx)
        node = path[idx]
        node.q_value = candidate if node.visits == 0 else max(node.q_value, candidate)
        node.visits += 1


def _better(a: Trajectory, b: Optional[Trajectory]) -> bool:
    if b is None:
        return True
    if a.leaf_q != b.leaf_q:
        return a.leaf_q > b.leaf_q
    return a.breakdown.global_reward > b.breakdown.global_reward


def run_mcts(task: QueryTask, schema: DatabaseSchema, policy: Policy, env: SqlEnv,
             config: Optional[SearchConfig] = None, policy_config: Optional[PolicyConfig] = None,
             pruning: Optional[PruningConfig] = None,
             boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> SearchResult:
    config = config or SearchConfig()
    pc = replace(policy_config or PolicyConfig(), beam_width=config.beam_width)
    pruning = pruning or PruningConfig.for_depth(config.max_depth)
    start = time.monotonic()
    stats = SearchStats()
    root = SearchNode(serialize_context(schema, task.question, task.evidence))
    trajectories: list[Trajectory] = []
    best: Optional[Trajectory] = None
    early = False

    for _ in range(config.n_rollouts):
        path = select(root, config.exploration_weight)
        leaf = path[-1]
        if not leaf.is_terminal and not leaf.children and leaf.depth < config.max_depth:
            try:
                children = expand(leaf, policy, pruning, config, pc, stats, boundaries)
            except DeadEnd:
                leaf.dead = leaf.is_terminal = True
                stats.dead_ends += 1
                children = []
            if children:
                leaf = children[0]
                path.append(leaf)
        sql, breakdown, complete = simulate(leaf, policy, env, task, config, pc, boundaries)
        q = breakdown.blended_q
        backpropagate(path, q)
        stats.rollouts_used += 1
        traj = Trajectory(tuple(path), sql, q, breakdown, complete)
        trajectories.append(traj)
        if _better(traj, best):
            best = traj
        if config.reward_mode == ORACLE and config.early_stop and breakdown.exec_reward == 1:
            best, early = traj, True
            break

    fallback = False
    if best is None or all(t.breakdown.exec_reward == -1 for t in trajectories):
        fallback = True
        sql, breakdown, complete = simulate(root, policy, env, task, config, pc, boundaries)
        best = Trajectory((root,), sql, breakdown.blended_q, breakdown, complete)

    stats.elapsed_ms = (time.monotonic() - start) * 1000.0
    if stats.nodes_created > config.node_budget:
        log.error("node budget exceeded: %d > %d", stats.nodes_created, config.node_budget)
    return SearchResult(best.final_sql, best.leaf_q, best.breakdown.exec_reward, early, fallback,
                        stats, trajectories, root)


def greedy_decode(task: QueryTask, schema: DatabaseSchema, policy: Policy, max_depth: int = 8,
                  policy_config: Optional[PolicyConfig] = None,
                  boundaries: BoundarySet = DEFAULT_BOUNDARY_SET) -> str:
    """Single-pass argmax decoding, fragment by fragment, at temperature 0."""
    pc = replace(policy_config or PolicyConfig(), decode_temperature=0.0)
    context = serialize_context(schema, task.question, task.evidence)
    sql = ""
    for _ in range(max_depth):
        try:
            cont = policy.greedy_continuation(context + sql, pc)
        except EmptyBeam:
            break
        fragment, ends = _clip(cont, boundaries)
        if not fragment:
            break
        sql += fragment
        if ends:
            break
    return sql
